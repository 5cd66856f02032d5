//! Static cost analysis and gradient checking.

mod cost;
mod gradcheck;
mod suites;

pub use cost::{
    cost_report, count_multadds, count_params, grid_csv, grid_table, linear_params, shrink_grid, CostReport, GridRow,
    LayerCost, CONVENTION, GRID_STEPS,
};
pub use gradcheck::{gradcheck, relative_error, GradcheckConfig, GradcheckReport, Offender};
pub use suites::{model_gradcheck, op_suite, project};
