//! Network description, layers, the omni-scale block and model assembly.

mod block;
mod layers;
mod model;
mod spec;

pub use block::{shared_gate_gradient, AggregationGate, BlockOutput, FusionLayer, GateVars, OSBlock, SharedGateGradients};
pub use layers::{
    lite_multadds, Conv, ConvUnit, Ctx, LayerKind, LayerRecord, Linear, LiteConv3x3, Norm, StreamLayer, NORM_EPS,
    NORM_MOMENTUM,
};
pub use model::{
    build_model, receptive_field, receptive_field_probe, ForwardOutput, LadderRow, OSNetModel, ReceptiveFieldProbe,
    Stage,
};
pub use spec::{scale_width, ConvKind, DepthMode, Fusion, NetworkSpec};
