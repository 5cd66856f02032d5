//! Parameter and multiply-add accounting.

use std::fmt::Write as _;

use crate::arch::{build_model, LayerKind, NetworkSpec, OSNetModel};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Scalar;

pub const CONVENTION: &str = "params: learnable tensors of the feature extractor (conv weights, biases, \
norm affine, gate, fc), classifier head separate; multadds: conv and fc multiply-accumulates only, \
gate networks in a separate column";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub multadds: u64,
    /// Gate network multiply-adds, excluded from `multadds`.
    pub gate_multadds: u64,
    /// Pooling and normalization element operations, excluded from `multadds`.
    pub other_ops: u64,
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub input_height: usize,
    pub input_width: usize,
    pub layers: Vec<LayerCost>,
    pub params_total: u64,
    pub multadds_total: u64,
    pub gate_multadds_total: u64,
    pub other_ops_total: u64,
    pub head_params: u64,
    pub head_multadds: u64,
    pub convention: &'static str,
}

/// Per-sample cost of every layer at the given input size.
pub fn cost_report<T: Scalar>(
    model: &OSNetModel,
    store: &ParamStore<T>,
    height: usize,
    width: usize,
) -> Result<CostReport> {
    let mut layers = Vec::new();
    for rec in model.layers(height, width)? {
        let params: u64 = rec
            .params
            .iter()
            .map(|&id| store.get(id))
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.value.len() as u64)
            .sum();
        let [oc, oh, ow] = rec.out_shape.map(|v| v as u64);
        let [ic, ih, iw] = rec.in_shape.map(|v| v as u64);
        let (multadds, gate, other) = match rec.kind {
            LayerKind::Conv {
                in_c,
                out_c,
                kernel,
                groups,
                ..
            } => (oh * ow * out_c as u64 * (in_c / groups) as u64 * (kernel * kernel) as u64, 0, 0),
            LayerKind::Linear { in_f, out_f } => ((in_f * out_f) as u64, 0, 0),
            LayerKind::Gate { macs } => (0, macs, 0),
            LayerKind::Norm { .. } => (0, 0, oc * oh * ow),
            LayerKind::Pool { window } => (0, 0, oc * oh * ow * (window * window) as u64),
            LayerKind::GlobalPool => (0, 0, ic * ih * iw),
        };
        layers.push(LayerCost {
            name: rec.name,
            params,
            multadds,
            gate_multadds: gate,
            other_ops: other,
            head: rec.head,
        });
    }
    let body = || layers.iter().filter(|l| !l.head);
    let head = || layers.iter().filter(|l| l.head);
    Ok(CostReport {
        input_height: height,
        input_width: width,
        params_total: body().map(|l| l.params).sum(),
        multadds_total: body().map(|l| l.multadds).sum(),
        gate_multadds_total: body().map(|l| l.gate_multadds).sum(),
        other_ops_total: body().map(|l| l.other_ops).sum(),
        head_params: head().map(|l| l.params).sum(),
        head_multadds: head().map(|l| l.multadds).sum(),
        layers,
        convention: CONVENTION,
    })
}

/// Cost report at the spec's own input size.
pub fn count_params<T: Scalar>(model: &OSNetModel, store: &ParamStore<T>) -> Result<CostReport> {
    cost_report(model, store, model.spec.input_height, model.spec.input_width)
}

pub fn count_multadds<T: Scalar>(
    model: &OSNetModel,
    store: &ParamStore<T>,
    height: usize,
    width: usize,
) -> Result<CostReport> {
    cost_report(model, store, height, width)
}

/// Multiply-adds of a linear layer with bias are in·out; parameters in·out+out.
pub fn linear_params(in_f: usize, out_f: usize, bias: bool) -> u64 {
    (in_f * out_f + if bias { out_f } else { 0 }) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub beta: f64,
    pub gamma: f64,
    pub height: usize,
    pub width: usize,
    pub params: u64,
    pub multadds: u64,
}

pub const GRID_STEPS: [f64; 4] = [1.0, 0.75, 0.5, 0.25];

/// Costs over width multipliers × resolution multipliers.
pub fn shrink_grid(base: &NetworkSpec, betas: &[f64], gammas: &[f64]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &beta in betas {
        let spec = NetworkSpec {
            width_multiplier: beta,
            ..base.clone()
        };
        let (model, store) = build_model::<f32>(&spec, 0)?;
        for &gamma in gammas {
            let sized = spec.clone().with_resolution_multiplier(gamma);
            let r = cost_report(&model, &store, sized.input_height, sized.input_width)?;
            rows.push(GridRow {
                beta,
                gamma,
                height: sized.input_height,
                width: sized.input_width,
                params: r.params_total,
                multadds: r.multadds_total,
            });
        }
    }
    Ok(rows)
}

fn millions(v: u64) -> String {
    format!("{:.2}M", v as f64 / 1e6)
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,multadds\n");
        for l in &self.layers {
            let _ = writeln!(s, "{},{},{}", l.name, l.params, l.multadds);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:>12}  {:>14}  {:>12}  {:>12}",
            "layer", "params", "multadds", "gate_madds", "other_ops"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<w$}  {:>12}  {:>14}  {:>12}  {:>12}{}",
                l.name,
                l.params,
                l.multadds,
                l.gate_multadds,
                l.other_ops,
                if l.head { "  (head)" } else { "" }
            );
        }
        let _ = writeln!(s, "input {}x{}", self.input_height, self.input_width);
        let _ = writeln!(s, "params {} ({})", self.params_total, millions(self.params_total));
        let _ = writeln!(s, "multadds {} ({})", self.multadds_total, millions(self.multadds_total));
        let _ = writeln!(s, "gate multadds {}", self.gate_multadds_total);
        let _ = writeln!(s, "other ops {}", self.other_ops_total);
        let _ = writeln!(s, "head params {} multadds {}", self.head_params, self.head_multadds);
        let _ = writeln!(s, "convention: {}", self.convention);
        s
    }
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut s = String::from("beta,gamma,input,params,multadds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}x{},{},{}", r.beta, r.gamma, r.height, r.width, r.params, r.multadds);
    }
    s
}

pub fn grid_table(rows: &[GridRow]) -> String {
    let mut s = format!("{:>5}  {:>5}  {:>8}  {:>10}  {:>10}\n", "beta", "gamma", "input", "params", "multadds");
    for r in rows {
        let _ = writeln!(
            s,
            "{:>5}  {:>5}  {:>8}  {:>10}  {:>10}",
            r.beta,
            r.gamma,
            format!("{}x{}", r.height, r.width),
            millions(r.params),
            millions(r.multadds)
        );
    }
    s
}
