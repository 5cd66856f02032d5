//! SGD with momentum and AMSGrad, with per-epoch learning-rate schedules.
//! Update rules follow the common deep-learning framework definitions:
//! weight decay is added to the gradient before the update.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    Constant,
    /// lr · factor^(number of milestones ≤ epoch).
    StepDecay { milestones: Vec<usize>, factor: f64 },
    /// min_lr + (lr − min_lr)(1 + cos(π·epoch/t_max))/2, constant after t_max.
    Cosine { t_max: usize, min_lr: f64 },
}

impl Schedule {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                base * factor.powi(passed as i32)
            }
            Schedule::Cosine { t_max, min_lr } => {
                let t = epoch.min(*t_max) as f64 / (*t_max).max(1) as f64;
                min_lr + (base - min_lr) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::StepDecay { milestones, factor } => {
                if !(*factor > 0.0 && *factor <= 1.0) {
                    return Err(Error::invalid(format!("decay factor must lie in (0,1], got {}", factor)));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("milestones must be strictly increasing"));
                }
                Ok(())
            }
            Schedule::Cosine { t_max, min_lr } => {
                if *t_max == 0 || !(*min_lr >= 0.0) {
                    return Err(Error::invalid("cosine schedule needs t_max ≥ 1 and min_lr ≥ 0"));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => f.write_str("constant"),
            Schedule::StepDecay { milestones, factor } => {
                let m: Vec<String> = milestones.iter().map(|m| m.to_string()).collect();
                write!(f, "step:{}:{}", m.join("/"), factor)
            }
            Schedule::Cosine { t_max, min_lr } => write!(f, "cosine:{}:{}", t_max, min_lr),
        }
    }
}

/// `constant`, `step:150/225/300:0.1` or `cosine:T_MAX[:MIN_LR]`.
impl FromStr for Schedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::invalid(format!("invalid schedule '{}'", s));
        let sched = match parts[..] {
            ["constant"] => Schedule::Constant,
            ["step", ms, factor] => Schedule::StepDecay {
                milestones: ms
                    .split('/')
                    .filter(|m| !m.is_empty())
                    .map(|m| m.parse().map_err(|_| bad()))
                    .collect::<Result<_>>()?,
                factor: factor.parse().map_err(|_| bad())?,
            },
            ["cosine", t] => Schedule::Cosine {
                t_max: t.parse().map_err(|_| bad())?,
                min_lr: 0.0,
            },
            ["cosine", t, m] => Schedule::Cosine {
                t_max: t.parse().map_err(|_| bad())?,
                min_lr: m.parse().map_err(|_| bad())?,
            },
            _ => return Err(bad()),
        };
        sched.validate()?;
        Ok(sched)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f64, dampening: f64, nesterov: bool },
    AmsGrad { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimKind::Sgd {
            momentum,
            dampening: 0.0,
            nesterov: false,
        }
    }

    pub fn amsgrad() -> Self {
        OptimKind::AmsGrad {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimKind::Sgd { .. } => "sgd",
            OptimKind::AmsGrad { .. } => "amsgrad",
        }
    }

    fn slots(&self) -> &'static [&'static str] {
        match self {
            OptimKind::Sgd { .. } => &["momentum"],
            OptimKind::AmsGrad { .. } => &["exp_avg", "exp_avg_sq", "max_exp_avg_sq"],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::amsgrad(),
            lr: 0.0015,
            weight_decay: 5e-4,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        match self.kind {
            OptimKind::Sgd { momentum, dampening, .. } => {
                if !(0.0..1.0).contains(&momentum) || !(0.0..=1.0).contains(&dampening) {
                    return Err(Error::invalid("sgd needs momentum in [0,1) and dampening in [0,1]"));
                }
            }
            OptimKind::AmsGrad { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::invalid("amsgrad needs betas in [0,1) and eps > 0"));
                }
            }
        }
        self.schedule.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule.lr_at(self.lr, epoch)
    }
}

/// Optimizer state: one buffer set per parameter, shaped like it.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar> {
    pub config: OptimConfig,
    /// Update count per parameter (AMSGrad bias correction).
    steps: Vec<u64>,
    state: Vec<Option<Vec<Tensor<T>>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            steps: Vec::new(),
            state: Vec::new(),
        })
    }

    /// Applies one update with learning rate `lr` to every trainable
    /// parameter holding a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let n = store.len();
        self.steps.resize(n, 0);
        self.state.resize(n, None);
        let wd = self.config.weight_decay;
        let kind = self.config.kind;
        let slots = kind.slots().len();
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            if grad.shape() != p.value.shape() {
                return Err(Error::shape("optimizer", format!("{:?}", p.value.shape()), format!("{:?}", grad.shape())));
            }
            let first = self.state[i].is_none();
            let st = self.state[i].get_or_insert_with(|| vec![p.value.zeros_like(); slots]);
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let g = grad.data();
            let w = p.value.data_mut();
            match kind {
                OptimKind::Sgd {
                    momentum,
                    dampening,
                    nesterov,
                } => {
                    let buf = st[0].data_mut();
                    for k in 0..w.len() {
                        let wk = w[k].as_f64();
                        let mut d = g[k].as_f64() + wd * wk;
                        if momentum != 0.0 {
                            let b = if first {
                                d
                            } else {
                                momentum * buf[k].as_f64() + (1.0 - dampening) * d
                            };
                            buf[k] = T::of(b);
                            d = if nesterov { d + momentum * b } else { b };
                        }
                        w[k] = T::of(wk - lr * d);
                    }
                }
                OptimKind::AmsGrad { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = (1.0 - beta2.powi(t)).sqrt();
                    let (m, rest) = st.split_at_mut(1);
                    let (v, vmax) = rest.split_at_mut(1);
                    let (m, v, vmax) = (m[0].data_mut(), v[0].data_mut(), vmax[0].data_mut());
                    for k in 0..w.len() {
                        let wk = w[k].as_f64();
                        let d = g[k].as_f64() + wd * wk;
                        let mk = beta1 * m[k].as_f64() + (1.0 - beta1) * d;
                        let vk = beta2 * v[k].as_f64() + (1.0 - beta2) * d * d;
                        let vm = vmax[k].as_f64().max(vk);
                        m[k] = T::of(mk);
                        v[k] = T::of(vk);
                        vmax[k] = T::of(vm);
                        w[k] = T::of(wk - (lr / bc1) * mk / (vm.sqrt() / bc2 + eps));
                    }
                }
            }
        }
        Ok(())
    }

    /// State buffers as named tensors (`optim.<param>.<slot>`), plus the
    /// update counts as a tensor named `optim.<param>.steps`.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            let i = id.index();
            if let Some(Some(st)) = self.state.get(i) {
                for (slot, t) in self.config.kind.slots().iter().zip(st) {
                    out.push((format!("optim.{}.{}", p.name, slot), t.clone()));
                }
                out.push((format!("optim.{}.steps", p.name), Tensor::scalar(T::of(self.steps[i] as f64))));
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::export`].
    pub fn import(&mut self, store: &ParamStore<T>, extra: &[(String, Tensor<T>)]) -> Result<()> {
        let n = store.len();
        self.steps = vec![0; n];
        self.state = vec![None; n];
        let find = |name: &str| extra.iter().find(|(k, _)| k == name).map(|(_, t)| t);
        for (id, p) in store.iter() {
            let i = id.index();
            let Some(steps) = find(&format!("optim.{}.steps", p.name)) else { continue };
            let mut st = Vec::new();
            for slot in self.config.kind.slots() {
                let key = format!("optim.{}.{}", p.name, slot);
                let t = find(&key).ok_or_else(|| Error::format(format!("missing optimizer state {}", key)))?;
                if t.shape() != p.value.shape() {
                    return Err(Error::format(format!("optimizer state {} has shape {:?}", key, t.shape())));
                }
                st.push(t.clone());
            }
            self.steps[i] = steps.data()[0].as_f64() as u64;
            self.state[i] = Some(st);
        }
        Ok(())
    }
}
