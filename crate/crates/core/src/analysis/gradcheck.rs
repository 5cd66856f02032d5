//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::Ctx;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamKind, ParamStore};

const KINK_RETRIES: usize = 3;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Elements to check; every tensor contributes at least one when the
    /// budget allows.
    pub sample_size: usize,
    pub seed: u64,
    /// Whether norms run in training mode during the loss evaluation.
    pub train: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            sample_size: 256,
            seed: 0,
            train: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Elements exceeding the tolerance, worst first.
    pub failures: Vec<Offender>,
    /// Largest errors regardless of tolerance, worst first.
    pub worst: Vec<Offender>,
    pub warnings: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Distinct parameter names among the failures.
    pub fn failing_params(&self) -> Vec<String> {
        let mut names: Vec<String> = self.failures.iter().map(|o| o.param.clone()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} checked={} max_rel_err={:.3e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_err
        );
        for w in &self.warnings {
            s.push_str(&format!("\nwarning: {}", w));
        }
        for o in self.worst.iter().take(5) {
            s.push_str(&format!(
                "\n  {}[{}] analytic={:.6e} numeric={:.6e} rel={:.3e}",
                o.param, o.index, o.analytic, o.numeric, o.rel_err
            ));
        }
        s
    }
}

/// |a−b| / max(|a|, |b|, 1e-8).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares tape gradients of `loss` against central differences over a
/// sample of trainable parameter elements. Running buffers are restored
/// afterwards. A probe whose ±step evaluations take different ReLU or
/// max-pool branches than the base point is retried with smaller steps.
pub fn gradcheck<F>(store: &mut ParamStore<f64>, mut loss: F, cfg: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: FnMut(&mut Ctx<'_, f64>) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck step must be positive"));
    }
    let buffers: Vec<(ParamId, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Buffer)
        .map(|(id, p)| (id, p.value.data().to_vec()))
        .collect();
    let restore = |store: &mut ParamStore<f64>| {
        for (id, v) in &buffers {
            store.get_mut(*id).value.data_mut().copy_from_slice(v);
        }
    };

    let mut eval = |store: &mut ParamStore<f64>, want_grads: bool| -> Result<(f64, u64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let mut ctx = Ctx::new(&mut tape, &mut binding, store, cfg.train);
        let l = loss(&mut ctx)?;
        let value = tape.value(l);
        if value.len() != 1 {
            return Err(Error::invalid("gradcheck loss must be a scalar"));
        }
        let v = value.data()[0];
        let sig = tape.branch_signature();
        let mut grads = Vec::new();
        if want_grads {
            let g = tape.backward(l)?;
            grads = store
                .ids()
                .map(|id| binding.get(id).map(|var| g.get_or_zeros(&tape, var).into_data()))
                .collect();
        }
        restore(store);
        Ok((v, sig, grads))
    };

    let (base, base_sig, analytic) = eval(store, true)?;
    let mut report = GradcheckReport::default();
    let candidates: Vec<(ParamId, usize)> = store
        .iter()
        .filter(|(_, p)| p.requires_grad())
        .map(|(id, p)| (id, p.value.len()))
        .collect();
    let unbound: Vec<String> = candidates
        .iter()
        .filter(|(id, _)| analytic.get(id.index()).is_none_or(|g| g.is_none()))
        .map(|(id, _)| store.get(*id).name.clone())
        .collect();
    if !unbound.is_empty() {
        report.warnings.push(format!("{} trainable tensors not used by the loss", unbound.len()));
    }
    let total: usize = candidates.iter().map(|c| c.1).sum();
    if total == 0 {
        report
            .warnings
            .push("no trainable parameters: empty check set".to_string());
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<(ParamId, usize)> = Vec::new();
    if cfg.sample_size >= total {
        for &(id, n) in &candidates {
            picks.extend((0..n).map(|i| (id, i)));
        }
    } else {
        let per_tensor = cfg.sample_size >= candidates.len();
        if per_tensor {
            for &(id, n) in &candidates {
                picks.push((id, sample(&mut rng, n, 1).index(0)));
            }
        }
        let offsets: Vec<usize> = candidates
            .iter()
            .scan(0, |acc, c| {
                let o = *acc;
                *acc += c.1;
                Some(o)
            })
            .collect();
        let mut seen: std::collections::HashSet<(ParamId, usize)> = picks.iter().copied().collect();
        for flat in sample(&mut rng, total, cfg.sample_size).into_iter() {
            if picks.len() >= cfg.sample_size {
                break;
            }
            let t = offsets.partition_point(|&o| o <= flat) - 1;
            let pick = (candidates[t].0, flat - offsets[t]);
            if seen.insert(pick) {
                picks.push(pick);
            }
        }
    }

    let mut kinked = 0usize;
    for (id, i) in picks {
        let orig = store.get(id).value.data()[i];
        let mut at = |store: &mut ParamStore<f64>, v: f64| -> Result<(f64, u64)> {
            store.get_mut(id).value.data_mut()[i] = v;
            let (l, sig, _) = eval(store, false)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            Ok((l, sig))
        };
        // Shrink the step while the probe straddles a kink, then fall back
        // to a one-sided difference within the base piece.
        let mut h = cfg.step;
        let mut numeric = 0.0;
        for attempt in 0..=KINK_RETRIES {
            let (plus, sp) = at(store, orig + h)?;
            let (minus, sm) = at(store, orig - h)?;
            if sp == base_sig && sm == base_sig {
                numeric = (plus - minus) / (2.0 * h);
                if attempt > 0 {
                    kinked += 1;
                }
                break;
            }
            if attempt == KINK_RETRIES {
                kinked += 1;
                numeric = if sp == base_sig {
                    (plus - base) / h
                } else if sm == base_sig {
                    (base - minus) / h
                } else {
                    (plus - minus) / (2.0 * h)
                };
            }
            h /= 10.0;
        }
        let a = analytic
            .get(id.index())
            .and_then(|g| g.as_ref())
            .map_or(0.0, |g| g[i]);
        let rel = relative_error(a, numeric);
        let o = Offender {
            param: store.get(id).name.clone(),
            index: i,
            analytic: a,
            numeric,
            rel_err: rel,
        };
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel);
        if !(rel < cfg.tolerance) {
            report.failures.push(o.clone());
        }
        report.worst.push(o);
    }
    if kinked > 0 {
        report.warnings.push(format!(
            "{} samples straddled a ReLU or max-pool kink and were re-evaluated with a smaller step",
            kinked
        ));
    }
    let by_err = |a: &Offender, b: &Offender| b.rel_err.total_cmp(&a.rel_err);
    report.failures.sort_by(by_err);
    report.worst.sort_by(by_err);
    report.worst.truncate(10);
    Ok(report)
}
