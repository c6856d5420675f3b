//! Central finite-difference check of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lcl::{loss_grad, LossConfig, LossKind};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `max_i |a_i - b_i| / max_i max(|a_i|, |b_i|)`, or the plain difference when
/// both vectors are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn numeric_grad(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    let mut probe = z.to_vec();
    (0..z.len())
        .map(|j| {
            probe[j] = z[j] + h;
            let up = f(&probe);
            probe[j] = z[j] - h;
            let down = f(&probe);
            probe[j] = z[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Analytic vs numeric gradient for one `(z, label)` pair.
pub fn check_one(kind: LossKind, z: &[f64], label: usize, cfg: &LossConfig, h: f64) -> Result<f64> {
    let (_, analytic) = loss_grad(kind, z, label, cfg)?;
    let numeric = numeric_grad(|v| loss_grad(kind, v, label, cfg).map(|(l, _)| l).unwrap_or(f64::NAN), z, h);
    Ok(relative_error(&analytic, &numeric))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub classes: usize,
    pub trials: usize,
    pub max_rel_ce: f64,
    pub max_rel_lc: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_ce <= tol && self.max_rel_lc <= tol
    }
}

/// Random logits with a per-trial scale in `[0.5, 5]`, uniform labels.
pub fn run_gradcheck(classes: usize, trials: usize, seed: u64) -> Result<GradCheckReport> {
    if classes < 2 {
        return Err(Error::Config { key: "classes".into(), reason: "need at least 2".into() });
    }
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { classes, trials, max_rel_ce: 0.0, max_rel_lc: 0.0 };
    for _ in 0..trials {
        let scale = rng.gen_range(0.5..5.0);
        let z: Vec<f64> = (0..classes).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let label = rng.gen_range(0..classes);
        report.max_rel_ce = report.max_rel_ce.max(check_one(LossKind::CrossEntropy, &z, label, &cfg, FD_STEP)?);
        report.max_rel_lc = report.max_rel_lc.max(check_one(LossKind::LogitConstraint, &z, label, &cfg, FD_STEP)?);
    }
    Ok(report)
}
