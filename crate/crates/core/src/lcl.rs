//! Cross-entropy and logit-constraint losses with closed-form gradients.
//!
//! The logit-constraint loss is cross-entropy on `z / ||z||`. Its gradient is
//! the cross-entropy residual on the normalized logits, projected onto the
//! tangent space of the sphere and scaled by `1 / ||z||`:
//!
//! ```text
//! dL/dz_j = (1/||z||) * ((p*_j - y_j) - sum_k (z_j z_k / ||z||^2) (p*_k - y_k))
//! ```
//!
//! so it is always orthogonal to `z`.

use crate::error::{Error, Result};
use crate::image::{LabelMap, IGNORE_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Lower bound on `||z||` in the normalized softmax.
    pub norm_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { norm_epsilon: 1e-8 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.norm_epsilon > 0.0 && self.norm_epsilon.is_finite() {
            Ok(())
        } else {
            Err(Error::Config { key: "norm_epsilon".into(), reason: "must be positive".into() })
        }
    }
}

/// Which per-pixel loss drives a term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    LogitConstraint,
}

/// Row-major `H x W x K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl LogitMap {
    pub fn new(height: usize, width: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * classes {
            return Err(Error::Shape(format!(
                "logit map {height}x{width}x{classes} needs {} values, got {}",
                height * width * classes,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite logit".into()));
        }
        Ok(LogitMap { height, width, classes, data })
    }

    pub fn zeros(height: usize, width: usize, classes: usize) -> Self {
        LogitMap { height, width, classes, data: vec![0.0; height * width * classes] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.classes..(index + 1) * self.classes]
    }

    /// Per-pixel argmax (first maximum wins).
    pub fn argmax(&self) -> LabelMap {
        let ids = self.data.chunks_exact(self.classes).map(|z| argmax(z) as u8).collect();
        LabelMap::new(self.height, self.width, ids).expect("shape is consistent")
    }
}

/// Per-pixel probability rows, same layout as [`LogitMap`].
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Plain softmax (`normalized = false`) or the norm-scaled variant.
    pub fn from_logits(logits: &LogitMap, normalized: bool, cfg: &LossConfig) -> Self {
        let data = logits
            .data
            .chunks_exact(logits.classes)
            .flat_map(|z| if normalized { normalized_softmax(z, cfg) } else { softmax(z) })
            .collect();
        ProbMap { height: logits.height, width: logits.width, classes: logits.classes, data }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.classes)
    }

    /// Largest class probability per pixel.
    pub fn max_probs(&self) -> Vec<f64> {
        self.rows().map(|p| p.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Max-subtracted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log softmax(z)[i]`, stable.
fn log_softmax_at(z: &[f64], i: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    z[i] - lse
}

fn guarded_norm(z: &[f64], cfg: &LossConfig) -> f64 {
    l2_norm(z).max(cfg.norm_epsilon)
}

/// Softmax of `z / max(||z||, eps)`.
pub fn normalized_softmax(z: &[f64], cfg: &LossConfig) -> Vec<f64> {
    let n = guarded_norm(z, cfg);
    let u: Vec<f64> = z.iter().map(|v| v / n).collect();
    softmax(&u)
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange { id: label, classes })
    }
}

/// `-log p_label` and `p - y`.
pub fn ce_loss_grad(z: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    check_label(label, z.len())?;
    let mut grad = softmax(z);
    grad[label] -= 1.0;
    Ok((-log_softmax_at(z, label), grad))
}

/// `-log p*_label` and its gradient with respect to the raw logits.
pub fn lc_loss_grad(z: &[f64], label: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    check_label(label, z.len())?;
    let norm = l2_norm(z);
    let n = norm.max(cfg.norm_epsilon);
    let u: Vec<f64> = z.iter().map(|v| v / n).collect();
    let loss = -log_softmax_at(&u, label);
    let mut r = softmax(&u);
    r[label] -= 1.0;
    if norm <= cfg.norm_epsilon {
        // the guard holds the denominator constant, so the projection term drops out
        return Ok((loss, r.into_iter().map(|v| v / n).collect()));
    }
    let radial: f64 = u.iter().zip(&r).map(|(a, b)| a * b).sum();
    let grad = r.iter().zip(&u).map(|(rj, uj)| (rj - uj * radial) / n).collect();
    Ok((loss, grad))
}

/// Logit-constraint gradient with the cross-class sum reduced to its diagonal
/// term, which is what remains when one logit dominates:
/// `(1/||z||) * (r_j - (z_j/||z||)^2 r_j)` with `r = p* - y`.
pub fn lc_grad_confident_approx(z: &[f64], label: usize, cfg: &LossConfig) -> Result<Vec<f64>> {
    check_label(label, z.len())?;
    let n = l2_norm(z).max(cfg.norm_epsilon);
    let u: Vec<f64> = z.iter().map(|v| v / n).collect();
    let mut r = softmax(&u);
    r[label] -= 1.0;
    Ok(r.iter().zip(&u).map(|(rj, uj)| (rj - uj * uj * rj) / n).collect())
}

pub fn loss_grad(kind: LossKind, z: &[f64], label: usize, cfg: &LossConfig) -> Result<(f64, Vec<f64>)> {
    match kind {
        LossKind::CrossEntropy => ce_loss_grad(z, label),
        LossKind::LogitConstraint => lc_loss_grad(z, label, cfg),
    }
}

/// Weighted per-image logit-constraint loss; see [`image_loss_with`].
pub fn image_loss(logits: &LogitMap, labels: &LabelMap, weight: f64, cfg: &LossConfig) -> Result<(f64, LogitMap)> {
    image_loss_with(LossKind::LogitConstraint, logits, labels, weight, cfg)
}

/// `weight / (H*W) * sum` of per-pixel losses over labeled pixels, with the
/// matching gradient map. The divisor counts ignored pixels too.
pub fn image_loss_with(
    kind: LossKind,
    logits: &LogitMap,
    labels: &LabelMap,
    weight: f64,
    cfg: &LossConfig,
) -> Result<(f64, LogitMap)> {
    if logits.height != labels.height() || logits.width != labels.width() {
        return Err(Error::Shape(format!(
            "logits {}x{} vs labels {}x{}",
            logits.height,
            logits.width,
            labels.height(),
            labels.width()
        )));
    }
    if weight < 0.0 {
        return Err(Error::Invalid(format!("loss weight {weight} is negative")));
    }
    let scale = weight / logits.pixels() as f64;
    let mut grad = LogitMap::zeros(logits.height, logits.width, logits.classes);
    let mut total = 0.0;
    for (i, &id) in labels.data().iter().enumerate() {
        if id == IGNORE_ID {
            continue;
        }
        let (l, g) = loss_grad(kind, logits.pixel(i), id as usize, cfg)?;
        total += l;
        for (dst, v) in grad.pixel_mut(i).iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    Ok((total * scale, grad))
}
