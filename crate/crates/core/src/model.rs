//! Per-pixel two-layer MLP over handcrafted local features, with a
//! hand-written backward pass.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{pixel_saturation, Image};
use crate::lcl::LogitMap;

/// Features per pixel: rgb, x, y, 3x3 channel means, 3x3 channel std-devs, saturation.
pub const FEATURE_DIM: usize = 12;

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * dims {
            return Err(Error::Shape(format!("feature map needs {} values, got {}", height * width * dims, data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite feature".into()));
        }
        Ok(FeatureMap { height, width, dims, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.dims..(index + 1) * self.dims]
    }
}

pub fn featurize(img: &Image) -> FeatureMap {
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(h * w * FEATURE_DIM);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let mut window = [[0.0; 3]; 9];
            for (n, (dy, dx)) in (-1isize..=1).flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx))).enumerate() {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                window[n] = img.pixel(yy, xx);
            }
            let mut mean = [0.0; 3];
            let mut std = [0.0; 3];
            for c in 0..3 {
                mean[c] = window.iter().map(|q| q[c]).sum::<f64>() / 9.0;
                std[c] = (window.iter().map(|q| (q[c] - mean[c]).powi(2)).sum::<f64>() / 9.0).sqrt();
            }
            data.extend_from_slice(&p);
            data.push(x as f64 / w as f64);
            data.push(y as f64 / h as f64);
            data.extend_from_slice(&mean);
            data.extend_from_slice(&std);
            data.push(pixel_saturation(p));
        }
    }
    FeatureMap { height: h, width: w, dims: FEATURE_DIM, data }
}

/// Layer sizes: `features -> hidden -> classes`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub features: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Layout {
    pub fn new(features: usize, hidden: usize, classes: usize) -> Self {
        Layout { features, hidden, classes }
    }

    pub fn len(&self) -> usize {
        self.features * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.features * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * self.classes;
        [w1, b1, w2, b2]
    }
}

/// Flat parameter storage in declaration order: `W1 (F x D)`, `b1`, `W2 (D x K)`, `b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

/// Gradient with the same layout as [`ModelParams`].
pub type ParamGrad = ModelParams;

impl ModelParams {
    pub fn zeros(layout: Layout) -> Self {
        ModelParams { layout, values: vec![0.0; layout.len()] }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!("layout needs {} parameters, got {}", layout.len(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(ModelParams { layout, values })
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for both layers.
    pub fn init(layout: Layout, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(layout);
        let [_, _, w2, _] = layout.offsets();
        let b1 = 1.0 / (layout.features as f64).sqrt();
        let b2 = 1.0 / (layout.hidden as f64).sqrt();
        for (i, v) in p.values.iter_mut().enumerate() {
            let bound = if i < w2 { b1 } else { b2 };
            *v = rng.gen_range(-bound..=bound);
        }
        p
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn w1(&self) -> &[f64] {
        let [w1, b1, ..] = self.layout.offsets();
        &self.values[w1..b1]
    }

    pub fn b1(&self) -> &[f64] {
        let [_, b1, w2, _] = self.layout.offsets();
        &self.values[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let [_, _, w2, b2] = self.layout.offsets();
        &self.values[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        let [.., b2] = self.layout.offsets();
        &self.values[b2..]
    }

    fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        let [_, b1, w2, b2] = self.layout.offsets();
        let (w1s, rest) = self.values.split_at_mut(b1);
        let (b1s, rest) = rest.split_at_mut(w2 - b1);
        let (w2s, b2s) = rest.split_at_mut(b2 - w2);
        (w1s, b1s, w2s, b2s)
    }

    pub fn set_b2(&mut self, v: &[f64]) {
        self.split_mut().3.copy_from_slice(v);
    }

    /// Scales every entry in place.
    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, s: f64) -> Result<()> {
        check_layout(self.layout, other.layout)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
        Ok(())
    }
}

fn check_layout(a: Layout, b: Layout) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("parameter layouts differ: {a:?} vs {b:?}")))
    }
}

fn check_features(params: &ModelParams, feats: &FeatureMap) -> Result<()> {
    if feats.dims != params.layout.features {
        return Err(Error::Shape(format!(
            "model expects {} features per pixel, got {}",
            params.layout.features, feats.dims
        )));
    }
    Ok(())
}

fn hidden_preact(params: &ModelParams, f: &[f64], out: &mut [f64]) {
    let d = params.layout.hidden;
    out.copy_from_slice(params.b1());
    let w1 = params.w1();
    for (i, &fi) in f.iter().enumerate() {
        if fi == 0.0 {
            continue;
        }
        let row = &w1[i * d..(i + 1) * d];
        for (o, w) in out.iter_mut().zip(row) {
            *o += fi * w;
        }
    }
}

/// `W2 relu(W1 f + b1) + b2` at every pixel.
pub fn forward(params: &ModelParams, feats: &FeatureMap) -> Result<LogitMap> {
    check_features(params, feats)?;
    let Layout { hidden: d, classes: k, .. } = params.layout;
    let mut logits = LogitMap::zeros(feats.height, feats.width, k);
    let mut h = vec![0.0; d];
    let w2 = params.w2();
    for i in 0..feats.pixels() {
        hidden_preact(params, feats.pixel(i), &mut h);
        let z = logits.pixel_mut(i);
        z.copy_from_slice(params.b2());
        for (j, &hj) in h.iter().enumerate() {
            if hj <= 0.0 {
                continue;
            }
            for (zk, w) in z.iter_mut().zip(&w2[j * k..(j + 1) * k]) {
                *zk += hj * w;
            }
        }
    }
    Ok(logits)
}

/// Gradient of `sum_pixels <grad_logits, logits>` with respect to every parameter.
pub fn backward(params: &ModelParams, feats: &FeatureMap, grad_logits: &LogitMap) -> Result<ParamGrad> {
    check_features(params, feats)?;
    let Layout { hidden: d, classes: k, .. } = params.layout;
    if grad_logits.height() != feats.height || grad_logits.width() != feats.width || grad_logits.classes() != k {
        return Err(Error::Shape("gradient map does not match features and model".into()));
    }
    let mut grad = ModelParams::zeros(params.layout);
    let w2 = params.w2().to_vec();
    let (gw1, gb1, gw2, gb2) = grad.split_mut();
    let mut h = vec![0.0; d];
    let mut dh = vec![0.0; d];
    for i in 0..feats.pixels() {
        let g = grad_logits.pixel(i);
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        let f = feats.pixel(i);
        hidden_preact(params, f, &mut h);
        for (acc, v) in gb2.iter_mut().zip(g) {
            *acc += v;
        }
        for j in 0..d {
            if h[j] <= 0.0 {
                dh[j] = 0.0;
                continue;
            }
            let wrow = &w2[j * k..(j + 1) * k];
            let grow = &mut gw2[j * k..(j + 1) * k];
            let mut back = 0.0;
            for c in 0..k {
                grow[c] += h[j] * g[c];
                back += wrow[c] * g[c];
            }
            dh[j] = back;
        }
        for (a, &dj) in gb1.iter_mut().zip(&dh) {
            *a += dj;
        }
        for (fi_idx, &fi) in f.iter().enumerate() {
            if fi == 0.0 {
                continue;
            }
            for (a, &dj) in gw1[fi_idx * d..(fi_idx + 1) * d].iter_mut().zip(&dh) {
                *a += fi * dj;
            }
        }
    }
    Ok(grad)
}

/// Heavy-ball SGD: `v = momentum * v + g; params -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(layout: Layout, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config { key: "lr".into(), reason: "must be non-negative".into() });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config { key: "momentum".into(), reason: "must lie in [0, 1)".into() });
        }
        Ok(Sgd { lr, momentum, velocity: vec![0.0; layout.len()] })
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ModelParams, grad: &ParamGrad) -> Result<()> {
        check_layout(params.layout, grad.layout)?;
        if self.velocity.len() != params.values.len() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        for ((p, v), g) in params.values.iter_mut().zip(&mut self.velocity).zip(&grad.values) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"VBLCMLP\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Magic, version, `F D K` as u32, then every parameter as little-endian f64.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let l = params.layout;
    let mut out = Vec::with_capacity(24 + 8 * l.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for dim in [l.features, l.hidden, l.classes] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::Codec(format!("checkpoint: {m}"));
    if bytes.len() < 24 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(8) != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let layout = Layout::new(word(12) as usize, word(16) as usize, word(20) as usize);
    let body = &bytes[24..];
    if body.len() != 8 * layout.len() {
        return Err(bad("payload length does not match dimensions"));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    ModelParams::from_values(layout, values)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| e.in_file(path))
}
