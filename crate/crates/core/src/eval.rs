//! Segmentation metrics and confidence diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{read_pgm, read_ppm};
use crate::error::{Error, Result};
use crate::image::{LabelMap, IGNORE_ID};
use crate::lcl::{LogitMap, LossConfig, ProbMap};
use crate::model::{featurize, forward, load_checkpoint, ModelParams};

/// `counts[gt * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image; ground-truth pixels marked ignore are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let k = self.classes;
        // validate first so a bad map leaves the matrix untouched
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_ID {
                continue;
            }
            for id in [g, p] {
                if id as usize >= k {
                    return Err(Error::LabelOutOfRange { id: id as usize, classes: k });
                }
            }
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g != IGNORE_ID {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU (`None` where the class never appears in either map) and
    /// the mean over present classes.
    pub fn miou(&self) -> Result<(Vec<Option<f64>>, f64)> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..k).map(|p| self.get(c, p)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.get(g, c)).sum::<u64>() - tp;
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Invalid("no class present in prediction or ground truth".into()));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        Ok((per_class, mean))
    }
}

pub fn accumulate(pred: &LabelMap, gt: &LabelMap, cm: &mut ConfusionMatrix) -> Result<()> {
    cm.accumulate(pred, gt)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    cm.miou()
}

/// Histogram of per-pixel confidence over equal-width bins of `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceHistogram {
    pub counts_all: Vec<u64>,
    pub counts_erroneous: Vec<u64>,
}

impl ConfidenceHistogram {
    pub fn new(bins: usize) -> Self {
        ConfidenceHistogram { counts_all: vec![0; bins], counts_erroneous: vec![0; bins] }
    }

    pub fn bins(&self) -> usize {
        self.counts_all.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins()).map(|i| i as f64 / self.bins() as f64).collect()
    }

    pub fn bin_of(&self, confidence: f64) -> usize {
        ((confidence * self.bins() as f64) as usize).min(self.bins() - 1)
    }

    pub fn add(&mut self, confidence: f64, wrong: bool) {
        let b = self.bin_of(confidence);
        self.counts_all[b] += 1;
        if wrong {
            self.counts_erroneous[b] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfidenceHistogram) {
        for (a, b) in self.counts_all.iter_mut().zip(&other.counts_all) {
            *a += b;
        }
        for (a, b) in self.counts_erroneous.iter_mut().zip(&other.counts_erroneous) {
            *a += b;
        }
    }
}

/// Confidence statistics over a set of predictions.
///
/// Confidence is the max of the plain softmax unless `use_norm` selects the
/// norm-scaled variant.
pub fn confidence_report(
    logit_maps: &[LogitMap],
    gt_maps: &[LabelMap],
    bins: usize,
    use_norm: bool,
) -> Result<ConfidenceHistogram> {
    if logit_maps.len() != gt_maps.len() {
        return Err(Error::Shape(format!("{} logit maps vs {} label maps", logit_maps.len(), gt_maps.len())));
    }
    if bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let mut hist = ConfidenceHistogram::new(bins);
    let cfg = LossConfig::default();
    for (z, gt) in logit_maps.iter().zip(gt_maps) {
        if z.height() != gt.height() || z.width() != gt.width() {
            return Err(Error::Shape("logit map and label map sizes differ".into()));
        }
        let probs = ProbMap::from_logits(z, use_norm, &cfg);
        let pred = z.argmax();
        for (i, conf) in probs.max_probs().into_iter().enumerate() {
            let g = gt.data()[i];
            if g == IGNORE_ID {
                continue;
            }
            hist.add(conf, pred.data()[i] != g);
        }
    }
    Ok(hist)
}

/// Fraction of erroneous pixels whose confidence is above `threshold`.
pub fn overconfident_error_fraction(
    logit_maps: &[LogitMap],
    gt_maps: &[LabelMap],
    threshold: f64,
) -> Result<f64> {
    let mut wrong = 0u64;
    let mut confident = 0u64;
    for (z, gt) in logit_maps.iter().zip(gt_maps) {
        let probs = ProbMap::from_logits(z, false, &LossConfig::default());
        let pred = z.argmax();
        for (i, conf) in probs.max_probs().into_iter().enumerate() {
            let g = gt.data()[i];
            if g != IGNORE_ID && pred.data()[i] != g {
                wrong += 1;
                if conf > threshold {
                    confident += 1;
                }
            }
        }
    }
    Ok(if wrong == 0 { 0.0 } else { confident as f64 / wrong as f64 })
}

/// Result of scoring a model on a labeled image set.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub histogram: ConfidenceHistogram,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Plain-argmax inference plus mIoU and confidence histograms.
pub fn evaluate_model(params: &ModelParams, samples: &[(crate::image::Image, LabelMap)]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let k = params.layout().classes;
    let mut cm = ConfusionMatrix::new(k);
    let mut hist = ConfidenceHistogram::new(HISTOGRAM_BINS);
    for (img, gt) in samples {
        let z = forward(params, &featurize(img))?;
        cm.accumulate(&z.argmax(), gt)?;
        hist.merge(&confidence_report(std::slice::from_ref(&z), std::slice::from_ref(gt), HISTOGRAM_BINS, false)?);
    }
    let (per_class, miou) = cm.miou()?;
    Ok(EvalReport { confusion: cm, per_class, miou, histogram: hist })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,key,value\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(s, "iou,{c},{v:.6}").unwrap(),
                None => writeln!(s, "iou,{c},absent").unwrap(),
            }
        }
        writeln!(s, "miou,all,{:.6}", self.miou).unwrap();
        let edges = self.histogram.edges();
        for (b, n) in self.histogram.counts_all.iter().enumerate() {
            writeln!(s, "hist_all,{:.2}-{:.2},{n}", edges[b], edges[b + 1]).unwrap();
        }
        for (b, n) in self.histogram.counts_erroneous.iter().enumerate() {
            writeln!(s, "hist_err,{:.2}-{:.2},{n}", edges[b], edges[b + 1]).unwrap();
        }
        s
    }
}

/// Sorted `*.{ext}` files directly inside `dir`.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Scores a checkpoint on `image_dir/*.ppm` against `label_dir/<stem>.pgm`
/// and writes the report to `out_csv`.
pub fn evaluate(checkpoint: &Path, image_dir: &Path, label_dir: &Path, out_csv: &Path) -> Result<EvalReport> {
    let params = load_checkpoint(checkpoint)?;
    let images = list_files(image_dir, "ppm")?;
    if images.is_empty() {
        return Err(Error::Invalid(format!("no .ppm images in {}", image_dir.display())));
    }
    let k = params.layout().classes;
    let mut samples = Vec::with_capacity(images.len());
    for path in images {
        let stem = path.file_stem().unwrap_or_default();
        let label_path = label_dir.join(stem).with_extension("pgm");
        let img = read_ppm(&path)?;
        let gt = read_pgm(&label_path, k)?;
        if !img.same_dims(&gt) {
            return Err(Error::Shape("image and label sizes differ".into()).in_file(&label_path));
        }
        samples.push((img, gt));
    }
    let report = evaluate_model(&params, &samples)?;
    fs::write(out_csv, report.to_csv()).map_err(|e| Error::io(out_csv, e))?;
    Ok(report)
}
