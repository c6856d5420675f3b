//! Deterministic labeled toy scenes and their fog / low-light degradations.
//!
//! A scene is a jittered background with a few colored shapes painted over
//! it. Each class has its own base color, so a per-pixel model can separate
//! classes on clean images; the degradations shift those colors the way a
//! veil or a dark exposure would.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{write_pgm, write_ppm};
use crate::error::{Error, Result};
use crate::image::{invert, Image, LabelMap, ScalarMap};
use crate::vbm::AtmosphericLight;

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "rectangle", "triangle", "stripe"];

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of foreground shapes per scene.
    pub shapes: (usize, usize),
    /// Base color per class, indexed by class id.
    pub palette: Vec<[f64; 3]>,
    /// Per-scene, per-channel uniform jitter applied to each class color.
    pub color_jitter: f64,
    /// Per-pixel uniform noise amplitude.
    pub pixel_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            shapes: (3, 6),
            palette: vec![
                [0.35, 0.45, 0.20],
                [0.85, 0.20, 0.15],
                [0.15, 0.35, 0.80],
                [0.90, 0.75, 0.10],
                [0.60, 0.20, 0.70],
            ],
            color_jitter: 0.06,
            pixel_noise: 0.03,
        }
    }
}

impl SceneSpec {
    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 || self.classes() > CLASS_NAMES.len() {
            return Err(Error::Invalid(format!("palette must cover 2..={} classes", CLASS_NAMES.len())));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Invalid("scenes must be at least 8x8".into()));
        }
        if self.shapes.0 > self.shapes.1 {
            return Err(Error::Invalid("shape count range is reversed".into()));
        }
        Ok(())
    }
}

/// Homogeneous fog: `t = exp(-beta * depth)` toward a near-white airlight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FogParams {
    pub beta: f64,
    pub light: AtmosphericLight,
}

/// Low-light as fog applied to the inverted image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NightParams {
    pub veil_beta: f64,
    pub dark_light: AtmosphericLight,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Degradation {
    Fog(FogParams),
    Night(NightParams),
}

impl Degradation {
    pub fn condition(&self) -> Condition {
        match self {
            Degradation::Fog(_) => Condition::Fog,
            Degradation::Night(_) => Condition::Night,
        }
    }

    pub fn beta(&self) -> f64 {
        match self {
            Degradation::Fog(p) => p.beta,
            Degradation::Night(p) => p.veil_beta,
        }
    }

    pub fn light(&self) -> AtmosphericLight {
        match self {
            Degradation::Fog(p) => p.light,
            Degradation::Night(p) => p.dark_light,
        }
    }

    pub fn apply(&self, clean: &Image, depth: &ScalarMap) -> Image {
        match self {
            Degradation::Fog(p) => apply_fog(clean, depth, p),
            Degradation::Night(p) => apply_lowlight(clean, depth, p),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Clean,
    Fog,
    Night,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Clean => "clean",
            Condition::Fog => "fog",
            Condition::Night => "night",
        })
    }
}

/// A rendered scene with exact labels and a synthetic depth map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub labels: LabelMap,
    pub depth: ScalarMap,
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Triangle { p: [(f64, f64); 3] },
    /// Band of half-width `half` around the line through `(cy, cx)` with normal `(ny, nx)`.
    Stripe { cy: f64, cx: f64, ny: f64, nx: f64, half: f64 },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Rect { .. } => 2,
            Shape::Triangle { .. } => 3,
            Shape::Stripe { .. } => 4,
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Triangle { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
            Shape::Stripe { cy, cx, ny, nx, half } => ((y - cy) * ny + (x - cx) * nx).abs() <= half,
        }
    }

    fn random(rng: &mut ChaCha8Rng, h: f64, w: f64, classes: usize) -> Shape {
        let s = h.min(w);
        let kind = rng.gen_range(1..classes.max(2));
        match kind {
            1 => {
                let r = rng.gen_range(0.08 * s..0.2 * s);
                Shape::Circle { cy: rng.gen_range(r..h - r), cx: rng.gen_range(r..w - r), r }
            }
            2 => {
                let rh = rng.gen_range(0.15 * h..0.4 * h);
                let rw = rng.gen_range(0.15 * w..0.4 * w);
                let y0 = rng.gen_range(0.0..h - rh);
                let x0 = rng.gen_range(0.0..w - rw);
                Shape::Rect { y0, x0, y1: y0 + rh, x1: x0 + rw }
            }
            3 => {
                let size = rng.gen_range(0.2 * s..0.45 * s);
                let cy = rng.gen_range(size / 2.0..h - size / 2.0);
                let cx = rng.gen_range(size / 2.0..w - size / 2.0);
                let rot = rng.gen_range(0.0..std::f64::consts::TAU);
                let p = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = rot + k * std::f64::consts::TAU / 3.0;
                    (cy + 0.5 * size * a.sin(), cx + 0.5 * size * a.cos())
                });
                Shape::Triangle { p }
            }
            _ => {
                let a = rng.gen_range(0.0..std::f64::consts::PI);
                Shape::Stripe {
                    cy: rng.gen_range(0.2 * h..0.8 * h),
                    cx: rng.gen_range(0.2 * w..0.8 * w),
                    ny: a.sin(),
                    nx: a.cos(),
                    half: rng.gen_range(0.03 * s..0.07 * s),
                }
            }
        }
    }
}

pub fn gen_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.gen_range(spec.shapes.0..=spec.shapes.1);
    gen_scene_with_shapes(spec, n, rng)
}

/// Renders a scene with exactly `shape_count` foreground shapes.
pub fn gen_scene_with_shapes(spec: &SceneSpec, shape_count: usize, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = (spec.height, spec.width);
    let colors: Vec<[f64; 3]> = spec
        .palette
        .iter()
        .map(|c| c.map(|v| (v + rng.gen_range(-spec.color_jitter..=spec.color_jitter)).clamp(0.0, 1.0)))
        .collect();

    // smooth depth ramp along a random direction, far end in [0.6, 1]
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = (angle.sin(), angle.cos());
    let near = rng.gen_range(0.0..0.3);
    let far = rng.gen_range(0.6..1.0);

    let shapes: Vec<(Shape, f64)> = (0..shape_count)
        .map(|_| (Shape::random(rng, h as f64, w as f64, spec.classes()), rng.gen_range(-0.15..0.15)))
        .collect();

    let mut labels = LabelMap::filled(h, w, 0);
    let mut image = Image::filled(h, w, [0.0; 3]);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let reach = (cy.abs() + cx.abs()).max(1.0);
    let mut depth_data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let proj = ((py - cy) * dy + (px - cx) * dx) / reach;
            let mut d = near + (far - near) * (0.5 + 0.5 * proj.clamp(-1.0, 1.0));
            let mut class = 0u8;
            for (shape, offset) in &shapes {
                if shape.contains(py, px) {
                    class = shape.class();
                    d = near + (far - near) * (0.5 + 0.5 * proj.clamp(-1.0, 1.0)) + offset;
                }
            }
            labels.set(y, x, class);
            depth_data.push(d.clamp(0.0, 1.0));
            let base = colors[class as usize];
            let px_color = base.map(|v| v + rng.gen_range(-spec.pixel_noise..=spec.pixel_noise));
            image.set_pixel(y, x, px_color);
        }
    }
    let depth = ScalarMap::new(h, w, depth_data).expect("one depth value per pixel");
    Scene { image, labels, depth }
}

/// `I = J t + A (1 - t)`, `t = exp(-beta d)`.
pub fn apply_fog(clean: &Image, depth: &ScalarMap, p: &FogParams) -> Image {
    let a = p.light.0;
    Image::from_fn(clean.height(), clean.width(), |y, x| {
        let t = (-p.beta * depth.get(y, x)).exp();
        let j = clean.pixel(y, x);
        [0, 1, 2].map(|c| j[c] * t + a[c] * (1.0 - t))
    })
}

/// `1 - fog(1 - J)`: a veil in inverted space darkens the image.
pub fn apply_lowlight(clean: &Image, depth: &ScalarMap, p: &NightParams) -> Image {
    let veil = FogParams { beta: p.veil_beta, light: p.dark_light };
    invert(&apply_fog(&invert(clean), depth, &veil))
}

pub fn sample_fog(rng: &mut ChaCha8Rng) -> FogParams {
    let base = rng.gen_range(0.85..=0.97);
    let light = [0; 3].map(|_| (base + rng.gen_range(-0.03..=0.03f64)).clamp(0.8, 1.0));
    FogParams { beta: rng.gen_range(0.5..=3.0), light: AtmosphericLight(light) }
}

pub fn sample_night(rng: &mut ChaCha8Rng) -> NightParams {
    let base = rng.gen_range(0.78..=0.97);
    let light = [0; 3].map(|_| (base + rng.gen_range(-0.03..=0.03f64)).clamp(0.7, 1.0));
    NightParams { veil_beta: rng.gen_range(3.0..=5.0), dark_light: AtmosphericLight(light) }
}

/// Independent stream per `(seed, split, index)`.
pub fn scene_rng(seed: u64, split: u64, index: u64) -> ChaCha8Rng {
    let mut z = seed ^ split.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

const SOURCE_SPLIT: u64 = 1;
const TARGET_SPLIT: u64 = 2;

#[derive(Clone, Debug)]
pub struct SourceSample {
    pub name: String,
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Clone, Debug)]
pub struct TargetSample {
    pub name: String,
    pub image: Image,
    /// Held out; only evaluation may look at these.
    pub labels: LabelMap,
    pub clean: Image,
    pub degradation: Degradation,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub source: Vec<SourceSample>,
    pub target: Vec<TargetSample>,
}

pub fn source_sample(spec: &SceneSpec, seed: u64, index: usize) -> SourceSample {
    let scene = gen_scene(spec, &mut scene_rng(seed, SOURCE_SPLIT, index as u64));
    SourceSample { name: format!("src_{index:04}"), image: scene.image, labels: scene.labels }
}

/// Even indices get fog, odd indices low-light.
pub fn target_sample(spec: &SceneSpec, seed: u64, index: usize) -> TargetSample {
    let mut rng = scene_rng(seed, TARGET_SPLIT, index as u64);
    let scene = gen_scene(spec, &mut rng);
    let degradation =
        if index % 2 == 0 { Degradation::Fog(sample_fog(&mut rng)) } else { Degradation::Night(sample_night(&mut rng)) };
    TargetSample {
        name: format!("tgt_{index:04}"),
        image: degradation.apply(&scene.image, &scene.depth),
        labels: scene.labels,
        clean: scene.image,
        degradation,
    }
}

pub fn generate(spec: &SceneSpec, source_n: usize, target_n: usize, seed: u64) -> Dataset {
    Dataset {
        source: (0..source_n).map(|i| source_sample(spec, seed, i)).collect(),
        target: (0..target_n).map(|i| target_sample(spec, seed, i)).collect(),
    }
}

pub const SOURCE_DIR: &str = "source";
pub const TARGET_DIR: &str = "target";
pub const TARGET_LABEL_DIR: &str = "target_labels";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub file: String,
    pub split: &'static str,
    pub condition: Condition,
    pub beta: f64,
    pub light: [f64; 3],
}

impl ManifestRow {
    fn csv(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.file, self.split, self.condition, self.beta, self.light[0], self.light[1], self.light[2]
        )
    }
}

/// Writes `source/` (PPM + PGM pairs), `target/` (PPM only),
/// `target_labels/` (held-out PGM) and `manifest.csv` under `out_dir`.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    let dirs = [SOURCE_DIR, TARGET_DIR, TARGET_LABEL_DIR].map(|d| out_dir.join(d));
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut rows = Vec::new();
    for s in &dataset.source {
        write_ppm(&dirs[0].join(format!("{}.ppm", s.name)), &s.image)?;
        write_pgm(&dirs[0].join(format!("{}.pgm", s.name)), &s.labels)?;
        for ext in ["ppm", "pgm"] {
            rows.push(ManifestRow {
                file: format!("{SOURCE_DIR}/{}.{ext}", s.name),
                split: "source",
                condition: Condition::Clean,
                beta: 0.0,
                light: [0.0; 3],
            });
        }
    }
    for t in &dataset.target {
        write_ppm(&dirs[1].join(format!("{}.ppm", t.name)), &t.image)?;
        write_pgm(&dirs[2].join(format!("{}.pgm", t.name)), &t.labels)?;
        for (dir, split, ext) in [(TARGET_DIR, "target", "ppm"), (TARGET_LABEL_DIR, "target_labels", "pgm")] {
            rows.push(ManifestRow {
                file: format!("{dir}/{}.{ext}", t.name),
                split,
                condition: t.degradation.condition(),
                beta: t.degradation.beta(),
                light: t.degradation.light().0,
            });
        }
    }
    let mut text = String::from("file,split,condition,beta,light_r,light_g,light_b\n");
    for r in &rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
    Ok(rows)
}

pub fn gen_dataset(spec: &SceneSpec, source_n: usize, target_n: usize, seed: u64, out_dir: &Path) -> Result<Vec<ManifestRow>> {
    spec.validate()?;
    write_dataset(&generate(spec, source_n, target_n, seed), out_dir)
}
