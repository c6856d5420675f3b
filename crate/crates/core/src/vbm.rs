//! Visibility boost: a saturation-modulated dark-channel dehaze, wrapped in a
//! conditional channel inversion so low-light frames go through the same path.

use crate::error::{Error, Result};
use crate::image::{invert, mean_luminance, mean_saturation, min_filter, pixel_luminance, Image, ScalarMap};

/// Lower bound applied to every atmospheric-light channel.
pub const LIGHT_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct VbmConfig {
    /// Scale of the saturation term in `exp(-mean_sat * gamma)`.
    pub gamma: f64,
    /// Half-width of the square window used by the dark channel.
    pub patch_radius: usize,
    /// Number of brightest pixels averaged into the atmospheric light.
    pub light_sample_count: usize,
    /// Mean luminance below which the image is treated as low-light.
    pub night_luminance_threshold: f64,
    pub t_floor: f64,
}

impl Default for VbmConfig {
    fn default() -> Self {
        VbmConfig {
            gamma: 4.0,
            patch_radius: 7,
            light_sample_count: 1000,
            night_luminance_threshold: 0.25,
            t_floor: 0.1,
        }
    }
}

impl VbmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be a positive finite number");
        }
        if self.light_sample_count == 0 {
            return bad("light_sample_count", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.night_luminance_threshold) {
            return bad("night_luminance_threshold", "must lie in [0, 1]");
        }
        if !(self.t_floor > 0.0 && self.t_floor < 1.0) {
            return bad("t_floor", "must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Global per-channel airlight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtmosphericLight(pub [f64; 3]);

impl AtmosphericLight {
    pub fn gray(v: f64) -> Self {
        AtmosphericLight([v; 3])
    }
}

/// Averages the `light_sample_count` most luminous pixels; ties go to the
/// lower row-major index.
pub fn estimate_atmospheric_light(img: &Image, cfg: &VbmConfig) -> AtmosphericLight {
    if img.is_empty() {
        return AtmosphericLight::gray(1.0);
    }
    let lum: Vec<f64> = img.pixels().map(pixel_luminance).collect();
    let mut order: Vec<usize> = (0..img.len()).collect();
    order.sort_by(|&a, &b| lum[b].total_cmp(&lum[a]).then(a.cmp(&b)));
    let n = cfg.light_sample_count.clamp(1, img.len());
    let mut sum = [0.0; 3];
    for &i in &order[..n] {
        let p = img.pixel_at(i);
        for c in 0..3 {
            sum[c] += p[c];
        }
    }
    AtmosphericLight(sum.map(|s| (s / n as f64).max(LIGHT_FLOOR)))
}

/// Dehaze-strength coefficient `exp(-mean_sat * gamma)`.
pub fn omega_s(mean_sat: f64, gamma: f64) -> f64 {
    (-mean_sat * gamma).exp()
}

/// Windowed minimum of `I^c / A^c` over channels, clamped to `[0, 1]`.
pub fn dark_channel(img: &Image, a: &AtmosphericLight, cfg: &VbmConfig) -> ScalarMap {
    let a = a.0;
    let per_pixel = ScalarMap::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        (p[0] / a[0]).min(p[1] / a[1]).min(p[2] / a[2])
    });
    min_filter(&per_pixel, cfg.patch_radius).map(|v| v.clamp(0.0, 1.0))
}

/// `max(1 - w * dark, t_floor)`.
pub fn transmission(dark: &ScalarMap, w: f64, cfg: &VbmConfig) -> ScalarMap {
    dark.map(|d| (1.0 - w * d).max(cfg.t_floor))
}

/// Solves the scatter model for the scene radiance without clamping.
pub fn recover_raw(img: &Image, t: &ScalarMap, a: &AtmosphericLight) -> Vec<f64> {
    debug_assert!(img.same_dims(t));
    img.pixels()
        .zip(t.data())
        .flat_map(|(p, &t)| {
            let mut j = [0.0; 3];
            for c in 0..3 {
                j[c] = (p[c] - a.0[c] * (1.0 - t)) / t;
            }
            j
        })
        .collect()
}

pub fn recover(img: &Image, t: &ScalarMap, a: &AtmosphericLight) -> Image {
    let raw = recover_raw(img, t, a);
    let w = img.width();
    Image::from_fn(img.height(), w, |y, x| {
        let i = (y * w + x) * 3;
        [raw[i], raw[i + 1], raw[i + 2]]
    })
}

/// Everything `boost` measured on one image.
#[derive(Clone, Debug)]
pub struct BoostReport {
    pub image: Image,
    pub night: bool,
    pub omega_s: f64,
    pub light: AtmosphericLight,
    pub mean_sat_before: f64,
    pub mean_sat_after: f64,
}

/// Dehaze without the inversion switch.
pub fn boost_core(img: &Image, cfg: &VbmConfig) -> (Image, f64, AtmosphericLight) {
    let w = omega_s(mean_saturation(img), cfg.gamma);
    let a = estimate_atmospheric_light(img, cfg);
    let dark = dark_channel(img, &a, cfg);
    let t = transmission(&dark, w, cfg);
    (recover(img, &t, &a), w, a)
}

pub fn boost_with_report(img: &Image, cfg: &VbmConfig) -> BoostReport {
    let night = mean_luminance(img) < cfg.night_luminance_threshold;
    let (image, omega_s, light) = if night {
        let (j, w, a) = boost_core(&invert(img), cfg);
        (invert(&j), w, a)
    } else {
        boost_core(img, cfg)
    };
    BoostReport {
        mean_sat_before: mean_saturation(img),
        mean_sat_after: mean_saturation(&image),
        image,
        night,
        omega_s,
        light,
    }
}

pub fn boost(img: &Image, cfg: &VbmConfig) -> Image {
    boost_with_report(img, cfg).image
}
