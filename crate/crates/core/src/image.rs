//! Value types shared by every stage of the pipeline, plus the handful of
//! pixel-level statistics the enhancement and model code need.

use crate::error::{Error, Result};

/// Label value reserved for unlabeled pixels.
pub const IGNORE_ID: u8 = 255;

/// Samples are kept on a `2^-53` grid, where `1 - v` is exact and channel
/// inversion is therefore a bit-exact involution.
const GRID: f64 = 9_007_199_254_740_992.0;

fn snap(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * GRID).round() / GRID
}

/// Row-major interleaved RGB image with every sample in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("image sample {v} outside [0, 1]")));
        }
        Ok(Image { height, width, data: data.into_iter().map(snap).collect() })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    /// Builds an image from a per-pixel closure; samples are clamped into `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).iter().map(|&v| snap(v)));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixel_at(&self, index: usize) -> [f64; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        for c in 0..3 {
            self.data[i + c] = snap(rgb[c]);
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// One channel as a scalar map.
    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    pub fn same_dims<T: Dims>(&self, other: &T) -> bool {
        self.height == other.height() && self.width == other.width()
    }
}

/// Anything with a height and a width.
pub trait Dims {
    fn height(&self) -> usize;
    fn width(&self) -> usize;
}

impl Dims for Image {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
}

impl Dims for ScalarMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
}

impl Dims for LabelMap {
    fn height(&self) -> usize {
        self.height
    }
    fn width(&self) -> usize {
        self.width
    }
}

/// Row-major single-channel real field (transmission, depth, dark channel...).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ScalarMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ScalarMap { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ScalarMap { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarMap {
        ScalarMap { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Pointwise minimum of two maps of equal size.
    pub fn min_with(&self, other: &ScalarMap) -> ScalarMap {
        debug_assert_eq!(self.data.len(), other.data.len());
        ScalarMap {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a.min(*b)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Row-major class ids; [`IGNORE_ID`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap { height, width, data: vec![id; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.data[y * self.width + x] = id;
    }

    /// Checks every non-ignored id against the class count.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&id| id != IGNORE_ID && id as usize >= classes) {
            Some(&id) => Err(Error::LabelOutOfRange { id: id as usize, classes }),
            None => Ok(()),
        }
    }

    /// Sorted distinct non-ignored ids.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &id in &self.data {
            seen[id as usize] = true;
        }
        (0..IGNORE_ID).filter(|&id| seen[id as usize]).collect()
    }
}

/// Per-pixel `(max_c - min_c) / max_c`; black pixels map to 0.
pub fn saturation_map(img: &Image) -> ScalarMap {
    ScalarMap {
        height: img.height,
        width: img.width,
        data: img.pixels().map(pixel_saturation).collect(),
    }
}

pub fn pixel_saturation(rgb: [f64; 3]) -> f64 {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    let min = rgb[0].min(rgb[1]).min(rgb[2]);
    if max <= 0.0 {
        0.0
    } else {
        (max - min) / max
    }
}

pub fn mean_saturation(img: &Image) -> f64 {
    if img.is_empty() {
        return 0.0;
    }
    img.pixels().map(pixel_saturation).sum::<f64>() / img.len() as f64
}

pub fn pixel_luminance(rgb: [f64; 3]) -> f64 {
    (rgb[0] + rgb[1] + rgb[2]) / 3.0
}

pub fn mean_luminance(img: &Image) -> f64 {
    if img.is_empty() {
        return 0.0;
    }
    img.pixels().map(pixel_luminance).sum::<f64>() / img.len() as f64
}

/// Channel-wise `1 - v`.
pub fn invert(img: &Image) -> Image {
    Image {
        height: img.height,
        width: img.width,
        data: img.data.iter().map(|v| 1.0 - v).collect(),
    }
}

/// Minimum over a `(2r+1)^2` square window, clamp-to-edge borders.
///
/// The square window is separable, so this runs a horizontal pass and then a
/// vertical pass over the row minima.
pub fn min_filter(map: &ScalarMap, radius: usize) -> ScalarMap {
    if radius == 0 || map.data.is_empty() {
        return map.clone();
    }
    let (h, w) = (map.height, map.width);
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        let line = &map.data[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            rows[y * w + x] = line[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(f64::INFINITY, f64::min);
        }
    }
    ScalarMap { height: h, width: w, data: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_min_filter(map: &ScalarMap, r: usize) -> ScalarMap {
        let (h, w) = (map.height() as isize, map.width() as isize);
        let r = r as isize;
        ScalarMap::from_fn(map.height(), map.width(), |y, x| {
            let mut m = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w - 1) as usize;
                    m = m.min(map.get(yy, xx));
                }
            }
            m
        })
    }

    #[test]
    fn saturation_examples() {
        let gray = Image::filled(2, 2, [0.5, 0.5, 0.5]);
        assert!(saturation_map(&gray).data().iter().all(|&v| v == 0.0));
        assert_eq!(pixel_saturation([1.0, 0.0, 0.0]), 1.0);
        assert!((pixel_saturation([0.8, 0.4, 0.2]) - 0.75).abs() < 1e-15);
        assert_eq!(pixel_saturation([0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn mean_saturation_examples() {
        let gray = Image::from_fn(4, 4, |y, x| {
            let v = (y * 4 + x) as f64 / 16.0;
            [v, v, v]
        });
        assert_eq!(mean_saturation(&gray), 0.0);
        assert_eq!(mean_saturation(&Image::filled(3, 3, [1.0, 0.0, 0.0])), 1.0);
        let checker = Image::from_fn(4, 4, |y, x| if (x + y) % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.5; 3] });
        assert_eq!(mean_saturation(&checker), 0.5);
    }

    #[test]
    fn invert_examples() {
        let zeros = Image::filled(2, 3, [0.0; 3]);
        assert_eq!(invert(&zeros), Image::filled(2, 3, [1.0; 3]));
        let px = invert(&Image::filled(1, 1, [0.3, 0.6, 0.9])).pixel(0, 0);
        for (got, want) in px.iter().zip([0.7, 0.4, 0.1]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn luminance_examples() {
        assert_eq!(mean_luminance(&Image::filled(2, 2, [0.0; 3])), 0.0);
        assert_eq!(mean_luminance(&Image::filled(2, 2, [1.0; 3])), 1.0);
        let half = Image::from_fn(2, 2, |y, _| if y == 0 { [0.0; 3] } else { [1.0; 3] });
        assert_eq!(mean_luminance(&half), 0.5);
    }

    #[test]
    fn min_filter_examples() {
        let map = ScalarMap::from_fn(5, 4, |y, x| (y * 7 + x * 3) as f64 % 5.0);
        assert_eq!(min_filter(&map, 0), map);
        let c = ScalarMap::filled(6, 6, 0.42);
        assert_eq!(min_filter(&c, 3), c);
        let mut center = ScalarMap::filled(3, 3, 1.0);
        center.data[4] = 0.0;
        assert!(min_filter(&center, 1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_validation() {
        let mut l = LabelMap::filled(2, 2, 1);
        l.set(0, 0, IGNORE_ID);
        assert!(l.validate(2).is_ok());
        assert!(matches!(l.validate(1), Err(Error::LabelOutOfRange { id: 1, classes: 1 })));
        assert_eq!(l.classes_present(), vec![1]);
    }

    #[test]
    fn constructors_check_shape_and_range() {
        assert!(Image::new(2, 2, vec![0.5; 11]).is_err());
        assert!(Image::new(1, 1, vec![0.5, 1.5, 0.0]).is_err());
        assert!(ScalarMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 5]).is_err());
    }

    fn arb_image() -> impl Strategy<Value = Image> {
        (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0.0f64..=1.0, h * w * 3).prop_map(move |d| Image::new(h, w, d).unwrap())
        })
    }

    fn arb_map() -> impl Strategy<Value = ScalarMap> {
        (1usize..10, 1usize..10).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-5.0f64..5.0, h * w).prop_map(move |d| ScalarMap::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn invert_is_an_involution(img in arb_image()) {
            prop_assert_eq!(invert(&invert(&img)), img);
        }

        #[test]
        fn saturation_in_unit_range(img in arb_image()) {
            let s = saturation_map(&img);
            for (v, p) in s.data().iter().zip(img.pixels()) {
                prop_assert!((0.0..=1.0).contains(v));
                if p[0] == p[1] && p[1] == p[2] {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }

        #[test]
        fn min_filter_matches_window_scan(map in arb_map(), r in 0usize..4) {
            let fast = min_filter(&map, r);
            prop_assert_eq!(&fast, &brute_min_filter(&map, r));
            for (o, i) in fast.data().iter().zip(map.data()) {
                prop_assert!(o <= i);
            }
        }

        #[test]
        fn min_filter_translation_equivariant(map in arb_map(), r in 0usize..3) {
            // shift right by one column; compare interior columns unaffected by either border
            let (h, w) = (map.height(), map.width());
            prop_assume!(w > 2 * r + 2);
            let shifted = ScalarMap::from_fn(h, w, |y, x| map.get(y, x.saturating_sub(1)));
            let a = min_filter(&map, r);
            let b = min_filter(&shifted, r);
            for y in 0..h {
                for x in (r + 1)..(w - r) {
                    prop_assert_eq!(b.get(y, x), a.get(y, x - 1));
                }
            }
        }
    }
}
