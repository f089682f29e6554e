//! Golden-angle class palette (F-RGB) and the mask codec built on it.
//!
//! Class `k ≥ 1` is drawn at hue `k · 137.50776405°` with full saturation and
//! value; class 0 is the black background. Decoding snaps each pixel to the
//! nearest palette color, so any perturbation smaller than half the closest
//! pair distance is undone exactly.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// `360 · (1 − 1/φ)` in degrees.
pub const GOLDEN_ANGLE_DEG: f64 = 137.507_764_050_037_85;

pub const MAX_CLASSES: usize = 256;

/// Presence threshold used when none is given: 0.1 % of the pixels.
pub const DEFAULT_MIN_FRACTION: f64 = 0.001;

pub type Rgb = [u8; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPalette {
    colors: Vec<Rgb>,
    class_names: Vec<String>,
    min_pair_distance: f64,
}

/// Standard sector-based HSV → RGB on the unit cube.
pub fn hsv_to_rgb(hue_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let h = math::fmod(math::fmod(hue_deg, 360.0) + 360.0, 360.0) / 60.0;
    let x = c * (1.0 - (math::fmod(h, 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn sq(v: f64) -> f64 {
    v * v
}

fn rgb_distance(a: Rgb, b: Rgb) -> f64 {
    let d: f64 = (0..3).map(|i| sq(f64::from(a[i]) - f64::from(b[i]))).sum();
    math::sqrt(d)
}

impl ClassPalette {
    pub fn build(num_classes: usize, class_names: &[String]) -> Result<Self> {
        if num_classes == 0 {
            bail!(Validation, "a palette needs at least one class");
        }
        if num_classes > MAX_CLASSES {
            return Err(Error::UnsupportedSize(num_classes));
        }
        if class_names.len() != num_classes {
            bail!(Validation, "{} class names for {} classes", class_names.len(), num_classes);
        }
        let colors: Vec<Rgb> = (0..num_classes)
            .map(|k| {
                if k == 0 {
                    return [0, 0, 0];
                }
                let hue = math::fmod(k as f64 * GOLDEN_ANGLE_DEG, 360.0);
                hsv_to_rgb(hue, 1.0, 1.0).map(|c| math::round(c * 255.0) as u8)
            })
            .collect();
        Self::from_parts(colors, class_names.to_vec())
    }

    /// Builds a palette from explicit colors, e.g. one read back from disk.
    pub fn from_parts(colors: Vec<Rgb>, class_names: Vec<String>) -> Result<Self> {
        if colors.is_empty() || colors.len() != class_names.len() {
            bail!(Validation, "{} colors for {} class names", colors.len(), class_names.len());
        }
        if colors.len() > MAX_CLASSES {
            return Err(Error::UnsupportedSize(colors.len()));
        }
        let mut min_pair_distance = f64::INFINITY;
        for i in 0..colors.len() {
            for j in i + 1..colors.len() {
                min_pair_distance = min_pair_distance.min(rgb_distance(colors[i], colors[j]));
            }
        }
        if min_pair_distance == 0.0 {
            bail!(Validation, "palette colors are not pairwise distinct");
        }
        Ok(Self { colors, class_names, min_pair_distance })
    }

    pub fn num_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn colors(&self) -> &[Rgb] {
        &self.colors
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Infinite for a single-class palette.
    pub fn min_pair_distance(&self) -> f64 {
        self.min_pair_distance
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    /// Nearest palette entry; ties go to the lowest index.
    pub fn nearest(&self, rgb: [f64; 3]) -> u8 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, c) in self.colors.iter().enumerate() {
            let d: f64 = (0..3).map(|i| sq(rgb[i] - f64::from(c[i]))).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u8
    }

    pub fn encode_mask(&self, map: &ClassMap) -> Result<RgbMask> {
        let mut pixels = Vec::with_capacity(map.ids.len());
        for &id in &map.ids {
            let Some(&c) = self.colors.get(usize::from(id)) else {
                bail!(Validation, "class id {} outside palette of {}", id, self.colors.len());
            };
            pixels.push(c);
        }
        Ok(RgbMask { height: map.height, width: map.width, pixels })
    }

    pub fn decode_pixels(&self, height: usize, width: usize, rgb: &[[f64; 3]]) -> Result<ClassMap> {
        if rgb.len() != height * width {
            bail!(Shape, "{} pixels for a {}x{} mask", rgb.len(), height, width);
        }
        let ids = rgb.iter().map(|&p| self.nearest(p)).collect();
        ClassMap::new(height, width, ids)
    }

    pub fn decode_mask(&self, mask: &RgbMask) -> ClassMap {
        let ids = mask.pixels.iter().map(|p| self.nearest(p.map(f64::from))).collect();
        ClassMap { height: mask.height, width: mask.width, ids }
    }

    /// Decodes a `(3, H, W)` mask in `[-1, 1]`.
    pub fn decode_tensor(&self, mask: &Tensor) -> Result<ClassMap> {
        let (c, h, w) = mask.dims3()?;
        if c != 3 {
            bail!(Shape, "mask tensor needs 3 channels, got {}", c);
        }
        let d = mask.data();
        let plane = h * w;
        let rgb: Vec<[f64; 3]> = (0..plane)
            .map(|i| [0, 1, 2].map(|ch| denormalize(d[ch * plane + i])))
            .collect();
        self.decode_pixels(h, w, &rgb)
    }
}

/// `[-1, 1] → [0, 255]`.
#[inline]
pub fn denormalize(v: f64) -> f64 {
    (v + 1.0) * 127.5
}

/// `[0, 255] → [-1, 1]`.
#[inline]
pub fn normalize(v: f64) -> f64 {
    v / 127.5 - 1.0
}

/// Dense `H × W` grid of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            bail!(Shape, "{} ids for a {}x{} map", ids.len(), height, width);
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self { height, width, ids: vec![id; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, id: u8) {
        self.ids[y * self.width + x] = id;
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_id(&self) -> Option<u8> {
        self.ids.iter().copied().max()
    }

    /// Pixel count per class id, indexed `0..num_classes`.
    pub fn counts(&self, num_classes: usize) -> Vec<usize> {
        let mut out = vec![0; num_classes.max(usize::from(self.max_id().unwrap_or(0)) + 1)];
        for &id in &self.ids {
            out[usize::from(id)] += 1;
        }
        out
    }

    /// Non-background classes whose pixel share is at least `min_fraction`.
    pub fn classes_present(&self, min_fraction: f64) -> BTreeSet<usize> {
        let total = self.ids.len();
        if total == 0 {
            return BTreeSet::new();
        }
        self.counts(0)
            .into_iter()
            .enumerate()
            .skip(1)
            .filter(|&(_, n)| n > 0 && n as f64 / total as f64 >= min_fraction)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Palette-encoded mask, one RGB triple per pixel in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbMask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Rgb>,
}

impl RgbMask {
    /// `(3, H, W)` tensor in `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; 3 * plane];
        for (i, p) in self.pixels.iter().enumerate() {
            for ch in 0..3 {
                data[ch * plane + i] = normalize(f64::from(p[ch]));
            }
        }
        Tensor::new(&[3, self.height, self.width], data).expect("consistent mask dims")
    }
}
