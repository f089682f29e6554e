//! Procedural shapes: circles, squares and triangles on a shaded background.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, SamplePair};
use crate::error::Result;
use crate::palette::{ClassMap, ClassPalette};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 4] = ["background", "circle", "square", "triangle"];

/// Base RGB (in [-1, 1]) of each foreground class before jitter.
const BASE_COLORS: [[f64; 3]; 3] = [[0.8, -0.5, -0.4], [-0.4, 0.7, -0.3], [-0.3, -0.2, 0.9]];

pub fn shapes_palette() -> ClassPalette {
    let names: Vec<String> = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    ClassPalette::build(SHAPE_CLASSES.len(), &names).expect("four classes fit the palette")
}

/// The seven non-empty subsets of the three shape classes, cycled by index.
pub fn subset_for(index: usize) -> Vec<u8> {
    let mask = index % 7 + 1;
    (0..3).filter(|b| mask & (1 << b) != 0).map(|b| b as u8 + 1).collect()
}

fn inside(class: u8, (cy, cx, r): (f64, f64, f64), y: f64, x: f64) -> bool {
    let (dy, dx) = (y - cy, x - cx);
    match class {
        1 => dy * dy + dx * dx <= r * r,
        2 => dy.abs() <= r && dx.abs() <= r,
        // upward isosceles triangle with apex at cy − r and base at cy + r
        _ => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
    }
}

/// One sample with the given foreground classes placed in separate slots.
pub fn render(size: usize, classes: &[u8], rng: &mut ChaCha8Rng) -> (Tensor, ClassMap) {
    let s = size as f64;
    let shade: [f64; 3] = core::array::from_fn(|_| rng.random_range(-0.9..-0.5));
    let tilt = rng.random_range(-0.15..0.15);
    let mut img = Tensor::zeros(&[3, size, size]);
    let mut map = ClassMap::filled(size, size, 0);
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let g = tilt * (y as f64 / s - 0.5);
            for c in 0..3 {
                img.data_mut()[c * plane + y * size + x] = shade[c] + g;
            }
        }
    }
    // slots on a 2×2 grid so shapes do not overlap
    let mut slots: Vec<usize> = (0..4).collect();
    for i in (1..slots.len()).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    for (&class, &slot) in classes.iter().zip(&slots) {
        let cell = s / 2.0;
        let r = cell * rng.random_range(0.28..0.4);
        let cy = cell * ((slot / 2) as f64 + 0.5) + rng.random_range(-0.08..0.08) * cell;
        let cx = cell * ((slot % 2) as f64 + 0.5) + rng.random_range(-0.08..0.08) * cell;
        let base = BASE_COLORS[usize::from(class - 1)];
        let color: [f64; 3] = core::array::from_fn(|c| (base[c] + rng.random_range(-0.1..0.1)).clamp(-1.0, 1.0));
        for y in 0..size {
            for x in 0..size {
                if inside(class, (cy, cx, r), y as f64 + 0.5, x as f64 + 0.5) {
                    map.set(y, x, class);
                    for c in 0..3 {
                        img.data_mut()[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    (img, map)
}

/// `n` samples of `size × size`; sample `i` holds the shapes of [`subset_for`]`(i)`.
pub fn shapes_dataset(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    let palette = shapes_palette();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let (img, map) = render(size, &subset_for(i), &mut rng);
        samples.push(SamplePair::from_class_map(&format!("shape{i:04}"), img, map, &palette, None)?);
    }
    Dataset::new(palette, samples)
}
