#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cosimgen::{palette_file, png};
use cosimgen_core::synthetic::shapes_dataset;

/// Writes `n` procedural shape pairs in the dataset layout and returns the root.
pub fn write_shapes_dir(root: &Path, n: usize, size: usize, seed: u64) -> PathBuf {
    let data = shapes_dataset(n, size, seed).unwrap();
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    std::fs::write(root.join("palette.json"), palette_file::to_json(&data.palette)).unwrap();
    for s in &data.samples {
        png::write_image(&s.image, &root.join("images").join(format!("{}.png", s.source_id))).unwrap();
        let mask = data.palette.encode_mask(&s.class_map).unwrap();
        png::write_rgb_mask(&mask, &root.join("masks").join(format!("{}.png", s.source_id))).unwrap();
    }
    root.to_path_buf()
}

/// Overrides that shrink the desk preset to a few seconds of CPU time.
pub fn tiny_overrides() -> Vec<String> {
    [
        "train.model.resolution=16",
        "train.model.base_width=4",
        "train.model.multipliers=[1, 2]",
        "train.model.d_model=8",
        "train.model.d_feat=6",
        "train.model.d_base=8",
        "train.model.num_steps=6",
        "train.model.disc_widths=[4, 4]",
        "train.batch_size=2",
        "train.checkpoint_every=2",
        "sr.widths=[4, 4]",
        "sr.batch_size=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn list(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|r| r.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}
