//! Dataset directories: `images/*.png`, `masks/*.png`, `palette.json` and an
//! optional `prompts.tsv` of `stem<TAB>caption` lines.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use cosimgen_core::dataset::{center_crop_resize_image, center_crop_resize_map, Dataset, PromptText, SamplePair};
use cosimgen_core::palette::ClassPalette;

use crate::error::{io_err, CliError, Result};
use crate::palette_file::read_palette;
use crate::png::{self, MaskEncoding};

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub prompt: Option<String>,
}

#[derive(Debug)]
pub struct Manifest {
    pub palette: ClassPalette,
    pub entries: Vec<Descriptor>,
    pub warnings: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

pub fn read_prompts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let Some((stem, caption)) = line.split_once('\t') else {
            return Err(CliError::Format(format!("{}:{}: expected stem<TAB>caption", path.display(), n + 1)));
        };
        out.insert(stem.trim().to_string(), caption.trim().to_string());
    }
    Ok(out)
}

/// Pairs images with masks by stem; orphans on either side become warnings.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let palette_path = root.join("palette.json");
    if !palette_path.is_file() {
        return Err(cosimgen_core::Error::Config(format!("{} is missing", palette_path.display())).into());
    }
    let palette = read_palette(&palette_path)?;
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let prompts_path = root.join("prompts.tsv");
    let prompts = if prompts_path.is_file() { read_prompts(&prompts_path)? } else { BTreeMap::new() };
    let mut warnings = Vec::new();
    let mut entries = Vec::new();
    for (stem, image) in &images {
        match masks.get(stem) {
            Some(mask) => entries.push(Descriptor {
                stem: stem.clone(),
                image: image.clone(),
                mask: mask.clone(),
                prompt: prompts.get(stem).cloned(),
            }),
            None => warnings.push(format!("image {stem} has no mask")),
        }
    }
    let image_stems: BTreeSet<&String> = images.keys().collect();
    for stem in masks.keys().filter(|s| !image_stems.contains(s)) {
        warnings.push(format!("mask {stem} has no image"));
    }
    for w in &warnings {
        log::warn!("{}: {w}", root.display());
    }
    Ok(Manifest { palette, entries, warnings })
}

/// Reads one descriptor at its native size.
pub fn load_sample(d: &Descriptor, palette: &ClassPalette) -> Result<(SamplePair, MaskEncoding)> {
    let (ih, iw) = png::dims(&d.image)?;
    let (mh, mw) = png::dims(&d.mask)?;
    if (ih, iw) != (mh, mw) {
        return Err(cosimgen_core::Error::Validation(format!("{}: image {ih}x{iw} but mask {mh}x{mw}", d.stem)).into());
    }
    let image = png::read_image(&d.image)?;
    let (map, enc) = png::read_mask(&d.mask, palette)?;
    let prompt = d.prompt.as_deref().map(PromptText::new).transpose()?;
    Ok((SamplePair::from_class_map(&d.stem, image, map, palette, prompt)?, enc))
}

/// Loads, center-crops and resizes every matched sample to `resolution`.
/// Rejected samples and samples without foreground are skipped with a warning.
pub fn load_dataset(root: &Path, resolution: usize) -> Result<(Dataset, Vec<String>)> {
    let m = load_manifest(root)?;
    let mut warnings = m.warnings;
    let mut samples = Vec::new();
    for d in &m.entries {
        let sample = match load_sample(d, &m.palette) {
            Ok((s, _)) => s,
            Err(CliError::Core(cosimgen_core::Error::EmptyCondition)) => {
                warnings.push(format!("{}: no foreground class; not trainable", d.stem));
                continue;
            }
            Err(e) => {
                log::warn!("{}: rejected: {e}", d.stem);
                warnings.push(format!("{}: rejected: {e}", d.stem));
                continue;
            }
        };
        if !sample.condition.is_trainable() {
            warnings.push(format!("{}: no foreground class; not trainable", d.stem));
            continue;
        }
        let image = center_crop_resize_image(&sample.image, resolution)?.clamp(-1.0, 1.0);
        let map = center_crop_resize_map(&sample.class_map, resolution);
        let prompt = d.prompt.as_deref().map(PromptText::new).transpose()?;
        match SamplePair::from_class_map(&d.stem, image, map, &m.palette, prompt) {
            Ok(s) if s.condition.is_trainable() => samples.push(s),
            Ok(_) => warnings.push(format!("{}: foreground lost by cropping", d.stem)),
            Err(e) => warnings.push(format!("{}: rejected after resize: {e}", d.stem)),
        }
    }
    Ok((Dataset::new(m.palette, samples)?, warnings))
}
