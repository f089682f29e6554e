//! `palette.json`: ordered class entries with their F-RGB colors.

use std::path::Path;

use cosimgen_core::palette::ClassPalette;
use serde::{Deserialize, Serialize};

use crate::error::{format_err, io_err, usage, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub id: usize,
    pub name: String,
    pub rgb: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PaletteFile {
    pub num_classes: usize,
    pub classes: Vec<PaletteEntry>,
}

impl PaletteFile {
    pub fn from_palette(p: &ClassPalette) -> Self {
        let classes = p
            .colors()
            .iter()
            .zip(p.class_names())
            .enumerate()
            .map(|(id, (&rgb, name))| PaletteEntry { id, name: name.clone(), rgb })
            .collect();
        Self { num_classes: p.num_classes(), classes }
    }

    pub fn to_palette(&self) -> Result<ClassPalette> {
        if self.classes.len() != self.num_classes || self.classes.iter().enumerate().any(|(i, e)| e.id != i) {
            return Err(format_err("palette entries must be listed in id order 0..num_classes"));
        }
        let colors = self.classes.iter().map(|e| e.rgb).collect();
        let names = self.classes.iter().map(|e| e.name.clone()).collect();
        Ok(ClassPalette::from_parts(colors, names)?)
    }
}

pub fn to_json(p: &ClassPalette) -> String {
    let mut s = serde_json::to_string_pretty(&PaletteFile::from_palette(p)).expect("palette serializes");
    s.push('\n');
    s
}

pub fn read_palette(path: &Path) -> Result<ClassPalette> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: PaletteFile = serde_json::from_str(&text).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    file.to_palette()
}

/// One class name per non-empty line; `num_classes` defaults to the line count.
pub fn read_names(path: &Path, num_classes: Option<usize>) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if let Some(n) = num_classes {
        if n != names.len() {
            return Err(usage(format!("names file lists {} classes but --num-classes is {n}", names.len())));
        }
    }
    if names.is_empty() {
        return Err(usage("names file is empty"));
    }
    Ok(names)
}

/// `background`, `class1`, `class2`, ...
pub fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|k| if k == 0 { "background".into() } else { format!("class{k}") }).collect()
}
