//! PNG reading and writing for images, F-RGB masks and class-id maps.

use std::path::Path;

use cosimgen_core::palette::{denormalize, normalize, ClassMap, ClassPalette, RgbMask};
use cosimgen_core::Tensor;
use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::error::{format_err, io_err, CliError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| format_err(format!("{}: {e}", path.display())))
}

/// `(3, H, W)` tensor in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = normalize(f64::from(p[c]));
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn quantize(v: f64) -> u8 {
    denormalize(v.clamp(-1.0, 1.0)).round() as u8
}

fn encode_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(format_err(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([quantize(d[i]), quantize(d[plane + i]), quantize(d[2 * plane + i])])
    }))
}

fn save(img: impl Into<DynamicImage>, path: &Path) -> Result<()> {
    img.into().save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(source) => CliError::Io { path: path.display().to_string(), source },
        other => format_err(other),
    })
}

pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    save(encode_rgb(t)?, path)
}

pub fn write_rgb_mask(mask: &RgbMask, path: &Path) -> Result<()> {
    let img = RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| image::Rgb(mask.pixels[y as usize * mask.width + x as usize]));
    save(img, path)
}

/// Class ids as an 8-bit grayscale PNG.
pub fn write_class_map(map: &ClassMap, path: &Path) -> Result<()> {
    let img = GrayImage::from_raw(map.width as u32, map.height as u32, map.ids.clone()).ok_or_else(|| format_err("class map size"))?;
    save(img, path)
}

/// How a mask file was interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskEncoding {
    Ids,
    Frgb,
}

/// Reads a mask stored either as class ids (grayscale, or RGB with equal
/// channels) or as palette colors; colors are tried first.
pub fn read_mask(path: &Path, palette: &ClassPalette) -> Result<(ClassMap, MaskEncoding)> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = palette.num_classes();
    let as_ids = |ids: Vec<u8>| -> Result<(ClassMap, MaskEncoding)> {
        if let Some(&bad) = ids.iter().find(|&&v| usize::from(v) >= n) {
            return Err(format_err(format!("{}: class id {bad} outside a {n}-class palette", path.display())));
        }
        Ok((ClassMap::new(h, w, ids)?, MaskEncoding::Ids))
    };
    if matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16) {
        return as_ids(img.to_luma8().into_raw());
    }
    let rgb = img.to_rgb8();
    let lookup: std::collections::HashMap<[u8; 3], u8> =
        palette.colors().iter().enumerate().map(|(k, c)| (*c, k as u8)).collect();
    let colors: Option<Vec<u8>> = rgb.pixels().map(|p| lookup.get(&p.0).copied()).collect();
    if let Some(ids) = colors {
        return Ok((ClassMap::new(h, w, ids)?, MaskEncoding::Frgb));
    }
    if rgb.pixels().all(|p| p[0] == p[1] && p[1] == p[2]) {
        return as_ids(rgb.pixels().map(|p| p[0]).collect());
    }
    // generated masks carry off-palette colors; snap them
    let px: Vec<[f64; 3]> = rgb.pixels().map(|p| p.0.map(f64::from)).collect();
    Ok((palette.decode_pixels(h, w, &px)?, MaskEncoding::Frgb))
}

pub fn dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| format_err(format!("{}: {e}", path.display())))?;
    Ok((h as usize, w as usize))
}
