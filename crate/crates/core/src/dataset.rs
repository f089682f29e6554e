//! Condition vectors, prompts and the 6-channel image+mask pair.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::palette::{ClassMap, ClassPalette, DEFAULT_MIN_FRACTION};
use crate::tensor::{self, Tensor};

/// Binary class-presence vector, one bit per palette class (bit 0 is background).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConditionVector {
    bits: Vec<bool>,
}

impl ConditionVector {
    pub fn empty(num_classes: usize) -> Self {
        Self { bits: vec![false; num_classes] }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn from_classes(num_classes: usize, classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut c = Self::empty(num_classes);
        for k in classes {
            if k == 0 || k >= num_classes {
                bail!(Validation, "class {} is not a foreground class of {}", k, num_classes);
            }
            c.bits[k] = true;
        }
        Ok(c)
    }

    /// Bit `k` is set iff class `k ≥ 1` covers at least `min_fraction` of the map.
    pub fn derive(map: &ClassMap, num_classes: usize, min_fraction: f64) -> Result<Self> {
        if let Some(max) = map.max_id() {
            if usize::from(max) >= num_classes {
                bail!(Validation, "class id {} outside {} classes", max, num_classes);
            }
        }
        Self::from_classes(num_classes, map.classes_present(min_fraction))
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn num_classes(&self) -> usize {
        self.bits.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k)
    }

    pub fn is_set(&self, k: usize) -> bool {
        self.bits.get(k).copied().unwrap_or(false)
    }

    /// Samples without any set bit carry no conditioning signal.
    pub fn is_trainable(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// [`ConditionVector::derive`] with the default presence threshold.
pub fn derive_condition(map: &ClassMap, num_classes: usize) -> Result<ConditionVector> {
    ConditionVector::derive(map, num_classes, DEFAULT_MIN_FRACTION)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PromptText(String);

impl PromptText {
    pub fn new(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            bail!(Validation, "empty prompt");
        }
        Ok(Self(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl core::fmt::Display for PromptText {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

pub const PROMPT_PREFIX: &str = "A photo of ";

/// `"A photo of " + names of the set classes, ascending index, comma separated`.
pub fn synthesize_prompt(condition: &ConditionVector, palette: &ClassPalette) -> Result<PromptText> {
    if !condition.is_trainable() {
        return Err(Error::EmptyCondition);
    }
    let mut text = String::from(PROMPT_PREFIX);
    for (i, k) in condition.classes().enumerate() {
        let Some(name) = palette.class_names().get(k) else {
            bail!(Validation, "class {} not in palette", k);
        };
        if i > 0 {
            text.push_str(", ");
        }
        text.push_str(name);
    }
    Ok(PromptText(text))
}

fn check_unit_range(t: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = t.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        bail!(Validation, "{} value {} outside [-1, 1]", what, v);
    }
    Ok(())
}

/// Channels 0–2 hold the image, 3–5 the palette-encoded mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTensor(Tensor);

impl PairTensor {
    pub fn pack(image: &Tensor, mask_rgb: &Tensor) -> Result<Self> {
        let (ci, hi, wi) = image.dims3()?;
        let (cm, hm, wm) = mask_rgb.dims3()?;
        if ci != 3 || cm != 3 || (hi, wi) != (hm, wm) {
            bail!(Shape, "pack: image {:?}, mask {:?}", image.shape(), mask_rgb.shape());
        }
        check_unit_range(image, "image")?;
        check_unit_range(mask_rgb, "mask")?;
        let mut data = Vec::with_capacity(6 * hi * wi);
        data.extend_from_slice(image.data());
        data.extend_from_slice(mask_rgb.data());
        Ok(Self(Tensor::new(&[6, hi, wi], data)?))
    }

    /// Wraps a `(6, H, W)` tensor with finite values.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 6 {
            bail!(Shape, "pair tensor needs 6 channels, got {:?}", t.shape());
        }
        if !t.all_finite() {
            bail!(Validation, "pair tensor has non-finite values");
        }
        Ok(Self(t))
    }

    pub fn unpack(&self) -> (Tensor, Tensor) {
        let (_, h, w) = self.0.dims3().expect("pair tensors are rank 3");
        let plane = 3 * h * w;
        let d = self.0.data();
        (
            Tensor::new(&[3, h, w], d[..plane].to_vec()).expect("image half"),
            Tensor::new(&[3, h, w], d[plane..].to_vec()).expect("mask half"),
        )
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn hw(&self) -> (usize, usize) {
        let s = self.0.shape();
        (s[1], s[2])
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Tensor,
    pub mask_rgb: Tensor,
    pub class_map: ClassMap,
    pub condition: ConditionVector,
    pub prompt: PromptText,
    pub source_id: String,
}

impl SamplePair {
    /// Assembles a sample from an image in `[-1, 1]` and its class map; the
    /// condition is derived from the map and the prompt synthesized unless given.
    pub fn from_class_map(
        source_id: &str,
        image: Tensor,
        class_map: ClassMap,
        palette: &ClassPalette,
        prompt: Option<PromptText>,
    ) -> Result<Self> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || (h, w) != (class_map.height, class_map.width) {
            bail!(Validation, "{}: image {:?} vs mask {}x{}", source_id, image.shape(), class_map.height, class_map.width);
        }
        check_unit_range(&image, "image")?;
        let mask_rgb = palette.encode_mask(&class_map)?.to_tensor();
        let condition = derive_condition(&class_map, palette.num_classes())?;
        let prompt = match prompt {
            Some(p) => p,
            None => synthesize_prompt(&condition, palette)?,
        };
        Ok(Self { image, mask_rgb, class_map, condition, prompt, source_id: source_id.to_string() })
    }

    pub fn pair(&self) -> Result<PairTensor> {
        PairTensor::pack(&self.image, &self.mask_rgb)
    }

    /// Checks that the stored condition matches the classes decoded from the mask.
    pub fn audit(&self, palette: &ClassPalette) -> Result<()> {
        let decoded = palette.decode_tensor(&self.mask_rgb)?;
        let derived = derive_condition(&decoded, palette.num_classes())?;
        if derived != self.condition {
            bail!(Validation, "{}: condition does not match decoded mask", self.source_id);
        }
        Ok(())
    }
}

/// The eight symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Transform {
    pub const ALL: [Transform; 8] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipH,
        Transform::FlipV,
        Transform::Transpose,
        Transform::AntiTranspose,
    ];

    fn swaps_axes(self) -> bool {
        matches!(self, Self::Rot90 | Self::Rot270 | Self::Transpose | Self::AntiTranspose)
    }

    /// Source pixel `(y, x)` in an `h × w` input for output pixel `(oy, ox)`.
    fn source(self, (h, w): (usize, usize), (oy, ox): (usize, usize)) -> (usize, usize) {
        match self {
            Self::Identity => (oy, ox),
            Self::FlipH => (oy, w - 1 - ox),
            Self::FlipV => (h - 1 - oy, ox),
            Self::Rot180 => (h - 1 - oy, w - 1 - ox),
            // counter-clockwise quarter turn: output is w × h
            Self::Rot90 => (ox, w - 1 - oy),
            Self::Rot270 => (h - 1 - ox, oy),
            Self::Transpose => (ox, oy),
            Self::AntiTranspose => (h - 1 - ox, w - 1 - oy),
        }
    }

    fn out_hw(self, (h, w): (usize, usize)) -> (usize, usize) {
        if self.swaps_axes() {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn apply_tensor(self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.dims3()?;
        let (oh, ow) = self.out_hw((h, w));
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, x) = self.source((h, w), (oy, ox));
                    out[(ch * oh + oy) * ow + ox] = src[(ch * h + y) * w + x];
                }
            }
        }
        Tensor::new(&[c, oh, ow], out)
    }

    pub fn apply_map(self, m: &ClassMap) -> ClassMap {
        let (oh, ow) = self.out_hw((m.height, m.width));
        let mut out = ClassMap::filled(oh, ow, 0);
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x) = self.source((m.height, m.width), (oy, ox));
                out.set(oy, ox, m.get(y, x));
            }
        }
        out
    }
}

/// Applies one transform to image, mask and class map together; the condition is unchanged.
pub fn apply_transform(sample: &SamplePair, t: Transform) -> Result<SamplePair> {
    Ok(SamplePair {
        image: t.apply_tensor(&sample.image)?,
        mask_rgb: t.apply_tensor(&sample.mask_rgb)?,
        class_map: t.apply_map(&sample.class_map),
        condition: sample.condition.clone(),
        prompt: sample.prompt.clone(),
        source_id: sample.source_id.clone(),
    })
}

/// Random flip / quarter-turn drawn from `seed`.
pub fn augment(sample: &SamplePair, seed: u64) -> Result<SamplePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transform::ALL[rng.random_range(0..Transform::ALL.len())];
    apply_transform(sample, t)
}

/// Largest centred square, resized to `size × size` (bilinear for images).
pub fn center_crop_resize_image(image: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = image.dims3()?;
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let mut crop = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in y0..y0 + side {
            let row = (ch * h + y) * w;
            crop.extend_from_slice(&image.data()[row + x0..row + x0 + side]);
        }
    }
    let crop = Tensor::new(&[c, side, side], crop)?;
    if side == size {
        return Ok(crop);
    }
    tensor::resize_bilinear(&crop, size, size)
}

/// Same crop as [`center_crop_resize_image`], nearest-neighbour so ids stay valid.
pub fn center_crop_resize_map(map: &ClassMap, size: usize) -> ClassMap {
    let side = map.height.min(map.width);
    let (y0, x0) = ((map.height - side) / 2, (map.width - side) / 2);
    let mut out = ClassMap::filled(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let sy = y0 + (y * side) / size;
            let sx = x0 + (x * side) / size;
            out.set(y, x, map.get(sy, sx));
        }
    }
    out
}

/// A palette plus its samples, all at one resolution.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub palette: ClassPalette,
    pub samples: Vec<SamplePair>,
}

/// Stacked training inputs.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `(B, 6, H, W)` clean pairs.
    pub x0: Tensor,
    pub conditions: Vec<ConditionVector>,
    pub prompts: Vec<PromptText>,
}

impl Dataset {
    pub fn new(palette: ClassPalette, samples: Vec<SamplePair>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let hw = (first.class_map.height, first.class_map.width);
            if let Some(bad) = samples.iter().find(|s| (s.class_map.height, s.class_map.width) != hw) {
                bail!(Validation, "{}: resolution differs from {:?}", bad.source_id, hw);
            }
        }
        Ok(Self { palette, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.class_map.height, s.class_map.width))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut pairs = Vec::with_capacity(indices.len());
        let mut conditions = Vec::with_capacity(indices.len());
        let mut prompts = Vec::with_capacity(indices.len());
        for &i in indices {
            let Some(s) = self.samples.get(i) else {
                bail!(Validation, "sample index {} out of {}", i, self.samples.len());
            };
            pairs.push(s.pair()?.into_tensor());
            conditions.push(s.condition.clone());
            prompts.push(s.prompt.clone());
        }
        Ok(Batch { x0: Tensor::stack(&pairs)?, conditions, prompts })
    }
}
