//! Dense row-major `f64` tensors.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            bail!(Shape, "shape {:?} needs {} elements, got {}", shape, n, data.len());
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// Standard normal draws.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self { shape: shape.to_vec(), data }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(B, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => bail!(Shape, "expected a rank-4 tensor, got {:?}", self.shape),
        }
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            _ => bail!(Shape, "expected a rank-3 tensor, got {:?}", self.shape),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            bail!(Shape, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            bail!(Shape, "{:?} vs {:?}", self.shape, other.shape);
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Sample `i` of a batched tensor, keeping the batch axis (`1 × ...`).
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        self.batch_range(i, i + 1)
    }

    pub fn batch_range(&self, start: usize, end: usize) -> Result<Self> {
        let Some((&b, rest)) = self.shape.split_first() else {
            bail!(Shape, "batch slice of a scalar");
        };
        if start > end || end > b {
            bail!(Shape, "batch range {}..{} out of {}", start, end, b);
        }
        let stride: usize = rest.iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Drops a leading axis of size 1.
    pub fn squeeze_batch(self) -> Result<Self> {
        if self.shape.first() != Some(&1) {
            bail!(Shape, "expected leading axis of size 1, got {:?}", self.shape);
        }
        let shape = self.shape[1..].to_vec();
        Ok(Self { shape, data: self.data })
    }

    pub fn unsqueeze_batch(mut self) -> Self {
        self.shape.insert(0, 1);
        self
    }

    /// Concatenates along the leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let Some(first) = items.first() else {
            bail!(Shape, "stack of zero tensors");
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                bail!(Shape, "stack: {:?} vs {:?}", t.shape, first.shape);
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Short diagnostic summary: min / max / mean / count of non-finite values.
    pub fn summary(&self) -> alloc::string::String {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut bad = 0usize;
        for &v in &self.data {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            } else {
                bad += 1;
            }
        }
        let good = self.data.len() - bad;
        let mean = if good > 0 { sum / good as f64 } else { f64::NAN };
        format!("min={lo:.4} max={hi:.4} mean={mean:.4} non_finite={bad}/{}", self.data.len())
    }
}

/// `(B, C, H, W)` nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; b * c * oh * ow];
    let src = x.data();
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                d[y * ow + xx] = s[(y / factor) * w + xx / factor];
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// `(B, C, H, W)` average pooling with a square window equal to its stride.
pub fn avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        bail!(Shape, "{}x{} is not divisible by pool factor {}", h, w, factor);
    }
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    let src = x.data();
    for plane in 0..b * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                d[(y / factor) * ow + xx / factor] += s[y * w + xx] * norm;
            }
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

/// Bilinear resize of a `(C, H, W)` tensor with half-pixel centres.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        bail!(Shape, "cannot resize {}x{} to {}x{}", h, w, out_h, out_w);
    }
    let src = x.data();
    let mut out = vec![0.0; c * out_h * out_w];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ch in 0..c {
                let p = &src[ch * h * w..];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[ch * out_h * out_w + oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}
