//! Distribution and conditioning metrics over generated pairs.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ConditionVector;
use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::math;
use crate::palette::ClassMap;
use crate::superres::PerceptualExtractor;
use crate::tensor::{self, Tensor};

/// `n × f` feature matrix tagged with the extractor that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub matrix: DMatrix<f64>,
    pub extractor_id: String,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], extractor_id: &str) -> Result<Self> {
        let f = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != f) {
            bail!(Validation, "ragged feature rows");
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            bail!(Validation, "non-finite features");
        }
        Ok(Self { matrix: DMatrix::from_fn(rows.len(), f, |i, j| rows[i][j]), extractor_id: extractor_id.into() })
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.n().max(1) as f64;
        DVector::from_fn(self.dim(), |j, _| self.matrix.column(j).sum() / n)
    }

    /// Unbiased covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let mut centered = self.matrix.clone();
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        (centered.transpose() * centered) / (self.n() as f64 - 1.0)
    }
}

fn check_pair(a: &FeatureSet, b: &FeatureSet, min_n: usize) -> Result<()> {
    if a.extractor_id != b.extractor_id {
        bail!(Validation, "extractor mismatch: {} vs {}", a.extractor_id, b.extractor_id);
    }
    if a.dim() != b.dim() {
        bail!(Validation, "feature widths differ: {} vs {}", a.dim(), b.dim());
    }
    if a.n() < min_n || b.n() < min_n {
        bail!(Validation, "need at least {} samples per set, got {} and {}", min_n, a.n(), b.n());
    }
    Ok(())
}

/// Symmetric PSD square root with negative eigenvalues clipped to zero.
pub fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let floor = eig.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs())) * 1e-12;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| if l > floor { math::sqrt(l) } else { 0.0 }));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `tr((Σ_A Σ_B)^{1/2})` computed as `tr((√Σ_A Σ_B √Σ_A)^{1/2})`.
fn trace_sqrt_product(sa: &DMatrix<f64>, sb: &DMatrix<f64>) -> f64 {
    let r = sqrt_psd(sa);
    let m = &r * sb * &r;
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym).eigenvalues;
    // rounding noise on a rank-deficient product would otherwise enter as √ε
    let floor = eig.iter().fold(0.0f64, |a, &l| a.max(l.abs())) * 1e-12;
    eig.iter().filter(|&&l| l > floor).map(|&l| math::sqrt(l)).sum()
}

/// `‖μ_A−μ_B‖² + tr(Σ_A + Σ_B − 2(Σ_A Σ_B)^{1/2})`. Not clipped.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let dmu = a.mean() - b.mean();
    let (sa, sb) = (a.covariance(), b.covariance());
    Ok(dmu.norm_squared() + sa.trace() + sb.trace() - 2.0 * trace_sqrt_product(&sa, &sb))
}

/// Unbiased MMD² with kernel `(xᵀy/f + 1)³`.
pub fn kernel_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 2)?;
    let f = a.dim() as f64;
    let k = |g: DMatrix<f64>| g.map(|v| {
        let u = v / f + 1.0;
        u * u * u
    });
    let kxx = k(&a.matrix * a.matrix.transpose());
    let kyy = k(&b.matrix * b.matrix.transpose());
    let kxy = k(&a.matrix * b.matrix.transpose());
    let (m, n) = (a.n() as f64, b.n() as f64);
    let off = |g: &DMatrix<f64>| g.sum() - g.trace();
    Ok(off(&kxx) / (m * (m - 1.0)) + off(&kyy) / (n * (n - 1.0)) - 2.0 * kxy.sum() / (m * n))
}

/// Euclidean distance between feature means.
pub fn feature_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b, 1)?;
    Ok((a.mean() - b.mean()).norm())
}

/// Maps `(3, S, S)` images to feature vectors.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn input_size(&self) -> usize;
    /// `(B, 3, S, S)` → `(B, f)`.
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

/// Global-average-pooled activations of a fixed random conv stack.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    pub net: PerceptualExtractor,
    pub size: usize,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, size: usize) -> Self {
        Self { net: PerceptualExtractor::random(3, seed), size }
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        format!("{}-{}px", self.net.id, self.size)
    }

    fn input_size(&self) -> usize {
        self.size
    }

    fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(images.clone());
        let taps = self.net.layers(&mut g, x)?;
        let last = *taps.last().ok_or_else(|| Error::Config("empty extractor".into()))?;
        let pooled = g.global_avg_pool(last)?;
        Ok(g.value(pooled).clone())
    }
}

fn fit(image: &Tensor, size: usize) -> Result<Tensor> {
    let (_, h, w) = image.dims3()?;
    if (h, w) == (size, size) {
        Ok(image.clone())
    } else {
        tensor::resize_bilinear(image, size, size)
    }
}

const FEATURE_CHUNK: usize = 16;

/// Resizes each `(3, H, W)` image to the extractor input and featurizes.
pub fn featurize(ext: &dyn FeatureExtractor, images: &[Tensor]) -> Result<FeatureSet> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(FEATURE_CHUNK) {
        let batch = chunk.iter().map(|im| fit(im, ext.input_size())).collect::<Result<Vec<_>>>()?;
        let f = ext.features(&Tensor::stack(&batch)?)?;
        let d = f.shape()[1];
        rows.extend(f.data().chunks(d).map(<[f64]>::to_vec));
    }
    FeatureSet::new(&rows, &ext.id())
}

/// Per-layer channel-normalized squared distance, averaged over layers.
pub fn perceptual_distance(net: &PerceptualExtractor, x: &Tensor, y: &Tensor) -> Result<f64> {
    x.expect_same_shape(y)?;
    let mut g = Graph::new();
    let (xv, yv) = (g.input(x.clone().unsqueeze_batch()), g.input(y.clone().unsqueeze_batch()));
    let (lx, ly) = (net.layers(&mut g, xv)?, net.layers(&mut g, yv)?);
    let mut total = 0.0;
    for (a, b) in lx.iter().zip(&ly) {
        let (ta, tb) = (g.value(*a), g.value(*b));
        let (_, c, h, w) = ta.dims4()?;
        let plane = h * w;
        let mut acc = 0.0;
        for pix in 0..plane {
            let norm = |t: &Tensor| math::sqrt((0..c).map(|ch| t.data()[ch * plane + pix]).map(|v| v * v).sum::<f64>()) + 1e-10;
            let (na, nb) = (norm(ta), norm(tb));
            acc += (0..c)
                .map(|ch| {
                    let d = ta.data()[ch * plane + pix] / na - tb.data()[ch * plane + pix] / nb;
                    d * d
                })
                .sum::<f64>();
        }
        total += acc / plane as f64;
    }
    Ok(total / lx.len() as f64)
}

/// Mean [`perceptual_distance`] over `pairs` random (x, y) pairs drawn from `seed`.
pub fn perceptual_pair_distance(net: &PerceptualExtractor, xs: &[Tensor], ys: &[Tensor], pairs: usize, seed: u64) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() || pairs == 0 {
        bail!(Validation, "perceptual distance needs non-empty sets");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..pairs {
        let (i, j) = (rng.random_range(0..xs.len()), rng.random_range(0..ys.len()));
        acc += perceptual_distance(net, &xs[i], &ys[j])?;
    }
    Ok(acc / pairs as f64)
}

/// Tight bounding box `(y0, x0, y1, x1)` (exclusive ends) of every
/// 4-connected region of `class`.
pub fn class_regions(map: &ClassMap, class: u8) -> Vec<(usize, usize, usize, usize)> {
    let (h, w) = (map.height, map.width);
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    for start in 0..h * w {
        if seen[start] || map.ids[start] != class {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            (y0, x0, y1, x1) = (y0.min(y), x0.min(x), y1.max(y + 1), x1.max(x + 1));
            let mut visit = |q: usize| {
                if !seen[q] && map.ids[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        boxes.push((y0, x0, y1, x1));
    }
    boxes
}

pub const MIN_CROP: usize = 8;

/// Image crops of every region of `class` at least `MIN_CROP` on each side.
pub fn class_crops(image: &Tensor, map: &ClassMap, class: u8, size: usize) -> Result<Vec<Tensor>> {
    let (c, h, w) = image.dims3()?;
    if (h, w) != (map.height, map.width) {
        bail!(Validation, "image {}x{} vs mask {}x{}", h, w, map.height, map.width);
    }
    let mut crops = Vec::new();
    for (y0, x0, y1, x1) in class_regions(map, class) {
        if y1 - y0 < MIN_CROP || x1 - x0 < MIN_CROP {
            continue;
        }
        let (ch, cw) = (y1 - y0, x1 - x0);
        let mut data = Vec::with_capacity(c * ch * cw);
        for k in 0..c {
            for y in y0..y1 {
                let row = (k * h + y) * w;
                data.extend_from_slice(&image.data()[row + x0..row + x1]);
            }
        }
        crops.push(tensor::resize_bilinear(&Tensor::new(&[c, ch, cw], data)?, size, size)?);
    }
    Ok(crops)
}

/// An image with its decoded class map.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmented {
    pub image: Tensor,
    pub class_map: ClassMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFid {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
    /// Classes lacking two crops on either side.
    pub skipped: Vec<usize>,
}

/// Per-class Fréchet distance over region crops, averaged over evaluable classes.
pub fn semantic_fid(real: &[Segmented], generated: &[Segmented], num_classes: usize, ext: &dyn FeatureExtractor) -> Result<SemanticFid> {
    let mut per_class = BTreeMap::new();
    let mut skipped = Vec::new();
    for k in 1..num_classes.min(256) {
        let class = k as u8;
        let collect = |set: &[Segmented]| -> Result<Vec<Tensor>> {
            let mut all = Vec::new();
            for s in set {
                all.extend(class_crops(&s.image, &s.class_map, class, ext.input_size())?);
            }
            Ok(all)
        };
        let (cr, cg) = (collect(real)?, collect(generated)?);
        if cr.len() < 2 || cg.len() < 2 {
            log::warn!("class {}: {} real / {} generated crops; not evaluable", k, cr.len(), cg.len());
            skipped.push(k);
            continue;
        }
        let fd = frechet_distance(&featurize(ext, &cr)?, &featurize(ext, &cg)?)?;
        per_class.insert(k, fd.max(0.0));
    }
    if per_class.is_empty() {
        return Err(Error::NoEvaluableClass(format!("skipped classes {skipped:?}")));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(SemanticFid { per_class, mean, skipped })
}

fn check_aligned(queries: &[ConditionVector], maps: &[ClassMap]) -> Result<()> {
    if queries.len() != maps.len() {
        bail!(Validation, "{} queries for {} maps", queries.len(), maps.len());
    }
    Ok(())
}

/// Fraction of (sample, queried class) pairs whose class appears in the map.
pub fn ppv(queries: &[ConditionVector], maps: &[ClassMap], min_fraction: f64) -> Result<f64> {
    check_aligned(queries, maps)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (q, m) in queries.iter().zip(maps) {
        let present = m.classes_present(min_fraction);
        for k in q.classes() {
            total += 1;
            hit += usize::from(present.contains(&k));
        }
    }
    if total == 0 {
        bail!(Validation, "no queried classes");
    }
    Ok(hit as f64 / total as f64)
}

/// `Σ|present ∩ queried| / Σ|present|`.
pub fn ppv_strict(queries: &[ConditionVector], maps: &[ClassMap], min_fraction: f64) -> Result<f64> {
    check_aligned(queries, maps)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (q, m) in queries.iter().zip(maps) {
        let present = m.classes_present(min_fraction);
        total += present.len();
        hit += present.iter().filter(|&&k| q.is_set(k)).count();
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Row `i`: probability that each class is present given class `i` was queried.
#[derive(Clone, Debug, PartialEq)]
pub struct CoOccurrence {
    pub matrix: Vec<Vec<f64>>,
    /// Rows with at least one query; undefined rows hold zeros.
    pub defined: Vec<bool>,
}

pub fn co_occurrence(queries: &[ConditionVector], maps: &[ClassMap], num_classes: usize, min_fraction: f64) -> Result<CoOccurrence> {
    check_aligned(queries, maps)?;
    let mut counts = vec![vec![0usize; num_classes]; num_classes];
    let mut rows = vec![0usize; num_classes];
    for (q, m) in queries.iter().zip(maps) {
        let present: BTreeSet<usize> = m.classes_present(min_fraction);
        for i in q.classes().filter(|&i| i < num_classes) {
            rows[i] += 1;
            for &j in present.iter().filter(|&&j| j < num_classes) {
                counts[i][j] += 1;
            }
        }
    }
    let matrix = counts
        .iter()
        .zip(&rows)
        .map(|(r, &n)| r.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect())
        .collect();
    Ok(CoOccurrence { matrix, defined: rows.iter().map(|&n| n > 0).collect() })
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub fid: f64,
    pub kid: f64,
    pub feat_dist: f64,
    pub perc_dist: f64,
    pub sfid_per_class: BTreeMap<String, f64>,
    pub sfid_mean: Option<f64>,
    pub ppv: Option<f64>,
    pub ppv_strict: Option<f64>,
    pub n_real: usize,
    pub n_generated: usize,
    pub extractor: String,
    pub notices: Vec<String>,
}

/// A sample to score: the image, plus its decoded mask and query when known.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub image: Tensor,
    pub class_map: Option<ClassMap>,
    pub query: Option<ConditionVector>,
}

pub const PERCEPTUAL_PAIRS: usize = 32;

/// Full report; mask-based metrics degrade to notices when masks or queries are missing.
pub fn evaluate(
    real: &[EvalItem],
    generated: &[EvalItem],
    class_names: &[String],
    ext: &RandomConvExtractor,
    min_fraction: f64,
    seed: u64,
) -> Result<(MetricsReport, Option<CoOccurrence>)> {
    if real.is_empty() || generated.is_empty() {
        bail!(Validation, "evaluation needs non-empty real and generated sets");
    }
    let images = |s: &[EvalItem]| s.iter().map(|e| e.image.clone()).collect::<Vec<_>>();
    let (ri, gi) = (images(real), images(generated));
    let (fr, fg) = (featurize(ext, &ri)?, featurize(ext, &gi)?);
    let mut notices = Vec::new();
    let fid = frechet_distance(&fr, &fg)?;
    let kid = kernel_distance(&fr, &fg)?;
    let feat_dist = feature_distance(&fr, &fg)?;
    let fit_all = |v: &[Tensor]| v.iter().map(|t| fit(t, ext.size)).collect::<Result<Vec<_>>>();
    let perc_dist = perceptual_pair_distance(&ext.net, &fit_all(&ri)?, &fit_all(&gi)?, PERCEPTUAL_PAIRS, seed)?;

    let segmented = |s: &[EvalItem]| -> Option<Vec<Segmented>> {
        s.iter().map(|e| e.class_map.clone().map(|m| Segmented { image: e.image.clone(), class_map: m })).collect()
    };
    let mut sfid_per_class = BTreeMap::new();
    let mut sfid_mean = None;
    match (segmented(real), segmented(generated)) {
        (Some(r), Some(g)) => match semantic_fid(&r, &g, class_names.len(), ext) {
            Ok(s) => {
                for (k, v) in &s.per_class {
                    sfid_per_class.insert(class_names[*k].clone(), *v);
                }
                for k in &s.skipped {
                    notices.push(format!("sfid: class {} skipped (fewer than 2 crops)", class_names[*k]));
                }
                sfid_mean = Some(s.mean);
            }
            Err(Error::NoEvaluableClass(m)) => notices.push(format!("sfid: no evaluable class ({m})")),
            Err(e) => return Err(e),
        },
        _ => notices.push("sfid skipped: masks missing".into()),
    }
    let queried: Option<Vec<(ConditionVector, ClassMap)>> =
        generated.iter().map(|e| Some((e.query.clone()?, e.class_map.clone()?))).collect();
    let (mut ppv_v, mut strict, mut co) = (None, None, None);
    match queried {
        Some(pairs) if !pairs.is_empty() => {
            let (q, m): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            match ppv(&q, &m, min_fraction) {
                Ok(v) => ppv_v = Some(v),
                Err(e) => notices.push(format!("ppv skipped: {e}")),
            }
            strict = Some(ppv_strict(&q, &m, min_fraction)?);
            co = Some(co_occurrence(&q, &m, class_names.len(), min_fraction)?);
        }
        _ => notices.push("ppv skipped: masks or queries missing".into()),
    }
    let report = MetricsReport {
        fid: fid.max(0.0),
        kid: kid.max(0.0),
        feat_dist,
        perc_dist,
        sfid_per_class,
        sfid_mean,
        ppv: ppv_v,
        ppv_strict: strict,
        n_real: real.len(),
        n_generated: generated.len(),
        extractor: ext.id(),
        notices,
    };
    Ok((report, co))
}
