//! ×2 sub-pixel super-resolution of image+mask pairs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Conv2d};
use crate::optim::{Adam, AdamState};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};
use crate::unet::PAIR_CHANNELS;

pub const UPSCALE: usize = 2;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SrConfig {
    /// Widths of the two feature convolutions.
    pub widths: [usize; 2],
    pub learning_rate: f64,
    pub lambda_perc: f64,
    pub noise_sigma: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self { widths: [64, 64], learning_rate: 1e-3, lambda_perc: 0.1, noise_sigma: 0.02, batch_size: 4, seed: 0 }
    }
}

/// `conv5 → act → conv3 → act → conv3 (6·r² channels) → pixel shuffle`.
#[derive(Clone, Debug)]
pub struct SrModel {
    pub convs: [Conv2d; 3],
}

impl SrModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: [usize; 2], rng: &mut R) -> Self {
        let out = PAIR_CHANNELS * UPSCALE * UPSCALE;
        Self {
            convs: [
                Conv2d::new(store, &format!("{name}.conv0"), (PAIR_CHANNELS, widths[0]), 5, 1, rng),
                Conv2d::new(store, &format!("{name}.conv1"), (widths[0], widths[1]), 3, 1, rng),
                Conv2d::new(store, &format!("{name}.conv2"), (widths[1], out), 3, 1, rng),
            ],
        }
    }

    /// Final conv output before rearrangement, `(B, 24, h, w)`.
    pub fn features(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != PAIR_CHANNELS || s[2] == 0 || s[3] == 0 {
            bail!(Validation, "super-resolution input {:?}, expected (B, 6, h, w)", s);
        }
        let h = self.convs[0].forward(g, p, x)?;
        let h = g.silu(h);
        let h = self.convs[1].forward(g, p, h)?;
        let h = g.silu(h);
        self.convs[2].forward(g, p, h)
    }

    /// Unclamped `(B, 6, 2h, 2w)` output used for training.
    pub fn forward_raw(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let f = self.features(g, p, x)?;
        g.pixel_shuffle(f, UPSCALE)
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let y = self.forward_raw(g, p, x)?;
        Ok(g.clamp(y, -1.0, 1.0))
    }

    /// Clamped ×2 output for a `(6, h, w)` or `(B, 6, h, w)` pair.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let unbatched = x.rank() == 3;
        let xb = if unbatched { x.clone().unsqueeze_batch() } else { x.clone() };
        let mut g = Graph::new();
        let xv = g.input(xb);
        let y = self.forward(&mut g, Bind::frozen(store), xv)?;
        let out = g.value(y).clone();
        if unbatched {
            out.squeeze_batch()
        } else {
            Ok(out)
        }
    }

    /// Applies the model `times` times, returning every intermediate scale.
    pub fn cascade(&self, store: &ParamStore, x: &Tensor, times: usize) -> Result<Vec<Tensor>> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(times);
        for _ in 0..times {
            let next = self.apply(store, outs.last().unwrap_or(x))?;
            outs.push(next);
        }
        Ok(outs)
    }
}

/// Fixed, non-trainable convolution stack used as a feature space.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    pub store: ParamStore,
    pub convs: Vec<Conv2d>,
    /// Average-pool ×2 after these conv indices.
    pub pool_after: Vec<usize>,
    pub id: String,
}

pub const PERCEPTUAL_TAP: usize = 6;

impl PerceptualExtractor {
    /// Six 3×3 conv layers (16, 16, 32, 32, 64, 64) with ReLU, drawn from `seed`.
    pub fn random(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [16, 16, 32, 32, 64, 64];
        let mut convs = Vec::new();
        let mut c = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("conv{i}"), (c, w), 3, 1, &mut rng);
            // He-style scaling keeps activations from vanishing through the stack
            for id in [conv.weight, conv.bias] {
                let scaled = store.get(id).scale(libm::sqrt(3.0) * libm::sqrt(2.0));
                store.set(id, scaled).expect("same shape");
            }
            convs.push(conv);
            c = w;
        }
        let ids: Vec<_> = store.ids().collect();
        let mut frozen = ParamStore::new();
        for id in ids {
            frozen.add_frozen(store.name(id), store.get(id).clone());
        }
        Self { store: frozen, convs, pool_after: alloc::vec![1, 3], id: format!("random-conv6-c{in_channels}-s{seed}") }
    }

    /// Post-activation outputs of every conv layer.
    pub fn layers(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let p = Bind::frozen(&self.store);
        let mut h = x;
        let mut taps = Vec::with_capacity(self.convs.len());
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(g, p, h)?;
            h = g.relu(h);
            taps.push(h);
            if self.pool_after.contains(&i) && g.shape(h)[2] % 2 == 0 && g.shape(h)[3] % 2 == 0 {
                h = g.avg_pool2(h)?;
            }
        }
        Ok(taps)
    }

    /// Output of the sixth conv layer.
    pub fn features(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let taps = self.layers(g, x)?;
        taps.get(PERCEPTUAL_TAP - 1).copied().ok_or_else(|| Error::Config("extractor has fewer than six layers".into()))
    }

    pub fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let f = self.features(&mut g, xv)?;
        Ok(g.value(f).clone())
    }
}

/// Mean squared distance between tap-six features of `x` and `y`.
pub fn perceptual_loss(g: &mut Graph, ext: &PerceptualExtractor, x: Var, y: Var) -> Result<Var> {
    let fx = ext.features(g, x)?;
    let fy = ext.features(g, y)?;
    g.mse(fx, fy)
}

pub fn perceptual_loss_tensor(ext: &PerceptualExtractor, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
    let l = perceptual_loss(&mut g, ext, xv, yv)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SrReport {
    pub l_mse: f64,
    pub l_perc: f64,
    pub l_total: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrCheckpoint {
    pub version: u32,
    pub step: usize,
    pub config: SrConfig,
    pub params: Vec<(String, Tensor)>,
    pub opt: AdamState,
    pub rng_word_pos: u128,
}

pub struct SrTrainer {
    pub model: SrModel,
    pub store: ParamStore,
    pub config: SrConfig,
    pub extractor: PerceptualExtractor,
    opt: Adam,
    rng: ChaCha8Rng,
    step: usize,
}

/// Halves both spatial dims by 2×2 averaging; `(C, H, W)` or `(B, C, H, W)`.
pub fn downscale(hr: &Tensor) -> Result<Tensor> {
    if hr.rank() == 3 {
        tensor::avg_pool(&hr.clone().unsqueeze_batch(), UPSCALE)?.squeeze_batch()
    } else {
        tensor::avg_pool(hr, UPSCALE)
    }
}

impl SrTrainer {
    pub fn new(config: SrConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.noise_sigma >= 0.0 && config.lambda_perc >= 0.0) || config.batch_size == 0 {
            bail!(Config, "invalid super-resolution settings {:?}", config);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = SrModel::new(&mut store, "sr", config.widths, &mut rng);
        let extractor = PerceptualExtractor::random(PAIR_CHANNELS, config.seed ^ 0x7e7);
        Ok(Self { model, store, extractor, opt: Adam::new(config.learning_rate), rng, step: 0, config })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Loss of a prediction against ground truth, `mse + λ·perc`.
    pub fn loss(&self, g: &mut Graph, pred: Var, target: Var) -> Result<(Var, SrReport)> {
        let mse = g.mse(pred, target)?;
        let perc = perceptual_loss(g, &self.extractor, pred, target)?;
        let weighted = g.scale(perc, self.config.lambda_perc);
        let total = g.add(mse, weighted)?;
        let (l_mse, l_perc) = (g.value(mse).item(), g.value(perc).item());
        let report = SrReport { l_mse, l_perc, l_total: l_mse + self.config.lambda_perc * l_perc, lambda: self.config.lambda_perc };
        Ok((total, report))
    }

    /// Noisy LR input, prediction, update.
    pub fn train_step(&mut self, lr_gt: &Tensor, hr_gt: &Tensor) -> Result<SrReport> {
        let (b, c, h, w) = lr_gt.dims4()?;
        if hr_gt.shape() != [b, c, UPSCALE * h, UPSCALE * w] {
            bail!(Validation, "LR {:?} and HR {:?} are not a ×2 pair", lr_gt.shape(), hr_gt.shape());
        }
        let noise = Tensor::randn(lr_gt.shape(), &mut self.rng).scale(self.config.noise_sigma);
        let noisy = lr_gt.add(&noise)?;
        let mut g = Graph::new();
        let x = g.input(noisy);
        let y = g.input(hr_gt.clone());
        let pred = self.model.forward_raw(&mut g, Bind::train(&self.store), x)?;
        let (total, report) = self.loss(&mut g, pred, y)?;
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite { step: self.step, summary: format!("{report:?}") });
        }
        let grads = g.backward(total)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite { step: self.step, summary: "super-resolution gradient".into() });
        }
        drop(g);
        self.opt.step(&mut self.store, &grads, None);
        self.step += 1;
        Ok(report)
    }

    /// One step on a random batch drawn from `hr` pairs of a single scale.
    pub fn step_on(&mut self, hr: &[Tensor]) -> Result<SrReport> {
        if hr.is_empty() {
            bail!(Validation, "no high-resolution pairs");
        }
        let picks: Vec<Tensor> = (0..self.config.batch_size).map(|_| hr[self.rng.random_range(0..hr.len())].clone()).collect();
        let hr_b = Tensor::stack(&picks)?;
        let lr_b = Tensor::stack(&picks.iter().map(downscale).collect::<Result<Vec<_>>>()?)?;
        self.train_step(&lr_b, &hr_b)
    }

    pub fn checkpoint(&self) -> SrCheckpoint {
        SrCheckpoint {
            version: crate::trainer::FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            params: self.store.named_values(),
            opt: self.opt.state(&self.store),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_checkpoint(ckpt: &SrCheckpoint) -> Result<Self> {
        if ckpt.version != crate::trainer::FORMAT_VERSION {
            bail!(Config, "super-resolution checkpoint version {} not supported", ckpt.version);
        }
        let mut t = Self::new(ckpt.config.clone())?;
        t.store.load_named(&ckpt.params)?;
        t.opt.load_state(&t.store, &ckpt.opt)?;
        t.rng.set_word_pos(ckpt.rng_word_pos);
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Trains on every scale in turn with shared weights: `scales[k]` lists HR pairs
/// at one resolution (e.g. 256 then 512).
pub fn train_sr(
    trainer: &mut SrTrainer,
    scales: &[Vec<Tensor>],
    steps: usize,
    mut on_step: impl FnMut(&SrTrainer, &SrReport) -> Result<()>,
) -> Result<()> {
    if scales.is_empty() {
        bail!(Validation, "no training scales");
    }
    for k in 0..steps {
        let r = trainer.step_on(&scales[k % scales.len()])?;
        on_step(trainer, &r)?;
    }
    Ok(())
}
