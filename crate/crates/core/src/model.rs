//! The joint image+mask generator: encoders, U-Net, discriminator and schedule
//! sharing one parameter store.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ConditionVector, PromptText};
use crate::diffusion::{self, NoiseSchedule, SampleOutput};
use crate::encoders::{ClassEncoder, Semantic, SentenceBackend, TextEncoder, TimestepEncoder};
use crate::error::{bail, Result};
use crate::losses::Discriminator;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::unet::{ResolutionSpec, UNet, PAIR_CHANNELS};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub num_classes: usize,
    pub resolution: usize,
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    /// Shared embedding width `D`.
    pub d_model: usize,
    /// Class feature width `d`.
    pub d_feat: usize,
    /// Sinusoid base width.
    pub d_base: usize,
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub disc_widths: Vec<usize>,
    /// `hashed` or `pretrained:<name>`.
    pub text_backend: String,
}

impl ModelConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            num_classes,
            resolution: 128,
            base_width: 64,
            multipliers: alloc::vec![1, 2, 4, 8],
            d_model: 512,
            d_feat: 256,
            d_base: 256,
            num_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            disc_widths: alloc::vec![32, 64, 128, 256],
            text_backend: "hashed".into(),
        }
    }

    /// Small preset for CPU runs: 64×64, base width 16, `D = 64`, 50 steps
    /// with betas scaled by `1000 / T`.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            num_classes,
            resolution: 64,
            base_width: 16,
            multipliers: alloc::vec![1, 2, 4, 8],
            d_model: 64,
            d_feat: 64,
            d_base: 64,
            num_steps: 50,
            beta_start: 2e-3,
            beta_end: 0.4,
            disc_widths: alloc::vec![8, 16, 32, 64],
            text_backend: "hashed".into(),
        }
    }

    pub fn resolution_spec(&self) -> Result<ResolutionSpec> {
        ResolutionSpec::new(self.base_width, self.multipliers.clone(), (self.resolution, self.resolution))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.num_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            bail!(Config, "need at least one foreground class");
        }
        if self.d_model == 0 || self.d_feat == 0 {
            bail!(Config, "embedding widths must be positive");
        }
        self.resolution_spec()?;
        self.schedule()?;
        Ok(())
    }
}

pub const TEXT: &str = "text";
pub const CLASS: &str = "class";
pub const TIME: &str = "time";
pub const UNET: &str = "unet";
pub const DISC: &str = "disc";

#[derive(Clone, Debug)]
pub struct CoSimGen {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub class: ClassEncoder,
    pub time: TimestepEncoder,
    pub unet: UNet,
    pub disc: Discriminator,
    pub schedule: NoiseSchedule,
}

impl CoSimGen {
    pub fn new(config: ModelConfig, backend: Arc<dyn SentenceBackend>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let text = TextEncoder::new(&mut store, TEXT, backend, d, &mut rng);
        let class = ClassEncoder::new(&mut store, CLASS, (config.num_classes, config.d_feat, d), &mut rng);
        let time = TimestepEncoder::new(&mut store, TIME, (config.d_base, config.num_steps, d), &mut rng)?;
        let unet = UNet::new(&mut store, UNET, config.resolution_spec()?, d, &mut rng)?;
        let disc = Discriminator::new(&mut store, DISC, &config.disc_widths, &mut rng)?;
        let schedule = config.schedule()?;
        Ok(Self { config, store, text, class, time, unet, disc, schedule })
    }

    /// Trainable parameters of encoders and U-Net.
    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.store
            .trainable_ids()
            .into_iter()
            .filter(|&id| !self.store.name(id).starts_with(DISC))
            .collect()
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix(DISC).collect()
    }

    pub fn class_embedding(&self, condition: &ConditionVector) -> Result<Semantic> {
        Ok(Semantic::Class(self.class.encode(&self.store, condition)?))
    }

    pub fn text_embedding(&self, prompt: &PromptText) -> Result<Semantic> {
        Ok(Semantic::Text(self.text.encode(&self.store, prompt)?))
    }

    /// ε̂ for a `(B, 6, H, W)` batch at one step with a `(1, D)` semantic embedding.
    pub fn predict_eps(&self, x_t: &Tensor, t: usize, semantic: &Tensor) -> Result<Tensor> {
        let b = x_t.shape().first().copied().unwrap_or(0);
        if semantic.shape() != [1, self.config.d_model] {
            bail!(Validation, "semantic embedding {:?}, expected (1, {})", semantic.shape(), self.config.d_model);
        }
        let sem = repeat_rows(semantic, b)?;
        let t_emb = repeat_rows(self.time.encode(&self.store, t)?.tensor(), b)?;
        self.unet.apply(&self.store, x_t, &t_emb, &sem)
    }

    /// Draws `n` pairs conditioned on one embedding; class and text embeddings
    /// take the same path.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        semantic: &Semantic,
        n: usize,
        snapshot_every: usize,
        rng: &mut R,
    ) -> Result<SampleOutput> {
        let sem = semantic.tensor().clone();
        let model = |x: &Tensor, t: usize| self.predict_eps(x, t, &sem);
        let r = self.config.resolution;
        diffusion::sample(&model, &self.schedule, &[n, PAIR_CHANNELS, r, r], snapshot_every, rng)
    }
}

/// Stacks `n` copies of a `(1, D)` row into `(n, D)`.
pub fn repeat_rows(row: &Tensor, n: usize) -> Result<Tensor> {
    let d = row.numel();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(row.data());
    }
    Tensor::new(&[n, d], data)
}
