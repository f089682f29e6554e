//! Diffusion training with the triplet and adversarial terms, plus the
//! serializable checkpoint contents.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{augment, Batch, ConditionVector, Dataset, PromptText, SamplePair};
use crate::encoders::SentenceBackend;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossReport, Negatives};
use crate::model::{CoSimGen, ModelConfig};
use crate::nn::Bind;
use crate::optim::{Adam, AdamState};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub lambda_perc: f64,
    pub seed: u64,
    pub steps: usize,
    /// Fraction of `steps` after which the discriminator stops updating;
    /// `None` keeps it training throughout.
    pub freeze_at: Option<f64>,
    pub augment: bool,
    pub checkpoint_every: usize,
    pub sr_noise_sigma: f64,
    pub sr_steps: usize,
    pub scales: Vec<usize>,
}

impl TrainConfig {
    pub fn full(num_classes: usize) -> Self {
        Self {
            model: ModelConfig::full(num_classes),
            learning_rate: 2e-4,
            batch_size: 24,
            beta: losses::DEFAULT_BETA,
            lambda_perc: 0.1,
            seed: 0,
            steps: 100_000,
            freeze_at: Some(0.2),
            augment: false,
            checkpoint_every: 1000,
            sr_noise_sigma: 0.02,
            sr_steps: 10_000,
            scales: alloc::vec![256, 512],
        }
    }

    pub fn desk(num_classes: usize) -> Self {
        Self {
            model: ModelConfig::desk(num_classes),
            learning_rate: 1e-3,
            batch_size: 4,
            steps: 2000,
            checkpoint_every: 500,
            sr_steps: 500,
            scales: alloc::vec![128, 256],
            ..Self::full(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let positive = [self.learning_rate, self.sr_noise_sigma];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.batch_size == 0 {
            bail!(Config, "learning rate, noise sigma and batch size must be positive");
        }
        if !(self.beta >= 0.0 && self.lambda_perc >= 0.0) {
            bail!(Config, "loss weights must be non-negative");
        }
        if let Some(f) = self.freeze_at {
            if !(0.0..=1.0).contains(&f) {
                bail!(Config, "freeze_at must lie in [0, 1], got {}", f);
            }
        }
        Ok(())
    }

    /// First step at which the discriminator no longer updates.
    pub fn freeze_step(&self) -> Option<usize> {
        self.freeze_at.map(|f| libm::ceil(f * self.steps as f64) as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
    pub l_disc: Option<f64>,
    pub lr: f64,
    /// Set when the batch could not form negatives and the triplet term was skipped.
    pub triplet_skipped: bool,
}

/// Everything needed to resume training or reproduce model outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    pub params: Vec<(String, Tensor)>,
    pub opt_gen: AdamState,
    pub opt_disc: AdamState,
    pub rng_word_pos: u128,
}

/// Noised batch and the draws that fix one generator objective.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub steps: Vec<usize>,
    pub conditions: Vec<ConditionVector>,
    pub prompts: Vec<PromptText>,
    /// `None` skips the triplet term.
    pub negatives: Option<Negatives>,
}

pub struct Objective {
    pub total: Var,
    pub l_diff: Var,
    pub l_trip: Option<Var>,
    pub l_adv: Option<Var>,
    pub x0_hat: Var,
    pub report: LossReport,
}

/// `l_diff + l_trip + β·l_adv` with the U-Net conditioned on the class embedding,
/// the text embedding as triplet anchor and the discriminator frozen.
pub fn generator_objective(g: &mut Graph, m: &CoSimGen, inp: &StepInputs, beta: f64) -> Result<Objective> {
    let p = Bind::train(&m.store);
    let xv = g.input(inp.x_t.clone());
    let ev = g.input(inp.eps.clone());
    let t_emb = m.time.forward(g, p, &inp.steps)?;
    let (_, c_emb) = m.class.forward(g, p, &inp.conditions)?;
    let z_emb = m.text.forward(g, p, &inp.prompts)?;
    let eps_hat = m.unet.forward(g, p, xv, t_emb, c_emb)?;
    let l_diff = losses::diffusion_loss(g, ev, eps_hat)?;
    let l_trip = match &inp.negatives {
        Some(neg) => {
            let n_emb = g.gather_rows(c_emb, &neg.perm)?;
            Some(losses::triplet_loss(g, z_emb, c_emb, n_emb, &neg.weights())?)
        }
        None => None,
    };
    let x0_hat = m.schedule.predict_x0_graph(g, xv, &inp.steps, eps_hat)?;
    let l_adv = if beta > 0.0 { Some(losses::adversarial_loss(g, &m.disc, &m.store, x0_hat)?) } else { None };
    let total = losses::total_loss(g, l_diff, l_trip, l_adv, beta)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let report = LossReport::new(g.value(l_diff).item(), value(l_trip), value(l_adv), beta);
    Ok(Objective { total, l_diff, l_trip, l_adv, x0_hat, report })
}

pub struct DiffusionTrainer {
    pub model: CoSimGen,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
    opt_gen: Adam,
    opt_disc: Adam,
    rng: ChaCha8Rng,
    step: usize,
    gen_ids: Vec<ParamId>,
    disc_ids: Vec<ParamId>,
}

impl DiffusionTrainer {
    pub fn new(config: TrainConfig, backend: Arc<dyn SentenceBackend>, class_names: Vec<String>) -> Result<Self> {
        config.validate()?;
        if class_names.len() != config.model.num_classes {
            bail!(Config, "{} class names for {} classes", class_names.len(), config.model.num_classes);
        }
        let model = CoSimGen::new(config.model.clone(), backend, config.seed)?;
        let gen_ids = model.generator_ids();
        let disc_ids = model.discriminator_ids();
        Ok(Self {
            opt_gen: Adam::new(config.learning_rate),
            opt_disc: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a41),
            step: 0,
            model,
            config,
            class_names,
            gen_ids,
            disc_ids,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn disc_active(&self) -> bool {
        self.config.freeze_step().is_none_or(|f| self.step < f)
    }

    fn draw_batch(&mut self, data: &Dataset) -> Result<Batch> {
        let n = data.len();
        if n == 0 {
            bail!(Validation, "empty dataset");
        }
        let b = self.config.batch_size;
        let picks: Vec<usize> = if b <= n {
            index::sample(&mut self.rng, n, b).into_vec()
        } else {
            (0..b).map(|_| self.rng.random_range(0..n)).collect()
        };
        if !self.config.augment {
            return data.batch(&picks);
        }
        let samples = picks
            .iter()
            .map(|&i| augment(&data.samples[i], self.rng.random()))
            .collect::<Result<Vec<SamplePair>>>()?;
        Dataset::new(data.palette.clone(), samples)?.batch(&(0..b).collect::<Vec<_>>())
    }

    /// One generator update and, while active, one discriminator update.
    pub fn step(&mut self, data: &Dataset) -> Result<StepRecord> {
        let batch = self.draw_batch(data)?;
        let bsz = batch.conditions.len();
        let steps: Vec<usize> = (0..bsz).map(|_| self.rng.random_range(0..self.model.schedule.num_steps())).collect();
        let eps = Tensor::randn(batch.x0.shape(), &mut self.rng);
        let x_t = self.model.schedule.q_sample_batch(&batch.x0, &steps, &eps)?;
        let negatives = losses::permute_negatives(&batch.conditions, &mut self.rng);

        let mut triplet_skipped = false;
        let negatives = match negatives {
            Ok(neg) if neg.usable() => Some(neg),
            Ok(_) => {
                log::warn!("step {}: every negative shares its anchor's condition; triplet term skipped", self.step);
                triplet_skipped = true;
                None
            }
            Err(Error::BatchTooSmall(_)) => {
                log::warn!("step {}: batch of {} cannot form negatives; triplet term skipped", self.step, bsz);
                triplet_skipped = true;
                None
            }
            Err(e) => return Err(e),
        };
        let inputs = StepInputs { x_t, eps, steps, conditions: batch.conditions, prompts: batch.prompts, negatives };
        let mut g = Graph::new();
        let obj = generator_objective(&mut g, &self.model, &inputs, self.config.beta)?;
        let (total, x0_hat, report) = (obj.total, obj.x0_hat, obj.report);
        if !report.l_total.is_finite() {
            return Err(Error::NonFinite { step: self.step, summary: alloc::format!("{report:?}") });
        }
        let grads = g.backward(total)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite { step: self.step, summary: "generator gradient".into() });
        }
        let fake = g.value(x0_hat).clone();
        drop(g);
        self.opt_gen.step(&mut self.model.store, &grads, Some(&self.gen_ids));

        let l_disc = if self.disc_active() && self.config.beta > 0.0 {
            let m = &self.model;
            let mut g = Graph::new();
            let real = g.input(batch.x0);
            let fake = g.input(fake);
            let l = losses::discriminator_loss(&mut g, &m.disc, &m.store, real, fake)?;
            let v = g.value(l).item();
            let grads = g.backward(l)?;
            if !(v.is_finite() && grads.all_finite()) {
                return Err(Error::NonFinite { step: self.step, summary: "discriminator loss".into() });
            }
            drop(g);
            self.opt_disc.step(&mut self.model.store, &grads, Some(&self.disc_ids));
            Some(v)
        } else {
            None
        };
        let record = StepRecord { step: self.step, report, l_disc, lr: self.config.learning_rate, triplet_skipped };
        self.step += 1;
        Ok(record)
    }

    /// Mean diffusion loss over fixed `(item, t, ε)` probes, without updating.
    pub fn probe_loss(&self, data: &Dataset, probes: &[(usize, usize, Tensor)]) -> Result<f64> {
        let mut acc = 0.0;
        for (i, t, eps) in probes {
            let s = &data.samples[*i];
            let x0 = s.pair()?.into_tensor();
            let x_t = self.model.schedule.q_sample(&x0, *t, eps)?.unsqueeze_batch();
            let sem = self.model.class.encode(&self.model.store, &s.condition)?;
            let eps_hat = self.model.predict_eps(&x_t, *t, sem.tensor())?;
            acc += losses::diffusion_loss_tensor(&eps.clone().unsqueeze_batch(), &eps_hat)?;
        }
        Ok(acc / probes.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            class_names: self.class_names.clone(),
            params: self.model.store.named_values(),
            opt_gen: self.opt_gen.state(&self.model.store),
            opt_disc: self.opt_disc.state(&self.model.store),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, backend: Arc<dyn SentenceBackend>) -> Result<Self> {
        if ckpt.version != FORMAT_VERSION {
            bail!(Config, "checkpoint version {} not supported (expected {})", ckpt.version, FORMAT_VERSION);
        }
        let mut t = Self::new(ckpt.config.clone(), backend, ckpt.class_names.clone())?;
        t.model.store.load_named(&ckpt.params)?;
        t.opt_gen.load_state(&t.model.store, &ckpt.opt_gen)?;
        t.opt_disc.load_state(&t.model.store, &ckpt.opt_disc)?;
        t.rng.set_word_pos(ckpt.rng_word_pos);
        t.step = ckpt.step;
        Ok(t)
    }
}

/// Runs `config.steps` updates, handing every record to `on_step`.
pub fn train_diffusion(
    trainer: &mut DiffusionTrainer,
    data: &Dataset,
    mut on_step: impl FnMut(&DiffusionTrainer, &StepRecord) -> Result<()>,
) -> Result<()> {
    while trainer.step_count() < trainer.config.steps {
        let record = trainer.step(data)?;
        on_step(trainer, &record)?;
    }
    Ok(())
}
