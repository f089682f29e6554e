//! Noise schedule, forward corruption and the ancestral sampler.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            bail!(Validation, "schedule needs T ≥ 1 and 0 < {} ≤ {} < 1", beta_start, beta_end);
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.num_steps() {
            bail!(Validation, "timestep {} outside [0, {})", t, self.num_steps());
        }
        Ok(())
    }

    /// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε` for one sample.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        x0.zip_map(eps, |x, e| a * x + b * e)
    }

    /// [`NoiseSchedule::q_sample`] over a leading batch axis with one step per item.
    pub fn q_sample_batch(&self, x0: &Tensor, steps: &[usize], eps: &Tensor) -> Result<Tensor> {
        let items = split_batch(x0, steps.len())?;
        let noise = split_batch(eps, steps.len())?;
        let out = items
            .iter()
            .zip(&noise)
            .zip(steps)
            .map(|((x, e), &t)| self.q_sample(x, t, e))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&out)
    }

    /// `(x_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t` without clamping.
    pub fn predict_x0_unclamped(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let ab = self.alpha_bars[t];
        let (a, b) = (math::sqrt(ab), math::sqrt(1.0 - ab));
        x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
    }

    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        Ok(self.predict_x0_unclamped(x_t, t, eps_hat)?.clamp(-1.0, 1.0))
    }

    /// Differentiable, clamped x̂0 for a `(B, …)` batch with per-item steps.
    pub fn predict_x0_graph(&self, g: &mut Graph, x_t: Var, steps: &[usize], eps_hat: Var) -> Result<Var> {
        let shape = g.shape(x_t).to_vec();
        if shape.len() != 4 || shape[0] != steps.len() {
            bail!(Shape, "x_t {:?} with {} steps", shape, steps.len());
        }
        for &t in steps {
            self.check(t)?;
        }
        let col = |f: &dyn Fn(f64) -> f64| {
            Tensor::new(&[steps.len(), 1, 1, 1], steps.iter().map(|&t| f(self.alpha_bars[t])).collect())
        };
        let inv_a = g.input(col(&|ab| 1.0 / math::sqrt(ab))?);
        let ratio = g.input(col(&|ab| math::sqrt(1.0 - ab) / math::sqrt(ab))?);
        let x = g.mul_bcast(x_t, inv_a)?;
        let e = g.mul_bcast(eps_hat, ratio)?;
        let x0 = g.sub(x, e)?;
        Ok(g.clamp(x0, -1.0, 1.0))
    }
}

fn split_batch(t: &Tensor, n: usize) -> Result<Vec<Tensor>> {
    if t.shape().first() != Some(&n) {
        bail!(Shape, "expected batch of {}, got {:?}", n, t.shape());
    }
    (0..n).map(|i| t.batch_item(i)?.squeeze_batch()).collect()
}

/// Any ε-predictor already bound to its conditioning embedding.
pub trait NoiseModel {
    /// ε̂ for `x_t` of shape `(B, 6, H, W)` at step `t`.
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, usize) -> Result<Tensor>> NoiseModel for F {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub x0_hat: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// `(B, 6, H, W)` clamped result.
    pub x0: Tensor,
    pub snapshots: Vec<Snapshot>,
}

/// Ancestral reverse loop from `x_T ~ N(0, I)` with `σ_t² = β_t`.
/// A snapshot of x̂0 is kept on every `snapshot_every`-th reverse step
/// (none when zero).
pub fn sample<R: Rng + ?Sized>(
    model: &dyn NoiseModel,
    schedule: &NoiseSchedule,
    shape: &[usize],
    snapshot_every: usize,
    rng: &mut R,
) -> Result<SampleOutput> {
    let mut x = Tensor::randn(shape, rng);
    let steps = schedule.num_steps();
    let mut snapshots = Vec::new();
    for (i, t) in (0..steps).rev().enumerate() {
        let eps = model.predict_eps(&x, t)?;
        if eps.shape() != x.shape() {
            bail!(Shape, "model returned {:?} for input {:?}", eps.shape(), x.shape());
        }
        if !eps.all_finite() {
            return Err(Error::NonFinite { step: t, summary: eps.summary() });
        }
        if snapshot_every > 0 && i % snapshot_every == 0 {
            snapshots.push(Snapshot { step: t, x0_hat: schedule.predict_x0(&x, t, &eps)? });
        }
        let (beta, alpha, ab) = (schedule.betas[t], schedule.alphas[t], schedule.alpha_bars[t]);
        let coef = beta / math::sqrt(1.0 - ab);
        let inv = 1.0 / math::sqrt(alpha);
        let mut next = x.zip_map(&eps, |xv, ev| inv * (xv - coef * ev))?;
        if t > 0 {
            let sigma = math::sqrt(beta);
            let z = Tensor::randn(shape, rng);
            for (v, zv) in next.data_mut().iter_mut().zip(z.data()) {
                *v += sigma * zv;
            }
        }
        if !next.all_finite() {
            return Err(Error::NonFinite { step: t, summary: next.summary() });
        }
        x = next;
    }
    Ok(SampleOutput { x0: x.clamp(-1.0, 1.0), snapshots })
}

/// Number of snapshots [`sample`] emits.
pub fn snapshot_count(steps: usize, every: usize) -> usize {
    if every == 0 {
        0
    } else {
        steps.div_ceil(every)
    }
}

/// Deterministic probe draws `(t, ε)` for measuring the diffusion loss at fixed noise.
pub fn probe_draws<R: Rng + ?Sized>(schedule: &NoiseSchedule, shape: &[usize], count: usize, rng: &mut R) -> Vec<(usize, Tensor)> {
    let mut out = vec![];
    for i in 0..count {
        let t = (i * schedule.num_steps()) / count.max(1);
        out.push((t, Tensor::randn(shape, rng)));
    }
    out
}
