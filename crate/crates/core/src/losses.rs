//! Diffusion, triplet and adversarial objectives plus the discriminator.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::ConditionVector;
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Conv2d, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::unet::PAIR_CHANNELS;

pub const DEFAULT_BETA: f64 = 0.1;
pub const TRIPLET_MARGIN: f64 = 1.0;
pub const NEGATIVE_RETRIES: usize = 32;

/// Mean squared error between true and predicted noise.
pub fn diffusion_loss(g: &mut Graph, eps_true: Var, eps_pred: Var) -> Result<Var> {
    g.mse(eps_pred, eps_true)
}

pub fn diffusion_loss_tensor(eps_true: &Tensor, eps_pred: &Tensor) -> Result<f64> {
    Ok(eps_true.zip_map(eps_pred, |a, b| (a - b) * (a - b))?.mean())
}

/// Negative assignment for a batch: `perm[i]` is the partner of item `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Negatives {
    pub perm: Vec<usize>,
    /// Items whose partner still shares their condition after all retries.
    pub flagged: Vec<bool>,
}

impl Negatives {
    /// Per-item weights for the triplet mean: flagged items contribute nothing.
    pub fn weights(&self) -> Vec<f64> {
        self.flagged.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect()
    }

    pub fn usable(&self) -> bool {
        self.flagged.iter().any(|f| !f)
    }
}

fn random_derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// Draws a derangement of batch indices, re-drawing while any item is paired
/// with an identical condition; leftover collisions are flagged.
pub fn permute_negatives<R: Rng + ?Sized>(conditions: &[ConditionVector], rng: &mut R) -> Result<Negatives> {
    let n = conditions.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let collisions = |p: &[usize]| p.iter().enumerate().filter(|&(i, &j)| conditions[i] == conditions[j]).count();
    let mut best = random_derangement(n, rng);
    let mut best_count = collisions(&best);
    for _ in 0..NEGATIVE_RETRIES {
        if best_count == 0 {
            break;
        }
        let p = random_derangement(n, rng);
        let c = collisions(&p);
        if c < best_count {
            best = p;
            best_count = c;
        }
    }
    let flagged = best.iter().enumerate().map(|(i, &j)| conditions[i] == conditions[j]).collect();
    Ok(Negatives { perm: best, flagged })
}

/// `max(0, ‖a−p‖² − ‖a−n‖² + 1)` per row, averaged with `weights`.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, weights: &[f64]) -> Result<Var> {
    let dp = g.sub(anchor, positive)?;
    let dp = g.square(dp);
    let dp = g.sum_last(dp)?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.square(dn);
    let dn = g.sum_last(dn)?;
    let diff = g.sub(dp, dn)?;
    let margin = g.add_scalar(diff, TRIPLET_MARGIN);
    let hinge = g.relu(margin);
    g.weighted_mean(hinge, weights)
}

/// Plain evaluation of [`triplet_loss`] on `(B, D)` tensors with uniform weights.
pub fn triplet_loss_tensor(anchor: &Tensor, positive: &Tensor, negative: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (a, p, n) = (g.input(anchor.clone()), g.input(positive.clone()), g.input(negative.clone()));
    let rows = anchor.shape().first().copied().unwrap_or(1);
    let l = triplet_loss(&mut g, a, p, n, &alloc::vec![1.0; rows])?;
    Ok(g.value(l).item())
}

/// Strided conv stack, global average, affine head; outputs logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub head: Linear,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.is_empty() {
            bail!(Config, "discriminator needs at least one conv layer");
        }
        let mut convs = Vec::new();
        let mut c_in = PAIR_CHANNELS;
        for (i, &w) in widths.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), (c_in, w), 3, 2, rng));
            c_in = w;
        }
        let head = Linear::new(store, &format!("{name}.head"), c_in, 1, rng);
        Ok(Self { convs, head })
    }

    /// `(B,)` logits.
    pub fn logits(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, p, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h)?;
        let z = self.head.forward(g, p, pooled)?;
        let b = g.shape(z)[0];
        g.reshape(z, &[b])
    }

    /// Probability of "real" in (0, 1) per item.
    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let z = self.logits(g, p, x)?;
        Ok(g.sigmoid(z))
    }

    pub fn score(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, Bind::frozen(store), xv)?;
        Ok(g.value(y).clone())
    }
}

/// `mean(1 − D(x̂0))`; the discriminator enters the tape frozen.
pub fn adversarial_loss(g: &mut Graph, disc: &Discriminator, store: &ParamStore, x0_hat: Var) -> Result<Var> {
    let d = disc.forward(g, Bind::frozen(store), x0_hat)?;
    let neg = g.scale(d, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    Ok(g.mean_all(one_minus))
}

/// `mean(−log D(real) − log(1 − D(fake)))`, with `fake` detached.
pub fn discriminator_loss(g: &mut Graph, disc: &Discriminator, store: &ParamStore, real: Var, fake: Var) -> Result<Var> {
    let fake = g.detach(fake);
    let p = Bind::train(store);
    let zr = disc.logits(g, p, real)?;
    let zf = disc.logits(g, p, fake)?;
    // −log σ(z) = softplus(−z), −log(1 − σ(z)) = softplus(z)
    let neg_zr = g.scale(zr, -1.0);
    let lr = g.softplus(neg_zr);
    let lf = g.softplus(zf);
    let sum = g.add(lr, lf)?;
    Ok(g.mean_all(sum))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossReport {
    pub l_diff: f64,
    pub l_trip: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(l_diff: f64, l_trip: f64, l_adv: f64, beta: f64) -> Self {
        Self { l_diff, l_trip, l_adv, l_total: total(l_diff, l_trip, l_adv, beta), beta }
    }
}

pub fn total(l_diff: f64, l_trip: f64, l_adv: f64, beta: f64) -> f64 {
    l_diff + l_trip + beta * l_adv
}

/// Graph form of [`total`]; any term may be absent.
pub fn total_loss(g: &mut Graph, l_diff: Var, l_trip: Option<Var>, l_adv: Option<Var>, beta: f64) -> Result<Var> {
    let mut acc = l_diff;
    if let Some(t) = l_trip {
        acc = g.add(acc, t)?;
    }
    if let Some(a) = l_adv {
        let s = g.scale(a, beta);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[[f64; 2]]) -> Tensor {
        Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn diffusion_loss_cases() {
        let z = Tensor::zeros(&[2, 3]);
        assert_eq!(diffusion_loss_tensor(&z, &z).unwrap(), 0.0);
        assert_eq!(diffusion_loss_tensor(&z, &Tensor::full(&[2, 3], 1.0)).unwrap(), 1.0);
    }

    #[test]
    fn triplet_hand_cases() {
        let a = t2(&[[0.0, 0.0]]);
        assert_eq!(triplet_loss_tensor(&a, &t2(&[[1.0, 0.0]]), &t2(&[[0.0, 2.0]])).unwrap(), 0.0);
        let p = t2(&[[0.3, -0.2]]);
        assert_eq!(triplet_loss_tensor(&a, &p, &p).unwrap(), 1.0);
        // ‖a−p‖² = 0, ‖a−n‖² = 2
        assert_eq!(triplet_loss_tensor(&a, &a, &t2(&[[1.0, 1.0]])).unwrap(), 0.0);
    }

    #[test]
    fn report_identity() {
        let r = LossReport::new(1.0, 0.5, 0.2, DEFAULT_BETA);
        assert_eq!(r.l_total, 1.52);
        assert_eq!(LossReport::new(0.0, 0.0, 0.0, 0.1).l_total, 0.0);
        assert_eq!(LossReport::new(0.7, 0.25, 0.9, 0.0).l_total, 0.7 + 0.25);
    }

    #[test]
    fn negatives_are_derangements() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conds: Vec<ConditionVector> = (0..8).map(|k| ConditionVector::from_classes(9, [k + 1]).unwrap()).collect();
        for _ in 0..1000 {
            let n = permute_negatives(&conds, &mut rng).unwrap();
            assert!(n.perm.iter().enumerate().all(|(i, &j)| i != j));
            let mut sorted = n.perm.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..8).collect::<Vec<_>>());
            assert!(n.flagged.iter().all(|f| !f));
        }
        let two = &conds[..2];
        assert_eq!(permute_negatives(two, &mut rng).unwrap().perm, [1, 0]);
        assert_eq!(permute_negatives(&conds[..1], &mut rng), Err(Error::BatchTooSmall(1)));
        let same = alloc::vec![conds[0].clone(); 3];
        let n = permute_negatives(&same, &mut rng).unwrap();
        assert!(n.flagged.iter().all(|&f| f) && !n.usable());
    }

    #[test]
    fn discriminator_range_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let d = Discriminator::new(&mut store, "disc", &[4, 8], &mut rng).unwrap();
        let x = Tensor::randn(&[3, 6, 8, 8], &mut rng);
        let s = d.score(&store, &x).unwrap();
        assert_eq!(s.shape(), &[3]);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let mut g = Graph::new();
        let xv = g.input(x);
        let l = adversarial_loss(&mut g, &d, &store, xv).unwrap();
        let v = g.value(l).item();
        assert!(v > 0.0 && v < 1.0);
        // zero head → D = 0.5 everywhere → BCE = 2 ln 2
        let z = Tensor::zeros(store.get(d.head.weight).shape());
        store.set(d.head.weight, z).unwrap();
        store.set(d.head.bias, Tensor::zeros(&[1])).unwrap();
        let mut g = Graph::new();
        let r = g.input(Tensor::randn(&[2, 6, 8, 8], &mut rng));
        let f = g.input(Tensor::randn(&[2, 6, 8, 8], &mut rng));
        let l = discriminator_loss(&mut g, &d, &store, r, f).unwrap();
        assert!((g.value(l).item() - 2.0 * core::f64::consts::LN_2).abs() < 1e-15);
    }
}
