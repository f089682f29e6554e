//! Basic layers built on [`Graph`].

use alloc::format;

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How a forward pass binds parameters onto the tape.
#[derive(Clone, Copy)]
pub struct Bind<'a> {
    pub store: &'a ParamStore,
    /// When set, parameters enter as constants and receive no gradient.
    pub frozen: bool,
}

impl<'a> Bind<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self { store, frozen: false }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, frozen: true }
    }

    pub fn param(&self, g: &mut Graph, id: ParamId) -> Var {
        if self.frozen {
            g.frozen(self.store, id)
        } else {
            g.param(self.store, id)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(&format!("{name}.weight"), &[fout, fin], fin, rng);
        let bias = store.add_uniform(&format!("{name}.bias"), &[fout], fin, rng);
        Self { weight, bias }
    }

    pub fn out_features(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let w = p.param(g, self.weight);
        let b = p.param(g, self.bias);
        g.linear(x, w, b)
    }

    /// Plain evaluation on a `(B, in)` tensor.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, Bind::frozen(store), xv)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (c_in, c_out): (usize, usize),
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], fan_in, rng);
        let bias = store.add_uniform(&format!("{name}.bias"), &[c_out], fan_in, rng);
        Self { weight, bias, stride, pad: kernel / 2 }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let w = p.param(g, self.weight);
        let b = p.param(g, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1);
        let gamma = store.add(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let gamma = p.param(g, self.gamma);
        let beta = p.param(g, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// `affine → SiLU → affine`.
#[derive(Clone, Debug)]
pub struct ProjectionStack {
    pub first: Linear,
    pub second: Linear,
}

impl ProjectionStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), fin, fout, rng),
            second: Linear::new(store, &format!("{name}.1"), fout, fout, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.silu(h);
        self.second.forward(g, p, h)
    }
}
