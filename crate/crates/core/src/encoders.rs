//! Text, class and timestep encoders producing `(B, D)` embeddings.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;

use crate::dataset::{ConditionVector, PromptText};
use crate::error::{bail, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{Bind, ProjectionStack};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Frozen sentence embedding backend. Backends own no trainable parameters.
pub trait SentenceBackend: Send + Sync + core::fmt::Debug {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

pub const HASHED_DIM: usize = 384;

/// Lower-cased alphanumeric tokens hashed (FNV-1a) into count buckets.
#[derive(Clone, Debug)]
pub struct HashedBagOfWords {
    pub dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dim: HASHED_DIM }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl HashedBagOfWords {
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.dim as u64) as usize
    }
}

impl SentenceBackend for HashedBagOfWords {
    fn id(&self) -> String {
        format!("hashed-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = alloc::vec![0.0; self.dim];
        for t in tokenize(text) {
            v[self.bucket(&t)] += 1.0;
        }
        Ok(v)
    }
}

/// Embeddings precomputed by an external sentence model, looked up by prompt.
#[derive(Clone, Debug)]
pub struct TableBackend {
    pub name: String,
    pub dim: usize,
    pub table: BTreeMap<String, Vec<f64>>,
}

impl TableBackend {
    pub fn new(name: &str, table: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let Some(dim) = table.values().next().map(Vec::len) else {
            bail!(Config, "embedding table {} is empty", name);
        };
        if table.values().any(|v| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            bail!(Config, "embedding table {} has ragged or non-finite rows", name);
        }
        Ok(Self { name: name.into(), dim, table })
    }
}

impl SentenceBackend for TableBackend {
    fn id(&self) -> String {
        format!("pretrained:{}", self.name)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Config(format!("no cached embedding for {text:?} in {}", self.name)))
    }
}

/// Frozen backend followed by a trainable projection to `D`.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub backend: Arc<dyn SentenceBackend>,
    pub proj: ProjectionStack,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        backend: Arc<dyn SentenceBackend>,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let proj = ProjectionStack::new(store, &format!("{name}.proj"), backend.dim(), d_model, rng);
        Self { backend, proj }
    }

    /// `(B, backend dim)` matrix of raw backend vectors.
    pub fn backend_features(&self, prompts: &[PromptText]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(prompts.len() * self.backend.dim());
        for p in prompts {
            let v = self.backend.embed(p.as_str())?;
            if v.len() != self.backend.dim() {
                bail!(Config, "backend returned {} dims, expected {}", v.len(), self.backend.dim());
            }
            data.extend(v);
        }
        Tensor::new(&[prompts.len(), self.backend.dim()], data)
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, prompts: &[PromptText]) -> Result<Var> {
        let x = g.input(self.backend_features(prompts)?);
        self.proj.forward(g, p, x)
    }

    pub fn encode(&self, store: &ParamStore, prompt: &PromptText) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, Bind::frozen(store), core::slice::from_ref(prompt))?;
        Ok(TextEmbedding(g.value(v).clone()))
    }
}

/// `C_feat = M · W_c`, then a trainable projection to `D`.
#[derive(Clone, Debug)]
pub struct ClassEncoder {
    pub w_c: ParamId,
    pub proj: ProjectionStack,
}

pub fn condition_matrix(conditions: &[ConditionVector]) -> Result<Tensor> {
    let c = conditions.first().map_or(0, ConditionVector::num_classes);
    if conditions.iter().any(|m| m.num_classes() != c) {
        bail!(Validation, "condition vectors differ in length");
    }
    Tensor::new(&[conditions.len(), c], conditions.iter().flat_map(ConditionVector::as_f64).collect())
}

impl ClassEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (num_classes, d_feat, d_model): (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let w_c = store.add(&format!("{name}.w_c"), Tensor::randn(&[num_classes, d_feat], rng).scale(0.5));
        let proj = ProjectionStack::new(store, &format!("{name}.proj"), d_feat, d_model, rng);
        Self { w_c, proj }
    }

    pub fn num_classes(&self, store: &ParamStore) -> usize {
        store.get(self.w_c).shape()[0]
    }

    fn bits(&self, store: &ParamStore, conditions: &[ConditionVector]) -> Result<Tensor> {
        let m = condition_matrix(conditions)?;
        if m.shape()[1] != self.num_classes(store) {
            bail!(Validation, "condition has {} bits, encoder expects {}", m.shape()[1], self.num_classes(store));
        }
        Ok(m)
    }

    /// Returns `(C_feat, C_emb)`.
    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, conditions: &[ConditionVector]) -> Result<(Var, Var)> {
        let m = g.input(self.bits(p.store, conditions)?);
        let w = p.param(g, self.w_c);
        let feat = g.matmul(m, w)?;
        let emb = self.proj.forward(g, p, feat)?;
        Ok((feat, emb))
    }

    pub fn features(&self, store: &ParamStore, condition: &ConditionVector) -> Result<Tensor> {
        let mut g = Graph::new();
        let (feat, _) = self.forward(&mut g, Bind::frozen(store), core::slice::from_ref(condition))?;
        Ok(g.value(feat).clone())
    }

    pub fn encode(&self, store: &ParamStore, condition: &ConditionVector) -> Result<ClassEmbedding> {
        let mut g = Graph::new();
        let (_, emb) = self.forward(&mut g, Bind::frozen(store), core::slice::from_ref(condition))?;
        Ok(ClassEmbedding(g.value(emb).clone()))
    }
}

/// Sinusoidal features of `t` followed by a trainable projection to `D`.
#[derive(Clone, Debug)]
pub struct TimestepEncoder {
    pub d_base: usize,
    pub num_steps: usize,
    pub proj: ProjectionStack,
}

/// `[sin(t·ω_0) … sin(t·ω_{n-1}), cos(t·ω_0) … cos(t·ω_{n-1})]`, `ω_j = 10000^(−2j/d_base)`.
pub fn sinusoid(t: usize, d_base: usize) -> Vec<f64> {
    let half = d_base / 2;
    let omega = |j: usize| math::powf(10000.0, -2.0 * j as f64 / d_base as f64);
    let tf = t as f64;
    let mut v: Vec<f64> = (0..half).map(|j| math::sin(tf * omega(j))).collect();
    v.extend((0..half).map(|j| math::cos(tf * omega(j))));
    v
}

impl TimestepEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (d_base, num_steps, d_model): (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        if d_base == 0 || d_base % 2 != 0 {
            bail!(Config, "sinusoid base width must be even and positive, got {}", d_base);
        }
        let proj = ProjectionStack::new(store, &format!("{name}.proj"), d_base, d_model, rng);
        Ok(Self { d_base, num_steps, proj })
    }

    pub fn features(&self, steps: &[usize]) -> Result<Tensor> {
        if let Some(&t) = steps.iter().find(|&&t| t >= self.num_steps) {
            bail!(Validation, "timestep {} outside [0, {})", t, self.num_steps);
        }
        Tensor::new(&[steps.len(), self.d_base], steps.iter().flat_map(|&t| sinusoid(t, self.d_base)).collect())
    }

    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, steps: &[usize]) -> Result<Var> {
        let x = g.input(self.features(steps)?);
        self.proj.forward(g, p, x)
    }

    pub fn encode(&self, store: &ParamStore, t: usize) -> Result<TimestepEmbedding> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, Bind::frozen(store), &[t])?;
        Ok(TimestepEmbedding(g.value(v).clone()))
    }
}

macro_rules! embedding {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name(pub Tensor);

        impl $name {
            pub fn vec(&self) -> &[f64] {
                self.0.data()
            }

            pub fn tensor(&self) -> &Tensor {
                &self.0
            }

            pub fn width(&self) -> usize {
                self.0.shape().last().copied().unwrap_or(0)
            }
        }
    };
}

embedding!(TextEmbedding);
embedding!(ClassEmbedding);
embedding!(TimestepEmbedding);

/// The semantic condition fed to the U-Net: either path yields a `(1, D)` vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Semantic {
    Class(ClassEmbedding),
    Text(TextEmbedding),
}

impl Semantic {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Self::Class(c) => c.tensor(),
            Self::Text(t) => t.tensor(),
        }
    }
}
