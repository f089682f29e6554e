//! Named parameter storage shared by every trainable model.

use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicUsize = AtomicUsize::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Frozen entries are never handed to an optimizer.
    pub trainable: bool,
}

/// Flat, ordered collection of named tensors. Names are module paths such as
/// `unet.enc0.conv1.weight`.
#[derive(Debug)]
pub struct ParamStore {
    id: usize,
    entries: Vec<ParamEntry>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), entries: self.entries.clone() }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    pub(crate) fn store_id(&self) -> usize {
        self.id
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name: name.to_string(), value: Arc::new(value), trainable });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / crate::math::sqrt(fan_in.max(1) as f64);
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.entries[id.0].value.clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.entries[id.0];
        if cur.value.shape() != value.shape() {
            bail!(Shape, "parameter {}: {:?} vs {:?}", cur.name, cur.value.shape(), value.shape());
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries.iter().enumerate().filter(move |(_, e)| e.name.starts_with(prefix)).map(|(i, _)| ParamId(i))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.is_trainable(id)).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// FNV-1a over names and value bits of every entry under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in self.entries.iter().filter(|e| e.name.starts_with(prefix)) {
            feed(e.name.as_bytes());
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Copies values from `(name, tensor)` pairs; every stored name must be present.
    pub fn load_named(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id);
            let Some((_, t)) = values.iter().find(|(n, _)| n == name) else {
                bail!(Validation, "missing parameter {}", name);
            };
            self.set(id, t.clone())?;
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries.iter().map(|e| (e.name.clone(), (*e.value).clone())).collect()
    }
}
