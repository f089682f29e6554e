//! Residual U-Net noise predictor with spatial (class/text) and spectral
//! (timestep) condition fusion at the input of every residual block.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bind, Conv2d, GroupNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const PAIR_CHANNELS: usize = 6;
const MAX_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ResolutionSpec {
    pub base_width: usize,
    pub multipliers: Vec<usize>,
    pub input_hw: (usize, usize),
}

impl ResolutionSpec {
    pub fn new(base_width: usize, multipliers: Vec<usize>, input_hw: (usize, usize)) -> Result<Self> {
        let spec = Self { base_width, multipliers, input_hw };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.multipliers.is_empty() || self.multipliers.contains(&0) {
            bail!(Config, "base width and multipliers must be positive");
        }
        if self.multipliers.windows(2).any(|w| w[1] < w[0]) {
            bail!(Config, "multipliers must be non-decreasing: {:?}", self.multipliers);
        }
        let div = 1 << (self.multipliers.len() - 1);
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            bail!(Config, "input {}x{} not divisible by {}", h, w, div);
        }
        Ok(())
    }

    /// `(c_i, h_i, w_i)` per level, spatial dims halving each level.
    pub fn levels(&self) -> Vec<(usize, usize, usize)> {
        let (h, w) = self.input_hw;
        self.multipliers
            .iter()
            .enumerate()
            .map(|(i, m)| (self.base_width * m, h >> i, w >> i))
            .collect()
    }
}

/// Adds a `(B, 1, h, w)` map to every channel of `(B, c, h, w)` features.
pub fn spatial_fuse(g: &mut Graph, f: Var, c_map: Var) -> Result<Var> {
    let (fs, cs) = (g.shape(f), g.shape(c_map));
    if fs.len() != 4 || cs.len() != 4 || cs[0] != fs[0] || cs[1] != 1 || cs[2..] != fs[2..] {
        bail!(Validation, "spatial fusion: features {:?}, map {:?}", fs, cs);
    }
    g.add_bcast(f, c_map)
}

/// Adds a `(B, c, 1, 1)` map to every spatial location of `(B, c, h, w)` features.
pub fn spectral_fuse(g: &mut Graph, f: Var, t_map: Var) -> Result<Var> {
    let (fs, ts) = (g.shape(f), g.shape(t_map));
    if fs.len() != 4 || ts.len() != 4 || ts[..2] != fs[..2] || ts[2] != 1 || ts[3] != 1 {
        bail!(Validation, "spectral fusion: features {:?}, map {:?}", fs, ts);
    }
    g.add_bcast(f, t_map)
}

/// Tensor-level form of [`spatial_fuse`] on `(c, h, w)` or `(B, c, h, w)` inputs.
pub fn spatial_fuse_tensor(f: &Tensor, c_map: &Tensor) -> Result<Tensor> {
    fuse_tensor(f, c_map, spatial_fuse)
}

/// Tensor-level form of [`spectral_fuse`].
pub fn spectral_fuse_tensor(f: &Tensor, t_map: &Tensor) -> Result<Tensor> {
    fuse_tensor(f, t_map, spectral_fuse)
}

fn fuse_tensor(f: &Tensor, m: &Tensor, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let unbatched = f.rank() == 3;
    let lift = |t: &Tensor| if t.rank() == 3 { t.clone().unsqueeze_batch() } else { t.clone() };
    let mut g = Graph::new();
    let fv = g.input(lift(f));
    let mv = g.input(lift(m));
    let out = op(&mut g, fv, mv)?;
    let t = g.value(out).clone();
    if unbatched {
        t.squeeze_batch()
    } else {
        Ok(t)
    }
}

/// `GN → fuse → SiLU → conv → GN → SiLU → conv`, plus shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
    /// `D → c_in` timestep projector for this block.
    pub spectral: Linear,
    pub level: usize,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        (c_in, c_out): (usize, usize),
        d_model: usize,
        level: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, MAX_GROUPS),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), (c_in, c_out), 3, 1, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, MAX_GROUPS),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), (c_out, c_out), 3, 1, rng),
            shortcut: (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), (c_in, c_out), 1, 1, rng)),
            spectral: Linear::new(store, &format!("{name}.spectral"), d_model, c_in, rng),
            level,
        }
    }

    fn forward(&self, g: &mut Graph, p: Bind<'_>, x: Var, c_map: Var, t_emb: Var) -> Result<Var> {
        let t_map = self.spectral.forward(g, p, t_emb)?;
        let (b, c) = (g.shape(t_map)[0], g.shape(t_map)[1]);
        let t_map = g.reshape(t_map, &[b, c, 1, 1])?;
        let h = self.norm1.forward(g, p, x)?;
        let h = spatial_fuse(g, h, c_map)?;
        let h = spectral_fuse(g, h, t_map)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub spec: ResolutionSpec,
    pub d_model: usize,
    pub conv_in: Conv2d,
    /// `D → h_i·w_i` semantic projector per level.
    pub spatial: Vec<Linear>,
    pub enc: Vec<ResBlock>,
    pub down: Vec<Conv2d>,
    pub mid: ResBlock,
    pub dec: Vec<ResBlock>,
    pub up: Vec<Conv2d>,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: ResolutionSpec,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let levels = spec.levels();
        let n = levels.len();
        let c0 = levels[0].0;
        let conv_in = Conv2d::new(store, &format!("{name}.conv_in"), (PAIR_CHANNELS, c0), 3, 1, rng);
        let spatial = levels
            .iter()
            .enumerate()
            .map(|(i, &(_, h, w))| Linear::new(store, &format!("{name}.spatial{i}"), d_model, h * w, rng))
            .collect();
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for (i, &(c, _, _)) in levels.iter().enumerate() {
            enc.push(ResBlock::new(store, &format!("{name}.enc{i}"), (c, c), d_model, i, rng));
            if i + 1 < n {
                down.push(Conv2d::new(store, &format!("{name}.down{i}"), (c, levels[i + 1].0), 3, 2, rng));
            }
        }
        let c_last = levels[n - 1].0;
        let mid = ResBlock::new(store, &format!("{name}.mid"), (c_last, c_last), d_model, n - 1, rng);
        let mut dec = Vec::new();
        let mut up = Vec::new();
        for i in (0..n).rev() {
            let c = levels[i].0;
            dec.push(ResBlock::new(store, &format!("{name}.dec{i}"), (2 * c, c), d_model, i, rng));
            if i > 0 {
                up.push(Conv2d::new(store, &format!("{name}.up{i}"), (c, levels[i - 1].0), 3, 1, rng));
            }
        }
        let norm_out = GroupNorm::new(store, &format!("{name}.norm_out"), c0, MAX_GROUPS);
        let conv_out = Conv2d::new(store, &format!("{name}.conv_out"), (c0, PAIR_CHANNELS), 3, 1, rng);
        Ok(Self { spec, d_model, conv_in, spatial, enc, down, mid, dec, up, norm_out, conv_out })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResBlock> {
        self.enc.iter().chain(core::iter::once(&self.mid)).chain(self.dec.iter())
    }

    /// `(B, 1, h_i, w_i)` spatial condition map for `level`.
    pub fn project_spatial(&self, g: &mut Graph, p: Bind<'_>, sem: Var, level: usize) -> Result<Var> {
        let (_, h, w) = self.spec.levels()[level];
        let m = self.spatial[level].forward(g, p, sem)?;
        let b = g.shape(m)[0];
        g.reshape(m, &[b, 1, h, w])
    }

    /// ε̂ for `x_t` of shape `(B, 6, H, W)` given `(B, D)` timestep and semantic embeddings.
    pub fn forward(&self, g: &mut Graph, p: Bind<'_>, x_t: Var, t_emb: Var, sem: Var) -> Result<Var> {
        let xs = g.shape(x_t).to_vec();
        let (h, w) = self.spec.input_hw;
        if xs.len() != 4 || xs[1] != PAIR_CHANNELS || (xs[2], xs[3]) != (h, w) {
            bail!(Validation, "unet input {:?}, expected (B, 6, {}, {})", xs, h, w);
        }
        for (what, v) in [("timestep", t_emb), ("semantic", sem)] {
            if g.shape(v) != [xs[0], self.d_model] {
                bail!(Validation, "{} embedding {:?}, expected ({}, {})", what, g.shape(v), xs[0], self.d_model);
            }
        }
        let n = self.enc.len();
        let maps = (0..n).map(|i| self.project_spatial(g, p, sem, i)).collect::<Result<Vec<_>>>()?;
        let mut hcur = self.conv_in.forward(g, p, x_t)?;
        let mut skips = Vec::with_capacity(n);
        for i in 0..n {
            hcur = self.enc[i].forward(g, p, hcur, maps[i], t_emb)?;
            skips.push(hcur);
            if i + 1 < n {
                hcur = self.down[i].forward(g, p, hcur)?;
            }
        }
        hcur = self.mid.forward(g, p, hcur, maps[n - 1], t_emb)?;
        for (k, i) in (0..n).rev().enumerate() {
            let cat = g.concat_channels(hcur, skips[i])?;
            hcur = self.dec[k].forward(g, p, cat, maps[i], t_emb)?;
            if i > 0 {
                let upsampled = g.upsample2(hcur)?;
                hcur = self.up[k].forward(g, p, upsampled)?;
            }
        }
        let hcur = self.norm_out.forward(g, p, hcur)?;
        let hcur = g.silu(hcur);
        self.conv_out.forward(g, p, hcur)
    }

    /// Plain evaluation, no gradients.
    pub fn apply(&self, store: &ParamStore, x_t: &Tensor, t_emb: &Tensor, sem: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (x, t, s) = (g.input(x_t.clone()), g.input(t_emb.clone()), g.input(sem.clone()));
        let out = self.forward(&mut g, Bind::frozen(store), x, t, s)?;
        Ok(g.value(out).clone())
    }
}
