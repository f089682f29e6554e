//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape either as trainable leaves ([`Graph::param`]) or as constants
//! ([`Graph::frozen`]); [`Graph::backward`] returns gradients for the former
//! and for inputs created with [`Graph::input_with_grad`].

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::kernels::{self, ConvGeom, GroupNormStats};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, batch: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupNormStats },
    Silu(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Upsample2(Var),
    AvgPool2(Var),
    ConcatChannels(Var, Var),
    PixelShuffle(Var, usize),
    Reshape(Var),
    GlobalAvgPool(Var),
    SumLast(Var),
    SumAll(Var),
    MeanAll(Var),
    GatherRows(Var, Vec<usize>),
    WeightedMean(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    report_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    store: Option<usize>,
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Maps rank-≤4 shapes into 4-D by left padding with ones.
fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Element strides of `b` inside the index space of `a`, 0 on broadcast axes.
fn bcast_strides(a: &[usize], b: &[usize]) -> Result<([usize; 4], [usize; 4])> {
    if a.len() != b.len() || a.len() > 4 {
        bail!(Shape, "broadcast needs equal rank ≤ 4: {:?} vs {:?}", a, b);
    }
    let (a4, b4) = (pad4(a), pad4(b));
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if b4[d] == a4[d] {
            strides[d] = if b4[d] == 1 { 0 } else { acc };
        } else if b4[d] != 1 {
            bail!(Shape, "cannot broadcast {:?} onto {:?}", b, a);
        }
        acc *= b4[d];
    }
    Ok((a4, strides))
}

fn for_each_bcast(a4: [usize; 4], s: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let mut i = 0;
    for i0 in 0..a4[0] {
        for i1 in 0..a4[1] {
            for i2 in 0..a4[2] {
                let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                for i3 in 0..a4[3] {
                    f(i, base + i3 * s[3]);
                    i += 1;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, report_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        let v = self.push(t, Op::Input, true);
        self.nodes[v.0].report_grad = true;
        v
    }

    fn check_store(&mut self, store: &ParamStore) {
        match self.store {
            None => self.store = Some(store.store_id()),
            Some(id) => assert_eq!(id, store.store_id(), "one graph binds parameters from one store"),
        }
    }

    /// Binds a parameter; it receives a gradient when the store marks it trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.check_store(store);
        let trainable = store.is_trainable(id);
        self.push_shared(store.shared(id), Op::Param(id), trainable)
    }

    /// Binds a parameter as a constant: no gradient flows into it.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push_shared(store.shared(id), Op::Input, false)
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_shared(value, Op::Input, false)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let g = self.needs(a);
        self.push(t, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let g = self.needs(a);
        self.push(t, Op::AddScalar(a), g)
    }

    fn bcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (a4, s) = bcast_strides(ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; da.len()];
        for_each_bcast(a4, s, |i, j| out[i] = f(da[i], db[j]));
        Tensor::new(ta.shape(), out)
    }

    /// `a + b` where every axis of `b` either matches `a` or has size 1.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bcast(a, b, |x, y| x + y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::AddBcast(a, b), g))
    }

    /// `a * b` with the same broadcasting rule as [`Graph::add_bcast`].
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.bcast(a, b, |x, y| x * y)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MulBcast(a, b), g))
    }

    /// `(m, k) · (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            bail!(Shape, "matmul needs rank-2 operands: {:?} · {:?}", sa, sb);
        };
        if k != k2 {
            bail!(Shape, "matmul inner dims: {:?} · {:?}", sa, sb);
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), (k, 1), self.value(b).data(), (n, 1), 0.0, &mut out, (n, 1));
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), g))
    }

    /// `x · wᵀ + b` with `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[batch, fin], &[fout, fin2], &[fout2]) = (sx, sw, sb) else {
            bail!(Shape, "linear: x {:?}, w {:?}, b {:?}", sx, sw, sb);
        };
        if fin != fin2 || fout != fout2 {
            bail!(Shape, "linear: x {:?}, w {:?}, b {:?}", sx, sw, sb);
        }
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        kernels::gemm(batch, fin, fout, self.value(x).data(), (fin, 1), self.value(w).data(), (1, fin), 1.0, &mut out, (fout, 1));
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(&[batch, fout], out)?, Op::Linear { x, w, b }, g))
    }

    /// Square-kernel convolution of a `(B, C, H, W)` input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, c_in2, k, k2) = self.value(w).dims4()?;
        if c_in != c_in2 || k != k2 || self.shape(b) != [c_out] {
            bail!(Shape, "conv2d: x {:?}, w {:?}, b {:?}", self.shape(x), self.shape(w), self.shape(b));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            bail!(Shape, "conv2d: kernel {} does not fit {}x{} with padding {}", k, h, wd, pad);
        }
        let geom = ConvGeom { c_in, c_out, kernel: k, stride, pad, h, w: wd };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, batch, self.value(x).data(), self.value(w).data(), Some(self.value(b).data()));
        let g = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(&[batch, c_out, oh, ow], out)?, Op::Conv { x, w, b, geom, batch }, g))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Shape, "group_norm: {} channels, {} groups", c, groups);
        }
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            (b, c, h * w),
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let g = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::new(&[b, c, h, w], out)?, Op::GroupNorm { x, gamma, beta, groups, stats }, g))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        let g = self.needs(a);
        self.push(t, op, g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * math::sigmoid(x), Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, math::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let t = crate::tensor::upsample_nearest(self.value(a), 2)?;
        let g = self.needs(a);
        Ok(self.push(t, Op::Upsample2(a), g))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let t = crate::tensor::avg_pool(self.value(a), 2)?;
        let g = self.needs(a);
        Ok(self.push(t, Op::AvgPool2(a), g))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            bail!(Shape, "concat: {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let hw = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            out.extend_from_slice(&da[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&db[i * cb * hw..(i + 1) * cb * hw]);
        }
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[ba, ca + cb, ha, wa], out)?, Op::ConcatChannels(a, b), g))
    }

    /// Sub-pixel rearrangement `(B, C·r², H, W) → (B, C, H·r, W·r)`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            bail!(Shape, "pixel_shuffle: {} channels not divisible by {}", c, r * r);
        }
        let out = kernels::pixel_shuffle(self.value(a).data(), (b, c, h, w), r);
        let g = self.needs(a);
        Ok(self.push(Tensor::new(&[b, c / (r * r), h * r, w * r], out)?, Op::PixelShuffle(a, r), g))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let g = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), g))
    }

    /// `(B, C, H, W) → (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let out = self.value(a).data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let g = self.needs(a);
        Ok(self.push(Tensor::new(&[b, c], out)?, Op::GlobalAvgPool(a), g))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&last, rest)) = shape.split_last() else {
            bail!(Shape, "sum_last of a scalar");
        };
        let out = self.value(a).data().chunks_exact(last.max(1)).map(|r| r.iter().sum()).collect();
        let g = self.needs(a);
        Ok(self.push(Tensor::new(rest, out)?, Op::SumLast(a), g))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let g = self.needs(a);
        self.push(t, Op::SumAll(a), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).mean());
        let g = self.needs(a);
        self.push(t, Op::MeanAll(a), g)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&rows, rest)) = shape.split_first() else {
            bail!(Shape, "gather_rows of a scalar");
        };
        let stride: usize = rest.iter().product();
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            bail!(Shape, "gather_rows: index {} out of {}", bad, rows);
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * stride);
        for &i in index {
            out.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut oshape = shape.clone();
        oshape[0] = index.len();
        let g = self.needs(a);
        Ok(self.push(Tensor::new(&oshape, out)?, Op::GatherRows(a, index.to_vec()), g))
    }

    /// `Σ wᵢ aᵢ / Σ wᵢ` over a rank-1 tensor; zero when all weights are zero.
    pub fn weighted_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        if self.shape(a) != [weights.len()] {
            bail!(Shape, "weighted_mean: {:?} vs {} weights", self.shape(a), weights.len());
        }
        let total: f64 = weights.iter().sum();
        let v = if total > 0.0 {
            self.value(a).data().iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total
        } else {
            0.0
        };
        let g = self.needs(a);
        Ok(self.push(Tensor::scalar(v), Op::WeightedMean(a, weights.to_vec()), g))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let s = self.square(d);
        Ok(self.mean_all(s))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            bail!(Shape, "backward needs a scalar root, got {:?}", self.shape(root));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
            let need = |v: Var| self.nodes[v.0].needs_grad;
            macro_rules! send {
                ($v:expr, $t:expr) => {{
                    let v: Var = $v;
                    if need(v) {
                        accumulate(&mut grads[v.0], $t);
                    }
                }};
            }
            match &node.op {
                Op::Input => {
                    if node.report_grad {
                        out.inputs.insert(Var(i), g);
                    }
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                Op::Add(a, b) => {
                    if need(*b) {
                        send!(*b, g.clone());
                    }
                    send!(*a, g);
                }
                Op::Sub(a, b) => {
                    send!(*b, g.map(|v| -v));
                    send!(*a, g);
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        send!(*a, g.zip_map(val(*b), |x, y| x * y)?);
                    }
                    if need(*b) {
                        send!(*b, g.zip_map(val(*a), |x, y| x * y)?);
                    }
                }
                Op::Scale(a, s) => send!(*a, g.scale(*s)),
                Op::AddScalar(a) => send!(*a, g),
                Op::AddBcast(a, b) => {
                    if need(*b) {
                        let tb = val(*b);
                        let (a4, s) = bcast_strides(g.shape(), tb.shape())?;
                        let mut gb = vec![0.0; tb.numel()];
                        let gd = g.data();
                        for_each_bcast(a4, s, |i, j| gb[j] += gd[i]);
                        send!(*b, Tensor::new(tb.shape(), gb)?);
                    }
                    send!(*a, g);
                }
                Op::MulBcast(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (a4, s) = bcast_strides(ta.shape(), tb.shape())?;
                    let gd = g.data();
                    if need(*a) {
                        let mut ga = vec![0.0; ta.numel()];
                        let bd = tb.data();
                        for_each_bcast(a4, s, |i, j| ga[i] = gd[i] * bd[j]);
                        send!(*a, Tensor::new(ta.shape(), ga)?);
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; tb.numel()];
                        let ad = ta.data();
                        for_each_bcast(a4, s, |i, j| gb[j] += gd[i] * ad[i]);
                        send!(*b, Tensor::new(tb.shape(), gb)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if need(*a) {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(m, n, k, g.data(), (n, 1), tb.data(), (1, n), 0.0, &mut ga, (k, 1));
                        send!(*a, Tensor::new(&[m, k], ga)?);
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm(k, m, n, ta.data(), (1, k), g.data(), (n, 1), 0.0, &mut gb, (n, 1));
                        send!(*b, Tensor::new(&[k, n], gb)?);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (val(*x), val(*w));
                    let (batch, fin) = (tx.shape()[0], tx.shape()[1]);
                    let fout = tw.shape()[0];
                    if need(*x) {
                        let mut gx = vec![0.0; batch * fin];
                        kernels::gemm(batch, fout, fin, g.data(), (fout, 1), tw.data(), (fin, 1), 0.0, &mut gx, (fin, 1));
                        send!(*x, Tensor::new(&[batch, fin], gx)?);
                    }
                    if need(*w) {
                        let mut gw = vec![0.0; fout * fin];
                        kernels::gemm(fout, batch, fin, g.data(), (1, fout), tx.data(), (fin, 1), 0.0, &mut gw, (fin, 1));
                        send!(*w, Tensor::new(&[fout, fin], gw)?);
                    }
                    if need(*b) {
                        let mut gb = vec![0.0; fout];
                        for row in g.data().chunks_exact(fout) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        send!(*b, Tensor::new(&[fout], gb)?);
                    }
                }
                Op::Conv { x, w, b, geom, batch } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(geom, *batch, val(*x).data(), val(*w).data(), g.data(), need(*x), need(*w));
                    if let Some(dx) = dx {
                        send!(*x, Tensor::new(val(*x).shape(), dx)?);
                    }
                    if let Some(dw) = dw {
                        send!(*w, Tensor::new(val(*w).shape(), dw)?);
                    }
                    send!(*b, Tensor::new(&[geom.c_out], db)?);
                }
                Op::GroupNorm { x, gamma, beta, groups, stats } => {
                    let tx = val(*x);
                    let (b, c, h, w) = tx.dims4()?;
                    let (dx, dgamma, dbeta) =
                        kernels::group_norm_backward(tx.data(), (b, c, h * w), *groups, val(*gamma).data(), stats, g.data());
                    send!(*x, Tensor::new(tx.shape(), dx)?);
                    send!(*gamma, Tensor::new(&[c], dgamma)?);
                    send!(*beta, Tensor::new(&[c], dbeta)?);
                }
                Op::Silu(a) => send!(
                    *a,
                    g.zip_map(val(*a), |gv, x| {
                        let s = math::sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })?
                ),
                Op::Sigmoid(a) => send!(*a, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?),
                Op::Relu(a) => send!(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?),
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    send!(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { gv * s })?)
                }
                Op::Softplus(a) => send!(*a, g.zip_map(val(*a), |gv, x| gv * math::sigmoid(x))?),
                Op::Square(a) => send!(*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x)?),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send!(*a, g.zip_map(val(*a), |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })?)
                }
                Op::Upsample2(a) => {
                    // Sum of each 2×2 block = 4 × average.
                    let pooled = crate::tensor::avg_pool(&g, 2)?;
                    send!(*a, pooled.scale(4.0));
                }
                Op::AvgPool2(a) => {
                    let up = crate::tensor::upsample_nearest(&g, 2)?;
                    send!(*a, up.scale(0.25));
                }
                Op::ConcatChannels(a, b) => {
                    let (ba, ca, h, w) = val(*a).dims4()?;
                    let cb = val(*b).shape()[1];
                    let hw = h * w;
                    let gd = g.data();
                    let mut ga = Vec::with_capacity(ba * ca * hw);
                    let mut gb = Vec::with_capacity(ba * cb * hw);
                    for i in 0..ba {
                        let base = i * (ca + cb) * hw;
                        ga.extend_from_slice(&gd[base..base + ca * hw]);
                        gb.extend_from_slice(&gd[base + ca * hw..base + (ca + cb) * hw]);
                    }
                    send!(*a, Tensor::new(val(*a).shape(), ga)?);
                    send!(*b, Tensor::new(val(*b).shape(), gb)?);
                }
                Op::PixelShuffle(a, r) => {
                    let dims = val(*a).dims4()?;
                    send!(*a, Tensor::new(val(*a).shape(), kernels::pixel_unshuffle(g.data(), dims, *r))?);
                }
                Op::Reshape(a) => send!(*a, g.reshape(val(*a).shape())?),
                Op::GlobalAvgPool(a) => {
                    let (_, _, h, w) = val(*a).dims4()?;
                    let hw = h * w;
                    let mut ga = Vec::with_capacity(val(*a).numel());
                    for &v in g.data() {
                        ga.extend(core::iter::repeat_n(v / hw as f64, hw));
                    }
                    send!(*a, Tensor::new(val(*a).shape(), ga)?);
                }
                Op::SumLast(a) => {
                    let last = *val(*a).shape().last().unwrap_or(&1);
                    let mut ga = Vec::with_capacity(val(*a).numel());
                    for &v in g.data() {
                        ga.extend(core::iter::repeat_n(v, last));
                    }
                    send!(*a, Tensor::new(val(*a).shape(), ga)?);
                }
                Op::SumAll(a) => send!(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::MeanAll(a) => {
                    let n = val(*a).numel() as f64;
                    send!(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::GatherRows(a, index) => {
                    let ta = val(*a);
                    let stride: usize = ta.shape()[1..].iter().product();
                    let mut ga = vec![0.0; ta.numel()];
                    for (row, &src) in index.iter().enumerate() {
                        for k in 0..stride {
                            ga[src * stride + k] += g.data()[row * stride + k];
                        }
                    }
                    send!(*a, Tensor::new(ta.shape(), ga)?);
                }
                Op::WeightedMean(a, weights) => {
                    let total: f64 = weights.iter().sum();
                    let gv = g.item();
                    let ga = weights.iter().map(|w| if total > 0.0 { gv * w / total } else { 0.0 }).collect();
                    send!(*a, Tensor::new(val(*a).shape(), ga)?);
                }
            }
        }
        Ok(out)
    }
}
