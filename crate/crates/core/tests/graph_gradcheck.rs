//! Central-difference checks of every differentiable graph operation.

use cosimgen_core::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

/// Compares analytic and numeric gradients for every element of every input.
fn check(shapes: &[&[usize]], build: &Build) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(&format!("p{i}"), Tensor::uniform(s, -1.0, 1.0, &mut rng)))
        .collect();
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let out = build(&mut g, &vars);
        (g.value(out).item(), g)
    };
    let (_, g) = eval(&store);
    let mut g2 = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g2.param(&store, id)).collect();
    let root = build(&mut g2, &vars);
    let grads = g2.backward(root).unwrap();
    drop(g);
    let h = 1e-6;
    for &id in &ids {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&store).0;
            store.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&store).0;
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "param {} elem {k}: analytic {a} numeric {numeric}", id.index());
        }
    }
}

/// Weighted sum so that every output element gets a distinct upstream gradient.
fn probe(g: &mut Graph, v: Var) -> Var {
    let shape = g.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap();
    let wv = g.input(w);
    let m = g.mul(v, wv).unwrap();
    g.sum_all(m)
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3], &[2, 3]], &|g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.mul(b, v[1]).unwrap();
        let d = g.scale(c, 1.7);
        let e = g.add_scalar(d, 0.3);
        probe(g, e)
    });
    check(&[&[3, 4]], &|g, v| {
        let a = g.silu(v[0]);
        let b = g.sigmoid(a);
        let c = g.softplus(b);
        let d = g.leaky_relu(v[0], 0.2);
        let e = g.add(c, d).unwrap();
        let f = g.square(e);
        probe(g, f)
    });
}

#[test]
fn broadcast_ops() {
    check(&[&[2, 3, 4, 5], &[2, 1, 4, 5]], &|g, v| {
        let a = g.add_bcast(v[0], v[1]).unwrap();
        probe(g, a)
    });
    check(&[&[2, 3, 4, 5], &[2, 3, 1, 1]], &|g, v| {
        let a = g.mul_bcast(v[0], v[1]).unwrap();
        probe(g, a)
    });
}

#[test]
fn dense_ops() {
    check(&[&[3, 4], &[5, 4], &[5]], &|g, v| {
        let a = g.linear(v[0], v[1], v[2]).unwrap();
        probe(g, a)
    });
    check(&[&[3, 4], &[4, 2]], &|g, v| {
        let a = g.matmul(v[0], v[1]).unwrap();
        probe(g, a)
    });
    check(&[&[4, 3]], &|g, v| {
        let a = g.gather_rows(v[0], &[2, 0, 0, 3]).unwrap();
        let s = g.sum_last(a).unwrap();
        let w = g.weighted_mean(s, &[1.0, 0.0, 2.0, 0.5]).unwrap();
        let m = g.mean_all(a);
        g.add(w, m).unwrap()
    });
}

#[test]
fn convolutions() {
    for &(k, stride) in &[(3, 1), (3, 2), (1, 1), (5, 1)] {
        check(&[&[2, 3, 6, 5], &[4, 3, k, k], &[4]], &move |g, v| {
            let a = g.conv2d(v[0], v[1], v[2], stride, k / 2).unwrap();
            probe(g, a)
        });
    }
}

#[test]
fn normalization_and_resampling() {
    check(&[&[2, 4, 3, 3], &[4], &[4]], &|g, v| {
        let a = g.group_norm(v[0], v[1], v[2], 2).unwrap();
        probe(g, a)
    });
    check(&[&[1, 2, 4, 4], &[1, 3, 4, 4]], &|g, v| {
        let u = g.avg_pool2(v[0]).unwrap();
        let u = g.upsample2(u).unwrap();
        let c = g.concat_channels(u, v[1]).unwrap();
        let p = g.global_avg_pool(c).unwrap();
        let r = g.reshape(p, &[5]).unwrap();
        probe(g, r)
    });
    check(&[&[2, 8, 2, 3]], &|g, v| {
        let a = g.pixel_shuffle(v[0], 2).unwrap();
        let c = g.clamp(a, -0.5, 0.5);
        probe(g, c)
    });
}

#[test]
fn detach_and_frozen_block_gradients() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::scalar(2.0));
    let b = store.add("b", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let va = g.param(&store, a);
    let vb = g.frozen(&store, b);
    let da = g.detach(va);
    let x = g.mul(va, vb).unwrap();
    let y = g.mul(x, da).unwrap();
    let grads = g.backward(y).unwrap();
    // y = a·b·stop(a) → dy/da = b·a = 6
    assert_eq!(grads.param(a).unwrap().item(), 6.0);
    assert!(grads.param(b).is_none());
}
