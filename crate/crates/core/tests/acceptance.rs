//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p cosimgen-core --test acceptance` runs everything (criterion 6
//! trains for roughly 20 minutes on one CPU core); pass criterion numbers to
//! run a subset, e.g. `cargo test -p cosimgen-core --test acceptance -- 1 7`.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use cosimgen_core::dataset::{ConditionVector, PairTensor};
use cosimgen_core::diffusion::NoiseSchedule;
use cosimgen_core::encoders::HashedBagOfWords;
use cosimgen_core::losses::{self, permute_negatives, LossReport, DEFAULT_BETA};
use cosimgen_core::metrics::{
    frechet_distance, kernel_distance, ppv, semantic_fid, FeatureSet, RandomConvExtractor, Segmented,
};
use cosimgen_core::model::CoSimGen;
use cosimgen_core::palette::{ClassMap, ClassPalette, DEFAULT_MIN_FRACTION};
use cosimgen_core::superres::{downscale, train_sr, SrConfig, SrTrainer};
use cosimgen_core::synthetic::{shapes_dataset, shapes_palette, SHAPE_CLASSES};
use cosimgen_core::tensor::upsample_nearest;
use cosimgen_core::trainer::{generator_objective, DiffusionTrainer, StepInputs, TrainConfig};
use cosimgen_core::unet::{spatial_fuse_tensor, spectral_fuse_tensor, ResolutionSpec};
use cosimgen_core::{Graph, Tensor};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Default)]
struct Checks(Vec<(String, bool)>);

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        self.0.push((what.into(), ok));
    }
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

fn c1_palette(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut palettes: BTreeMap<usize, ClassPalette> = BTreeMap::new();
    let (mut exact, mut noisy) = (0, 0);
    let t0 = Instant::now();
    for _ in 0..1000 {
        let k = rng.random_range(1..=64usize);
        let p = palettes.entry(k).or_insert_with(|| ClassPalette::build(k, &names(k)).unwrap());
        let ids: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(0..k) as u8).collect();
        let map = ClassMap::new(64, 64, ids).unwrap();
        let enc = p.encode_mask(&map).unwrap();
        exact += usize::from(p.decode_mask(&enc) == map);
        // per-channel amplitude d/(2√3) keeps the noise vector inside the decision ball
        let amp = if k == 1 { 100.0 } else { 0.999 * p.min_pair_distance() / (2.0 * 3f64.sqrt()) };
        let rgb: Vec<[f64; 3]> = enc.pixels.iter().map(|px| px.map(|v| f64::from(v) + rng.random_range(-amp..amp))).collect();
        noisy += usize::from(p.decode_pixels(64, 64, &rgb).unwrap() == map);
    }
    let secs = t0.elapsed().as_secs_f64();
    c.check(exact == 1000, format!("exact round trip {exact}/1000"));
    c.check(noisy == 1000, format!("noisy decode {noisy}/1000"));
    c.check(secs < 30.0, format!("{secs:.1}s"));
}

fn c2_spectron(c: &mut Checks) {
    let spec = ResolutionSpec::new(16, vec![1, 2, 4, 8], (64, 64)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for &(ch, h, w) in &spec.levels() {
        for _ in 0..100 {
            let b = 2;
            let f = Tensor::randn(&[b, ch, h, w], &mut rng);
            let cm = Tensor::randn(&[b, 1, h, w], &mut rng);
            let tm = Tensor::randn(&[b, ch, 1, 1], &mut rng);
            let (sp, se) = (spatial_fuse_tensor(&f, &cm).unwrap(), spectral_fuse_tensor(&f, &tm).unwrap());
            let (fd, cd, td) = (f.data(), cm.data(), tm.data());
            for bi in 0..b {
                for k in 0..ch {
                    for y in 0..h {
                        for x in 0..w {
                            let i = ((bi * ch + k) * h + y) * w + x;
                            bad += usize::from(sp.data()[i] != fd[i] + cd[(bi * h + y) * w + x]);
                            bad += usize::from(se.data()[i] != fd[i] + td[bi * ch + k]);
                        }
                    }
                }
            }
        }
    }
    c.check(bad == 0, format!("{} levels x 100 maps, {bad} mismatching elements", spec.levels().len()));
}

fn c3_forward(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for s in [NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap(), NoiseSchedule::linear(50, 2e-3, 0.4).unwrap()] {
        for t in 0..s.num_steps() {
            let x0 = Tensor::uniform(&[6, 8, 8], -1.0, 1.0, &mut rng);
            let eps = Tensor::randn(&[6, 8, 8], &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            worst = worst.max(s.predict_x0_unclamped(&xt, t, &eps).unwrap().max_abs_diff(&x0));
        }
    }
    c.check(worst <= 1e-9, format!("max |x0 - x0_hat| = {worst:.2e}"));
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rel_worst: f64 = 0.0;
    for t in [0, 10, 100, 500, 999] {
        let x0 = Tensor::zeros(&[10_000]);
        let eps = Tensor::randn(&[10_000], &mut rng);
        let xt = s.q_sample(&x0, t, &eps).unwrap();
        let m = xt.mean();
        let var = xt.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 9_999.0;
        let want = 1.0 - s.alpha_bars[t];
        rel_worst = rel_worst.max((var - want).abs() / want);
    }
    c.check(rel_worst < 0.05, format!("Monte-Carlo variance rel. err {rel_worst:.3}"));
}

fn c4_losses(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e = Tensor::randn(&[2, 6, 4, 4], &mut rng);
    let zero = losses::diffusion_loss_tensor(&e, &e).unwrap();
    let unit = losses::diffusion_loss_tensor(&Tensor::zeros(&[3, 5]), &Tensor::full(&[3, 5], 1.0)).unwrap();
    c.check(zero == 0.0 && unit == 1.0, format!("diffusion loss {zero}, {unit}"));
    let row = |v: &[f64]| Tensor::new(&[1, v.len()], v.to_vec()).unwrap();
    let cases = [
        // anchor, positive, negative, expected
        (row(&[0.0, 0.0]), row(&[0.0, 0.0]), row(&[3.0, 4.0]), 0.0),
        (row(&[1.0, 2.0]), row(&[5.0, 5.0]), row(&[5.0, 5.0]), 1.0),
        (row(&[0.0, 0.0]), row(&[1.0, 1.0]), row(&[1.0, 0.0]), 2.0),
        (row(&[0.0]), row(&[0.5]), row(&[1.0]), 0.25),
    ];
    let got: Vec<f64> = cases.iter().map(|(a, p, n, _)| losses::triplet_loss_tensor(a, p, n).unwrap()).collect();
    let want: Vec<f64> = cases.iter().map(|x| x.3).collect();
    c.check(got == want, format!("triplet hand cases {got:?}"));
    let r = LossReport::new(0.75, 0.5, 2.5, DEFAULT_BETA);
    c.check(DEFAULT_BETA == 0.1 && r.l_total == 0.75 + 0.5 + 0.1 * 2.5, format!("l_total {} with beta {}", r.l_total, r.beta));
}

fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::desk(SHAPE_CLASSES.len());
    c.model.resolution = 8;
    c.model.base_width = 4;
    c.model.multipliers = vec![1, 2];
    c.model.d_model = 8;
    c.model.d_feat = 6;
    c.model.d_base = 8;
    c.model.num_steps = 10;
    c.model.beta_start = 0.01;
    c.model.beta_end = 0.2;
    c.model.disc_widths = vec![4, 4];
    c.batch_size = 3;
    c
}

fn c5_gradients(c: &mut Checks) {
    let cfg = tiny_config();
    let mut model = CoSimGen::new(cfg.model.clone(), Arc::new(HashedBagOfWords::default()), 3).unwrap();
    let data = shapes_dataset(3, 8, 4).unwrap();
    let batch = data.batch(&[0, 1, 2]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let steps = vec![2, 5, 8];
    let eps = Tensor::randn(batch.x0.shape(), &mut rng);
    let x_t = model.schedule.q_sample_batch(&batch.x0, &steps, &eps).unwrap();
    let negatives = Some(permute_negatives(&batch.conditions, &mut rng).unwrap());
    let inputs = StepInputs { x_t, eps, steps, conditions: batch.conditions, prompts: batch.prompts, negatives };
    let objective = |m: &CoSimGen| {
        let mut g = Graph::new();
        let o = generator_objective(&mut g, m, &inputs, cfg.beta).unwrap();
        g.value(o.total).item()
    };
    let mut g = Graph::new();
    let o = generator_objective(&mut g, &model, &inputs, cfg.beta).unwrap();
    let grads = g.backward(o.total).unwrap();
    drop(g);
    let groups: [(&str, &dyn Fn(&str) -> bool); 5] = [
        ("W_c", &|n| n == "class.w_c"),
        ("text projection", &|n| n.starts_with("text.proj")),
        ("spatial projectors", &|n| n.starts_with("unet.spatial")),
        ("spectral projectors", &|n| n.contains(".spectral.")),
        ("U-Net conv", &|n| n.starts_with("unet.") && n.contains("conv")),
    ];
    let h = 1e-5;
    for (group, select) in groups {
        let mut picks = Vec::new();
        for id in model.generator_ids().into_iter().filter(|&id| select(model.store.name(id))) {
            if let Some(gr) = grads.param(id) {
                picks.extend(gr.data().iter().enumerate().map(|(k, &v)| (id, k, v)));
            }
        }
        picks.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()));
        picks.truncate(4);
        let mut worst: f64 = 0.0;
        for &(id, k, analytic) in &picks {
            let orig = model.store.get(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = orig + h;
            let up = objective(&model);
            model.store.value_mut(id).data_mut()[k] = orig - h;
            let down = objective(&model);
            model.store.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(f64::MIN_POSITIVE));
        }
        c.check(picks.len() >= 3 && worst < 1e-3, format!("{group}: {} params, rel err {worst:.1e}", picks.len()));
    }

    let mut g = Graph::new();
    let o = generator_objective(&mut g, &model, &inputs, 0.1).unwrap();
    let adv = g.backward(o.l_adv.unwrap()).unwrap();
    let zero_on = |gr: &cosimgen_core::Gradients, ids: &[cosimgen_core::ParamId]| {
        ids.iter().all(|&id| gr.param(id).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)))
    };
    c.check(zero_on(&adv, &model.discriminator_ids()), "adversarial loss: zero gradient on D");
    let real = g.input(Tensor::zeros(g.shape(o.x0_hat)));
    let l = losses::discriminator_loss(&mut g, &model.disc, &model.store, real, o.x0_hat).unwrap();
    let dl = g.backward(l).unwrap();
    c.check(zero_on(&dl, &model.generator_ids()), "discriminator loss: zero gradient on generator");
}

fn c6_overfit(c: &mut Checks) {
    let data = shapes_dataset(8, 64, 1).unwrap();
    let cfg = TrainConfig::desk(SHAPE_CLASSES.len());
    let names = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut t = DiffusionTrainer::new(cfg.clone(), Arc::new(HashedBagOfWords::default()), names).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let t_max = cfg.model.num_steps;
    let probes: Vec<(usize, usize, Tensor)> =
        (0..32).map(|k| (k % 8, (k * t_max) / 32 + (k % 2), Tensor::randn(&[6, 64, 64], &mut rng))).collect();
    let before = t.probe_loss(&data, &probes).unwrap();
    let start = Instant::now();
    for _ in 0..cfg.steps {
        t.step(&data).unwrap();
    }
    let after = t.probe_loss(&data, &probes).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    c.check(before >= 10.0 * after, format!("l_diff {before:.4} -> {after:.4} ({:.1}x) in {} steps", before / after, cfg.steps));

    let m = &t.model;
    let (mut queries, mut class_maps, mut same) = (Vec::new(), Vec::new(), 0);
    let plane = 64 * 64;
    let decode = |x: &Tensor| {
        let mask = Tensor::new(&[3, 64, 64], x.data()[3 * plane..].to_vec()).unwrap();
        data.palette.decode_tensor(&mask).unwrap()
    };
    for k in 0..16 {
        let s = &data.samples[k % 8];
        let seed = 1000 + k as u64;
        let by_class = m.sample(&m.class_embedding(&s.condition).unwrap(), 1, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let by_text = m.sample(&m.text_embedding(&s.prompt).unwrap(), 1, 0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, b) = (decode(&by_class.x0), decode(&by_text.x0));
        same += usize::from(a.classes_present(DEFAULT_MIN_FRACTION) == b.classes_present(DEFAULT_MIN_FRACTION));
        queries.push(s.condition.clone());
        class_maps.push(a);
    }
    let p = ppv(&queries, &class_maps, DEFAULT_MIN_FRACTION).unwrap();
    c.check(p >= 0.9, format!("PPV {p:.3} over 16 samples"));
    c.check(same * 10 >= 16 * 8, format!("hot-swap agreement {same}/16"));
    c.check(train_secs < 7200.0, format!("training {train_secs:.0}s"));
}

fn gaussian_set(n: usize, f: usize, shift: f64, scale: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..f).map(|j| shift + scale * (1.0 + j as f64 * 0.5) * Tensor::randn(&[1], rng).item()).collect())
        .collect();
    FeatureSet::new(&rows, "acceptance").unwrap()
}

/// Denman–Beavers square root of a symmetric PSD matrix.
fn db_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let (mut y, mut z) = (a.clone(), DMatrix::identity(n, n));
    for _ in 0..100 {
        let (yi, zi) = (y.clone().try_inverse().unwrap(), z.clone().try_inverse().unwrap());
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    y
}

fn naive_stats(s: &FeatureSet) -> (Vec<f64>, DMatrix<f64>) {
    let (n, f) = (s.n(), s.dim());
    let mu: Vec<f64> = (0..f).map(|j| (0..n).map(|i| s.matrix[(i, j)]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(f, f);
    for a in 0..f {
        for b in 0..f {
            cov[(a, b)] = (0..n).map(|i| (s.matrix[(i, a)] - mu[a]) * (s.matrix[(i, b)] - mu[b])).sum::<f64>() / (n - 1) as f64;
        }
    }
    (mu, cov)
}

fn naive_kid(x: &FeatureSet, y: &FeatureSet) -> f64 {
    let f = x.dim() as f64;
    let k = |a: &FeatureSet, i: usize, b: &FeatureSet, j: usize| {
        let dot: f64 = (0..a.dim()).map(|d| a.matrix[(i, d)] * b.matrix[(j, d)]).sum();
        (dot / f + 1.0).powi(3)
    };
    let (m, n) = (x.n() as f64, y.n() as f64);
    let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
    for i in 0..x.n() {
        for j in 0..x.n() {
            if i != j {
                kxx += k(x, i, x, j);
            }
        }
    }
    for i in 0..y.n() {
        for j in 0..y.n() {
            if i != j {
                kyy += k(y, i, y, j);
            }
        }
    }
    for i in 0..x.n() {
        for j in 0..y.n() {
            kxy += k(x, i, y, j);
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

fn scene(size: usize, boxes: &[(u8, usize, usize, usize, [f64; 3])]) -> Segmented {
    let mut image = Tensor::full(&[3, size, size], -0.8);
    let mut map = ClassMap::filled(size, size, 0);
    let plane = size * size;
    for &(class, y0, x0, side, color) in boxes {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                map.set(y, x, class);
                for ch in 0..3 {
                    image.data_mut()[ch * plane + y * size + x] = color[ch];
                }
            }
        }
    }
    Segmented { image, class_map: map }
}

fn c7_metrics(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = gaussian_set(300, 4, 0.0, 1.0, &mut rng);
    let self_fid = frechet_distance(&a, &a).unwrap();
    c.check(self_fid.abs() <= 1e-6, format!("FID(A,A) {self_fid:.1e}"));

    let n = 200;
    let unit: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| Tensor::randn(&[1], &mut rng).item()).collect()).collect();
    let (h1, h2) = unit.split_at(n / 2);
    let split = kernel_distance(&FeatureSet::new(h1, "x").unwrap(), &FeatureSet::new(h2, "x").unwrap()).unwrap();
    let bound = 3.0 / (n as f64).sqrt();
    c.check(split.abs() <= bound, format!("KID split-half {split:.4} (bound {bound:.3})"));

    let (mut fid_err, mut kid_err): (f64, f64) = (0.0, 0.0);
    for trial in 0..20 {
        let f = 1 + trial % 4;
        let (nx, ny) = (f + 2 + trial % (15 - f), f + 2 + (trial * 7) % (15 - f));
        let x = gaussian_set(nx, f, 0.0, 1.0, &mut rng);
        let y = gaussian_set(ny, f, 0.7, 1.3, &mut rng);
        let ((mx, sx), (my, sy)) = (naive_stats(&x), naive_stats(&y));
        let s_x = db_sqrt(&sx);
        let cross = db_sqrt(&(&s_x * &sy * &s_x));
        let dmu: f64 = mx.iter().zip(&my).map(|(p, q)| (p - q) * (p - q)).sum();
        let oracle = dmu + sx.trace() + sy.trace() - 2.0 * cross.trace();
        fid_err = fid_err.max((frechet_distance(&x, &y).unwrap() - oracle).abs());
        kid_err = kid_err.max((kernel_distance(&x, &y).unwrap() - naive_kid(&x, &y)).abs());
    }
    c.check(fid_err <= 1e-8 && kid_err <= 1e-8, format!("oracles n<=16 f<=4: Frechet err {fid_err:.1e}, KID err {kid_err:.1e}"));

    let ext = RandomConvExtractor::new(11, 32);
    let (red, blue) = ([0.9, -0.6, -0.6], [-0.6, -0.6, 0.9]);
    let real: Vec<Segmented> = (0..4).map(|i| scene(32, &[(1, 2 + i, 2, 10, red), (1, 18, 18 - i, 10, red), (2, 2, 20, 9, blue)])).collect();
    let gen: Vec<Segmented> = (0..4).map(|i| scene(32, &[(1, 3, 3 + i, 10, red), (1, 19 - i, 18, 10, red)])).collect();
    let s = semantic_fid(&real, &gen, 3, &ext).unwrap();
    let only = s.per_class.get(&1).copied();
    c.check(
        s.per_class.keys().copied().collect::<Vec<_>>() == [1] && s.skipped == [2] && only == Some(s.mean),
        format!("sFID evaluable {:?}, skipped {:?}", s.per_class.keys().collect::<Vec<_>>(), s.skipped),
    );

    let q = |v: &[usize]| ConditionVector::from_classes(3, v.to_vec()).unwrap();
    let m = |ids: Vec<u8>| ClassMap::new(1, 2, ids).unwrap();
    let hand = ppv(&[q(&[1]), q(&[1, 2])], &[m(vec![1, 0]), m(vec![2, 0])], 0.0).unwrap();
    c.check(hand == 2.0 / 3.0, format!("PPV hand case {hand}"));
}

fn c8_superres(c: &mut Checks) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[2, 12, 3, 5], &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = g.pixel_shuffle(xv, 2).unwrap();
    let out = g.value(y).clone();
    let mut bad = usize::from(out.shape() != [2, 3, 6, 10]);
    for b in 0..2 {
        for ch in 0..3 {
            for yy in 0..6 {
                for xx in 0..10 {
                    let src = ((b * 12 + ch * 4 + (yy % 2) * 2 + xx % 2) * 3 + yy / 2) * 5 + xx / 2;
                    bad += usize::from(out.data()[((b * 3 + ch) * 6 + yy) * 10 + xx] != x.data()[src]);
                }
            }
        }
    }
    c.check(bad == 0, format!("sub-pixel index oracle, {bad} mismatches"));

    let train: Vec<Tensor> = shapes_dataset(32, 32, 80).unwrap().samples.iter().map(|s| s.pair().unwrap().into_tensor()).collect();
    let held: Vec<Tensor> = shapes_dataset(8, 32, 81).unwrap().samples.iter().map(|s| s.pair().unwrap().into_tensor()).collect();
    let mut t = SrTrainer::new(SrConfig { widths: [32, 32], batch_size: 4, seed: 8, ..SrConfig::default() }).unwrap();
    let probe = t.model.apply(&t.store, &Tensor::zeros(&[6, 7, 9])).unwrap();
    c.check(probe.shape() == [6, 14, 18], format!("x2 shape contract {:?}", probe.shape()));
    train_sr(&mut t, std::slice::from_ref(&train), 1500, |_, _| Ok(())).unwrap();
    let (mut mse_sr, mut mse_nn) = (0.0, 0.0);
    for hr in &held {
        let lr = downscale(hr).unwrap();
        let sr = t.model.apply(&t.store, &lr).unwrap();
        let nn = upsample_nearest(&lr.clone().unsqueeze_batch(), 2).unwrap().squeeze_batch().unwrap();
        mse_sr += losses::diffusion_loss_tensor(&sr, hr).unwrap() / held.len() as f64;
        mse_nn += losses::diffusion_loss_tensor(&nn, hr).unwrap() / held.len() as f64;
    }
    c.check(mse_sr < mse_nn, format!("held-out MSE SR {mse_sr:.5} vs nearest {mse_nn:.5}"));

    let pal = shapes_palette();
    let classes = |x: &Tensor| {
        let (_, mask) = PairTensor::from_tensor(x.clone()).unwrap().unpack();
        pal.decode_tensor(&mask).unwrap().classes_present(DEFAULT_MIN_FRACTION)
    };
    let kept = train[..8]
        .iter()
        .filter(|x| t.model.cascade(&t.store, x, 2).unwrap().iter().all(|y| classes(y) == classes(x)))
        .count();
    c.check(kept == 8, format!("class set kept through x4 cascade on {kept}/8 training pairs"));

    let base = Tensor::uniform(&[6, 128, 128], -1.0, 1.0, &mut rng);
    let chain = t.model.cascade(&t.store, &base, 2).unwrap();
    let shapes: Vec<Vec<usize>> = chain.iter().map(|x| x.shape().to_vec()).collect();
    c.check(shapes == [vec![6, 256, 256], vec![6, 512, 512]], format!("cascade {shapes:?}"));
}

fn c9_determinism(c: &mut Checks) {
    let data = shapes_dataset(6, 16, 9).unwrap();
    let mut cfg = tiny_config();
    cfg.model.resolution = 16;
    let run = || {
        let names = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
        let mut t = DiffusionTrainer::new(cfg.clone(), Arc::new(HashedBagOfWords::default()), names).unwrap();
        let trace: Vec<_> = (0..6).map(|_| t.step(&data).unwrap()).collect();
        let sem = t.model.class_embedding(&data.samples[2].condition).unwrap();
        let out = t.model.sample(&sem, 2, 3, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        let bits: Vec<u64> = out.x0.data().iter().chain(out.snapshots.iter().flat_map(|s| s.x0_hat.data())).map(|v| v.to_bits()).collect();
        (trace, bits)
    };
    let ((ta, sa), (tb, sb)) = (run(), run());
    c.check(ta == tb, format!("loss traces identical over {} steps", ta.len()));
    c.check(sa == sb, format!("samples bit-identical ({} values)", sa.len()));
}

type Criterion = fn(&mut Checks);

fn main() {
    let criteria: [(usize, &str, Criterion); 9] = [
        (1, "palette round trip", c1_palette),
        (2, "spatial/spectral fusion oracle", c2_spectron),
        (3, "forward-process algebra", c3_forward),
        (4, "loss identities", c4_losses),
        (5, "gradient audit", c5_gradients),
        (6, "overfit and conditioning", c6_overfit),
        (7, "metric correctness", c7_metrics),
        (8, "super-resolution", c8_superres),
        (9, "determinism", c9_determinism),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut checks = Checks::default();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run(&mut checks)));
        if let Err(e) = outcome {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            checks.check(false, format!("panicked: {}", msg.unwrap_or_default()));
        }
        let ok = checks.0.iter().all(|(_, ok)| *ok);
        let detail: Vec<String> = checks.0.iter().map(|(w, ok)| if *ok { w.clone() } else { format!("FAILED {w}") }).collect();
        println!(
            "criterion {n} {name}: {} [{:.1}s] {}",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            detail.join("; ")
        );
        if !ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
