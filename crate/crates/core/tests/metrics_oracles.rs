use cosimgen_core::dataset::ConditionVector;
use cosimgen_core::metrics::*;
use cosimgen_core::palette::ClassMap;
use cosimgen_core::superres::PerceptualExtractor;
use cosimgen_core::{Error, Tensor};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_set(n: usize, f: usize, shift: f64, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..f).map(|j| Tensor::randn(&[1], &mut rng).item() * (1.0 + j as f64 * 0.3) + shift).collect())
        .collect();
    FeatureSet::new(&rows, "test").unwrap()
}

/// Denman-Beavers iteration for a general square root of a matrix with positive spectrum.
fn db_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = a.clone();
    let mut z = DMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().unwrap();
        let zi = z.clone().try_inverse().unwrap();
        (y, z) = ((&y + zi) * 0.5, (&z + yi) * 0.5);
    }
    y
}

fn naive_mean_cov(s: &FeatureSet) -> (Vec<f64>, DMatrix<f64>) {
    let (n, f) = (s.n(), s.dim());
    let mu: Vec<f64> = (0..f).map(|j| (0..n).map(|i| s.matrix[(i, j)]).sum::<f64>() / n as f64).collect();
    let mut cov = DMatrix::zeros(f, f);
    for i in 0..n {
        for a in 0..f {
            for b in 0..f {
                cov[(a, b)] += (s.matrix[(i, a)] - mu[a]) * (s.matrix[(i, b)] - mu[b]) / (n as f64 - 1.0);
            }
        }
    }
    (mu, cov)
}

#[test]
fn frechet_matches_denman_beavers_oracle() {
    for (n, f, seed) in [(16, 4, 1), (12, 3, 2), (9, 2, 3), (16, 1, 4)] {
        let a = gaussian_set(n, f, 0.0, seed);
        let b = gaussian_set(n, f, 0.7, seed + 100);
        let (ma, sa) = naive_mean_cov(&a);
        let (mb, sb) = naive_mean_cov(&b);
        let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
        let want = dmu + sa.trace() + sb.trace() - 2.0 * db_sqrt(&(&sa * &sb)).trace();
        let got = frechet_distance(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-8, "n={n} f={f}: {got} vs {want}");
    }
}

#[test]
fn frechet_of_identical_sets_is_zero() {
    for seed in 0..5 {
        let a = gaussian_set(64, 8, 0.3, seed);
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
    }
}

#[test]
fn kernel_matches_double_loop_oracle() {
    let k = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        (d / x.len() as f64 + 1.0).powi(3)
    };
    for (n, m, f, seed) in [(16, 16, 4, 5), (7, 11, 3, 6), (2, 3, 1, 7)] {
        let a = gaussian_set(n, f, 0.0, seed);
        let b = gaussian_set(m, f, 0.5, seed + 1);
        let row = |s: &FeatureSet, i: usize| s.matrix.row(i).iter().copied().collect::<Vec<_>>();
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    xx += k(&row(&a, i), &row(&a, j));
                }
            }
            for j in 0..m {
                xy += k(&row(&a, i), &row(&b, j));
            }
        }
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    yy += k(&row(&b, i), &row(&b, j));
                }
            }
        }
        let (nf, mf) = (n as f64, m as f64);
        let want = xx / (nf * (nf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / (nf * mf);
        assert!((kernel_distance(&a, &b).unwrap() - want).abs() < 1e-8);
    }
}

fn standard_normal_set(n: usize, f: usize, shift: f64, seed: u64) -> FeatureSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| Tensor::randn(&[f], &mut rng).data().iter().map(|v| v + shift).collect()).collect();
    FeatureSet::new(&rows, "test").unwrap()
}

#[test]
fn kernel_split_half_is_small() {
    let n = 200;
    let pool = standard_normal_set(2 * n, 8, 0.0, 42);
    let half = |r: std::ops::Range<usize>| {
        let rows: Vec<Vec<f64>> = r.map(|i| pool.matrix.row(i).iter().copied().collect()).collect();
        FeatureSet::new(&rows, "test").unwrap()
    };
    let kid = kernel_distance(&half(0..n), &half(n..2 * n)).unwrap();
    assert!(kid.abs() <= 3.0 / (n as f64).sqrt(), "{kid}");
    let shifted = standard_normal_set(n, 8, 2.0, 43);
    assert!(kernel_distance(&half(0..n), &shifted).unwrap() > kid.abs());
}

#[test]
fn distances_grow_with_mean_shift() {
    let base = gaussian_set(40, 4, 0.0, 9);
    let mut last = (-1.0, -1.0, -1.0);
    for shift in [0.0, 0.5, 1.0, 2.0] {
        let other = gaussian_set(40, 4, shift, 10);
        let now = (
            frechet_distance(&base, &other).unwrap(),
            kernel_distance(&base, &other).unwrap(),
            feature_distance(&base, &other).unwrap(),
        );
        assert!(now.0 > last.0 && now.1 > last.1 && now.2 > last.2, "shift {shift}");
        last = now;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn frechet_symmetric_and_nonnegative(seed in 0u64..10_000, n in 3usize..12, f in 1usize..5, shift in -2.0f64..2.0) {
        let a = gaussian_set(n, f, 0.0, seed);
        let b = gaussian_set(n + 1, f, shift, seed ^ 0xabc);
        let (ab, ba) = (frechet_distance(&a, &b).unwrap(), frechet_distance(&b, &a).unwrap());
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab.abs()));
        let (kab, kba) = (kernel_distance(&a, &b).unwrap(), kernel_distance(&b, &a).unwrap());
        prop_assert!((kab - kba).abs() < 1e-9 * (1.0 + kab.abs()));
    }
}

fn noisy(img: &Tensor, sigma: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    img.add(&Tensor::randn(img.shape(), &mut rng).scale(sigma)).unwrap()
}

#[test]
fn perceptual_distance_axioms() {
    let net = PerceptualExtractor::random(3, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[3, 16, 16], -1.0, 1.0, &mut rng);
    assert_eq!(perceptual_distance(&net, &x, &x).unwrap(), 0.0);
    assert_eq!(perceptual_distance(&net, &x, &y).unwrap(), perceptual_distance(&net, &y, &x).unwrap());
    let ladder: Vec<f64> = [0.05, 0.2, 0.5, 1.0].iter().map(|&s| perceptual_distance(&net, &x, &noisy(&x, s, 13)).unwrap()).collect();
    assert!(ladder.windows(2).all(|w| w[0] < w[1]), "{ladder:?}");
    assert_eq!(perceptual_pair_distance(&net, &[x.clone()], &[x], 4, 0).unwrap(), 0.0);
}

fn square_scene(size: usize, class: u8, color: [f64; 3], rng: &mut ChaCha8Rng) -> Segmented {
    let mut map = ClassMap::filled(size, size, 0);
    let mut image = Tensor::full(&[3, size, size], -0.8);
    let side = rng.random_range(10..16);
    let (y0, x0) = (rng.random_range(0..size - side), rng.random_range(0..size - side));
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            map.set(y, x, class);
            for (c, v) in color.iter().enumerate() {
                image.data_mut()[(c * size + y) * size + x] = v + rng.random_range(-0.05..0.05);
            }
        }
    }
    Segmented { image, class_map: map }
}

#[test]
fn semantic_fid_separates_changed_class() {
    let ext = RandomConvExtractor::new(21, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (red, blue, green) = ([0.9, -0.6, -0.6], [-0.6, -0.6, 0.9], [-0.6, 0.9, -0.6]);
    let mut real = Vec::new();
    let mut generated = Vec::new();
    for _ in 0..6 {
        real.push(square_scene(32, 1, red, &mut rng));
        real.push(square_scene(32, 2, blue, &mut rng));
        generated.push(square_scene(32, 1, green, &mut rng));
        generated.push(square_scene(32, 2, blue, &mut rng));
    }
    let s = semantic_fid(&real, &generated, 4, &ext).unwrap();
    assert!(s.per_class[&1] > s.per_class[&2], "{:?}", s.per_class);
    assert_eq!(s.skipped, [3]);
    assert_eq!(s.mean, (s.per_class[&1] + s.per_class[&2]) / 2.0);

    // one crop per side is not evaluable
    let err = semantic_fid(&real[..2], &generated[..2], 3, &ext).unwrap_err();
    assert!(matches!(err, Error::NoEvaluableClass(_)));
}

#[test]
fn semantic_fid_skips_small_regions() {
    let ext = RandomConvExtractor::new(21, 16);
    let tiny = |v: u8| {
        let mut m = ClassMap::filled(16, 16, 0);
        for y in 0..7 {
            for x in 0..16 {
                m.set(y, x, v);
            }
        }
        Segmented { image: Tensor::zeros(&[3, 16, 16]), class_map: m }
    };
    let set = vec![tiny(1), tiny(1), tiny(1)];
    assert!(matches!(semantic_fid(&set, &set, 2, &ext), Err(Error::NoEvaluableClass(_))));
}

#[test]
fn ppv_hand_enumerated() {
    let q = vec![
        ConditionVector::from_classes(4, [1]).unwrap(),
        ConditionVector::from_classes(4, [2, 3]).unwrap(),
    ];
    let mut a = ClassMap::filled(4, 4, 0);
    a.set(0, 0, 1);
    let mut b = ClassMap::filled(4, 4, 0);
    b.set(0, 0, 2);
    b.set(0, 1, 1);
    let maps = vec![a, b];
    assert_eq!(ppv(&q, &maps, 0.05).unwrap(), 2.0 / 3.0);
    assert_eq!(ppv_strict(&q, &maps, 0.05).unwrap(), 2.0 / 3.0);
}

#[test]
fn co_occurrence_diagonal_is_single_class_ppv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut q = Vec::new();
    let mut maps = Vec::new();
    for _ in 0..30 {
        let k = rng.random_range(1..4usize);
        q.push(ConditionVector::from_classes(4, [k]).unwrap());
        let mut m = ClassMap::filled(4, 4, 0);
        for c in 1..4u8 {
            if rng.random_bool(0.5) {
                m.set(usize::from(c), 0, c);
            }
        }
        maps.push(m);
    }
    let co = co_occurrence(&q, &maps, 4, 0.05).unwrap();
    for k in 1..4 {
        let idx: Vec<usize> = (0..q.len()).filter(|&i| q[i].is_set(k)).collect();
        let sq: Vec<_> = idx.iter().map(|&i| q[i].clone()).collect();
        let sm: Vec<_> = idx.iter().map(|&i| maps[i].clone()).collect();
        assert_eq!(co.matrix[k][k], ppv(&sq, &sm, 0.05).unwrap());
    }
}

#[test]
fn evaluate_reports_notices_without_masks() {
    let ext = RandomConvExtractor::new(1, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let item = |rng: &mut ChaCha8Rng| EvalItem { image: Tensor::uniform(&[3, 20, 20], -1.0, 1.0, rng), class_map: None, query: None };
    let real: Vec<_> = (0..4).map(|_| item(&mut rng)).collect();
    let generated: Vec<_> = (0..4).map(|_| item(&mut rng)).collect();
    let names: Vec<String> = ["bg", "a"].iter().map(|s| s.to_string()).collect();
    let (r, co) = evaluate(&real, &generated, &names, &ext, 0.01, 0).unwrap();
    assert!(r.fid >= 0.0 && r.kid >= 0.0 && r.perc_dist > 0.0);
    assert!(r.sfid_mean.is_none() && r.ppv.is_none() && co.is_none());
    assert_eq!(r.notices.len(), 2);
}

#[test]
fn kernel_split_half_on_extracted_features() {
    let data = cosimgen_core::synthetic::shapes_dataset(256, 32, 77).unwrap();
    let ext = RandomConvExtractor::new(3, 32);
    let images: Vec<Tensor> = data.samples.iter().map(|s| s.image.clone()).collect();
    let n = images.len() / 2;
    let (a, b) = (featurize(&ext, &images[..n]).unwrap(), featurize(&ext, &images[n..]).unwrap());
    let kid = kernel_distance(&a, &b).unwrap();
    eprintln!("extracted split-half kid {kid}");
    assert!(kid.abs() <= 3.0 / (n as f64).sqrt(), "{kid}");
}
