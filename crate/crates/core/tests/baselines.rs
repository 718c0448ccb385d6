use erpdeck::baselines::*;
use erpdeck::metrics::{auc, decide_command, CommandScore};
use erpdeck::sigproc::EpochTensor;
use erpdeck::tensorkit::SymmetricMatrix;
use erpdeck::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

fn gauss(r: &mut Xoshiro256PlusPlus) -> f64 {
    r.sample(StandardNormal)
}

/// Two Gaussian blobs with unit covariance, class means `0` and `shift`.
fn blobs(n_per: usize, d: usize, shift: f64, seed: u64) -> (DMatrix<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let labels: Vec<u8> = (0..2 * n_per).map(|i| u8::from(i % 2 == 1)).collect();
    let x = DMatrix::from_fn(2 * n_per, d, |i, _| gauss(&mut r) + shift * f64::from(labels[i]));
    (x, labels)
}

fn training_auc(s: &LinearScorer, x: &DMatrix<f64>, labels: &[u8]) -> f64 {
    auc(&s.decision(x).unwrap(), labels).unwrap()
}

#[test]
fn shrinkage_lda_separates_blobs() {
    let (x, y) = blobs(100, 4, 3.0, 1);
    let s = fit_shrinkage_lda(&x, &y).unwrap();
    assert_eq!(s.weights.len(), 4);
    assert!(training_auc(&s, &x, &y) > 0.99);
}

#[test]
fn full_shrinkage_gives_mean_difference_direction() {
    let (x, y) = blobs(50, 5, 1.0, 2);
    let (s, gamma) = fit_lda(&x, &y, Shrinkage::Fixed(1.0)).unwrap();
    assert_eq!(gamma, 1.0);
    let mean = |l: u8| {
        let rows: Vec<_> = (0..x.nrows()).filter(|&i| y[i] == l).collect();
        rows.iter().fold(DVector::zeros(5), |a, &i| a + x.row(i).transpose()) / rows.len() as f64
    };
    let diff = mean(1) - mean(0);
    let w = DVector::from_vec(s.weights.clone());
    let cos = w.dot(&diff) / (w.norm() * diff.norm());
    assert!((cos - 1.0).abs() < 1e-12, "{cos}");
}

#[test]
fn shrinkage_lda_finite_when_fewer_samples_than_features() {
    let (x, y) = blobs(5, 40, 0.5, 3);
    let (s, gamma) = fit_lda(&x, &y, Shrinkage::LedoitWolf).unwrap();
    assert!(gamma > 0.0);
    assert!(s.weights.iter().all(|w| w.is_finite()));
}

#[test]
fn unshrunk_lda_matches_plain_solve() {
    let (x, y) = blobs(200, 6, 1.0, 4);
    let (s, _) = fit_lda(&x, &y, Shrinkage::Fixed(0.0)).unwrap();
    let n = x.nrows() as f64;
    let mean = |l: u8| {
        let rows: Vec<_> = (0..x.nrows()).filter(|&i| y[i] == l).collect();
        rows.iter().fold(DVector::zeros(6), |a, &i| a + x.row(i).transpose()) / rows.len() as f64
    };
    let (m0, m1) = (mean(0), mean(1));
    let mut cov = DMatrix::zeros(6, 6);
    for i in 0..x.nrows() {
        let d = x.row(i).transpose() - if y[i] == 1 { &m1 } else { &m0 };
        cov += &d * d.transpose();
    }
    let w = (cov / n).lu().solve(&(&m1 - &m0)).unwrap();
    for (a, b) in s.weights.iter().zip(w.iter()) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
    let b = -w.dot(&(&m0 + &m1)) / 2.0;
    assert!((s.bias - b).abs() < 1e-8);
}

#[test]
fn single_class_is_degenerate() {
    let x = DMatrix::from_element(6, 3, 1.0);
    let y = vec![1u8; 6];
    assert!(matches!(fit_shrinkage_lda(&x, &y), Err(Error::DegenerateLabels(_))));
    assert!(matches!(fit_swlda(&x, &y, &SwldaOptions::default()), Err(Error::DegenerateLabels(_))));
    assert!(matches!(fit_blda(&x, &y, &BldaOptions::default()), Err(Error::DegenerateLabels(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn ledoit_wolf_intensity_in_unit_interval(seed in any::<u64>(), n in 3usize..40, d in 1usize..12) {
        let mut r = rng(seed);
        let z = DMatrix::from_fn(n, d, |_, j| gauss(&mut r) * (1.0 + j as f64));
        let s = z.transpose() * &z / n as f64;
        let g = ledoit_wolf_gamma(&z, &s);
        prop_assert!((0.0..=1.0).contains(&g));
    }

    #[test]
    fn positive_affine_score_maps_keep_the_decision(
        scores in prop::collection::vec(-5.0f64..5.0, 9),
        a in 0.01f64..100.0,
        b in -10.0f64..10.0,
    ) {
        let block = |f: &dyn Fn(f64) -> f64| -> Vec<CommandScore> {
            scores.iter().enumerate().map(|(i, &s)| CommandScore { command: i as u8 + 1, score: f(s) }).collect()
        };
        let base = decide_command(&block(&|s| s), 9).unwrap();
        prop_assert_eq!(decide_command(&block(&|s| a * s + b), 9).unwrap(), base);
        prop_assert_eq!(decide_command(&block(&|s| 1.0 / (1.0 + (-s).exp())), 9).unwrap(), base);
    }
}

/// Labels plus features where only the first three columns carry signal.
fn sparse_signal(seed: u64, n: usize, d: usize) -> (DMatrix<f64>, Vec<u8>) {
    let mut r = rng(seed);
    let y: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
    let x = DMatrix::from_fn(n, d, |i, j| {
        let s = if j < 3 { 0.6 * f64::from(y[i]) } else { 0.0 };
        gauss(&mut r) + s
    });
    (standardize(&x), y)
}

fn standardize(x: &DMatrix<f64>) -> DMatrix<f64> {
    FeatureScaler::fit(x).apply(x).unwrap()
}

#[test]
fn swlda_recovers_true_features() {
    let mut hits = 0;
    for seed in 0..100 {
        let (x, y) = sparse_signal(seed, 300, 20);
        let s = fit_swlda(&x, &y, &SwldaOptions::default()).unwrap();
        if s.weights[..3].iter().all(|&w| w != 0.0) {
            hits += 1;
        }
    }
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn swlda_unselected_weights_are_exactly_zero() {
    let (x, y) = sparse_signal(7, 300, 20);
    let s = fit_swlda(&x, &y, &SwldaOptions::default()).unwrap();
    let selected = s.weights.iter().filter(|&&w| w != 0.0).count();
    assert!(selected >= 3 && selected < 20);
    let opts = SwldaOptions {
        max_terms: 2,
        ..SwldaOptions::default()
    };
    let s = fit_swlda(&x, &y, &opts).unwrap();
    assert!(s.weights.iter().filter(|&&w| w != 0.0).count() <= 3);
}

#[test]
fn swlda_pure_noise_mostly_empty() {
    // Two independent noise columns enter with probability about
    // 1 − 0.9² = 0.19 per fit.
    let mut empty = 0;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let y: Vec<u8> = (0..200).map(|_| u8::from(r.random_bool(0.5))).collect();
        let x = standardize(&DMatrix::from_fn(200, 2, |_, _| gauss(&mut r)));
        if y.iter().all(|&l| l == y[0]) {
            continue;
        }
        match fit_swlda(&x, &y, &SwldaOptions::default()) {
            Err(Error::EmptyModel) => empty += 1,
            Ok(_) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(empty >= 70, "{empty}/100");
}

#[test]
fn swlda_selects_one_of_duplicate_columns() {
    for seed in 0..10 {
        let (x, y) = sparse_signal(seed, 200, 5);
        let mut dup = DMatrix::zeros(200, 6);
        dup.columns_mut(0, 5).copy_from(&x);
        dup.set_column(5, &x.column(0));
        let s = fit_swlda(&dup, &y, &SwldaOptions::default()).unwrap();
        assert!(!(s.weights[0] != 0.0 && s.weights[5] != 0.0), "{:?}", s.weights);
    }
}

#[test]
fn blda_noise_precision_grows_on_noiseless_targets() {
    let mut r = rng(11);
    let x = DMatrix::from_fn(100, 5, |_, _| gauss(&mut r));
    let w = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
    let t: Vec<f64> = (&x * &w).iter().map(|v| v + 0.7).collect();
    let opts = BldaOptions {
        max_iter: 30,
        ..BldaOptions::default()
    };
    let fit = blda_regression(&x, &t, &opts).unwrap();
    assert!(fit.beta_trace.len() >= 3);
    assert!(fit.converged);
    for pair in fit.beta_trace.windows(2) {
        assert!(pair[1] >= pair[0], "{:?}", fit.beta_trace);
    }
    for (a, b) in fit.scorer.weights.iter().zip(w.iter()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn blda_huge_prior_precision_kills_weights() {
    let (x, y) = blobs(50, 4, 2.0, 12);
    let opts = BldaOptions {
        fixed_alpha: Some(1e15),
        ..BldaOptions::default()
    };
    let fit = fit_blda(&x, &y, &opts).unwrap();
    assert!(fit.scorer.weights.iter().all(|w| w.abs() < 1e-9), "{:?}", fit.scorer.weights);
}

#[test]
fn blda_separates_blobs_and_converges() {
    let (x, y) = blobs(100, 6, 3.0, 13);
    let fit = fit_blda(&x, &y, &BldaOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.iterations < 500);
    assert!(training_auc(&fit.scorer, &x, &y) > 0.99);
}

#[test]
fn elastic_net_without_penalty_is_least_squares() {
    let mut r = rng(14);
    let x = DMatrix::from_fn(200, 5, |_, _| gauss(&mut r));
    let t: Vec<f64> = (0..200).map(|i| 2.0 * x[(i, 0)] - x[(i, 3)] + 0.5 + 0.3 * gauss(&mut r)).collect();
    let opts = ElasticNetOptions {
        alpha: 0.0,
        ..ElasticNetOptions::default()
    };
    let en = fit_elastic_net(&x, &t, &opts).unwrap();
    let mut a = DMatrix::from_element(200, 6, 1.0);
    a.columns_mut(1, 5).copy_from(&x);
    let coef = (a.transpose() * &a)
        .cholesky()
        .unwrap()
        .solve(&(a.transpose() * DVector::from_vec(t)));
    assert!((en.bias - coef[0]).abs() < 1e-6);
    for j in 0..5 {
        assert!((en.weights[j] - coef[j + 1]).abs() < 1e-6, "{j}");
    }
}

#[test]
fn lasso_with_large_penalty_is_all_zero() {
    let (x, y) = blobs(50, 4, 1.0, 15);
    let t: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let opts = ElasticNetOptions {
        alpha: 100.0,
        l1_ratio: 1.0,
        ..ElasticNetOptions::default()
    };
    let en = fit_elastic_net(&x, &t, &opts).unwrap();
    assert!(en.weights.iter().all(|&w| w == 0.0));
}

#[test]
fn both_heads_separate_blobs() {
    let (x, y) = blobs(100, 8, 3.0, 16);
    let t: Vec<f64> = y.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let en = fit_elastic_net(&x, &t, &ElasticNetOptions::default()).unwrap();
    assert!(training_auc(&en, &x, &y) > 0.99);
    let svm = fit_linear_svm(&x, &y, &SvmOptions::default()).unwrap();
    assert!(training_auc(&svm, &x, &y) > 0.99);
}

/// Rank-one planted response `pattern · waveform` on target trials plus
/// white noise.
fn planted(seed: u64, channels: usize, samples: usize, trials: usize, pattern: &[f64]) -> EpochTensor {
    let mut r = rng(seed);
    let waveform: Vec<f64> = (0..samples)
        .map(|t| {
            let u = (t as f64 - samples as f64 / 2.0) / (samples as f64 / 10.0);
            3.0 * (-u * u).exp()
        })
        .collect();
    let labels: Vec<u8> = (0..trials).map(|i| u8::from(i % 4 == 0)).collect();
    let mut data = Vec::with_capacity(trials * channels * samples);
    for &l in &labels {
        for &p in pattern.iter().take(channels) {
            for &w in &waveform {
                data.push(gauss(&mut r) + f64::from(l) * p * w);
            }
        }
    }
    EpochTensor {
        n_trials: trials,
        n_channels: channels,
        n_samples: samples,
        data,
        labels,
        command_codes: (0..trials).map(|i| (i % 9) as u8 + 1).collect(),
        blocks: (0..trials).map(|i| i / 9).collect(),
        fs: 100.0,
        t0_ms: 0.0,
        channels: (0..channels).map(|c| format!("ch{c}")).collect(),
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

#[test]
fn xdawn_first_target_filter_aligns_with_planted_pattern() {
    let pattern = unit(&[1.0, 0.5, -0.3, 0.8, 0.0, -1.0, 0.2, 0.4]);
    let e = planted(20, 8, 60, 400, &pattern);
    let xd = fit_xdawn(&e, 4).unwrap();
    assert_eq!(xd.filters.len(), 8);
    let w = unit(&xd.filters[4]);
    let cos: f64 = w.iter().zip(&pattern).map(|(a, b)| a * b).sum();
    assert!(cos.abs() > 0.95, "{cos}");
}

#[test]
fn xdawn_eigen_residuals_and_noise_orthonormality() {
    let pattern = unit(&[0.3, -0.7, 1.0, 0.1, 0.5, 0.0]);
    let e = planted(21, 6, 50, 300, &pattern);
    let xd = fit_xdawn(&e, 3).unwrap();
    let noise = noise_covariance(&e);
    for (class, label) in [0u8, 1].into_iter().enumerate() {
        let p = class_average(&e, label).unwrap();
        let signal = &p * p.transpose() / e.n_samples as f64;
        let rows = &xd.filters[class * 3..(class + 1) * 3];
        for (k, v) in rows.iter().enumerate() {
            let lambda = xd.eigenvalues[class * 3 + k];
            assert!(gen_eig_residual(&signal, noise.matrix(), v, lambda) < 1e-8);
        }
        let w = DMatrix::from_fn(3, 6, |r, c| rows[r][c]);
        let gram = &w * noise.matrix() * w.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-6);
    }
}

/// Fraction of a response's energy inside `window`.
fn window_energy_ratio(rows: &[Vec<f64>], window: std::ops::Range<usize>) -> f64 {
    let total: f64 = rows.iter().flatten().map(|v| v * v).sum();
    let inside: f64 = rows.iter().map(|r| r[window.clone()].iter().map(|v| v * v).sum::<f64>()).sum();
    inside / total
}

#[test]
fn xdawn_filtered_prototype_concentrates_energy() {
    let pattern = unit(&[1.0, 1.0, 0.5, 0.0, -0.5, 0.2]);
    let e = planted(22, 6, 60, 200, &pattern);
    let xd = fit_xdawn(&e, 1).unwrap();
    let p = class_average(&e, 1).unwrap();
    let raw: Vec<Vec<f64>> = p.row_iter().map(|r| r.iter().copied().collect()).collect();
    let window = 24..36;
    let before = window_energy_ratio(&raw, window.clone());
    let after = window_energy_ratio(&xd.prototypes[1..2], window);
    assert!(after > before, "{after} vs {before}");
}

#[test]
fn xdawn_square_filter_matrix_is_invertible() {
    let pattern = unit(&[1.0, 0.2, -0.4, 0.6]);
    let e = planted(23, 4, 40, 200, &pattern);
    let xd = fit_xdawn(&e, 4).unwrap();
    let w = DMatrix::from_fn(4, 4, |r, c| xd.filters[4 + r][c]);
    assert!(w.determinant().abs() > 1e-12);
}

#[test]
fn xdawn_without_targets_is_degenerate() {
    let mut e = planted(24, 4, 40, 40, &[1.0, 0.0, 0.0, 0.0]);
    e.labels.iter_mut().for_each(|l| *l = 0);
    assert!(matches!(fit_xdawn(&e, 2), Err(Error::DegenerateLabels(_))));
}

fn random_spd(r: &mut Xoshiro256PlusPlus, m: usize) -> SymmetricMatrix {
    let a = DMatrix::from_fn(m, m + 3, |_, _| gauss(r));
    SymmetricMatrix::symmetrize(&a * a.transpose() / (m + 3) as f64 + DMatrix::identity(m, m) * 0.1)
}

/// Symmetric perturbation `G^{1/2} expm(εH) G^{1/2}` computed with nalgebra.
fn near(g: &SymmetricMatrix, r: &mut Xoshiro256PlusPlus, eps: f64) -> SymmetricMatrix {
    let m = g.n();
    let h = DMatrix::from_fn(m, m, |_, _| gauss(r));
    let h = (&h + h.transpose()) * (eps / 2.0);
    let eh = h.symmetric_eigen();
    let exp = &eh.eigenvectors * DMatrix::from_diagonal(&eh.eigenvalues.map(f64::exp)) * eh.eigenvectors.transpose();
    let eg = g.matrix().clone().symmetric_eigen();
    let half = &eg.eigenvectors * DMatrix::from_diagonal(&eg.eigenvalues.map(f64::sqrt)) * eg.eigenvectors.transpose();
    SymmetricMatrix::symmetrize(&half * exp * &half)
}

/// Affine-invariant distance from the eigenvalues of `L⁻¹ B L⁻ᵀ`, `A = LLᵀ`.
fn airm_distance(a: &SymmetricMatrix, b: &SymmetricMatrix) -> f64 {
    let l = a.matrix().clone().cholesky().unwrap().l();
    let li = l.try_inverse().unwrap();
    let c = &li * b.matrix() * li.transpose();
    let c = (&c + c.transpose()) / 2.0;
    c.symmetric_eigen().eigenvalues.iter().map(|v| v.ln().powi(2)).sum::<f64>().sqrt()
}

#[test]
fn tangent_vector_of_the_reference_is_zero() {
    let mut r = rng(30);
    let g = random_spd(&mut r, 5);
    for metric in [TangentMetric::Riemann, TangentMetric::LogEuclidean] {
        let ts = TangentSpace::new(metric, &g);
        let v = ts.transform(std::slice::from_ref(&g)).unwrap();
        assert_eq!(v.ncols(), 15);
        assert!(v.amax() < 1e-9, "{metric:?} {}", v.amax());
    }
}

#[test]
fn tangent_vector_length_is_triangular_number() {
    let mut r = rng(31);
    for m in 1..7 {
        let g = random_spd(&mut r, m);
        let ts = TangentSpace::new(TangentMetric::Riemann, &g);
        assert_eq!(ts.transform(&[g.clone()]).unwrap().ncols(), m * (m + 1) / 2);
        assert_eq!(upper_vec(g.matrix()).len(), m * (m + 1) / 2);
    }
}

#[test]
fn tangent_distances_approximate_geodesic_distance_near_reference() {
    let mut r = rng(32);
    for _ in 0..20 {
        let g = random_spd(&mut r, 4);
        let (a, b) = (near(&g, &mut r, 0.05), near(&g, &mut r, 0.05));
        let ts = TangentSpace::new(TangentMetric::Riemann, &g);
        let v = ts.transform(&[a.clone(), b.clone()]).unwrap();
        let d_ts = (v.row(0) - v.row(1)).norm();
        let d = airm_distance(&a, &b);
        assert!((d_ts - d).abs() < 0.05 * d, "{d_ts} vs {d}");
    }
}

#[test]
fn riemann_mean_of_commuting_matrices_is_geometric_mean() {
    let a = SymmetricMatrix::from_diagonal(&[1.0, 4.0]);
    let b = SymmetricMatrix::from_diagonal(&[4.0, 1.0]);
    let g = riemann_mean(&[a, b]).unwrap();
    assert!((g.matrix() - DMatrix::identity(2, 2) * 2.0).amax() < 1e-9);
}

#[test]
fn normalizers() {
    let x = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 1.0, 0.0, 0.0, 0.0]);
    let l1 = Normalizer::L1.apply(&x).unwrap();
    assert_eq!(l1.row(0).iter().map(|v| v.abs()).sum::<f64>(), 1.0);
    assert_eq!(l1.row(1).sum(), 0.0);
    let z = Normalizer::fit_zscore(&x).apply(&x).unwrap();
    for c in z.column_iter() {
        assert!(c.sum().abs() < 1e-12);
    }
}

#[test]
fn classical_pipelines_fit_score_and_round_trip() {
    let pattern = unit(&[1.0, 0.5, 0.0, -0.5, 0.3, 0.8]);
    let train = planted(40, 6, 48, 360, &pattern);
    let test = planted(41, 6, 48, 180, &pattern);
    let dir = tempfile::tempdir().unwrap();
    for name in CLASSICAL_PIPELINES {
        let p = fit_pipeline(name, &train, &BaselineConfig::default()).unwrap();
        let s = p.scores(&test).unwrap();
        assert_eq!(s.len(), 180);
        let a = auc(&s, &test.labels).unwrap();
        assert!(a > 0.9, "{name}: {a}");
        let path = save_scorer(&p, &dir.path().join(name)).unwrap();
        assert!(path.to_string_lossy().ends_with(&format!("{name}.scorer.json")));
        let back = load_scorer(&path).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.scores(&test).unwrap(), s);
    }
    assert!(fit_pipeline("nope", &train, &BaselineConfig::default()).is_err());
}
