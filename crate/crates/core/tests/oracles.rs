//! Library results against small, independently written reference
//! implementations.

mod common;

use common::*;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use redcast::cluster::{build_mst, core_distances, silhouette};
use redcast::dimred::{fit_pca, trustworthiness, Projection};
use redcast::features::{chi2_2x2, chi2_scores, f_regression_scores, FeatureTable};
use redcast::forecast::{martingale_forecast, GpHyper, GpModel};
use redcast::ingest::{DailySeries, DateRange};
use redcast::stats::{build_error_distribution, rmse, significance, z_test, ErrorDistribution, ErrorKind, ZDenominator};

#[test]
fn pca_matches_closed_form_2x2() {
    for seed in 0..5 {
        let z = gaussian(40, 2, seed);
        // correlated, anisotropic cloud
        let x = Array2::from_shape_fn((40, 2), |(i, j)| if j == 0 { 3.0 * z[[i, 0]] } else { z[[i, 0]] + 0.5 * z[[i, 1]] });
        let n = x.nrows() as f64;
        let (m0, m1) = (x.column(0).sum() / n, x.column(1).sum() / n);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        for r in x.rows() {
            let (u, v) = (r[0] - m0, r[1] - m1);
            a += u * u;
            b += u * v;
            c += v * v;
        }
        let (a, b, c) = (a / (n - 1.0), b / (n - 1.0), c / (n - 1.0));
        let lam = (a + c) / 2.0 + (((a - c) / 2.0).powi(2) + b * b).sqrt();
        let (vx, vy) = (b, lam - a);
        let norm = (vx * vx + vy * vy).sqrt();
        let Projection::Pca(p) = fit_pca(x.view(), 1).unwrap() else { panic!("pca") };
        assert!((p.explained_variance[0] - lam).abs() < 1e-8);
        let dot = (p.components[[0, 0]] * vx + p.components[[0, 1]] * vy) / norm;
        assert!((dot.abs() - 1.0).abs() < 1e-8, "component misaligned: {dot}");
    }
}

#[test]
fn mst_weight_matches_kruskal() {
    for seed in 0..10 {
        let x = gaussian(15, 3, seed);
        for min_samples in [1, 3, 5] {
            let core = core_distances(x.view(), min_samples).unwrap();
            let mst = build_mst(x.view(), &core);
            assert_eq!(mst.len(), 14);
            let total: f64 = mst.iter().map(|e| e.weight).sum();
            let oracle = kruskal_weight(&x, &core);
            assert!((total - oracle).abs() < 1e-12, "seed {seed}: {total} vs {oracle}");
        }
    }
}

#[test]
fn core_distance_is_kth_neighbour() {
    let x = gaussian(20, 2, 3);
    let core = core_distances(x.view(), 4).unwrap();
    for i in 0..20 {
        let mut d: Vec<f64> = (0..20)
            .filter(|&j| j != i)
            .map(|j| dist(x.row(i).as_slice().unwrap(), x.row(j).as_slice().unwrap()))
            .collect();
        d.sort_by(f64::total_cmp);
        assert_eq!(core[i], d[3]);
    }
}

#[test]
fn silhouette_matches_textbook() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let x = gaussian(60, 4, seed);
        let labels: Vec<i32> = (0..60).map(|_| rng.random_range(-1..4)).collect();
        let got = silhouette(x.view(), &labels).unwrap();
        let want = silhouette_oracle(&x, &labels);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn f_regression_p_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for n in [8usize, 25, 60] {
        let y: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
        let cols = Array2::from_shape_fn((n, 4), |(i, j)| j as f64 * 0.3 * y[i] + noise.sample(&mut rng));
        let table = FeatureTable::new("R", day(2020, 1, 1), (0..4).map(|j| format!("x{j}")).collect(), cols).unwrap();
        for (s, _) in f_regression_scores(&table, &y).unwrap() {
            let want = f_tail_quadrature(s.score, (n - 2) as f64);
            assert!((s.p_value - want).abs() < 1e-6, "n={n} F={}: {} vs {want}", s.score, s.p_value);
        }
    }
}

#[test]
fn chi2_matches_hand_tables() {
    // n (ad - bc)^2 / ((a+b)(c+d)(a+c)(b+d)), worked by hand
    assert_eq!(chi2_2x2(10.0, 20.0, 30.0, 40.0), 100.0 * 40_000.0 / 5_040_000.0);
    assert_eq!(chi2_2x2(5.0, 5.0, 5.0, 5.0), 0.0);
    assert_eq!(chi2_2x2(8.0, 2.0, 2.0, 8.0), 20.0 * 3600.0 / 10_000.0);
    assert_eq!(chi2_2x2(0.0, 4.0, 0.0, 6.0), 0.0);

    // one feature, two classes of 2 rows each: class sums 6 and 2 against
    // expected 4 and 4 give (2^2 + 2^2) / 4 = 2
    let t = FeatureTable::new("R", day(2020, 1, 1), vec!["f".into()], array![[1.0], [5.0], [2.0], [0.0]]).unwrap();
    let s = chi2_scores(&t, &[1, 1, 0, 0]).unwrap();
    assert_eq!(s[0].score, 2.0);
}

#[test]
fn chi2_matches_sklearn_fixture() {
    // sklearn.feature_selection.chi2 on the same table
    let x = array![[1., 2., 0.], [0., 1., 3.], [4., 0., 1.], [2., 2., 2.], [0., 5., 1.], [3., 1., 0.]];
    let t = FeatureTable::new("R", day(2020, 1, 1), vec!["a".into(), "b".into(), "c".into()], x).unwrap();
    let got = chi2_scores(&t, &[0, 1, 0, 1, 1, 0]).unwrap();
    let scores = [3.6, 2.272727272727273, 3.5714285714285716];
    let p = [0.05777957112359715, 0.13166801602281455, 0.05878172135535891];
    for (g, (s, p)) in got.iter().zip(scores.iter().zip(p)) {
        assert!((g.score - s).abs() < 1e-12);
        assert!((g.p_value - p).abs() < 1e-9);
    }
}

#[test]
fn trustworthiness_matches_definition() {
    for seed in 0..3 {
        let x = gaussian(40, 6, seed);
        let y = gaussian(40, 2, seed + 100);
        let got = trustworthiness(x.view(), y.view(), 5).unwrap();
        assert!((got - trust_oracle(&x, &y, 5)).abs() < 1e-12);
        let ident = trustworthiness(x.view(), x.view(), 5).unwrap();
        assert!((ident - 1.0).abs() < 1e-12);
    }
}

#[test]
fn alignment_matches_naive_fill() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let len = rng.random_range(5..40);
        let values: Vec<f64> = (0..len)
            .map(|i| if rng.random_bool(0.3) { f64::NAN } else { i as f64 + 0.5 })
            .collect();
        if values.iter().all(|v| v.is_nan()) {
            continue;
        }
        let s = DailySeries::new("R", "s", day(2020, 1, 10), values.clone());
        let range = DateRange::new(day(2020, 1, 10), day(2020, 1, 9) + chrono::Duration::days(len as i64)).unwrap();
        let got = s.aligned(&range).unwrap();
        let first = values.iter().copied().find(|v| !v.is_nan()).unwrap();
        let mut want = Vec::new();
        let mut last = first;
        for v in &values {
            if !v.is_nan() {
                last = *v;
            }
            want.push(last);
        }
        assert_eq!(got.values, want);
    }
}

#[test]
fn gp_mean_matches_naive_inverse() {
    let x: Vec<Vec<f64>> = [0.0, 0.7, 1.1, 2.3, 3.0].iter().map(|&v| vec![v, (v * 1.3f64).sin()]).collect();
    let y = vec![0.3, -0.2, 0.8, 0.1, -0.5];
    let h = GpHyper {
        signal_var: 1.4,
        lengthscale: 0.9,
        noise_var: 0.05,
    };
    let gp = GpModel::fit_fixed(&x, &y, h).unwrap();
    let k: Vec<Vec<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, a)| x.iter().enumerate().map(|(j, b)| rbf_oracle(a, b, &h) + if i == j { h.noise_var } else { 0.0 }).collect())
        .collect();
    let kinv = invert(k);
    let w: Vec<f64> = (0..5).map(|i| (0..5).map(|j| kinv[i][j] * y[j]).sum()).collect();
    let queries: Vec<Vec<f64>> = [-0.5f64, 0.35, 1.8, 4.0].iter().map(|&v| vec![v, v.cos()]).collect();
    for (q, (mean, var)) in queries.iter().zip(gp.predict(&queries)) {
        let ks: Vec<f64> = x.iter().map(|a| rbf_oracle(a, q, &h)).collect();
        let want: f64 = ks.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((mean - want).abs() < 1e-8);
        let quad: f64 = (0..5).map(|i| (0..5).map(|j| ks[i] * kinv[i][j] * ks[j]).sum::<f64>()).sum();
        assert!((var - (h.signal_var - quad)).abs() < 1e-8);
    }
}

#[test]
fn gp_interpolates_without_noise() {
    let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.4]).collect();
    let y: Vec<f64> = x.iter().map(|v| (2.0 * v[0]).sin()).collect();
    let h = GpHyper {
        signal_var: 1.0,
        lengthscale: 0.5,
        noise_var: 0.0,
    };
    let gp = GpModel::fit_fixed(&x, &y, h).unwrap();
    for ((m, _), want) in gp.predict(&x).into_iter().zip(&y) {
        assert!((m - want).abs() < 1e-4);
    }
}

#[test]
fn martingale_rmse_on_random_walk() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let step = Normal::new(0.0, 1.0).unwrap();
    let mut level = 0.0;
    let walk: Vec<f64> = (0..200)
        .map(|_| {
            level += step.sample(&mut rng);
            level
        })
        .collect();
    let s = DailySeries::new("R", "walk", day(2020, 1, 1), walk.clone());
    for h in [1, 7, 14] {
        let f = martingale_forecast(&s, h);
        let got = rmse(&f.values[h..], &walk[h..]).unwrap();
        let sq: f64 = (h..200).map(|t| (walk[t] - walk[t - h]).powi(2)).sum();
        let want = (sq / (200 - h) as f64).sqrt();
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn worked_z_example() {
    // population mean 1.0 var 0.04, sample mean 0.5 var 0.05
    let z: f64 = 0.5 / 0.09f64.sqrt();
    assert!((z - 1.6667).abs() < 1e-4);
    let r = significance(z);
    assert!((r.p - (1.0 - phi_series(z))).abs() < 1e-10);
    assert!((r.p - 0.0478).abs() < 1e-4);
    assert_eq!(r.stars, "†");

    let pop = ErrorDistribution::from_samples(vec![0.8, 1.2]).unwrap();
    let sample = ErrorDistribution::from_samples(vec![0.5 - 0.05f64.sqrt() / 2f64.sqrt(), 0.5 + 0.05f64.sqrt() / 2f64.sqrt()]).unwrap();
    assert!((pop.variance - 0.08).abs() < 1e-12);
    let r = z_test(&pop, &sample, ZDenominator::SummedVariance).unwrap();
    assert!((r.z - 0.5 / (0.08f64 + 0.05).sqrt()).abs() < 1e-12);
}

#[test]
fn identical_samples_give_half() {
    let d = ErrorDistribution::from_samples(vec![0.1, 0.4, 0.2, 0.9]).unwrap();
    let r = z_test(&d, &d, ZDenominator::SummedVariance).unwrap();
    assert_eq!(r.z, 0.0);
    assert_eq!(r.p, 0.5);
    assert_eq!(r.stars, "");
}

#[test]
fn absolute_errors_follow_folded_normal() {
    let h = GpHyper {
        signal_var: 1.0,
        lengthscale: 1.0,
        noise_var: 0.04,
    };
    let gp = GpModel::fit_fixed(&[vec![0.0], vec![1.0]], &[0.2, -0.1], h).unwrap();
    let (mean, var) = gp.predict(&[vec![0.5]])[0];
    let actual = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = gp.draws(mean, var, 20_000, &mut rng);
    let dist = build_error_distribution(&[draws], &[actual], 20_000, ErrorKind::Absolute).unwrap();
    let (mu, sd) = (mean - actual, (var + h.noise_var).sqrt());
    let folded = sd * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * sd * sd)).exp() + mu * (1.0 - 2.0 * phi_series(-mu / sd));
    let se = (dist.variance / dist.len() as f64).sqrt();
    assert!((dist.mean - folded).abs() < 3.0 * se, "{} vs {folded} (se {se})", dist.mean);
}
