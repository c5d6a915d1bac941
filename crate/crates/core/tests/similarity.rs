mod support;

use demoe::net::{init_checkpoint, ArchConfig, Taxonomy};
use demoe::similarity::*;
use demoe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracles;

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn kernel(x: &[f64], n: usize) -> KernelMatrix {
    rbf_kernel_matrix(x, n, Bandwidth::Median).unwrap()
}

fn layer(filters: usize, width: usize, data: Vec<f64>) -> LayerWeights {
    LayerWeights {
        name: "l".into(),
        taxonomy: Taxonomy::Conv3x3,
        filters,
        width,
        data,
    }
}

#[test]
fn pearson_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(2..40);
        let a = random(&mut rng, n);
        let b = random(&mut rng, n);
        let got = pearson_filter_corr(&a, &b).unwrap();
        assert!(!got.skipped);
        assert!((got.r - oracles::pearson(&a, &b)).abs() <= 1e-9);
    }
}

#[test]
fn pearson_examples_and_errors() {
    let r = |a: &[f64], b: &[f64]| pearson_filter_corr(a, b).unwrap().r;
    assert!((r(&[1., 2., 3.], &[2., 4., 6.]) - 1.0).abs() < 1e-12);
    assert!((r(&[1., 2., 3.], &[3., 2., 1.]) + 1.0).abs() < 1e-12);
    assert_eq!(r(&[1., 0., -1., 0.], &[0., 1., 0., -1.]), 0.0);
    let flat = pearson_filter_corr(&[2., 2., 2.], &[1., 2., 3.]).unwrap();
    assert!(flat.skipped);
    assert_eq!(flat.r, 0.0);
    assert!(matches!(
        pearson_filter_corr(&[1., 2.], &[1., 2., 3.]),
        Err(Error::Shape(_))
    ));
}

#[test]
fn layer_mean_of_filter_correlations() {
    // rows correlate 1, 0.5 and 0 with the reference rows
    let a = layer(3, 4, vec![1., 2., 3., 4., 1., 0., -1., 0., 1., 0., -1., 0.]);
    let s = 3f64.sqrt();
    let b_mid: Vec<f64> = {
        // unit-variance mix of the two orthogonal centered patterns
        let u = [1., 0., -1., 0.];
        let v = [0., 1., 0., -1.];
        (0..4).map(|i| 0.5 * u[i] + 0.5 * s * v[i]).collect()
    };
    let mut b = vec![2., 4., 6., 8.];
    b.extend(&b_mid);
    b.extend([0., 1., 0., -1.]);
    let b = layer(3, 4, b);
    let c = mean_layer_corr(&a, &b).unwrap();
    assert!((c.r_mean.unwrap() - 0.5).abs() < 1e-12);
    assert_eq!(c.skipped, 0);
    let rev = mean_layer_corr(&b, &a).unwrap();
    assert_eq!(c.r_mean, rev.r_mean);
    let flat = layer(1, 3, vec![1., 1., 1.]);
    assert_eq!(mean_layer_corr(&flat, &flat).unwrap().r_mean, None);
    assert!(mean_layer_corr(&a, &flat).is_err());
}

#[test]
fn rbf_kernel_examples() {
    let sigma = 0.8;
    let x = [0.0, 0.0, sigma * 2f64.sqrt(), 0.0];
    let k = rbf_kernel_matrix(&x, 2, Bandwidth::Fixed(sigma)).unwrap();
    assert_eq!(k.at(0, 0), 1.0);
    assert_eq!(k.at(1, 1), 1.0);
    assert!((k.at(0, 1) - (-1f64).exp()).abs() < 1e-12);
    assert!(rbf_kernel_matrix(&x, 2, Bandwidth::Fixed(0.0)).is_err());
    assert!(rbf_kernel_matrix(&x, 1, Bandwidth::Median).is_err());
    let same = kernel(&[0.3; 12], 4);
    assert_eq!(same.sigma, 1.0);
    assert!(same.data.iter().all(|&v| v == 1.0));
    assert!((hsic(&same, &same).unwrap()).abs() < 1e-15);
    assert!(matches!(cka(&same, &same), Err(Error::Undefined(_))));
    assert_eq!("median".parse::<Bandwidth>().unwrap(), Bandwidth::Median);
    assert_eq!("0.5".parse::<Bandwidth>().unwrap(), Bandwidth::Fixed(0.5));
    assert!("wide".parse::<Bandwidth>().is_err());
    assert!("-1".parse::<Bandwidth>().is_err());
}

#[test]
fn cka_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.gen_range(3..12);
        let p = rng.gen_range(1..10);
        let x = random(&mut rng, n * p);
        let y = random(&mut rng, n * p);
        let got = cka(&kernel(&x, n), &kernel(&y, n)).unwrap();
        let want = oracles::cka(&x, &y, n);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        assert!((-1e-6..=1.0 + 1e-6).contains(&got));
        let k = kernel(&x, n);
        let want_h = oracles::hsic(
            &(0..n).map(|i| (0..n).map(|j| k.at(i, j)).collect()).collect::<Vec<_>>(),
            &(0..n).map(|i| (0..n).map(|j| k.at(i, j)).collect()).collect::<Vec<_>>(),
        );
        assert!((hsic(&k, &k).unwrap() - want_h).abs() <= 1e-9);
    }
}

fn permute_columns(x: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    let p = perm.len();
    (0..n).flat_map(|i| perm.iter().map(move |&j| x[i * p + j])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_affine_and_sign(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 9);
        let b = random(&mut rng, 9);
        let r = pearson_filter_corr(&a, &b).unwrap().r;
        let moved: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        let flipped: Vec<f64> = b.iter().map(|v| -v).collect();
        prop_assert!((pearson_filter_corr(&moved, &b).unwrap().r - r).abs() <= 1e-9);
        prop_assert!((pearson_filter_corr(&a, &flipped).unwrap().r + r).abs() <= 1e-12);
        prop_assert_eq!(pearson_filter_corr(&b, &a).unwrap().r, r);
    }

    #[test]
    fn cka_scale_and_permutation_invariant(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (rng.gen_range(3..10), rng.gen_range(2..8));
        let x = random(&mut rng, n * p);
        let y = random(&mut rng, n * p);
        let base = cka(&kernel(&x, n), &kernel(&y, n)).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
        prop_assert!((cka(&kernel(&xs, n), &kernel(&y, n)).unwrap() - base).abs() <= 1e-9);
        let mut perm: Vec<usize> = (0..p).collect();
        perm.rotate_left(1);
        perm.swap(0, p - 1);
        let xp = permute_columns(&x, n, &perm);
        let (k, kp) = (kernel(&x, n), kernel(&xp, n));
        for (u, v) in k.data.iter().zip(&kp.data) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
        prop_assert!((cka(&kp, &kernel(&y, n)).unwrap() - base).abs() <= 1e-9);
        prop_assert!((cka(&kernel(&y, n), &kernel(&x, n)).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn hsic_fast_path_matches_naive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (rng.gen_range(2..16), rng.gen_range(1..6));
        let k = kernel(&random(&mut rng, n * p), n);
        let l = kernel(&random(&mut rng, n * p), n);
        let fast = hsic(&k, &l).unwrap();
        prop_assert!((fast - hsic_naive(&k, &l).unwrap()).abs() <= 1e-9);
        prop_assert!((fast - hsic(&l, &k).unwrap()).abs() <= 1e-12);
        prop_assert!(hsic(&k, &k).unwrap() >= -1e-12);
    }
}

#[test]
fn hsic_dimension_mismatch() {
    let k = kernel(&[0., 1., 2.], 3);
    let l = kernel(&[0., 1.], 2);
    assert!(hsic(&k, &l).is_err());
}

#[test]
fn self_report_is_exact() {
    let ck = init_checkpoint(&ArchConfig::toy(), 4).unwrap();
    let rep = similarity_report(&ck, &ck, &ReportConfig::default()).unwrap();
    assert!(!rep.layers.is_empty());
    for l in &rep.layers {
        if let Some(r) = l.r {
            assert!((r - 1.0).abs() <= 1e-12, "{}: R {r}", l.name);
        }
        if let Some(c) = l.cka {
            assert!((c - 1.0).abs() <= 1e-9, "{}: CKA {c}", l.name);
        }
    }
    assert_eq!(rep.groups.len(), 4);
    assert!(rep.groups.iter().all(|g| g.layers > 0));
}

#[test]
fn independent_seeds_are_uncorrelated() {
    let a = init_checkpoint(&ArchConfig::toy(), 0).unwrap();
    let b = init_checkpoint(&ArchConfig::toy(), 1).unwrap();
    let rep = similarity_report(&a, &b, &ReportConfig::default()).unwrap();
    let g = rep.groups.iter().find(|g| g.taxonomy == Taxonomy::Conv3x3).unwrap();
    assert!(g.mean_abs_r.unwrap() < 0.2, "{:?}", g.mean_abs_r);
}

#[test]
fn report_serialization() {
    let a = init_checkpoint(&ArchConfig::toy(), 0).unwrap();
    let b = init_checkpoint(&ArchConfig::toy(), 1).unwrap();
    let cfg = ReportConfig {
        bandwidth: Bandwidth::Fixed(0.25),
        threshold: 0.5,
    };
    let rep = similarity_report(&a, &b, &cfg).unwrap();
    assert_eq!(SimilarityReport::from_json(&rep.to_json().unwrap()).unwrap(), rep);
    let table = rep.to_table();
    assert!(table.lines().next().unwrap().starts_with("layer"));
    assert!(table.lines().any(|l| l.starts_with("[conv3x3]") && l.contains("mean")));
    assert_eq!(table.lines().count(), 1 + rep.layers.len() + rep.groups.len());
}

#[test]
fn architecture_mismatch_named() {
    let a = init_checkpoint(&ArchConfig::toy(), 0).unwrap();
    let b = init_checkpoint(&ArchConfig::toy().without_router(), 0).unwrap();
    match similarity_report(&a, &b, &ReportConfig::default()) {
        Err(Error::ArchitectureMismatch(m)) => assert!(m.contains("router"), "{m}"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}
