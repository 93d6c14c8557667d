use nalgebra::DMatrix;
use proptest::prelude::*;

use avatar_offload::codec::{train_codec, PathKind};
use avatar_offload::frequency::{block_dct, block_idct, Texture, CHANNELS};
use avatar_offload::linalg::{covariance, sym_eig, Denominator};
use avatar_offload::privacy::{calibrate_damp, calibrate_isotropic_mi, mi_from_psr, psr_from_mi, CalibrationOptions};
use avatar_offload::{Matrix, RngStream};

fn random_symmetric(n: usize, seed: u64) -> Matrix<f64> {
    let mut rng = RngStream::new(seed, "tests/symmetric");
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = rng.standard_normal();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn samples(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = RngStream::new(seed, "tests/samples");
    // Decaying per-axis scale so the spectrum is far from flat.
    (0..count)
        .map(|_| (0..dim).map(|k| rng.standard_normal() / (1.0 + k as f64)).collect())
        .collect()
}

#[test]
fn eigenvalues_match_nalgebra() {
    for (n, seed) in [(3, 1), (8, 2), (17, 3), (40, 4)] {
        let m = random_symmetric(n, seed);
        let ours = sym_eig(&m).unwrap();
        let oracle = DMatrix::from_row_slice(n, n, m.as_slice()).symmetric_eigen();
        let mut theirs: Vec<f64> = oracle.eigenvalues.iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.eigenvalues.iter().zip(&theirs) {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "n={n}: {a} vs {b}");
        }
        let back = ours.reconstruct().sub(&m).unwrap().max_abs();
        assert!(back <= 1e-9, "n={n}: reconstruction error {back}");
    }
}

#[test]
fn f32_and_f64_eigenvalues_agree() {
    let m = random_symmetric(12, 9);
    let wide = sym_eig(&m).unwrap();
    let narrow = sym_eig(&m.map(|x| x as f32)).unwrap();
    for (a, b) in wide.eigenvalues.iter().zip(&narrow.eigenvalues) {
        assert!((a - *b as f64).abs() <= 1e-4 * (1.0 + a.abs()));
    }
}

#[test]
fn pca_residual_equals_discarded_variance() {
    // n = 64 > N = 20 takes the Gram route.
    let corpus = samples(20, 64, 5);
    let codec = train_codec(&corpus, 8, PathKind::Offloaded).unwrap();
    let total = covariance(&corpus, Denominator::Population).unwrap().trace();
    let kept: f64 = codec.spectrum().iter().sum();
    let residual = codec.mean_squared_residual(&corpus).unwrap();
    assert!((residual - (total - kept)).abs() <= 1e-9 * total, "{residual} vs {}", total - kept);
}

#[test]
fn reconstruction_error_is_monotone_in_latent_dim() {
    let corpus = samples(30, 24, 6);
    let mut last = f64::INFINITY;
    for d in 1..=24 {
        let mse = train_codec(&corpus, d, PathKind::Local).unwrap().mean_squared_residual(&corpus).unwrap();
        assert!(mse <= last + 1e-12, "d={d}: {mse} > {last}");
        last = mse;
    }
    assert!(last <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psr_mi_round_trip(frac in 1e-3f64..0.9, classes in 2usize..200) {
        // Budgets at or above ln K saturate the bound at certainty.
        let v = frac * (classes as f64).ln();
        let prior = 1.0 / classes as f64;
        let p = psr_from_mi(v, prior).unwrap();
        prop_assert!(p >= prior && p < 1.0);
        let back = mi_from_psr(p, prior).unwrap();
        prop_assert!((back - v).abs() <= 1e-6 * (1.0 + v), "{} -> {} -> {}", v, p, back);
    }

    #[test]
    fn psr_is_monotone_in_budget(a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let prior = 1.0 / 65.0;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(psr_from_mi(lo, prior).unwrap() <= psr_from_mi(hi, prior).unwrap() + 1e-12);
    }

    #[test]
    fn damp_trace_identity_and_dominance(
        lambda in prop::collection::vec(1e-4f64..10.0, 1..24),
        v in 1e-3f64..4.0,
    ) {
        let cov = Matrix::from_diagonal(&lambda);
        let opts = CalibrationOptions::default();
        let damp = calibrate_damp(&cov, v, &opts).unwrap();
        let iso = calibrate_isotropic_mi(&cov, v, &opts).unwrap();
        let roots: f64 = lambda.iter().map(|l| l.sqrt()).sum();
        let want = roots * roots / (2.0 * v);
        prop_assert!((damp.trace - want).abs() <= 1e-9 * want);
        prop_assert!(iso.trace >= damp.trace * (1.0 - 1e-12));
    }

    #[test]
    fn dct_round_trip(seed in any::<u64>(), bi in 0usize..3, hb in 1usize..4, wb in 1usize..4) {
        let block = [2, 4, 8][bi];
        let (h, w) = (8 * hb, 8 * wb);
        let mut rng = RngStream::new(seed, "tests/texture");
        let mut draw = || Texture::new(h, w, (0..h * w * CHANNELS).map(|_| rng.uniform() as f32).collect()).unwrap();
        let tex = draw();
        let mean = draw();
        let comps = block_dct(&tex, &mean, block).unwrap();
        let back = block_idct(&comps, &mean).unwrap();
        prop_assert!(back.max_abs_diff(&tex).unwrap() <= 1e-4);
    }
}
