mod common;

use common::*;
use proptest::prelude::*;
use specclip::linalg::Block;
use specclip::linops::{ConvSpec, PadAmount, PaddingMode};
use specclip::spectral::{deflated_power_baseline, power_qr, svd_oracle, track_step, PowerQrConfig, Readout};
use specclip::{Error, OperatorSpec, Tensor};

fn circ_1_1(n: usize) -> OperatorSpec {
    let k = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
    ConvSpec::conv1d(k, None, 1, PaddingMode::Circular, PadAmount::Same, [1, n]).unwrap().into()
}

#[test]
fn diagonal_operator_spectrum_and_vectors() {
    let op = diag(&[3.0, 1.0]);
    let est = power_qr(&op, &PowerQrConfig::new(2, 50), None).unwrap();
    assert!(max_abs_diff(&est.sigmas, &[3.0, 1.0]) < 1e-8);
    let v = est.v_tensor();
    assert!((v.at(0, 0).abs() - 1.0).abs() < 1e-8 && v.at(1, 0).abs() < 1e-8);
    assert!((v.at(1, 1).abs() - 1.0).abs() < 1e-8 && v.at(0, 1).abs() < 1e-8);
}

#[test]
fn circulant_with_zero_singular_value() {
    let est = power_qr(&circ_1_1(4), &PowerQrConfig::new(4, 300), None).unwrap();
    let s2 = 2f64.sqrt();
    assert!(max_abs_diff(&est.sigmas, &[2.0, s2, s2, 0.0]) < 1e-6);
}

#[test]
fn strided_conv_matches_oracle() {
    let mut r = rng(7);
    let op = conv2d(&mut r, 2, 2, [3, 3], [2, 2], PaddingMode::Zeros, PadAmount::Symmetric([1, 1]), [2, 8, 8]);
    let est = power_qr(&op, &PowerQrConfig::new(5, 5000), None).unwrap();
    let oracle = op_singular_values(&op);
    for (a, b) in est.sigmas.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-7 * b, "{a} vs {b}");
    }
}

#[test]
fn early_exit_reports_convergence() {
    let est = power_qr(&diag(&[3.0, 1.0, 0.5]), &PowerQrConfig::new(2, 300), None).unwrap();
    assert!(est.converged);
    assert!(est.iterations_used < 300);
    assert_eq!(est.iterations_used % 10, 0);
}

#[test]
fn invalid_configurations() {
    let op = diag(&[1.0, 2.0]);
    assert!(matches!(power_qr(&op, &PowerQrConfig::new(3, 10), None), Err(Error::InvalidArgument(_))));
    assert!(power_qr(&op, &PowerQrConfig::new(0, 10), None).is_err());
    assert!(power_qr(&op, &PowerQrConfig::new(1, 0), None).is_err());
    assert!(power_qr(&op, &PowerQrConfig::new(1, 10).with_shift(-1.0), None).is_err());
    let x0 = Block::from_columns(vec![vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
    assert!(matches!(power_qr(&op, &PowerQrConfig::new(2, 10), Some(&x0)), Err(Error::RankDeficient { .. })));
    let wrong = Block::from_columns(vec![vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(power_qr(&op, &PowerQrConfig::new(1, 10), Some(&wrong)), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn vectors_stay_orthonormal_every_iteration() {
    let mut r = rng(11);
    let op = conv2d(&mut r, 3, 2, [3, 3], [1, 1], PaddingMode::Reflect, PadAmount::Same, [2, 6, 6]);
    let mut est = power_qr(&op, &PowerQrConfig::new(6, 1), None).unwrap();
    for _ in 0..40 {
        est = track_step(&op, &est, 1.0).unwrap();
        assert!(est.vectors.orthonormality_error() <= 1e-8);
        assert!(est.sigmas.windows(2).all(|w| w[0] >= w[1]) && est.sigmas.iter().all(|s| *s >= 0.0));
    }
}

#[test]
fn track_step_is_a_fixed_point_on_converged_estimates() {
    let op = diag(&[5.0, 3.0, 2.0, 1.0]);
    let est = power_qr(&op, &PowerQrConfig::new(2, 300), None).unwrap();
    for mu in [1.0, 0.0] {
        let next = track_step(&op, &est, mu).unwrap();
        assert!(max_abs_diff(&next.sigmas, &est.sigmas) < 1e-10);
    }
}

#[test]
fn track_step_follows_perturbed_operator() {
    let mut r = rng(12);
    let op = conv2d(&mut r, 2, 2, [3, 3], [1, 1], PaddingMode::Zeros, PadAmount::Same, [2, 6, 6]);
    let mut est = power_qr(&op, &PowerQrConfig::new(3, 300), None).unwrap();
    let p = op.params();
    let mut noise = p.zeros_like();
    for t in &mut noise.tensors {
        let v = normals(&mut r, t.len());
        t.data_mut().copy_from_slice(&v);
    }
    let moved = op.add_scaled_params(1e-3 * p.norm() / noise.norm(), &noise).unwrap();
    for _ in 0..5 {
        est = track_step(&moved, &est, 1.0).unwrap();
    }
    let truth = op_singular_values(&moved)[0];
    assert!((est.sigmas[0] - truth).abs() < 1e-4);
}

#[test]
fn shift_does_not_change_converged_results() {
    let mut r = rng(13);
    let op = dense(&mut r, 12, 10);
    let a = power_qr(&op, &PowerQrConfig::new(4, 2000).with_shift(0.5), None).unwrap();
    let b = power_qr(&op, &PowerQrConfig::new(4, 2000), None).unwrap();
    assert!(max_abs_diff(&a.sigmas, &b.sigmas) < 1e-8);
}

#[test]
fn subspace_residual_is_small_after_convergence() {
    let mut r = rng(14);
    let op = conv2d(&mut r, 2, 1, [3, 3], [1, 1], PaddingMode::Circular, PadAmount::Same, [1, 6, 6]);
    let est = power_qr(&op, &PowerQrConfig::new(4, 300).with_readout(Readout::RayleighRitz), None).unwrap();
    assert!(est.residual(&op) <= 1e-6);
    let rq = est.rayleigh_sigmas(&op);
    assert!(max_abs_diff(&rq, &est.sigmas) < 1e-8);
}

#[test]
fn ritz_readout_separates_close_pairs() {
    let op = diag(&[2.0, 2.0 - 1e-4, 1.0]);
    let diagonal = power_qr(&op, &PowerQrConfig::new(2, 300), None).unwrap();
    let ritz = power_qr(&op, &PowerQrConfig::new(2, 300).with_readout(Readout::RayleighRitz), None).unwrap();
    assert!(max_abs_diff(&ritz.sigmas, &[2.0, 2.0 - 1e-4]) < 1e-12);
    assert!(max_abs_diff(&diagonal.sigmas, &[2.0, 2.0 - 1e-4]) < 1e-4);
}

#[test]
fn deflated_baseline_recovers_diagonal() {
    let d = deflated_power_baseline(&diag(&[3.0, 2.0, 1.0]), 3, 2000, 0).unwrap();
    assert!(max_abs_diff(&d.estimate.sigmas, &[3.0, 2.0, 1.0]) < 1e-6);
    assert!(d.estimate.converged);
}

#[test]
fn deflated_baseline_agrees_with_power_qr() {
    let mut r = rng(15);
    let op = dense(&mut r, 50, 50);
    let d = deflated_power_baseline(&op, 10, 20000, 1).unwrap();
    let p = power_qr(&op, &PowerQrConfig::new(10, 20000), None).unwrap();
    assert!(multiset_close(&d.estimate.sigmas, &p.sigmas, 0.0, 1e-5));
}

#[test]
fn deflated_baseline_flags_budget_exhaustion() {
    let mut r = rng(16);
    let op = dense(&mut r, 30, 30);
    let d = deflated_power_baseline(&op, 3, 3, 0).unwrap();
    assert!(!d.estimate.converged);
}

#[test]
fn oracle_on_simple_operators() {
    let id = diag(&[1.0; 6]);
    assert!(max_abs_diff(&svd_oracle(&id).unwrap(), &[1.0; 6]) < 1e-14);
    let s = svd_oracle(&matrix_op(2, 2, vec![0.0, 2.0, 0.0, 0.0])).unwrap();
    assert!(max_abs_diff(&s, &[2.0, 0.0]) < 1e-14);
}

#[test]
fn oracle_matches_reference_svd() {
    let mut r = rng(17);
    for (m, n) in [(5, 7), (7, 5), (1, 4), (30, 30)] {
        let op = dense(&mut r, m, n);
        let ours = svd_oracle(&op).unwrap();
        let reference = op_singular_values(&op);
        assert_eq!(ours.len(), n);
        assert!(max_abs_diff(&ours, &reference) < 1e-9, "{m}x{n}");
    }
    let op = dense(&mut r, 5, 7);
    let p = power_qr(&op, &PowerQrConfig::new(5, 3000), None).unwrap();
    assert!(max_abs_diff(&p.sigmas, &svd_oracle(&op).unwrap()[..5]) < 1e-9);
}

#[test]
fn oracle_refuses_large_operators() {
    let mut r = rng(18);
    let op = conv2d(&mut r, 1, 3, [3, 3], [1, 1], PaddingMode::Zeros, PadAmount::Same, [3, 27, 27]);
    assert!(matches!(svd_oracle(&op), Err(Error::DimensionCap { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn full_spectrum_matches_reference(seed in any::<u64>(), mode_idx in 0usize..4, stride in 1usize..3) {
        let mut r = rng(seed);
        let op = conv2d(&mut r, 2, 2, [3, 3], [stride, stride], PaddingMode::ALL[mode_idx], PadAmount::Same, [2, 4, 4]);
        let n = op.input_dim();
        let cfg = PowerQrConfig::new(n, 300).with_readout(Readout::RayleighRitz);
        let est = power_qr(&op, &cfg, None).unwrap();
        let reference = op_singular_values(&op);
        prop_assert!(multiset_close(&est.sigmas, &reference, 1e-6, 1e-6));
        prop_assert!(est.vectors.orthonormality_error() <= 1e-8);
    }

    #[test]
    fn seeds_are_reproducible(seed in any::<u64>()) {
        let op = diag(&[4.0, 3.0, 2.0, 1.0]);
        let cfg = PowerQrConfig::new(2, 7).with_seed(seed);
        prop_assert_eq!(power_qr(&op, &cfg, None).unwrap(), power_qr(&op, &cfg, None).unwrap());
    }
}
