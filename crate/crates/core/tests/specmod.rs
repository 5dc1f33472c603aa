mod common;

use common::*;
use proptest::prelude::*;
use specclip::linalg::Block;
use specclip::linops::{PadAmount, PaddingMode};
use specclip::specmod::{fit_parameters, target_action, FitConfig, SpectrumEditPlan};
use specclip::spectral::{power_qr, svd_oracle, PowerQrConfig, Readout};
use specclip::{Error, OperatorSpec, Tensor};

fn full_plan(op: &OperatorSpec, edit: impl Fn(&[f64]) -> Vec<f64>) -> SpectrumEditPlan {
    let n = op.input_dim();
    let est = power_qr(op, &PowerQrConfig::new(n, 3000).with_readout(Readout::RayleighRitz), None).unwrap();
    let target = edit(&est.sigmas);
    SpectrumEditPlan::from_estimate(op.clone(), &est, target).unwrap()
}

fn unit(n: usize, i: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    Tensor::vector(v)
}

/// A 1×1 convolution of value `c` on a single-channel 1×2 input.
fn pointwise(c: f64) -> OperatorSpec {
    conv2d_with_kernel(vec![c])
}

fn conv2d_with_kernel(k: Vec<f64>) -> OperatorSpec {
    let kernel = Tensor::new(vec![1, 1, 1, 1], k).unwrap();
    specclip::linops::ConvSpec::conv2d(
        kernel,
        None,
        [1, 1],
        PaddingMode::Zeros,
        PadAmount::Symmetric([0, 0]),
        [1, 1, 2],
    )
    .unwrap()
    .into()
}

#[test]
fn identity_edit_reproduces_the_linear_part() {
    let mut r = rng(1);
    let op = dense(&mut r, 4, 3);
    let plan = full_plan(&op, |s| s.to_vec());
    for _ in 0..5 {
        let x = Tensor::vector(normals(&mut r, 3));
        let mut want = op.apply(&x).unwrap().into_data();
        let f0 = op.apply(&Tensor::zeros(vec![3])).unwrap();
        want.iter_mut().zip(f0.data()).for_each(|(a, b)| *a -= b);
        assert!(max_abs_diff(target_action(&plan, &x).unwrap().data(), &want) < 1e-9);
    }
}

#[test]
fn diagonal_edit_to_identity() {
    let op = diag(&[3.0, 1.0]);
    let plan = full_plan(&op, |_| vec![1.0, 1.0]);
    for i in 0..2 {
        assert!(max_abs_diff(target_action(&plan, &unit(2, i)).unwrap().data(), unit(2, i).data()) < 1e-9);
    }
}

#[test]
fn halving_edit_halves_the_action() {
    let mut r = rng(2);
    let op = dense(&mut r, 3, 3);
    let plan = full_plan(&op, |s| s.iter().map(|v| 0.5 * v).collect());
    let x = Tensor::vector(normals(&mut r, 3));
    let lin = op.linear_part().apply(&x).unwrap();
    let half: Vec<f64> = lin.data().iter().map(|v| 0.5 * v).collect();
    assert!(max_abs_diff(target_action(&plan, &x).unwrap().data(), &half) < 1e-9);
}

#[test]
fn zero_singular_value_cannot_be_edited() {
    let op = diag(&[2.0, 0.0]);
    let v = Block::from_columns(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(matches!(
        SpectrumEditPlan::new(op.clone(), vec![2.0, 0.0], v.clone(), vec![1.0, 0.5]),
        Err(Error::RankDeficient { index: 1, .. })
    ));
    assert!(SpectrumEditPlan::new(op.clone(), vec![2.0, 0.0], v.clone(), vec![1.0, 0.0]).is_ok());
    assert!(SpectrumEditPlan::new(op, vec![2.0], v, vec![1.0]).is_err());
}

#[test]
fn dense_fit_reaches_the_edited_spectrum() {
    let mut r = rng(3);
    let op = dense(&mut r, 5, 4);
    let plan = full_plan(&op, |s| s.iter().enumerate().map(|(i, v)| if i < 2 { 1.0 } else { *v }).collect());
    let cfg = FitConfig { lr: 0.5, epochs: 2000, ..FitConfig::new(64) };
    let rep = fit_parameters(&plan, &cfg).unwrap();
    assert!(rep.residual_rms <= 1e-6, "rms {}", rep.residual_rms);
    assert!(multiset_close(&svd_oracle(&rep.fitted).unwrap(), &plan.target, 1e-5, 0.0));
}

#[test]
fn pointwise_conv_cannot_take_a_non_uniform_spectrum() {
    let op = pointwise(2.0);
    let v = Block::from_columns(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let plan = SpectrumEditPlan::new(op, vec![2.0, 2.0], v, vec![2.0, 1.0]).unwrap();
    let cfg = FitConfig { lr: 0.1, epochs: 2000, seed: 4, ..FitConfig::new(4096) };
    let rep = fit_parameters(&plan, &cfg).unwrap();
    let c = rep.fitted.params().tensors[0].data()[0];
    // Minimising (c-2)² + (c-1)² gives c = 1.5 and residual² = 0.5 per sample.
    assert!((c - 1.5).abs() < 0.05, "fitted kernel {c}");
    assert!((rep.residual_rms - 0.5f64.sqrt()).abs() < 0.05, "rms {}", rep.residual_rms);
}

#[test]
fn identity_edit_keeps_the_source() {
    let mut r = rng(5);
    let op = conv2d(&mut r, 2, 1, [3, 3], [1, 1], PaddingMode::Reflect, PadAmount::Same, [1, 4, 4]);
    let plan = full_plan(&op, |s| s.to_vec());
    let rep = fit_parameters(&plan, &FitConfig::new(32)).unwrap();
    assert!(rep.residual_rms <= 1e-8);
    assert!(max_abs_diff(&rep.fitted.params().flat(), &op.params().flat()) < 1e-12);
}

#[test]
fn single_channel_circular_target_with_many_unpaired_values_is_unreachable() {
    let mut r = rng(6);
    let op = conv2d(&mut r, 1, 1, [1, 3], [1, 1], PaddingMode::Circular, PadAmount::Same, [1, 1, 8]);
    // Distinct values everywhere: no circular filter has this spectrum.
    let plan = full_plan(&op, |s| (0..s.len()).map(|i| 0.3 + 0.2 * i as f64).collect());
    let rep = fit_parameters(&plan, &FitConfig { lr: 0.02, epochs: 1500, ..FitConfig::new(64) }).unwrap();
    assert!(rep.residual_rms > 0.05, "rms {}", rep.residual_rms);
}

#[test]
fn too_large_step_backs_off() {
    let mut r = rng(7);
    let op = dense(&mut r, 3, 3);
    let plan = full_plan(&op, |s| s.iter().map(|v| v.min(0.5)).collect());
    let rep = fit_parameters(&plan, &FitConfig { lr: 50.0, epochs: 800, ..FitConfig::new(64) }).unwrap();
    assert!(rep.lr < 50.0);
    assert!(rep.residual_rms < 1e-6, "rms {}", rep.residual_rms);
}

#[test]
fn invalid_fit_settings() {
    let plan = full_plan(&diag(&[2.0, 1.0]), |_| vec![1.0, 1.0]);
    assert!(fit_parameters(&plan, &FitConfig::new(0)).is_err());
    assert!(fit_parameters(&plan, &FitConfig { lr: -1.0, ..FitConfig::new(4) }).is_err());
    assert!(target_action(&plan, &Tensor::vector(vec![1.0; 3])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn objective_never_increases_for_small_steps(seed in any::<u64>()) {
        let mut r = rng(seed);
        let op = conv2d(&mut r, 2, 1, [3, 3], [1, 1], PaddingMode::Zeros, PadAmount::Same, [1, 4, 4]);
        let plan = full_plan(&op, |s| s.iter().map(|v| v.min(1.0)).collect());
        let rep = fit_parameters(&plan, &FitConfig { lr: 1e-3, epochs: 60, ..FitConfig::new(32) }).unwrap();
        prop_assert_eq!(rep.lr, 1e-3);
        prop_assert_eq!(rep.objective.len(), 60);
        prop_assert!(rep.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }
}
