//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! with its measurements before asserting, and the tests run one at a time
//! so that their wall-clock budgets are not shared.

mod common;

use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng as _;
use specclip::clipping::{clip_top, fast_clip_run, ClipConfig, FastClipConfig};
use specclip::closedform::{
    circular_conv1d, closed_form_spectrum, duplicate_check, padding_gap_experiment, spectral_bounds, DUPLICATE_TOL,
};
use specclip::harness::{
    fig1_settings, make_trainer, run_concat_experiment, run_fig1_reproduction, Fig1Options, TrainConfig,
};
use specclip::linops::{ConvSpec, PadAmount, PaddingMode};
use specclip::specmod::{fit_parameters, FitConfig, SpectrumEditPlan};
use specclip::spectral::{bench_extraction, power_qr, svd_oracle, PowerQrConfig};
use specclip::{OperatorSpec, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

struct Check {
    name: &'static str,
    budget: Duration,
    started: Instant,
    _guard: std::sync::MutexGuard<'static, ()>,
}

impl Check {
    fn start(name: &'static str, budget_secs: u64) -> Self {
        let guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
        Self { name, budget: Duration::from_secs(budget_secs), started: Instant::now(), _guard: guard }
    }

    fn finish(self, ok: bool, details: String) {
        let elapsed = self.started.elapsed();
        let in_time = elapsed <= self.budget;
        let pass = ok && in_time;
        println!(
            "{} {}: {} [{:.1}s of {}s]",
            if pass { "PASS" } else { "FAIL" },
            self.name,
            details,
            elapsed.as_secs_f64(),
            self.budget.as_secs()
        );
        assert!(ok, "{} failed: {details}", self.name);
        assert!(
            in_time,
            "{} exceeded its {}s budget ({:.1}s)",
            self.name,
            self.budget.as_secs(),
            elapsed.as_secs_f64()
        );
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn random_conv(r: &mut rand_chacha::ChaCha8Rng, two_d: bool, mode: PaddingMode, stride: usize) -> OperatorSpec {
    let c_in = r.gen_range(1..=3);
    let c_out = r.gen_range(1..=3);
    let k = r.gen_range(1..=4);
    if two_d {
        let h = r.gen_range(k.max(2)..=7);
        let w = r.gen_range(k.max(2)..=7);
        conv2d(r, c_out, c_in, [k, k], [stride, stride], mode, PadAmount::Same, [c_in, h, w])
    } else {
        let n = r.gen_range(k.max(2)..=20);
        conv1d(r, c_out, c_in, k, stride, mode, PadAmount::Same, n)
    }
}

#[test]
fn adjoint_identity_across_operator_families() {
    let check = Check::start("adjoint identity", 30);
    let mut r = rng(101);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut family = |op: &OperatorSpec, r: &mut rand_chacha::ChaCha8Rng| {
        let x = normals(r, op.input_dim());
        let y = normals(r, op.output_dim());
        let (a, b) = op.adjoint_pair(&x, &y);
        let scale = norm(&op.linear_part().apply(&Tensor::vector(x.clone())).unwrap().into_data()) * norm(&y);
        worst = worst.max((a - b).abs() / scale.max(f64::MIN_POSITIVE));
        count += 1;
    };
    for _ in 0..4 {
        let (m, n) = (r.gen_range(1..=12), r.gen_range(1..=12));
        let op = dense(&mut r, m, n);
        family(&op, &mut r);
        let shape = vec![r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5)];
        let bn = batchnorm(&mut r, shape);
        family(&bn, &mut r);
    }
    for two_d in [false, true] {
        for mode in PaddingMode::ALL {
            for stride in [1, 2] {
                for _ in 0..12 {
                    let op = random_conv(&mut r, two_d, mode, stride);
                    family(&op, &mut r);
                }
            }
        }
    }
    let ok = count >= 200 && worst <= 1e-10;
    check.finish(ok, format!("{count} triples, worst relative error {worst:.2e} (limit 1e-10)"));
}

fn random_operator(r: &mut rand_chacha::ChaCha8Rng, i: usize) -> OperatorSpec {
    match i % 5 {
        0 => {
            let (m, n) = (r.gen_range(8..=64), r.gen_range(16..=128));
            dense(r, m, n)
        }
        1 => {
            let mode = PaddingMode::ALL[r.gen_range(0..4)];
            let (stride, n) = (r.gen_range(1..=2), r.gen_range(16..=64));
            conv1d(r, 2, 2, 3, stride, mode, PadAmount::Same, n)
        }
        2 => {
            let mode = PaddingMode::ALL[r.gen_range(0..4)];
            let s = r.gen_range(1..=2);
            conv2d(r, 2, 2, [3, 3], [s, s], mode, PadAmount::Same, [2, 8, 8])
        }
        3 => {
            let conv = conv2d(r, 3, 1, [3, 3], [1, 1], PaddingMode::Zeros, PadAmount::Same, [1, 10, 10]);
            let bn = batchnorm(r, vec![3, 10, 10]);
            OperatorSpec::compose(vec![conv, bn]).unwrap()
        }
        _ => {
            let mode = PaddingMode::ALL[r.gen_range(0..4)];
            conv2d(r, 4, 4, [3, 3], [1, 1], mode, PadAmount::Same, [4, 8, 8])
        }
    }
}

#[test]
fn power_qr_matches_the_oracle() {
    let check = Check::start("power_qr vs oracle", 120);
    let mut r = rng(202);
    let total = 50;
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for i in 0..total {
        let op = random_operator(&mut r, i);
        let n = op.input_dim();
        assert!(n <= 512);
        let k = n.min(16);
        let est = power_qr(&op, &PowerQrConfig::new(k, 300).with_seed(i as u64), None).unwrap();
        let oracle = svd_oracle(&op).unwrap();
        let mut err = 0.0f64;
        for (a, b) in est.sigmas.iter().zip(&oracle[..k]) {
            err = err.max((a - b).abs() / (1.0 + b.abs()));
        }
        worst = worst.max(err);
        if err > 1e-6 {
            failures.push((i, err));
        }
    }
    let details = format!(
        "{}/{total} operators within 1e-6, worst error {worst:.2e}; failing: {:?}",
        total - failures.len(),
        failures.iter().map(|(i, e)| format!("#{i}:{e:.1e}")).collect::<Vec<_>>()
    );
    check.finish(failures.is_empty(), details);
}

#[test]
fn dense_clip_is_an_exact_projection() {
    let check = Check::start("dense clip projection", 10);
    let mut r = rng(303);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for _ in 0..20 {
        let (m, n) = (r.gen_range(3..=8), r.gen_range(3..=8));
        let op = dense(&mut r, m, n);
        let before = svd_oracle(&op).unwrap();
        for c in [0.5, 1.0, 2.0] {
            let cfg = ClipConfig {
                lambda: 1.0,
                inner_steps: 1,
                probe_iters: 20000,
                tol: 1e-10,
                max_passes: 2 * n,
                ..ClipConfig::new(c)
            };
            let out = clip_top(&op, &cfg, None).unwrap();
            let after = svd_oracle(&out.op).unwrap();
            let expected: Vec<f64> = before.iter().map(|s| s.min(c)).collect();
            worst = worst.max(max_abs_diff(&after, &expected));
            trials += 1;
        }
    }
    check.finish(worst <= 1e-8, format!("{trials} clips, worst deviation from min(sigma, c) {worst:.2e} (limit 1e-8)"));
}

#[test]
fn fast_clip_controls_all_four_conv_settings() {
    let check = Check::start("conv clipping over training", 600);
    let reports = run_fig1_reproduction(7).unwrap();
    let mut ok = reports.len() == 4;
    let mut parts = Vec::new();
    for rep in &reports {
        let in_band = (0.95..=1.02).contains(&rep.sigma_final);
        let uniform = rep.scale_ratio_spread <= 1e-6;
        ok &= in_band && uniform;
        parts.push(format!(
            "{}: sigma {:.4} (from {:.3}, {} events), scaled {:.4}, ratio spread {:.1e}",
            rep.setting,
            rep.sigma_final,
            rep.sigma_initial,
            rep.clip_events,
            rep.sigma_final_scaled,
            rep.scale_ratio_spread
        ));
    }
    check.finish(ok, parts.join("; "));
}

fn random_filters(r: &mut rand_chacha::ChaCha8Rng, m: usize, k: usize, positive: bool) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let f = normals(r, k);
            if positive {
                f.iter().map(|v| v.abs()).collect()
            } else {
                f
            }
        })
        .collect()
}

#[test]
fn closed_form_spectrum_matches_the_oracle() {
    let check = Check::start("closed-form spectrum", 120);
    let mut r = rng(404);
    let trials = 500;
    let mut worst = 0.0f64;
    let mut bound_violations = 0;
    let mut worst_equality = 0.0f64;
    let mut positive_trials = 0;
    for t in 0..trials {
        let m = r.gen_range(1..=4);
        let k = r.gen_range(1..=5);
        let n = r.gen_range(k.max(2)..=64);
        let positive = t % 4 == 0;
        let filters = random_filters(&mut r, m, k, positive);
        let cf = closed_form_spectrum(&filters, n).unwrap();
        let op = circular_conv1d(&filters, n, t % 2 == 1).unwrap();
        let oracle = svd_oracle(&op).unwrap();
        worst = worst.max(max_multiset_gap(&padded(&cf.sorted(), oracle.len()), &oracle));

        let b = spectral_bounds(&filters);
        let s1 = cf.max();
        if s1 < b.lower - 1e-10 || s1 > b.upper + 1e-10 {
            bound_violations += 1;
        }
        if positive {
            positive_trials += 1;
            worst_equality = worst_equality.max((b.upper - s1).abs().max((b.lower - s1).abs()));
        }
    }
    let ok = worst <= 1e-8 && bound_violations == 0 && worst_equality <= 1e-10;
    check.finish(
        ok,
        format!(
            "{trials} trials, worst multiset gap {worst:.2e}, bound violations {bound_violations}, \
             worst equality gap over {positive_trials} non-negative trials {worst_equality:.2e}"
        ),
    );
}

#[test]
fn single_channel_spectra_come_in_pairs() {
    let check = Check::start("duplicate structure", 30);
    let mut r = rng(505);
    let trials = 1000;
    let mut worst = 0;
    let mut bad = 0;
    for _ in 0..trials {
        let k = r.gen_range(1..=5);
        let n = r.gen_range(k.max(2)..=64);
        let filters = random_filters(&mut r, 1, k, false);
        let singles = duplicate_check(&closed_form_spectrum(&filters, n).unwrap(), DUPLICATE_TOL);
        worst = worst.max(singles);
        bad += (singles > 2) as usize;
    }
    check.finish(bad == 0, format!("{trials} trials, {bad} with more than two unpaired values, max unpaired {worst}"));
}

#[test]
fn warm_started_tracking_follows_the_true_norm() {
    let check = Check::start("warm-start tracking", 300);
    let opts = Fig1Options::default();
    let steps = 1000;
    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut ok = true;
    for (i, setting) in fig1_settings().iter().enumerate() {
        let seed = 31 + i as u64;
        let student = setting.random_operator(opts.input_shape, opts.out_channels, opts.init_sigma, seed, 1).unwrap();
        let teacher = student
            .with_params(
                &setting
                    .random_operator(opts.input_shape, opts.out_channels, opts.teacher_sigma, seed, 2)
                    .unwrap()
                    .params(),
            )
            .unwrap();
        let mut clip = ClipConfig::for_operator(&student, 1.0);
        clip.max_passes = opts.passes;
        clip.probe_iters = opts.probe_iters;
        let mut fc = FastClipConfig::new(clip, 100);
        fc.track_per_step = 1;
        fc.oracle_every = Some(100);
        let train = TrainConfig { steps, seed, ..opts.train };
        let mut trainer = make_trainer(&train, Some(&teacher)).unwrap();
        let (_, rows) = fast_clip_run(&student, trainer.as_mut(), &fc, steps).unwrap();
        for row in rows.iter().filter(|m| m.step > 100) {
            if let Some(truth) = row.sigma_true {
                let rel = (row.sigma_tracked - truth).abs() / truth;
                worst = worst.max(rel);
                ok &= rel <= 0.01;
                probes += 1;
            }
        }
    }
    check.finish(
        ok && probes == 36,
        format!("{probes} probes over 4 settings, worst relative tracking error {worst:.2e} (limit 1e-2)"),
    );
}

#[test]
fn non_circular_padding_opens_a_gap() {
    let check = Check::start("padding gap", 300);
    let mut rows = Vec::new();
    for channels in [1, 4, 16] {
        rows.extend(padding_gap_experiment(3, channels, 16, 100, 11).unwrap());
    }
    let mean = |mode: PaddingMode, channels: usize| {
        rows.iter().find(|r| r.padding == mode && r.channels == channels).unwrap().mean_gap
    };
    let modes = [PaddingMode::Zeros, PaddingMode::Reflect, PaddingMode::Replicate];
    let positive = rows.iter().all(|r| r.mean_gap > 0.0);
    let growing = modes.iter().filter(|&&m| mean(m, 16) >= mean(m, 1)).count();
    let table: Vec<String> =
        rows.iter().map(|r| format!("{}/{}ch {:.4}", r.padding.name(), r.channels, r.mean_gap)).collect();
    check.finish(
        positive && growing >= 2,
        format!("mean gaps [{}]; grows with channels for {growing}/3 paddings", table.join(", ")),
    );
}

#[test]
fn block_extraction_beats_deflation() {
    let check = Check::start("extraction efficiency", 300);
    let mut r = rng(909);
    let kernel = Tensor::new(vec![16, 16, 3, 3], normals(&mut r, 16 * 16 * 9)).unwrap();
    let op: OperatorSpec =
        ConvSpec::conv2d(kernel, None, [1, 1], PaddingMode::Circular, PadAmount::Same, [16, 32, 32]).unwrap().into();
    let rows = bench_extraction(&op, &[8, 16], 2000, 3).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for pair in rows.chunks(2) {
        let (qr, defl) = (&pair[0], &pair[1]);
        let agree = (qr.sigma1 - defl.sigma1).abs() / qr.sigma1;
        ok &= qr.wall < defl.wall && agree <= 1e-5;
        parts.push(format!(
            "k={}: power_qr {:.0} ms vs deflated {:.0} ms, sigma1 {:.8} vs {:.8}",
            qr.k,
            qr.wall.as_secs_f64() * 1e3,
            defl.wall.as_secs_f64() * 1e3,
            qr.sigma1,
            defl.sigma1
        ));
    }
    check.finish(ok, parts.join("; "));
}

#[test]
fn spectrum_edits_are_reachable_only_for_dense_layers() {
    let check = Check::start("spectrum editing", 120);
    let mut r = rng(1010);

    let op = dense(&mut r, 5, 4);
    let est = power_qr(&op, &PowerQrConfig::new(4, 2000), None).unwrap();
    let target: Vec<f64> = est.sigmas.iter().map(|s| s.min(1.0)).collect();
    let plan = SpectrumEditPlan::from_estimate(op, &est, target).unwrap();
    let dense_fit = fit_parameters(&plan, &FitConfig { lr: 0.5, epochs: 2000, ..FitConfig::new(64) }).unwrap();

    let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
    let conv: OperatorSpec =
        ConvSpec::conv2d(kernel, None, [1, 1], PaddingMode::Zeros, PadAmount::Same, [1, 1, 2]).unwrap().into();
    let edit = [2.0, 1.0];
    let vectors = specclip::linalg::Block::from_columns(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let plan = SpectrumEditPlan::new(conv, vec![1.0, 1.0], vectors, edit.to_vec()).unwrap();
    let conv_fit = fit_parameters(&plan, &FitConfig { lr: 0.1, epochs: 2000, ..FitConfig::new(4096) }).unwrap();
    let n = edit.len() as f64;
    let mean = edit.iter().sum::<f64>() / n;
    let floor = edit.iter().map(|t| (t - mean).powi(2)).sum::<f64>().sqrt();

    let ok = dense_fit.residual_rms <= 1e-6 && conv_fit.residual_rms >= 0.1 * floor;
    check.finish(
        ok,
        format!(
            "dense residual {:.2e} (limit 1e-6); 1x1 conv residual {:.4} vs analytic floor {:.4} (must be >= {:.4})",
            dense_fit.residual_rms,
            conv_fit.residual_rms,
            floor,
            0.1 * floor
        ),
    );
}

#[test]
fn composition_clipping_leaves_batchnorm_unclipped() {
    let check = Check::start("conv + batch-norm clipping", 600);
    let rep = run_concat_experiment(13).unwrap();
    let last = *rep.last().unwrap();
    let ok = last.composition <= 1.1 && last.conv <= 1.01 && last.bn > 1.0;
    check.finish(
        ok,
        format!(
            "step {}: composition {:.4}, conv {:.4}, batch-norm {:.4}; {} conv events, {} composition events",
            last.step, last.composition, last.conv, last.bn, rep.conv_events, rep.concat_events
        ),
    );
}
