//! Acceptance gates for the workbench: ten checks covering gradient
//! correctness, attack signal, unlearning efficacy, fidelity, distribution
//! direction, baseline parity, latency, cross-attack transfer, determinism,
//! and the privacy-term ablation. Each test prints one `criterion NN ...
//! PASS/FAIL` line (visible with `--nocapture`) and asserts its tolerance.
//!
//! All expensive artifacts are built once in a shared fixture: a full
//! experiment grid over forget ratios {0.01, 0.10, 0.25}, a bit-exact rerun
//! of the same grid, a CNN attack-signal run, and a lambda2=0 ablation.

use std::sync::OnceLock;
use std::time::Instant;

use remi::checkpoint;
use remi::data::{make_synthetic, ForgetSet, SplitPlan, SyntheticSpec};
use remi::eval::{
    run_experiment, ArchSpec, AttackSection, CorpusSpec, ExperimentConfig, Layout, ReportRow,
    RunReport, TrainSection, UnlearnSection, TIMING_COLUMNS, VALUE_COLUMNS,
};
use remi::features::{build_attack_dataset, FeatureSpec};
use remi::loss::cross_entropy;
use remi::net::arch;
use remi::numcheck::{compare_gradients, fd_gradient};
use remi::privacy::{
    fit_gaussian, kl_gaussian, load_privacy_model, member_rate, probe_probs, train_privacy_model,
    Variant,
};
use remi::train::{train, TrainConfig};
use remi::unlearn::{remi_unlearn, UnlearnConfig};

const GRID_SEED: u64 = 1;
const RATIOS: [f64; 3] = [0.01, 0.10, 0.25];

struct Fixture {
    grad_max_rel_err: f64,
    grad_secs: f64,
    cnn_probe_acc: f64,
    cnn_secs: f64,
    report: RunReport,
    rerun: RunReport,
    ablation_pre: f64,
    ablation_after: f64,
    _dir: tempfile::TempDir,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(build_fixture)
}

fn grid_config(dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance-grid".into(),
        output_dir: dir.to_path_buf(),
        seeds: vec![GRID_SEED],
        ratios: RATIOS.to_vec(),
        split_seed: 7,
        corpus: CorpusSpec::Synthetic {
            classes: 4,
            per_class: 1000,
            dim: 16,
            sigma: 1.0,
            center_distance: 1.6,
            label_noise: 0.0,
            seed: 101,
        },
        arch: ArchSpec::Mlp { hidden: vec![128, 128] },
        // Memorization regime: train accuracy reaches 1.0 while the task's
        // overlap keeps test accuracy near 0.5, so membership leaks hard.
        train: TrainSection {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            early_stop_patience: 0,
        },
        attack: AttackSection::default(),
        unlearn: UnlearnSection {
            lambda2: 0.98,
            learning_rate: 0.1,
            max_epochs: 80,
            batch_size: 32,
            stop_threshold: None,
        },
    }
}

/// Autodiff vs central differences on a conv+dense+softmax stack.
fn gradient_check() -> (f64, f64) {
    let t0 = Instant::now();
    let corpus = make_synthetic(&SyntheticSpec {
        classes: 3,
        per_class: 3,
        dim: 36,
        sigma: 1.0,
        center_distance: 2.0,
        label_noise: 0.0,
        seed: 13,
    })
    .unwrap();
    let net = arch::small_cnn(5, [1, 6, 6], &[4], 16, 3).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (batch, labels) = corpus.batch(&idx).unwrap();

    let (probs, trace) = net.forward_traced(&batch).unwrap();
    let d = remi::loss::cross_entropy_grad(&probs, &labels).unwrap();
    let (analytic, _) = net.backward_from(&trace, &d).unwrap();

    let numeric = fd_gradient(&net, 1e-5, |n| {
        let p = n.forward(&batch)?;
        cross_entropy(&p, &labels)
    })
    .unwrap();
    let check = compare_gradients(&analytic, &numeric, 1e-3);
    (check.max_rel_err, t0.elapsed().as_secs_f64())
}

/// Trains a small CNN on blob images for 50 epochs and fits a white-box
/// membership probe on its features; returns the probe's held-out accuracy.
fn cnn_attack_signal() -> (f64, f64) {
    let t0 = Instant::now();
    let corpus = make_synthetic(&SyntheticSpec {
        classes: 4,
        per_class: 250,
        dim: 64,
        sigma: 1.0,
        center_distance: 2.0,
        label_noise: 0.0,
        seed: 23,
    })
    .unwrap();
    let plan = remi::data::split(&corpus, 17).unwrap();
    let net = arch::small_cnn(3, [1, 8, 8], &[6], 24, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 32,
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 0.0,
        seed: 29,
        early_stop_patience: None,
    };
    let (net, _) = train(net, &corpus, &plan, &cfg).unwrap();
    let spec = FeatureSpec::white_box();
    let records =
        build_attack_dataset(&net, &corpus, &plan.target_train, &plan.target_test, &spec).unwrap();
    let (probe, _) = train_privacy_model(
        &records,
        &spec,
        corpus.class_count,
        Variant::Mf,
        &remi::privacy::attack_train_defaults(31),
    )
    .unwrap();
    (probe.held_out_accuracy, t0.elapsed().as_secs_f64())
}

/// Reruns unlearning at ratio 0.10 with the privacy term switched off,
/// reusing the grid's persisted target, guide, and forget set.
fn ablation(cfg: &ExperimentConfig) -> (f64, f64) {
    let layout = Layout::new(&cfg.output_dir);
    let corpus = cfg.build_corpus().unwrap();
    let plan = SplitPlan::load(&layout.split_plan()).unwrap();
    let target = checkpoint::load(&layout.target(GRID_SEED)).unwrap();
    let (net_path, sidecar) = layout.probe(GRID_SEED, "guide_wb");
    let guide = load_privacy_model(&net_path, &sidecar).unwrap();
    let forget = ForgetSet::load(&layout.forget_set(GRID_SEED, 0.10)).unwrap();

    let pre = member_rate(&probe_probs(&guide, &target, &corpus, &forget.indices).unwrap());
    let ucfg = UnlearnConfig {
        lambda2: 0.0,
        learning_rate: cfg.unlearn.learning_rate,
        max_epochs: cfg.unlearn.max_epochs,
        batch_size: cfg.unlearn.batch_size,
        // The usual stop rule watches the probe, which this run leaves
        // untouched by design; pin it so every epoch executes.
        stop_threshold: Some(0.0),
        seed: 991,
    };
    let (after_net, _) =
        remi_unlearn(&target, &corpus, &forget.indices, &plan.target_test, &guide, &ucfg).unwrap();
    let after = member_rate(&probe_probs(&guide, &after_net, &corpus, &forget.indices).unwrap());
    (pre, after)
}

fn build_fixture() -> Fixture {
    let (grad_max_rel_err, grad_secs) = gradient_check();
    let (cnn_probe_acc, cnn_secs) = cnn_attack_signal();

    let dir = tempfile::tempdir().unwrap();
    let cfg = grid_config(&dir.path().join("run1"));
    let report = run_experiment(&cfg).unwrap();
    let rerun = run_experiment(&grid_config(&dir.path().join("run2"))).unwrap();
    let (ablation_pre, ablation_after) = ablation(&cfg);

    Fixture {
        grad_max_rel_err,
        grad_secs,
        cnn_probe_acc,
        cnn_secs,
        report,
        rerun,
        ablation_pre,
        ablation_after,
        _dir: dir,
    }
}

fn verdict(name: &str, pass: bool, detail: &str) {
    println!("criterion {name}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {name} failed: {detail}");
}

fn row(report: &RunReport, ratio: f64) -> &ReportRow {
    report
        .rows
        .iter()
        .find(|r| r.ratio == ratio)
        .unwrap_or_else(|| panic!("no report row at ratio {ratio}"))
}

fn val(row: &ReportRow, column: &str) -> f64 {
    row.value(column)
        .unwrap_or_else(|| panic!("row ratio {} missing {column} ({})", row.ratio, row.status))
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let f = fixture();
    let pass = f.grad_max_rel_err <= 1e-4 && f.grad_secs < 10.0;
    verdict(
        "01 gradient-correctness",
        pass,
        &format!("max rel err {:.3e} over conv+dense+softmax in {:.2}s", f.grad_max_rel_err, f.grad_secs),
    );
}

#[test]
fn criterion_02_membership_signal_exists() {
    let f = fixture();
    let pass = f.cnn_probe_acc >= 0.70 && f.cnn_secs < 600.0;
    verdict(
        "02 attack-signal",
        pass,
        &format!("white-box probe held-out accuracy {:.3} in {:.1}s", f.cnn_probe_acc, f.cnn_secs),
    );
}

#[test]
fn criterion_03_unlearning_halves_probe_accuracy() {
    let f = fixture();
    let mut detail = String::new();
    let mut pass = true;
    for ratio in [0.01, 0.10] {
        let r = row(&f.report, ratio);
        let before = val(r, "guide_acc_df_before");
        let after = val(r, "guide_acc_df_after");
        let gap = (val(r, "mean_prob_df_after") - val(r, "mean_prob_do_original")).abs();
        let secs = val(r, "t_unlearn_seconds");
        pass &= after <= 0.5 * before && gap <= 0.15 && secs < 900.0;
        detail.push_str(&format!(
            "ratio {ratio}: probe {before:.3}->{after:.3}, prob gap {gap:.3}, {secs:.1}s; "
        ));
    }
    verdict("03 unlearning-efficacy", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_04_test_accuracy_holds() {
    let f = fixture();
    let mut detail = String::new();
    let mut pass = true;
    for r in &f.report.rows {
        let before = val(r, "acc_test_before");
        let after = val(r, "acc_test_after");
        pass &= after >= before - 0.10;
        detail.push_str(&format!("ratio {}: test {before:.3}->{after:.3}; ", r.ratio));
    }
    verdict("04 fidelity", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_05_probability_distributions_converge() {
    let f = fixture();
    let mut detail = String::new();
    let mut pass = true;
    for r in &f.report.rows {
        let before = val(r, "kl_before");
        let after = val(r, "kl_after");
        pass &= after < before;
        detail.push_str(&format!("ratio {}: kl {before:.4}->{after:.4}; ", r.ratio));
    }
    let fit = fit_gaussian(&[0.2, 0.4, 0.6, 0.8]).unwrap();
    let self_kl = kl_gaussian(&fit, &fit);
    pass &= self_kl == 0.0;
    detail.push_str(&format!("self-kl {self_kl}"));
    verdict("05 kl-direction", pass, &detail);
}

#[test]
fn criterion_06_matches_retraining_baseline() {
    let f = fixture();
    let mut detail = String::new();
    let mut pass = true;
    for r in &f.report.rows {
        let retrain_df = val(r, "guide_acc_df_retrain");
        let retrain_do = val(r, "guide_rate_do_retrain");
        let after = val(r, "guide_acc_df_after");
        pass &= (retrain_df - retrain_do).abs() <= 0.15 && (after - retrain_df).abs() <= 0.2;
        detail.push_str(&format!(
            "ratio {}: retrain df {retrain_df:.3} vs do {retrain_do:.3}, ours {after:.3}; ",
            r.ratio
        ));
    }
    verdict("06 baseline-parity", pass, detail.trim_end_matches("; "));
}

#[test]
fn criterion_07_unlearning_beats_retraining_clock() {
    let f = fixture();
    let mut detail = String::new();
    let mut pass = true;
    for r in &f.report.rows {
        let tu = val(r, "t_unlearn_seconds");
        let tr = val(r, "t_retrain_seconds");
        pass &= tu < tr;
        detail.push_str(&format!("ratio {}: {tu:.2}s vs retrain {tr:.2}s; ", r.ratio));
    }
    let speedup = val(row(&f.report, 0.01), "speedup");
    pass &= speedup >= 2.0;
    detail.push_str(&format!("speedup at 0.01 = {speedup:.1}x"));
    verdict("07 latency", pass, &detail);
}

#[test]
fn criterion_08_transfer_is_asymmetric() {
    let f = fixture();
    let r = row(&f.report, 0.01);
    let bb_drop = val(r, "eval_bb_df_before") - val(r, "eval_bb_df_after_wb_guided");
    let wb_drop = val(r, "eval_wb_df_before") - val(r, "eval_wb_df_after_bb_guided");
    // The asserted direction: a white-box-guided run must defeat the
    // independently trained black-box evaluator. The reverse run is allowed
    // to leave the white-box evaluator strong, so it is reported, not gated.
    let pass = bb_drop >= 0.20;
    verdict(
        "08 cross-attack",
        pass,
        &format!(
            "white-box-guided run drops black-box evaluator {bb_drop:.3} (need >= 0.20); black-box-guided run drops white-box evaluator {wb_drop:.3} (informational)"
        ),
    );
}

#[test]
fn criterion_09_reruns_are_bit_exact() {
    let f = fixture();
    let mut pass = f.report.rows.len() == f.rerun.rows.len();
    let mut diffs = Vec::new();
    for (a, b) in f.report.rows.iter().zip(&f.rerun.rows) {
        pass &= a.seed == b.seed && a.ratio == b.ratio && a.status == b.status;
        for (i, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
            if TIMING_COLUMNS.contains(&i) {
                continue;
            }
            if x != y {
                pass = false;
                diffs.push(format!("ratio {} {}", a.ratio, VALUE_COLUMNS[i]));
            }
        }
    }
    let detail = if diffs.is_empty() {
        format!(
            "{} rows x {} non-timing columns identical across independent reruns",
            f.report.rows.len(),
            VALUE_COLUMNS.len() - TIMING_COLUMNS.len()
        )
    } else {
        format!("columns differ: {}", diffs.join(", "))
    };
    verdict("09 determinism", pass, &detail);
}

#[test]
fn criterion_10_privacy_term_is_the_active_ingredient() {
    let f = fixture();
    let pass = (f.ablation_after - f.ablation_pre).abs() <= 0.1;
    verdict(
        "10 ablation",
        pass,
        &format!(
            "lambda2=0 leaves probe accuracy {:.3} (pre {:.3})",
            f.ablation_after, f.ablation_pre
        ),
    );
}

#[test]
fn grid_runs_complete() {
    let f = fixture();
    let bad: Vec<String> = f
        .report
        .rows
        .iter()
        .filter(|r| r.status != "complete")
        .map(|r| format!("ratio {}: {}", r.ratio, r.status))
        .collect();
    assert!(bad.is_empty(), "incomplete cells: {bad:?}; failures: {:?}", f.report.failures);
}
