//! Membership probes: small classifiers that read attack features and output
//! the probability a sample was in the probed model's training set.
//!
//! Two variants share one mechanism. `Mia` is trained on a shadow model's
//! features, so it transfers to targets the adversary never saw inside.
//! `Mf` (model fingerprinting) is trained on the target's own features and is
//! the sharper probe the unlearning loop both optimizes against and reports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::features::{extract_all, AttackFeatureRecord, FeatureSpec};
use crate::net::{arch, Network};
use crate::rng::{self, derive};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_on, TrainConfig, TrainLog};

use rand::seq::SliceRandom;

const SPLIT_TAG: u64 = 0x6d69_615f_7370_6c74;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Membership inference: trained on shadow-model features.
    Mia,
    /// Model fingerprinting: trained on the target's own features.
    Mf,
}

/// Argument floor for the log rescale of the loss feature; also its gradient
/// cap: d/dl ln(l + floor) ≤ 1/floor.
pub const LOSS_FLOOR: f64 = 1e-6;

/// Per-feature input conditioning for the probe, fitted on its training rows.
///
/// The loss column (when the spec carries one) is read as ln(loss + floor)
/// before standardizing: raw losses span [0, −ln ε] and standardizing that
/// range flattens the decisive gap between a memorized sample (1e-6-ish) and
/// a merely well-predicted unseen one (1e-2-ish) to nothing. On the log scale
/// that gap survives, and the chain rule factor 1/(loss+floor) keeps the
/// privacy-term gradient alive exactly where cross-entropy's own gradient
/// vanishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Column index of the loss feature, None when the spec omits it.
    #[serde(default)]
    pub log_loss_at: Option<usize>,
}

impl Normalizer {
    /// Population mean/std per column (after the loss rescale). Columns with
    /// std < 1e-6 keep scale 1 so constant features pass through centered
    /// instead of exploding.
    pub fn fit(rows: &[&[f64]], log_loss_at: Option<usize>) -> Result<(Normalizer, Vec<String>)> {
        if rows.is_empty() {
            return Err(Error::Input("cannot fit normalizer on no rows".into()));
        }
        let width = rows[0].len();
        if let Some(at) = log_loss_at {
            if at >= width {
                return Err(Error::Dimension(format!(
                    "loss column {at} outside feature width {width}"
                )));
            }
        }
        let n = rows.len() as f64;
        // Losses are nonnegative by construction; the clamp just keeps junk
        // input finite.
        let cond = |at: usize, v: f64| {
            if log_loss_at == Some(at) {
                (v.max(0.0) + LOSS_FLOOR).ln()
            } else {
                v
            }
        };
        let mut mean = vec![0.0; width];
        for row in rows {
            if row.len() != width {
                return Err(Error::Input("normalizer rows have mixed widths".into()));
            }
            for (at, (m, v)) in mean.iter_mut().zip(*row).enumerate() {
                *m += cond(at, *v);
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; width];
        for row in rows {
            for (at, ((s, v), m)) in var.iter_mut().zip(*row).zip(&mean).enumerate() {
                let cv = cond(at, *v);
                *s += (cv - m) * (cv - m);
            }
        }
        let mut warnings = Vec::new();
        let std: Vec<f64> = var
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let sd = (s / n).sqrt();
                if sd < 1e-6 {
                    warnings.push(format!("feature {i} is near-constant (std {sd:.2e}); scale pinned to 1"));
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok((Normalizer { mean, std, log_loss_at }, warnings))
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalizer fitted on width {}, got row of width {}",
                self.mean.len(),
                row.len()
            )));
        }
        Ok(row
            .iter()
            .enumerate()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|(((at, v), m), s)| {
                let cv = if self.log_loss_at == Some(at) {
                    (v.max(0.0) + LOSS_FLOOR).ln()
                } else {
                    *v
                };
                (cv - m) / s
            })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct PrivacyModel {
    pub net: Network,
    pub spec: FeatureSpec,
    pub variant: Variant,
    pub normalizer: Normalizer,
    pub held_out_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Everything but the probe network, stored next to its checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    variant: Variant,
    spec: FeatureSpec,
    normalizer: Normalizer,
    held_out_accuracy: f64,
    warnings: Vec<String>,
}

pub fn attack_train_defaults(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 200,
        batch_size: 64,
        learning_rate: 0.05,
        momentum: 0.9,
        weight_decay: 1e-4,
        seed,
        early_stop_patience: Some(30),
    }
}

/// Fits a probe on labeled feature records. A stratified 80/20 split supplies
/// the held-out accuracy estimate; the best-eval-loss weights are kept.
/// `class_count` is the probed task's K, anchoring the feature layout.
pub fn train_privacy_model(
    records: &[AttackFeatureRecord],
    spec: &FeatureSpec,
    class_count: usize,
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<(PrivacyModel, TrainLog)> {
    spec.validate()?;
    let mut member_rows: Vec<usize> = Vec::new();
    let mut nonmember_rows: Vec<usize> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        match r.membership {
            Some(true) => member_rows.push(i),
            Some(false) => nonmember_rows.push(i),
            None => return Err(Error::Input(format!("record {i} has no membership label"))),
        }
    }
    if member_rows.len() < 20 || nonmember_rows.len() < 20 {
        return Err(Error::Input(format!(
            "need >= 20 records per class, got {} members / {} nonmembers",
            member_rows.len(),
            nonmember_rows.len()
        )));
    }
    let width = records[0].features.len();
    let fixed = usize::from(spec.include_posterior) * class_count
        + usize::from(spec.include_pred_label) * class_count
        + usize::from(spec.include_loss);
    if width < fixed || (!spec.include_gradient && width != fixed) {
        return Err(Error::Dimension(format!(
            "records are {width} wide but the spec needs {fixed} non-gradient features for K={class_count}"
        )));
    }
    let layout = spec.layout(class_count, width - fixed);

    let mut shuffle_rng = rng::rng(derive(cfg.seed, SPLIT_TAG));
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for class_rows in [&mut member_rows, &mut nonmember_rows] {
        class_rows.shuffle(&mut shuffle_rng);
        let cut = class_rows.len() * 4 / 5;
        train_idx.extend_from_slice(&class_rows[..cut]);
        eval_idx.extend_from_slice(&class_rows[cut..]);
    }

    let train_rows: Vec<&[f64]> = train_idx.iter().map(|&i| records[i].features.as_slice()).collect();
    let (normalizer, warnings) = Normalizer::fit(&train_rows, layout.loss)?;

    let mut flat = Vec::with_capacity(records.len() * width);
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        flat.extend(normalizer.apply_row(&r.features)?);
        labels.push(usize::from(r.membership == Some(true)));
    }
    let corpus = Corpus::new(
        "attack-features",
        Tensor::from_vec(&[records.len(), width], flat)?,
        labels,
        2,
    )?;

    let probe = arch::mlp(derive(cfg.seed, 0x70_72_6f_62), width, &[64, 32], 2)?;
    let (net, log) = train_on(probe, &corpus, &train_idx, &eval_idx, cfg)?;
    let (_, held_out_accuracy) = evaluate(&net, &corpus, &eval_idx)?;

    Ok((PrivacyModel { net, spec: spec.clone(), variant, normalizer, held_out_accuracy, warnings }, log))
}

/// P(member) for one raw (unstandardized) feature vector.
pub fn attack_prob(model: &PrivacyModel, features: &[f64]) -> Result<f64> {
    let row = model.normalizer.apply_row(features)?;
    let batch = Tensor::from_vec(&[1, row.len()], row)?;
    let probs = model.net.forward(&batch)?;
    Ok(probs.row(0)[1])
}

pub fn attack_probs(model: &PrivacyModel, records: &[AttackFeatureRecord]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(512) {
        let width = model.normalizer.mean.len();
        let mut flat = Vec::with_capacity(chunk.len() * width);
        for r in chunk {
            flat.extend(model.normalizer.apply_row(&r.features)?);
        }
        let batch = Tensor::from_vec(&[chunk.len(), width], flat)?;
        let probs = model.net.forward(&batch)?;
        for i in 0..chunk.len() {
            out.push(probs.row(i)[1]);
        }
    }
    Ok(out)
}

/// Fraction of labeled records the probe classifies correctly at 0.5.
pub fn attack_accuracy(model: &PrivacyModel, records: &[AttackFeatureRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("no records to score".into()));
    }
    let probs = attack_probs(model, records)?;
    let mut hits = 0usize;
    for (p, r) in probs.iter().zip(records) {
        let truth = r
            .membership
            .ok_or_else(|| Error::Input("accuracy needs membership labels".into()))?;
        if (*p >= 0.5) == truth {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Fraction of probabilities at or above the 0.5 member threshold.
pub fn member_rate(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().filter(|p| **p >= 0.5).count() as f64 / probs.len() as f64
}

/// Extracts features for `indices` under the probed net, then scores them.
pub fn probe_probs(
    model: &PrivacyModel,
    probed: &Network,
    corpus: &Corpus,
    indices: &[usize],
) -> Result<Vec<f64>> {
    let records = extract_all(probed, corpus, indices, &model.spec)?;
    attack_probs(model, &records)
}

pub fn save_privacy_model(model: &PrivacyModel, net_path: &Path, sidecar_path: &Path) -> Result<()> {
    checkpoint::save(&model.net, net_path)?;
    let sidecar = Sidecar {
        variant: model.variant,
        spec: model.spec.clone(),
        normalizer: model.normalizer.clone(),
        held_out_accuracy: model.held_out_accuracy,
        warnings: model.warnings.clone(),
    };
    if let Some(dir) = sidecar_path.parent() {
        std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Format(format!("sidecar to json: {e}")))?;
    std::fs::write(sidecar_path, json).map_err(Error::at(sidecar_path))?;
    Ok(())
}

pub fn load_privacy_model(net_path: &Path, sidecar_path: &Path) -> Result<PrivacyModel> {
    let net = checkpoint::load(net_path)?;
    let text = std::fs::read_to_string(sidecar_path).map_err(Error::at(sidecar_path))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("sidecar json: {e}")))?;
    if net.input_shape() != [sidecar.normalizer.mean.len()] {
        return Err(Error::Format(format!(
            "probe net expects input {:?} but normalizer has width {}",
            net.input_shape(),
            sidecar.normalizer.mean.len()
        )));
    }
    Ok(PrivacyModel {
        net,
        spec: sidecar.spec,
        variant: sidecar.variant,
        normalizer: sidecar.normalizer,
        held_out_accuracy: sidecar.held_out_accuracy,
        warnings: sidecar.warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and std (ddof=1, floored at 1e-6).
pub fn fit_gaussian(values: &[f64]) -> Result<GaussianFit> {
    if values.len() < 2 {
        return Err(Error::Input(format!("gaussian fit needs >= 2 values, got {}", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(GaussianFit { mean, std: var.sqrt().max(1e-6) })
}

/// KL between two Gaussians assuming a shared scale: the mean gap squared
/// over twice the pooled variance. Zero exactly when the fits coincide.
pub fn kl_gaussian(p: &GaussianFit, q: &GaussianFit) -> f64 {
    let pooled_var = (p.std * p.std + q.std * q.std) / 2.0;
    ((p.mean - q.mean) * (p.mean - q.mean) / (2.0 * pooled_var)).max(0.0)
}

/// Closed-form KL(p || q) for univariate Gaussians.
pub fn kl_gaussian_general(p: &GaussianFit, q: &GaussianFit) -> f64 {
    let r = (q.std / p.std).ln();
    let num = p.std * p.std + (p.mean - q.mean) * (p.mean - q.mean);
    (r + num / (2.0 * q.std * q.std) - 0.5).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::randn;
    use proptest::prelude::*;

    /// Two well-separated 5-d Gaussian clouds labeled member/nonmember.
    fn separable_records(n_per_class: usize, seed: u64) -> Vec<AttackFeatureRecord> {
        let mut r = rng::rng(seed);
        let mut records = Vec::new();
        for i in 0..2 * n_per_class {
            let member = i < n_per_class;
            let center = if member { 1.0 } else { -1.0 };
            let features: Vec<f64> = (0..5).map(|_| center + 0.3 * randn(&mut r)).collect();
            records.push(AttackFeatureRecord { features, membership: Some(member), source_index: i });
        }
        records
    }

    fn shuffled_label_records(n_per_class: usize, seed: u64) -> Vec<AttackFeatureRecord> {
        let mut records = separable_records(n_per_class, seed);
        // Reassign labels independently of the features: alternate classes
        // while walking the feature rows in a shuffled order.
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng::rng(derive(seed, 999)));
        for (k, &i) in order.iter().enumerate() {
            records[i].membership = Some(k % 2 == 0);
        }
        records
    }

    #[test]
    fn probe_separates_separable_features() {
        let records = separable_records(200, 3);
        let spec = FeatureSpec::black_box();
        let cfg = TrainConfig { epochs: 40, ..attack_train_defaults(7) };
        let (model, _) = train_privacy_model(&records, &spec, 2, Variant::Mf, &cfg).unwrap();
        assert!(model.held_out_accuracy >= 0.95, "held out acc {}", model.held_out_accuracy);
        let acc = attack_accuracy(&model, &records).unwrap();
        assert!(acc >= 0.95, "train-set acc {acc}");
    }

    #[test]
    fn shuffled_labels_give_chance_held_out_accuracy() {
        let records = shuffled_label_records(250, 11);
        let spec = FeatureSpec::black_box();
        let cfg = TrainConfig { epochs: 40, ..attack_train_defaults(7) };
        let (model, _) = train_privacy_model(&records, &spec, 2, Variant::Mf, &cfg).unwrap();
        assert!(
            (model.held_out_accuracy - 0.5).abs() <= 0.12,
            "label-independent features should score near chance, got {}",
            model.held_out_accuracy
        );
    }

    #[test]
    fn near_constant_feature_warns_but_trains() {
        let mut records = separable_records(30, 5);
        for r in records.iter_mut() {
            r.features[2] = 4.25;
        }
        let cfg = TrainConfig { epochs: 5, ..attack_train_defaults(1) };
        let (model, _) =
            train_privacy_model(&records, &FeatureSpec::black_box(), 2, Variant::Mia, &cfg).unwrap();
        assert_eq!(model.warnings.len(), 1);
        assert!(model.warnings[0].contains("feature 2"));
        assert_eq!(model.normalizer.std[2], 1.0);
    }

    #[test]
    fn too_few_records_per_class_is_input_error() {
        let records = separable_records(19, 2);
        let cfg = attack_train_defaults(0);
        let err = train_privacy_model(&records, &FeatureSpec::black_box(), 2, Variant::Mf, &cfg);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn unlabeled_record_is_rejected() {
        let mut records = separable_records(25, 2);
        records[3].membership = None;
        let cfg = attack_train_defaults(0);
        let err = train_privacy_model(&records, &FeatureSpec::black_box(), 2, Variant::Mf, &cfg);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn batch_probs_match_single_sample_probs() {
        let records = separable_records(40, 9);
        let cfg = TrainConfig { epochs: 10, ..attack_train_defaults(3) };
        let (model, _) =
            train_privacy_model(&records, &FeatureSpec::black_box(), 2, Variant::Mf, &cfg).unwrap();
        let batch = attack_probs(&model, &records[..7]).unwrap();
        for (i, b) in batch.iter().enumerate() {
            let single = attack_prob(&model, &records[i].features).unwrap();
            assert_eq!(*b, single);
            assert!((0.0..=1.0).contains(b));
        }
    }

    #[test]
    fn member_rate_counts_threshold_crossings() {
        assert_eq!(member_rate(&[0.9, 0.5, 0.49, 0.1]), 0.5);
        assert_eq!(member_rate(&[]), 0.0);
    }

    #[test]
    fn save_load_roundtrip_preserves_probs_exactly() {
        let records = separable_records(30, 21);
        let cfg = TrainConfig { epochs: 8, ..attack_train_defaults(5) };
        let (model, _) =
            train_privacy_model(&records, &FeatureSpec::white_box(), 2, Variant::Mia, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let net_path = dir.path().join("probe.remi");
        let side_path = dir.path().join("probe.json");
        save_privacy_model(&model, &net_path, &side_path).unwrap();
        let loaded = load_privacy_model(&net_path, &side_path).unwrap();
        assert_eq!(loaded.variant, Variant::Mia);
        assert_eq!(loaded.spec, model.spec);
        assert_eq!(loaded.held_out_accuracy, model.held_out_accuracy);
        for r in &records[..5] {
            assert_eq!(
                attack_prob(&loaded, &r.features).unwrap(),
                attack_prob(&model, &r.features).unwrap()
            );
        }
    }

    #[test]
    fn normalizer_standardizes_training_columns() {
        let rows_owned = vec![vec![1.0, 10.0], vec![3.0, 30.0], vec![5.0, 50.0]];
        let rows: Vec<&[f64]> = rows_owned.iter().map(|r| r.as_slice()).collect();
        let (norm, warnings) = Normalizer::fit(&rows, None).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(norm.mean, vec![3.0, 30.0]);
        // population std of {1,3,5} = sqrt(8/3)
        assert!((norm.std[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z = norm.apply_row(&[3.0, 30.0]).unwrap();
        assert_eq!(z, vec![0.0, 0.0]);
    }

    #[test]
    fn gaussian_fit_matches_hand_computation() {
        let fit = fit_gaussian(&[0.0, 1.0]).unwrap();
        assert_eq!(fit.mean, 0.5);
        assert_eq!(fit.std, 0.7071067811865476); // sqrt(1/2), ddof=1
        assert!(fit_gaussian(&[0.3]).is_err());
    }

    #[test]
    fn unit_mean_gap_has_kl_half() {
        let p = GaussianFit { mean: 1.0, std: 1.0 };
        let q = GaussianFit { mean: 0.0, std: 1.0 };
        assert_eq!(kl_gaussian(&p, &q), 0.5);
        assert_eq!(kl_gaussian_general(&p, &q), 0.5);
    }

    #[test]
    fn identical_fits_have_exactly_zero_kl() {
        let f = fit_gaussian(&[0.2, 0.4, 0.9, 0.3]).unwrap();
        assert_eq!(kl_gaussian(&f, &f), 0.0);
        assert_eq!(kl_gaussian_general(&f, &f), 0.0);
    }

    proptest! {
        #[test]
        fn kl_is_never_negative(
            mp in -5.0..5.0f64, mq in -5.0..5.0f64,
            sp in 0.01..3.0f64, sq in 0.01..3.0f64,
        ) {
            let p = GaussianFit { mean: mp, std: sp };
            let q = GaussianFit { mean: mq, std: sq };
            prop_assert!(kl_gaussian(&p, &q) >= 0.0);
            prop_assert!(kl_gaussian_general(&p, &q) >= 0.0);
        }

        #[test]
        fn wider_mean_gap_never_decreases_pooled_kl(
            gap in 0.0..3.0f64, extra in 0.0..2.0f64, s in 0.05..2.0f64,
        ) {
            let q = GaussianFit { mean: 0.0, std: s };
            let near = GaussianFit { mean: gap, std: s };
            let far = GaussianFit { mean: gap + extra, std: s };
            prop_assert!(kl_gaussian(&far, &q) >= kl_gaussian(&near, &q));
        }
    }
}
