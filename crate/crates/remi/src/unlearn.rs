//! Guided unlearning: fine-tune a trained network so its forget-set samples
//! become indistinguishable from out-of-sample data under a frozen membership
//! probe, while out-of-sample cross-entropy keeps the model useful.
//!
//! Each step minimizes  λ₁·(L_Df + L_Do) + λ₂·(−ln(1 − p̄ + ε))  where p̄ is
//! the probe's mean member probability over the forget part of the batch.
//! The probe is never updated; gradient reaches the network only through the
//! differentiable feature blocks (posterior and per-sample loss). One-hot
//! predictions and gradient-norm features are recomputed from the live
//! weights every step but contribute no gradient.
//!
//! `naive_retrain` is the gold-standard baseline: a fresh model trained on
//! the remaining data only.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Corpus, SplitPlan};
use crate::error::{Error, Result};
use crate::features::{gradient_block, stride_subsample, FeatureSpec};
use crate::loss::{cross_entropy, cross_entropy_grad, per_sample_cross_entropy, EPS};
use crate::net::{argmax_rows, Network};
use crate::optim::Sgd;
use crate::privacy::{member_rate, probe_probs, PrivacyModel};
use crate::rng::{derive, epoch_rng};
use crate::tensor::Tensor;
use crate::train::{evaluate, train_on, TrainConfig, TrainLog};

const FORGET_SHUFFLE_TAG: u64 = 0x756e_6c6e_5f64_66;
const RETAIN_SHUFFLE_TAG: u64 = 0x756e_6c6e_5f64_6f;
/// At most this many out-of-sample probes feed the auto stop threshold.
const THRESHOLD_PROBE_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnConfig {
    /// Weight of the privacy term; the fidelity weight is 1 − lambda2.
    pub lambda2: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop once probe accuracy on the forget set is at or below this.
    /// None derives it each epoch: probe member-rate on out-of-sample + 0.05.
    pub stop_threshold: Option<f64>,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> UnlearnConfig {
        UnlearnConfig {
            lambda2: 0.98,
            learning_rate: 0.01,
            max_epochs: 50,
            batch_size: 32,
            stop_threshold: None,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn lambda1(&self) -> f64 {
        1.0 - self.lambda2
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda2) || !self.lambda2.is_finite() {
            return Err(Error::Config(format!("lambda2 must be in [0,1], got {}", self.lambda2)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2 to mix forget and out-of-sample data".into()));
        }
        if let Some(t) = self.stop_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("stop threshold must be in [0,1], got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnRow {
    pub epoch: usize,
    pub fidelity_loss: f64,
    pub privacy_loss: f64,
    pub mf_acc_df: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnTrace {
    /// Row 0 is the pre-unlearning state; one row per completed epoch after.
    pub rows: Vec<UnlearnRow>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// The stop threshold in force when the loop ended.
    pub threshold: f64,
    pub wall_time_seconds: f64,
    /// Portion of wall time spent on the privacy term (feature assembly,
    /// probe forward/backward). Always <= wall_time_seconds.
    pub privacy_time_seconds: f64,
}

impl UnlearnTrace {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
        }
        let mut out = String::from("epoch,fidelity_loss,privacy_loss,mf_acc_df,test_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.fidelity_loss, r.privacy_loss, r.mf_acc_df, r.test_acc
            ));
        }
        std::fs::write(path, out).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Vec<UnlearnRow>> {
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty trace csv".into()))?;
        if header != "epoch,fidelity_loss,privacy_loss,mf_acc_df,test_acc" {
            return Err(Error::Format(format!("unexpected trace header '{header}'")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("trace row {i} has {} fields", f.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format(format!("trace row {i}: bad number '{s}'")))
            };
            rows.push(UnlearnRow {
                epoch: f[0].parse().map_err(|_| Error::Format(format!("trace row {i}: bad epoch")))?,
                fidelity_loss: num(f[1])?,
                privacy_loss: num(f[2])?,
                mf_acc_df: num(f[3])?,
                test_acc: num(f[4])?,
            });
        }
        Ok(rows)
    }
}

/// −ln(1 − p̄ + ε): strictly increasing in the mean member probability,
/// finite even at p̄ = 1 thanks to the clamp.
pub fn privacy_loss_value(mean_member_prob: f64) -> f64 {
    -(1.0 - mean_member_prob + EPS).ln()
}

/// Privacy loss of a raw feature batch under the probe.
pub fn privacy_loss(guide: &PrivacyModel, feature_rows: &[Vec<f64>]) -> Result<f64> {
    if feature_rows.is_empty() {
        return Err(Error::Input("privacy loss over zero features".into()));
    }
    let width = guide.normalizer.mean.len();
    let mut flat = Vec::with_capacity(feature_rows.len() * width);
    for row in feature_rows {
        flat.extend(guide.normalizer.apply_row(row)?);
    }
    let batch = Tensor::from_vec(&[feature_rows.len(), width], flat)?;
    let out = guide.net.forward(&batch)?;
    let p_bar = (0..feature_rows.len()).map(|i| out.row(i)[1]).sum::<f64>() / feature_rows.len() as f64;
    Ok(privacy_loss_value(p_bar))
}

/// One privacy-term evaluation on a forget batch, with the gradient routed
/// back to the probed network's output probabilities.
pub struct PrivacyStep {
    pub loss: f64,
    pub mean_member_prob: f64,
    /// d(privacy loss)/d(probs): zero except through unmasked blocks.
    pub d_probs: Tensor,
    /// Saturated probe with no usable gradient this step.
    pub dead_signal: bool,
}

/// Differentiable path of the privacy term. `probs` are the live posteriors
/// oft the forget batch; `grad_blocks` carry the detached gradient features
/// (one, possibly empty, row per sample) computed under the same weights.
pub fn privacy_step(
    guide: &PrivacyModel,
    probs: &Tensor,
    labels: &[usize],
    grad_blocks: &[Vec<f64>],
) -> Result<PrivacyStep> {
    let bf = probs.rows();
    let k = probs.row_len();
    if labels.len() != bf || grad_blocks.len() != bf {
        return Err(Error::Input("privacy step: batch parts disagree on sample count".into()));
    }
    let spec = &guide.spec;
    let grad_dims = if spec.include_gradient { grad_blocks[0].len() } else { 0 };
    let layout = spec.layout(k, grad_dims);

    let losses = per_sample_cross_entropy(probs, labels)?;
    let preds = argmax_rows(probs);
    let mut flat = Vec::with_capacity(bf * layout.len);
    for i in 0..bf {
        let mut row = vec![0.0; layout.len];
        if let Some(r) = &layout.posterior {
            row[r.clone()].copy_from_slice(probs.row(i));
        }
        if let Some(r) = &layout.pred_label {
            row[r.start + preds[i]] = 1.0;
        }
        if let Some(at) = layout.loss {
            row[at] = losses[i];
        }
        if let Some(r) = &layout.gradient {
            row[r.clone()].copy_from_slice(&grad_blocks[i]);
        }
        flat.extend(guide.normalizer.apply_row(&row)?);
    }
    let feats = Tensor::from_vec(&[bf, layout.len], flat)?;
    let (g_out, g_trace) = guide.net.forward_traced(&feats)?;
    let mean_member_prob = (0..bf).map(|i| g_out.row(i)[1]).sum::<f64>() / bf as f64;
    let loss = privacy_loss_value(mean_member_prob);

    // dL/dm_i = 1/((1−p̄+ε)·bf) for every sample's member probability.
    let d_m = 1.0 / ((1.0 - mean_member_prob + EPS) * bf as f64);
    let mut d_gout = vec![0.0; bf * 2];
    for i in 0..bf {
        d_gout[i * 2 + 1] = d_m;
    }
    let (_, d_feats) = guide.net.backward_from(&g_trace, &Tensor::from_vec(&[bf, 2], d_gout)?)?;

    // Undo the standardization scale, then route block gradients to probs.
    let sd = &guide.normalizer.std;
    let mut d_probs = vec![0.0; bf * k];
    for i in 0..bf {
        let drow = d_feats.row(i);
        if spec.differentiable.posterior {
            if let Some(r) = &layout.posterior {
                for c in 0..k {
                    d_probs[i * k + c] += drow[r.start + c] / sd[r.start + c];
                }
            }
        }
        if spec.differentiable.loss {
            if let Some(at) = layout.loss {
                let y = labels[i];
                let p = probs.row(i)[y];
                // Matches the loss clamp: below ε the loss is constant.
                if p > EPS {
                    // Chain through the probe's log rescale of the loss
                    // column; 1/(l+floor) offsets cross-entropy's vanishing
                    // gradient on memorized samples.
                    let rescale = if guide.normalizer.log_loss_at == Some(at) {
                        1.0 / (losses[i] + crate::privacy::LOSS_FLOOR)
                    } else {
                        1.0
                    };
                    d_probs[i * k + y] += (drow[at] * rescale / sd[at]) * (-1.0 / p);
                }
            }
        }
    }
    let dead_signal = mean_member_prob >= 1.0 - 1e-9 && d_probs.iter().all(|v| *v == 0.0);
    Ok(PrivacyStep {
        loss,
        mean_member_prob,
        d_probs: Tensor::from_vec(&[bf, k], d_probs)?,
        dead_signal,
    })
}

/// Detached gradient features for each index under the current weights.
/// Empty rows when the probe's spec carries no gradient block.
pub fn forget_grad_blocks(
    net: &Network,
    corpus: &Corpus,
    indices: &[usize],
    spec: &FeatureSpec,
) -> Result<Vec<Vec<f64>>> {
    if !spec.include_gradient {
        return Ok(vec![Vec::new(); indices.len()]);
    }
    indices
        .iter()
        .map(|&i| {
            let (batch, labels) = corpus.batch(&[i])?;
            let (probs, trace) = net.forward_traced(&batch)?;
            let d = cross_entropy_grad(&probs, &labels)?;
            let (flat, _) = net.backward_from(&trace, &d)?;
            Ok(gradient_block(net, spec, &flat))
        })
        .collect()
}

/// L_Df + L_Do: the per-set mean cross-entropies summed.
pub fn fidelity_loss(net: &Network, corpus: &Corpus, d_f: &[usize], d_o: &[usize]) -> Result<f64> {
    let (loss_f, _) = evaluate(net, corpus, d_f)?;
    let (loss_o, _) = evaluate(net, corpus, d_o)?;
    Ok(loss_f + loss_o)
}

fn epoch_metrics(
    net: &Network,
    corpus: &Corpus,
    d_f: &[usize],
    d_o: &[usize],
    guide: &PrivacyModel,
    epoch: usize,
) -> Result<UnlearnRow> {
    let (loss_f, _) = evaluate(net, corpus, d_f)?;
    let (loss_o, test_acc) = evaluate(net, corpus, d_o)?;
    let probs_df = probe_probs(guide, net, corpus, d_f)?;
    let p_bar = probs_df.iter().sum::<f64>() / probs_df.len() as f64;
    Ok(UnlearnRow {
        epoch,
        fidelity_loss: loss_f + loss_o,
        privacy_loss: privacy_loss_value(p_bar),
        mf_acc_df: member_rate(&probs_df),
        test_acc,
    })
}

/// Unlearns `d_f` from a copy of `target`, guided by the frozen probe.
/// Joint batches draw from the forget and out-of-sample sets in proportion
/// to their sizes, with at least one sample from each per batch.
pub fn remi_unlearn(
    target: &Network,
    corpus: &Corpus,
    d_f: &[usize],
    d_o: &[usize],
    guide: &PrivacyModel,
    cfg: &UnlearnConfig,
) -> Result<(Network, UnlearnTrace)> {
    cfg.validate()?;
    if d_f.is_empty() || d_o.is_empty() {
        return Err(Error::Input("unlearning needs nonempty forget and out-of-sample sets".into()));
    }
    let forget: HashSet<usize> = d_f.iter().copied().collect();
    if d_o.iter().any(|i| forget.contains(i)) {
        return Err(Error::Input("forget and out-of-sample sets overlap".into()));
    }
    let guide_params_before = guide.net.param_vector();

    let started = Instant::now();
    let mut privacy_secs = 0.0;
    let mut net = target.clone();
    let lambda2 = cfg.lambda2;
    let lambda1 = 1.0 - lambda2;
    let mut opt = Sgd::new(cfg.learning_rate, 0.0, 0.0)?;

    let (nf, no) = (d_f.len(), d_o.len());
    let bs = cfg.batch_size.min(nf + no).max(2);
    let steps = (nf + no).div_ceil(bs);
    // Proportional forget draw per batch, clamped so both parts are nonempty.
    let bf = ((bs * nf + (nf + no) / 2) / (nf + no)).clamp(1, bs - 1);
    let bo = bs - bf;

    let threshold_probe = stride_subsample(d_o, no.min(THRESHOLD_PROBE_CAP));
    let resolve_threshold = |net: &Network| -> Result<f64> {
        match cfg.stop_threshold {
            Some(t) => Ok(t),
            None => {
                let probs = probe_probs(guide, net, corpus, &threshold_probe)?;
                Ok((member_rate(&probs) + 0.05).min(1.0))
            }
        }
    };

    let mut rows = vec![epoch_metrics(&net, corpus, d_f, d_o, guide, 0)?];
    let mut threshold = resolve_threshold(&net)?;
    let mut stopped_early = rows[0].mf_acc_df <= threshold;

    if !stopped_early {
        for epoch in 1..=cfg.max_epochs {
            let mut f_order = d_f.to_vec();
            f_order.shuffle(&mut epoch_rng(derive(cfg.seed, FORGET_SHUFFLE_TAG), epoch));
            let mut o_order = d_o.to_vec();
            o_order.shuffle(&mut epoch_rng(derive(cfg.seed, RETAIN_SHUFFLE_TAG), epoch));

            let mut dead_steps = 0usize;
            for step in 0..steps {
                let fi: Vec<usize> = (0..bf).map(|j| f_order[(step * bf + j) % nf]).collect();
                let oi: Vec<usize> = (0..bo).map(|j| o_order[(step * bo + j) % no]).collect();

                let (fb, fl) = corpus.batch(&fi)?;
                let (probs_f, trace_f) = net.forward_traced(&fb)?;
                let ce_f = cross_entropy(&probs_f, &fl)?;
                let mut d_probs_f = cross_entropy_grad(&probs_f, &fl)?;
                for v in d_probs_f.data.iter_mut() {
                    *v *= lambda1;
                }

                let mut step_privacy_loss = 0.0;
                if lambda2 > 0.0 {
                    let t_priv = Instant::now();
                    let grad_blocks = forget_grad_blocks(&net, corpus, &fi, &guide.spec)?;
                    let ps = privacy_step(guide, &probs_f, &fl, &grad_blocks)?;
                    step_privacy_loss = ps.loss;
                    for (d, g) in d_probs_f.data.iter_mut().zip(&ps.d_probs.data) {
                        *d += lambda2 * g;
                    }
                    if ps.dead_signal {
                        dead_steps += 1;
                    } else {
                        dead_steps = 0;
                    }
                    privacy_secs += t_priv.elapsed().as_secs_f64();
                }

                let (ob, ol) = corpus.batch(&oi)?;
                let (probs_o, trace_o) = net.forward_traced(&ob)?;
                let ce_o = cross_entropy(&probs_o, &ol)?;
                let total = lambda1 * (ce_f + ce_o) + lambda2 * step_privacy_loss;
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("step loss became {total} (fidelity {ce_f}+{ce_o}, privacy {step_privacy_loss})"),
                    });
                }
                let mut d_probs_o = cross_entropy_grad(&probs_o, &ol)?;
                for v in d_probs_o.data.iter_mut() {
                    *v *= lambda1;
                }

                let (grads_f, _) = net.backward_from(&trace_f, &d_probs_f)?;
                let (grads_o, _) = net.backward_from(&trace_o, &d_probs_o)?;
                let grads: Vec<f64> = grads_f.iter().zip(&grads_o).map(|(a, b)| a + b).collect();
                opt.step(&mut net, &grads)?;
            }
            if lambda2 > 0.0 && dead_steps >= steps {
                return Err(Error::Stalled {
                    epoch,
                    reason: "probe saturated at member probability 1 with zero gradient for a full epoch".into(),
                });
            }

            rows.push(epoch_metrics(&net, corpus, d_f, d_o, guide, epoch)?);
            threshold = resolve_threshold(&net)?;
            if rows.last().unwrap().mf_acc_df <= threshold {
                stopped_early = true;
                break;
            }
        }
    }

    if guide.net.param_vector() != guide_params_before {
        return Err(Error::Numeric("probe parameters changed during unlearning".into()));
    }
    let trace = UnlearnTrace {
        epochs_run: rows.len() - 1,
        stopped_early,
        threshold,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        privacy_time_seconds: privacy_secs,
        rows,
    };
    Ok((net, trace))
}

/// Trains a fresh network on the remaining data only. `fresh` must be an
/// untrained network (same architecture and init seed as the original run
/// for a like-for-like baseline).
pub fn naive_retrain(
    fresh: Network,
    corpus: &Corpus,
    plan: &SplitPlan,
    d_f: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    let train_set: HashSet<usize> = plan.target_train.iter().copied().collect();
    if let Some(bad) = d_f.iter().find(|i| !train_set.contains(i)) {
        return Err(Error::Input(format!("forget index {bad} is not in the training split")));
    }
    let forget: HashSet<usize> = d_f.iter().copied().collect();
    let d_r: Vec<usize> =
        plan.target_train.iter().copied().filter(|i| !forget.contains(i)).collect();
    if d_r.is_empty() {
        return Err(Error::Input("retraining needs a nonempty remaining set".into()));
    }
    train_on(fresh, corpus, &d_r, &plan.target_test, cfg)
}
