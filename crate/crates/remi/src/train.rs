//! Supervised training of target and shadow models.
//!
//! Minibatch SGD over a corpus index set, cross-entropy on the softmax
//! output, deterministic per-epoch shuffles from the config seed. The log
//! carries one row per epoch; with early stopping enabled the weights with
//! the lowest eval loss are what comes back.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SplitPlan};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, cross_entropy_grad};
use crate::net::{argmax_rows, Network};
use crate::optim::Sgd;
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Input("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub wall_time_seconds: f64,
}

impl TrainLog {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
        }
        let mut out = String::from("epoch,train_loss,train_acc,eval_loss,eval_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.train_acc, r.eval_loss, r.eval_acc
            ));
        }
        std::fs::write(path, out).map_err(Error::at(path))?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Vec<EpochRow>> {
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty train log".into()))?;
        if header != "epoch,train_loss,train_acc,eval_loss,eval_acc" {
            return Err(Error::Format(format!("unexpected train log header '{header}'")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("train log row {i} has {} fields", fields.len())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Format(format!("train log row {i}: bad number '{s}'")))
            };
            rows.push(EpochRow {
                epoch: fields[0]
                    .parse()
                    .map_err(|_| Error::Format(format!("train log row {i}: bad epoch")))?,
                train_loss: parse(fields[1])?,
                train_acc: parse(fields[2])?,
                eval_loss: parse(fields[3])?,
                eval_acc: parse(fields[4])?,
            });
        }
        Ok(rows)
    }
}

/// Mean loss and accuracy of `net` on the given rows, in eval-sized chunks.
pub fn evaluate(net: &Network, corpus: &Corpus, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::Input("evaluate on empty index set".into()));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(512) {
        let (batch, labels) = corpus.batch(chunk)?;
        let probs = net.forward(&batch)?;
        loss_sum += cross_entropy(&probs, &labels)? * chunk.len() as f64;
        for (pred, truth) in argmax_rows(&probs).into_iter().zip(&labels) {
            if pred == *truth {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / indices.len() as f64, correct as f64 / indices.len() as f64))
}

/// Classification accuracy on the index set; argmax ties break low.
pub fn accuracy(net: &Network, corpus: &Corpus, indices: &[usize]) -> Result<f64> {
    Ok(evaluate(net, corpus, indices)?.1)
}

/// Trains on `train_idx`, reporting eval metrics on `eval_idx` each epoch.
pub fn train_on(
    mut net: Network,
    corpus: &Corpus,
    train_idx: &[usize],
    eval_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Input("training on empty index set".into()));
    }
    if eval_idx.is_empty() {
        return Err(Error::Input("eval index set is empty".into()));
    }
    let started = Instant::now();
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum, cfg.weight_decay)?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None; // (eval_loss, epoch, params)

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        order.shuffle(&mut rng::epoch_rng(cfg.seed, epoch));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = corpus.batch(chunk)?;
            let (probs, trace) = net.forward_traced(&batch)?;
            let batch_loss = cross_entropy(&probs, &labels)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, reason: format!("batch loss {batch_loss}") });
            }
            loss_sum += batch_loss * chunk.len() as f64;
            for (pred, truth) in argmax_rows(&probs).into_iter().zip(&labels) {
                if pred == *truth {
                    correct += 1;
                }
            }
            let d_probs = cross_entropy_grad(&probs, &labels)?;
            let (grads, _) = net.backward_from(&trace, &d_probs)?;
            net.store_grads(&grads)?;
            opt.step(&mut net, &grads)?;
        }

        let (eval_loss, eval_acc) = evaluate(&net, corpus, eval_idx)?;
        if !eval_loss.is_finite() {
            return Err(Error::Diverged { epoch, reason: format!("eval loss {eval_loss}") });
        }
        rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_acc: correct as f64 / train_idx.len() as f64,
            eval_loss,
            eval_acc,
        });

        if cfg.early_stop_patience.is_some() {
            let improved = best.as_ref().map_or(true, |(b, _, _)| eval_loss < *b);
            if improved {
                best = Some((eval_loss, epoch, net.param_vector()));
            } else if let (Some(patience), Some((_, best_epoch, _))) =
                (cfg.early_stop_patience, best.as_ref())
            {
                if epoch - best_epoch >= patience {
                    break;
                }
            }
        }
    }

    let mut best_epoch = rows.len() - 1;
    if let Some((_, epoch, params)) = best {
        net.set_param_vector(&params)?;
        best_epoch = epoch;
    }
    Ok((net, TrainLog { rows, best_epoch, wall_time_seconds: started.elapsed().as_secs_f64() }))
}

/// Trains the target model on its train split.
pub fn train(net: Network, corpus: &Corpus, plan: &SplitPlan, cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    train_on(net, corpus, &plan.target_train, &plan.target_test, cfg)
}

/// Trains the shadow model on the shadow split; refuses plans where the
/// shadow's member set overlaps the target's.
pub fn train_shadow(
    net: Network,
    corpus: &Corpus,
    plan: &SplitPlan,
    cfg: &TrainConfig,
) -> Result<(Network, TrainLog)> {
    let target: std::collections::HashSet<usize> = plan.target_train.iter().copied().collect();
    if plan.shadow_in.iter().any(|i| target.contains(i)) {
        return Err(Error::Input("shadow_in overlaps target_train".into()));
    }
    train_on(net, corpus, &plan.shadow_in, &plan.shadow_out, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, split, SyntheticSpec};
    use crate::net::arch;

    fn separable() -> (Corpus, SplitPlan) {
        let corpus = make_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 60,
            dim: 8,
            sigma: 1.0,
            center_distance: 6.0,
            label_noise: 0.0,
            seed: 5,
        })
        .unwrap();
        let plan = split(&corpus, 2).unwrap();
        (corpus, plan)
    }

    fn quick_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed,
            early_stop_patience: None,
        }
    }

    #[test]
    fn separable_blobs_train_to_high_accuracy() {
        let (corpus, plan) = separable();
        let net = arch::mlp(1, 8, &[16], 3).unwrap();
        let (trained, log) = train(net, &corpus, &plan, &quick_cfg(7)).unwrap();
        let last = log.rows.last().unwrap();
        assert!(last.train_acc >= 0.95, "train acc {}", last.train_acc);
        assert!(last.eval_acc >= 0.9, "eval acc {}", last.eval_acc);
        let acc = accuracy(&trained, &corpus, &plan.target_train).unwrap();
        assert!(acc >= 0.95);
    }

    #[test]
    fn train_loss_is_mostly_non_increasing_on_separable_data() {
        let (corpus, plan) = separable();
        let net = arch::mlp(2, 8, &[16], 3).unwrap();
        let (_, log) = train(net, &corpus, &plan, &quick_cfg(8)).unwrap();
        let violations = log
            .rows
            .windows(2)
            .filter(|w| w[1].train_loss > w[0].train_loss)
            .count();
        let budget = (log.rows.len() as f64 * 0.05).ceil() as usize;
        assert!(violations <= budget, "{violations} increases in {} epochs", log.rows.len());
    }

    #[test]
    fn zero_epochs_is_an_input_error() {
        let (corpus, plan) = separable();
        let net = arch::mlp(3, 8, &[4], 3).unwrap();
        let cfg = TrainConfig { epochs: 0, ..quick_cfg(0) };
        assert!(matches!(train(net, &corpus, &plan, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (corpus, plan) = separable();
        let run = |seed| {
            let net = arch::mlp(4, 8, &[8], 3).unwrap();
            let cfg = TrainConfig { epochs: 5, seed, ..quick_cfg(seed) };
            train(net, &corpus, &plan, &cfg).unwrap().0.param_vector()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn early_stopping_returns_lowest_eval_loss_weights() {
        // Tiny noisy training set + long run: eval loss turns back up.
        let corpus = make_synthetic(&SyntheticSpec {
            classes: 2,
            per_class: 24,
            dim: 6,
            sigma: 2.5,
            center_distance: 2.0,
            label_noise: 0.0,
            seed: 31,
        })
        .unwrap();
        let plan = split(&corpus, 13).unwrap();
        let net = arch::mlp(5, 6, &[32, 32], 2).unwrap();
        let cfg = TrainConfig {
            epochs: 120,
            batch_size: 4,
            learning_rate: 0.08,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 3,
            early_stop_patience: Some(15),
        };
        let (best_net, log) = train(net, &corpus, &plan, &cfg).unwrap();
        let best_row = &log.rows[log.best_epoch];
        let min_eval = log.rows.iter().map(|r| r.eval_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(best_row.eval_loss, min_eval);
        // Returned weights really are the best-epoch weights.
        let (eval_loss, _) = evaluate(&best_net, &corpus, &plan.target_test).unwrap();
        assert!((eval_loss - best_row.eval_loss).abs() < 1e-12);
        assert!(log.rows.len() <= 120);
    }

    #[test]
    fn shadow_training_uses_shadow_split() {
        let (corpus, plan) = separable();
        let net = arch::mlp(6, 8, &[8], 3).unwrap();
        let cfg = TrainConfig { epochs: 10, ..quick_cfg(11) };
        let (shadow, log) = train_shadow(net, &corpus, &plan, &cfg).unwrap();
        assert!(log.rows.last().unwrap().train_acc > 0.8);
        let acc_in = accuracy(&shadow, &corpus, &plan.shadow_in).unwrap();
        assert!(acc_in > 0.8);
    }

    #[test]
    fn shadow_training_rejects_overlapping_plan() {
        let (corpus, plan) = separable();
        let mut bad = plan.clone();
        bad.shadow_in[0] = plan.target_train[0];
        let net = arch::mlp(7, 8, &[8], 3).unwrap();
        assert!(matches!(
            train_shadow(net, &corpus, &bad, &quick_cfg(0)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn train_log_csv_roundtrip() {
        let log = TrainLog {
            rows: vec![
                EpochRow { epoch: 0, train_loss: 1.25, train_acc: 0.5, eval_loss: 1.5, eval_acc: 0.4 },
                EpochRow { epoch: 1, train_loss: 0.75, train_acc: 0.625, eval_loss: 1.1, eval_acc: 0.55 },
            ],
            best_epoch: 1,
            wall_time_seconds: 0.01,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.save_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,eval_loss,eval_acc\n"));
        assert_eq!(TrainLog::load_csv(&path).unwrap(), log.rows);
    }

    #[test]
    fn accuracy_matches_manual_count() {
        let (corpus, plan) = separable();
        let net = arch::mlp(8, 8, &[8], 3).unwrap();
        let idx = &plan.target_test;
        let (batch, labels) = corpus.batch(idx).unwrap();
        let preds = net.predict(&batch).unwrap();
        let manual = preds.iter().zip(&labels).filter(|(p, t)| p == t).count() as f64
            / idx.len() as f64;
        assert_eq!(accuracy(&net, &corpus, idx).unwrap(), manual);
    }
}
