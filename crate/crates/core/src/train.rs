//! Conversation-level training with best-on-dev checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::weighted_f1;
use crate::model::{argmax, ConversationInputs, ErcModel};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Filled on the last step of each epoch.
    pub dev_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the highest selection score; earliest wins ties.
    pub best: ErcModel<T>,
    pub last: ErcModel<T>,
    pub best_epoch: usize,
    pub best_score: f64,
    pub steps: usize,
    pub log: Vec<LogRow>,
}

/// Weighted-F1 of argmax predictions against gold labels.
pub fn score<T: Scalar>(model: &ErcModel<T>, data: &[ConversationInputs<T>]) -> Result<f64> {
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for conv in data {
        let labels = conv.gold.as_ref().ok_or_else(|| Error::Validation {
            conversation_id: conv.conversation_id.clone(),
            message: "scoring requires gold labels".into(),
        })?;
        let logits = model.logits(conv)?;
        for (i, &y) in labels.iter().enumerate() {
            gold.push(y);
            pred.push(argmax(logits.row(i)));
        }
    }
    weighted_f1(&gold, &pred)
}

/// Trains with one update per conversation, shuffling each epoch.
///
/// Selection uses `dev` when it is non-empty and the training set otherwise.
pub fn train<T: Scalar>(
    model: ErcModel<T>,
    train_set: &[ConversationInputs<T>],
    dev: &[ConversationInputs<T>],
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let cfg = model.config().clone();
    let select_on = if dev.is_empty() { train_set } else { dev };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let mut opt = cfg.optimizer.build(T::of(cfg.learning_rate));
    let mut current = model;
    let mut best = current.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::new();
    let mut step = 0;
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for (pos, &ci) in order.iter().enumerate() {
            let (g, bound, loss) = current.loss_graph(&train_set[ci], Some(&mut dropout_rng))?;
            let loss_value = g.scalar(loss).as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    message: format!("loss is {loss_value}"),
                });
            }
            let grads = bound.gradients(&g.backward(loss)?);
            if grads.values().any(|m| !m.all_finite()) {
                return Err(Error::Diverged {
                    step: step + 1,
                    message: "non-finite gradient".into(),
                });
            }
            opt.step(current.params_mut(), &grads);
            step += 1;
            let epoch_done = pos + 1 == order.len() || step >= max_steps;
            let dev_f1 = if epoch_done {
                let s = score(&current, select_on)?;
                if s > best_score {
                    best_score = s;
                    best_epoch = epoch;
                    best = current.clone();
                }
                Some(s)
            } else {
                None
            };
            log.push(LogRow {
                step,
                epoch,
                loss: loss_value,
                dev_weighted_f1: dev_f1,
            });
            if step >= max_steps {
                break 'epochs;
            }
        }
    }
    if best_score == f64::NEG_INFINITY {
        best_score = score(&current, select_on)?;
        best = current.clone();
    }
    Ok(TrainOutcome {
        best,
        last: current,
        best_epoch,
        best_score,
        steps: step,
        log,
    })
}

pub fn write_run_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
