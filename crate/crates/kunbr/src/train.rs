//! Memorization pretraining: adaptive-moment NLL descent until the model
//! reproduces every fact. Unlearning never uses this optimizer; it exists
//! only to manufacture the memorized starting checkpoint and to run the
//! fine-tuning attack.

use crate::corpus::{training_batches, DatasetSplits, Tokenizer};
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, loss_value, Batch, LossSpec};
use crate::model::{AdamState, FreezeMask, ParameterStore};
use crate::unlearn::LOSS_CEILING;

/// One row of the training loss trace.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
}

/// `steps` adaptive-moment updates cycling through `batches` in order.
/// Returns the loss trace; `steps = 0` leaves the model bit-identical.
pub fn adam_train(
    model: &mut ParameterStore,
    batches: &[Vec<crate::loss::Example>],
    lr: f64,
    steps: usize,
) -> Result<Vec<TrainRow>> {
    adam_train_until(model, batches, lr, steps, None)
}

/// As `adam_train`, but stops once the per-batch loss drops below
/// `stop_below` (checked on every step).
pub fn adam_train_until(
    model: &mut ParameterStore,
    batches: &[Vec<crate::loss::Example>],
    lr: f64,
    steps: usize,
    stop_below: Option<f64>,
) -> Result<Vec<TrainRow>> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(Error::Validation("adam_train requires non-empty batches".into()));
    }
    if lr <= 0.0 {
        return Err(Error::Validation("lr must be positive".into()));
    }
    let mask = FreezeMask::all(model);
    let mut adam = AdamState::new(model);
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: &Batch = &batches[step % batches.len()];
        let (loss, grads) = loss_and_gradients(model, batch, &LossSpec::Nll, &mask)?;
        if !loss.is_finite() || loss > LOSS_CEILING {
            return Err(Error::Diverged { step, loss });
        }
        adam.step(model, &grads, lr, &mask)?;
        trace.push(TrainRow { step, loss });
        if let Some(threshold) = stop_below {
            if loss < threshold {
                break;
            }
        }
    }
    Ok(trace)
}

/// Trains a fresh model until it memorizes every record in the splits
/// (mean NLL over the whole corpus below `target_nll`), erroring if the
/// budget runs out first.
pub fn memorize(
    model: &mut ParameterStore,
    splits: &DatasetSplits,
    lr: f64,
    batch_size: usize,
    max_steps: usize,
    target_nll: f64,
    seed: u64,
) -> Result<Vec<TrainRow>> {
    let tok = Tokenizer::default();
    let mut all = splits.retain.clone();
    all.extend(splits.forget_all());
    let mut trace = Vec::new();
    let steps_per_epoch = all.len().div_ceil(batch_size);
    let mut step_base = 0usize;
    let max_epochs = max_steps.div_ceil(steps_per_epoch);
    for epoch in 0..max_epochs {
        let batches = training_batches(&tok, &all, batch_size, seed.wrapping_add(epoch as u64))?;
        let budget = steps_per_epoch.min(max_steps - step_base);
        let mut rows = adam_train(model, &batches, lr, budget)?;
        for r in &mut rows {
            r.step += step_base;
        }
        step_base += rows.len();
        trace.extend(rows);
        if corpus_nll(model, splits)? < target_nll {
            return Ok(trace);
        }
    }
    Err(Error::Validation(format!(
        "memorization did not reach NLL {target_nll} within {max_steps} steps \
         (current {:.4})",
        corpus_nll(model, splits)?
    )))
}

/// Mean NLL over every record in the splits.
pub fn corpus_nll(model: &ParameterStore, splits: &DatasetSplits) -> Result<f64> {
    let tok = Tokenizer::default();
    let mut all = splits.retain.clone();
    all.extend(splits.forget_all());
    let examples: Result<Vec<_>> = all
        .iter()
        .map(|r| crate::corpus::to_example(&tok, r))
        .collect();
    loss_value(model, &examples?, &LossSpec::Nll)
}

pub fn train_csv(rows: &[TrainRow]) -> String {
    let mut out = String::from("step,loss\n");
    for r in rows {
        out.push_str(&format!("{},{}\n", r.step, r.loss));
    }
    out
}
