//! Registered losses with exact reverse-mode gradients, plus the
//! central-finite-difference oracle used to verify them.
//!
//! Every loss maps a batch of (prompt, answer) examples to a scalar mean
//! over the batch. The input sequence fed to the model is
//! `prompt ++ answer[..len-1]`; answer tokens are predicted at the trailing
//! positions. Answers are single tokens throughout the synthetic corpus,
//! which keeps choice scoring a one-position comparison.

use crate::error::{Error, Result};
use crate::model::{backward_one, forward_one, zero_grads, FreezeMask, GradientMap, ParameterStore};
use crate::tensor::{softmax_rows, Tensor};
use std::collections::BTreeMap;

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub prompt: Vec<usize>,
    /// Correct answer tokens.
    pub target: Vec<usize>,
    /// Incorrect single-token options (used by the wrong-answer loss).
    pub incorrect: Vec<usize>,
}

impl Example {
    pub fn new(prompt: Vec<usize>, target: Vec<usize>) -> Self {
        Example {
            prompt,
            target,
            incorrect: Vec::new(),
        }
    }
}

pub type Batch = [Example];

/// Loss definitions registered for gradient computation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// Negative log-likelihood of the answer tokens.
    Nll,
    /// log(1 − p) of the answer-sequence probability, p clamped to 1−ε.
    Npo { epsilon: f64 },
    /// Summed NLL of the incorrect options.
    Ria,
    /// Mean squared distance of last-block hidden states to fixed
    /// per-example targets (the perturbed-branch output, held constant).
    RepDistance { targets: Vec<Vec<f64>> },
}

fn input_sequence(ex: &Example) -> Result<Vec<usize>> {
    if ex.target.is_empty() {
        return Err(Error::Validation("empty target sequence".into()));
    }
    let mut seq = ex.prompt.clone();
    seq.extend_from_slice(&ex.target[..ex.target.len() - 1]);
    Ok(seq)
}

/// Scalar loss and exact gradients for every name in `mask`.
/// The model is never modified; an empty mask skips the backward pass.
pub fn loss_and_gradients(
    model: &ParameterStore,
    batch: &Batch,
    spec: &LossSpec,
    mask: &FreezeMask,
) -> Result<(f64, GradientMap)> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let vocab = model.config.vocab;
    let b = batch.len() as f64;
    let mut total_loss = 0.0;
    let mut grads = if mask.is_empty() {
        BTreeMap::new()
    } else {
        zero_grads(model)
    };

    for (ex_idx, ex) in batch.iter().enumerate() {
        let seq = input_sequence(ex)?;
        if seq.is_empty() {
            return Err(Error::Validation("empty input sequence".into()));
        }
        let cache = forward_one(model, &seq)?;
        let t_len = seq.len();
        let mut dlogits = vec![0.0; t_len * vocab];
        let mut dh_final: Option<Vec<f64>> = None;
        let first_pred = ex.prompt.len() - 1;

        let ex_loss = match spec {
            LossSpec::Nll => {
                let mut loss = 0.0;
                for (j, &tok) in ex.target.iter().enumerate() {
                    let pos = first_pred + j;
                    let mut probs = cache.logits[pos * vocab..(pos + 1) * vocab].to_vec();
                    softmax_rows(&mut probs, 1, vocab);
                    loss -= probs[tok].ln();
                    for (c, &p) in probs.iter().enumerate() {
                        let onehot = if c == tok { 1.0 } else { 0.0 };
                        dlogits[pos * vocab + c] += (p - onehot) / b;
                    }
                }
                loss
            }
            LossSpec::Npo { epsilon } => {
                if !(*epsilon > 0.0 && *epsilon < 0.5) {
                    return Err(Error::Validation(format!(
                        "npo epsilon {} outside (0, 0.5)",
                        epsilon
                    )));
                }
                // p = product of answer-token probabilities.
                let mut logp = 0.0;
                let mut per_pos: Vec<Vec<f64>> = Vec::with_capacity(ex.target.len());
                for (j, &tok) in ex.target.iter().enumerate() {
                    let pos = first_pred + j;
                    let mut probs = cache.logits[pos * vocab..(pos + 1) * vocab].to_vec();
                    softmax_rows(&mut probs, 1, vocab);
                    logp += probs[tok].ln();
                    per_pos.push(probs);
                }
                let p = logp.exp();
                if p >= 1.0 - epsilon {
                    // Clamp active: loss saturates, gradient vanishes.
                    epsilon.ln()
                } else {
                    let dloss_dlogp = -p / (1.0 - p);
                    for (j, &tok) in ex.target.iter().enumerate() {
                        let pos = first_pred + j;
                        let probs = &per_pos[j];
                        for (c, &pv) in probs.iter().enumerate() {
                            let onehot = if c == tok { 1.0 } else { 0.0 };
                            dlogits[pos * vocab + c] += dloss_dlogp * (onehot - pv) / b;
                        }
                    }
                    (1.0 - p).ln()
                }
            }
            LossSpec::Ria => {
                if ex.incorrect.is_empty() {
                    return Err(Error::Validation(format!(
                        "example {ex_idx} carries no incorrect options"
                    )));
                }
                let pos = first_pred;
                let mut probs = cache.logits[pos * vocab..(pos + 1) * vocab].to_vec();
                softmax_rows(&mut probs, 1, vocab);
                let mut loss = 0.0;
                for &wrong in &ex.incorrect {
                    if wrong >= vocab {
                        return Err(Error::Validation(format!(
                            "incorrect option {wrong} out of vocabulary"
                        )));
                    }
                    loss -= probs[wrong].ln();
                    for (c, &p) in probs.iter().enumerate() {
                        let onehot = if c == wrong { 1.0 } else { 0.0 };
                        dlogits[pos * vocab + c] += (p - onehot) / b;
                    }
                }
                loss
            }
            LossSpec::RepDistance { targets } => {
                let target = targets.get(ex_idx).ok_or_else(|| {
                    Error::Validation(format!("missing representation target for example {ex_idx}"))
                })?;
                if target.len() != cache.h_final.len() {
                    return Err(Error::Shape {
                        op: "rep_distance".into(),
                        detail: format!("target {} vs hidden {}", target.len(), cache.h_final.len()),
                    });
                }
                let mut loss = 0.0;
                let mut dh = vec![0.0; cache.h_final.len()];
                for (i, (&h, &t)) in cache.h_final.iter().zip(target.iter()).enumerate() {
                    let diff = h - t;
                    loss += diff * diff;
                    dh[i] = 2.0 * diff / b;
                }
                dh_final = Some(dh);
                loss
            }
        };

        if !ex_loss.is_finite() {
            return Err(Error::NonFinite {
                op: format!("loss[{ex_idx}]"),
            });
        }
        total_loss += ex_loss / b;

        if !mask.is_empty() {
            backward_one(model, &cache, &dlogits, dh_final.as_deref(), &mut grads);
        }
    }

    let filtered = GradientMap(
        grads
            .into_iter()
            .filter(|(name, _)| mask.contains(name))
            .collect(),
    );
    if !mask.is_empty() && filtered.len() != mask.0.len() {
        return Err(Error::Validation(
            "trainable mask names unknown to the model".into(),
        ));
    }
    Ok((total_loss, filtered))
}

/// Loss only (forward path; no gradients computed).
pub fn loss_value(model: &ParameterStore, batch: &Batch, spec: &LossSpec) -> Result<f64> {
    let (loss, _) = loss_and_gradients(model, batch, spec, &FreezeMask::empty())?;
    Ok(loss)
}

/// NLL of target tokens y given prompt x, for a single example.
pub fn nll_loss(model: &ParameterStore, x: &[usize], y: &[usize]) -> Result<f64> {
    loss_value(model, &[Example::new(x.to_vec(), y.to_vec())], &LossSpec::Nll)
}

pub const DEFAULT_ORACLE_BUDGET: usize = 5_000;

/// Central-difference gradient estimate per coordinate of every name in
/// `mask`. Uses only forward evaluations, never the reverse pass. Refuses
/// when the masked coordinate count exceeds the budget.
pub fn finite_difference_gradients(
    model: &ParameterStore,
    batch: &Batch,
    spec: &LossSpec,
    step: f64,
    mask: &FreezeMask,
    budget: usize,
) -> Result<GradientMap> {
    let count: usize = mask
        .0
        .iter()
        .map(|n| model.params.get(n).map_or(0, |t| t.len()))
        .sum();
    if count > budget {
        return Err(Error::OracleBudget { count, budget });
    }
    let mut probe = model.clone();
    let mut out = BTreeMap::new();
    for name in mask.0.iter() {
        let shape = model.get(name).shape.clone();
        let n: usize = shape.iter().product();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = probe.params[name].data[i];
            probe.params.get_mut(name).unwrap().data[i] = orig + step;
            let plus = loss_value(&probe, batch, spec)?;
            probe.params.get_mut(name).unwrap().data[i] = orig - step;
            let minus = loss_value(&probe, batch, spec)?;
            probe.params.get_mut(name).unwrap().data[i] = orig;
            grad[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), Tensor::from_vec(&shape, grad)?);
    }
    Ok(GradientMap(out))
}

/// Max relative disagreement between two gradient maps over a shared domain.
pub fn max_relative_error(a: &GradientMap, b: &GradientMap) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ta) in &a.0 {
        let tb = &b.0[name];
        for (&x, &y) in ta.data.iter().zip(tb.data.iter()) {
            let denom = x.abs().max(y.abs()) + 1e-8;
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
