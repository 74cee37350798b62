//! Baseline unlearning update rules (GA, GD, NPO, RIA, RMU) as pure
//! single-step ops plus a driver loop. Every step honors a freeze mask and
//! is bit-exactly the plain update formula applied to dumped gradients;
//! no adaptive-moment state is involved anywhere in unlearning.

use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, loss_value, Batch, LossSpec};
use crate::model::{sgd_apply, Direction, FreezeMask, GradientMap, ParameterStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const LOSS_CEILING: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Ga,
    Gd,
    Npo,
    Ria,
    Rmu,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ga => "GA",
            Method::Gd => "GD",
            Method::Npo => "NPO",
            Method::Ria => "RIA",
            Method::Rmu => "RMU",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s.to_ascii_uppercase().as_str() {
            "GA" => Ok(Method::Ga),
            "GD" => Ok(Method::Gd),
            "NPO" => Ok(Method::Npo),
            "RIA" => Ok(Method::Ria),
            "RMU" => Ok(Method::Rmu),
            other => Err(Error::Validation(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    /// Step size η.
    pub lr: f64,
    /// Retention coefficient α (GD only).
    pub retain_coeff: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Perturbation scale δ relative to per-tensor parameter RMS (RMU only).
    pub rmu_delta_scale: f64,
    /// Probability clamp ε for the log(1−p) loss.
    pub npo_epsilon: f64,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::Gd,
            lr: 5e-3,
            retain_coeff: 0.7,
            epochs: 16,
            batch_size: 16,
            rmu_delta_scale: 0.05,
            npo_epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Validation("lr must be positive".into()));
        }
        if self.retain_coeff < 0.0 {
            return Err(Error::Validation("retain_coeff must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        if self.method == Method::Rmu && self.rmu_delta_scale <= 0.0 {
            return Err(Error::Validation("rmu_delta_scale must be positive".into()));
        }
        if self.method == Method::Npo && !(self.npo_epsilon > 0.0 && self.npo_epsilon < 0.5) {
            return Err(Error::Validation("npo_epsilon must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn check_finite_grads(grads: &GradientMap, op: &str) -> Result<()> {
    for t in grads.0.values() {
        t.check_finite(op)?;
    }
    Ok(())
}

/// One ascent step on the forget NLL: θ ← θ + η∇L_forget.
pub fn ga_step(
    model: &mut ParameterStore,
    forget_batch: &Batch,
    lr: f64,
    mask: &FreezeMask,
) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Validation("empty trainable mask".into()));
    }
    let (loss, grads) = loss_and_gradients(model, forget_batch, &LossSpec::Nll, mask)?;
    check_finite_grads(&grads, "ga_step")?;
    sgd_apply(model, &grads, lr, Direction::Ascend, mask)?;
    Ok(loss)
}

/// Combined GD gradient: α∇L_retain − ∇L_forget.
pub fn combine_gd(retain: &GradientMap, forget: &GradientMap, alpha: f64) -> GradientMap {
    let mut out = BTreeMap::new();
    for (name, gr) in &retain.0 {
        let gf = &forget.0[name];
        let data = gr
            .data
            .iter()
            .zip(gf.data.iter())
            .map(|(r, f)| alpha * r - f)
            .collect();
        out.insert(name.clone(), Tensor {
            shape: gr.shape.clone(),
            data,
        });
    }
    GradientMap(out)
}

/// One step θ ← θ − η(α∇L_retain − ∇L_forget). Returns (forget, retain) losses.
pub fn gd_step(
    model: &mut ParameterStore,
    forget_batch: &Batch,
    retain_batch: &Batch,
    lr: f64,
    alpha: f64,
    mask: &FreezeMask,
) -> Result<(f64, f64)> {
    if forget_batch.is_empty() || retain_batch.is_empty() {
        return Err(Error::Validation("gd_step requires both batches".into()));
    }
    let (loss_f, grads_f) = loss_and_gradients(model, forget_batch, &LossSpec::Nll, mask)?;
    let (loss_r, grads_r) = loss_and_gradients(model, retain_batch, &LossSpec::Nll, mask)?;
    let combined = combine_gd(&grads_r, &grads_f, alpha);
    check_finite_grads(&combined, "gd_step")?;
    sgd_apply(model, &combined, lr, Direction::Descend, mask)?;
    Ok((loss_f, loss_r))
}

/// One descent step on E[log(1 − clamp(p, 0, 1−ε))].
pub fn npo_step(
    model: &mut ParameterStore,
    forget_batch: &Batch,
    lr: f64,
    epsilon: f64,
    mask: &FreezeMask,
) -> Result<f64> {
    let spec = LossSpec::Npo { epsilon };
    let (loss, grads) = loss_and_gradients(model, forget_batch, &spec, mask)?;
    check_finite_grads(&grads, "npo_step")?;
    sgd_apply(model, &grads, lr, Direction::Descend, mask)?;
    Ok(loss)
}

/// One descent step on the summed incorrect-choice NLL.
pub fn ria_step(
    model: &mut ParameterStore,
    mcq_batch: &Batch,
    lr: f64,
    mask: &FreezeMask,
) -> Result<f64> {
    let (loss, grads) = loss_and_gradients(model, mcq_batch, &LossSpec::Ria, mask)?;
    check_finite_grads(&grads, "ria_step")?;
    sgd_apply(model, &grads, lr, Direction::Descend, mask)?;
    Ok(loss)
}

/// Fixed per-run parameter perturbation: gaussian draw scaled to
/// δ_scale × per-tensor RMS.
pub fn make_rmu_delta(
    model: &ParameterStore,
    delta_scale: f64,
    delta_seed: u64,
) -> Result<BTreeMap<String, Tensor>> {
    if delta_scale <= 0.0 {
        return Err(Error::Validation(format!(
            "rmu delta scale must be positive, got {delta_scale}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(delta_seed);
    let mut delta = BTreeMap::new();
    for (name, t) in &model.params {
        let rms = (t.data.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        let data = (0..t.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * delta_scale * rms
            })
            .collect();
        delta.insert(name.clone(), Tensor {
            shape: t.shape.clone(),
            data,
        });
    }
    Ok(delta)
}

/// One descent step on E‖f(x,θ) − f(x,θ+δ)‖², where f is the last-block
/// hidden-state sequence and the perturbed branch is a constant target.
pub fn rmu_step(
    model: &mut ParameterStore,
    forget_batch: &Batch,
    lr: f64,
    delta: &BTreeMap<String, Tensor>,
    mask: &FreezeMask,
) -> Result<f64> {
    // Perturbed model provides the fixed targets for this step.
    let mut perturbed = model.clone();
    for (name, d) in delta {
        let p = perturbed.params.get_mut(name).ok_or_else(|| Error::Shape {
            op: "rmu_step".into(),
            detail: format!("delta names unknown parameter {name}"),
        })?;
        for (pv, dv) in p.data.iter_mut().zip(d.data.iter()) {
            *pv += dv;
        }
    }
    let mut targets = Vec::with_capacity(forget_batch.len());
    for ex in forget_batch {
        let mut seq = ex.prompt.clone();
        seq.extend_from_slice(&ex.target[..ex.target.len() - 1]);
        targets.push(rmu_target(&perturbed, &seq)?);
    }
    let spec = LossSpec::RepDistance { targets };
    let (loss, grads) = loss_and_gradients(model, forget_batch, &spec, mask)?;
    check_finite_grads(&grads, "rmu_step")?;
    sgd_apply(model, &grads, lr, Direction::Descend, mask)?;
    Ok(loss)
}

/// Last-block hidden states for a sequence (the representation the
/// distance loss pushes away from its unperturbed value).
pub fn rmu_target(model: &ParameterStore, seq: &[usize]) -> Result<Vec<f64>> {
    Ok(crate::model::forward_one(model, seq)?.h_final)
}

/// One row of the unlearning loss trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub method: String,
    pub loss_forget: f64,
    pub loss_retain: Option<f64>,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("epoch,batch,method,loss_forget,loss_retain\n");
    for r in rows {
        let retain = r.loss_retain.map_or(String::new(), |v| format!("{v}"));
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.batch, r.method, r.loss_forget, retain
        ));
    }
    out
}

/// Driver: epochs × batches applications of the configured step op over the
/// forget records (paired with cycled retain batches for GD). Deterministic
/// in the config seed.
pub fn run_unlearning(
    model: &mut ParameterStore,
    splits: &crate::corpus::DatasetSplits,
    config: &UnlearnConfig,
    mask: &FreezeMask,
) -> Result<Vec<TraceRow>> {
    config.validate()?;
    if mask.is_empty() {
        return Err(Error::Validation("empty trainable mask".into()));
    }
    let tok = crate::corpus::Tokenizer::default();
    let forget_records = splits.forget_all();
    let delta = if config.method == Method::Rmu {
        Some(make_rmu_delta(model, config.rmu_delta_scale, config.seed)?)
    } else {
        None
    };
    let mut trace = Vec::new();
    for epoch in 0..config.epochs {
        let epoch_seed = config.seed.wrapping_add(epoch as u64);
        let forget_batches =
            crate::corpus::training_batches(&tok, &forget_records, config.batch_size, epoch_seed)?;
        let retain_batches = crate::corpus::training_batches(
            &tok,
            &splits.retain,
            config.batch_size,
            epoch_seed.wrapping_add(0x9e37),
        )?;
        for (bi, fb) in forget_batches.iter().enumerate() {
            let (loss_forget, loss_retain) = match config.method {
                Method::Ga => (ga_step(model, fb, config.lr, mask)?, None),
                Method::Gd => {
                    let rb = &retain_batches[bi % retain_batches.len()];
                    let (lf, lr) =
                        gd_step(model, fb, rb, config.lr, config.retain_coeff, mask)?;
                    (lf, Some(lr))
                }
                Method::Npo => (
                    npo_step(model, fb, config.lr, config.npo_epsilon, mask)?,
                    None,
                ),
                Method::Ria => (ria_step(model, fb, config.lr, mask)?, None),
                Method::Rmu => (
                    rmu_step(model, fb, config.lr, delta.as_ref().unwrap(), mask)?,
                    None,
                ),
            };
            if loss_forget.abs() > LOSS_CEILING {
                return Err(Error::Diverged {
                    step: epoch * forget_batches.len() + bi,
                    loss: loss_forget,
                });
            }
            trace.push(TraceRow {
                epoch,
                batch: bi,
                method: config.method.name().to_string(),
                loss_forget,
                loss_retain,
            });
        }
    }
    Ok(trace)
}

/// NLL of the forget set under the current model (diagnostic).
pub fn forget_nll(model: &ParameterStore, splits: &crate::corpus::DatasetSplits) -> Result<f64> {
    let tok = crate::corpus::Tokenizer::default();
    let examples: Result<Vec<_>> = splits
        .forget_all()
        .iter()
        .map(|r| crate::corpus::to_example(&tok, r))
        .collect();
    loss_value(model, &examples?, &LossSpec::Nll)
}
