//! Density-guided block unlearning pipeline: full-parameter warm-up,
//! per-layer density estimation, block partition/selection, then for each
//! selected block a graft (block re-inserted into a copy of the original
//! model), block-local training with everything else frozen, and a revert
//! of the trained block back into the unlearned model.

use crate::corpus::{to_example, training_batches, DatasetSplits, Tokenizer};
use crate::density::{
    estimate_density, partition_blocks, score_blocks, select_blocks, BlockPartition, LayerDensity,
};
use crate::error::{Error, Result};
use crate::loss::Example;
use crate::model::{extract_layers, insert_layers, FreezeMask, ParameterStore};
use crate::unlearn::{gd_step, run_unlearning, Method, TraceRow, UnlearnConfig};
use serde::{Deserialize, Serialize};

/// Which model the density pass reads gradients from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DensityOn {
    Unlearned,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KunbrConfig {
    /// Full-parameter warm-up steps (optimizer steps, not epochs).
    pub warm_steps: usize,
    /// Number of contiguous layer blocks.
    pub m_blocks: usize,
    /// How many of the highest-density eligible blocks to process.
    pub top_k: usize,
    /// Blocks containing any of the last this-many layers are ineligible.
    pub head_exclude_layers: usize,
    /// Full passes over density estimation + block processing.
    pub rounds: usize,
    pub per_block_epochs: usize,
    /// Step size η for warm-up and block training.
    pub lr: f64,
    /// Retention coefficient α.
    pub retain_coeff: f64,
    pub density_on: DensityOn,
    /// Graft and train only the MLP tensors of each selected block instead
    /// of the full transformer block.
    #[serde(default)]
    pub mlp_only: bool,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for KunbrConfig {
    fn default() -> Self {
        KunbrConfig {
            warm_steps: 48,
            m_blocks: 8,
            top_k: 6,
            head_exclude_layers: 2,
            rounds: 1,
            per_block_epochs: 8,
            lr: 5e-3,
            retain_coeff: 1.0,
            density_on: DensityOn::Unlearned,
            mlp_only: false,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl KunbrConfig {
    pub fn validate(&self, h_layers: usize) -> Result<()> {
        let mut violations = Vec::new();
        if self.warm_steps == 0 {
            violations.push("warm_steps must be ≥ 1".to_string());
        }
        if self.top_k == 0 {
            violations.push("top_k must be ≥ 1".to_string());
        }
        if self.lr <= 0.0 {
            violations.push("lr must be positive".to_string());
        }
        if self.batch_size == 0 {
            violations.push("batch_size must be positive".to_string());
        }
        match partition_blocks(h_layers, self.m_blocks) {
            Err(e) => violations.push(e.to_string()),
            Ok(p) => {
                let eligible = crate::density::block_eligibility(&p, self.head_exclude_layers)
                    .iter()
                    .filter(|&&e| e)
                    .count();
                if self.top_k > eligible {
                    violations.push(format!(
                        "top_k {} exceeds eligible block count {eligible}",
                        self.top_k
                    ));
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(violations.join("; ")))
        }
    }
}

/// A copy of the original model with one block swapped in from the
/// unlearned model; only that block is trainable.
#[derive(Debug, Clone)]
pub struct GraftState {
    pub base: ParameterStore,
    pub inserted_block: usize,
    pub block_layers: Vec<usize>,
    pub mask: FreezeMask,
}

/// Warm-up: `warm_steps` full-parameter combined-gradient descent steps
/// (α·∇L_retain − ∇L_forget).
pub fn warmup(
    model_original: &ParameterStore,
    splits: &DatasetSplits,
    lr: f64,
    alpha: f64,
    warm_steps: usize,
    batch_size: usize,
    seed: u64,
) -> Result<(ParameterStore, Vec<TraceRow>)> {
    if warm_steps == 0 {
        return Err(Error::Validation("warm_steps must be ≥ 1".into()));
    }
    let tok = Tokenizer::default();
    let forget_records = splits.forget_all();
    let mut model = model_original.clone();
    let mask = FreezeMask::all(&model);
    let mut trace = Vec::with_capacity(warm_steps);
    let mut step = 0usize;
    let mut epoch = 0u64;
    while step < warm_steps {
        let fb = training_batches(&tok, &forget_records, batch_size, seed.wrapping_add(epoch))?;
        let rb = training_batches(
            &tok,
            &splits.retain,
            batch_size,
            seed.wrapping_add(epoch).wrapping_add(0x9e37),
        )?;
        for (bi, batch) in fb.iter().enumerate() {
            if step >= warm_steps {
                break;
            }
            let retain = &rb[bi % rb.len()];
            let (lf, lr_loss) = gd_step(&mut model, batch, retain, lr, alpha, &mask)?;
            trace.push(TraceRow {
                epoch: epoch as usize,
                batch: bi,
                method: "GD".into(),
                loss_forget: lf,
                loss_retain: Some(lr_loss),
            });
            step += 1;
        }
        epoch += 1;
    }
    Ok((model, trace))
}

/// Copies the original model and swaps in one block from the unlearned
/// model; the freeze mask admits exactly the swapped tensors. With
/// `mlp_only`, only the block's MLP tensors are swapped and trainable.
pub fn build_graft(
    model_original: &ParameterStore,
    model_unlearning: &ParameterStore,
    partition: &BlockPartition,
    block_id: usize,
    mlp_only: bool,
) -> Result<GraftState> {
    if model_original.config != model_unlearning.config {
        return Err(Error::Validation("model configs differ".into()));
    }
    if block_id >= partition.m_blocks {
        return Err(Error::Validation(format!(
            "block {block_id} out of range {}",
            partition.m_blocks
        )));
    }
    let block_layers = partition.layers_in_block(block_id);
    let mut base = model_original.clone();
    let mask = if mlp_only {
        let names: Vec<String> = base
            .params
            .keys()
            .filter(|n| {
                crate::model::layer_of(n).is_some_and(|l| block_layers.contains(&l))
                    && n.contains(".mlp.")
            })
            .cloned()
            .collect();
        for name in &names {
            base.params
                .insert(name.clone(), model_unlearning.get(name).clone());
        }
        FreezeMask(names.into_iter().collect())
    } else {
        let layers = extract_layers(model_unlearning, &block_layers)?;
        insert_layers(&mut base, &layers)?;
        FreezeMask::layers_only(&base, &block_layers)
    };
    Ok(GraftState {
        base,
        inserted_block: block_id,
        block_layers,
        mask,
    })
}

/// Copies the (trained) graft block back into the unlearned model.
pub fn revert(
    model_unlearning: &mut ParameterStore,
    graft: &GraftState,
    block_id: usize,
) -> Result<()> {
    if block_id != graft.inserted_block {
        return Err(Error::Validation(format!(
            "revert block {block_id} does not match graft block {}",
            graft.inserted_block
        )));
    }
    if model_unlearning.config != graft.base.config {
        return Err(Error::Validation("model configs differ".into()));
    }
    // Copy exactly the tensors that were trainable in the graft, so an
    // MLP-only graft reverts only MLP tensors.
    for name in &graft.mask.0 {
        model_unlearning
            .params
            .insert(name.clone(), graft.base.get(name).clone());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub density: LayerDensity,
    pub block_scores: Vec<f64>,
    pub selected_blocks: Vec<usize>,
    pub block_traces: Vec<(usize, Vec<TraceRow>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub status: String,
    pub warmup_trace: Vec<TraceRow>,
    pub rounds: Vec<RoundReport>,
}

fn forget_example_batches(splits: &DatasetSplits, batch_size: usize) -> Result<Vec<Vec<Example>>> {
    let tok = Tokenizer::default();
    let examples: Result<Vec<Example>> = splits
        .forget_all()
        .iter()
        .map(|r| to_example(&tok, r))
        .collect();
    let examples = examples?;
    Ok(examples.chunks(batch_size).map(<[Example]>::to_vec).collect())
}

/// The full pipeline: warm-up, then `rounds` passes of density
/// estimation, block selection, and per-block graft → train → revert in
/// descending density order.
pub fn run_kunbr(
    model_original: &ParameterStore,
    splits: &DatasetSplits,
    config: &KunbrConfig,
) -> Result<(ParameterStore, PipelineReport)> {
    config.validate(model_original.config.h_layers)?;
    let partition = partition_blocks(model_original.config.h_layers, config.m_blocks)?;
    let (mut unlearned, warmup_trace) = warmup(
        model_original,
        splits,
        config.lr,
        config.retain_coeff,
        config.warm_steps,
        config.batch_size,
        config.seed,
    )?;
    let mut report = PipelineReport {
        status: "completed".into(),
        warmup_trace,
        rounds: Vec::new(),
    };
    for round in 0..config.rounds {
        let density_model = match config.density_on {
            DensityOn::Unlearned => &unlearned,
            DensityOn::Original => model_original,
        };
        let batches = forget_example_batches(splits, config.batch_size)?;
        let density = estimate_density(density_model, &batches)?;
        let Some(ref k_norm) = density.k_norm else {
            report.status = "converged".into();
            report.rounds.push(RoundReport {
                round,
                density: density.clone(),
                block_scores: Vec::new(),
                selected_blocks: Vec::new(),
                block_traces: Vec::new(),
            });
            break;
        };
        let scores = score_blocks(&partition, k_norm)?;
        let selected =
            select_blocks(&scores, &partition, config.top_k, config.head_exclude_layers)?;
        let mut block_traces = Vec::new();
        for &block_id in &selected {
            let mut graft = build_graft(model_original, &unlearned, &partition, block_id, config.mlp_only)?;
            let block_cfg = UnlearnConfig {
                method: Method::Gd,
                lr: config.lr,
                retain_coeff: config.retain_coeff,
                epochs: config.per_block_epochs,
                batch_size: config.batch_size,
                seed: config.seed.wrapping_add(block_id as u64),
                ..Default::default()
            };
            let trace = run_unlearning(&mut graft.base, splits, &block_cfg, &graft.mask)?;
            revert(&mut unlearned, &graft, block_id)?;
            block_traces.push((block_id, trace));
        }
        report.rounds.push(RoundReport {
            round,
            density,
            block_scores: scores,
            selected_blocks: selected,
            block_traces,
        });
    }
    Ok((unlearned, report))
}
