//! Per-layer knowledge density estimation, block partitioning and scoring,
//! Top-K selection with head-layer exclusion, and the layer-delta diagnostic.

use crate::error::{Error, Result};
use crate::loss::{loss_and_gradients, Example, LossSpec};
use crate::model::{layer_of, FreezeMask, ParameterStore};
use serde::{Deserialize, Serialize};

/// Per-layer density K and its normalized share. `k_norm` is undefined
/// (None) when the total density is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub k: Vec<f64>,
    pub k_norm: Option<Vec<f64>>,
}

/// Contiguous assignment of H layers into M blocks. Blocks 0..M−2 hold
/// exactly ⌊H/M⌋ layers; the last block absorbs the remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub h_layers: usize,
    pub m_blocks: usize,
    pub layers_per_block: usize,
    /// layer index → block id.
    pub assignment: Vec<usize>,
}

impl BlockPartition {
    pub fn layers_in_block(&self, block: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == block)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Per-block cumulative density and head-exclusion eligibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockScore {
    pub scores: Vec<f64>,
    pub eligible: Vec<bool>,
}

/// Per-layer parameter-difference norms between two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
}

/// Mean over forget examples of the per-layer L1 gradient norm of the
/// forget NLL. Gradients are computed per example; the model is never
/// modified. The per-layer norm aggregates every parameter named under
/// the layer; embeddings and the output head belong to no layer.
pub fn estimate_density(
    model: &ParameterStore,
    forget_batches: &[Vec<Example>],
) -> Result<LayerDensity> {
    let h = model.config.h_layers;
    if forget_batches.iter().all(|b| b.is_empty()) {
        return Err(Error::Validation("no forget examples".into()));
    }
    let all_layers: Vec<usize> = (0..h).collect();
    let mask = FreezeMask::layers_only(model, &all_layers);
    let mut k = vec![0.0; h];
    let mut count = 0usize;
    for batch in forget_batches {
        for ex in batch {
            let (_, grads) =
                loss_and_gradients(model, std::slice::from_ref(ex), &LossSpec::Nll, &mask)?;
            for (name, g) in &grads.0 {
                if let Some(l) = layer_of(name) {
                    k[l] += g.l1_norm();
                }
            }
            count += 1;
        }
    }
    for v in k.iter_mut() {
        *v /= count as f64;
    }
    let k_norm = normalize(&k);
    Ok(LayerDensity { k, k_norm })
}

/// K_norm[l] = K[l] / ΣK. None when ΣK = 0.
pub fn normalize(k: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = k.iter().sum();
    if total > 0.0 {
        Some(k.iter().map(|v| v / total).collect())
    } else {
        None
    }
}

pub fn partition_blocks(h_layers: usize, m_blocks: usize) -> Result<BlockPartition> {
    if m_blocks == 0 || m_blocks > h_layers {
        return Err(Error::Validation(format!(
            "block count {m_blocks} outside 1..={h_layers}"
        )));
    }
    let n = h_layers / m_blocks;
    let assignment = (0..h_layers)
        .map(|l| (l / n).min(m_blocks - 1))
        .collect();
    Ok(BlockPartition {
        h_layers,
        m_blocks,
        layers_per_block: n,
        assignment,
    })
}

/// Cumulative normalized density per block.
pub fn score_blocks(partition: &BlockPartition, k_norm: &[f64]) -> Result<Vec<f64>> {
    if k_norm.len() != partition.h_layers {
        return Err(Error::Shape {
            op: "score_blocks".into(),
            detail: format!("{} densities vs {} layers", k_norm.len(), partition.h_layers),
        });
    }
    let mut scores = vec![0.0; partition.m_blocks];
    for (l, &b) in partition.assignment.iter().enumerate() {
        scores[b] += k_norm[l];
    }
    Ok(scores)
}

/// Eligibility flags: a block is ineligible when it contains any of the
/// last `head_exclude_layers` layers.
pub fn block_eligibility(partition: &BlockPartition, head_exclude_layers: usize) -> Vec<bool> {
    let cutoff = partition.h_layers.saturating_sub(head_exclude_layers);
    (0..partition.m_blocks)
        .map(|b| partition.layers_in_block(b).iter().all(|&l| l < cutoff))
        .collect()
}

/// Top-K eligible blocks by score, descending; ties break toward the
/// lower block id.
pub fn select_blocks(
    scores: &[f64],
    partition: &BlockPartition,
    top_k: usize,
    head_exclude_layers: usize,
) -> Result<Vec<usize>> {
    if scores.len() != partition.m_blocks {
        return Err(Error::Shape {
            op: "select_blocks".into(),
            detail: format!("{} scores vs {} blocks", scores.len(), partition.m_blocks),
        });
    }
    let eligible = block_eligibility(partition, head_exclude_layers);
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&b| eligible[b]).collect();
    if top_k > candidates.len() {
        return Err(Error::Validation(format!(
            "top_k {} exceeds eligible block count {}",
            top_k,
            candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(candidates[..top_k].to_vec())
}

/// L1 and L2 norms of the per-layer parameter difference between two models.
pub fn layer_deltas(a: &ParameterStore, b: &ParameterStore) -> Result<LayerDelta> {
    if a.config.h_layers != b.config.h_layers {
        return Err(Error::Validation("layer counts differ".into()));
    }
    let h = a.config.h_layers;
    let mut l1 = vec![0.0; h];
    let mut sq = vec![0.0; h];
    for (name, ta) in &a.params {
        if let Some(l) = layer_of(name) {
            let tb = b.params.get(name).ok_or_else(|| Error::Shape {
                op: "layer_deltas".into(),
                detail: format!("missing {name} in second model"),
            })?;
            for (&x, &y) in ta.data.iter().zip(tb.data.iter()) {
                let d = x - y;
                l1[l] += d.abs();
                sq[l] += d * d;
            }
        }
    }
    Ok(LayerDelta {
        l1,
        l2: sq.iter().map(|v| v.sqrt()).collect(),
    })
}

/// CSV rows (layer_index, K, K_norm, block_id, delta_l1, delta_l2).
pub fn density_csv(
    density: &LayerDensity,
    partition: &BlockPartition,
    deltas: Option<&LayerDelta>,
) -> String {
    let mut out = String::from("layer_index,K,K_norm,block_id,delta_l1,delta_l2\n");
    for l in 0..partition.h_layers {
        let k_norm = density
            .k_norm
            .as_ref()
            .map_or("undefined".to_string(), |kn| format!("{}", kn[l]));
        let (d1, d2) = deltas.map_or((0.0, 0.0), |d| (d.l1[l], d.l2[l]));
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l, density.k[l], k_norm, partition.assignment[l], d1, d2
        ));
    }
    out
}
