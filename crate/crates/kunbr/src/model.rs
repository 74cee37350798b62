//! Decoder-only transformer with individually addressable layers.
//!
//! Parameters live in a name-keyed store ("layer.3.mlp.w1", "embed.tok", ...)
//! so that grafting, freezing and density estimation can all operate on the
//! same hierarchical namespace. Pre-norm blocks, learned positional
//! embeddings, untied output head, no dropout anywhere.

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_backward, gelu_forward, layernorm_backward, layernorm_forward, matmul_backward,
    matmul_forward, softmax_backward_row, softmax_rows, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Transformer layer count.
    pub h_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size.
    pub vocab: usize,
    /// Context length.
    pub ctx: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            h_layers: 8,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab: 144,
            ctx: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.h_layers < 2 {
            problems.push(format!("h_layers must be >= 2, got {}", self.h_layers));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.vocab < 8 {
            problems.push(format!("vocab must be >= 8, got {}", self.vocab));
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".into());
        }
        if self.ctx == 0 {
            problems.push("ctx must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Gradients keyed by parameter name; shapes mirror the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientMap(pub BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Set of trainable parameter names; everything else is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeMask(pub BTreeSet<String>);

impl FreezeMask {
    /// Every parameter trainable.
    pub fn all(model: &ParameterStore) -> Self {
        FreezeMask(model.params.keys().cloned().collect())
    }

    /// Only parameters of the given layer indices trainable.
    pub fn layers_only(model: &ParameterStore, layers: &[usize]) -> Self {
        let set = model
            .params
            .keys()
            .filter(|n| layer_of(n).map_or(false, |l| layers.contains(&l)))
            .cloned()
            .collect();
        FreezeMask(set)
    }

    pub fn empty() -> Self {
        FreezeMask(BTreeSet::new())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Named, layer-indexed parameter tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

/// Layer index encoded in a hierarchical parameter name, if any.
pub fn layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("layer.")?;
    let idx = rest.split('.').next()?;
    idx.parse().ok()
}

/// Expected parameter shapes for one transformer layer.
fn layer_shapes(cfg: &ModelConfig, l: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let ff = cfg.d_ff;
    vec![
        (format!("layer.{l}.ln1.gain"), vec![d]),
        (format!("layer.{l}.ln1.bias"), vec![d]),
        (format!("layer.{l}.attn.wq"), vec![d, d]),
        (format!("layer.{l}.attn.wk"), vec![d, d]),
        (format!("layer.{l}.attn.wv"), vec![d, d]),
        (format!("layer.{l}.attn.wo"), vec![d, d]),
        (format!("layer.{l}.ln2.gain"), vec![d]),
        (format!("layer.{l}.ln2.bias"), vec![d]),
        (format!("layer.{l}.mlp.w1"), vec![d, ff]),
        (format!("layer.{l}.mlp.b1"), vec![ff]),
        (format!("layer.{l}.mlp.w2"), vec![ff, d]),
        (format!("layer.{l}.mlp.b2"), vec![d]),
    ]
}

fn all_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut shapes = vec![
        ("embed.tok".to_string(), vec![cfg.vocab, d]),
        ("embed.pos".to_string(), vec![cfg.ctx, d]),
    ];
    for l in 0..cfg.h_layers {
        shapes.extend(layer_shapes(cfg, l));
    }
    shapes.push(("final_norm.gain".to_string(), vec![d]));
    shapes.push(("final_norm.bias".to_string(), vec![d]));
    shapes.push(("head.w".to_string(), vec![d, cfg.vocab]));
    shapes.push(("head.b".to_string(), vec![cfg.vocab]));
    shapes
}

/// Seeded symmetric-uniform init at the given scale. Norm gains start at 1,
/// norm biases and the output-head bias at 0 regardless of scale.
pub fn init_model_with_scale(config: &ModelConfig, scale: f64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    for (name, shape) in all_shapes(config) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with("gain") {
            vec![1.0; n]
        } else if name.ends_with("bias") || name.ends_with(".b") || name.contains(".b1") || name.contains(".b2") {
            vec![0.0; n]
        } else if scale > 0.0 {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        } else {
            vec![0.0; n]
        };
        params.insert(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(ParameterStore {
        config: config.clone(),
        params,
    })
}

/// Default init: symmetric uniform with scale 1/sqrt(d_model).
pub fn init_model(config: &ModelConfig) -> Result<ParameterStore> {
    init_model_with_scale(config, 1.0 / (config.d_model as f64).sqrt())
}

impl ParameterStore {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    /// Verifies the parameter set exactly matches the config's expected
    /// names and shapes (used when loading external checkpoints).
    pub fn check_shapes(&self) -> Result<()> {
        let expected = all_shapes(&self.config);
        if expected.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                None => return Err(Error::Validation(format!("missing tensor {name}"))),
                Some(t) if t.shape != shape => {
                    return Err(Error::Shape {
                        op: "check_shapes".into(),
                        detail: format!("{name}: expected {shape:?}, found {:?}", t.shape),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over all parameter bytes in name order. Byte-level identity probe.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            hasher.update(name.as_bytes());
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Digest restricted to parameters outside the given trainable mask.
    pub fn frozen_digest(&self, mask: &FreezeMask) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.params {
            if mask.contains(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            for v in &t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

// ── Forward pass with activation cache ───────────────────────────────

pub(crate) struct LayerCache {
    x_in: Vec<f64>,
    ln1_out: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Post-softmax attention weights, [n_heads, T, T].
    att: Vec<f64>,
    /// Head-concatenated attention output before wo, [T, d].
    att_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2_out: Vec<f64>,
    ln2_rstd: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
}

pub(crate) struct SeqCache {
    pub tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    /// Hidden states after the last block (the RMU representation), [T, d].
    pub h_final: Vec<f64>,
    lnf_out: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// [T, vocab].
    pub logits: Vec<f64>,
}

/// Forward pass for one token sequence, caching every activation the
/// backward pass needs.
pub(crate) fn forward_one(model: &ParameterStore, tokens: &[usize]) -> Result<SeqCache> {
    let cfg = &model.config;
    let t_len = tokens.len();
    if t_len == 0 || t_len > cfg.ctx {
        return Err(Error::Validation(format!(
            "sequence length {} out of range 1..={}",
            t_len, cfg.ctx
        )));
    }
    for (pos, &tok) in tokens.iter().enumerate() {
        if tok >= cfg.vocab {
            return Err(Error::Validation(format!(
                "token {} at position {} out of vocabulary {}",
                tok, pos, cfg.vocab
            )));
        }
    }
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let tok_emb = &model.get("embed.tok").data;
    let pos_emb = &model.get("embed.pos").data;
    let mut x = vec![0.0; t_len * d];
    for (i, &tok) in tokens.iter().enumerate() {
        for j in 0..d {
            x[i * d + j] = tok_emb[tok * d + j] + pos_emb[i * d + j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.h_layers);
    for l in 0..cfg.h_layers {
        let ln1g = &model.get(&format!("layer.{l}.ln1.gain")).data;
        let ln1b = &model.get(&format!("layer.{l}.ln1.bias")).data;
        let wq = &model.get(&format!("layer.{l}.attn.wq")).data;
        let wk = &model.get(&format!("layer.{l}.attn.wk")).data;
        let wv = &model.get(&format!("layer.{l}.attn.wv")).data;
        let wo = &model.get(&format!("layer.{l}.attn.wo")).data;
        let ln2g = &model.get(&format!("layer.{l}.ln2.gain")).data;
        let ln2b = &model.get(&format!("layer.{l}.ln2.bias")).data;
        let w1 = &model.get(&format!("layer.{l}.mlp.w1")).data;
        let b1 = &model.get(&format!("layer.{l}.mlp.b1")).data;
        let w2 = &model.get(&format!("layer.{l}.mlp.w2")).data;
        let b2 = &model.get(&format!("layer.{l}.mlp.b2")).data;

        let x_in = x.clone();
        let mut ln1_out = vec![0.0; t_len * d];
        let mut ln1_rstd = vec![0.0; t_len];
        layernorm_forward(&mut ln1_out, &mut ln1_rstd, &x_in, ln1g, ln1b, t_len, d);

        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        matmul_forward(&mut q, &ln1_out, wq, t_len, d, d);
        matmul_forward(&mut k, &ln1_out, wk, t_len, d, d);
        matmul_forward(&mut v, &ln1_out, wv, t_len, d, d);

        // Causal attention per head: scores masked to j <= i.
        let mut att = vec![0.0; nh * t_len * t_len];
        let mut att_out = vec![0.0; t_len * d];
        for h in 0..nh {
            let off = h * hd;
            let a = &mut att[h * t_len * t_len..(h + 1) * t_len * t_len];
            for i in 0..t_len {
                let row = &mut a[i * t_len..(i + 1) * t_len];
                for (j, rv) in row.iter_mut().enumerate() {
                    if j <= i {
                        let mut s = 0.0;
                        for u in 0..hd {
                            s += q[i * d + off + u] * k[j * d + off + u];
                        }
                        *rv = s * scale;
                    } else {
                        *rv = f64::NEG_INFINITY;
                    }
                }
                softmax_rows(row, 1, t_len);
            }
            for i in 0..t_len {
                for j in 0..=i {
                    let w = a[i * t_len + j];
                    for u in 0..hd {
                        att_out[i * d + off + u] += w * v[j * d + off + u];
                    }
                }
            }
        }

        let mut attn_proj = vec![0.0; t_len * d];
        matmul_forward(&mut attn_proj, &att_out, wo, t_len, d, d);
        let mut x_mid = vec![0.0; t_len * d];
        for i in 0..t_len * d {
            x_mid[i] = x_in[i] + attn_proj[i];
        }

        let mut ln2_out = vec![0.0; t_len * d];
        let mut ln2_rstd = vec![0.0; t_len];
        layernorm_forward(&mut ln2_out, &mut ln2_rstd, &x_mid, ln2g, ln2b, t_len, d);

        let ff = cfg.d_ff;
        let mut mlp_pre = vec![0.0; t_len * ff];
        matmul_forward(&mut mlp_pre, &ln2_out, w1, t_len, d, ff);
        for i in 0..t_len {
            for j in 0..ff {
                mlp_pre[i * ff + j] += b1[j];
            }
        }
        let mut mlp_act = vec![0.0; t_len * ff];
        gelu_forward(&mut mlp_act, &mlp_pre);
        let mut mlp_out = vec![0.0; t_len * d];
        matmul_forward(&mut mlp_out, &mlp_act, w2, t_len, ff, d);
        let mut x_out = vec![0.0; t_len * d];
        for i in 0..t_len {
            for j in 0..d {
                x_out[i * d + j] = x_mid[i * d + j] + mlp_out[i * d + j] + b2[j];
            }
        }

        layers.push(LayerCache {
            x_in,
            ln1_out,
            ln1_rstd,
            q,
            k,
            v,
            att,
            att_out,
            x_mid,
            ln2_out,
            ln2_rstd,
            mlp_pre,
            mlp_act,
        });
        x = x_out;
    }

    let h_final = x;
    let lnfg = &model.get("final_norm.gain").data;
    let lnfb = &model.get("final_norm.bias").data;
    let mut lnf_out = vec![0.0; t_len * d];
    let mut lnf_rstd = vec![0.0; t_len];
    layernorm_forward(&mut lnf_out, &mut lnf_rstd, &h_final, lnfg, lnfb, t_len, d);

    let hw = &model.get("head.w").data;
    let hb = &model.get("head.b").data;
    let vocab = cfg.vocab;
    let mut logits = vec![0.0; t_len * vocab];
    matmul_forward(&mut logits, &lnf_out, hw, t_len, d, vocab);
    for i in 0..t_len {
        for j in 0..vocab {
            logits[i * vocab + j] += hb[j];
        }
    }
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            op: "forward.logits".into(),
        });
    }

    Ok(SeqCache {
        tokens: tokens.to_vec(),
        layers,
        h_final,
        lnf_out,
        lnf_rstd,
        logits,
    })
}

/// Public forward: logits for one sequence, [T, vocab].
pub fn forward(model: &ParameterStore, tokens: &[usize]) -> Result<Tensor> {
    let cache = forward_one(model, tokens)?;
    Tensor::from_vec(&[tokens.len(), model.config.vocab], cache.logits)
}

/// Reverse pass for one sequence. `dlogits` is dL/dlogits ([T, vocab]);
/// `dh_final` (if any) is an extra dL/dh at the last-block output, used by
/// the representation-distance loss. Accumulates into `grads`.
pub(crate) fn backward_one(
    model: &ParameterStore,
    cache: &SeqCache,
    dlogits: &[f64],
    dh_final: Option<&[f64]>,
    grads: &mut BTreeMap<String, Tensor>,
) {
    let cfg = &model.config;
    let t_len = cache.tokens.len();
    let d = cfg.d_model;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let vocab = cfg.vocab;
    let scale = 1.0 / (hd as f64).sqrt();

    // Head and final norm.
    let hw = &model.get("head.w").data;
    let mut d_lnf = vec![0.0; t_len * d];
    {
        let g_hw = &mut grads.get_mut("head.w").unwrap().data;
        matmul_backward(&mut d_lnf, g_hw, dlogits, &cache.lnf_out, hw, t_len, d, vocab);
    }
    {
        let g_hb = &mut grads.get_mut("head.b").unwrap().data;
        for i in 0..t_len {
            for j in 0..vocab {
                g_hb[j] += dlogits[i * vocab + j];
            }
        }
    }

    let mut dx = vec![0.0; t_len * d];
    {
        let lnfg = model.get("final_norm.gain").data.clone();
        let mut g_gain = std::mem::take(&mut grads.get_mut("final_norm.gain").unwrap().data);
        let mut g_bias = std::mem::take(&mut grads.get_mut("final_norm.bias").unwrap().data);
        layernorm_backward(
            &mut dx,
            &mut g_gain,
            &mut g_bias,
            &d_lnf,
            &cache.h_final,
            &lnfg,
            &cache.lnf_rstd,
            t_len,
            d,
        );
        grads.get_mut("final_norm.gain").unwrap().data = g_gain;
        grads.get_mut("final_norm.bias").unwrap().data = g_bias;
    }
    if let Some(extra) = dh_final {
        for (a, &b) in dx.iter_mut().zip(extra.iter()) {
            *a += b;
        }
    }

    let ff = cfg.d_ff;
    for l in (0..cfg.h_layers).rev() {
        let lc = &cache.layers[l];
        let wq = model.get(&format!("layer.{l}.attn.wq")).data.clone();
        let wk = model.get(&format!("layer.{l}.attn.wk")).data.clone();
        let wv = model.get(&format!("layer.{l}.attn.wv")).data.clone();
        let wo = model.get(&format!("layer.{l}.attn.wo")).data.clone();
        let w1 = model.get(&format!("layer.{l}.mlp.w1")).data.clone();
        let w2 = model.get(&format!("layer.{l}.mlp.w2")).data.clone();
        let ln1g = model.get(&format!("layer.{l}.ln1.gain")).data.clone();
        let ln2g = model.get(&format!("layer.{l}.ln2.gain")).data.clone();

        // dx is dL/dx_out. MLP residual branch first.
        {
            let g_b2 = &mut grads.get_mut(&format!("layer.{l}.mlp.b2")).unwrap().data;
            for i in 0..t_len {
                for j in 0..d {
                    g_b2[j] += dx[i * d + j];
                }
            }
        }
        let mut d_mlp_act = vec![0.0; t_len * ff];
        {
            let g_w2 = &mut grads.get_mut(&format!("layer.{l}.mlp.w2")).unwrap().data;
            matmul_backward(&mut d_mlp_act, g_w2, &dx, &lc.mlp_act, &w2, t_len, ff, d);
        }
        let mut d_mlp_pre = vec![0.0; t_len * ff];
        gelu_backward(&mut d_mlp_pre, &d_mlp_act, &lc.mlp_pre);
        {
            let g_b1 = &mut grads.get_mut(&format!("layer.{l}.mlp.b1")).unwrap().data;
            for i in 0..t_len {
                for j in 0..ff {
                    g_b1[j] += d_mlp_pre[i * ff + j];
                }
            }
        }
        let mut d_ln2_out = vec![0.0; t_len * d];
        {
            let g_w1 = &mut grads.get_mut(&format!("layer.{l}.mlp.w1")).unwrap().data;
            matmul_backward(&mut d_ln2_out, g_w1, &d_mlp_pre, &lc.ln2_out, &w1, t_len, d, ff);
        }
        // dx_mid = dx (residual) + layernorm backward of d_ln2_out.
        let mut d_x_mid = dx.clone();
        {
            let mut g_gain = std::mem::take(
                &mut grads.get_mut(&format!("layer.{l}.ln2.gain")).unwrap().data,
            );
            let mut g_bias = std::mem::take(
                &mut grads.get_mut(&format!("layer.{l}.ln2.bias")).unwrap().data,
            );
            layernorm_backward(
                &mut d_x_mid,
                &mut g_gain,
                &mut g_bias,
                &d_ln2_out,
                &lc.x_mid,
                &ln2g,
                &lc.ln2_rstd,
                t_len,
                d,
            );
            grads.get_mut(&format!("layer.{l}.ln2.gain")).unwrap().data = g_gain;
            grads.get_mut(&format!("layer.{l}.ln2.bias")).unwrap().data = g_bias;
        }

        // Attention branch.
        let mut d_att_out = vec![0.0; t_len * d];
        {
            let g_wo = &mut grads.get_mut(&format!("layer.{l}.attn.wo")).unwrap().data;
            matmul_backward(&mut d_att_out, g_wo, &d_x_mid, &lc.att_out, &wo, t_len, d, d);
        }
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        for h in 0..nh {
            let off = h * hd;
            let a = &lc.att[h * t_len * t_len..(h + 1) * t_len * t_len];
            // d att weights and dv from att_out = att × v_h.
            let mut d_att = vec![0.0; t_len * t_len];
            for i in 0..t_len {
                for j in 0..=i {
                    let mut s = 0.0;
                    for u in 0..hd {
                        s += d_att_out[i * d + off + u] * lc.v[j * d + off + u];
                    }
                    d_att[i * t_len + j] = s;
                    let w = a[i * t_len + j];
                    for u in 0..hd {
                        dv[j * d + off + u] += w * d_att_out[i * d + off + u];
                    }
                }
            }
            // Through softmax rows, then scores = q·k * scale.
            for i in 0..t_len {
                let y = &a[i * t_len..(i + 1) * t_len];
                let dy = &d_att[i * t_len..(i + 1) * t_len];
                let mut d_scores = vec![0.0; t_len];
                softmax_backward_row(&mut d_scores, y, dy);
                for (j, ds) in d_scores.iter().enumerate().take(i + 1) {
                    let ds = ds * scale;
                    for u in 0..hd {
                        dq[i * d + off + u] += ds * lc.k[j * d + off + u];
                        dk[j * d + off + u] += ds * lc.q[i * d + off + u];
                    }
                }
            }
        }

        let mut d_ln1_out = vec![0.0; t_len * d];
        {
            let g_wq = &mut grads.get_mut(&format!("layer.{l}.attn.wq")).unwrap().data;
            matmul_backward(&mut d_ln1_out, g_wq, &dq, &lc.ln1_out, &wq, t_len, d, d);
        }
        {
            let g_wk = &mut grads.get_mut(&format!("layer.{l}.attn.wk")).unwrap().data;
            matmul_backward(&mut d_ln1_out, g_wk, &dk, &lc.ln1_out, &wk, t_len, d, d);
        }
        {
            let g_wv = &mut grads.get_mut(&format!("layer.{l}.attn.wv")).unwrap().data;
            matmul_backward(&mut d_ln1_out, g_wv, &dv, &lc.ln1_out, &wv, t_len, d, d);
        }

        let mut d_x_in = d_x_mid.clone();
        {
            let mut g_gain = std::mem::take(
                &mut grads.get_mut(&format!("layer.{l}.ln1.gain")).unwrap().data,
            );
            let mut g_bias = std::mem::take(
                &mut grads.get_mut(&format!("layer.{l}.ln1.bias")).unwrap().data,
            );
            layernorm_backward(
                &mut d_x_in,
                &mut g_gain,
                &mut g_bias,
                &d_ln1_out,
                &lc.x_in,
                &ln1g,
                &lc.ln1_rstd,
                t_len,
                d,
            );
            grads.get_mut(&format!("layer.{l}.ln1.gain")).unwrap().data = g_gain;
            grads.get_mut(&format!("layer.{l}.ln1.bias")).unwrap().data = g_bias;
        }
        dx = d_x_in;
    }

    // Embeddings.
    {
        let g_tok = &mut grads.get_mut("embed.tok").unwrap().data;
        for (i, &tok) in cache.tokens.iter().enumerate() {
            for j in 0..d {
                g_tok[tok * d + j] += dx[i * d + j];
            }
        }
    }
    {
        let g_pos = &mut grads.get_mut("embed.pos").unwrap().data;
        for i in 0..t_len {
            for j in 0..d {
                g_pos[i * d + j] += dx[i * d + j];
            }
        }
    }
}

/// Zero-filled gradient accumulator covering every parameter.
pub(crate) fn zero_grads(model: &ParameterStore) -> BTreeMap<String, Tensor> {
    model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(&t.shape)))
        .collect()
}

// ── Updates ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Descend,
    Ascend,
}

/// Plain gradient step on masked parameters: θ ← θ ± lr·g.
/// Errors on a gradient whose name lies outside the trainable mask.
pub fn sgd_apply(
    model: &mut ParameterStore,
    grads: &GradientMap,
    lr: f64,
    direction: Direction,
    mask: &FreezeMask,
) -> Result<()> {
    for name in grads.names() {
        if !mask.contains(name) {
            return Err(Error::FrozenParam(name.clone()));
        }
    }
    let sign = match direction {
        Direction::Descend => -1.0,
        Direction::Ascend => 1.0,
    };
    for (name, g) in &grads.0 {
        let p = model.params.get_mut(name).ok_or_else(|| Error::Shape {
            op: "sgd_apply".into(),
            detail: format!("unknown parameter {name}"),
        })?;
        if p.shape != g.shape {
            return Err(Error::Shape {
                op: "sgd_apply".into(),
                detail: format!("{name}: {:?} vs {:?}", p.shape, g.shape),
            });
        }
        for (pv, gv) in p.data.iter_mut().zip(g.data.iter()) {
            *pv += sign * lr * gv;
        }
    }
    Ok(())
}

/// Adaptive-moment optimizer state (β1=0.9, β2=0.999, ε=1e-8).
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: usize,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &ParameterStore) -> Self {
        AdamState {
            m: zero_grads(model),
            v: zero_grads(model),
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        model: &mut ParameterStore,
        grads: &GradientMap,
        lr: f64,
        mask: &FreezeMask,
    ) -> Result<()> {
        for name in grads.names() {
            if !mask.contains(name) {
                return Err(Error::FrozenParam(name.clone()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in &grads.0 {
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let p = model.params.get_mut(name).unwrap();
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

// ── Layer surgery ────────────────────────────────────────────────────

/// Deep copy of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub layer_index: usize,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn extract_layers(model: &ParameterStore, indices: &[usize]) -> Result<Vec<LayerParams>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &idx in indices {
        if idx >= model.config.h_layers {
            return Err(Error::Validation(format!(
                "layer index {} out of range {}",
                idx, model.config.h_layers
            )));
        }
        if !seen.insert(idx) {
            return Err(Error::Validation(format!("duplicate layer index {idx}")));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape) in layer_shapes(&model.config, idx) {
            let t = model.params.get(&name).ok_or_else(|| Error::Shape {
                op: "extract_layers".into(),
                detail: format!("missing {name}"),
            })?;
            debug_assert_eq!(t.shape, shape);
            tensors.insert(name, t.clone());
        }
        out.push(LayerParams {
            layer_index: idx,
            tensors,
        });
    }
    Ok(out)
}

pub fn insert_layers(model: &mut ParameterStore, layers: &[LayerParams]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for lp in layers {
        if lp.layer_index >= model.config.h_layers {
            return Err(Error::Validation(format!(
                "layer index {} out of range {}",
                lp.layer_index, model.config.h_layers
            )));
        }
        if !seen.insert(lp.layer_index) {
            return Err(Error::Validation(format!(
                "duplicate layer index {}",
                lp.layer_index
            )));
        }
        for (name, t) in &lp.tensors {
            let slot = model.params.get(name).ok_or_else(|| Error::Shape {
                op: "insert_layers".into(),
                detail: format!("unknown parameter {name}"),
            })?;
            if slot.shape != t.shape {
                return Err(Error::Shape {
                    op: "insert_layers".into(),
                    detail: format!("{name}: {:?} vs {:?}", slot.shape, t.shape),
                });
            }
        }
    }
    for lp in layers {
        for (name, t) in &lp.tensors {
            model.params.insert(name.clone(), t.clone());
        }
    }
    Ok(())
}
