use super::weights::{FeedForward, LayerWeights, Mlp, MoeWeights};
use super::{HiddenState, KvSlot, ModelConfig, ModelError};
use crate::numerics::{dot, matmul, rms_norm, rope_rotate, silu, softmax, Matrix};

/// Experts chosen for one token, sorted ascending, with their mixing
/// weights in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    pub experts: Vec<usize>,
    pub weights: Vec<f32>,
}

/// Routing used by one MoE layer for every token of a call.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub layer: usize,
    pub tokens: Vec<TokenRoute>,
}

impl RoutingRecord {
    /// True when both records select the same expert sets per token.
    pub fn same_experts(&self, other: &Self) -> bool {
        self.tokens.len() == other.tokens.len()
            && self
                .tokens
                .iter()
                .zip(&other.tokens)
                .all(|(a, b)| a.experts == b.experts)
    }
}

fn rms_rows(x: &HiddenState, gain: &[f32], eps: f64) -> Result<HiddenState, ModelError> {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for row in x.row_iter() {
        out.extend(rms_norm(row, gain, eps)?);
    }
    Ok(Matrix::new(x.rows(), x.cols(), out)?)
}

fn mlp_apply(h: &HiddenState, mlp: &Mlp) -> Result<HiddenState, ModelError> {
    let gate = matmul(h, &mlp.w_gate)?;
    let up = matmul(h, &mlp.w_up)?;
    let act = gate.zip_map(&up, |g, u| silu(g) * u);
    Ok(matmul(&act, &mlp.w_down)?)
}

/// Top-k gated mixture for one (already normalized) token vector.
///
/// Without `pinned`, logits are `x * router`, the `top_k` largest are kept
/// (ties go to the lower index) and a softmax over the kept logits gives
/// the mixing weights. With `pinned`, its experts and weights are reused
/// verbatim.
pub fn moe_mlp(
    x: &[f32],
    moe: &MoeWeights,
    pinned: Option<&TokenRoute>,
) -> Result<(Vec<f32>, TokenRoute), ModelError> {
    let route = match pinned {
        Some(p) => {
            if p.experts.len() != moe.top_k || p.weights.len() != moe.top_k {
                return Err(ModelError::PinnedRouting(format!(
                    "record holds {} experts, layer uses top_k = {}",
                    p.experts.len(),
                    moe.top_k
                )));
            }
            if let Some(&e) = p.experts.iter().find(|&&e| e >= moe.experts.len()) {
                return Err(ModelError::PinnedRouting(format!(
                    "expert {e} does not exist"
                )));
            }
            p.clone()
        }
        None => {
            let row = Matrix::row_vector(x.to_vec());
            let logits = matmul(&row, &moe.router)?.into_vec();
            let mut order: Vec<usize> = (0..logits.len()).collect();
            // stable sort keeps lower indices first among equal logits
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
            let mut experts: Vec<usize> = order[..moe.top_k].to_vec();
            experts.sort_unstable();
            let chosen: Vec<f32> = experts.iter().map(|&e| logits[e]).collect();
            TokenRoute {
                experts,
                weights: softmax(&chosen),
            }
        }
    };
    let h = Matrix::row_vector(x.to_vec());
    let mut acc = vec![0.0f64; x.len()];
    for (&e, &w) in route.experts.iter().zip(&route.weights) {
        let out = mlp_apply(&h, &moe.experts[e])?;
        for (a, v) in acc.iter_mut().zip(out.data()) {
            *a += w as f64 * *v as f64;
        }
    }
    Ok((acc.into_iter().map(|v| v as f32).collect(), route))
}

fn attention(
    h: &HiddenState,
    layer: &LayerWeights,
    config: &ModelConfig,
    cache: Option<&mut KvSlot>,
) -> Result<HiddenState, ModelError> {
    let (t_new, d) = h.shape();
    let (n_heads, head_dim) = (config.n_heads, config.head_dim);
    let past = cache.as_ref().map_or(0, |s| s.len());

    let q = matmul(h, &layer.wq)?;
    let k = matmul(h, &layer.wk)?;
    let v = matmul(h, &layer.wv)?;

    let mut q_rot = Vec::with_capacity(t_new * d);
    let mut k_rot = Vec::with_capacity(t_new * d);
    for t in 0..t_new {
        let pos = past + t;
        let qh = Matrix::new(n_heads, head_dim, q.row(t).to_vec())?;
        let kh = Matrix::new(n_heads, head_dim, k.row(t).to_vec())?;
        q_rot.extend(rope_rotate(&qh, pos, config.rope_base)?.into_vec());
        k_rot.extend(rope_rotate(&kh, pos, config.rope_base)?.into_vec());
    }

    let slot;
    let (keys, values): (&[f32], &[f32]) = match cache {
        Some(s) => {
            s.append(&k_rot, v.data());
            slot = s;
            (slot.all_keys(), slot.all_values())
        }
        None => (&k_rot, v.data()),
    };

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0f32; t_new * d];
    let mut scores = Vec::with_capacity(past + t_new);
    for t in 0..t_new {
        let visible = past + t + 1;
        for head in 0..n_heads {
            let off = head * head_dim;
            let qv = &q_rot[t * d + off..t * d + off + head_dim];
            scores.clear();
            for p in 0..visible {
                let kv = &keys[p * d + off..p * d + off + head_dim];
                scores.push(dot(qv, kv) * scale);
            }
            let probs = softmax(&scores);
            let mut acc = vec![0.0f64; head_dim];
            for (p, w) in probs.iter().enumerate() {
                let vv = &values[p * d + off..p * d + off + head_dim];
                for (a, x) in acc.iter_mut().zip(vv) {
                    *a += w * *x as f64;
                }
            }
            for (o, a) in out[t * d + off..t * d + off + head_dim].iter_mut().zip(acc) {
                *o = a as f32;
            }
        }
    }
    let heads = Matrix::new(t_new, d, out)?;
    Ok(matmul(&heads, &layer.wo)?)
}

/// Pre-norm decoder block:
/// `y = x + Attn(LN1(x)); out = y + MLP(LN2(y))`.
///
/// Attention is causal over `(cached past ++ x)`. When `cache` is given the
/// `T` new key/value rows are appended to it. MoE layers return the routing
/// they used; `pinned` replays a previous record instead of gating.
pub fn block_forward(
    x: &HiddenState,
    layer: &LayerWeights,
    config: &ModelConfig,
    cache: Option<&mut KvSlot>,
    pinned: Option<&RoutingRecord>,
) -> Result<(HiddenState, Option<RoutingRecord>), ModelError> {
    let d = config.d_model;
    if x.cols() != d {
        return Err(ModelError::Shape {
            what: format!("layer {} input", layer.index),
            expected: vec![x.rows(), d],
            found: vec![x.rows(), x.cols()],
        });
    }
    if let Some(slot) = &cache {
        if slot.layer() != layer.index {
            return Err(ModelError::WrongCacheLayer {
                expected: layer.index,
                found: slot.layer(),
            });
        }
        if slot.width() != d {
            return Err(ModelError::Shape {
                what: format!("cache slot {}", slot.layer()),
                expected: vec![d],
                found: vec![slot.width()],
            });
        }
    }

    let h = rms_rows(x, &layer.attn_norm, config.norm_eps)?;
    let attn = attention(&h, layer, config, cache)?;
    let mid = x.add(&attn);
    let h2 = rms_rows(&mid, &layer.mlp_norm, config.norm_eps)?;

    let (ffn_out, routing) = match &layer.ffn {
        FeedForward::Dense(mlp) => (mlp_apply(&h2, mlp)?, None),
        FeedForward::Moe(moe) => {
            if let Some(p) = pinned {
                if p.tokens.len() != x.rows() {
                    return Err(ModelError::PinnedRouting(format!(
                        "record covers {} tokens, input has {}",
                        p.tokens.len(),
                        x.rows()
                    )));
                }
            }
            let mut data = Vec::with_capacity(x.rows() * d);
            let mut tokens = Vec::with_capacity(x.rows());
            for t in 0..x.rows() {
                let pin = pinned.map(|p| &p.tokens[t]);
                let (out, route) = moe_mlp(h2.row(t), moe, pin)?;
                data.extend(out);
                tokens.push(route);
            }
            (
                Matrix::new(x.rows(), d, data)?,
                Some(RoutingRecord {
                    layer: layer.index,
                    tokens,
                }),
            )
        }
    };
    let out = mid.add(&ffn_out);
    out.check_finite("block_forward")?;
    Ok((out, routing))
}
