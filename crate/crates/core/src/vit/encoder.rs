//! Tape-level transformer encoder shared by every float variant.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

use super::params::{Affine, BlockNorms, BlockWeights, Head, Linear, Norm, Scorer, Stem};
use super::ViTConfig;

pub(crate) const LN_EPS: f32 = 1e-6;

pub(crate) struct BlockView<'a> {
    pub norms: &'a BlockNorms<Var>,
    pub weights: &'a BlockWeights<Var>,
    pub affine: Option<&'a Affine<Var>>,
}

/// Token gating applied before selected blocks.
pub(crate) enum Gate<'a> {
    Off,
    /// Differentiable: cumulative sigmoid keep-mask reweights attention columns.
    Soft { scorers: &'a [Scorer<Var>], stages: &'a [usize] },
    /// Inference: keep the `keep[s]` highest scoring patch tokens at stage `s`.
    Hard { scorers: &'a [Scorer<Var>], stages: &'a [usize], keep: &'a [usize] },
}

#[derive(Debug)]
pub struct TapeTrace {
    pub logits: Var,
    pub distill_logits: Option<Var>,
    /// Per block `[H·n × n]` attention, only populated when tracing.
    pub attentions: Vec<Var>,
    /// Per block `[n × D]` outputs.
    pub hiddens: Vec<Var>,
    /// Soft gate: cumulative `[1×N_patches]` keep mask after each stage.
    pub stage_masks: Vec<Var>,
    /// Hard gate: original patch indices alive after each stage.
    pub kept: Vec<Vec<usize>>,
}

pub(crate) fn linear(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_row(y, l.bias)
}

fn norm(tape: &mut Tape, x: Var, n: &Norm<Var>) -> Result<Var> {
    tape.layer_norm(x, n.gamma, n.beta, LN_EPS)
}

/// Multi-head self-attention; `mask` (when given) weights key columns.
fn attention(
    tape: &mut Tape,
    cfg: &ViTConfig,
    h: Var,
    w: &BlockWeights<Var>,
    mask: Option<Var>,
    trace: bool,
) -> Result<(Var, Option<Var>)> {
    let q = linear(tape, h, &w.q)?;
    let k = linear(tape, h, &w.k)?;
    let v = linear(tape, h, &w.v)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * dh, dh)?;
        let kh = tape.slice_cols(k, head * dh, dh)?;
        let vh = tape.slice_cols(v, head * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = match mask {
            Some(m) => tape.masked_softmax(s, m)?,
            None => tape.softmax(s, 1)?,
        };
        outs.push(tape.matmul(a, vh)?);
        maps.push(a);
    }
    let joined = tape.concat_cols(&outs)?;
    let out = linear(tape, joined, &w.o)?;
    let attn = if trace { Some(tape.concat_rows(&maps)?) } else { None };
    Ok((out, attn))
}

fn block(
    tape: &mut Tape,
    cfg: &ViTConfig,
    x: Var,
    b: &BlockView,
    mask: Option<Var>,
    trace: bool,
) -> Result<(Var, Option<Var>)> {
    let h = norm(tape, x, &b.norms.ln1)?;
    let (a, attn) = attention(tape, cfg, h, b.weights, mask, trace)?;
    let x = tape.add(x, a)?;
    let h = norm(tape, x, &b.norms.ln2)?;
    let h = linear(tape, h, &b.weights.fc1)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, &b.weights.fc2)?;
    let mut x = tape.add(x, h)?;
    if let Some(t) = b.affine {
        x = tape.mul_row(x, t.scale)?;
        x = tape.add_row(x, t.shift)?;
    }
    Ok((x, attn))
}

/// Scorer logits `[m×1]` for patch rows `xp[m×D]` given a `[1×D]` context.
pub(crate) fn score(tape: &mut Tape, xp: Var, ctx: Var, scorer: &Scorer<Var>) -> Result<Var> {
    let m = tape.value(xp).dims2().0;
    let ctx = tape.repeat_rows(ctx, m);
    let feats = tape.concat_cols(&[xp, ctx])?;
    let h = linear(tape, feats, &scorer.fc1)?;
    let h = tape.gelu(h);
    linear(tape, h, &scorer.fc2)
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k_indices(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn encode(
    tape: &mut Tape,
    cfg: &ViTConfig,
    stem: &Stem<Var>,
    blocks: &[BlockView],
    head: &Head<Var>,
    image: Var,
    gate: Gate,
    trace: bool,
) -> Result<TapeTrace> {
    let expected = cfg.image_shape();
    if tape.value(image).shape() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            lhs: expected.to_vec(),
            rhs: tape.value(image).shape().to_vec(),
        });
    }
    let np = cfg.num_patches();
    let prefix = cfg.num_prefix_tokens();
    let idx = super::patch::patch_indices(cfg.channels, cfg.image_size, cfg.patch_size);
    let patches = tape.gather(image, &idx, &[np, cfg.patch_dim()])?;
    let emb = linear(tape, patches, &stem.patch)?;
    let mut tokens = vec![stem.cls];
    if let Some(d) = stem.dist {
        tokens.push(d);
    }
    tokens.push(emb);
    let x = tape.concat_rows(&tokens)?;
    let mut x = tape.add(x, stem.pos)?;

    let mut out = TapeTrace {
        logits: x,
        distill_logits: None,
        attentions: Vec::new(),
        hiddens: Vec::new(),
        stage_masks: Vec::new(),
        kept: Vec::new(),
    };
    let prefix_rows: Vec<usize> = (0..prefix).collect();
    let prefix_ones = tape.constant(Tensor::ones(&[1, prefix]));
    let mut soft_mask: Option<Var> = None;
    let mut col_mask: Option<Var> = None;
    let mut live: Vec<usize> = (0..np).collect();

    for (layer, b) in blocks.iter().enumerate() {
        match &gate {
            Gate::Off => {}
            Gate::Soft { scorers, stages } => {
                if let Some(s) = stages.iter().position(|&l| l == layer) {
                    let patch_rows: Vec<usize> = (prefix..prefix + np).collect();
                    let xp = tape.gather_rows(x, &patch_rows)?;
                    let prev = match soft_mask {
                        Some(m) => m,
                        None => tape.constant(Tensor::ones(&[1, np])),
                    };
                    // mask-weighted mean of the live tokens
                    let weighted = tape.matmul(prev, xp)?;
                    let total = tape.sum(prev);
                    let inv = tape.recip(total);
                    let ctx = tape.mul_scalar(weighted, inv)?;
                    let logits = score(tape, xp, ctx, &scorers[s])?;
                    let keep = tape.sigmoid(logits);
                    let keep = tape.reshape(keep, &[1, np])?;
                    let mask = tape.mul(prev, keep)?;
                    soft_mask = Some(mask);
                    out.stage_masks.push(mask);
                    col_mask = Some(tape.concat_cols(&[prefix_ones, mask])?);
                }
            }
            Gate::Hard { scorers, stages, keep } => {
                if let Some(s) = stages.iter().position(|&l| l == layer) {
                    let n = tape.value(x).dims2().0;
                    let patch_rows: Vec<usize> = (prefix..n).collect();
                    let xp = tape.gather_rows(x, &patch_rows)?;
                    let ctx = tape.mean_rows(xp);
                    let logits = score(tape, xp, ctx, &scorers[s])?;
                    let chosen = top_k_indices(tape.value(logits).data(), keep[s]);
                    let mut rows = prefix_rows.clone();
                    rows.extend(chosen.iter().map(|&c| c + prefix));
                    live = chosen.iter().map(|&c| live[c]).collect();
                    x = tape.gather_rows(x, &rows)?;
                    out.kept.push(live.clone());
                }
            }
        }
        let (y, attn) = block(tape, cfg, x, b, col_mask, trace)?;
        x = y;
        if let Some(a) = attn {
            out.attentions.push(a);
        }
        out.hiddens.push(x);
    }

    let cls = tape.gather_rows(x, &[0])?;
    let cls = norm(tape, cls, &head.norm)?;
    out.logits = linear(tape, cls, &head.head)?;
    if let Some(dh) = &head.dist_head {
        let d = tape.gather_rows(x, &[1])?;
        let d = norm(tape, d, &head.norm)?;
        out.distill_logits = Some(linear(tape, d, dh)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.5, 0.1], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.1, 0.2, 0.3], 3), vec![0, 1, 2]);
    }
}
