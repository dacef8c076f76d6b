use super::{ArchConfig, Block, Embeddings, LmHead, LmParts};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var, LAYER_NORM_EPS};
use crate::tasks::vocab::TokenId;

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// n×V
    pub logits: Var,
    /// Residual stream after `tap_layer` blocks, zero-padded to context_len rows.
    pub tapped: Option<Var>,
}

/// Token plus learned position embeddings for positions `0..tokens.len()`.
pub fn embed_forward(g: &mut Graph, cfg: &ArchConfig, embed: &Embeddings, tokens: &[TokenId]) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Value("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.context_len,
        });
    }
    let tok = g.param(&embed.tok);
    let pos = g.param(&embed.pos);
    let te = g.gather(tok, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pe = g.gather(pos, &positions)?;
    g.add(te, pe)
}

/// One pre-norm block. `o_proj` replaces the block's own attention output
/// projection (used to inject LoRA-adapted weights).
pub fn block_forward(g: &mut Graph, cfg: &ArchConfig, block: &Block, x: Var, o_proj: Option<Var>) -> Result<Var> {
    let ln1_g = g.param(&block.ln1_g);
    let ln1_b = g.param(&block.ln1_b);
    let h = g.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;
    let wq = g.param(&block.wq);
    let wk = g.param(&block.wk);
    let wv = g.param(&block.wv);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let a = g.causal_attention(q, k, v, cfg.n_heads)?;
    let wo = match o_proj {
        Some(w) => w,
        None => g.param(&block.wo),
    };
    let o = g.matmul(a, wo)?;
    let x = g.add(x, o)?;

    let ln2_g = g.param(&block.ln2_g);
    let ln2_b = g.param(&block.ln2_b);
    let h = g.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
    let w1 = g.param(&block.w1);
    let b1 = g.param(&block.b1);
    let w2 = g.param(&block.w2);
    let b2 = g.param(&block.b2);
    let m = g.matmul(h, w1)?;
    let m = g.add_row_bias(m, b1)?;
    let m = g.relu(m);
    let m = g.matmul(m, w2)?;
    let m = g.add_row_bias(m, b2)?;
    g.add(x, m)
}

pub fn head_forward(g: &mut Graph, head: &LmHead, x: Var) -> Result<Var> {
    let ln_g = g.param(&head.ln_g);
    let ln_b = g.param(&head.ln_b);
    let h = g.layer_norm(x, ln_g, ln_b, LAYER_NORM_EPS)?;
    let w = g.param(&head.w);
    g.matmul(h, w)
}

/// Full causal forward pass.
///
/// `tap_layer = Some(k)` additionally returns the residual stream after the
/// first `k` blocks (k = 0 is the embedding output), right-padded with zero
/// rows to exactly `context_len` rows.
pub fn forward(
    g: &mut Graph,
    parts: &LmParts<'_>,
    tokens: &[TokenId],
    o_proj: Option<&[Var]>,
    tap_layer: Option<usize>,
) -> Result<ForwardOutput> {
    let n_layers = parts.blocks.len();
    if let Some(k) = tap_layer {
        if k > n_layers {
            return Err(Error::Range {
                name: "tap_layer".into(),
                value: k,
                lo: 0,
                hi: n_layers,
            });
        }
    }
    if let Some(o) = o_proj {
        if o.len() != n_layers {
            return Err(Error::shape("o_proj overrides", &[o.len()], &[n_layers]));
        }
    }
    let mut x = embed_forward(g, parts.cfg, parts.embed, tokens)?;
    let mut tapped = None;
    for (i, block) in parts.blocks.iter().enumerate() {
        if tap_layer == Some(i) {
            tapped = Some(g.pad_rows(x, parts.cfg.context_len)?);
        }
        x = block_forward(g, parts.cfg, block, x, o_proj.map(|o| o[i]))?;
    }
    if tap_layer == Some(n_layers) {
        tapped = Some(g.pad_rows(x, parts.cfg.context_len)?);
    }
    let logits = head_forward(g, parts.head, x)?;
    Ok(ForwardOutput { logits, tapped })
}
