//! Multi-head attention and the position-wise feed-forward block.

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Mask, Tape, Var};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Attention projections held as concrete tensors (d×d each).
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: Tensor2,
    pub wk: Tensor2,
    pub wv: Tensor2,
    pub wo: Tensor2,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn identity(d: usize, heads: usize) -> Self {
        let i = Tensor2::identity(d);
        Self {
            wq: i.clone(),
            wk: i.clone(),
            wv: i.clone(),
            wo: i,
            heads,
        }
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        validate_heads(d, self.heads)?;
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if w.shape() != (d, d) {
                return Err(Error::shape("attention", format!("{name} is {:?}, expected {d}x{d}", w.shape())));
            }
        }
        Ok(())
    }
}

fn validate_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Attention projections stored in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        validate_heads(d, heads)?;
        Ok(Self {
            wq: store.add_gaussian(format!("{prefix}.wq"), d, d, std, rng)?,
            wk: store.add_gaussian(format!("{prefix}.wk"), d, d, std, rng)?,
            wv: store.add_gaussian(format!("{prefix}.wv"), d, d, std, rng)?,
            wo: store.add_gaussian(format!("{prefix}.wo"), d, d, std, rng)?,
            heads,
        })
    }

    pub fn load(store: &ParamStore, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: store.require(&format!("{prefix}.wq"))?,
            wk: store.require(&format!("{prefix}.wk"))?,
            wv: store.require(&format!("{prefix}.wv"))?,
            wo: store.require(&format!("{prefix}.wo"))?,
            heads,
        })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> AttentionVars {
        AttentionVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            wo: tape.param(store, self.wo),
            heads: self.heads,
        }
    }
}

/// Attention projections as nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

/// Scaled dot-product attention with per-head projections followed by an
/// output projection. Heads split the model width into equal column blocks
/// and each head is scaled by `1/sqrt(d_head)`.
pub fn attend(tape: &mut Tape, queries: Var, keys: Var, values: Var, mask: Option<&Mask>, w: &AttentionVars) -> Result<Var> {
    let (nq, d) = tape.shape(queries);
    let (nk, dk) = tape.shape(keys);
    let (nv, dv) = tape.shape(values);
    if dk != d || dv != d || nk != nv {
        return Err(Error::shape(
            "multi_head_attention",
            format!("q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}"),
        ));
    }
    if tape.shape(w.wq) != (d, d) {
        return Err(Error::shape(
            "multi_head_attention",
            format!("projection {:?} for width {d}", tape.shape(w.wq)),
        ));
    }
    validate_heads(d, w.heads)?;
    if let Some(m) = mask {
        if m.shape() != (nq, nk) {
            return Err(Error::shape(
                "multi_head_attention",
                format!("mask {:?} for {nq} queries and {nk} keys", m.shape()),
            ));
        }
    } else if nk == 0 && nq > 0 {
        return Err(Error::InvalidMask { row: 0 });
    }

    let q = tape.matmul(queries, w.wq)?;
    let k = tape.matmul(keys, w.wk)?;
    let v = tape.matmul(values, w.wv)?;
    let dh = d / w.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let logits = tape.matmul_t(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let probs = tape.softmax(logits, mask)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    let joined = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(joined, w.wo)
}

/// Standalone multi-head attention over concrete tensors.
pub fn multi_head_attention(
    queries: &Tensor2,
    keys: &Tensor2,
    values: &Tensor2,
    mask: Option<&Mask>,
    weights: &AttentionWeights,
) -> Result<Tensor2> {
    weights.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone());
    let k = tape.constant(keys.clone());
    let v = tape.constant(values.clone());
    let w = AttentionVars {
        wq: tape.constant(weights.wq.clone()),
        wk: tape.constant(weights.wk.clone()),
        wv: tape.constant(weights.wv.clone()),
        wo: tape.constant(weights.wo.clone()),
        heads: weights.heads,
    };
    let out = attend(&mut tape, q, k, v, mask, &w)?;
    Ok(tape.value(out).clone())
}

/// Two affine layers with a tanh-approximated GELU between them.
#[derive(Debug, Clone)]
pub struct FeedForwardWeights {
    pub w1: Tensor2,
    pub b1: Tensor2,
    pub w2: Tensor2,
    pub b2: Tensor2,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForwardParams {
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, hidden: usize, std: f64, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w1: store.add_gaussian(format!("{prefix}.w1"), d, hidden, std, rng)?,
            b1: store.add_zeros(format!("{prefix}.b1"), 1, hidden)?,
            w2: store.add_gaussian(format!("{prefix}.w2"), hidden, d, std, rng)?,
            b2: store.add_zeros(format!("{prefix}.b2"), 1, d)?,
        })
    }

    pub fn load(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.require(&format!("{prefix}.w1"))?,
            b1: store.require(&format!("{prefix}.b1"))?,
            w2: store.require(&format!("{prefix}.w2"))?,
            b2: store.require(&format!("{prefix}.b2"))?,
        })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.param(store, self.w1),
            b1: tape.param(store, self.b1),
            w2: tape.param(store, self.w2),
            b2: tape.param(store, self.b2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn feed_forward_on(tape: &mut Tape, x: Var, w: &FeedForwardVars) -> Result<Var> {
    let h = tape.matmul(x, w.w1)?;
    let h = tape.add_row(h, w.b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w.w2)?;
    tape.add_row(o, w.b2)
}

pub fn feed_forward(x: &Tensor2, weights: &FeedForwardWeights) -> Result<Tensor2> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = FeedForwardVars {
        w1: tape.constant(weights.w1.clone()),
        b1: tape.constant(weights.b1.clone()),
        w2: tape.constant(weights.w2.clone()),
        b2: tape.constant(weights.b2.clone()),
    };
    let out = feed_forward_on(&mut tape, xv, &w)?;
    Ok(tape.value(out).clone())
}
