//! Target-aware aggregation and the prediction MLP.

use crate::error::{Error, Result};
use crate::model::{Aggregation, Model};
use crate::nn::{Mask, Tape, Tensor2, Var};

fn key_mask(rows: usize, valid: &[bool]) -> Option<Mask> {
    if valid.iter().all(|&v| v) {
        None
    } else {
        Some(Mask::keys(rows, valid))
    }
}

/// Single-head scaled dot-product attention with candidate embeddings as
/// queries (C×d) over the rows of `h` (n×d). Returns C×d.
pub fn aggregate_target_aware(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    valid: &[bool],
) -> Result<Var> {
    let (c, d) = tape.shape(queries);
    let (n, dk) = tape.shape(keys);
    if dk != d || tape.shape(values).0 != n || valid.len() != n {
        return Err(Error::shape(
            "target_aggregation",
            format!("queries {c}x{d}, keys {n}x{dk}, {} validity flags", valid.len()),
        ));
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidMask { row: 0 });
    }
    let logits = tape.matmul_t(queries, keys)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let probs = tape.softmax(logits, key_mask(c, valid).as_ref())?;
    tape.matmul(probs, values)
}

/// Mean over valid rows of `h`, repeated for `count` candidates.
pub fn aggregate_mean(tape: &mut Tape, h: Var, valid: &[bool], count: usize) -> Result<Var> {
    let (n, d) = tape.shape(h);
    let k = valid.iter().filter(|&&v| v).count();
    if k == 0 {
        return Ok(tape.constant(Tensor2::zeros(count, d)));
    }
    let mean = if k == n {
        tape.mean_rows(h)
    } else {
        let w: Vec<f64> = valid.iter().map(|&v| if v { 1.0 / k as f64 } else { 0.0 }).collect();
        let w = tape.constant(Tensor2::row_vector(w));
        tape.matmul(w, h)?
    };
    tape.repeat_rows(mean, count)
}

/// Pools `h` for each candidate according to the model's aggregation mode.
/// A side with no valid rows aggregates to zero.
pub fn aggregate(tape: &mut Tape, model: &Model, cands: Var, h: Var, valid: &[bool]) -> Result<Var> {
    let count = tape.shape(cands).0;
    if !valid.iter().any(|&v| v) {
        return Ok(tape.constant(Tensor2::zeros(count, model.d())));
    }
    match model.config.aggregation {
        Aggregation::Mean => aggregate_mean(tape, h, valid, count),
        Aggregation::TargetAware => aggregate_target_aware(tape, cands, h, h, valid),
        Aggregation::TargetAwareProjected => {
            let (wq, wk) = match (model.params.agg_query, model.params.agg_key) {
                (Some(q), Some(k)) => (q, k),
                _ => return Err(Error::State("projected aggregation without projection weights".into())),
            };
            let wq = tape.param(&model.store, wq);
            let wk = tape.param(&model.store, wk);
            let q = tape.matmul(cands, wq)?;
            let k = tape.matmul(h, wk)?;
            aggregate_target_aware(tape, q, k, h, valid)
        }
    }
}

/// `MLP(CONCAT(e_u, w_s, w_r, e_v))` for C candidates; returns C×1 logits.
pub fn head_logits(tape: &mut Tape, model: &Model, user: Var, w_s: Var, w_r: Var, cands: Var) -> Result<Var> {
    let count = tape.shape(cands).0;
    let p = &model.params.head;
    let u = tape.repeat_rows(user, count)?;
    let x = tape.concat_cols(&[u, w_s, w_r, cands])?;
    let layers = [(p.w1, p.b1, true), (p.w2, p.b2, true), (p.w3, p.b3, false)];
    let mut h = x;
    for (w, b, act) in layers {
        let w = tape.param(&model.store, w);
        let b = tape.param(&model.store, b);
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        h = if act { tape.gelu(z) } else { z };
    }
    Ok(h)
}

/// Preference probabilities `ŷ` from head logits.
pub fn predict_scores(tape: &mut Tape, logits: Var) -> Var {
    tape.sigmoid(logits)
}
