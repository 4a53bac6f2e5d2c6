//! Latent cross reasoning over the encoded search and recommendation
//! histories.
//!
//! Each step appends a step-position-augmented copy of the previous hidden
//! state to its side's attention context, refines it with that side's
//! self-attention and, when cross reasoning is on, pulls in the other side's
//! context through a dedicated cross-attention before the side's FFN.

use crate::encoder::{maybe_norm, EncodedHistories};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{attend, feed_forward_on, AttentionParams, Mask, Tape, Tensor2, Var};

/// Additive perturbation of the initial reasoning states.
#[derive(Debug, Clone, Copy)]
pub struct InitialOffset<'a> {
    pub search: &'a [f64],
    pub rec: &'a [f64],
}

#[derive(Debug, Clone)]
struct Side {
    h: Var,
    context: Var,
    valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ReasoningState {
    /// Number of completed steps.
    pub step: usize,
    search: Side,
    rec: Side,
}

impl ReasoningState {
    pub fn search(&self) -> Var {
        self.search.h
    }

    pub fn rec(&self) -> Var {
        self.rec.h
    }

    pub fn context_len(&self) -> (usize, usize) {
        (self.search.valid.len(), self.rec.valid.len())
    }
}

#[derive(Debug, Clone)]
pub struct ReasoningOutput {
    /// `H^(K)`: encoder outputs followed by the K reasoning states.
    pub hk_search: Var,
    pub hk_rec: Var,
    pub valid_search: Vec<bool>,
    pub valid_rec: Vec<bool>,
    /// `(h_s^(k), h_r^(k))` for k = 0..=K.
    pub states: Vec<(Var, Var)>,
}

impl ReasoningOutput {
    pub fn last(&self) -> (Var, Var) {
        *self.states.last().expect("state zero is always present")
    }
}

fn last_valid_row(tape: &mut Tape, model: &Model, h: Var, valid: &[bool]) -> Result<Var> {
    match valid.iter().rposition(|&v| v) {
        Some(i) => tape.slice_rows(h, i, i + 1),
        None => Ok(model.zeros_row(tape)),
    }
}

fn offset_row(tape: &mut Tape, h: Var, offset: &[f64]) -> Result<Var> {
    let d = tape.shape(h).1;
    if offset.len() != d {
        return Err(Error::shape("reasoning offset", format!("{} values for width {d}", offset.len())));
    }
    let c = tape.constant(Tensor2::row_vector(offset.to_vec()));
    tape.add(h, c)
}

/// `h^(0)` is the last valid encoder row of each side (zero if the side is
/// empty); contexts start as the position-augmented inputs.
pub fn init_state(tape: &mut Tape, model: &Model, enc: &EncodedHistories, offset: Option<InitialOffset<'_>>) -> Result<ReasoningState> {
    let mut hs = last_valid_row(tape, model, enc.hidden_search, &enc.valid_search)?;
    let mut hr = last_valid_row(tape, model, enc.hidden_rec, &enc.valid_rec)?;
    if let Some(o) = offset {
        hs = offset_row(tape, hs, o.search)?;
        hr = offset_row(tape, hr, o.rec)?;
    }
    Ok(ReasoningState {
        step: 0,
        search: Side {
            h: hs,
            context: enc.inputs_search,
            valid: enc.valid_search.clone(),
        },
        rec: Side {
            h: hr,
            context: enc.inputs_rec,
            valid: enc.valid_rec.clone(),
        },
    })
}

fn key_mask(valid: &[bool]) -> Option<Mask> {
    if valid.iter().all(|&v| v) {
        None
    } else {
        Some(Mask::keys(1, valid))
    }
}

fn self_refine(tape: &mut Tape, model: &Model, side: &Side, query: Var, attn: &AttentionParams) -> Result<Var> {
    let vars = attn.vars(tape, &model.store);
    let q = maybe_norm(tape, model, query);
    let kv = maybe_norm(tape, model, side.context);
    let a = attend(tape, q, kv, kv, key_mask(&side.valid).as_ref(), &vars)?;
    tape.add(a, query)
}

fn cross_refine(tape: &mut Tape, model: &Model, f: Var, other: &Side, attn: &AttentionParams) -> Result<Var> {
    let vars = attn.vars(tape, &model.store);
    let q = maybe_norm(tape, model, f);
    let kv = maybe_norm(tape, model, other.context);
    let a = attend(tape, q, kv, kv, key_mask(&other.valid).as_ref(), &vars)?;
    tape.add(a, f)
}

fn extend(tape: &mut Tape, side: &Side, e: Var) -> Result<Side> {
    let mut valid = side.valid.clone();
    valid.push(true);
    Ok(Side {
        h: side.h,
        context: tape.concat_rows(&[side.context, e])?,
        valid,
    })
}

/// One reasoning step `k = state.step + 1`.
pub fn reason_step(tape: &mut Tape, model: &Model, state: &ReasoningState, use_cross: bool) -> Result<ReasoningState> {
    let k = state.step;
    let p = &model.params;
    if k >= model.store.value(p.step_search).rows() {
        return Err(Error::State(format!(
            "reasoning step {} exceeds the configured {} steps",
            k + 1,
            model.config.steps
        )));
    }
    let ps = tape.gather(&model.store, p.step_search, &[k])?;
    let pr = tape.gather(&model.store, p.step_rec, &[k])?;
    let es = tape.add(state.search.h, ps)?;
    let er = tape.add(state.rec.h, pr)?;
    let search = extend(tape, &state.search, es)?;
    let rec = extend(tape, &state.rec, er)?;

    let (bs, br) = p.reasoning_blocks();
    let fs = self_refine(tape, model, &search, es, &bs.attn)?;
    let fr = self_refine(tape, model, &rec, er, &br.attn)?;
    let (gs, gr) = if use_cross {
        (
            cross_refine(tape, model, fs, &rec, &p.cross_search)?,
            cross_refine(tape, model, fr, &search, &p.cross_rec)?,
        )
    } else {
        (fs, fr)
    };
    let ffn_s = bs.ffn.vars(tape, &model.store);
    let ffn_r = br.ffn.vars(tape, &model.store);
    let gs = maybe_norm(tape, model, gs);
    let gr = maybe_norm(tape, model, gr);
    let hs = feed_forward_on(tape, gs, &ffn_s)?;
    let hr = feed_forward_on(tape, gr, &ffn_r)?;
    Ok(ReasoningState {
        step: k + 1,
        search: Side { h: hs, ..search },
        rec: Side { h: hr, ..rec },
    })
}

/// Runs `steps` reasoning steps and assembles `H^(K)` for both sides.
pub fn run_reasoning(
    tape: &mut Tape,
    model: &Model,
    enc: &EncodedHistories,
    steps: usize,
    use_cross: bool,
    offset: Option<InitialOffset<'_>>,
) -> Result<ReasoningOutput> {
    let mut state = init_state(tape, model, enc, offset)?;
    let mut states = vec![(state.search.h, state.rec.h)];
    for _ in 0..steps {
        state = reason_step(tape, model, &state, use_cross)?;
        states.push((state.search.h, state.rec.h));
    }
    let assemble = |tape: &mut Tape, hidden: Var, valid: &[bool], pick: fn(&(Var, Var)) -> Var| -> Result<(Var, Vec<bool>)> {
        let mut parts = vec![hidden];
        parts.extend(states[1..].iter().map(pick));
        let mut v = valid.to_vec();
        v.resize(valid.len() + steps, true);
        Ok((tape.concat_rows(&parts)?, v))
    };
    let (hk_search, valid_search) = assemble(tape, enc.hidden_search, &enc.valid_search, |s| s.0)?;
    let (hk_rec, valid_rec) = assemble(tape, enc.hidden_rec, &enc.valid_rec, |s| s.1)?;
    Ok(ReasoningOutput {
        hk_search,
        hk_rec,
        valid_search,
        valid_rec,
        states,
    })
}
