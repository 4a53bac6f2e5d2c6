//! Pre-training losses and the supervised training epoch.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, Instance, ItemId};
use crate::error::{Error, Result};
use crate::model::{ContextOptions, Model};
use crate::nn::{cosine_similarity, euclidean_distance, Adam, ParamStore, Tape, Tensor2, Var};

/// Probability clamp used by every log-loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Distance {
    Euclidean,
    /// `1 − cos`.
    Cosine,
}

impl Distance {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            _ => Err(Error::Config(format!("unknown distance {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        }
    }

    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => euclidean_distance(a, b),
            Distance::Cosine => 1.0 - cosine_similarity(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyperparams {
    pub lambda_tcl: f64,
    pub lambda_reg: f64,
    pub margin: f64,
    pub distance: Distance,
    pub lr: f64,
    pub batch_size: usize,
    /// Sampled negatives per positive, redrawn every epoch.
    pub negatives: usize,
    pub seed: u64,
    /// Whether the L2 term covers the embedding tables.
    pub reg_embeddings: bool,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            lambda_tcl: 0.1,
            lambda_reg: 1e-6,
            margin: 0.5,
            distance: Distance::Euclidean,
            lr: 1e-3,
            batch_size: 32,
            negatives: 1,
            seed: 0,
            reg_embeddings: true,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tcl >= 0.0) || !(self.lambda_reg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 || self.negatives == 0 {
            return Err(Error::Config("batch_size and negatives must be positive".into()));
        }
        Ok(())
    }

    fn regularised(&self, name: &str) -> bool {
        self.reg_embeddings || !name.starts_with("emb.")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_tcl: f64,
    pub l_reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TclParts {
    pub search: f64,
    pub rec: f64,
    pub total: f64,
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1 − eps]`.
pub fn bce_with_eps(pairs: impl IntoIterator<Item = (f64, f64)>, eps: f64) -> f64 {
    let (sum, n) = pairs.into_iter().fold((0.0, 0usize), |(s, n), (p, y)| {
        let p = p.clamp(eps, 1.0 - eps);
        (s - (y * p.ln() + (1.0 - y) * (1.0 - p).ln()), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn bce_loss(batch: &[(f64, f64)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Validation("empty prediction batch".into()));
    }
    for &(p, y) in batch {
        if !(0.0..=1.0).contains(&p) || (y != 0.0 && y != 1.0) {
            return Err(Error::Validation(format!("invalid prediction pair ({p}, {y})")));
        }
    }
    Ok(bce_with_eps(batch.iter().copied(), PROB_EPS))
}

/// Triplet hinge per side, summed over sides.
pub fn tcl_loss(target: &[f64], hs: &[f64], hr: &[f64], hs_plain: &[f64], hr_plain: &[f64], margin: f64, distance: Distance) -> TclParts {
    let side = |h: &[f64], h_plain: &[f64]| {
        (distance.eval(target, h) - distance.eval(target, h_plain) + margin).max(0.0)
    };
    let search = side(hs, hs_plain);
    let rec = side(hr, hr_plain);
    TclParts {
        search,
        rec,
        total: search + rec,
    }
}

pub fn total_loss(l_rec: f64, l_tcl: f64, store: &ParamStore, hp: &TrainHyperparams) -> LossBreakdown {
    let l_reg = store.sum_squares(|n| hp.regularised(n));
    LossBreakdown {
        l_rec,
        l_tcl,
        l_reg,
        total: l_rec + hp.lambda_tcl * l_tcl + hp.lambda_reg * l_reg,
    }
}

/// Distance between two 1×d rows as a 1×1 node.
pub fn distance_on(tape: &mut Tape, a: Var, b: Var, kind: Distance) -> Result<Var> {
    match kind {
        Distance::Euclidean => {
            let diff = tape.sub(a, b)?;
            let sq = tape.mul(diff, diff)?;
            let s = tape.sum_all(sq);
            tape.sqrt(s)
        }
        Distance::Cosine => {
            let ab = tape.mul(a, b)?;
            let dot = tape.sum_all(ab);
            let aa = tape.mul(a, a)?;
            let bb = tape.mul(b, b)?;
            let na = tape.sum_all(aa);
            let nb = tape.sum_all(bb);
            let prod = tape.mul(na, nb)?;
            if tape.scalar(prod) == 0.0 {
                return Ok(tape.constant(Tensor2::filled(1, 1, 1.0)));
            }
            let norm = tape.sqrt(prod)?;
            let inv = tape.recip(norm)?;
            let cos = tape.mul(dot, inv)?;
            let cos = tape.clamp(cos, -1.0, 1.0);
            let neg = tape.scale(cos, -1.0);
            Ok(tape.add_scalar(neg, 1.0))
        }
    }
}

/// Tape version of [`tcl_loss`]; returns `(search, rec, total)` nodes.
#[allow(clippy::too_many_arguments)]
pub fn tcl_on(
    tape: &mut Tape,
    target: Var,
    hs: Var,
    hr: Var,
    hs_plain: Var,
    hr_plain: Var,
    margin: f64,
    kind: Distance,
) -> Result<(Var, Var, Var)> {
    let mut side = |h: Var, hp: Var| -> Result<Var> {
        let a = distance_on(tape, target, h, kind)?;
        let b = distance_on(tape, target, hp, kind)?;
        let gap = tape.sub(a, b)?;
        let gap = tape.add_scalar(gap, margin);
        Ok(tape.relu(gap))
    };
    let s = side(hs, hs_plain)?;
    let r = side(hr, hr_plain)?;
    let t = tape.add(s, r)?;
    Ok((s, r, t))
}

/// Squared L2 norm of the regularised parameters as a 1×1 node.
pub fn regularization_on(tape: &mut Tape, model: &Model, hp: &TrainHyperparams) -> Result<Var> {
    let mut acc = tape.constant(Tensor2::zeros(1, 1));
    for id in model.store.ids() {
        if hp.regularised(model.store.name(id)) {
            let sq = tape.param_sq_norm(&model.store, id);
            acc = tape.add(acc, sq)?;
        }
    }
    Ok(acc)
}

pub struct InstanceLoss {
    /// `l_rec + λ_TCL·l_tcl` for this instance.
    pub objective: Var,
    pub l_rec: f64,
    pub l_tcl: f64,
}

/// Loss of one positive instance against its sampled negatives.
pub fn instance_loss(tape: &mut Tape, model: &Model, inst: &Instance, negatives: &[ItemId], hp: &TrainHyperparams) -> Result<InstanceLoss> {
    let use_tcl = hp.lambda_tcl > 0.0 && model.config.steps > 0;
    let ctx = model.forward_context(
        tape,
        inst,
        &ContextOptions {
            with_no_cross: use_tcl,
            offset: None,
        },
    )?;
    let mut items = Vec::with_capacity(1 + negatives.len());
    items.push(inst.target);
    items.extend_from_slice(negatives);
    let mut labels = vec![0.0; items.len()];
    labels[0] = inst.label;
    let logits = model.candidate_logits(tape, &ctx, &items)?;
    let probs = tape.sigmoid(logits);
    let rec = tape.bce_mean(probs, &labels, PROB_EPS)?;
    let l_rec = tape.scalar(rec);
    if !use_tcl {
        return Ok(InstanceLoss {
            objective: rec,
            l_rec,
            l_tcl: 0.0,
        });
    }
    let plain = ctx.no_cross.as_ref().expect("requested no-cross branch");
    let (hs, hr) = ctx.reasoning.last();
    let (ps, pr) = plain.last();
    let target = tape.gather(&model.store, model.params.item, &[inst.target as usize])?;
    let (_, _, tcl) = tcl_on(tape, target, hs, hr, ps, pr, hp.margin, hp.distance)?;
    let l_tcl = tape.scalar(tcl);
    let weighted = tape.scale(tcl, hp.lambda_tcl);
    Ok(InstanceLoss {
        objective: tape.add(rec, weighted)?,
        l_rec,
        l_tcl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_tcl: f64,
    pub l_reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub instances: usize,
}

/// Adds `λ_Reg · ∂‖Φ‖²/∂Φ` to the accumulated gradients.
fn add_reg_grad(store: &mut ParamStore, hp: &TrainHyperparams) {
    if hp.lambda_reg == 0.0 {
        return;
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !hp.regularised(store.name(id)) {
            continue;
        }
        let e = store.entry_mut(id);
        for (g, &v) in e.grad.data_mut().iter_mut().zip(e.value.data()) {
            *g += 2.0 * hp.lambda_reg * v;
        }
    }
}

/// One shuffled pass of mini-batch Adam over `data`, one fresh uniform
/// negative per positive.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut Adam,
    data: &[Instance],
    hp: &TrainHyperparams,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::Validation("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let num_items = model.config.catalog.items;
    let (mut sum_rec, mut sum_tcl, mut sum_norm, mut batches) = (0.0, 0.0, 0.0, 0usize);
    for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
        model.store.zero_grads();
        let scale = 1.0 / chunk.len() as f64;
        for &i in chunk {
            let inst = &data[i];
            let negs = sample_negatives(inst, hp.negatives, num_items, rng)?;
            let mut tape = Tape::new();
            let loss = instance_loss(&mut tape, model, inst, &negs, hp)?;
            let value = tape.scalar(loss.objective);
            if !value.is_finite() {
                let users: Vec<_> = chunk.iter().map(|&j| (data[j].user, data[j].target)).collect();
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {b}, instance (user {}, target {}); batch (user, target) = {users:?}",
                    inst.user, inst.target
                )));
            }
            tape.backward_from(loss.objective, Tensor2::filled(1, 1, scale), &mut model.store)?;
            sum_rec += loss.l_rec;
            sum_tcl += loss.l_tcl;
        }
        add_reg_grad(&mut model.store, hp);
        sum_norm += model.store.grad_norm();
        batches += 1;
        opt.step(&mut model.store);
    }
    model.store.zero_grads();
    let n = data.len() as f64;
    let breakdown = total_loss(sum_rec / n, sum_tcl / n, &model.store, hp);
    Ok(EpochMetrics {
        epoch,
        l_rec: breakdown.l_rec,
        l_tcl: breakdown.l_tcl,
        l_reg: breakdown.l_reg,
        total: breakdown.total,
        grad_norm: sum_norm / batches as f64,
        instances: data.len(),
    })
}
