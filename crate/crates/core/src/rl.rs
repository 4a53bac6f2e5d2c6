//! GRPO fine-tuning of the reasoning path.
//!
//! A rollout runs the reasoning loop N times from perturbed initial states,
//! ranks a small candidate pool with each trajectory and turns the ranking
//! quality into standardized advantages. The policy probability of a
//! trajectory is the softmax over the pool's pre-sigmoid scores evaluated at
//! the target, recomputed under the live parameters with the same noise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{sample_negatives, Instance, ItemId};
use crate::error::{Error, Result};
use crate::eval::{candidate_pool, evaluate, hr_at_k, ndcg_at_k, EvalProtocol, NegativeCache, RankedList};
use crate::model::{ContextOptions, Model};
use crate::nn::{Adam, Tape, Tensor2, Var};
use crate::objectives::PROB_EPS;
use crate::reasoner::InitialOffset;

const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardMetric {
    Hr(usize),
    Ndcg(usize),
}

impl RewardMetric {
    pub fn eval(self, list: &RankedList) -> f64 {
        match self {
            RewardMetric::Hr(k) => hr_at_k(list, k),
            RewardMetric::Ndcg(k) => ndcg_at_k(list, k),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown reward metric {s:?}; expected hr@K or ndcg@K"));
        let (kind, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(bad());
        }
        match kind {
            "hr" => Ok(RewardMetric::Hr(k)),
            "ndcg" => Ok(RewardMetric::Ndcg(k)),
            _ => Err(bad()),
        }
    }

    pub fn name(self) -> String {
        match self {
            RewardMetric::Hr(k) => format!("hr@{k}"),
            RewardMetric::Ndcg(k) => format!("ndcg@{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Trajectories per instance, `N`.
    pub trajectories: usize,
    /// Noise magnitude `γ`.
    pub gamma: f64,
    /// Noise standard deviation `σ`.
    pub sigma: f64,
    pub reward: RewardMetric,
    /// Target plus sampled negatives.
    pub pool_size: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            trajectories: 4,
            gamma: 0.1,
            sigma: 1.0,
            reward: RewardMetric::Hr(1),
            pool_size: 20,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories < 2 {
            return Err(Error::Config("at least two trajectories are needed".into()));
        }
        if !(self.gamma >= 0.0) || !(self.sigma > 0.0) {
            return Err(Error::Config("gamma must be >= 0 and sigma > 0".into()));
        }
        if self.pool_size == 0 {
            return Err(Error::Config("pool_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// 1-based; trajectory 1 is noise-free.
    pub index: usize,
    /// `γ·ε` added to `h_s^(0)` and `h_r^(0)`.
    pub offset_search: Vec<f64>,
    pub offset_rec: Vec<f64>,
    /// `(h_s^(k), h_r^(k))` for k = 0..=K.
    pub states: Vec<(Vec<f64>, Vec<f64>)>,
    /// Pre-sigmoid scores over the pool.
    pub scores: Vec<f64>,
    pub reward: f64,
}

impl Trajectory {
    fn offset(&self) -> Option<InitialOffset<'_>> {
        (self.index > 1).then_some(InitialOffset {
            search: &self.offset_search,
            rec: &self.offset_rec,
        })
    }
}

/// Scores `pool` along one trajectory. Returns pool logits (C×1) and the
/// state trace.
fn trajectory_logits(tape: &mut Tape, model: &Model, inst: &Instance, pool: &[ItemId], offset: Option<InitialOffset<'_>>) -> Result<(Var, Vec<(Var, Var)>)> {
    let ctx = model.forward_context(
        tape,
        inst,
        &ContextOptions {
            with_no_cross: false,
            offset,
        },
    )?;
    let logits = model.candidate_logits(tape, &ctx, pool)?;
    Ok((logits, ctx.reasoning.states.clone()))
}

pub fn trajectory_reward(pool: &[ItemId], scores: &[f64], target: ItemId, metric: RewardMetric) -> Result<f64> {
    Ok(metric.eval(&RankedList::from_scores(pool, scores, target)?))
}

/// Samples `N` trajectories under `model` (normally the π_old snapshot).
pub fn rollout(model: &Model, inst: &Instance, pool: &[ItemId], cfg: &RolloutConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let d = model.d();
    let normal = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(cfg.trajectories);
    for index in 1..=cfg.trajectories {
        let (offset_search, offset_rec) = if index == 1 {
            (vec![0.0; d], vec![0.0; d])
        } else {
            let mut draw = || -> Vec<f64> { (0..d).map(|_| cfg.gamma * normal.sample(rng)).collect() };
            let s = draw();
            (s, draw())
        };
        let mut traj = Trajectory {
            index,
            offset_search,
            offset_rec,
            states: Vec::new(),
            scores: Vec::new(),
            reward: 0.0,
        };
        let mut tape = Tape::new();
        let (logits, states) = trajectory_logits(&mut tape, model, inst, pool, traj.offset())?;
        traj.scores = tape.value(logits).data().to_vec();
        traj.states = states
            .iter()
            .map(|&(s, r)| (tape.value(s).data().to_vec(), tape.value(r).data().to_vec()))
            .collect();
        traj.reward = trajectory_reward(pool, &traj.scores, inst.target, cfg.reward)?;
        out.push(traj);
    }
    Ok(out)
}

/// Standardized rewards with population std; all zero when the std is
/// degenerate.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= STD_FLOOR) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Softmax over pool logits at `target_idx`; a single-item pool gives 1.
pub fn target_prob(logits: &[f64], target_idx: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    (logits[target_idx] - max).exp() / z
}

/// `r − ln r − 1` with `r = p_ref / p_cur`, inputs clamped to `[ε, 1 − ε]`.
pub fn kl_estimate(p_ref: f64, p_cur: f64) -> f64 {
    let r = p_ref.clamp(PROB_EPS, 1.0 - PROB_EPS) / p_cur.clamp(PROB_EPS, 1.0 - PROB_EPS);
    (r - r.ln() - 1.0).max(0.0)
}

/// Frozen copies of the sampling policy and the reference policy.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub old: Model,
    pub reference: Model,
}

impl PolicySnapshot {
    pub fn new(model: &Model) -> Self {
        Self {
            old: model.clone(),
            reference: model.clone(),
        }
    }

    pub fn refresh_old(&mut self, live: &Model) {
        self.old.store.clone_from(&live.store);
    }
}

/// A rolled-out instance with everything the update needs.
#[derive(Debug, Clone)]
pub struct RlSample {
    pub instance: Instance,
    pub pool: Vec<ItemId>,
    pub trajectories: Vec<Trajectory>,
    pub advantages: Vec<f64>,
    pub old_probs: Vec<f64>,
    pub ref_probs: Vec<f64>,
}

impl RlSample {
    pub fn prepare(snapshot: &PolicySnapshot, inst: &Instance, negatives: &[ItemId], cfg: &RolloutConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let pool = candidate_pool(inst.target, negatives);
        let trajectories = rollout(&snapshot.old, inst, &pool, cfg, rng)?;
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let old_probs = trajectories.iter().map(|t| target_prob(&t.scores, 0)).collect();
        let ref_probs = trajectories
            .iter()
            .map(|t| {
                let mut tape = Tape::new();
                let (logits, _) = trajectory_logits(&mut tape, &snapshot.reference, inst, &pool, t.offset())?;
                Ok(target_prob(tape.value(logits).data(), 0))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            instance: inst.clone(),
            pool,
            advantages: advantages(&rewards),
            trajectories,
            old_probs,
            ref_probs,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.trajectories.len() as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GrpoStats {
    pub objective: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub skipped: usize,
}

/// Negative GRPO objective of one sample as a 1×1 node, or `None` when every
/// trajectory had to be skipped.
pub fn grpo_loss_on(
    tape: &mut Tape,
    model: &Model,
    sample: &RlSample,
    lambda_kl: f64,
    clip: Option<f64>,
) -> Result<(Option<Var>, GrpoStats)> {
    let n = sample.trajectories.len() as f64;
    let mut stats = GrpoStats {
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        ..GrpoStats::default()
    };
    let mut terms = Vec::new();
    for (i, t) in sample.trajectories.iter().enumerate() {
        let p_old = sample.old_probs[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
        let p_ref = sample.ref_probs[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
        let (logits, _) = trajectory_logits(tape, model, &sample.instance, &sample.pool, t.offset())?;
        let row = tape.transpose(logits);
        let probs = tape.softmax(row, None)?;
        let p = tape.slice_cols(probs, 0, 1)?;
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let ratio = tape.scale(p, 1.0 / p_old);
        let ratio_value = tape.scalar(ratio);
        if !ratio_value.is_finite() {
            stats.skipped += 1;
            continue;
        }
        let a = sample.advantages[i];
        let mut policy = tape.scale(ratio, a);
        if let Some(c) = clip {
            let clipped = ratio_value.clamp(1.0 - c, 1.0 + c) * a;
            if clipped < ratio_value * a {
                policy = tape.constant(Tensor2::filled(1, 1, clipped));
            }
        }
        // KL = p_ref/p − ln p_ref + ln p − 1
        let inv = tape.recip(p)?;
        let r = tape.scale(inv, p_ref);
        let lnp = tape.ln(p)?;
        let kl = tape.add(r, lnp)?;
        let kl = tape.add_scalar(kl, -p_ref.ln() - 1.0);
        stats.mean_kl += tape.scalar(kl);
        stats.mean_ratio += ratio_value;
        stats.min_ratio = stats.min_ratio.min(ratio_value);
        stats.max_ratio = stats.max_ratio.max(ratio_value);
        let kl_term = tape.scale(kl, lambda_kl);
        terms.push(tape.sub(policy, kl_term)?);
    }
    let kept = sample.trajectories.len() - stats.skipped;
    if kept == 0 {
        return Ok((None, stats));
    }
    stats.mean_kl /= kept as f64;
    stats.mean_ratio /= kept as f64;
    let mut j = terms[0];
    for &t in &terms[1..] {
        j = tape.add(j, t)?;
    }
    let j = tape.scale(j, 1.0 / n);
    stats.objective = tape.scalar(j);
    Ok((Some(tape.scale(j, -1.0)), stats))
}

/// One Adam step on the mean negative objective over `batch`.
pub fn grpo_update(model: &mut Model, opt: &mut Adam, batch: &[RlSample], lambda_kl: f64, clip: Option<f64>) -> Result<GrpoStats> {
    model.store.zero_grads();
    let mut total = GrpoStats {
        min_ratio: f64::INFINITY,
        max_ratio: f64::NEG_INFINITY,
        ..GrpoStats::default()
    };
    let mut used = 0usize;
    let scale = 1.0 / batch.len().max(1) as f64;
    for sample in batch {
        let mut tape = Tape::new();
        let (loss, s) = grpo_loss_on(&mut tape, model, sample, lambda_kl, clip)?;
        total.skipped += s.skipped;
        let Some(loss) = loss else { continue };
        if !tape.scalar(loss).is_finite() {
            total.skipped += sample.trajectories.len();
            continue;
        }
        tape.backward_from(loss, Tensor2::filled(1, 1, scale), &mut model.store)?;
        used += 1;
        total.objective += s.objective;
        total.mean_kl += s.mean_kl;
        total.mean_ratio += s.mean_ratio;
        total.min_ratio = total.min_ratio.min(s.min_ratio);
        total.max_ratio = total.max_ratio.max(s.max_ratio);
    }
    if used > 0 {
        opt.step(&mut model.store);
        total.objective /= used as f64;
        total.mean_kl /= used as f64;
        total.mean_ratio /= used as f64;
    }
    model.store.zero_grads();
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub rollout: RolloutConfig,
    pub lambda_kl: f64,
    pub lr: f64,
    pub rounds: usize,
    /// Instances rolled out per round.
    pub batch_size: usize,
    pub clip: Option<f64>,
    /// Rounds between model-selection evaluations.
    pub eval_every: usize,
    /// Selection evaluations without improvement before stopping.
    pub patience: Option<usize>,
    /// Stop once a round's mean KL to the reference exceeds this.
    pub kl_cap: Option<f64>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            lambda_kl: 0.01,
            lr: 1e-4,
            rounds: 100,
            batch_size: 32,
            clip: None,
            eval_every: 10,
            patience: None,
            kl_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub skipped: usize,
    pub objective: f64,
    pub drift: f64,
    pub selection_hr1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RlSummary {
    pub rounds: Vec<RoundMetrics>,
    pub best_round: usize,
    pub best_selection_hr1: Option<f64>,
    pub max_mean_kl: f64,
    pub stopped_by_kl_cap: bool,
}

/// Model-selection data for RL: held-out instances and their protocol.
pub struct Selection<'a> {
    pub instances: &'a [Instance],
    pub protocol: EvalProtocol,
    pub cache: &'a NegativeCache,
}

/// Runs GRPO rounds on `model` in place. With a selection set, the best
/// parameters seen (round 0 included) are restored at the end.
pub fn run_rl(
    model: &mut Model,
    train: &[Instance],
    cfg: &RlConfig,
    selection: Option<&Selection<'_>>,
    rng: &mut ChaCha8Rng,
    mut on_round: impl FnMut(&RoundMetrics),
) -> Result<RlSummary> {
    cfg.rollout.validate()?;
    if train.is_empty() {
        return Err(Error::Validation("empty RL training set".into()));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("batch_size and eval_every must be positive".into()));
    }
    let num_items = model.config.catalog.items;
    let mut snapshot = PolicySnapshot::new(model);
    let mut opt = Adam::new(&model.store, cfg.lr);
    let select = |m: &Model| -> Result<Option<f64>> {
        match selection {
            Some(s) => Ok(Some(evaluate(m, s.instances, &s.protocol, s.cache, num_items)?.mean.hr1)),
            None => Ok(None),
        }
    };
    let mut best = select(model)?;
    let mut best_store = model.store.clone();
    let mut best_round = 0;
    let mut stale = 0usize;
    let mut rounds = Vec::new();
    let mut stopped_by_kl_cap = false;
    for round in 1..=cfg.rounds {
        snapshot.refresh_old(model);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let inst = &train[rng.gen_range(0..train.len())];
            let negs = sample_negatives(inst, cfg.rollout.pool_size - 1, num_items, rng)?;
            batch.push(RlSample::prepare(&snapshot, inst, &negs, &cfg.rollout, rng)?);
        }
        let stats = grpo_update(model, &mut opt, &batch, cfg.lambda_kl, cfg.clip)?;
        let mut m = RoundMetrics {
            round,
            mean_reward: batch.iter().map(RlSample::mean_reward).sum::<f64>() / batch.len() as f64,
            mean_kl: stats.mean_kl,
            mean_ratio: stats.mean_ratio,
            min_ratio: stats.min_ratio,
            max_ratio: stats.max_ratio,
            skipped: stats.skipped,
            objective: stats.objective,
            drift: model.store.distance(&snapshot.reference.store),
            selection_hr1: None,
        };
        if selection.is_some() && round % cfg.eval_every == 0 {
            let score = select(model)?;
            m.selection_hr1 = score;
            if score > best {
                best = score;
                best_store = model.store.clone();
                best_round = round;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        on_round(&m);
        let over_cap = cfg.kl_cap.is_some_and(|cap| m.mean_kl > cap);
        rounds.push(m);
        if over_cap {
            stopped_by_kl_cap = true;
            break;
        }
        if cfg.patience.is_some_and(|p| stale >= p) {
            break;
        }
    }
    if selection.is_some() {
        model.store = best_store;
    }
    let max_mean_kl = rounds.iter().map(|r| r.mean_kl).fold(0.0, f64::max);
    Ok(RlSummary {
        rounds,
        best_round,
        best_selection_hr1: best,
        max_mean_kl,
        stopped_by_kl_cap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_of_two() {
        assert_eq!(advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(advantages(&[0.3; 4]), vec![0.0; 4]);
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_estimate(0.4, 0.4), 0.0);
        assert!((kl_estimate(0.4, 0.2) - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-12);
        assert!((kl_estimate(0.1, 0.2) - 0.193_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn uniform_scores_give_uniform_probability() {
        assert!((target_prob(&[0.3; 5], 2) - 0.2).abs() < 1e-15);
        assert_eq!(target_prob(&[4.0], 0), 1.0);
        assert!(target_prob(&[30.0, 0.0, 0.0], 0) > 1.0 - 1e-12);
    }

    #[test]
    fn reward_metrics() {
        let pool = [5, 6, 7, 8];
        assert_eq!(trajectory_reward(&pool, &[3.0, 1.0, 0.0, 2.0], 5, RewardMetric::Hr(1)).unwrap(), 1.0);
        assert_eq!(trajectory_reward(&pool, &[1.0, 3.0, 0.0, 2.0], 5, RewardMetric::Hr(1)).unwrap(), 0.0);
        let r = trajectory_reward(&pool, &[1.0, 3.0, 0.0, 2.0], 5, RewardMetric::Ndcg(5)).unwrap();
        assert!((r - 0.5).abs() < 1e-15);
        assert!(trajectory_reward(&[5, 5], &[1.0, 2.0], 5, RewardMetric::Hr(1)).is_err());
    }

    #[test]
    fn reward_metric_parsing() {
        assert_eq!(RewardMetric::parse("ndcg@5").unwrap(), RewardMetric::Ndcg(5));
        assert!(RewardMetric::parse("hr@0").is_err());
        assert!(RewardMetric::parse("mrr").is_err());
    }
}
