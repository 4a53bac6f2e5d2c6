//! Ranking metrics under the sampled-negative protocol.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{sample_negatives, Instance, ItemId, UserId};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::Distance;

/// Candidates sorted by descending score, ties by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub items: Vec<(ItemId, f64)>,
    pub target: ItemId,
    /// 1-based.
    pub target_rank: usize,
}

impl RankedList {
    pub fn from_scores(candidates: &[ItemId], scores: &[f64], target: ItemId) -> Result<Self> {
        if candidates.len() != scores.len() {
            return Err(Error::shape(
                "rank_candidates",
                format!("{} candidates, {} scores", candidates.len(), scores.len()),
            ));
        }
        let hits = candidates.iter().filter(|&&c| c == target).count();
        if hits != 1 {
            return Err(Error::Validation(format!(
                "candidate pool contains the target {hits} times"
            )));
        }
        if let Some(s) = scores.iter().find(|s| s.is_nan()) {
            return Err(Error::Numeric(format!("score {s} cannot be ranked")));
        }
        let mut items: Vec<(ItemId, f64)> = candidates.iter().copied().zip(scores.iter().copied()).collect();
        items.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let target_rank = items.iter().position(|&(i, _)| i == target).expect("target present") + 1;
        Ok(Self {
            items,
            target,
            target_rank,
        })
    }
}

pub fn hr_at_k(list: &RankedList, k: usize) -> f64 {
    if list.target_rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(list: &RankedList, k: usize) -> f64 {
    if list.target_rank <= k {
        1.0 / ((list.target_rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Anything that can score candidate items for an instance.
pub trait Scorer {
    fn score(&self, inst: &Instance, items: &[ItemId]) -> Result<Vec<f64>>;
}

impl Scorer for Model {
    fn score(&self, inst: &Instance, items: &[ItemId]) -> Result<Vec<f64>> {
        self.score_items(inst, items)
    }
}

/// Target first, followed by the negatives.
pub fn candidate_pool(target: ItemId, negatives: &[ItemId]) -> Vec<ItemId> {
    let mut pool = Vec::with_capacity(negatives.len() + 1);
    pool.push(target);
    pool.extend_from_slice(negatives);
    pool
}

pub fn rank_candidates<S: Scorer + ?Sized>(scorer: &S, inst: &Instance, negatives: &[ItemId]) -> Result<RankedList> {
    let pool = candidate_pool(inst.target, negatives);
    let scores = scorer.score(inst, &pool)?;
    RankedList::from_scores(&pool, &scores, inst.target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            negatives: 99,
            seed: 2024,
        }
    }
}

/// Evaluation negatives, drawn once per `(seed, user, target)` and reused by
/// every model evaluated against the same cache.
#[derive(Debug, Default)]
pub struct NegativeCache {
    drawn: RefCell<HashMap<(UserId, ItemId, i64), Vec<ItemId>>>,
}

impl NegativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.drawn.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn negatives(&self, inst: &Instance, protocol: &EvalProtocol, num_items: usize) -> Result<Vec<ItemId>> {
        let key = (inst.user, inst.target, inst.timestamp);
        if let Some(v) = self.drawn.borrow().get(&key) {
            return Ok(v.clone());
        }
        let seed = protocol
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(u64::from(inst.user) << 32 | u64::from(inst.target));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let negs = sample_negatives(inst, protocol.negatives, num_items, &mut rng)?;
        self.drawn.borrow_mut().insert(key, negs.clone());
        Ok(negs)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr1: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["H@1", "H@5", "H@10", "N@5", "N@10"];

    pub fn of(list: &RankedList) -> Self {
        Self {
            hr1: hr_at_k(list, 1),
            hr5: hr_at_k(list, 5),
            hr10: hr_at_k(list, 10),
            ndcg5: ndcg_at_k(list, 5),
            ndcg10: ndcg_at_k(list, 10),
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.hr1, self.hr5, self.hr10, self.ndcg5, self.ndcg10]
    }

    pub fn mean(all: &[Metrics]) -> Self {
        let n = all.len().max(1) as f64;
        let mut s = [0.0; 5];
        for m in all {
            for (a, v) in s.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Self {
            hr1: s[0] / n,
            hr5: s[1] / n,
            hr10: s[2] / n,
            ndcg5: s[3] / n,
            ndcg10: s[4] / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean: Metrics,
    pub per_instance: Vec<Metrics>,
}

pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    instances: &[Instance],
    protocol: &EvalProtocol,
    cache: &NegativeCache,
    num_items: usize,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let per_instance = instances
        .iter()
        .map(|inst| {
            let negs = cache.negatives(inst, protocol, num_items)?;
            Ok(Metrics::of(&rank_candidates(scorer, inst, &negs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        mean: Metrics::mean(&per_instance),
        per_instance,
    })
}

/// Aligned text table with one row per named result.
pub fn render_table(rows: &[(String, Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
    let mut out = format!("{:<width$}", "variant");
    for n in Metrics::NAMES {
        out.push_str(&format!(" {n:>7}"));
    }
    out.push('\n');
    for (name, m) in rows {
        out.push_str(&format!("{name:<width$}"));
        for v in m.values() {
            out.push_str(&format!(" {v:>7.4}"));
        }
        out.push('\n');
    }
    out
}

/// One JSON object per row.
pub fn table_records(rows: &[(String, Metrics)]) -> Result<String> {
    let mut out = String::new();
    for (name, m) in rows {
        let rec = serde_json::json!({
            "variant": name,
            "hr1": m.hr1, "hr5": m.hr5, "hr10": m.hr10,
            "ndcg5": m.ndcg5, "ndcg10": m.ndcg10,
        });
        out.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Validation(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided.
    pub p_value: f64,
}

/// Paired t-test on `treatment − control`.
pub fn paired_t_test(treatment: &[f64], control: &[f64]) -> Result<PairedTTest> {
    if treatment.len() != control.len() || treatment.len() < 2 {
        return Err(Error::Validation(format!(
            "paired t-test needs two equal samples of size >= 2, got {} and {}",
            treatment.len(),
            control.len()
        )));
    }
    let n = treatment.len();
    let diffs: Vec<f64> = treatment.iter().zip(control).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let p_value = if mean == 0.0 { 1.0 } else { 0.0 };
        let t = if mean == 0.0 { 0.0 } else { mean.signum() * f64::INFINITY };
        return Ok(PairedTTest {
            n,
            mean_diff: mean,
            t,
            p_value,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        t,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDistance {
    pub step: usize,
    pub search: f64,
    pub rec: f64,
}

impl StepDistance {
    pub fn mean(&self) -> f64 {
        (self.search + self.rec) / 2.0
    }
}

/// Mean distance between `h^(k)` and the target embedding for k = 0..=K.
pub fn distance_trace(model: &Model, instances: &[Instance], distance: Distance) -> Result<Vec<StepDistance>> {
    if instances.is_empty() {
        return Err(Error::Validation("no instances for the distance trace".into()));
    }
    let k = model.config.steps;
    let mut acc = vec![(0.0, 0.0); k + 1];
    for inst in instances {
        let target = model.item_embedding(inst.target).to_vec();
        for (step, (hs, hr)) in model.reasoning_trace(inst)?.iter().enumerate() {
            acc[step].0 += distance.eval(&target, hs);
            acc[step].1 += distance.eval(&target, hr);
        }
    }
    let n = instances.len() as f64;
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(step, (s, r))| StepDistance {
            step,
            search: s / n,
            rec: r / n,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_item_id() {
        let l = RankedList::from_scores(&[9, 3, 5], &[0.5, 0.5, 0.5], 5).unwrap();
        assert_eq!(l.items.iter().map(|x| x.0).collect::<Vec<_>>(), vec![3, 5, 9]);
        assert_eq!(l.target_rank, 2);
    }

    #[test]
    fn metric_closed_forms() {
        let l = RankedList::from_scores(&[1, 2, 3, 4], &[0.9, 0.8, 0.7, 0.1], 3).unwrap();
        assert_eq!(l.target_rank, 3);
        assert_eq!(hr_at_k(&l, 1), 0.0);
        assert_eq!(hr_at_k(&l, 5), 1.0);
        assert!((ndcg_at_k(&l, 5) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&l, 2), 0.0);
    }

    #[test]
    fn duplicate_or_missing_target_is_rejected() {
        assert!(RankedList::from_scores(&[1, 1], &[0.0, 1.0], 1).is_err());
        assert!(RankedList::from_scores(&[1, 2], &[0.0, 1.0], 3).is_err());
    }

    #[test]
    fn t_test_detects_a_consistent_shift() {
        let a: Vec<f64> = (0..30).map(|i| (i % 7) as f64 * 0.1 + 0.2).collect();
        let b: Vec<f64> = (0..30).map(|i| (i % 7) as f64 * 0.1 + ((i % 3) as f64) * 0.01).collect();
        let t = paired_t_test(&a, &b).unwrap();
        assert!(t.mean_diff > 0.0 && t.p_value < 1e-6);
        let same = paired_t_test(&a, &a).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn t_test_p_value_matches_reference() {
        // diffs 1, 2, 3, 4 → mean 2.5, sd 1.29099, t = 3.87298, df 3 → p ≈ 0.030466
        let t = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[0.0; 4]).unwrap();
        assert!((t.t - 3.872983346207417).abs() < 1e-9);
        assert!((t.p_value - 0.030466).abs() < 1e-5);
    }

    #[test]
    fn table_is_aligned() {
        let rows = vec![("Base".to_string(), Metrics::default()), ("+LCR".to_string(), Metrics::default())];
        let text = render_table(&rows);
        let lens: Vec<_> = text.lines().map(str::len).collect();
        assert!(lens.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(table_records(&rows).unwrap().lines().count(), 2);
    }
}
