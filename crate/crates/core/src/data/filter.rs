//! Similarity-threshold filtering of search histories.
//!
//! Each search event is compared with the mean embedding of the
//! recommendation history by cosine similarity and kept when the similarity
//! exceeds the threshold. A threshold of `1` therefore drops every search
//! event and a threshold of `-1` (or lower) keeps every one of them.

use serde::{Deserialize, Serialize};

use super::schema::{Instance, ItemId, RecEvent, SearchEvent, UserHistory};
use crate::nn::cosine_similarity;

/// Source of item and search-event vectors (usually a trained model).
pub trait EventEmbedding {
    fn item_vector(&self, item: ItemId) -> Vec<f64>;
    fn search_vector(&self, event: &SearchEvent) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub search_events: usize,
    pub retained: usize,
    /// Users or instances with no recommendation history; their center is
    /// the zero vector, so every search event scores similarity 0.
    pub passed_through: usize,
}

impl FilterStats {
    pub fn retention(&self) -> f64 {
        if self.search_events == 0 {
            1.0
        } else {
            self.retained as f64 / self.search_events as f64
        }
    }

    fn merge(&mut self, other: FilterStats) {
        self.search_events += other.search_events;
        self.retained += other.retained;
        self.passed_through += other.passed_through;
    }
}

/// Whether an event with this similarity survives `threshold`.
pub fn keeps(similarity: f64, threshold: f64) -> bool {
    threshold <= -1.0 || similarity > threshold
}

fn mean_item_vector<E: EventEmbedding + ?Sized>(emb: &E, rec: &[RecEvent]) -> Option<Vec<f64>> {
    let first = rec.first()?;
    let mut acc = emb.item_vector(first.item);
    for e in &rec[1..] {
        for (a, v) in acc.iter_mut().zip(emb.item_vector(e.item)) {
            *a += v;
        }
    }
    let n = rec.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some(acc)
}

/// Filters one search stream against one recommendation stream.
pub fn filter_search_events<E: EventEmbedding + ?Sized>(
    emb: &E,
    search: &[SearchEvent],
    rec: &[RecEvent],
    threshold: f64,
) -> (Vec<SearchEvent>, FilterStats) {
    let center = mean_item_vector(emb, rec);
    let kept: Vec<SearchEvent> = search
        .iter()
        .filter(|e| {
            let sim = center.as_ref().map_or(0.0, |c| cosine_similarity(&emb.search_vector(e), c));
            keeps(sim, threshold)
        })
        .cloned()
        .collect();
    let stats = FilterStats {
        search_events: search.len(),
        retained: kept.len(),
        passed_through: usize::from(center.is_none()),
    };
    (kept, stats)
}

/// Filters whole user histories against their full recommendation history.
pub fn cosine_filter_analysis<E: EventEmbedding + ?Sized>(
    histories: &[UserHistory],
    emb: &E,
    threshold: f64,
) -> (Vec<UserHistory>, FilterStats) {
    let mut stats = FilterStats::default();
    let out = histories
        .iter()
        .map(|h| {
            let (search, s) = filter_search_events(emb, &h.search, &h.rec, threshold);
            stats.merge(s);
            UserHistory {
                user: h.user,
                search,
                rec: h.rec.clone(),
            }
        })
        .collect();
    (out, stats)
}

/// Filters each instance against its own recommendation context, so the
/// decision never sees the target or later events.
pub fn filter_instances<E: EventEmbedding + ?Sized>(
    instances: &[Instance],
    emb: &E,
    threshold: f64,
) -> (Vec<Instance>, FilterStats) {
    let mut stats = FilterStats::default();
    let out = instances
        .iter()
        .map(|inst| {
            let (search, s) = filter_search_events(emb, &inst.search, &inst.rec, threshold);
            stats.merge(s);
            Instance {
                search,
                ..inst.clone()
            }
        })
        .collect();
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Items and words map to fixed 2-d vectors.
    struct Fixed;

    impl EventEmbedding for Fixed {
        fn item_vector(&self, item: ItemId) -> Vec<f64> {
            match item {
                0 => vec![1.0, 0.0],
                1 => vec![0.0, 1.0],
                2 => vec![-1.0, 0.0],
                _ => vec![0.0, 0.0],
            }
        }
        fn search_vector(&self, e: &SearchEvent) -> Vec<f64> {
            self.item_vector(e.clicked[0])
        }
    }

    fn history() -> UserHistory {
        let s = |item| SearchEvent {
            timestamp: 0,
            query: vec![1],
            clicked: vec![item],
        };
        UserHistory {
            user: 0,
            search: vec![s(0), s(1), s(2), s(3)],
            rec: vec![RecEvent { timestamp: 1, item: 0 }],
        }
    }

    #[test]
    fn endpoints_drop_all_and_keep_all() {
        let (out, stats) = cosine_filter_analysis(&[history()], &Fixed, 1.0);
        assert!(out[0].search.is_empty());
        assert_eq!(stats.retained, 0);
        let (out, stats) = cosine_filter_analysis(&[history()], &Fixed, -1.0);
        assert_eq!(out[0].search.len(), 4);
        assert_eq!(stats.retention(), 1.0);
    }

    #[test]
    fn interior_threshold_uses_strict_comparison() {
        // similarities: 1, 0, -1, 0 (zero vector)
        let (out, _) = cosine_filter_analysis(&[history()], &Fixed, 0.0);
        assert_eq!(out[0].search.len(), 1);
        let (out, _) = cosine_filter_analysis(&[history()], &Fixed, -0.5);
        assert_eq!(out[0].search.len(), 3);
    }

    #[test]
    fn empty_rec_history_scores_zero_similarity() {
        let mut h = history();
        h.rec.clear();
        let (out, stats) = cosine_filter_analysis(&[h.clone()], &Fixed, 1.0);
        assert!(out[0].search.is_empty());
        assert_eq!(stats.passed_through, 1);
        let (out, _) = cosine_filter_analysis(&[h.clone()], &Fixed, -0.5);
        assert_eq!(out[0].search.len(), 4);
        let (out, _) = cosine_filter_analysis(&[h], &Fixed, 0.0);
        assert!(out[0].search.is_empty());
    }
}
