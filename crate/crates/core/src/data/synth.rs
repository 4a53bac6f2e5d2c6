//! Seeded generator of interleaved search/recommendation logs.
//!
//! Items and query words are partitioned into topics. Each user holds a
//! latent interest vector over topics, non-zero on `interests_per_user`
//! topics. A history is a sequence of sessions; every session has a topic
//! drawn from the user's interests and ends with a recommendation click on
//! an item of that topic. A session may open with a search. That search is
//! about the session topic with probability `search_relevance`; otherwise it
//! is about a noise topic outside the user's interests.

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::Dataset;
use super::schema::{Catalog, ItemId, RecEvent, SearchEvent, UserHistory, WordId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Word vocabulary size including the reserved unknown word.
    pub words: usize,
    /// Dimension of the latent interest space (number of topics).
    pub topics: usize,
    pub interests_per_user: usize,
    /// Probability `p` that a search event is about the session topic.
    pub search_relevance: f64,
    /// Probability that a session opens with a search.
    pub search_rate: f64,
    /// Probability that the session's recommendation click stays on topic;
    /// otherwise it lands on another of the user's interests.
    pub session_coherence: f64,
    pub min_sessions: usize,
    pub max_sessions: usize,
    pub max_query_words: usize,
    pub max_clicks: usize,
    /// Zipf exponent of item popularity inside a topic.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 2000,
            items: 1000,
            words: 401,
            topics: 40,
            interests_per_user: 3,
            search_relevance: 0.3,
            search_rate: 1.0,
            session_coherence: 0.9,
            min_sessions: 6,
            max_sessions: 12,
            max_query_words: 3,
            max_clicks: 2,
            popularity_exponent: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("search_relevance", self.search_relevance)?;
        prob("search_rate", self.search_rate)?;
        prob("session_coherence", self.session_coherence)?;
        let positive = [
            ("users", self.users),
            ("items", self.items),
            ("topics", self.topics),
            ("interests_per_user", self.interests_per_user),
            ("min_sessions", self.min_sessions),
            ("max_query_words", self.max_query_words),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.interests_per_user >= self.topics {
            return Err(Error::Config("interests_per_user must leave at least one noise topic".into()));
        }
        if self.items < self.topics {
            return Err(Error::Config("need at least one item per topic".into()));
        }
        if self.words <= self.topics {
            return Err(Error::Config("need at least one word per topic besides the unknown word".into()));
        }
        if self.min_sessions > self.max_sessions {
            return Err(Error::Config("min_sessions exceeds max_sessions".into()));
        }
        if !(self.popularity_exponent >= 0.0) {
            return Err(Error::Config("popularity_exponent must be non-negative".into()));
        }
        Ok(())
    }

    pub fn catalog(&self) -> Catalog {
        Catalog {
            users: self.users,
            items: self.items,
            words: self.words,
        }
    }

    pub fn item_topic(&self, item: ItemId) -> usize {
        item as usize % self.topics
    }

    pub fn word_topic(&self, word: WordId) -> Option<usize> {
        (word > 0).then(|| (word as usize - 1) % self.topics)
    }
}

/// Generated histories plus the ground truth used to build them.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Per user, the topics with non-zero interest.
    pub interests: Vec<Vec<usize>>,
    /// Per user, the latent interest vector over all topics.
    pub interest_vectors: Vec<Vec<f64>>,
    /// Per user and search event, whether it was drawn on-interest.
    pub relevant: Vec<Vec<bool>>,
    /// Per user and search event, the topic the event was drawn from.
    pub search_topics: Vec<Vec<usize>>,
}

impl SyntheticData {
    pub fn relevant_fraction(&self) -> f64 {
        let (hits, total) = self
            .relevant
            .iter()
            .flatten()
            .fold((0usize, 0usize), |(h, t), &r| (h + r as usize, t + 1));
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

struct Topics {
    items: Vec<Vec<ItemId>>,
    item_weights: Vec<WeightedIndex<f64>>,
    words: Vec<Vec<WordId>>,
}

impl Topics {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        let mut items = vec![Vec::new(); cfg.topics];
        for i in 0..cfg.items {
            items[i % cfg.topics].push(i as ItemId);
        }
        let item_weights = items
            .iter()
            .map(|members| {
                let w: Vec<f64> = (0..members.len())
                    .map(|rank| 1.0 / ((rank + 1) as f64).powf(cfg.popularity_exponent))
                    .collect();
                WeightedIndex::new(w).map_err(|e| Error::Config(e.to_string()))
            })
            .collect::<Result<_>>()?;
        let mut words = vec![Vec::new(); cfg.topics];
        for w in 1..cfg.words {
            words[(w - 1) % cfg.topics].push(w as WordId);
        }
        Ok(Self {
            items,
            item_weights,
            words,
        })
    }

    fn item<R: Rng>(&self, topic: usize, rng: &mut R) -> ItemId {
        self.items[topic][self.item_weights[topic].sample(rng)]
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let topics = Topics::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut histories = Vec::with_capacity(cfg.users);
    let mut interests = Vec::with_capacity(cfg.users);
    let mut interest_vectors = Vec::with_capacity(cfg.users);
    let mut relevant = Vec::with_capacity(cfg.users);
    let mut search_topics = Vec::with_capacity(cfg.users);

    for u in 0..cfg.users {
        let mine: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.topics, cfg.interests_per_user).into_vec();
        let noise: Vec<usize> = (0..cfg.topics).filter(|t| !mine.contains(t)).collect();
        let mut vector = vec![0.0; cfg.topics];
        for &t in &mine {
            vector[t] = 1.0 / mine.len() as f64;
        }

        let mut h = UserHistory::new(u as u32);
        let mut flags = Vec::new();
        let mut drawn_topics = Vec::new();
        let sessions = rng.gen_range(cfg.min_sessions..=cfg.max_sessions);
        let start: i64 = rng.gen_range(0..1000);
        for s in 0..sessions {
            let t0 = start + 10 * s as i64;
            let topic = mine[rng.gen_range(0..mine.len())];
            if rng.gen_bool(cfg.search_rate) {
                let is_relevant = rng.gen_bool(cfg.search_relevance);
                let st = if is_relevant {
                    topic
                } else {
                    noise[rng.gen_range(0..noise.len())]
                };
                let n_words = rng.gen_range(1..=cfg.max_query_words);
                let query = (0..n_words)
                    .map(|_| *topics.words[st].choose(&mut rng).expect("topic has words"))
                    .collect();
                let n_clicks = rng.gen_range(0..=cfg.max_clicks);
                let clicked = (0..n_clicks).map(|_| topics.item(st, &mut rng)).collect();
                h.search.push(SearchEvent {
                    timestamp: t0,
                    query,
                    clicked,
                });
                flags.push(is_relevant);
                drawn_topics.push(st);
            }
            let rec_topic = if rng.gen_bool(cfg.session_coherence) {
                topic
            } else {
                mine[rng.gen_range(0..mine.len())]
            };
            h.rec.push(RecEvent {
                timestamp: t0 + 5,
                item: topics.item(rec_topic, &mut rng),
            });
        }
        histories.push(h);
        interests.push(mine);
        interest_vectors.push(vector);
        relevant.push(flags);
        search_topics.push(drawn_topics);
    }

    Ok(SyntheticData {
        dataset: Dataset {
            catalog: cfg.catalog(),
            histories,
        },
        interests,
        interest_vectors,
        relevant,
        search_topics,
    })
}
