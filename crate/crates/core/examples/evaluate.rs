//! Sampled-negative ranking evaluation: HR@{1,5,10} and NDCG@{5,10} against
//! 99 negatives, plus a paired t-test between two scorers.
//!
//! ```text
//! cargo run --release --example evaluate
//! ```

use std::collections::HashMap;

use lcr_ser::data::{generate_synthetic, leave_one_out_split, Instance, ItemId, SplitOptions, SynthConfig, Window};
use lcr_ser::eval::{evaluate, paired_t_test, render_table, EvalProtocol, NegativeCache, Scorer};

/// Scores items by training-set popularity.
struct Popularity(HashMap<ItemId, f64>);

impl Scorer for Popularity {
    fn score(&self, _: &Instance, items: &[ItemId]) -> lcr_ser::Result<Vec<f64>> {
        Ok(items.iter().map(|i| self.0.get(i).copied().unwrap_or(0.0)).collect())
    }
}

/// Popularity plus a bonus for items sharing a topic with the rec context.
struct TopicAware<'a> {
    pop: &'a Popularity,
    topic_of: fn(ItemId) -> ItemId,
}

impl Scorer for TopicAware<'_> {
    fn score(&self, inst: &Instance, items: &[ItemId]) -> lcr_ser::Result<Vec<f64>> {
        let base = self.pop.score(inst, items)?;
        Ok(items
            .iter()
            .zip(base)
            .map(|(&i, s)| {
                let seen = inst.rec.iter().any(|e| (self.topic_of)(e.item) == (self.topic_of)(i));
                s + if seen { 1e6 } else { 0.0 }
            })
            .collect())
    }
}

fn main() -> lcr_ser::Result<()> {
    let cfg = SynthConfig {
        users: 1000,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&cfg)?;
    let splits = leave_one_out_split(
        &synth.dataset.histories,
        &SplitOptions {
            window: Window {
                max_search: 20,
                max_rec: 20,
            },
            max_train_targets_per_user: None,
        },
    );
    let mut counts = HashMap::new();
    for inst in &splits.train {
        *counts.entry(inst.target).or_insert(0.0) += 1.0;
    }
    let pop = Popularity(counts);
    let topical = TopicAware {
        pop: &pop,
        topic_of: |i| i % 40,
    };

    let protocol = EvalProtocol::default();
    let cache = NegativeCache::new();
    let items = synth.dataset.catalog.items;
    let a = evaluate(&pop, &splits.test, &protocol, &cache, items)?;
    let b = evaluate(&topical, &splits.test, &protocol, &cache, items)?;
    print!(
        "{}",
        render_table(&[("popularity".into(), a.mean), ("topic-aware".into(), b.mean)])
    );

    let ndcg = |r: &lcr_ser::eval::EvalReport| r.per_instance.iter().map(|m| m.ndcg5).collect::<Vec<_>>();
    let t = paired_t_test(&ndcg(&b), &ndcg(&a))?;
    println!("NDCG@5 difference {:+.4} (t = {:.2}, p = {:.2e}, n = {})", t.mean_diff, t.t, t.p_value, t.n);
    Ok(())
}
