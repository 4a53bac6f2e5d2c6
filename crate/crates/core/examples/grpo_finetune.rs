//! GRPO fine-tuning of a briefly pre-trained model: sampled reasoning
//! trajectories, group-relative advantages and a KL penalty to the
//! pre-trained reference.
//!
//! ```text
//! cargo run --release --example grpo_finetune -- rl_rounds=30
//! ```
//!
//! Arguments are `key=value` config overrides.

use lcr_ser::eval::NegativeCache;
use lcr_ser::harness::{discard, fine_tune, prepare_synthetic, pretrain, EvalSet, RunConfig};
use lcr_ser::model::Model;

fn main() -> lcr_ser::Result<()> {
    let mut cfg = RunConfig {
        users: 400,
        items: 200,
        topics: 20,
        words: 201,
        d: 16,
        epochs: 4,
        lr: 0.005,
        init_std: 0.3,
        train_negatives: 4,
        rl_rounds: 30,
        rl_eval_every: 5,
        rl_selection_users: 100,
        ..RunConfig::default()
    };
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    cfg.validate()?;

    let data = prepare_synthetic(&cfg)?;
    let mut model = Model::new(cfg.model_config_for(data.dataset.catalog), cfg.seed)?;
    pretrain(&mut model, &data.splits.train, &cfg.train_hyperparams(), cfg.epochs, 0, None, &mut discard())?;

    let cache = NegativeCache::new();
    let valid = EvalSet {
        instances: &data.splits.valid,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items: data.num_items(),
    };
    let before = valid.run(&model)?.mean;

    let mut log = |kind: &str, v: serde_json::Value| {
        if kind == "rl_round" {
            println!(
                "round {:>3}: reward {:.3}  KL {:.2e}  ratio [{:.3}, {:.3}]{}",
                v["round"],
                v["mean_reward"].as_f64().unwrap_or(f64::NAN),
                v["mean_kl"].as_f64().unwrap_or(f64::NAN),
                v["min_ratio"].as_f64().unwrap_or(f64::NAN),
                v["max_ratio"].as_f64().unwrap_or(f64::NAN),
                v["selection_hr1"].as_f64().map(|h| format!("  selection HR@1 {h:.3}")).unwrap_or_default()
            );
        }
    };
    let summary = fine_tune(&mut model, &cfg, &data, &mut log)?;
    let after = valid.run(&model)?.mean;
    println!(
        "kept round {} (max mean KL {:.2e}); valid HR@1 {:.4} -> {:.4}",
        summary.best_round, summary.max_mean_kl, before.hr1, after.hr1
    );
    Ok(())
}
