//! Supervised pre-training (BCE + contrastive loss) on a small synthetic
//! dataset, followed by a checkpoint round trip.
//!
//! ```text
//! cargo run --release --example pretrain -- epochs=6 d=16
//! ```
//!
//! Arguments are `key=value` config overrides.

use lcr_ser::harness::{discard, pretrain, prepare_synthetic, Checkpoint, EvalSet, RunConfig, Stage};
use lcr_ser::eval::NegativeCache;
use lcr_ser::model::Model;

fn main() -> lcr_ser::Result<()> {
    let mut cfg = RunConfig {
        users: 400,
        items: 200,
        topics: 20,
        words: 201,
        d: 16,
        epochs: 6,
        lr: 0.005,
        init_std: 0.3,
        train_negatives: 4,
        rl_selection_users: 0,
        ..RunConfig::default()
    };
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    cfg.validate()?;

    let data = prepare_synthetic(&cfg)?;
    let cache = NegativeCache::new();
    let valid = EvalSet {
        instances: &data.splits.valid,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items: data.num_items(),
    };
    let mut model = Model::new(cfg.model_config_for(data.dataset.catalog), cfg.seed)?;
    let before = valid.run(&model)?.mean;

    let records = pretrain(
        &mut model,
        &data.splits.train,
        &cfg.train_hyperparams(),
        cfg.epochs,
        0,
        None,
        &mut discard(),
    )?;
    for r in &records {
        let m = &r.metrics;
        println!(
            "epoch {:>2}: l_rec {:.4}  l_tcl {:.4}  l_reg {:.1}  |g| {:.3}",
            m.epoch, m.l_rec, m.l_tcl, m.l_reg, m.grad_norm
        );
    }
    let after = valid.run(&model)?.mean;
    println!("valid NDCG@5 {:.4} -> {:.4}, HR@10 {:.4} -> {:.4}", before.ndcg5, after.ndcg5, before.hr10, after.hr10);

    let bytes = Checkpoint::new(Stage::Pretrained, model).to_bytes()?;
    let restored = Checkpoint::from_bytes(&bytes)?;
    assert_eq!(restored.to_bytes()?, bytes);
    println!("checkpoint: {} bytes, stage {}", bytes.len(), restored.stage.name());
    Ok(())
}
