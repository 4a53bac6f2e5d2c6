//! Run one instance through the dual encoders and the latent cross
//! reasoning loop, then score a handful of candidates.
//!
//! ```text
//! cargo run --release --example encode_and_reason
//! ```

use lcr_ser::data::{Catalog, Instance, RecEvent, SearchEvent, Window};
use lcr_ser::encoder::encode_histories;
use lcr_ser::model::{Aggregation, Model, ModelConfig};
use lcr_ser::nn::Tape;
use lcr_ser::reasoner::run_reasoning;

fn main() -> lcr_ser::Result<()> {
    let mut cfg = ModelConfig::new(
        Catalog {
            users: 4,
            items: 50,
            words: 20,
        },
        Window {
            max_search: 8,
            max_rec: 8,
        },
        16,
    );
    cfg.steps = 3;
    cfg.aggregation = Aggregation::TargetAware;
    cfg.init_std = 0.3;
    let model = Model::new(cfg, 42)?;

    let inst = Instance {
        user: 1,
        search: vec![
            SearchEvent {
                timestamp: 1,
                query: vec![3, 4],
                clicked: vec![10],
            },
            SearchEvent {
                timestamp: 5,
                query: vec![7],
                clicked: vec![],
            },
        ],
        rec: [2, 4, 6].iter().map(|&t| RecEvent { timestamp: t, item: 10 + t as u32 }).collect(),
        target: 11,
        timestamp: 9,
        label: 1.0,
    };

    let mut tape = Tape::new();
    let enc = encode_histories(&mut tape, &model, &inst.search, &inst.rec, None)?;
    println!("H_s {:?}, H_r {:?}", tape.shape(enc.hidden_search), tape.shape(enc.hidden_rec));
    let out = run_reasoning(&mut tape, &model, &enc, model.config.steps, true, None)?;
    for (k, &(s, r)) in out.states.iter().enumerate() {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "step {k}: |h_s| = {:.4}, |h_r| = {:.4}",
            norm(tape.value(s).data()),
            norm(tape.value(r).data())
        );
    }
    println!(
        "aggregation inputs: search {:?}, rec {:?}",
        tape.shape(out.hk_search),
        tape.shape(out.hk_rec)
    );

    let candidates = [11, 20, 30, 40];
    let scores = model.score_items(&inst, &candidates)?;
    for (c, s) in candidates.iter().zip(scores) {
        println!("item {c:>2}: logit {s:+.5}");
    }
    Ok(())
}
