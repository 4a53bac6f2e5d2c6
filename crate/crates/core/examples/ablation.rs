//! Incremental module ablation (Base, +LCR, +TRA, +L_TCL, +RL) on
//! synthetic data, averaged over seeds.
//!
//! ```text
//! cargo run --release --example ablation -- ablate_seeds=2 epochs=5
//! ```
//!
//! Arguments are `key=value` config overrides. The defaults here are a
//! quick smoke configuration; `configs/synthetic.conf` holds the full one.

use lcr_ser::harness::{compare, render_summary, run_ablation, summarize, RunConfig, Variant};

fn main() -> lcr_ser::Result<()> {
    let mut cfg = RunConfig {
        users: 500,
        items: 200,
        topics: 20,
        words: 201,
        d: 16,
        epochs: 5,
        lr: 0.005,
        init_std: 0.3,
        train_negatives: 4,
        rl_rounds: 20,
        rl_selection_users: 100,
        ablate_seeds: 2,
        ..RunConfig::default()
    };
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    cfg.validate()?;

    let mut progress = |kind: &str, v: serde_json::Value| {
        if kind == "variant" {
            eprintln!("seed {} {:<7} test NDCG@5 {:.4}", v["seed"], v["variant"].as_str().unwrap_or("?"), v["test"]["ndcg5"]);
        }
    };
    let runs = run_ablation(&cfg, &Variant::ALL, &mut progress)?;
    print!("{}", render_summary(&summarize(&cfg, &runs, &Variant::ALL)));
    for pair in Variant::ALL.windows(2) {
        let (t, better) = compare(&runs, pair[1], pair[0])?;
        println!(
            "{:>7} vs {:<7} ΔNDCG@5 {:+.4}  p {:.3}  better in {}/{} seeds",
            pair[1].label(),
            pair[0].label(),
            t.mean_diff,
            t.p_value,
            better,
            runs.len()
        );
    }
    for r in &runs {
        if let Some(trace) = &r.trace {
            let d: Vec<String> = trace.iter().map(|s| format!("{:.3}", s.mean())).collect();
            println!("seed {} distance to target by step: {}", r.seed, d.join(" "));
        }
    }
    Ok(())
}
