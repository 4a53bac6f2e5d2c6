//! Threshold curve for cosine filtering of search histories: search events
//! whose embedding is not similar enough to the mean recommendation
//! embedding are dropped before retraining.
//!
//! ```text
//! cargo run --release --example filter_analysis -- filter_thresholds=-1,0,0.5,1
//! ```
//!
//! Arguments are `key=value` config overrides.

use lcr_ser::data::{cosine_filter_analysis, generate_synthetic};
use lcr_ser::harness::{discard, filter_curve, prepare_synthetic, render_filter, train_variant, RunConfig, Variant};

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
        rl_selection_users: 0,
        ..RunConfig::default()
    };
    for kv in std::env::args().skip(1) {
        cfg.apply_override(&kv)?;
    }
    cfg.validate()?;

    let data = prepare_synthetic(&cfg)?;
    let embedder = train_variant(Variant::Base, &cfg, &data, None, &mut discard())?;

    // Relevant searches should survive the filter more often than noise.
    let synth = generate_synthetic(&cfg.synth_config())?;
    for &tau in &cfg.filter_thresholds {
        let (filtered, stats) = cosine_filter_analysis(&synth.dataset.histories, &embedder, tau);
        let (mut kept, mut total) = ([0usize; 2], [0usize; 2]);
        for ((orig, f), flags) in synth.dataset.histories.iter().zip(&filtered).zip(&synth.relevant) {
            for (e, &relevant) in orig.search.iter().zip(flags) {
                let i = usize::from(relevant);
                total[i] += 1;
                kept[i] += usize::from(f.search.iter().any(|k| k.timestamp == e.timestamp));
            }
        }
        println!(
            "tau {tau:>5.2}: retains {:.3} overall, {:.3} of relevant, {:.3} of noise",
            stats.retention(),
            kept[1] as f64 / total[1].max(1) as f64,
            kept[0] as f64 / total[0].max(1) as f64
        );
    }

    let points = filter_curve(&cfg, &data, &embedder, &cfg.filter_thresholds, &mut discard())?;
    print!("{}", render_filter(&points));
    Ok(())
}
