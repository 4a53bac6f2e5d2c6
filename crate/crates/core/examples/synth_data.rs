//! Generate a synthetic search + recommendation log, write it in the
//! line-delimited format, read it back and split it leave-one-out.
//!
//! ```text
//! cargo run --release --example synth_data
//! ```

use lcr_ser::data::{generate_synthetic, leave_one_out_split, load_log, write_log, SplitOptions, SynthConfig, Window};

fn main() -> lcr_ser::Result<()> {
    let cfg = SynthConfig {
        users: 300,
        search_relevance: 0.3,
        seed: 7,
        ..SynthConfig::default()
    };
    let synth = generate_synthetic(&cfg)?;
    println!(
        "{} users, relevant search fraction {:.3} (configured {})",
        synth.dataset.histories.len(),
        synth.relevant_fraction(),
        cfg.search_relevance
    );

    let u = &synth.dataset.histories[0];
    println!("user 0 interests {:?}", synth.interests[0]);
    for (e, relevant) in u.search.iter().zip(&synth.relevant[0]).take(3) {
        println!(
            "  t={:>4} search words {:?} clicks {:?} relevant={relevant}",
            e.timestamp, e.query, e.clicked
        );
    }
    for e in u.rec.iter().take(3) {
        println!("  t={:>4} rec item {} (topic {})", e.timestamp, e.item, cfg.item_topic(e.item));
    }

    let dir = std::env::temp_dir().join("lcr-ser-synth-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("interactions.log");
    write_log(&path, &synth.dataset)?;
    let loaded = load_log(&path)?;
    assert_eq!(loaded.histories, synth.dataset.histories);
    println!("round-tripped {} through {}", loaded.histories.len(), path.display());

    let splits = leave_one_out_split(
        &loaded.histories,
        &SplitOptions {
            window: Window {
                max_search: 20,
                max_rec: 20,
            },
            max_train_targets_per_user: None,
        },
    );
    println!(
        "train {} / valid {} / test {} instances, {} users skipped",
        splits.train.len(),
        splits.valid.len(),
        splits.test.len(),
        splits.skipped_users
    );
    Ok(())
}
