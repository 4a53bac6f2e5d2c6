use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lcr_ser::eval::render_table;
use lcr_ser::harness::{
    cmd_ablate, cmd_eval, cmd_filter_analyze, cmd_rl, cmd_synth, cmd_train, RunConfig, CONFIG_ENV,
};

#[derive(Parser)]
#[command(name = "lcr-ser", version, about = "Search-enhanced recommendation with latent cross reasoning")]
struct Cli {
    /// Config file of `key = value` lines (defaults to $LCRSER_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction log.
    Synth,
    /// Supervised pre-training.
    Train,
    /// GRPO fine-tuning of `checkpoint`.
    Rl,
    /// Evaluate `checkpoint` on `eval_split`.
    Eval,
    /// Module ablation over `ablate_seeds` seeds.
    Ablate,
    /// Search-filter threshold curve using the embeddings of `checkpoint`.
    FilterAnalyze,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> lcr_ser::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Synth => {
            let o = cmd_synth(&cfg)?;
            println!(
                "wrote {} ({} users, {} search events, {} rec events, relevant fraction {:.4})",
                o.log.display(),
                o.users,
                o.search_events,
                o.rec_events,
                o.relevant_fraction
            );
        }
        Command::Train => {
            let o = cmd_train(&cfg)?;
            print!("{}", render_table(&[("valid".to_string(), o.valid.mean)]));
            println!("wrote {}", o.checkpoint.display());
        }
        Command::Rl => {
            let o = cmd_rl(&cfg)?;
            print!(
                "{}",
                render_table(&[("before".to_string(), o.before), ("after".to_string(), o.after)])
            );
            println!("wrote {}", o.checkpoint.display());
        }
        Command::Eval => {
            let r = cmd_eval(&cfg)?;
            print!("{}", render_table(&[(cfg.eval_split.clone(), r.mean)]));
        }
        Command::Ablate => print!("{}", cmd_ablate(&cfg)?.table),
        Command::FilterAnalyze => print!("{}", cmd_filter_analyze(&cfg)?.table),
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lcr-ser [{}]: {e}", e.category());
            if matches!(e, lcr_ser::Error::Config(_)) {
                eprintln!("(config file defaults to ${CONFIG_ENV})");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
