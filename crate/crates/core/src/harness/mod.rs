//! Run configuration, checkpoints, experiment drivers and the commands
//! behind the `lcr-ser` binary.

mod checkpoint;
mod commands;
mod config;
mod experiment;

pub use checkpoint::{Checkpoint, Stage, FORMAT_VERSION, MAGIC};
pub use commands::{
    cmd_ablate, cmd_eval, cmd_filter_analyze, cmd_rl, cmd_synth, cmd_train, compare, load_data, mean_std, render_filter,
    render_summary, summarize, AblationOutput, Comparison, FilterOutput, Records, RlOutput, RunDir, SynthOutput, TrainOutput,
    VariantSummary, CONFIG_FILE, LOG_FILE, PRETRAINED_FILE, RL_FILE,
};
pub use config::{RunConfig, CONFIG_ENV};
pub use experiment::{
    discard, filter_curve, fine_tune, prepare_dataset, prepare_synthetic, pretrain, run_ablation, run_seed, train_variant,
    EpochRecord, EvalSet, FilterPoint, PreparedData, SeedRun, Sink, Variant, VariantResult,
};
