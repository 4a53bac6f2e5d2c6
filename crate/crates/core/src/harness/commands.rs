//! The commands behind the `lcr-ser` binary.
//!
//! Every command writes into `cfg.out`, echoes the resolved configuration
//! there as `config.txt` and refuses to replace existing outputs unless
//! `force` is set.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use crate::data::{generate_synthetic, load_log, write_log, Instance};
use crate::error::{Error, Result};
use crate::eval::{paired_t_test, render_table, table_records, EvalReport, Metrics, NegativeCache, PairedTTest};
use crate::model::Model;

use super::checkpoint::{Checkpoint, Stage};
use super::config::RunConfig;
use super::experiment::{
    fine_tune, filter_curve, prepare_dataset, prepare_synthetic, pretrain, run_ablation, EvalSet, FilterPoint, PreparedData,
    SeedRun, Variant,
};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "interactions.log";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const RL_FILE: &str = "rl.ckpt";

/// Output directory of one command.
pub struct RunDir {
    root: PathBuf,
    force: bool,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out)?;
        let dir = Self {
            root: cfg.out.clone(),
            force: cfg.force,
        };
        fs::write(dir.path(CONFIG_FILE), cfg.to_text())?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// `name` inside the run directory, checked against accidental overwrite.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        writable(&p, self.force)?;
        Ok(p)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.output(name)?;
        fs::write(&p, contents)?;
        Ok(p)
    }
}

fn writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Line-delimited JSON writer.
pub struct Records {
    file: fs::File,
}

impl Records {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            file: fs::File::create(path)?,
        })
    }

    pub fn push<T: Serialize>(&mut self, rec: &T) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Validation(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

/// The configured dataset: the log at `cfg.data` if set, synthetic otherwise.
pub fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    match &cfg.data {
        Some(path) => prepare_dataset(load_log(path)?, cfg),
        None => prepare_synthetic(cfg),
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs checkpoint=<path>".into()))?;
    Checkpoint::load(path)
}

fn check_catalog(model: &Model, data: &PreparedData) -> Result<()> {
    if model.config.catalog != data.dataset.catalog {
        return Err(Error::Validation(format!(
            "checkpoint catalog {:?} does not match the data catalog {:?}",
            model.config.catalog, data.dataset.catalog
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub log: PathBuf,
    pub users: usize,
    pub search_events: usize,
    pub rec_events: usize,
    pub relevant_fraction: f64,
}

/// Generates a synthetic log at `cfg.data`, or `<out>/interactions.log`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthOutput> {
    let dir = RunDir::create(cfg)?;
    let log = match &cfg.data {
        Some(p) => p.clone(),
        None => dir.path(LOG_FILE),
    };
    writable(&log, cfg.force)?;
    let synth = generate_synthetic(&cfg.synth_config())?;
    write_log(&log, &synth.dataset)?;
    let h = &synth.dataset.histories;
    let out = SynthOutput {
        log,
        users: h.len(),
        search_events: h.iter().map(|u| u.search.len()).sum(),
        rec_events: h.iter().map(|u| u.rec.len()).sum(),
        relevant_fraction: synth.relevant_fraction(),
    };
    dir.write(
        "synth.json",
        &json!({
            "log": out.log.display().to_string(),
            "users": out.users,
            "search_events": out.search_events,
            "rec_events": out.rec_events,
            "relevant_fraction": out.relevant_fraction,
        })
        .to_string(),
    )?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub model: Model,
    pub valid: EvalReport,
}

/// Pre-trains the configured model (or continues from `cfg.checkpoint`).
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let dir = RunDir::create(cfg)?;
    let ckpt_path = dir.output(PRETRAINED_FILE)?;
    let data = load_data(cfg)?;
    let mut model = match &cfg.checkpoint {
        Some(p) => {
            let m = Checkpoint::load(p)?.model;
            check_catalog(&m, &data)?;
            m
        }
        None => Model::new(cfg.model_config_for(data.dataset.catalog), cfg.seed)?,
    };
    let cache = NegativeCache::new();
    let valid = EvalSet {
        instances: &data.splits.valid,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items: data.num_items(),
    };
    let mut records = Records::create(&dir.output("train_metrics.jsonl")?)?;
    let mut failure = None;
    let mut sink = |_: &str, v: serde_json::Value| {
        if let Err(e) = records.push(&v) {
            failure.get_or_insert(e);
        }
    };
    pretrain(
        &mut model,
        &data.splits.train,
        &cfg.train_hyperparams(),
        cfg.epochs,
        cfg.patience,
        Some(&valid),
        &mut sink,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let report = valid.run(&model)?;
    let checkpoint = Checkpoint::new(Stage::Pretrained, model);
    checkpoint.save(&ckpt_path)?;
    Ok(TrainOutput {
        checkpoint: ckpt_path,
        model: checkpoint.model,
        valid: report,
    })
}

#[derive(Debug, Clone)]
pub struct RlOutput {
    pub checkpoint: PathBuf,
    pub model: Model,
    pub before: Metrics,
    pub after: Metrics,
}

/// GRPO fine-tuning of the checkpoint at `cfg.checkpoint`.
pub fn cmd_rl(cfg: &RunConfig) -> Result<RlOutput> {
    let dir = RunDir::create(cfg)?;
    let ckpt_path = dir.output(RL_FILE)?;
    let input = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    check_catalog(&input.model, &data)?;
    let cache = NegativeCache::new();
    let valid = EvalSet {
        instances: &data.splits.valid,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items: data.num_items(),
    };
    let before = valid.run(&input.model)?.mean;
    let mut model = input.model;
    let mut records = Records::create(&dir.output("rl_metrics.jsonl")?)?;
    let mut failure = None;
    let mut sink = |_: &str, v: serde_json::Value| {
        if let Err(e) = records.push(&v) {
            failure.get_or_insert(e);
        }
    };
    let summary = fine_tune(&mut model, cfg, &data, &mut sink)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let after = valid.run(&model)?.mean;
    let stage = if summary.rounds.is_empty() { input.stage } else { Stage::Rl };
    let checkpoint = Checkpoint::new(stage, model);
    checkpoint.save(&ckpt_path)?;
    dir.write(
        "rl_summary.json",
        &json!({
            "rounds": summary.rounds.len(),
            "best_round": summary.best_round,
            "best_selection_hr1": summary.best_selection_hr1,
            "max_mean_kl": summary.max_mean_kl,
            "stopped_by_kl_cap": summary.stopped_by_kl_cap,
            "valid_before": before,
            "valid_after": after,
        })
        .to_string(),
    )?;
    Ok(RlOutput {
        checkpoint: ckpt_path,
        model: checkpoint.model,
        before,
        after,
    })
}

/// Evaluates `cfg.checkpoint` on `cfg.eval_split`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = RunDir::create(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    check_catalog(&ckpt.model, &data)?;
    let instances: &[Instance] = match cfg.eval_split.as_str() {
        "valid" => &data.splits.valid,
        "test" => &data.splits.test,
        other => return Err(Error::Config(format!("eval_split must be valid or test, got {other:?}"))),
    };
    let cache = NegativeCache::new();
    let set = EvalSet {
        instances,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items: data.num_items(),
    };
    let report = set.run(&ckpt.model)?;
    let rows = vec![(format!("{}:{}", ckpt.stage.name(), cfg.eval_split), report.mean)];
    dir.write("eval.txt", &render_table(&rows))?;
    dir.write("eval.jsonl", &table_records(&rows)?)?;
    Ok(report)
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-variant metric summary over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub header: String,
    pub seeds: usize,
    pub mean: Metrics,
    pub std: Metrics,
}

/// One consecutive-variant comparison on per-instance test NDCG@5, pooled
/// over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub treatment: String,
    pub control: String,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub seeds_improved: usize,
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub runs: Vec<SeedRun>,
    pub summary: Vec<VariantSummary>,
    pub comparisons: Vec<Comparison>,
    pub table: String,
}

fn metrics_from(values: [f64; 5]) -> Metrics {
    Metrics {
        hr1: values[0],
        hr5: values[1],
        hr10: values[2],
        ndcg5: values[3],
        ndcg10: values[4],
    }
}

pub fn summarize(cfg: &RunConfig, runs: &[SeedRun], variants: &[Variant]) -> Vec<VariantSummary> {
    variants
        .iter()
        .map(|&v| {
            let per_seed: Vec<[f64; 5]> = runs
                .iter()
                .filter_map(|r| r.result(v))
                .map(|r| r.test.mean.values())
                .collect();
            let mut mean = [0.0; 5];
            let mut std = [0.0; 5];
            for j in 0..5 {
                let col: Vec<f64> = per_seed.iter().map(|m| m[j]).collect();
                (mean[j], std[j]) = mean_std(&col);
            }
            VariantSummary {
                variant: v.label().to_string(),
                header: v.header(cfg),
                seeds: per_seed.len(),
                mean: metrics_from(mean),
                std: metrics_from(std),
            }
        })
        .collect()
}

/// Paired test of `treatment` against `control` on test NDCG@5.
pub fn compare(runs: &[SeedRun], treatment: Variant, control: Variant) -> Result<(PairedTTest, usize)> {
    let (mut a, mut b, mut improved) = (Vec::new(), Vec::new(), 0);
    for r in runs {
        let (Some(t), Some(c)) = (r.result(treatment), r.result(control)) else {
            continue;
        };
        a.extend(t.test.per_instance.iter().map(|m| m.ndcg5));
        b.extend(c.test.per_instance.iter().map(|m| m.ndcg5));
        if t.test.mean.ndcg5 >= c.test.mean.ndcg5 {
            improved += 1;
        }
    }
    Ok((paired_t_test(&a, &b)?, improved))
}

pub fn render_summary(summary: &[VariantSummary]) -> String {
    let width = summary.iter().map(|s| s.header.len()).max().unwrap_or(7).max(7);
    let mut out = format!("{:<width$}", "variant");
    for n in Metrics::NAMES {
        out.push_str(&format!(" {n:>17}"));
    }
    out.push('\n');
    for s in summary {
        out.push_str(&format!("{:<width$}", s.header));
        for (m, d) in s.mean.values().iter().zip(s.std.values()) {
            out.push_str(&format!(" {:>17}", format!("{m:.4}±{d:.4}")));
        }
        out.push('\n');
    }
    out
}

/// Trains every variant on `cfg.ablate_seeds` seeds and tabulates them.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutput> {
    let dir = RunDir::create(cfg)?;
    let mut records = Records::create(&dir.output("ablation_progress.jsonl")?)?;
    let mut failure = None;
    let mut sink = |kind: &str, v: serde_json::Value| {
        if let Err(e) = records.push(&json!({"kind": kind, "record": v})) {
            failure.get_or_insert(e);
        }
    };
    let variants = Variant::ALL;
    let runs = run_ablation(cfg, &variants, &mut sink)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let summary = summarize(cfg, &runs, &variants);
    let mut comparisons = Vec::new();
    for pair in variants.windows(2) {
        let (t, improved) = compare(&runs, pair[1], pair[0])?;
        comparisons.push(Comparison {
            treatment: pair[1].label().into(),
            control: pair[0].label().into(),
            mean_diff: t.mean_diff,
            t: t.t,
            p_value: t.p_value,
            seeds_improved: improved,
        });
    }
    let mut table = render_summary(&summary);
    table.push('\n');
    for c in &comparisons {
        table.push_str(&format!(
            "{} vs {}: ΔNDCG@5 {:+.4}, t {:.3}, p {:.4}, better in {}/{} seeds\n",
            c.treatment,
            c.control,
            c.mean_diff,
            c.t,
            c.p_value,
            c.seeds_improved,
            runs.len()
        ));
    }
    dir.write("ablation.txt", &table)?;
    let mut out = Records::create(&dir.output("ablation.jsonl")?)?;
    for s in &summary {
        out.push(s)?;
    }
    for c in &comparisons {
        out.push(c)?;
    }
    let mut traces = Records::create(&dir.output("distance_trace.jsonl")?)?;
    for r in &runs {
        for s in r.trace.iter().flatten() {
            traces.push(&json!({"seed": r.seed, "step": s.step, "search": s.search, "rec": s.rec}))?;
        }
    }
    Ok(AblationOutput {
        runs,
        summary,
        comparisons,
        table,
    })
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub points: Vec<FilterPoint>,
    pub table: String,
}

pub fn render_filter(points: &[FilterPoint]) -> String {
    let mut out = format!("{:>9} {:>9} {:>7} {:>7}\n", "threshold", "retention", "hr@10", "ndcg@5");
    for p in points {
        out.push_str(&format!(
            "{:>9.2} {:>9.4} {:>7.4} {:>7.4}\n",
            p.threshold,
            p.stats.retention(),
            p.test.mean.hr10,
            p.test.mean.ndcg5
        ));
    }
    out
}

/// Filters search histories with the embeddings of `cfg.checkpoint` at
/// every `cfg.filter_thresholds` value and retrains `cfg.filter_variant`.
pub fn cmd_filter_analyze(cfg: &RunConfig) -> Result<FilterOutput> {
    let dir = RunDir::create(cfg)?;
    let ckpt = load_checkpoint(cfg)?;
    let data = load_data(cfg)?;
    check_catalog(&ckpt.model, &data)?;
    let mut records = Records::create(&dir.output("filter_progress.jsonl")?)?;
    let mut failure = None;
    let mut sink = |kind: &str, v: serde_json::Value| {
        if let Err(e) = records.push(&json!({"kind": kind, "record": v})) {
            failure.get_or_insert(e);
        }
    };
    let points = filter_curve(cfg, &data, &ckpt.model, &cfg.filter_thresholds, &mut sink)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let table = render_filter(&points);
    dir.write("filter.txt", &table)?;
    let mut out = Records::create(&dir.output("filter.jsonl")?)?;
    for p in &points {
        out.push(&json!({
            "threshold": p.threshold,
            "search_events": p.stats.search_events,
            "retained": p.stats.retained,
            "retention": p.stats.retention(),
            "test": p.test.mean,
        }))?;
    }
    Ok(FilterOutput { points, table })
}
