//! Training drivers and the seeded experiments built on them: the module
//! ablation, the search-filter curve and the reasoning-distance trace.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    filter_instances, generate_synthetic, leave_one_out_split, Dataset, EventEmbedding, FilterStats, Instance, Splits,
};
use crate::error::{Error, Result};
use crate::eval::{distance_trace, evaluate, EvalProtocol, EvalReport, NegativeCache, StepDistance};
use crate::model::{Aggregation, Model, ModelConfig};
use crate::nn::Adam;
use crate::objectives::{train_epoch, EpochMetrics, TrainHyperparams};
use crate::rl::{run_rl, RlSummary, Selection};

use super::config::RunConfig;

/// Receives progress records as `(kind, payload)`.
pub type Sink<'a> = &'a mut dyn FnMut(&str, serde_json::Value);

pub fn discard() -> impl FnMut(&str, serde_json::Value) {
    |_, _| {}
}

const TRAIN_STREAM: u64 = 0x7261_696e;
const RL_STREAM: u64 = 0x726c_726c;

/// Split data plus the instances held out for RL model selection.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: Dataset,
    pub splits: Splits,
    /// Latest training instance of the first `rl_selection_users` users,
    /// removed from `splits.train`.
    pub selection: Vec<Instance>,
    pub relevant_fraction: Option<f64>,
}

impl PreparedData {
    pub fn num_items(&self) -> usize {
        self.dataset.catalog.items
    }
}

pub fn prepare_dataset(dataset: Dataset, cfg: &RunConfig) -> Result<PreparedData> {
    let mut splits = leave_one_out_split(&dataset.histories, &cfg.split_options());
    if splits.train.is_empty() || splits.test.is_empty() {
        return Err(Error::Validation("dataset yields no training or test instances".into()));
    }
    let mut selection = Vec::new();
    let mut keep = vec![true; splits.train.len()];
    let mut seen = std::collections::HashSet::new();
    for (i, inst) in splits.train.iter().enumerate().rev() {
        if (inst.user as usize) < cfg.rl_selection_users && seen.insert(inst.user) {
            keep[i] = false;
            selection.push(inst.clone());
        }
    }
    selection.reverse();
    let mut it = keep.iter();
    splits.train.retain(|_| *it.next().expect("one flag per instance"));
    Ok(PreparedData {
        dataset,
        splits,
        selection,
        relevant_fraction: None,
    })
}

pub fn prepare_synthetic(cfg: &RunConfig) -> Result<PreparedData> {
    let synth = generate_synthetic(&cfg.synth_config())?;
    let fraction = synth.relevant_fraction();
    let mut p = prepare_dataset(synth.dataset, cfg)?;
    p.relevant_fraction = Some(fraction);
    Ok(p)
}

/// A fixed evaluation set sharing one negative cache.
pub struct EvalSet<'a> {
    pub instances: &'a [Instance],
    pub protocol: EvalProtocol,
    pub cache: &'a NegativeCache,
    pub num_items: usize,
}

impl EvalSet<'_> {
    pub fn run(&self, model: &Model) -> Result<EvalReport> {
        evaluate(model, self.instances, &self.protocol, self.cache, self.num_items)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub metrics: EpochMetrics,
    pub valid_ndcg5: Option<f64>,
}

/// Supervised pre-training for `epochs` epochs. With a validation set and
/// `patience > 0`, stops after `patience` epochs without NDCG@5
/// improvement and restores the best parameters.
pub fn pretrain(
    model: &mut Model,
    train: &[Instance],
    hp: &TrainHyperparams,
    epochs: usize,
    patience: usize,
    valid: Option<&EvalSet<'_>>,
    sink: Sink<'_>,
) -> Result<Vec<EpochRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ TRAIN_STREAM);
    let mut opt = Adam::new(&model.store, hp.lr);
    let mut records = Vec::with_capacity(epochs);
    let mut best: Option<(f64, crate::nn::ParamStore)> = None;
    let mut stale = 0;
    for epoch in 1..=epochs {
        let metrics = train_epoch(model, &mut opt, train, hp, epoch, &mut rng)?;
        let valid_ndcg5 = match (valid, patience) {
            (Some(v), p) if p > 0 => Some(v.run(model)?.mean.ndcg5),
            _ => None,
        };
        let rec = EpochRecord { metrics, valid_ndcg5 };
        sink("epoch", serde_json::to_value(&rec).map_err(|e| Error::Validation(e.to_string()))?);
        records.push(rec);
        if let Some(score) = valid_ndcg5 {
            if best.as_ref().map_or(true, |(b, _)| score > *b) {
                best = Some((score, model.store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok(records)
}

/// Incremental module ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Encoders only, mean pooling over the encoder outputs.
    Base,
    /// Adds latent cross reasoning, still mean pooled.
    Lcr,
    /// Adds target-aware aggregation.
    Tra,
    /// Adds the contrastive loss.
    Tcl,
    /// GRPO fine-tuning of the `Tcl` model.
    Rl,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Base, Variant::Lcr, Variant::Tra, Variant::Tcl, Variant::Rl];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::Lcr => "+LCR",
            Variant::Tra => "+TRA",
            Variant::Tcl => "+L_TCL",
            Variant::Rl => "+RL",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Lcr => "lcr",
            Variant::Tra => "tra",
            Variant::Tcl => "tcl",
            Variant::Rl => "rl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    /// Flags as `(steps, cross, aggregation, tcl)`.
    pub fn flags(self, cfg: &RunConfig) -> (usize, bool, Aggregation, bool) {
        match self {
            Variant::Base => (0, false, Aggregation::Mean, false),
            Variant::Lcr => (cfg.steps, true, Aggregation::Mean, false),
            Variant::Tra => (cfg.steps, true, cfg.aggregation, false),
            Variant::Tcl | Variant::Rl => (cfg.steps, true, cfg.aggregation, true),
        }
    }

    pub fn model_config(self, cfg: &RunConfig, base: ModelConfig) -> ModelConfig {
        let (steps, cross, agg, _) = self.flags(cfg);
        ModelConfig {
            steps,
            use_cross: cross,
            aggregation: agg,
            ..base
        }
    }

    pub fn hyperparams(self, cfg: &RunConfig) -> TrainHyperparams {
        let (_, _, _, tcl) = self.flags(cfg);
        TrainHyperparams {
            lambda_tcl: if tcl { cfg.lambda_tcl } else { 0.0 },
            ..cfg.train_hyperparams()
        }
    }

    pub fn header(self, cfg: &RunConfig) -> String {
        let (steps, cross, agg, tcl) = self.flags(cfg);
        format!(
            "{} [K={steps} cross={cross} agg={} tcl={tcl} rl={}]",
            self.label(),
            agg.name(),
            self == Variant::Rl
        )
    }
}

/// Pre-trains one variant from the shared initial seed.
pub fn train_variant(variant: Variant, cfg: &RunConfig, data: &PreparedData, valid: Option<&EvalSet<'_>>, sink: Sink<'_>) -> Result<Model> {
    let base = cfg.model_config_for(data.dataset.catalog);
    let mut model = Model::new(variant.model_config(cfg, base), cfg.seed)?;
    let hp = variant.hyperparams(cfg);
    pretrain(&mut model, &data.splits.train, &hp, cfg.epochs, cfg.patience, valid, sink)?;
    Ok(model)
}

/// GRPO fine-tuning with model selection on the held-out training slice.
pub fn fine_tune(model: &mut Model, cfg: &RunConfig, data: &PreparedData, sink: Sink<'_>) -> Result<RlSummary> {
    let cache = NegativeCache::new();
    let selection = Selection {
        instances: &data.selection,
        protocol: cfg.eval_protocol(),
        cache: &cache,
    };
    let selection = (!data.selection.is_empty()).then_some(&selection);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RL_STREAM);
    run_rl(model, &data.splits.train, &cfg.rl_config(), selection, &mut rng, |m| {
        sink("rl_round", serde_json::to_value(m).unwrap_or_default())
    })
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub test: EvalReport,
    pub valid: EvalReport,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub results: Vec<VariantResult>,
    pub rl: Option<RlSummary>,
    /// Distance trace of the last pre-trained variant on the test split.
    pub trace: Option<Vec<StepDistance>>,
    /// The last pre-trained (non-RL) model, usable as a filter embedding.
    pub pretrained: Option<Model>,
    pub data: PreparedData,
}

impl SeedRun {
    pub fn result(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

/// Trains and evaluates `variants` on the data generated for `cfg.seed`.
pub fn run_seed(cfg: &RunConfig, variants: &[Variant], sink: Sink<'_>) -> Result<SeedRun> {
    let data = prepare_synthetic(cfg)?;
    let cache = NegativeCache::new();
    let num_items = data.num_items();
    let test = EvalSet {
        instances: &data.splits.test,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items,
    };
    let valid = EvalSet {
        instances: &data.splits.valid,
        protocol: cfg.eval_protocol(),
        cache: &cache,
        num_items,
    };
    let mut results = Vec::new();
    let mut last: Option<Model> = None;
    let mut rl = None;
    let mut trace = None;
    for &v in variants {
        let model = if v == Variant::Rl {
            let mut m = match &last {
                Some(m) if m.config.steps > 0 && m.config.use_cross => m.clone(),
                _ => train_variant(Variant::Tcl, cfg, &data, Some(&valid), sink)?,
            };
            rl = Some(fine_tune(&mut m, cfg, &data, sink)?);
            m
        } else {
            let m = train_variant(v, cfg, &data, Some(&valid), sink)?;
            if m.config.steps > 0 {
                trace = Some(distance_trace(&m, &data.splits.test, cfg.distance)?);
            }
            last = Some(m.clone());
            m
        };
        let r = VariantResult {
            variant: v,
            test: test.run(&model)?,
            valid: valid.run(&model)?,
        };
        sink(
            "variant",
            json!({"seed": cfg.seed, "variant": v.label(), "test": r.test.mean, "valid": r.valid.mean}),
        );
        results.push(r);
    }
    Ok(SeedRun {
        seed: cfg.seed,
        results,
        rl,
        trace,
        pretrained: last,
        data,
    })
}

/// Runs the ablation for seeds `cfg.seed .. cfg.seed + cfg.ablate_seeds`.
pub fn run_ablation(cfg: &RunConfig, variants: &[Variant], sink: Sink<'_>) -> Result<Vec<SeedRun>> {
    (0..cfg.ablate_seeds as u64)
        .map(|i| {
            let c = RunConfig {
                seed: cfg.seed + i,
                ..cfg.clone()
            };
            run_seed(&c, variants, sink)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FilterPoint {
    pub threshold: f64,
    pub stats: FilterStats,
    pub test: EvalReport,
}

/// Retrains `cfg.filter_variant` on search histories filtered at each
/// threshold (every instance against its own recommendation context) and
/// evaluates on the equally filtered test split.
pub fn filter_curve<E: EventEmbedding + ?Sized>(
    cfg: &RunConfig,
    data: &PreparedData,
    embedding: &E,
    thresholds: &[f64],
    sink: Sink<'_>,
) -> Result<Vec<FilterPoint>> {
    let variant = Variant::parse(&cfg.filter_variant)?;
    if variant == Variant::Rl {
        return Err(Error::Config("filter_variant must be a pre-training variant".into()));
    }
    let cache = NegativeCache::new();
    let mut out = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let (train, s1) = filter_instances(&data.splits.train, embedding, tau);
        let (valid, _) = filter_instances(&data.splits.valid, embedding, tau);
        let (test, s3) = filter_instances(&data.splits.test, embedding, tau);
        let filtered = PreparedData {
            splits: Splits {
                train,
                valid,
                test,
                ..Splits::default()
            },
            ..data.clone()
        };
        let valid_set = EvalSet {
            instances: &filtered.splits.valid,
            protocol: cfg.eval_protocol(),
            cache: &cache,
            num_items: data.num_items(),
        };
        let model = train_variant(variant, cfg, &filtered, Some(&valid_set), sink)?;
        let test_set = EvalSet {
            instances: &filtered.splits.test,
            ..valid_set
        };
        let report = test_set.run(&model)?;
        let stats = FilterStats {
            search_events: s1.search_events + s3.search_events,
            retained: s1.retained + s3.retained,
            passed_through: s1.passed_through + s3.passed_through,
        };
        sink(
            "filter",
            json!({"threshold": tau, "retention": stats.retention(), "test": report.mean}),
        );
        out.push(FilterPoint {
            threshold: tau,
            stats,
            test: report,
        });
    }
    Ok(out)
}
