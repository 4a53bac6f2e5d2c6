//! Flat `key = value` run configuration.
//!
//! Every key has a default (see [`RunConfig::default`]); files may set any
//! subset, `--set key=value` overrides are applied afterwards and unknown
//! keys are rejected. Lines starting with `#` are comments.

use std::path::{Path, PathBuf};

use crate::data::{Catalog, SplitOptions, SynthConfig, Window};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::model::{Aggregation, ModelConfig};
use crate::objectives::{Distance, TrainHyperparams};
use crate::rl::{RewardMetric, RlConfig, RolloutConfig};

/// Environment variable naming a default config file.
pub const CONFIG_ENV: &str = "LCRSER_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // synthetic data
    pub users: usize,
    pub items: usize,
    pub words: usize,
    pub topics: usize,
    pub interests_per_user: usize,
    pub search_relevance: f64,
    pub search_rate: f64,
    pub session_coherence: f64,
    pub min_sessions: usize,
    pub max_sessions: usize,
    pub max_query_words: usize,
    pub max_clicks: usize,
    pub popularity_exponent: f64,
    // model
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    /// 0 means `2·d`.
    pub ffn_hidden: usize,
    pub steps: usize,
    pub use_cross: bool,
    pub aggregation: Aggregation,
    pub layer_norm: bool,
    pub init_std: f64,
    pub max_search: usize,
    pub max_rec: usize,
    // pre-training
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub train_negatives: usize,
    pub lambda_tcl: f64,
    pub lambda_reg: f64,
    pub margin: f64,
    pub distance: Distance,
    pub reg_embeddings: bool,
    /// 0 keeps every training target.
    pub max_train_targets: usize,
    /// 0 disables validation-based early stopping.
    pub patience: usize,
    // reinforcement learning
    pub rl_rounds: usize,
    pub rl_batch: usize,
    pub rl_lr: f64,
    pub trajectories: usize,
    pub gamma: f64,
    pub sigma: f64,
    pub lambda_kl: f64,
    pub reward: RewardMetric,
    pub pool_size: usize,
    /// 0 disables ratio clipping.
    pub clip: f64,
    pub rl_eval_every: usize,
    pub rl_patience: usize,
    /// Users whose training instances are held out for RL model selection.
    pub rl_selection_users: usize,
    pub kl_cap: f64,
    // evaluation
    pub eval_negatives: usize,
    pub eval_seed: u64,
    /// `valid` or `test`.
    pub eval_split: String,
    // experiments
    pub ablate_seeds: usize,
    pub filter_thresholds: Vec<f64>,
    pub filter_variant: String,
    // paths
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub force: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let hp = TrainHyperparams::default();
        let rollout = RolloutConfig::default();
        let rl = RlConfig::default();
        Self {
            seed: 0,
            users: synth.users,
            items: synth.items,
            words: synth.words,
            topics: synth.topics,
            interests_per_user: synth.interests_per_user,
            search_relevance: synth.search_relevance,
            search_rate: synth.search_rate,
            session_coherence: synth.session_coherence,
            min_sessions: synth.min_sessions,
            max_sessions: synth.max_sessions,
            max_query_words: synth.max_query_words,
            max_clicks: synth.max_clicks,
            popularity_exponent: synth.popularity_exponent,
            d: 64,
            heads: 2,
            encoder_layers: 1,
            ffn_hidden: 0,
            steps: 2,
            use_cross: true,
            aggregation: Aggregation::TargetAware,
            layer_norm: false,
            init_std: 0.02,
            max_search: 20,
            max_rec: 20,
            epochs: 10,
            lr: hp.lr,
            batch_size: hp.batch_size,
            train_negatives: hp.negatives,
            lambda_tcl: hp.lambda_tcl,
            lambda_reg: hp.lambda_reg,
            margin: hp.margin,
            distance: hp.distance,
            reg_embeddings: hp.reg_embeddings,
            max_train_targets: 0,
            patience: 0,
            rl_rounds: rl.rounds,
            rl_batch: rl.batch_size,
            rl_lr: rl.lr,
            trajectories: rollout.trajectories,
            gamma: rollout.gamma,
            sigma: rollout.sigma,
            lambda_kl: rl.lambda_kl,
            reward: rollout.reward,
            pool_size: rollout.pool_size,
            clip: 0.0,
            rl_eval_every: rl.eval_every,
            rl_patience: 0,
            rl_selection_users: 200,
            kl_cap: 0.5,
            eval_negatives: EvalProtocol::default().negatives,
            eval_seed: EvalProtocol::default().seed,
            eval_split: "test".into(),
            ablate_seeds: 5,
            filter_thresholds: vec![-1.0, 0.0, 0.5, 1.0],
            filter_variant: "base".into(),
            data: None,
            out: PathBuf::from("runs/default"),
            checkpoint: None,
            force: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "users" => self.users = parse(key, v)?,
            "items" => self.items = parse(key, v)?,
            "words" => self.words = parse(key, v)?,
            "topics" => self.topics = parse(key, v)?,
            "interests_per_user" => self.interests_per_user = parse(key, v)?,
            "search_relevance" => self.search_relevance = parse(key, v)?,
            "search_rate" => self.search_rate = parse(key, v)?,
            "session_coherence" => self.session_coherence = parse(key, v)?,
            "min_sessions" => self.min_sessions = parse(key, v)?,
            "max_sessions" => self.max_sessions = parse(key, v)?,
            "max_query_words" => self.max_query_words = parse(key, v)?,
            "max_clicks" => self.max_clicks = parse(key, v)?,
            "popularity_exponent" => self.popularity_exponent = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "encoder_layers" => self.encoder_layers = parse(key, v)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "use_cross" => self.use_cross = parse_bool(key, v)?,
            "aggregation" => self.aggregation = Aggregation::parse(v)?,
            "layer_norm" => self.layer_norm = parse_bool(key, v)?,
            "init_std" => self.init_std = parse(key, v)?,
            "max_search" => self.max_search = parse(key, v)?,
            "max_rec" => self.max_rec = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "train_negatives" => self.train_negatives = parse(key, v)?,
            "lambda_tcl" => self.lambda_tcl = parse(key, v)?,
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "margin" => self.margin = parse(key, v)?,
            "distance" => self.distance = Distance::parse(v)?,
            "reg_embeddings" => self.reg_embeddings = parse_bool(key, v)?,
            "max_train_targets" => self.max_train_targets = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "rl_rounds" => self.rl_rounds = parse(key, v)?,
            "rl_batch" => self.rl_batch = parse(key, v)?,
            "rl_lr" => self.rl_lr = parse(key, v)?,
            "trajectories" => self.trajectories = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "sigma" => self.sigma = parse(key, v)?,
            "lambda_kl" => self.lambda_kl = parse(key, v)?,
            "reward" => self.reward = RewardMetric::parse(v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "clip" => self.clip = parse(key, v)?,
            "rl_eval_every" => self.rl_eval_every = parse(key, v)?,
            "rl_patience" => self.rl_patience = parse(key, v)?,
            "rl_selection_users" => self.rl_selection_users = parse(key, v)?,
            "kl_cap" => self.kl_cap = parse(key, v)?,
            "eval_negatives" => self.eval_negatives = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "eval_split" => self.eval_split = v.to_string(),
            "ablate_seeds" => self.ablate_seeds = parse(key, v)?,
            "filter_thresholds" => {
                self.filter_thresholds = v
                    .split(',')
                    .map(|t| parse(key, t.trim()))
                    .collect::<Result<_>>()?
            }
            "filter_variant" => self.filter_variant = v.to_string(),
            "data" => self.data = opt_path(v),
            "out" => self.out = PathBuf::from(v),
            "checkpoint" => self.checkpoint = opt_path(v),
            "force" => self.force = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let thresholds: Vec<String> = self.filter_thresholds.iter().map(f64::to_string).collect();
        vec![
            ("seed", self.seed.to_string()),
            ("users", self.users.to_string()),
            ("items", self.items.to_string()),
            ("words", self.words.to_string()),
            ("topics", self.topics.to_string()),
            ("interests_per_user", self.interests_per_user.to_string()),
            ("search_relevance", self.search_relevance.to_string()),
            ("search_rate", self.search_rate.to_string()),
            ("session_coherence", self.session_coherence.to_string()),
            ("min_sessions", self.min_sessions.to_string()),
            ("max_sessions", self.max_sessions.to_string()),
            ("max_query_words", self.max_query_words.to_string()),
            ("max_clicks", self.max_clicks.to_string()),
            ("popularity_exponent", self.popularity_exponent.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("encoder_layers", self.encoder_layers.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("steps", self.steps.to_string()),
            ("use_cross", self.use_cross.to_string()),
            ("aggregation", self.aggregation.name().to_string()),
            ("layer_norm", self.layer_norm.to_string()),
            ("init_std", self.init_std.to_string()),
            ("max_search", self.max_search.to_string()),
            ("max_rec", self.max_rec.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("train_negatives", self.train_negatives.to_string()),
            ("lambda_tcl", self.lambda_tcl.to_string()),
            ("lambda_reg", self.lambda_reg.to_string()),
            ("margin", self.margin.to_string()),
            ("distance", self.distance.name().to_string()),
            ("reg_embeddings", self.reg_embeddings.to_string()),
            ("max_train_targets", self.max_train_targets.to_string()),
            ("patience", self.patience.to_string()),
            ("rl_rounds", self.rl_rounds.to_string()),
            ("rl_batch", self.rl_batch.to_string()),
            ("rl_lr", self.rl_lr.to_string()),
            ("trajectories", self.trajectories.to_string()),
            ("gamma", self.gamma.to_string()),
            ("sigma", self.sigma.to_string()),
            ("lambda_kl", self.lambda_kl.to_string()),
            ("reward", self.reward.name()),
            ("pool_size", self.pool_size.to_string()),
            ("clip", self.clip.to_string()),
            ("rl_eval_every", self.rl_eval_every.to_string()),
            ("rl_patience", self.rl_patience.to_string()),
            ("rl_selection_users", self.rl_selection_users.to_string()),
            ("kl_cap", self.kl_cap.to_string()),
            ("eval_negatives", self.eval_negatives.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_split", self.eval_split.clone()),
            ("ablate_seeds", self.ablate_seeds.to_string()),
            ("filter_thresholds", thresholds.join(",")),
            ("filter_variant", self.filter_variant.clone()),
            ("data", show_path(&self.data)),
            ("out", self.out.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("force", self.force.to_string()),
        ]
    }

    /// Applies `key = value` lines.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Defaults, then the file (explicit path or `LCRSER_CONFIG`), then overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        if let Some(path) = file.map(Path::to_path_buf).or(env) {
            cfg.apply_text(&std::fs::read_to_string(&path)?)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.model_config().validate()?;
        self.train_hyperparams().validate()?;
        self.rl_config().rollout.validate()?;
        if self.pool_size > self.items {
            return Err(Error::Config("pool_size exceeds the item count".into()));
        }
        if !(self.kl_cap > 0.0) || !(self.clip >= 0.0) {
            return Err(Error::Config("kl_cap must be positive and clip non-negative".into()));
        }
        if !matches!(self.eval_split.as_str(), "valid" | "test") {
            return Err(Error::Config(format!("eval_split must be valid or test, got {:?}", self.eval_split)));
        }
        if self.filter_thresholds.is_empty() {
            return Err(Error::Config("filter_thresholds must not be empty".into()));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            users: self.users,
            items: self.items,
            words: self.words,
            topics: self.topics,
            interests_per_user: self.interests_per_user,
            search_relevance: self.search_relevance,
            search_rate: self.search_rate,
            session_coherence: self.session_coherence,
            min_sessions: self.min_sessions,
            max_sessions: self.max_sessions,
            max_query_words: self.max_query_words,
            max_clicks: self.max_clicks,
            popularity_exponent: self.popularity_exponent,
            seed: self.seed,
        }
    }

    pub fn window(&self) -> Window {
        Window {
            max_search: self.max_search,
            max_rec: self.max_rec,
        }
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            window: self.window(),
            max_train_targets_per_user: (self.max_train_targets > 0).then_some(self.max_train_targets),
        }
    }

    pub fn model_config_for(&self, catalog: Catalog) -> ModelConfig {
        let mut m = ModelConfig::new(catalog, self.window(), self.d);
        m.heads = self.heads;
        m.encoder_layers = self.encoder_layers;
        m.ffn_hidden = if self.ffn_hidden == 0 { 2 * self.d } else { self.ffn_hidden };
        m.steps = self.steps;
        m.use_cross = self.use_cross;
        m.aggregation = self.aggregation;
        m.layer_norm = self.layer_norm;
        m.init_std = self.init_std;
        m
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model_config_for(self.synth_config().catalog())
    }

    pub fn train_hyperparams(&self) -> TrainHyperparams {
        TrainHyperparams {
            lambda_tcl: self.lambda_tcl,
            lambda_reg: self.lambda_reg,
            margin: self.margin,
            distance: self.distance,
            lr: self.lr,
            batch_size: self.batch_size,
            negatives: self.train_negatives,
            seed: self.seed,
            reg_embeddings: self.reg_embeddings,
        }
    }

    pub fn rl_config(&self) -> RlConfig {
        RlConfig {
            rollout: RolloutConfig {
                trajectories: self.trajectories,
                gamma: self.gamma,
                sigma: self.sigma,
                reward: self.reward,
                pool_size: self.pool_size,
            },
            lambda_kl: self.lambda_kl,
            lr: self.rl_lr,
            rounds: self.rl_rounds,
            batch_size: self.rl_batch,
            clip: (self.clip > 0.0).then_some(self.clip),
            eval_every: self.rl_eval_every,
            patience: (self.rl_patience > 0).then_some(self.rl_patience),
            kl_cap: Some(self.kl_cap),
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        EvalProtocol {
            negatives: self.eval_negatives,
            seed: self.eval_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_through_entries() {
        let mut a = RunConfig::default();
        a.apply_text("# comment\nd = 16\nfilter_thresholds = -1, 0.25, 1\naggregation = mean\n").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_text()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.filter_thresholds, vec![-1.0, 0.25, 1.0]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("lerning_rate", "1"), Err(Error::Config(_))));
        assert!(matches!(c.apply_text("d 16"), Err(Error::Parse { line: 1, .. })));
        assert!(c.apply_override("d=abc").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        RunConfig::default().validate().unwrap();
    }
}
