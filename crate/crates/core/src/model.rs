//! Model configuration, parameter layout and the end-to-end scoring path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Catalog, Instance, ItemId, Window};
use crate::encoder::{encode_histories, EncodedHistories};
use crate::error::{Error, Result};
use crate::head::{aggregate, head_logits};
use crate::nn::{AttentionParams, FeedForwardParams, ParamId, ParamStore, Tape, Tensor2, Var};
use crate::reasoner::{run_reasoning, InitialOffset, ReasoningOutput};

/// How history rows are pooled into `w_s` / `w_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Plain mean over all rows.
    Mean,
    /// Candidate-embedding query, scaled dot-product, no projections.
    TargetAware,
    /// Same with learned query/key projections.
    TargetAwareProjected,
}

impl Aggregation {
    pub fn code(self) -> u32 {
        match self {
            Aggregation::Mean => 0,
            Aggregation::TargetAware => 1,
            Aggregation::TargetAwareProjected => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Aggregation::Mean),
            1 => Ok(Aggregation::TargetAware),
            2 => Ok(Aggregation::TargetAwareProjected),
            _ => Err(Error::Checkpoint(format!("unknown aggregation code {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Mean => "mean",
            Aggregation::TargetAware => "target",
            Aggregation::TargetAwareProjected => "target-projected",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "target" => Ok(Aggregation::TargetAware),
            "target-projected" => Ok(Aggregation::TargetAwareProjected),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub catalog: Catalog,
    pub window: Window,
    pub d: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub ffn_hidden: usize,
    /// Number of latent reasoning steps `K`.
    pub steps: usize,
    pub use_cross: bool,
    pub aggregation: Aggregation,
    pub layer_norm: bool,
    pub head_hidden: [usize; 2],
    pub init_std: f64,
}

impl ModelConfig {
    pub fn new(catalog: Catalog, window: Window, d: usize) -> Self {
        Self {
            catalog,
            window,
            d,
            heads: 2,
            encoder_layers: 1,
            ffn_hidden: 2 * d,
            steps: 2,
            use_cross: true,
            aggregation: Aggregation::TargetAware,
            layer_norm: false,
            head_hidden: [2 * d, d],
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be at least 1".into()));
        }
        if self.ffn_hidden == 0 || self.head_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.window.max_rec == 0 || self.window.max_search == 0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        if self.catalog.items == 0 || self.catalog.users == 0 || self.catalog.words == 0 {
            return Err(Error::Config("catalog sizes must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Self-attention plus feed-forward block of one encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub user: ParamId,
    pub item: ParamId,
    pub word: ParamId,
    pub pos_search: ParamId,
    pub pos_rec: ParamId,
    pub enc_search: Vec<BlockParams>,
    pub enc_rec: Vec<BlockParams>,
    pub cross_search: AttentionParams,
    pub cross_rec: AttentionParams,
    pub step_search: ParamId,
    pub step_rec: ParamId,
    pub head: HeadParams,
    pub agg_query: Option<ParamId>,
    pub agg_key: Option<ParamId>,
}

impl ModelParams {
    /// Last encoder block of each stream; the reasoning loop reuses them.
    pub fn reasoning_blocks(&self) -> (&BlockParams, &BlockParams) {
        (
            self.enc_search.last().expect("at least one layer"),
            self.enc_rec.last().expect("at least one layer"),
        )
    }
}

fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100000001b3))
}

/// Parameter initialiser giving every named tensor its own seeded stream,
/// so shared parameters start identical across model variants.
struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    std: f64,
}

impl Init<'_> {
    fn gaussian(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        self.store.add_gaussian(name, rows, cols, self.std, &mut rng)
    }

    fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.store.add_zeros(name, rows, cols)
    }

    fn attention(&mut self, prefix: &str, d: usize, heads: usize) -> Result<AttentionParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(prefix));
        AttentionParams::init(self.store, prefix, d, heads, self.std, &mut rng)
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<FeedForwardParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(prefix));
        FeedForwardParams::init(self.store, prefix, d, hidden, self.std, &mut rng)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d = c.d;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
            std: c.init_std,
        };
        let user = init.gaussian("emb.user", c.catalog.users, d)?;
        let item = init.gaussian("emb.item", c.catalog.items, d)?;
        let word = init.gaussian("emb.word", c.catalog.words, d)?;
        let pos_search = init.gaussian("pos.search", c.window.max_search, d)?;
        let pos_rec = init.gaussian("pos.rec", c.window.max_rec, d)?;
        let mut enc_search = Vec::new();
        let mut enc_rec = Vec::new();
        for l in 0..c.encoder_layers {
            for (side, out) in [("search", &mut enc_search), ("rec", &mut enc_rec)] {
                out.push(BlockParams {
                    attn: init.attention(&format!("enc.{side}.l{l}.attn"), d, c.heads)?,
                    ffn: init.ffn(&format!("enc.{side}.l{l}.ffn"), d, c.ffn_hidden)?,
                });
            }
        }
        let cross_search = init.attention("cross.search", d, c.heads)?;
        let cross_rec = init.attention("cross.rec", d, c.heads)?;
        let step_search = init.gaussian("step.search", c.steps, d)?;
        let step_rec = init.gaussian("step.rec", c.steps, d)?;
        let [h1, h2] = c.head_hidden;
        let head = HeadParams {
            w1: init.gaussian("head.w1", 4 * d, h1)?,
            b1: init.zeros("head.b1", 1, h1)?,
            w2: init.gaussian("head.w2", h1, h2)?,
            b2: init.zeros("head.b2", 1, h2)?,
            w3: init.gaussian("head.w3", h2, 1)?,
            b3: init.zeros("head.b3", 1, 1)?,
        };
        let (agg_query, agg_key) = if c.aggregation == Aggregation::TargetAwareProjected {
            (Some(init.gaussian("agg.wq", d, d)?), Some(init.gaussian("agg.wk", d, d)?))
        } else {
            (None, None)
        };
        let params = ModelParams {
            user,
            item,
            word,
            pos_search,
            pos_rec,
            enc_search,
            enc_rec,
            cross_search,
            cross_rec,
            step_search,
            step_rec,
            head,
            agg_query,
            agg_key,
        };
        Ok(Self { config, store, params })
    }

    /// Rebinds parameter handles for a store loaded from disk.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let template = Model::new(config.clone(), 0)?;
        if template.store.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                template.store.len(),
                store.len()
            )));
        }
        for e in template.store.entries() {
            let id = store.require(&e.name)?;
            if store.value(id).shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{} has shape {:?}, expected {:?}",
                    e.name,
                    store.value(id).shape(),
                    e.value.shape()
                )));
            }
            if id != template.store.id(&e.name).expect("template name") {
                return Err(Error::Checkpoint(format!("{} stored out of order", e.name)));
            }
        }
        Ok(Self {
            config,
            store,
            params: template.params,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    pub fn item_embedding(&self, item: ItemId) -> &[f64] {
        self.store.value(self.params.item).row(item as usize)
    }

    /// Encoder, reasoning (with cross-attention as configured) and, when
    /// requested, the no-cross counterpart over the same encoded histories.
    pub fn forward_context(&self, tape: &mut Tape, inst: &Instance, opts: &ContextOptions<'_>) -> Result<ContextForward> {
        let encoded = encode_histories(tape, self, &inst.search, &inst.rec, None)?;
        let reasoning = run_reasoning(tape, self, &encoded, self.config.steps, self.config.use_cross, opts.offset)?;
        let no_cross = if opts.with_no_cross && self.config.steps > 0 {
            Some(run_reasoning(tape, self, &encoded, self.config.steps, false, opts.offset)?)
        } else {
            None
        };
        let user = tape.gather(&self.store, self.params.user, &[inst.user as usize])?;
        Ok(ContextForward {
            encoded,
            reasoning,
            no_cross,
            user,
        })
    }

    /// Pre-sigmoid scores for `items` (C×1), one matrix pass over candidates.
    pub fn candidate_logits(&self, tape: &mut Tape, ctx: &ContextForward, items: &[ItemId]) -> Result<Var> {
        let rows: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let cands = tape.gather(&self.store, self.params.item, &rows)?;
        let out = &ctx.reasoning;
        let w_s = aggregate(tape, self, cands, out.hk_search, &out.valid_search)?;
        let w_r = aggregate(tape, self, cands, out.hk_rec, &out.valid_rec)?;
        head_logits(tape, self, ctx.user, w_s, w_r, cands)
    }

    /// Deterministic pre-sigmoid scores without gradient bookkeeping.
    pub fn score_items(&self, inst: &Instance, items: &[ItemId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ctx = self.forward_context(&mut tape, inst, &ContextOptions::default())?;
        let logits = self.candidate_logits(&mut tape, &ctx, items)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Final-state trace `(h_s^(k), h_r^(k))` for k = 0..=K.
    pub fn reasoning_trace(&self, inst: &Instance) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let mut tape = Tape::new();
        let ctx = self.forward_context(&mut tape, inst, &ContextOptions::default())?;
        Ok(ctx
            .reasoning
            .states
            .iter()
            .map(|&(s, r)| (tape.value(s).data().to_vec(), tape.value(r).data().to_vec()))
            .collect())
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    pub(crate) fn zeros_row(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor2::zeros(1, self.config.d))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ContextOptions<'a> {
    pub with_no_cross: bool,
    pub offset: Option<InitialOffset<'a>>,
}

pub struct ContextForward {
    pub encoded: EncodedHistories,
    pub reasoning: ReasoningOutput,
    pub no_cross: Option<ReasoningOutput>,
    pub user: Var,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::new(
            Catalog {
                users: 4,
                items: 12,
                words: 9,
            },
            Window {
                max_search: 4,
                max_rec: 4,
            },
            8,
        );
        c.steps = 2;
        c
    }

    #[test]
    fn encoder_parameter_sets_are_disjoint() {
        let m = Model::new(tiny_config(), 1).unwrap();
        let names: Vec<_> = m.store.entries().iter().map(|e| e.name.clone()).collect();
        let s: Vec<_> = names.iter().filter(|n| n.starts_with("enc.search.")).collect();
        let r: Vec<_> = names.iter().filter(|n| n.starts_with("enc.rec.")).collect();
        assert_eq!(s.len(), r.len());
        assert!(s.len() >= 8);
        assert!(s.iter().all(|n| !r.contains(n)));
    }

    #[test]
    fn shared_names_initialise_identically_across_variants() {
        let mut base = tiny_config();
        base.steps = 0;
        base.aggregation = Aggregation::Mean;
        let a = Model::new(base, 5).unwrap();
        let b = Model::new(tiny_config(), 5).unwrap();
        for e in a.store.entries() {
            let id = b.store.id(&e.name).unwrap();
            if e.value.rows() > 0 && !e.name.starts_with("step.") {
                assert_eq!(&e.value, b.store.value(id), "{}", e.name);
            }
        }
    }

    #[test]
    fn rejects_bad_widths() {
        let mut c = tiny_config();
        c.heads = 3;
        assert!(Model::new(c, 0).is_err());
    }
}
