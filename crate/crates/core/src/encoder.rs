//! Event embeddings and the two history encoders.

use crate::data::{EventEmbedding, ItemId, RecEvent, SearchEvent, WordId};
use crate::error::{Error, Result};
use crate::model::{BlockParams, Model};
use crate::nn::{attend, feed_forward_on, Mask, ParamId, Tape, Tensor2, Var};

const LN_EPS: f64 = 1e-5;

/// Right-padding targets for batched-shape tests; `None` encodes at exact length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Padding {
    pub search_to: usize,
    pub rec_to: usize,
}

#[derive(Debug, Clone)]
pub struct EncodedHistories {
    /// Position-augmented event embeddings `Ê_s`.
    pub inputs_search: Var,
    pub inputs_rec: Var,
    /// Encoder outputs `H_s`.
    pub hidden_search: Var,
    pub hidden_rec: Var,
    pub valid_search: Vec<bool>,
    pub valid_rec: Vec<bool>,
}

/// Row-averaging matrix: row `i` spreads `1/|groups[i]|` over its members.
fn averaging_matrix(groups: &[usize]) -> (Tensor2, usize) {
    let total: usize = groups.iter().sum();
    let mut m = Tensor2::zeros(groups.len(), total);
    let mut col = 0;
    for (r, &n) in groups.iter().enumerate() {
        for c in col..col + n {
            m.set(r, c, 1.0 / n as f64);
        }
        col += n;
    }
    (m, total)
}

fn mean_of_groups(tape: &mut Tape, model: &Model, table: ParamId, groups: &[Vec<u32>]) -> Result<Option<Var>> {
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let (avg, total) = averaging_matrix(&sizes);
    if total == 0 {
        return Ok(None);
    }
    let rows: Vec<usize> = groups.iter().flatten().map(|&i| i as usize).collect();
    let gathered = tape.gather(&model.store, table, &rows)?;
    let avg = tape.constant(avg);
    Ok(Some(tape.matmul(avg, gathered)?))
}

/// Mean word embedding of one query (1×d); an empty query maps to zero.
pub fn embed_query(tape: &mut Tape, model: &Model, words: &[WordId]) -> Result<Var> {
    match mean_of_groups(tape, model, model.params.word, &[words.to_vec()])? {
        Some(v) => Ok(v),
        None => Ok(model.zeros_row(tape)),
    }
}

/// Search-event embeddings (L×d): query embedding plus the mean embedding of
/// the clicked items, the latter being zero for an event without clicks.
pub fn embed_search_events(tape: &mut Tape, model: &Model, events: &[SearchEvent]) -> Result<Var> {
    let d = model.d();
    let queries: Vec<Vec<u32>> = events.iter().map(|e| e.query.clone()).collect();
    let clicks: Vec<Vec<u32>> = events.iter().map(|e| e.clicked.clone()).collect();
    let q = mean_of_groups(tape, model, model.params.word, &queries)?;
    let c = mean_of_groups(tape, model, model.params.item, &clicks)?;
    match (q, c) {
        (Some(q), Some(c)) => tape.add(q, c),
        (Some(v), None) | (None, Some(v)) => Ok(v),
        (None, None) => Ok(tape.constant(Tensor2::zeros(events.len(), d))),
    }
}

pub fn embed_rec_events(tape: &mut Tape, model: &Model, events: &[RecEvent]) -> Result<Var> {
    let rows: Vec<usize> = events.iter().map(|e| e.item as usize).collect();
    tape.gather(&model.store, model.params.item, &rows)
}

/// Adds right-aligned positions: the latest event always takes the last row
/// of the position table.
fn add_positions(tape: &mut Tape, model: &Model, table: ParamId, x: Var, side: &str) -> Result<Var> {
    let len = tape.shape(x).0;
    let max = model.store.value(table).rows();
    if len > max {
        return Err(Error::Validation(format!(
            "{side} history of length {len} exceeds the window of {max}"
        )));
    }
    let rows: Vec<usize> = (max - len..max).collect();
    let p = tape.gather(&model.store, table, &rows)?;
    tape.add(x, p)
}

pub(crate) fn maybe_norm(tape: &mut Tape, model: &Model, x: Var) -> Var {
    if model.config.layer_norm {
        tape.layer_norm(x, LN_EPS)
    } else {
        x
    }
}

/// `FFN(MSA(x) + x)`, with optional pre-normalisation of both sublayer inputs.
pub(crate) fn encoder_block(tape: &mut Tape, model: &Model, block: &BlockParams, x: Var, mask: Option<&Mask>) -> Result<Var> {
    let attn = block.attn.vars(tape, &model.store);
    let ffn = block.ffn.vars(tape, &model.store);
    let xn = maybe_norm(tape, model, x);
    let a = attend(tape, xn, xn, xn, mask, &attn)?;
    let f = tape.add(a, x)?;
    let fnorm = maybe_norm(tape, model, f);
    feed_forward_on(tape, fnorm, &ffn)
}

/// Causal mask where pad keys are hidden and pad queries see only themselves.
pub fn padded_causal_mask(valid: &[bool]) -> Mask {
    let n = valid.len();
    Mask::from_fn(n, n, |r, c| c <= r && (valid[c] || c == r))
}

fn encode_side(
    tape: &mut Tape,
    model: &Model,
    embedded: Var,
    pos: ParamId,
    blocks: &[BlockParams],
    pad_to: Option<usize>,
    side: &str,
) -> Result<(Var, Var, Vec<bool>)> {
    let d = model.d();
    let len = tape.shape(embedded).0;
    let mut inputs = add_positions(tape, model, pos, embedded, side)?;
    let mut valid = vec![true; len];
    if let Some(total) = pad_to {
        if total < len {
            return Err(Error::Validation(format!(
                "{side} padding to {total} is shorter than the history ({len})"
            )));
        }
        if total > len {
            let pad = tape.constant(Tensor2::zeros(total - len, d));
            inputs = tape.concat_rows(&[inputs, pad])?;
            valid.resize(total, false);
        }
    }
    if valid.is_empty() {
        let empty = tape.constant(Tensor2::zeros(0, d));
        return Ok((empty, empty, valid));
    }
    let mask = if pad_to.is_some() {
        padded_causal_mask(&valid)
    } else {
        Mask::causal(valid.len())
    };
    let mut h = inputs;
    for block in blocks {
        h = encoder_block(tape, model, block, h, Some(&mask))?;
    }
    Ok((inputs, h, valid))
}

/// Encodes both histories with their own encoders and causal masks.
pub fn encode_histories(
    tape: &mut Tape,
    model: &Model,
    search: &[SearchEvent],
    rec: &[RecEvent],
    padding: Option<Padding>,
) -> Result<EncodedHistories> {
    let p = &model.params;
    let es = embed_search_events(tape, model, search)?;
    let er = embed_rec_events(tape, model, rec)?;
    let (inputs_search, hidden_search, valid_search) = encode_side(
        tape,
        model,
        es,
        p.pos_search,
        &p.enc_search,
        padding.map(|x| x.search_to),
        "search",
    )?;
    let (inputs_rec, hidden_rec, valid_rec) =
        encode_side(tape, model, er, p.pos_rec, &p.enc_rec, padding.map(|x| x.rec_to), "rec")?;
    Ok(EncodedHistories {
        inputs_search,
        inputs_rec,
        hidden_search,
        hidden_rec,
        valid_search,
        valid_rec,
    })
}

/// Item embeddings for a list of ids (n×d) as plain values.
pub fn item_embeddings(model: &Model, items: &[ItemId]) -> Tensor2 {
    let table = model.store.value(model.params.item);
    let rows: Vec<Vec<f64>> = items.iter().map(|&i| table.row(i as usize).to_vec()).collect();
    Tensor2::from_rows(&rows).unwrap_or_else(|_| Tensor2::zeros(0, model.d()))
}

fn mean_rows_of(table: &Tensor2, ids: &[u32], d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    if ids.is_empty() {
        return acc;
    }
    for &i in ids {
        for (a, v) in acc.iter_mut().zip(table.row(i as usize)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= ids.len() as f64);
    acc
}

/// Position-free event vectors from the model's embedding tables.
impl EventEmbedding for Model {
    fn item_vector(&self, item: ItemId) -> Vec<f64> {
        self.item_embedding(item).to_vec()
    }

    fn search_vector(&self, event: &SearchEvent) -> Vec<f64> {
        let d = self.d();
        let q = mean_rows_of(self.store.value(self.params.word), &event.query, d);
        let c = mean_rows_of(self.store.value(self.params.item), &event.clicked, d);
        q.iter().zip(&c).map(|(a, b)| a + b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Catalog, Window};
    use crate::model::ModelConfig;

    fn model() -> Model {
        let cfg = ModelConfig::new(
            Catalog {
                users: 2,
                items: 10,
                words: 6,
            },
            Window {
                max_search: 5,
                max_rec: 5,
            },
            4,
        );
        Model::new(cfg, 3).unwrap()
    }

    fn search(query: Vec<u32>, clicked: Vec<u32>) -> SearchEvent {
        SearchEvent {
            timestamp: 0,
            query,
            clicked,
        }
    }

    #[test]
    fn search_event_is_query_mean_plus_click_mean() {
        let m = model();
        let mut tape = Tape::new();
        let e = embed_search_events(&mut tape, &m, &[search(vec![1, 2], vec![3, 4]), search(vec![5], vec![])]).unwrap();
        let w = m.store.value(m.params.word);
        let it = m.store.value(m.params.item);
        for j in 0..4 {
            let first = (w.get(1, j) + w.get(2, j)) / 2.0 + (it.get(3, j) + it.get(4, j)) / 2.0;
            assert!((tape.value(e).get(0, j) - first).abs() < 1e-12);
            assert!((tape.value(e).get(1, j) - w.get(5, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn right_padding_leaves_valid_rows_unchanged() {
        let m = model();
        let rec: Vec<_> = [1, 2, 3].iter().map(|&item| RecEvent { timestamp: 0, item }).collect();
        let mut t1 = Tape::new();
        let a = encode_histories(&mut t1, &m, &[], &rec, None).unwrap();
        let mut t2 = Tape::new();
        let pad = Padding { search_to: 0, rec_to: 4 };
        let b = encode_histories(&mut t2, &m, &[], &rec, Some(pad)).unwrap();
        assert_eq!(b.valid_rec, vec![true, true, true, false]);
        for r in 0..3 {
            assert_eq!(t1.value(a.hidden_rec).row(r), t2.value(b.hidden_rec).row(r));
        }
    }

    #[test]
    fn overlong_history_is_rejected() {
        let m = model();
        let rec: Vec<_> = (0..6).map(|i| RecEvent { timestamp: i, item: 1 }).collect();
        let mut tape = Tape::new();
        assert!(matches!(
            encode_histories(&mut tape, &m, &[], &rec, None),
            Err(Error::Validation(_))
        ));
    }
}
