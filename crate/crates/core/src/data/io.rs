//! Line-delimited interaction logs.
//!
//! One event per line, tab separated:
//!
//! ```text
//! user_id <TAB> type <TAB> timestamp <TAB> item_ids <TAB> query
//! ```
//!
//! `type` is `search` or `rec`. `item_ids` is a comma-separated list (`-`
//! when empty); a `rec` line carries exactly one item. `query` is a
//! comma-separated list of word ids for `search` lines and `-` for `rec`
//! lines. Blank lines and lines starting with `#` are skipped.
//!
//! A sidecar file `<log>.meta` declares the id spaces as `key=value` lines:
//! `format`, `users`, `items`, `words`.
//!
//! [`ingest_text_log`] reads the same layout with a free-text query column,
//! lower-cases and whitespace-splits it, and builds a [`Vocabulary`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::schema::{Catalog, RecEvent, SearchEvent, UserHistory, UserId, WordId, UNKNOWN_WORD};
use crate::error::{Error, Result};

pub const LOG_FORMAT: &str = "lcr-ser-log/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub histories: Vec<UserHistory>,
}

pub fn meta_path(log: &Path) -> PathBuf {
    let mut s = log.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn read_catalog(log: &Path) -> Result<Catalog> {
    let text = fs::read_to_string(meta_path(log))?;
    let mut fields = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected key=value in header, got {line:?}"),
        })?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(f) = fields.get("format") {
        if f != LOG_FORMAT {
            return Err(Error::Validation(format!("unsupported log format {f}")));
        }
    }
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::Validation(format!("header is missing {k}")))?
            .parse()
            .map_err(|e| Error::Validation(format!("header field {k}: {e}")))
    };
    Ok(Catalog {
        users: get("users")?,
        items: get("items")?,
        words: get("words")?,
    })
}

pub fn write_catalog(log: &Path, catalog: &Catalog) -> Result<()> {
    let text = format!(
        "format={LOG_FORMAT}\nusers={}\nitems={}\nwords={}\n",
        catalog.users, catalog.items, catalog.words
    );
    fs::write(meta_path(log), text)?;
    Ok(())
}

enum QueryColumn<'a> {
    Ids,
    Text(&'a mut Vocabulary),
}

/// Loads a word-id log and its sidecar header.
pub fn load_log(path: &Path) -> Result<Dataset> {
    let catalog = read_catalog(path)?;
    let text = fs::read_to_string(path)?;
    let histories = parse_log(&text, &catalog, QueryColumn::Ids)?;
    Ok(Dataset { catalog, histories })
}

/// Loads a log whose query column is free text. The header's `words` entry
/// is replaced by the size of the vocabulary built here.
pub fn ingest_text_log(path: &Path) -> Result<(Dataset, Vocabulary)> {
    let mut catalog = read_catalog(path)?;
    let text = fs::read_to_string(path)?;
    let mut vocab = Vocabulary::new();
    catalog.words = usize::MAX;
    let histories = parse_log(&text, &catalog, QueryColumn::Text(&mut vocab))?;
    catalog.words = vocab.len();
    Ok((Dataset { catalog, histories }, vocab))
}

fn parse_id_list(field: &str, line: usize, what: &str) -> Result<Vec<u32>> {
    if field == "-" || field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|t| {
            t.trim().parse::<u32>().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {what} id {t:?}: {e}"),
            })
        })
        .collect()
}

fn check_range(ids: &[u32], bound: usize, line: usize, what: &str) -> Result<()> {
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= bound) {
        return Err(Error::Validation(format!(
            "line {line}: {what} id {bad} outside catalog of {bound}"
        )));
    }
    Ok(())
}

fn parse_log(text: &str, catalog: &Catalog, mut query: QueryColumn<'_>) -> Result<Vec<UserHistory>> {
    let mut users: BTreeMap<UserId, UserHistory> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 5 tab-separated fields, found {}", cols.len()),
            });
        }
        let user: UserId = cols[0].trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("bad user id {:?}: {e}", cols[0]),
        })?;
        check_range(&[user], catalog.users, line, "user")?;
        let timestamp: i64 = cols[2].trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("bad timestamp {:?}: {e}", cols[2]),
        })?;
        let items = parse_id_list(cols[3].trim(), line, "item")?;
        check_range(&items, catalog.items, line, "item")?;
        let history = users.entry(user).or_insert_with(|| UserHistory::new(user));
        match cols[1].trim() {
            "rec" => {
                if items.len() != 1 {
                    return Err(Error::Parse {
                        line,
                        msg: format!("rec event needs exactly one item, found {}", items.len()),
                    });
                }
                history.rec.push(RecEvent {
                    timestamp,
                    item: items[0],
                });
            }
            "search" => {
                let words = match &mut query {
                    QueryColumn::Ids => {
                        let w = parse_id_list(cols[4].trim(), line, "word")?;
                        check_range(&w, catalog.words, line, "word")?;
                        w
                    }
                    QueryColumn::Text(vocab) => vocab.tokenize_and_insert(cols[4]),
                };
                if words.is_empty() {
                    return Err(Error::Parse {
                        line,
                        msg: "search event with an empty query".into(),
                    });
                }
                history.search.push(SearchEvent {
                    timestamp,
                    query: words,
                    clicked: items,
                });
            }
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown event type {other:?}"),
                })
            }
        }
    }
    Ok(users
        .into_values()
        .map(|mut h| {
            h.sort_chronologically();
            h
        })
        .collect())
}

fn join_ids(ids: &[u32]) -> String {
    if ids.is_empty() {
        return "-".into();
    }
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{id}").unwrap();
    }
    s
}

/// Renders histories in the log layout, events ordered by (user, timestamp,
/// search before rec).
pub fn render_log(histories: &[UserHistory]) -> String {
    let mut out = String::new();
    for h in histories {
        let mut lines: Vec<(i64, u8, String)> = Vec::with_capacity(h.len());
        for e in &h.search {
            lines.push((
                e.timestamp,
                0,
                format!("{}\tsearch\t{}\t{}\t{}\n", h.user, e.timestamp, join_ids(&e.clicked), join_ids(&e.query)),
            ));
        }
        for e in &h.rec {
            lines.push((e.timestamp, 1, format!("{}\trec\t{}\t{}\t-\n", h.user, e.timestamp, e.item)));
        }
        lines.sort_by_key(|(t, kind, _)| (*t, *kind));
        for (_, _, l) in lines {
            out.push_str(&l);
        }
    }
    out
}

/// Writes the log and its sidecar header.
pub fn write_log(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, render_log(&dataset.histories))?;
    write_catalog(path, &dataset.catalog)
}

/// Lower-cased whitespace tokens mapped to ids. Id 0 is the unknown word.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    ids: HashMap<String, WordId>,
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self {
            ids: HashMap::new(),
            words: vec!["<unk>".to_string()],
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn word(&self, id: WordId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    fn tokenize_and_insert(&mut self, text: &str) -> Vec<WordId> {
        text.split_whitespace()
            .map(|t| {
                let t = t.to_lowercase();
                if let Some(&id) = self.ids.get(&t) {
                    return id;
                }
                let id = self.words.len() as WordId;
                self.words.push(t.clone());
                self.ids.insert(t, id);
                id
            })
            .collect()
    }

    /// Maps text onto existing ids; unseen tokens become [`UNKNOWN_WORD`].
    pub fn tokenize(&self, text: &str) -> Vec<WordId> {
        text.split_whitespace()
            .map(|t| self.ids.get(&t.to_lowercase()).copied().unwrap_or(UNKNOWN_WORD))
            .collect()
    }
}
