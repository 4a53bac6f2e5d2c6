use serde::{Deserialize, Serialize};

pub type UserId = u32;
pub type ItemId = u32;
pub type WordId = u32;

/// Word id reserved for out-of-vocabulary tokens.
pub const UNKNOWN_WORD: WordId = 0;

/// A query followed by the items clicked in response to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub timestamp: i64,
    pub query: Vec<WordId>,
    pub clicked: Vec<ItemId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecEvent {
    pub timestamp: i64,
    pub item: ItemId,
}

/// One user's search and recommendation streams, each in chronological order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserHistory {
    pub user: UserId,
    pub search: Vec<SearchEvent>,
    pub rec: Vec<RecEvent>,
}

impl UserHistory {
    pub fn new(user: UserId) -> Self {
        Self {
            user,
            search: Vec::new(),
            rec: Vec::new(),
        }
    }

    /// Total interaction count `L = L_r + L_s`.
    pub fn len(&self) -> usize {
        self.search.len() + self.rec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.search.is_empty() && self.rec.is_empty()
    }

    pub fn sort_chronologically(&mut self) {
        self.search.sort_by_key(|e| e.timestamp);
        self.rec.sort_by_key(|e| e.timestamp);
    }
}

/// Declared id-space sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub users: usize,
    pub items: usize,
    pub words: usize,
}

/// Context windows plus the item to score. Context events strictly precede
/// `timestamp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub user: UserId,
    pub search: Vec<SearchEvent>,
    pub rec: Vec<RecEvent>,
    pub target: ItemId,
    pub timestamp: i64,
    pub label: f64,
}

impl Instance {
    pub fn rec_items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.rec.iter().map(|e| e.item)
    }

    /// Same context and timestamp, different item.
    pub fn with_target(&self, item: ItemId, label: f64) -> Instance {
        Instance {
            target: item,
            label,
            ..self.clone()
        }
    }
}

/// Maximum kept lengths of the two context streams. Longer histories are
/// left-truncated so the most recent events survive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub max_search: usize,
    pub max_rec: usize,
}

impl Window {
    pub fn truncate<T: Clone>(items: &[T], max: usize) -> Vec<T> {
        let start = items.len().saturating_sub(max);
        items[start..].to_vec()
    }
}
