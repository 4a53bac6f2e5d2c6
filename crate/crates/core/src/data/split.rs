use serde::{Deserialize, Serialize};

use super::schema::{Instance, UserHistory, Window};
use crate::error::{Error, Result};

/// Options shared by both split strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub window: Window,
    /// Keep only the most recent training targets of each user.
    pub max_train_targets_per_user: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
    pub skipped_users: usize,
    pub warnings: Vec<String>,
}

/// Builds the instance predicting `history.rec[target_idx]`. Context events
/// strictly precede the target timestamp. Returns `None` when the context
/// would be empty.
pub fn instance_for(history: &UserHistory, target_idx: usize, window: &Window) -> Option<Instance> {
    let target = history.rec[target_idx];
    let rec: Vec<_> = history.rec[..target_idx]
        .iter()
        .copied()
        .filter(|e| e.timestamp < target.timestamp)
        .collect();
    let search: Vec<_> = history
        .search
        .iter()
        .filter(|e| e.timestamp < target.timestamp)
        .cloned()
        .collect();
    if rec.is_empty() && search.is_empty() {
        return None;
    }
    Some(Instance {
        user: history.user,
        search: Window::truncate(&search, window.max_search),
        rec: Window::truncate(&rec, window.max_rec),
        target: target.item,
        timestamp: target.timestamp,
        label: 1.0,
    })
}

/// Last recommendation event → test, second-to-last → validation, earlier
/// events → training targets. Users with fewer than three recommendation
/// events are skipped and counted.
pub fn leave_one_out_split(histories: &[UserHistory], opts: &SplitOptions) -> Splits {
    let mut out = Splits::default();
    for h in histories {
        let n = h.rec.len();
        if n < 3 {
            out.skipped_users += 1;
            continue;
        }
        if let Some(i) = instance_for(h, n - 1, &opts.window) {
            out.test.push(i);
        }
        if let Some(i) = instance_for(h, n - 2, &opts.window) {
            out.valid.push(i);
        }
        let first = match opts.max_train_targets_per_user {
            Some(m) => (n - 2).saturating_sub(m),
            None => 0,
        };
        out.train.extend((first..n - 2).filter_map(|t| instance_for(h, t, &opts.window)));
    }
    if out.skipped_users > 0 {
        out.warnings.push(format!(
            "{} users with fewer than 3 recommendation events skipped",
            out.skipped_users
        ));
    }
    out
}

/// Assigns every recommendation event to a bucket by timestamp:
/// `< first` → train, `[first, second)` → validation, `>= second` → test.
pub fn chronological_split(histories: &[UserHistory], boundaries: (i64, i64), opts: &SplitOptions) -> Result<Splits> {
    let (first, second) = boundaries;
    if first > second {
        return Err(Error::Config(format!("split boundaries out of order: {first} > {second}")));
    }
    let mut out = Splits::default();
    for h in histories {
        let mut train = Vec::new();
        for t in 0..h.rec.len() {
            let Some(inst) = instance_for(h, t, &opts.window) else {
                continue;
            };
            if inst.timestamp < first {
                train.push(inst);
            } else if inst.timestamp < second {
                out.valid.push(inst);
            } else {
                out.test.push(inst);
            }
        }
        if let Some(m) = opts.max_train_targets_per_user {
            let drop = train.len().saturating_sub(m);
            train.drain(..drop);
        }
        out.train.extend(train);
    }
    for (name, bucket) in [("train", &out.train), ("valid", &out.valid), ("test", &out.test)] {
        if bucket.is_empty() {
            out.warnings.push(format!("{name} bucket is empty"));
        }
    }
    Ok(out)
}
