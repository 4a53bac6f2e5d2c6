use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::schema::{Instance, ItemId};
use crate::error::{Error, Result};

/// Draws `k` distinct items uniformly from the catalog, excluding the
/// instance target and every item in its recommendation context.
pub fn sample_negatives<R: Rng + ?Sized>(instance: &Instance, k: usize, num_items: usize, rng: &mut R) -> Result<Vec<ItemId>> {
    let mut excluded: HashSet<ItemId> = instance.rec_items().collect();
    excluded.insert(instance.target);
    let pool_size = num_items - excluded.iter().filter(|&&i| (i as usize) < num_items).count();
    if k > pool_size {
        return Err(Error::Config(format!(
            "cannot draw {k} negatives from a pool of {pool_size} items"
        )));
    }
    if 2 * k >= pool_size {
        let mut pool: Vec<ItemId> = (0..num_items as ItemId).filter(|i| !excluded.contains(i)).collect();
        let (chosen, _) = pool.partial_shuffle(rng, k);
        return Ok(chosen.to_vec());
    }
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let cand = rng.gen_range(0..num_items) as ItemId;
        if excluded.insert(cand) {
            out.push(cand);
        }
    }
    Ok(out)
}
