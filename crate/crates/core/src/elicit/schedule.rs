//! Exhaustive pair scheduling with seeded order randomization.

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSchedule {
    /// Presented order: (first shown, second shown).
    pub pairs: Vec<(String, String)>,
    pub seed: u64,
}

/// Every unordered pair exactly once. The within-pair order comes from a
/// seeded coin flip per pair and the overall list order from a seeded
/// shuffle, both drawn from the same stream.
pub fn schedule_pairs(item_ids: &[String], seed: u64) -> Result<PairSchedule> {
    if item_ids.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 items to pair, got {}",
            item_ids.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for id in item_ids {
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate item id {id:?}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(item_ids.len() * (item_ids.len() - 1) / 2);
    for i in 0..item_ids.len() {
        for j in (i + 1)..item_ids.len() {
            if rng.gen::<bool>() {
                pairs.push((item_ids[i].clone(), item_ids[j].clone()));
            } else {
                pairs.push((item_ids[j].clone(), item_ids[i].clone()));
            }
        }
    }
    pairs.shuffle(&mut rng);
    Ok(PairSchedule { pairs, seed })
}
