//! Pure-eviction baselines: streaming (sinks + window), heavy-hitter
//! retention with a recency window, and uniform random removal.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scoring::ScoreVector;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("budget {budget} too small: need at least {min}")]
    BudgetTooSmall { budget: usize, min: usize },
}

/// Keep the first `sink_size` positions plus the most recent
/// `budget - sink_size` positions out of `t` total.
pub fn streaming_evict(
    t: usize,
    budget: usize,
    sink_size: usize,
) -> Result<BTreeSet<usize>, BaselineError> {
    if budget < sink_size + 1 {
        return Err(BaselineError::BudgetTooSmall { budget, min: sink_size + 1 });
    }
    if t <= budget {
        return Ok((0..t).collect());
    }
    let mut kept: BTreeSet<usize> = (0..sink_size.min(t)).collect();
    let recent = budget - sink_size;
    kept.extend(t - recent..t);
    Ok(kept)
}

/// Keep the recent `window` positions plus the top `budget - window`
/// remaining positions by cumulative score; score ties break by position
/// ascending (recency wins).
pub fn h2o_evict(
    scores: &ScoreVector,
    t: usize,
    budget: usize,
    window: usize,
) -> Result<BTreeSet<usize>, BaselineError> {
    if budget < window {
        return Err(BaselineError::BudgetTooSmall { budget, min: window });
    }
    if t <= budget {
        return Ok((0..t).collect());
    }
    let mut kept: BTreeSet<usize> = (t - window..t).collect();
    let slots = budget - window;
    let mut older: Vec<usize> = (0..t - window).collect();
    // Descending by score, ties by position descending so that ascending
    // ties are evicted first.
    older.sort_by(|&a, &b| {
        scores.s[b].partial_cmp(&scores.s[a]).unwrap().then(b.cmp(&a))
    });
    kept.extend(older.into_iter().take(slots));
    Ok(kept)
}

/// Keep a uniformly random `budget`-sized subset, deterministic per seed.
/// Sinks and the recent window are kept first so the comparison against
/// protected policies stays conservative.
pub fn random_evict(
    t: usize,
    budget: usize,
    sink_size: usize,
    window: usize,
    seed: u64,
) -> Result<BTreeSet<usize>, BaselineError> {
    if budget < 1 {
        return Err(BaselineError::BudgetTooSmall { budget, min: 1 });
    }
    if t <= budget {
        return Ok((0..t).collect());
    }
    let mut kept: BTreeSet<usize> = (0..sink_size.min(t)).collect();
    kept.extend(t.saturating_sub(window)..t);
    let free: Vec<usize> = (0..t).filter(|p| !kept.contains(p)).collect();
    let slots = budget.saturating_sub(kept.len());
    if slots > 0 && !free.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in sample(&mut rng, free.len(), slots.min(free.len())) {
            kept.insert(free[i]);
        }
    }
    Ok(kept)
}
