//! Tier management state machine: protected sets, periodic tier
//! assignment, CPU-store bookkeeping, and differential prefetch
//! computation.
//!
//! Positions are 0-based absolute cache indices: prompt tokens occupy
//! `0..prompt_len`, the token generated at step `t` (1-based) sits at
//! `prompt_len + t - 1`.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::scoring::{update_cumulative, ScoreVector, ScoringError, StepAttention};

#[derive(Debug, Error, PartialEq)]
pub enum TierError {
    #[error("scores missing live position {0}")]
    MissingScore(usize),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

/// Placement class for a cached position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    /// GPU-resident.
    T0,
    /// Host-resident, full precision.
    T1,
    /// Host-resident, int8-quantized values.
    T2,
    /// Permanently evicted.
    T3,
}

/// Hierarchy configuration: HBM ratio, eviction ratio, manage interval,
/// protected-region sizes, and the optional compressed tier.
#[derive(Debug, Clone)]
pub struct HierarchyConfig {
    /// Fraction of surviving non-protected positions kept GPU-resident.
    pub beta: f64,
    /// Fraction of non-protected positions evicted at each manage event.
    pub evict_ratio: f64,
    /// Steps between manage events.
    pub manage_interval: u64,
    /// Post-prompt sink tokens that are always protected.
    pub sink_size: usize,
    /// Most recent tokens that are always protected.
    pub window_size: usize,
    pub prompt_len: usize,
    pub t2_enabled: bool,
    /// Score quantile of the host-resident set stored quantized when the
    /// compressed tier is enabled (bottom fraction of T1 by score).
    pub t2_quantile: f64,
    pub t_max: u64,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            beta: 0.5,
            evict_ratio: 0.05,
            manage_interval: 64,
            sink_size: 4,
            window_size: 128,
            prompt_len: 0,
            t2_enabled: false,
            t2_quantile: 0.5,
            t_max: 4096,
        }
    }
}

/// Protected positions at step `t` (1-based count of generated tokens):
/// prompt, first `sink_size` post-prompt tokens, and the trailing
/// `window_size` positions.
pub fn protected_set(t: u64, cfg: &HierarchyConfig) -> BTreeSet<usize> {
    let total = cfg.prompt_len + t as usize;
    let mut set = BTreeSet::new();
    for p in 0..cfg.prompt_len.min(total) {
        set.insert(p);
    }
    for p in cfg.prompt_len..(cfg.prompt_len + cfg.sink_size).min(total) {
        set.insert(p);
    }
    for p in total.saturating_sub(cfg.window_size)..total {
        set.insert(p);
    }
    set
}

/// Per-step tier population counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TierCensus {
    pub step: u64,
    pub t0: usize,
    pub t1: usize,
    pub t2: usize,
    pub t3: usize,
}

impl TierCensus {
    pub fn total(&self) -> usize {
        self.t0 + self.t1 + self.t2 + self.t3
    }

    /// Bytes resident per store given the per-token KV footprint. T2
    /// entries keep full-precision keys but int8 values (0.75 factor for
    /// an fp16 baseline).
    pub fn visible_bytes(&self, per_token_bytes: u64) -> u64 {
        let t2 = (self.t2 as f64 * per_token_bytes as f64 * 0.75) as u64;
        (self.t0 + self.t1) as u64 * per_token_bytes + t2
    }

    pub fn cpu_bytes(&self, per_token_bytes: u64) -> u64 {
        let t2 = (self.t2 as f64 * per_token_bytes as f64 * 0.75) as u64;
        self.t1 as u64 * per_token_bytes + t2
    }
}

/// Mutable placement state for one simulation run.
#[derive(Debug, Clone, Default)]
pub struct TierState {
    tier_of: BTreeMap<usize, Tier>,
    cpu_store: BTreeSet<usize>,
    staging: BTreeSet<usize>,
    pub step: u64,
}

impl TierState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a newly created position; new tokens accumulate in HBM
    /// until the next manage event.
    pub fn register(&mut self, pos: usize) {
        self.tier_of.entry(pos).or_insert(Tier::T0);
    }

    pub fn tier(&self, pos: usize) -> Option<Tier> {
        self.tier_of.get(&pos).copied()
    }

    /// All non-evicted positions; this is the attention-visible set.
    pub fn visible(&self) -> BTreeSet<usize> {
        self.tier_of
            .iter()
            .filter(|(_, t)| **t != Tier::T3)
            .map(|(p, _)| *p)
            .collect()
    }

    pub fn cpu_store(&self) -> &BTreeSet<usize> {
        &self.cpu_store
    }

    pub fn staging(&self) -> &BTreeSet<usize> {
        &self.staging
    }

    pub fn census(&self, step: u64) -> TierCensus {
        let mut c = TierCensus { step, t0: 0, t1: 0, t2: 0, t3: 0 };
        for t in self.tier_of.values() {
            match t {
                Tier::T0 => c.t0 += 1,
                Tier::T1 => c.t1 += 1,
                Tier::T2 => c.t2 += 1,
                Tier::T3 => c.t3 += 1,
            }
        }
        c
    }
}

/// Outcome of one manage event.
#[derive(Debug, Clone, Default)]
pub struct TierAssignment {
    pub newly_evicted: BTreeSet<usize>,
    /// Positions newly added to the CPU store (GPU -> CPU transfer).
    pub newly_offloaded: BTreeSet<usize>,
    /// Positions entering the compressed tier this event.
    pub newly_compressed: BTreeSet<usize>,
}

/// Recompute tier boundaries: evict the bottom `evict_ratio` of the
/// non-protected candidates, keep the top `beta` share of the survivors in
/// HBM, and offload the remainder.
pub fn assign_tiers(
    scores: &ScoreVector,
    protected: &BTreeSet<usize>,
    cfg: &HierarchyConfig,
    state: &mut TierState,
) -> Result<TierAssignment, TierError> {
    // Candidates: live, non-protected positions sorted ascending by
    // (score, position).
    let mut candidates: Vec<usize> = Vec::new();
    for (&pos, &tier) in &state.tier_of {
        if tier == Tier::T3 || protected.contains(&pos) {
            continue;
        }
        if pos >= scores.s.len() {
            return Err(TierError::MissingScore(pos));
        }
        candidates.push(pos);
    }
    candidates.sort_by(|&a, &b| {
        scores.s[a].partial_cmp(&scores.s[b]).unwrap().then(a.cmp(&b))
    });

    let n_evict = (cfg.evict_ratio * candidates.len() as f64).floor() as usize;
    let mut out = TierAssignment::default();

    for &pos in &candidates[..n_evict] {
        state.tier_of.insert(pos, Tier::T3);
        state.cpu_store.remove(&pos);
        state.staging.remove(&pos);
        out.newly_evicted.insert(pos);
    }

    let survivors = &candidates[n_evict..];
    let n_hbm = (cfg.beta * survivors.len() as f64).floor() as usize;
    let split = survivors.len() - n_hbm;
    let (host_side, hbm_side) = survivors.split_at(split);

    for &pos in hbm_side {
        state.tier_of.insert(pos, Tier::T0);
        state.cpu_store.remove(&pos);
        state.staging.remove(&pos);
    }

    // Host-resident positions, ascending by score: the bottom t2_quantile
    // share goes to the compressed tier when enabled.
    let n_t2 = if cfg.t2_enabled {
        (cfg.t2_quantile * host_side.len() as f64).floor() as usize
    } else {
        0
    };
    for (rank, &pos) in host_side.iter().enumerate() {
        let tier = if rank < n_t2 { Tier::T2 } else { Tier::T1 };
        if rank < n_t2 && state.tier_of.get(&pos) != Some(&Tier::T2) {
            out.newly_compressed.insert(pos);
        }
        state.tier_of.insert(pos, tier);
        if state.cpu_store.insert(pos) {
            out.newly_offloaded.insert(pos);
        }
    }

    // Protected positions always sit in HBM.
    for &pos in protected {
        if let Some(t) = state.tier_of.get_mut(&pos) {
            if *t != Tier::T3 {
                *t = Tier::T0;
                state.cpu_store.remove(&pos);
                state.staging.remove(&pos);
            }
        }
    }

    Ok(out)
}

/// Differential prefetch: transfer only host-resident positions not yet in
/// the GPU staging buffer; afterwards the staging buffer mirrors the store.
pub fn differential_prefetch(state: &mut TierState, current_host: &BTreeSet<usize>) -> BTreeSet<usize> {
    let transfers: BTreeSet<usize> =
        current_host.difference(&state.staging).copied().collect();
    state.staging = current_host.clone();
    transfers
}

/// Per-step outcome of the decoding loop.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Host positions newly transferred to the staging buffer this step.
    pub prefetch_set: BTreeSet<usize>,
    /// Full CPU store size at prefetch time (non-differential transfer
    /// volume, per the baseline loop that prefetches the whole store).
    pub cpu_store_len: usize,
    /// Positions offloaded GPU -> CPU at a manage event (empty otherwise).
    pub offload_set: BTreeSet<usize>,
    pub evicted_now: BTreeSet<usize>,
    pub census: TierCensus,
}

/// Orchestrates the per-step decoding loop: prefetch accounting, score
/// update, and tier management at interval boundaries.
#[derive(Debug, Clone)]
pub struct TierManager {
    pub cfg: HierarchyConfig,
    pub state: TierState,
}

impl TierManager {
    pub fn new(cfg: HierarchyConfig) -> Self {
        let mut state = TierState::new();
        for p in 0..cfg.prompt_len {
            state.register(p);
        }
        Self { cfg, state }
    }

    /// Attention-visible positions (everything not permanently evicted).
    pub fn visible(&self) -> BTreeSet<usize> {
        self.state.visible()
    }

    /// Advance one decode step. `step` is 1-based; the caller passes the
    /// step's attention weights already restricted to the visible set.
    /// Manage events fire when `step % manage_interval == 0` (never at
    /// step 0).
    pub fn step(
        &mut self,
        scores: &mut ScoreVector,
        step_attn: &StepAttention,
        step: u64,
    ) -> Result<StepOutcome, TierError> {
        let new_pos = self.cfg.prompt_len + step as usize - 1;
        self.state.register(new_pos);
        self.state.step = step;

        let cpu_store_len = self.state.cpu_store.len();
        let host = self.state.cpu_store.clone();
        let prefetch_set = differential_prefetch(&mut self.state, &host);

        update_cumulative(scores, step_attn, step)?;

        let mut offload_set = BTreeSet::new();
        let mut evicted_now = BTreeSet::new();
        if step > 0 && step % self.cfg.manage_interval == 0 {
            let protected = protected_set(step, &self.cfg);
            let assignment = assign_tiers(scores, &protected, &self.cfg, &mut self.state)?;
            offload_set = assignment.newly_offloaded;
            evicted_now = assignment.newly_evicted;
        }

        Ok(StepOutcome {
            prefetch_set,
            cpu_store_len,
            offload_set,
            evicted_now,
            census: self.state.census(step),
        })
    }
}
