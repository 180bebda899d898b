//! Trace-driven experiment harness: hierarchy replay with per-step probe
//! outputs and error-bound audits, recall runs across retention policies,
//! and transfer-schedule extraction for overhead accounting.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::attention::{
    attention_weights, evicted_attention_output, eviction_error_bound, AttentionError,
};
use crate::baselines::{h2o_evict, random_evict, streaming_evict, BaselineError};
use crate::cost::{
    overhead_fraction, CostError, Direction, TransferEvent, TransferModelParams,
};
use crate::scoring::{update_cumulative, ScoreVector, ScoringError};
use crate::tier::{HierarchyConfig, StepOutcome, TierError, TierManager};
use crate::workload::{gen_longtail_uncalibrated, AttentionTrace, RecallTask, TraceShape};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tier(#[from] TierError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("trace shorter than requested run: {have} vs {want} steps")]
    TraceTooShort { have: usize, want: usize },
}

/// Retention policy under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// No eviction; the reference.
    Full,
    /// Tiered hierarchy with permanent bottom-ratio eviction.
    Hierarchy,
    /// Sinks plus recent window only.
    Streaming,
    /// Heavy hitters plus recent window.
    H2o,
    /// Uniform random retention (sinks and window kept).
    Random,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Full => "full",
            Policy::Hierarchy => "hierarchy",
            Policy::Streaming => "streaming",
            Policy::H2o => "h2o",
            Policy::Random => "random",
        }
    }
}

/// One audited manage event: measured output error against the analytic
/// eviction bound, both computed with the full-cache probe query.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheck {
    pub step: u64,
    pub measured_error: f64,
    pub bound: f64,
}

/// Result of replaying a trace through the tier hierarchy.
#[derive(Debug, Clone)]
pub struct HierarchyRun {
    pub outcomes: Vec<StepOutcome>,
    pub scores: ScoreVector,
    /// Per-step attention output over the surviving positions, probing
    /// with the newest position's key as query.
    pub probe_outputs: Vec<Vec<f64>>,
    pub bound_checks: Vec<BoundCheck>,
    pub final_visible: BTreeSet<usize>,
}

/// Replay a full-cache trace under the hierarchy: per-step restriction of
/// recorded weights to the surviving set, cumulative scoring, periodic
/// tier management, and (optionally) probe outputs plus bound audits.
pub fn replay_hierarchy(
    trace: &AttentionTrace,
    cfg: &HierarchyConfig,
    probe: bool,
) -> Result<HierarchyRun, ExperimentError> {
    let mut cfg = cfg.clone();
    cfg.prompt_len = trace.shape.prompt_len;
    let mut mgr = TierManager::new(cfg);
    let mut scores = ScoreVector::new();
    let mut outcomes = Vec::with_capacity(trace.steps.len());
    let mut probe_outputs = Vec::new();
    let mut bound_checks = Vec::new();

    for t in 1..=trace.shape.chain_len {
        let m = trace.shape.prompt_len + t;
        let new_pos = m - 1;
        let mut visible = mgr.visible();
        visible.insert(new_pos);
        let restricted = trace.steps[t - 1].restrict(&visible);
        let outcome = mgr.step(&mut scores, &restricted, t as u64)?;

        if probe {
            let visible_now = mgr.visible();
            let evicted: BTreeSet<usize> =
                (0..m).filter(|p| !visible_now.contains(p)).collect();
            let query = &trace.keys[new_pos];
            let keys = &trace.keys[..m];
            let values = &trace.values[..m];
            let out = evicted_attention_output(query, keys, values, &evicted)?;
            if !outcome.evicted_now.is_empty() {
                let full_weights = attention_weights(query, keys)?;
                let full_out = evicted_attention_output(query, keys, values, &BTreeSet::new())?;
                let err = full_out
                    .iter()
                    .zip(&out)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let bound = eviction_error_bound(&full_weights, values, &evicted)?;
                bound_checks.push(BoundCheck {
                    step: t as u64,
                    measured_error: err,
                    bound,
                });
            }
            probe_outputs.push(out);
        }
        outcomes.push(outcome);
    }
    let final_visible = mgr.visible();
    Ok(HierarchyRun { outcomes, scores, probe_outputs, bound_checks, final_visible })
}

/// Recall-task outcome for one policy at one budget.
#[derive(Debug, Clone)]
pub struct RecallOutcome {
    pub policy: Policy,
    pub budget_ratio: f64,
    pub hits: Vec<bool>,
    pub recall: f64,
}

fn relative_error(got: &[f64], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = want.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Run the needle-recall task under one retention policy. `budget_ratio`
/// scales the live-token budget for the eviction baselines; the hierarchy
/// runs its own configuration and ignores the ratio.
pub fn run_recall(
    trace: &AttentionTrace,
    task: &RecallTask,
    policy: Policy,
    budget_ratio: f64,
    cfg: &HierarchyConfig,
    seed: u64,
) -> Result<RecallOutcome, ExperimentError> {
    let shape = &trace.shape;
    let mut cfg = cfg.clone();
    cfg.prompt_len = shape.prompt_len;
    let mut mgr = TierManager::new(cfg.clone());
    let mut scores = ScoreVector::new();
    // Baseline state: currently kept positions (full cache to start).
    let mut kept: BTreeSet<usize> = (0..shape.prompt_len).collect();
    let mut hits = vec![false; task.needle_positions.len()];

    for t in 1..=shape.chain_len {
        let m = shape.prompt_len + t;
        let new_pos = m - 1;
        let step_attn = &trace.steps[t - 1];

        let visible: BTreeSet<usize> = match policy {
            Policy::Hierarchy => {
                let mut v = mgr.visible();
                v.insert(new_pos);
                let restricted = step_attn.restrict(&v);
                mgr.step(&mut scores, &restricted, t as u64)?;
                mgr.visible()
            }
            _ => {
                kept.insert(new_pos);
                let restricted = step_attn.restrict(&kept);
                update_cumulative(&mut scores, &restricted, t as u64)?;
                let budget = ((budget_ratio * m as f64).ceil() as usize).clamp(1, m);
                kept = match policy {
                    Policy::Full => (0..m).collect(),
                    Policy::Streaming => {
                        streaming_evict(m, budget, cfg.sink_size.min(budget.saturating_sub(1)))?
                    }
                    Policy::H2o => {
                        // Fall back to pure recency when the budget cannot
                        // cover the configured window.
                        let window = cfg.window_size.min(budget);
                        h2o_evict(&scores, m, budget, window)?
                    }
                    Policy::Random => {
                        random_evict(m, budget, cfg.sink_size, cfg.window_size, seed)?
                    }
                    Policy::Hierarchy => unreachable!(),
                };
                kept.clone()
            }
        };

        for (j, &(qs, needle, ref query)) in task.queries.iter().enumerate() {
            if qs != t as u64 {
                continue;
            }
            let evicted: BTreeSet<usize> = (0..m).filter(|p| !visible.contains(p)).collect();
            let out = evicted_attention_output(
                query,
                &trace.keys[..m],
                &trace.values[..m],
                &evicted,
            )?;
            hits[j] = relative_error(&out, &task.payloads[needle]) <= task.tolerance;
        }
    }
    let recall = hits.iter().filter(|h| **h).count() as f64 / hits.len().max(1) as f64;
    Ok(RecallOutcome { policy, budget_ratio, hits, recall })
}

/// Transfer schedule implied by a hierarchy run. Each decode step streams
/// the whole CPU store to the GPU for attention (the hierarchy's
/// steady-state fetch), and each manage event pushes the newly offloaded
/// positions out.
pub fn extract_schedule(outcomes: &[StepOutcome]) -> Vec<TransferEvent> {
    let mut schedule = Vec::new();
    for o in outcomes {
        if o.cpu_store_len > 0 {
            schedule.push(TransferEvent {
                tokens: o.cpu_store_len as u64,
                direction: Direction::CpuToGpu,
            });
        }
        if !o.offload_set.is_empty() {
            schedule.push(TransferEvent {
                tokens: o.offload_set.len() as u64,
                direction: Direction::GpuToCpu,
            });
        }
    }
    schedule
}

/// Differential variant: only the set difference against the staging
/// buffer moves each step.
pub fn extract_differential_schedule(outcomes: &[StepOutcome]) -> Vec<TransferEvent> {
    let mut schedule = Vec::new();
    for o in outcomes {
        if !o.prefetch_set.is_empty() {
            schedule.push(TransferEvent {
                tokens: o.prefetch_set.len() as u64,
                direction: Direction::CpuToGpu,
            });
        }
        if !o.offload_set.is_empty() {
            schedule.push(TransferEvent {
                tokens: o.offload_set.len() as u64,
                direction: Direction::GpuToCpu,
            });
        }
    }
    schedule
}

/// Defaults for the overhead estimate: decode throughput of 18.7 tokens/s
/// and a 1024-step run over a 64-token prompt.
pub const DEFAULT_PER_STEP_COMPUTE_S: f64 = 1.0 / 18.7;
pub const DEFAULT_OVERHEAD_CHAIN_LEN: usize = 1024;
pub const DEFAULT_OVERHEAD_PROMPT_LEN: usize = 64;

/// Overhead fraction of the default hierarchy schedule: replay a
/// single-layer long-tail trace, extract the per-step transfer schedule,
/// and weigh it against fixed per-step compute.
pub fn default_overhead_fraction(params: &TransferModelParams) -> Result<f64, ExperimentError> {
    let shape = TraceShape {
        n_layers: 1,
        n_heads: 1,
        head_dim: 8,
        prompt_len: DEFAULT_OVERHEAD_PROMPT_LEN,
        chain_len: DEFAULT_OVERHEAD_CHAIN_LEN,
    };
    let trace = gen_longtail_uncalibrated(&shape, 1.0, 11);
    let cfg = HierarchyConfig::default();
    let run = replay_hierarchy(&trace, &cfg, false)?;
    let schedule = extract_schedule(&run.outcomes);
    Ok(overhead_fraction(
        &schedule,
        DEFAULT_PER_STEP_COMPUTE_S,
        shape.chain_len as u64,
        params,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{gen_longtail_trace, gen_recall_task};

    fn small_shape() -> TraceShape {
        TraceShape { n_layers: 2, n_heads: 2, head_dim: 8, prompt_len: 16, chain_len: 192 }
    }

    #[test]
    fn replay_census_conserves_positions() {
        let trace = gen_longtail_uncalibrated(&small_shape(), 1.2, 3);
        let run = replay_hierarchy(&trace, &HierarchyConfig::default(), false).unwrap();
        for (i, o) in run.outcomes.iter().enumerate() {
            assert_eq!(o.census.total(), small_shape().prompt_len + i + 1);
        }
    }

    #[test]
    fn replay_with_zero_evict_ratio_keeps_everything() {
        let trace = gen_longtail_uncalibrated(&small_shape(), 1.2, 3);
        let cfg = HierarchyConfig { evict_ratio: 0.0, ..Default::default() };
        let run = replay_hierarchy(&trace, &cfg, true).unwrap();
        assert_eq!(run.final_visible.len(), small_shape().total_positions());
        assert!(run.bound_checks.is_empty());
        // Probe output must equal the full-cache reference bitwise.
        let m = small_shape().total_positions();
        let q = &trace.keys[m - 1];
        let reference = evicted_attention_output(
            q,
            &trace.keys[..m],
            &trace.values[..m],
            &BTreeSet::new(),
        )
        .unwrap();
        let probe = run.probe_outputs.last().unwrap();
        for (a, b) in reference.iter().zip(probe) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn replay_bound_checks_are_sound() {
        let trace = gen_longtail_uncalibrated(&small_shape(), 1.2, 5);
        let cfg = HierarchyConfig { evict_ratio: 0.2, ..Default::default() };
        let run = replay_hierarchy(&trace, &cfg, true).unwrap();
        assert!(!run.bound_checks.is_empty());
        for bc in &run.bound_checks {
            assert!(
                bc.measured_error <= bc.bound + 1e-12,
                "step {}: {} > {}",
                bc.step,
                bc.measured_error,
                bc.bound
            );
        }
    }

    #[test]
    fn partition_invariance_across_beta() {
        let shape = small_shape();
        let trace = gen_longtail_trace(&shape, 0.50, 7).unwrap();
        let runs: Vec<HierarchyRun> = [0.3, 0.5, 0.7]
            .iter()
            .map(|&beta| {
                let cfg = HierarchyConfig { beta, evict_ratio: 0.1, ..Default::default() };
                replay_hierarchy(&trace, &cfg, true).unwrap()
            })
            .collect();
        for other in &runs[1..] {
            assert_eq!(runs[0].final_visible, other.final_visible);
            for (a, b) in runs[0].probe_outputs.iter().zip(&other.probe_outputs) {
                for (x, y) in a.iter().zip(b) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        // Sanity: the partitions themselves differ.
        let census_lo = runs[0].outcomes.last().unwrap().census;
        let census_hi = runs[2].outcomes.last().unwrap().census;
        assert!(census_hi.t0 > census_lo.t0);
    }

    fn recall_fixture() -> (RecallTask, AttentionTrace) {
        let shape =
            TraceShape { n_layers: 1, n_heads: 1, head_dim: 8, prompt_len: 16, chain_len: 320 };
        gen_recall_task(&shape, 4, 19).unwrap()
    }

    #[test]
    fn full_policy_recalls_everything() {
        let (task, trace) = recall_fixture();
        let cfg = HierarchyConfig::default();
        let out = run_recall(&trace, &task, Policy::Full, 1.0, &cfg, 1).unwrap();
        assert_eq!(out.recall, 1.0);
    }

    #[test]
    fn streaming_at_half_budget_loses_needles() {
        let (task, trace) = recall_fixture();
        let cfg = HierarchyConfig::default();
        let out = run_recall(&trace, &task, Policy::Streaming, 0.5, &cfg, 1).unwrap();
        assert_eq!(out.recall, 0.0);
    }

    #[test]
    fn hierarchy_keeps_needles() {
        let (task, trace) = recall_fixture();
        let cfg = HierarchyConfig { beta: 0.5, evict_ratio: 0.10, ..Default::default() };
        let out = run_recall(&trace, &task, Policy::Hierarchy, 0.5, &cfg, 1).unwrap();
        assert_eq!(out.recall, 1.0);
    }

    #[test]
    fn h2o_keeps_heavy_hitter_needles() {
        let (task, trace) = recall_fixture();
        let cfg = HierarchyConfig::default();
        let out = run_recall(&trace, &task, Policy::H2o, 0.5, &cfg, 1).unwrap();
        assert_eq!(out.recall, 1.0);
    }

    #[test]
    fn schedule_extraction_counts_store_and_offloads() {
        let trace = gen_longtail_uncalibrated(&small_shape(), 1.2, 3);
        let run = replay_hierarchy(&trace, &HierarchyConfig::default(), false).unwrap();
        let schedule = extract_schedule(&run.outcomes);
        let expected_c2g: u64 =
            run.outcomes.iter().map(|o| o.cpu_store_len as u64).sum();
        let got_c2g: u64 = schedule
            .iter()
            .filter(|e| e.direction == Direction::CpuToGpu)
            .map(|e| e.tokens)
            .sum();
        assert_eq!(got_c2g, expected_c2g);
        let expected_g2c: u64 =
            run.outcomes.iter().map(|o| o.offload_set.len() as u64).sum();
        let got_g2c: u64 = schedule
            .iter()
            .filter(|e| e.direction == Direction::GpuToCpu)
            .map(|e| e.tokens)
            .sum();
        assert_eq!(got_g2c, expected_g2c);
    }

    #[test]
    fn differential_schedule_is_cheaper() {
        let trace = gen_longtail_uncalibrated(&small_shape(), 1.2, 3);
        let run = replay_hierarchy(&trace, &HierarchyConfig::default(), false).unwrap();
        let full: u64 = extract_schedule(&run.outcomes)
            .iter()
            .filter(|e| e.direction == Direction::CpuToGpu)
            .map(|e| e.tokens)
            .sum();
        let diff: u64 = extract_differential_schedule(&run.outcomes)
            .iter()
            .filter(|e| e.direction == Direction::CpuToGpu)
            .map(|e| e.tokens)
            .sum();
        assert!(diff <= full);
    }

    #[test]
    fn default_overhead_in_expected_band() {
        let params = TransferModelParams::pcie_default();
        let f = default_overhead_fraction(&params).unwrap();
        assert!((0.04..=0.08).contains(&f), "overhead {f}");
    }
}
