//! Importance-scoring policies for cached positions: cumulative attention
//! (the default), VATP-style value-norm weighting, redundancy penalties,
//! windowed joint importance-redundancy scoring, finite-difference gradient
//! scoring, and Spearman rank correlation between scorers.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::attention::{attention_output, l2_norm};

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("no valid layers: every layer is NaN-flagged")]
    NoValidLayers,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("undefined correlation: input has zero rank variance")]
    UndefinedCorrelation,
    #[error("non-finite loss value")]
    NonFiniteLoss,
    #[error("need at least {needed} positions, got {got}")]
    TooFewPositions { needed: usize, got: usize },
}

/// Cumulative per-position importance. Indexed by absolute position; grows
/// as new tokens appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreVector {
    pub s: Vec<f64>,
    pub last_updated_step: u64,
}

impl ScoreVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Positions sorted ascending by score, ties broken by position
    /// ascending (older tokens sort lower and are evicted first).
    pub fn argsort_ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.s.len()).collect();
        idx.sort_by(|&a, &b| self.s[a].partial_cmp(&self.s[b]).unwrap().then(a.cmp(&b)));
        idx
    }
}

/// One decode step's attention weights, per layer and head, over the listed
/// cache positions. `nan_layers` marks layers excluded from scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAttention {
    /// Absolute cache positions the weight rows cover, ascending.
    pub positions: Vec<usize>,
    /// `[layer][head][position index]`, aligned with `positions`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub nan_layers: BTreeSet<usize>,
}

impl StepAttention {
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_heads(&self) -> usize {
        self.weights.first().map_or(0, |l| l.len())
    }

    /// Restrict to `visible` positions, renormalizing each (layer, head)
    /// row over the survivors. NaN-flagged layers are carried through
    /// untouched.
    pub fn restrict(&self, visible: &BTreeSet<usize>) -> StepAttention {
        let keep: Vec<usize> = self
            .positions
            .iter()
            .enumerate()
            .filter(|(_, p)| visible.contains(p))
            .map(|(i, _)| i)
            .collect();
        let positions: Vec<usize> = keep.iter().map(|&i| self.positions[i]).collect();
        let mut weights = Vec::with_capacity(self.weights.len());
        for (l, layer) in self.weights.iter().enumerate() {
            let mut rows = Vec::with_capacity(layer.len());
            for row in layer {
                let mut restricted: Vec<f64> = keep.iter().map(|&i| row[i]).collect();
                if !self.nan_layers.contains(&l) {
                    let z: f64 = restricted.iter().sum();
                    if z > 0.0 {
                        for w in &mut restricted {
                            *w /= z;
                        }
                    }
                }
                rows.push(restricted);
            }
            weights.push(rows);
        }
        StepAttention { positions, weights, nan_layers: self.nan_layers.clone() }
    }
}

/// Parameters for the windowed joint importance-redundancy scorer.
#[derive(Debug, Clone)]
pub struct RkvParams {
    /// Balance between importance and redundancy, in [0, 1].
    pub lambda: f64,
    /// Number of most recent observation steps used for importance.
    pub alpha_window: usize,
    /// Odd max-pool kernel width over positions.
    pub pool_kernel: usize,
}

impl Default for RkvParams {
    fn default() -> Self {
        Self { lambda: 0.07, alpha_window: 8, pool_kernel: 7 }
    }
}

/// Add one step of layer/head-averaged attention mass into the cumulative
/// scores. Layers listed in `nan_layers` are excluded from the average;
/// positions not yet tracked enter with prior score zero.
pub fn update_cumulative(
    scores: &mut ScoreVector,
    step_attn: &StepAttention,
    step: u64,
) -> Result<(), ScoringError> {
    let valid: Vec<usize> = (0..step_attn.weights.len())
        .filter(|l| !step_attn.nan_layers.contains(l))
        .collect();
    if valid.is_empty() {
        return Err(ScoringError::NoValidLayers);
    }
    let max_pos = step_attn.positions.iter().copied().max().unwrap_or(0);
    if scores.s.len() <= max_pos {
        scores.s.resize(max_pos + 1, 0.0);
    }
    let n_heads = step_attn.n_heads();
    let denom = (valid.len() * n_heads) as f64;
    for (idx, &pos) in step_attn.positions.iter().enumerate() {
        let mut acc = 0.0;
        for &l in &valid {
            for row in &step_attn.weights[l] {
                acc += row[idx];
            }
        }
        scores.s[pos] += acc / denom;
    }
    scores.last_updated_step = step;
    Ok(())
}

/// VATP-style scores: cumulative attention times per-position value norm.
pub fn score_vatp(cumulative: &ScoreVector, value_norms: &[f64]) -> Result<ScoreVector, ScoringError> {
    if cumulative.s.len() != value_norms.len() {
        return Err(ScoringError::LengthMismatch {
            left: cumulative.s.len(),
            right: value_norms.len(),
        });
    }
    let s = cumulative.s.iter().zip(value_norms).map(|(a, n)| a * n).collect();
    Ok(ScoreVector { s, last_updated_step: cumulative.last_updated_step })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut d = 0.0;
    for (x, y) in a.iter().zip(b) {
        d += x * y;
    }
    d / (na * nb)
}

/// Max cosine similarity between each position's key and its immediate
/// neighbors (previous and next, where they exist).
pub fn neighbor_redundancy(keys: &[Vec<f64>]) -> Vec<f64> {
    let n = keys.len();
    (0..n)
        .map(|i| {
            let mut r = f64::NEG_INFINITY;
            if i > 0 {
                r = r.max(cosine(&keys[i], &keys[i - 1]));
            }
            if i + 1 < n {
                r = r.max(cosine(&keys[i], &keys[i + 1]));
            }
            if r == f64::NEG_INFINITY {
                0.0
            } else {
                r
            }
        })
        .collect()
}

/// Redundancy-penalized scores: `base[i] - R_i` where `R_i` is the max
/// cosine similarity to the immediate neighbors.
pub fn score_redundancy(keys: &[Vec<f64>], base: &ScoreVector) -> Result<ScoreVector, ScoringError> {
    if keys.len() != base.s.len() {
        return Err(ScoringError::LengthMismatch { left: keys.len(), right: base.s.len() });
    }
    let r = neighbor_redundancy(keys);
    let s = base.s.iter().zip(&r).map(|(b, r)| b - r).collect();
    Ok(ScoreVector { s, last_updated_step: base.last_updated_step })
}

/// Combined variant: `base[i] * ||v_i|| - R_i`.
pub fn score_combined(
    keys: &[Vec<f64>],
    base: &ScoreVector,
    value_norms: &[f64],
) -> Result<ScoreVector, ScoringError> {
    let vatp = score_vatp(base, value_norms)?;
    score_redundancy(keys, &vatp)
}

/// Windowed joint importance-redundancy score
/// `Z_i = lambda * I_i - (1 - lambda) * R_i`.
///
/// `I_i` max-pools (centered kernel, edge-truncated) the mean attention the
/// last `alpha_window` observation steps paid to position `i`; `R_i` is the
/// max cosine similarity of key `i` to any other candidate key. If fewer
/// steps than `alpha_window` are available, all available steps are used.
pub fn score_rkv(
    recent: &[StepAttention],
    keys: &[Vec<f64>],
    params: &RkvParams,
) -> Result<ScoreVector, ScoringError> {
    if recent.is_empty() {
        return Err(ScoringError::TooFewPositions { needed: 1, got: 0 });
    }
    assert!(params.pool_kernel % 2 == 1, "pool_kernel must be odd");
    let n = keys.len();
    let window = &recent[recent.len().saturating_sub(params.alpha_window)..];

    // Mean layer/head-averaged attention per position across the window.
    let mut mean_attn = vec![0.0; n];
    for step in window {
        let valid: Vec<usize> =
            (0..step.weights.len()).filter(|l| !step.nan_layers.contains(l)).collect();
        if valid.is_empty() {
            return Err(ScoringError::NoValidLayers);
        }
        let denom = (valid.len() * step.n_heads()) as f64;
        for (idx, &pos) in step.positions.iter().enumerate() {
            if pos >= n {
                return Err(ScoringError::LengthMismatch { left: pos + 1, right: n });
            }
            let mut acc = 0.0;
            for &l in &valid {
                for row in &step.weights[l] {
                    acc += row[idx];
                }
            }
            mean_attn[pos] += acc / denom;
        }
    }
    for m in &mut mean_attn {
        *m /= window.len() as f64;
    }

    // Centered max-pool over positions, truncated at the edges.
    let half = params.pool_kernel / 2;
    let importance: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            mean_attn[lo..=hi].iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();

    // Redundancy against every other candidate key.
    let redundancy: Vec<f64> = (0..n)
        .map(|i| {
            let mut r = f64::NEG_INFINITY;
            for j in 0..n {
                if j != i {
                    r = r.max(cosine(&keys[i], &keys[j]));
                }
            }
            if r == f64::NEG_INFINITY {
                0.0
            } else {
                r
            }
        })
        .collect();

    let s = importance
        .iter()
        .zip(&redundancy)
        .map(|(i, r)| params.lambda * i - (1.0 - params.lambda) * r)
        .collect();
    Ok(ScoreVector { s, last_updated_step: 0 })
}

/// Gradient-based importance via central finite differences on a toy
/// attention instance: `score[i] = ||dL/dk_i|| + ||dL/dv_i||` with the loss
/// evaluated on the attention output.
pub fn score_gradient_fd(
    query: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    loss: &dyn Fn(&[f64]) -> f64,
) -> Result<ScoreVector, ScoringError> {
    const H: f64 = 1e-5;
    let t = keys.len();
    let d = query.len();
    let eval = |keys: &[Vec<f64>], values: &[Vec<f64>]| -> Result<f64, ScoringError> {
        let out = attention_output(query, keys, values)
            .map_err(|_| ScoringError::LengthMismatch { left: keys.len(), right: values.len() })?;
        let l = loss(&out);
        if l.is_finite() {
            Ok(l)
        } else {
            Err(ScoringError::NonFiniteLoss)
        }
    };
    let mut s = Vec::with_capacity(t);
    let mut k_work = keys.to_vec();
    let mut v_work = values.to_vec();
    for i in 0..t {
        let mut gk2 = 0.0;
        for j in 0..d {
            let orig = k_work[i][j];
            k_work[i][j] = orig + H;
            let lp = eval(&k_work, values)?;
            k_work[i][j] = orig - H;
            let lm = eval(&k_work, values)?;
            k_work[i][j] = orig;
            let g = (lp - lm) / (2.0 * H);
            gk2 += g * g;
        }
        let mut gv2 = 0.0;
        for j in 0..d {
            let orig = v_work[i][j];
            v_work[i][j] = orig + H;
            let lp = eval(keys, &v_work)?;
            v_work[i][j] = orig - H;
            let lm = eval(keys, &v_work)?;
            v_work[i][j] = orig;
            let g = (lp - lm) / (2.0 * H);
            gv2 += g * g;
        }
        s.push(gk2.sqrt() + gv2.sqrt());
    }
    Ok(ScoreVector { s, last_updated_step: 0 })
}

/// Average ranks with tie averaging (1-based).
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, ScoringError> {
    if a.len() != b.len() {
        return Err(ScoringError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.len() < 2 {
        return Err(ScoringError::TooFewPositions { needed: 2, got: a.len() });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(ScoringError::UndefinedCorrelation);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}
