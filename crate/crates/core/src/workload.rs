//! Synthetic workload generation and trace persistence: long-tail
//! attention traces calibrated to a target top-20% concentration, a
//! needle-recall task with a mechanically verifiable cliff effect, and a
//! self-describing trace file format (binary plus a line-oriented textual
//! variant for fixtures).

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scoring::{update_cumulative, ScoreVector, StepAttention};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("concentration target {target} unreachable: attainable range [{lo:.4}, {hi:.4}]")]
    TargetUnreachable { target: f64, lo: f64, hi: f64 },
    #[error("zero total score mass")]
    ZeroMass,
    #[error("infeasible recall geometry: {0}")]
    InfeasibleGeometry(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("parse error at line {line}: {message}")]
    ParseText { line: usize, message: String },
}

/// Trace dimensions: layers, heads, head dimension, prompt length, and
/// generated chain length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub chain_len: usize,
}

impl TraceShape {
    /// Desk-scale default: small enough for full grid sweeps in seconds
    /// while still exercising multi-layer averaging.
    pub fn desk_default() -> Self {
        Self { n_layers: 4, n_heads: 4, head_dim: 8, prompt_len: 32, chain_len: 512 }
    }

    pub fn total_positions(&self) -> usize {
        self.prompt_len + self.chain_len
    }
}

/// A full recorded decode: per-step attention weights plus one
/// representative key and value vector per position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub shape: TraceShape,
    /// `steps[t]` covers positions `0..prompt_len + t + 1`.
    pub steps: Vec<StepAttention>,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Synthetic retrieval task: payload vectors parked early in the chain
/// that scheduled late queries must recover.
#[derive(Debug, Clone)]
pub struct RecallTask {
    pub needle_positions: Vec<usize>,
    pub payloads: Vec<Vec<f64>>,
    /// (1-based decode step, needle index, query vector).
    pub queries: Vec<(u64, usize, Vec<f64>)>,
    /// Relative output error below which a retrieval counts as recalled.
    pub tolerance: f64,
}

fn build_longtail(shape: &TraceShape, exponent: f64, seed: u64) -> AttentionTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.total_positions();

    // Zipf-like preference over a seed-fixed permutation of positions, so
    // high-mass positions are scattered through the chain.
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let keys: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..shape.head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    // Unit-norm values keep the eviction error bound applicable during
    // replay audits (it assumes a common value norm).
    let values: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> =
                (0..shape.head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let z = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / z).collect()
        })
        .collect();

    let pref: Vec<f64> = (0..n).map(|i| 1.0 / ((perm[i] + 1) as f64).powf(exponent)).collect();

    // Multiplicative jitter is drawn in a fixed order independent of the
    // exponent, so bisection over the exponent sees a fixed noise field.
    let mut steps = Vec::with_capacity(shape.chain_len);
    for t in 0..shape.chain_len {
        let m = shape.prompt_len + t + 1;
        let mut weights = Vec::with_capacity(shape.n_layers);
        for _ in 0..shape.n_layers {
            let mut rows = Vec::with_capacity(shape.n_heads);
            for _ in 0..shape.n_heads {
                let mut row: Vec<f64> =
                    (0..m).map(|i| pref[i] * rng.gen_range(0.5..1.5)).collect();
                let z: f64 = row.iter().sum();
                for w in &mut row {
                    *w /= z;
                }
                rows.push(row);
            }
            weights.push(rows);
        }
        steps.push(StepAttention {
            positions: (0..m).collect(),
            weights,
            nan_layers: BTreeSet::new(),
        });
    }
    AttentionTrace { shape: *shape, steps, keys, values }
}

/// Cumulative scores over a full (unevicted) trace replay.
pub fn cumulative_scores(trace: &AttentionTrace) -> ScoreVector {
    let mut scores = ScoreVector::new();
    for (t, step) in trace.steps.iter().enumerate() {
        update_cumulative(&mut scores, step, t as u64 + 1).expect("trace has valid layers");
    }
    scores
}

/// Share of total score mass captured by the top `quantile` fraction of
/// positions.
pub fn measure_concentration(scores: &ScoreVector, quantile: f64) -> Result<f64, WorkloadError> {
    if scores.is_empty() {
        return Err(WorkloadError::ZeroMass);
    }
    let total: f64 = scores.s.iter().sum();
    if total <= 0.0 {
        return Err(WorkloadError::ZeroMass);
    }
    let k = ((quantile * scores.len() as f64).ceil() as usize).clamp(1, scores.len());
    let mut sorted = scores.s.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted[..k].iter().sum::<f64>() / total)
}

fn top20_share(trace: &AttentionTrace) -> f64 {
    measure_concentration(&cumulative_scores(trace), 0.2).expect("generated trace has mass")
}

/// Generate a long-tail attention trace whose realized top-20% cumulative
/// score share hits `top20_target` within 0.005, by bisection on the
/// Zipf exponent. Deterministic per seed.
pub fn gen_longtail_trace(
    shape: &TraceShape,
    top20_target: f64,
    seed: u64,
) -> Result<AttentionTrace, WorkloadError> {
    let (mut lo, mut hi) = (0.0f64, 8.0f64);
    let share_lo = top20_share(&build_longtail(shape, lo, seed));
    let share_hi = top20_share(&build_longtail(shape, hi, seed));
    if top20_target < share_lo || top20_target > share_hi {
        return Err(WorkloadError::TargetUnreachable {
            target: top20_target,
            lo: share_lo,
            hi: share_hi,
        });
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let trace = build_longtail(shape, mid, seed);
        let share = top20_share(&trace);
        if (share - top20_target).abs() <= 0.005 {
            return Ok(trace);
        }
        if share < top20_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The exponent-to-share map is monotone, so landing here means the
    // interval collapsed without meeting the tolerance.
    Err(WorkloadError::TargetUnreachable { target: top20_target, lo: share_lo, hi: share_hi })
}

/// Exponent-to-share map for a fixed seed; exposed for calibration
/// diagnostics and monotonicity checks.
pub fn longtail_share_for_exponent(shape: &TraceShape, exponent: f64, seed: u64) -> f64 {
    top20_share(&build_longtail(shape, exponent, seed))
}

/// Long-tail trace at a fixed exponent without share calibration; cheap
/// path for large schedule-accounting runs where the exact concentration
/// is irrelevant.
pub fn gen_longtail_uncalibrated(shape: &TraceShape, exponent: f64, seed: u64) -> AttentionTrace {
    build_longtail(shape, exponent, seed)
}

/// Build a needle-recall task. Needle keys occupy reserved coordinates so
/// scheduled queries place >= 0.99 softmax mass on their needle whenever
/// it survives; distractor keys are zero in those coordinates.
pub fn gen_recall_task(
    shape: &TraceShape,
    n_needles: usize,
    seed: u64,
) -> Result<(RecallTask, AttentionTrace), WorkloadError> {
    let window = 128usize;
    let sink = 4usize;
    let n = shape.total_positions();
    let d = shape.head_dim;
    if n_needles == 0 || n_needles + 1 > d {
        return Err(WorkloadError::InfeasibleGeometry(format!(
            "need head_dim > n_needles ({d} vs {n_needles})"
        )));
    }
    let needle_positions: Vec<usize> =
        (0..n_needles).map(|j| shape.prompt_len + sink + j).collect();
    let query_steps: Vec<u64> =
        (0..n_needles).map(|j| (shape.chain_len - n_needles + j) as u64 + 1).collect();
    // Needles must sit outside the protected window at query time.
    for (&pos, &qs) in needle_positions.iter().zip(&query_steps) {
        let total_at_query = shape.prompt_len + qs as usize;
        if pos + window >= total_at_query {
            return Err(WorkloadError::InfeasibleGeometry(format!(
                "needle at {pos} still inside the recent window at step {qs}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut payloads = Vec::with_capacity(n_needles);
    for pos in 0..n {
        if let Some(j) = needle_positions.iter().position(|&p| p == pos) {
            let mut k = vec![0.0; d];
            k[j] = 1.0;
            keys.push(k);
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in &mut v {
                *x /= norm;
            }
            payloads.push(v.clone());
            values.push(v);
        } else {
            // Distractors live in the orthogonal complement of the
            // needle coordinates and carry low-norm values.
            let mut k = vec![0.0; d];
            for x in k.iter_mut().skip(n_needles) {
                *x = rng.gen_range(-1.0..1.0);
            }
            keys.push(k);
            values.push((0..d).map(|_| rng.gen_range(-0.05..0.05)).collect());
        }
    }

    // Query strength: needle logit s/sqrt(d) must dominate t-1 zero
    // logits by a factor of 99.
    let strength = (d as f64).sqrt() * (99.0 * n as f64).ln();
    let queries: Vec<(u64, usize, Vec<f64>)> = query_steps
        .iter()
        .enumerate()
        .map(|(j, &qs)| {
            let mut q = vec![0.0; d];
            q[j] = strength;
            (qs, j, q)
        })
        .collect();

    // Attention profile per step: fixed shares for prompt+sinks, the
    // needles, and the recent window; everything else gets a trace of
    // mass so no weight is exactly zero.
    let mut steps = Vec::with_capacity(shape.chain_len);
    for t in 0..shape.chain_len {
        let m = shape.prompt_len + t + 1;
        let mut row = vec![1e-9; m];
        let head = (shape.prompt_len + sink).min(m);
        for w in row.iter_mut().take(head) {
            *w += 0.1 / head as f64;
        }
        let live_needles: Vec<usize> =
            needle_positions.iter().copied().filter(|&p| p < m).collect();
        for &p in &live_needles {
            row[p] += 0.4 / live_needles.len().max(1) as f64;
        }
        let w_lo = m.saturating_sub(window);
        for w in row.iter_mut().take(m).skip(w_lo) {
            *w += 0.5 / (m - w_lo) as f64;
        }
        let z: f64 = row.iter().sum();
        for w in &mut row {
            *w /= z;
        }
        let weights = vec![vec![row; shape.n_heads]; shape.n_layers]
            .into_iter()
            .map(|l| l.to_vec())
            .collect();
        steps.push(StepAttention {
            positions: (0..m).collect(),
            weights,
            nan_layers: BTreeSet::new(),
        });
    }

    let task = RecallTask { needle_positions, payloads, queries, tolerance: 0.1 };
    let trace = AttentionTrace { shape: *shape, steps, keys, values };
    Ok((task, trace))
}

// ── Binary trace format ─────────────────────────────────────────────────
//
// magic "KVTRACE1", version u32, shape (L, H, d, P, T) as LE u64, then per
// step: a u64 NaN-layer bitmask followed by L*H rows of (P+t+1) LE f64,
// then (P+T)*d key and (P+T)*d value f64s.

const MAGIC: &[u8; 8] = b"KVTRACE1";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], WorkloadError> {
        if self.offset + n > self.buf.len() {
            return Err(WorkloadError::Parse {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WorkloadError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, WorkloadError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, WorkloadError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn save_trace(trace: &AttentionTrace, path: &Path) -> Result<(), WorkloadError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let s = &trace.shape;
    for v in [s.n_layers, s.n_heads, s.head_dim, s.prompt_len, s.chain_len] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for step in &trace.steps {
        let mut mask = 0u64;
        for &l in &step.nan_layers {
            mask |= 1 << l;
        }
        out.extend_from_slice(&mask.to_le_bytes());
        for layer in &step.weights {
            for row in layer {
                for w in row {
                    out.extend_from_slice(&w.to_le_bytes());
                }
            }
        }
    }
    for vecs in [&trace.keys, &trace.values] {
        for v in vecs.iter() {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<AttentionTrace, WorkloadError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, offset: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(WorkloadError::Parse { offset: 0, message: "bad magic bytes".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(WorkloadError::Parse {
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let n_layers = r.u64("n_layers")? as usize;
    let n_heads = r.u64("n_heads")? as usize;
    let head_dim = r.u64("head_dim")? as usize;
    let prompt_len = r.u64("prompt_len")? as usize;
    let chain_len = r.u64("chain_len")? as usize;
    if n_layers == 0 || n_layers > 64 || n_heads == 0 || head_dim == 0 {
        return Err(WorkloadError::Parse {
            offset: 12,
            message: format!("implausible shape: L={n_layers} H={n_heads} d={head_dim}"),
        });
    }
    let shape = TraceShape { n_layers, n_heads, head_dim, prompt_len, chain_len };

    let mut steps = Vec::with_capacity(chain_len);
    for t in 0..chain_len {
        let m = prompt_len + t + 1;
        let mask = r.u64("nan mask")?;
        let nan_layers: BTreeSet<usize> =
            (0..n_layers).filter(|l| mask & (1 << l) != 0).collect();
        let mut weights = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut rows = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let row_off = r.offset;
                let mut row = Vec::with_capacity(m);
                for _ in 0..m {
                    row.push(r.f64("weight")?);
                }
                if !nan_layers.contains(&l) {
                    let z: f64 = row.iter().sum();
                    if (z - 1.0).abs() > 1e-6 {
                        return Err(WorkloadError::Parse {
                            offset: row_off,
                            message: format!(
                                "non-simplex weight row (step {t}, layer {l}, head {h}): sum {z}"
                            ),
                        });
                    }
                }
                rows.push(row);
            }
            weights.push(rows);
        }
        steps.push(StepAttention { positions: (0..m).collect(), weights, nan_layers });
    }
    let n = prompt_len + chain_len;
    let mut tensors = Vec::with_capacity(2);
    for what in ["keys", "values"] {
        let mut vecs = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v = Vec::with_capacity(head_dim);
            for _ in 0..head_dim {
                v.push(r.f64(what)?);
            }
            vecs.push(v);
        }
        tensors.push(vecs);
    }
    let values = tensors.pop().unwrap();
    let keys = tensors.pop().unwrap();
    if r.offset != buf.len() {
        return Err(WorkloadError::Parse {
            offset: r.offset,
            message: format!("{} trailing bytes", buf.len() - r.offset),
        });
    }
    Ok(AttentionTrace { shape, steps, keys, values })
}

// ── Textual trace format (small fixtures) ───────────────────────────────

pub fn save_trace_text(trace: &AttentionTrace, path: &Path) -> Result<(), WorkloadError> {
    let mut out = String::new();
    let s = &trace.shape;
    out.push_str("kvtrace-text v1\n");
    out.push_str(&format!(
        "shape {} {} {} {} {}\n",
        s.n_layers, s.n_heads, s.head_dim, s.prompt_len, s.chain_len
    ));
    for (t, step) in trace.steps.iter().enumerate() {
        let nan = if step.nan_layers.is_empty() {
            "-".to_string()
        } else {
            step.nan_layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
        };
        out.push_str(&format!("step {t} nan {nan}\n"));
        for (l, layer) in step.weights.iter().enumerate() {
            for (h, row) in layer.iter().enumerate() {
                let vals: Vec<String> = row.iter().map(|w| format!("{w:e}")).collect();
                out.push_str(&format!("row {l} {h} {}\n", vals.join(" ")));
            }
        }
    }
    for (name, vecs) in [("keys", &trace.keys), ("values", &trace.values)] {
        out.push_str(name);
        out.push('\n');
        for v in vecs.iter() {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_trace_text(path: &Path) -> Result<AttentionTrace, WorkloadError> {
    let text = fs::read_to_string(path)?;
    let err = |line: usize, message: String| WorkloadError::ParseText { line: line + 1, message };
    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0usize;
    if lines.get(i).copied() != Some("kvtrace-text v1") {
        return Err(err(0, "missing kvtrace-text header".into()));
    }
    i += 1;
    let shape_parts: Vec<&str> =
        lines.get(i).ok_or_else(|| err(i, "missing shape line".into()))?.split_whitespace().collect();
    if shape_parts.len() != 6 || shape_parts[0] != "shape" {
        return Err(err(i, "malformed shape line".into()));
    }
    let dims: Vec<usize> = shape_parts[1..]
        .iter()
        .map(|p| p.parse().map_err(|_| err(i, format!("bad shape number {p}"))))
        .collect::<Result<_, _>>()?;
    let shape = TraceShape {
        n_layers: dims[0],
        n_heads: dims[1],
        head_dim: dims[2],
        prompt_len: dims[3],
        chain_len: dims[4],
    };
    i += 1;

    let mut steps = Vec::with_capacity(shape.chain_len);
    for t in 0..shape.chain_len {
        let m = shape.prompt_len + t + 1;
        let parts: Vec<&str> = lines
            .get(i)
            .ok_or_else(|| err(i, format!("missing step header for step {t}")))?
            .split_whitespace()
            .collect();
        if parts.len() != 4 || parts[0] != "step" || parts[2] != "nan" {
            return Err(err(i, format!("malformed step header for step {t}")));
        }
        let nan_layers: BTreeSet<usize> = if parts[3] == "-" {
            BTreeSet::new()
        } else {
            parts[3]
                .split(',')
                .map(|p| p.parse().map_err(|_| err(i, format!("bad NaN layer {p}"))))
                .collect::<Result<_, _>>()?
        };
        i += 1;
        let mut weights = vec![vec![Vec::new(); shape.n_heads]; shape.n_layers];
        for _ in 0..shape.n_layers * shape.n_heads {
            let parts: Vec<&str> = lines
                .get(i)
                .ok_or_else(|| err(i, "missing weight row".into()))?
                .split_whitespace()
                .collect();
            if parts.len() != 3 + m || parts[0] != "row" {
                return Err(err(i, format!("malformed weight row, expected {m} weights")));
            }
            let l: usize = parts[1].parse().map_err(|_| err(i, "bad layer index".into()))?;
            let h: usize = parts[2].parse().map_err(|_| err(i, "bad head index".into()))?;
            if l >= shape.n_layers || h >= shape.n_heads {
                return Err(err(i, format!("row index ({l},{h}) out of shape")));
            }
            let row: Vec<f64> = parts[3..]
                .iter()
                .map(|p| p.parse().map_err(|_| err(i, format!("bad weight {p}"))))
                .collect::<Result<_, _>>()?;
            if !nan_layers.contains(&l) {
                let z: f64 = row.iter().sum();
                if (z - 1.0).abs() > 1e-6 {
                    return Err(err(i, format!("non-simplex row: sum {z}")));
                }
            }
            weights[l][h] = row;
            i += 1;
        }
        steps.push(StepAttention { positions: (0..m).collect(), weights, nan_layers });
    }

    let n = shape.total_positions();
    let mut tensors: Vec<Vec<Vec<f64>>> = Vec::new();
    for name in ["keys", "values"] {
        if lines.get(i).copied() != Some(name) {
            return Err(err(i, format!("expected `{name}` section")));
        }
        i += 1;
        let mut vecs = Vec::with_capacity(n);
        for _ in 0..n {
            let parts: Vec<&str> = lines
                .get(i)
                .ok_or_else(|| err(i, format!("missing {name} row")))?
                .split_whitespace()
                .collect();
            if parts.len() != shape.head_dim {
                return Err(err(i, format!("expected {} components", shape.head_dim)));
            }
            let v: Vec<f64> = parts
                .iter()
                .map(|p| p.parse().map_err(|_| err(i, format!("bad value {p}"))))
                .collect::<Result<_, _>>()?;
            vecs.push(v);
            i += 1;
        }
        tensors.push(vecs);
    }
    let values = tensors.pop().unwrap();
    let keys = tensors.pop().unwrap();
    Ok(AttentionTrace { shape, steps, keys, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> TraceShape {
        TraceShape { n_layers: 2, n_heads: 2, head_dim: 4, prompt_len: 4, chain_len: 12 }
    }

    fn trace_bits(trace: &AttentionTrace) -> Vec<u64> {
        let mut bits = Vec::new();
        for step in &trace.steps {
            for layer in &step.weights {
                for row in layer {
                    bits.extend(row.iter().map(|w| w.to_bits()));
                }
            }
        }
        for vecs in [&trace.keys, &trace.values] {
            for v in vecs.iter() {
                bits.extend(v.iter().map(|x| x.to_bits()));
            }
        }
        bits
    }

    #[test]
    fn generator_is_deterministic_per_seed() {
        let shape = tiny_shape();
        let a = build_longtail(&shape, 1.3, 42);
        let b = build_longtail(&shape, 1.3, 42);
        assert_eq!(trace_bits(&a), trace_bits(&b));
        let c = build_longtail(&shape, 1.3, 43);
        assert_ne!(trace_bits(&a), trace_bits(&c));
    }

    #[test]
    fn exponent_share_map_is_monotone() {
        let shape = TraceShape { chain_len: 128, ..tiny_shape() };
        let mut prev = 0.0;
        for step in 0..=10 {
            let a = step as f64 * 0.8;
            let share = longtail_share_for_exponent(&shape, a, 7);
            assert!(share >= prev - 1e-6, "share dipped at exponent {a}");
            prev = share;
        }
    }

    #[test]
    fn near_uniform_limit_at_zero_exponent() {
        let shape = TraceShape { chain_len: 128, ..tiny_shape() };
        let share = longtail_share_for_exponent(&shape, 0.0, 3);
        // Cumulative scoring biases early positions (they are visible at
        // every step), so the uniform limit sits well above 0.2 — but it
        // must stay clearly below the concentrated regime.
        let concentrated = longtail_share_for_exponent(&shape, 3.0, 3);
        assert!(share > 0.2, "share {share}");
        assert!(share + 0.1 < concentrated, "share {share} vs {concentrated}");
    }

    #[test]
    fn default_target_calibrates_within_tolerance() {
        let shape = TraceShape { chain_len: 512, ..tiny_shape() };
        for seed in [1u64, 2, 3] {
            let trace = gen_longtail_trace(&shape, 0.565, seed).unwrap();
            let share = top20_share(&trace);
            assert!((0.555..=0.575).contains(&share), "seed {seed}: share {share}");
        }
    }

    #[test]
    fn unreachable_target_rejected() {
        // Age bias keeps the zero-exponent share well above 0.05, so a
        // target below it can never be bisected to.
        let shape = tiny_shape();
        assert!(matches!(
            gen_longtail_trace(&shape, 0.05, 1),
            Err(WorkloadError::TargetUnreachable { .. })
        ));
    }

    #[test]
    fn concentration_uniform_scores() {
        let scores = ScoreVector { s: vec![1.0; 10], last_updated_step: 0 };
        let share = measure_concentration(&scores, 0.2).unwrap();
        assert!((share - 0.2).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn concentration_one_hot() {
        let mut s = vec![0.0; 20];
        s[7] = 5.0;
        let scores = ScoreVector { s, last_updated_step: 0 };
        assert_eq!(measure_concentration(&scores, 0.2).unwrap(), 1.0);
        assert_eq!(measure_concentration(&scores, 0.05).unwrap(), 1.0);
    }

    #[test]
    fn concentration_matches_sort_prefix_oracle() {
        use rand::prelude::*;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let s: Vec<f64> = (0..37).map(|_| rng.gen_range(0.0..2.0)).collect();
        let scores = ScoreVector { s: s.clone(), last_updated_step: 0 };
        let got = measure_concentration(&scores, 0.3).unwrap();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = (0.3f64 * 37.0).ceil() as usize;
        let expect = sorted[..k].iter().sum::<f64>() / s.iter().sum::<f64>();
        assert!((got - expect).abs() < 1e-12);
        let zero = ScoreVector { s: vec![0.0; 4], last_updated_step: 0 };
        assert!(matches!(measure_concentration(&zero, 0.2), Err(WorkloadError::ZeroMass)));
    }

    #[test]
    fn recall_geometry_gives_dominant_needle_mass() {
        let shape = TraceShape { n_layers: 1, n_heads: 1, head_dim: 8, prompt_len: 8, chain_len: 256 };
        let (task, trace) = gen_recall_task(&shape, 4, 5).unwrap();
        for (qs, j, q) in &task.queries {
            let m = shape.prompt_len + *qs as usize;
            let keys = &trace.keys[..m];
            let w = crate::attention::attention_weights(q, keys).unwrap();
            let mass = w[task.needle_positions[*j]];
            assert!(mass >= 0.99, "needle {j} mass {mass}");
        }
    }

    #[test]
    fn recall_infeasible_geometry_rejected() {
        let shape = TraceShape { n_layers: 1, n_heads: 1, head_dim: 8, prompt_len: 4, chain_len: 64 };
        assert!(matches!(
            gen_recall_task(&shape, 2, 1),
            Err(WorkloadError::InfeasibleGeometry(_))
        ));
    }

    #[test]
    fn binary_roundtrip_is_bitwise() {
        let dir = std::env::temp_dir().join("kvtier-test-bin");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.kvt");
        let trace = build_longtail(&tiny_shape(), 1.1, 9);
        save_trace(&trace, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(trace_bits(&trace), trace_bits(&back));
        assert_eq!(trace.shape, back.shape);
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = std::env::temp_dir().join("kvtier-test-trunc");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.kvt");
        let trace = build_longtail(&tiny_shape(), 1.1, 9);
        save_trace(&trace, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 11);
        fs::write(&path, &bytes).unwrap();
        match load_trace(&path) {
            Err(WorkloadError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = std::env::temp_dir().join("kvtier-test-magic");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.kvt");
        fs::write(&path, b"NOTATRACEFILE___").unwrap();
        assert!(matches!(load_trace(&path), Err(WorkloadError::Parse { offset: 0, .. })));
    }

    #[test]
    fn text_fixture_parses_to_expected_tensors() {
        // Hand-written 2-step, 1-layer, 1-head fixture.
        let dir = std::env::temp_dir().join("kvtier-test-text");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("fixture.kvtt");
        let fixture = "kvtrace-text v1\n\
                       shape 1 1 2 1 2\n\
                       step 0 nan -\n\
                       row 0 0 0.25 0.75\n\
                       step 1 nan -\n\
                       row 0 0 0.5 0.25 0.25\n\
                       keys\n\
                       1 0\n\
                       0 1\n\
                       0.5 0.5\n\
                       values\n\
                       2 0\n\
                       0 2\n\
                       1 1\n";
        fs::write(&path, fixture).unwrap();
        let trace = load_trace_text(&path).unwrap();
        assert_eq!(trace.shape.chain_len, 2);
        assert_eq!(trace.steps[0].weights[0][0], vec![0.25, 0.75]);
        assert_eq!(trace.steps[1].weights[0][0], vec![0.5, 0.25, 0.25]);
        assert_eq!(trace.keys[2], vec![0.5, 0.5]);
        assert_eq!(trace.values[1], vec![0.0, 2.0]);
    }

    #[test]
    fn text_roundtrip() {
        let dir = std::env::temp_dir().join("kvtier-test-text-rt");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.kvtt");
        let shape = TraceShape { n_layers: 1, n_heads: 2, head_dim: 3, prompt_len: 2, chain_len: 4 };
        let trace = build_longtail(&shape, 0.9, 21);
        save_trace_text(&trace, &path).unwrap();
        let back = load_trace_text(&path).unwrap();
        assert_eq!(trace_bits(&trace), trace_bits(&back));
    }

    #[test]
    fn non_simplex_row_rejected() {
        let dir = std::env::temp_dir().join("kvtier-test-simplex");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.kvtt");
        let fixture = "kvtrace-text v1\n\
                       shape 1 1 2 0 1\n\
                       step 0 nan -\n\
                       row 0 0 0.9\n\
                       keys\n\
                       1 0\n\
                       values\n\
                       1 0\n";
        fs::write(&path, fixture).unwrap();
        assert!(matches!(load_trace_text(&path), Err(WorkloadError::ParseText { .. })));
    }
}
