//! Analytical transfer-latency, bandwidth, overhead-fraction, and
//! HBM-savings projections.
//!
//! Latencies are held internally in integer picoseconds so that the
//! above-saturation linearity of the model is exact, not merely within
//! floating-point tolerance.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("calibration points must have distinct token counts")]
    DegenerateCalibration,
    #[error("zero total time: empty schedule and zero compute")]
    ZeroDenominator,
}

/// Transfer direction across the PCIe link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    GpuToCpu,
    CpuToGpu,
}

/// KV tensor shape of the modeled deployment.
#[derive(Debug, Clone, Copy)]
pub struct ModelShape {
    pub n_layers: u64,
    /// KV heads; distinct from attention heads under grouped-query
    /// attention.
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
}

impl ModelShape {
    pub const fn new(n_layers: u64, n_kv_heads: u64, head_dim: u64, bytes_per_element: u64) -> Self {
        Self { n_layers, n_kv_heads, head_dim, bytes_per_element }
    }
}

/// Bytes of KV cache per token: keys and values across all layers and KV
/// heads.
pub fn per_token_kv_bytes(shape: &ModelShape) -> u64 {
    2 * shape.n_layers * shape.n_kv_heads * shape.head_dim * shape.bytes_per_element
}

const PS_PER_SECOND: f64 = 1e12;

/// One direction of the link: a fixed per-transfer latency plus a linear
/// per-token cost, with bandwidth ramping linearly below the saturation
/// token count (so small transfers pay the full saturated-latency floor).
#[derive(Debug, Clone, Copy)]
pub struct DirectionParams {
    pub fixed_latency_ps: u64,
    pub cost_per_token_ps: u64,
}

impl DirectionParams {
    /// Fit fixed latency and per-token cost from two measured
    /// (tokens, seconds) points.
    pub fn from_points(p1: (u64, f64), p2: (u64, f64)) -> Result<Self, CostError> {
        if p1.0 == p2.0 {
            return Err(CostError::DegenerateCalibration);
        }
        let ((t1, l1), (t2, l2)) = if p1.0 < p2.0 { (p1, p2) } else { (p2, p1) };
        let per_token = (l2 - l1) / (t2 - t1) as f64;
        let fixed = l1 - t1 as f64 * per_token;
        Ok(Self {
            fixed_latency_ps: (fixed.max(0.0) * PS_PER_SECOND).round() as u64,
            cost_per_token_ps: (per_token.max(0.0) * PS_PER_SECOND).round() as u64,
        })
    }

    /// Effective saturated bandwidth implied by a per-token byte size.
    pub fn bandwidth_bytes_per_s(&self, per_token_bytes: u64) -> f64 {
        per_token_bytes as f64 / (self.cost_per_token_ps as f64 / PS_PER_SECOND)
    }
}

/// Direction-asymmetric transfer model.
#[derive(Debug, Clone, Copy)]
pub struct TransferModelParams {
    pub gpu_to_cpu: DirectionParams,
    pub cpu_to_gpu: DirectionParams,
    /// Token count below which bandwidth ramps linearly.
    pub saturation_tokens: u64,
}

impl TransferModelParams {
    /// Default calibration from the measured PCIe points: 64 tokens at
    /// 1.1 ms / 600 tokens at 8.6 ms GPU->CPU, and 1.5 ms / 13.1 ms
    /// CPU->GPU, with saturation at 64 tokens.
    pub fn pcie_default() -> Self {
        Self {
            gpu_to_cpu: DirectionParams::from_points((64, 1.1e-3), (600, 8.6e-3)).unwrap(),
            cpu_to_gpu: DirectionParams::from_points((64, 1.5e-3), (600, 13.1e-3)).unwrap(),
            saturation_tokens: 64,
        }
    }

    pub fn direction(&self, dir: Direction) -> &DirectionParams {
        match dir {
            Direction::GpuToCpu => &self.gpu_to_cpu,
            Direction::CpuToGpu => &self.cpu_to_gpu,
        }
    }
}

/// Transfer latency in integer picoseconds; exact arithmetic, so the
/// marginal cost above saturation is exactly constant.
pub fn transfer_latency_ps(tokens: u64, direction: Direction, params: &TransferModelParams) -> u128 {
    let dp = params.direction(direction);
    if tokens == 0 {
        return dp.fixed_latency_ps as u128;
    }
    // Below saturation, bandwidth scales with tokens/saturation, so the
    // data time is constant at the saturated cost of a full-interval
    // transfer.
    let data_ps = if tokens < params.saturation_tokens {
        params.saturation_tokens as u128 * dp.cost_per_token_ps as u128
    } else {
        tokens as u128 * dp.cost_per_token_ps as u128
    };
    dp.fixed_latency_ps as u128 + data_ps
}

/// Transfer latency in seconds.
pub fn transfer_latency(tokens: u64, direction: Direction, params: &TransferModelParams) -> f64 {
    transfer_latency_ps(tokens, direction, params) as f64 / PS_PER_SECOND
}

/// One scheduled transfer: a token batch in one direction.
#[derive(Debug, Clone, Copy)]
pub struct TransferEvent {
    pub tokens: u64,
    pub direction: Direction,
}

/// Fraction of total time spent on transfers for a schedule of events
/// alongside `n_steps` of fixed per-step compute. Zero-token events cost
/// nothing (no transfer is issued).
pub fn overhead_fraction(
    schedule: &[TransferEvent],
    per_step_compute: f64,
    n_steps: u64,
    params: &TransferModelParams,
) -> Result<f64, CostError> {
    let mut transfer = 0.0;
    for ev in schedule {
        if ev.tokens == 0 {
            continue;
        }
        transfer += transfer_latency(ev.tokens, ev.direction, params);
    }
    let compute = per_step_compute * n_steps as f64;
    let total = transfer + compute;
    if total <= 0.0 {
        if transfer == 0.0 && compute == 0.0 && !schedule.is_empty() {
            return Ok(0.0);
        }
        return Err(CostError::ZeroDenominator);
    }
    Ok(transfer / total)
}

/// A deployment configuration for memory projections.
#[derive(Debug, Clone)]
pub struct DeploymentScenario {
    pub label: String,
    pub shape: ModelShape,
    pub batch_size: u64,
    pub seq_len: u64,
    pub weight_bytes: u64,
    /// Fraction of the KV cache held off-HBM.
    pub offload_fraction: f64,
}

/// Projected KV footprint for a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub kv_bytes: u64,
    /// KV share of (KV + weights).
    pub kv_fraction: f64,
    pub savings_bytes: u64,
}

pub fn scaling_projection(scenario: &DeploymentScenario) -> Projection {
    let kv = per_token_kv_bytes(&scenario.shape) * scenario.seq_len * scenario.batch_size;
    let total = kv + scenario.weight_bytes;
    let fraction = if total == 0 { 0.0 } else { kv as f64 / total as f64 };
    let savings = (scenario.offload_fraction * kv as f64).round() as u64;
    Projection { kv_bytes: kv, kv_fraction: fraction, savings_bytes: savings }
}
