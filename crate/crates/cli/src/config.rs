//! TOML configuration schemas for the subcommands.

use serde::Deserialize;

use kvtier::cost::ModelShape;
use kvtier::tier::HierarchyConfig;
use kvtier::workload::TraceShape;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub chain_len: usize,
    #[serde(default = "default_top20_target")]
    pub top20_target: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_top20_target() -> f64 {
    0.565
}

fn default_seed() -> u64 {
    1
}

impl TraceSection {
    pub fn shape(&self) -> TraceShape {
        TraceShape {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            prompt_len: self.prompt_len,
            chain_len: self.chain_len,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchySection {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_evict_ratio")]
    pub evict_ratio: f64,
    #[serde(default)]
    pub t2_enabled: bool,
}

fn default_beta() -> f64 {
    0.5
}

fn default_evict_ratio() -> f64 {
    0.05
}

impl HierarchySection {
    pub fn to_config(&self, prompt_len: usize) -> HierarchyConfig {
        HierarchyConfig {
            beta: self.beta,
            evict_ratio: self.evict_ratio,
            t2_enabled: self.t2_enabled,
            prompt_len,
            ..Default::default()
        }
    }
}

impl Default for HierarchySection {
    fn default() -> Self {
        Self { beta: default_beta(), evict_ratio: default_evict_ratio(), t2_enabled: false }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub trace: TraceSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub trace: TraceSection,
    pub grid: GridSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub betas: Vec<f64>,
    pub evict_ratios: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallConfig {
    pub task: RecallTaskSection,
    pub recall: RecallSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallTaskSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub prompt_len: usize,
    pub chain_len: usize,
    pub n_needles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl RecallTaskSection {
    pub fn shape(&self) -> TraceShape {
        TraceShape {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            prompt_len: self.prompt_len,
            chain_len: self.chain_len,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallSection {
    pub policies: Vec<String>,
    pub budget_ratios: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_evict_ratio")]
    pub evict_ratio: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    0.95
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostsConfig {
    pub transfer: TransferSection,
    #[serde(default)]
    pub scenario: Vec<ScenarioSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub token_counts: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub label: String,
    pub n_layers: u64,
    pub n_kv_heads: u64,
    pub head_dim: u64,
    pub bytes_per_element: u64,
    pub batch_size: u64,
    pub seq_len: u64,
    pub weight_bytes: u64,
    pub offload_fraction: f64,
}

impl ScenarioSection {
    pub fn shape(&self) -> ModelShape {
        ModelShape::new(self.n_layers, self.n_kv_heads, self.head_dim, self.bytes_per_element)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensusConfig {
    pub trace: TraceSection,
    #[serde(default)]
    pub hierarchy: HierarchySection,
}
