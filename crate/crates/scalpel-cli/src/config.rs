//! Pruning run configuration: JSON config file, flag overrides, and the
//! fully resolved record echoed into every run log.

use serde::{Deserialize, Serialize};

use scalpel_core::costs::CostPolicy;
use scalpel_core::harness::DataConfig;
use scalpel_core::selection::PruneMode;
use scalpel_core::surgeon::{LoraSettings, PruneSettings};
use scalpel_core::updates::{UpdateKind, UpdatePolicy};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub enabled: bool,
    pub rank: usize,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        let d = LoraSettings::default();
        LoraConfig {
            enabled: d.enabled,
            rank: d.rank,
            steps: d.steps,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seq_len: usize,
    pub batch_size: usize,
    pub max_batches: usize,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DataConfig::default();
        DataSection {
            seq_len: d.seq_len,
            batch_size: d.batch_size,
            max_batches: d.max_batches,
            test_fraction: d.test_fraction,
        }
    }
}

/// The on-disk config schema. `shots` and `damp_frac_g` default by mode when
/// omitted (structured: 10 shots, damp 0.1; otherwise 5 shots, damp 0.01).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub mode: PruneMode,
    pub alpha: f64,
    pub shots: Option<usize>,
    pub policy: CostPolicy,
    pub update: UpdateKind,
    pub max_correlated: usize,
    pub damp_frac_g: Option<f64>,
    pub damp_frac_a: f64,
    pub lora: LoraConfig,
    pub seed: u64,
    pub data: DataSection,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            mode: PruneMode::Unstructured,
            alpha: 0.9,
            shots: None,
            policy: CostPolicy::KfacObs,
            update: UpdateKind::FullCorrelation,
            max_correlated: 128,
            damp_frac_g: None,
            damp_frac_a: 0.01,
            lora: LoraConfig::default(),
            seed: 0,
            data: DataSection::default(),
        }
    }
}

/// Every knob with its concrete value; written as `resolved_config.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub mode: PruneMode,
    pub alpha: f64,
    pub shots: usize,
    pub policy: CostPolicy,
    pub update: UpdateKind,
    pub max_correlated: usize,
    pub damp_frac_g: f64,
    pub damp_frac_a: f64,
    pub lora: LoraConfig,
    pub seed: u64,
    pub data: DataSection,
}

impl PruneConfig {
    pub fn resolve(&self) -> ResolvedConfig {
        let structured = self.mode == PruneMode::Structured;
        ResolvedConfig {
            mode: self.mode,
            alpha: self.alpha,
            shots: self.shots.unwrap_or(if structured { 10 } else { 5 }),
            policy: self.policy,
            update: self.update,
            max_correlated: self.max_correlated,
            damp_frac_g: self
                .damp_frac_g
                .unwrap_or(if structured { 0.1 } else { 0.01 }),
            damp_frac_a: self.damp_frac_a,
            lora: self.lora.clone(),
            seed: self.seed,
            data: self.data.clone(),
        }
    }
}

impl ResolvedConfig {
    pub fn settings(&self) -> PruneSettings {
        PruneSettings {
            mode: self.mode,
            alpha: self.alpha,
            shots: self.shots,
            policy: self.policy,
            update: UpdatePolicy {
                kind: self.update,
                max_correlated: self.max_correlated,
            },
            damp_frac_g: self.damp_frac_g,
            damp_frac_a: self.damp_frac_a,
            lora: LoraSettings {
                enabled: self.lora.enabled,
                rank: self.lora.rank,
                steps: self.lora.steps,
                learning_rate: self.lora.learning_rate,
            },
            seed: self.seed,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            seq_len: self.data.seq_len,
            batch_size: self.data.batch_size,
            max_batches: self.data.max_batches,
            test_fraction: self.data.test_fraction,
            seed: self.seed,
        }
    }
}

pub fn parse_mode(s: &str) -> Result<PruneMode, String> {
    match s {
        "unstructured" => Ok(PruneMode::Unstructured),
        "semi-2:4" | "semi-2-4" | "semi24" => Ok(PruneMode::Semi24),
        "structured" => Ok(PruneMode::Structured),
        other => Err(format!(
            "unknown mode `{other}` (unstructured, semi-2:4, structured)"
        )),
    }
}

pub fn parse_policy(s: &str) -> Result<CostPolicy, String> {
    match s {
        "magnitude" => Ok(CostPolicy::Magnitude),
        "l-obd" => Ok(CostPolicy::LObd),
        "k-obd" => Ok(CostPolicy::KObd),
        "kfac-obs" => Ok(CostPolicy::KfacObs),
        other => Err(format!(
            "unknown policy `{other}` (magnitude, l-obd, k-obd, kfac-obs)"
        )),
    }
}

pub fn parse_update(s: &str) -> Result<UpdateKind, String> {
    match s {
        "none" => Ok(UpdateKind::None),
        "independent" | "independent-structure" => Ok(UpdateKind::IndependentStructure),
        "full" | "full-correlation" => Ok(UpdateKind::FullCorrelation),
        other => Err(format!(
            "unknown update kind `{other}` (none, independent, full)"
        )),
    }
}
