//! JSON experiment configuration.
//!
//! Unknown keys are rejected; every run echoes the fully resolved document
//! (defaults filled in) next to its outputs, and re-running from the echo
//! reproduces the run byte for byte (wall-clock columns aside).

use crate::error::{NxnError, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "train-denoiser")]
    TrainDenoiser,
    #[serde(rename = "train-classifier")]
    TrainClassifier,
    #[serde(rename = "attack-eval")]
    AttackEval,
    #[serde(rename = "pnp-deblur")]
    PnpDeblur,
    #[serde(rename = "verify")]
    Verify,
    #[serde(rename = "radius")]
    Radius,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default = "d_tableau")]
    pub tableau: String,
    #[serde(default = "d_n_blocks")]
    pub n_blocks: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    /// Block step size; null means the tableau's contractivity radius.
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default = "d_budget")]
    pub contraction_budget: f64,
    #[serde(default = "d_activation")]
    pub activation: String,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// "nonexp" or "baseline".
    #[serde(default = "d_model")]
    pub model: String,
    /// Classifier stages (channel widths); n_blocks applies per stage.
    #[serde(default = "d_stage_channels")]
    pub stage_channels: Vec<usize>,
}

fn d_tableau() -> String {
    "euler".into()
}
fn d_n_blocks() -> usize {
    5
}
fn d_channels() -> usize {
    16
}
fn d_budget() -> f64 {
    1.0
}
fn d_activation() -> String {
    "leaky_relu".into()
}
fn d_alpha() -> f64 {
    0.5
}
fn d_model() -> String {
    "nonexp".into()
}
fn d_stage_channels() -> Vec<usize> {
    vec![8, 16]
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_iters")]
    pub iters: usize,
    #[serde(default = "d_lr_min")]
    pub lr_min: f64,
    #[serde(default = "d_lr_max")]
    pub lr_max: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Hinge margin for classification.
    #[serde(default = "d_mu")]
    pub mu: f64,
}

fn d_iters() -> usize {
    400
}
fn d_lr_min() -> f64 {
    1e-4
}
fn d_lr_max() -> f64 {
    1e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-5
}
fn d_batch() -> usize {
    8
}
fn d_mu() -> f64 {
    0.1
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// "synth-denoise" or "toy-classify".
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_size")]
    pub size: usize,
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    #[serde(default = "d_ntrain")]
    pub n_train: usize,
    #[serde(default = "d_nval")]
    pub n_val: usize,
    #[serde(default = "d_ntest")]
    pub n_test: usize,
    #[serde(default = "d_nclasses")]
    pub n_classes: usize,
    /// Fraction of flipped training labels for toy classification.
    #[serde(default = "d_label_noise")]
    pub label_noise: f64,
}

fn d_kind() -> String {
    "synth-denoise".into()
}
fn d_size() -> usize {
    16
}
fn d_noise() -> f64 {
    0.15
}
fn d_ntrain() -> usize {
    200
}
fn d_nval() -> usize {
    32
}
fn d_ntest() -> usize {
    32
}
fn d_nclasses() -> usize {
    2
}
fn d_label_noise() -> f64 {
    0.1
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default = "d_eps_grid")]
    pub eps_grid: Vec<f64>,
    #[serde(default = "d_pgd_iters")]
    pub pgd_iters: usize,
    #[serde(default)]
    pub tau: Option<f64>,
}

fn d_eps_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 2.5, 3.0]
}
fn d_pgd_iters() -> usize {
    100
}

impl Default for AttackSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// Adversarial-training settings for train-classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialSection {
    #[serde(default = "d_adv_eps")]
    pub eps: f64,
    #[serde(default = "d_adv_iters")]
    pub pgd_iters: usize,
}

fn d_adv_eps() -> f64 {
    0.5
}
fn d_adv_iters() -> usize {
    7
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PnpSection {
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default = "d_kernel")]
    pub kernel: String,
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default = "d_pnp_iters")]
    pub iters: usize,
    #[serde(default = "d_pnp_tol")]
    pub tol: f64,
    #[serde(default = "d_pnp_size")]
    pub size: usize,
    #[serde(default = "d_pnp_noise")]
    pub noise_sigma: f64,
    /// "adjoint_applied", "measurements" or "zeros".
    #[serde(default = "d_x0")]
    pub x0: String,
}

fn d_kernel() -> String {
    "motion9".into()
}
fn d_pnp_iters() -> usize {
    2000
}
fn d_pnp_tol() -> f64 {
    1e-6
}
fn d_pnp_size() -> usize {
    32
}
fn d_pnp_noise() -> f64 {
    0.01
}
fn d_x0() -> String {
    "adjoint_applied".into()
}

impl Default for PnpSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "d_samples")]
    pub samples: usize,
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(default = "d_pairs")]
    pub pairs: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
}

fn d_samples() -> usize {
    100_000
}
fn d_pairs() -> usize {
    10_000
}
fn d_tol() -> f64 {
    1e-9
}

impl Default for VerifySection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub adversarial: Option<AdversarialSection>,
    #[serde(default)]
    pub pnp: Option<PnpSection>,
    #[serde(default)]
    pub verify: Option<VerifySection>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| NxnError::Config(e.to_string()))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Minimal config for a task, everything defaulted.
    pub fn for_task(task: TaskKind) -> Self {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(r#"{"task":"radius"}"#).expect("template parses");
        cfg.task = task;
        cfg
    }

    /// Short content hash of the resolved config, for run directory names.
    pub fn hash12(&self) -> String {
        use sha2::{Digest, Sha256};
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        let mut s = String::new();
        for b in digest.iter().take(6) {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(r#"{"task": "train-denoiser"}"#).unwrap();
        assert_eq!(cfg.architecture.tableau, "euler");
        assert_eq!(cfg.architecture.n_blocks, 5);
        assert_eq!(cfg.optimizer.momentum, 0.9);
        assert_eq!(cfg.data.noise_sigma, 0.15);
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_json(r#"{"task": "radius", "tasq": 1}"#);
        assert!(err.is_err());
        let err = ExperimentConfig::from_json(
            r#"{"task": "radius", "architecture": {"chanels": 3}}"#,
        );
        assert!(err.is_err());
    }

    #[test]
    fn echo_round_trip_is_stable() {
        let cfg = ExperimentConfig::from_json(r#"{"task": "verify", "seed": 7}"#).unwrap();
        let echo = cfg.to_json_pretty();
        let again = ExperimentConfig::from_json(&echo).unwrap();
        assert_eq!(echo, again.to_json_pretty());
        assert_eq!(cfg.hash12(), again.hash12());
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = ExperimentConfig::from_json(r#"{"task": "verify", "seed": 7}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"task": "verify", "seed": 8}"#).unwrap();
        assert_ne!(a.hash12(), b.hash12());
    }
}
