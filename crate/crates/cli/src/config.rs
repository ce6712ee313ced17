//! Flat run configuration: one JSON object holding every pipeline knob plus
//! input/output paths. Unknown keys are rejected so sweep typos fail loudly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mvclust::train::{ClusterOn, TrainConfig, Variant, LAMBDA_GRID};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Output directory for run artifacts.
    pub out: Option<PathBuf>,
    pub epochs: usize,
    pub lr: f64,
    pub lambda: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub k: usize,
    pub seed: u64,
    pub graph_refresh_period: usize,
    pub variant: Variant,
    pub use_bias: bool,
    pub contrastive_self_pairs: bool,
    pub hidden_dims: Vec<usize>,
    pub eval_period: usize,
    pub eval_seeds: usize,
    pub kmeans_restarts: usize,
    pub cluster_on: ClusterOn,
    /// Write a checkpoint every this many epochs (0 = only the final model).
    pub checkpoint_period: usize,
    /// Missing rate for the `mask` command.
    pub eta: f64,
    /// Lambda grid for the `sweep` command.
    pub lambdas: Vec<f64>,
    /// Seeds for the `sweep` command.
    pub sweep_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: None,
            out: None,
            epochs: t.epochs,
            lr: t.lr,
            lambda: t.lambda,
            tau: t.tau,
            epsilon: t.epsilon,
            k: t.k,
            seed: t.seed,
            graph_refresh_period: t.graph_refresh_period,
            variant: t.variant,
            use_bias: t.use_bias,
            contrastive_self_pairs: t.contrastive_self_pairs,
            hidden_dims: t.hidden_dims,
            eval_period: t.eval_period,
            eval_seeds: t.eval_seeds,
            kmeans_restarts: t.kmeans_restarts,
            cluster_on: t.cluster_on,
            checkpoint_period: t.checkpoint_period,
            eta: 0.0,
            lambdas: LAMBDA_GRID.to_vec(),
            sweep_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<(), String> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| format!("cannot encode config: {e}"))?;
        fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            lambda: self.lambda,
            tau: self.tau,
            epsilon: self.epsilon,
            k: self.k,
            seed: self.seed,
            graph_refresh_period: self.graph_refresh_period,
            variant: self.variant,
            use_bias: self.use_bias,
            contrastive_self_pairs: self.contrastive_self_pairs,
            hidden_dims: self.hidden_dims.clone(),
            eval_period: self.eval_period,
            eval_seeds: self.eval_seeds,
            kmeans_restarts: self.kmeans_restarts,
            cluster_on: self.cluster_on,
            checkpoint_period: self.checkpoint_period,
            checkpoint_dir: None,
        }
    }
}
