//! JSON run configuration and its merge with command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ste_core::experiment::{sample_simplex_triplets, ExperimentConfig, GridSpec, DEFAULT_LEARNING_RATES};
use ste_core::{Pooling, SteConfig, TrainConfig, Variant};

use crate::Failure;

pub const DEFAULT_OUTPUT_DIR: &str = "ste-out";

/// Everything `ste train` needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives weight-triplet sampling, fold plans, initialisation and dropout.
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Seed of the token embedder for records given as tokens.
    pub embed_seed: u64,
    pub model: SteConfig,
    pub variants: Vec<Variant>,
    pub learning_rates: Vec<f64>,
    pub n_triplets: usize,
    pub n_seeds: usize,
    pub k_folds: usize,
    pub max_iterations: Option<usize>,
    pub baseline_pooling: Pooling,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            output_dir: None,
            embed_seed: 0,
            model: SteConfig::toy(),
            variants: vec![Variant::Ste, Variant::Baseline],
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            n_triplets: 10,
            n_seeds: 10,
            k_folds: 5,
            max_iterations: None,
            baseline_pooling: Pooling::First,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Relative `data` and `output_dir` paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.output_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec {
            learning_rates: self.learning_rates.clone(),
            weight_triplets: sample_simplex_triplets(self.n_triplets, self.seed),
            seeds: (0..self.n_seeds as u64).map(|i| self.seed.wrapping_add(i)).collect(),
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            model: self.model.clone(),
            variants: self.variants.clone(),
            grid: self.grid(),
            train: self.train.clone(),
            k_folds: self.k_folds,
            max_iterations: self.max_iterations,
            baseline_pooling: self.baseline_pooling,
        }
    }

    /// Adds an ablation row unless already present; keeps the canonical row order.
    pub fn add_variant(&mut self, v: Variant) {
        if !self.variants.contains(&v) {
            self.variants.push(v);
            self.variants.sort();
        }
    }

    /// Output directory: flag or environment, then file, then the default.
    pub fn resolve_output_dir(&self, flag_or_env: Option<PathBuf>) -> PathBuf {
        flag_or_env
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sedd": 2}"#).unwrap_err();
        assert!(err.to_string().contains("sedd"));
        let nested = r#"{"model": {"attention": {"d_model": 8, "headz": 2}}}"#;
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"n_seeds": 2}"#).unwrap();
        assert_eq!(cfg.n_seeds, 2);
        assert_eq!(cfg.k_folds, 5);
        assert_eq!(cfg.grid().seeds, vec![0, 1]);
    }

    #[test]
    fn output_dir_precedence() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.resolve_output_dir(None), PathBuf::from(DEFAULT_OUTPUT_DIR));
        cfg.output_dir = Some("from-file".into());
        assert_eq!(cfg.resolve_output_dir(None), PathBuf::from("from-file"));
        assert_eq!(cfg.resolve_output_dir(Some("flag".into())), PathBuf::from("flag"));
    }

    #[test]
    fn ablations_sorted_and_deduplicated() {
        let mut cfg = RunConfig::default();
        cfg.add_variant(Variant::SteNoSt);
        cfg.add_variant(Variant::SteNoPe);
        cfg.add_variant(Variant::SteNoSt);
        assert_eq!(
            cfg.variants,
            vec![Variant::Ste, Variant::SteNoPe, Variant::SteNoSt, Variant::Baseline]
        );
    }
}
