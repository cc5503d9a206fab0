//! Cross-validated grid search over model variants and seeds.
//!
//! For every variant, seed and cross-validation iteration, each grid point
//! (learning rate × task-weight triplet) is trained on three folds and
//! scored on the validation fold. The grid point with the lowest
//! validation loss supplies the test-fold metrics for that iteration.
//! Iterations are averaged per seed, then seeds are averaged per variant.
//!
//! Runs are independent and execute on the rayon pool; results are joined
//! in a fixed order so reports do not depend on scheduling.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Indication, PrescriptionRecord, QuantityTag};
use crate::encoder::{Pooling, SteConfig};
use crate::error::{Error, Result};
use crate::folds::{make_folds, Split};
use crate::heads::TaskWeights;
use crate::metrics::RunMetrics;
use crate::model::{Model, ModelSpec, Variant};
use crate::rng::{stream_rng, Stream};
use crate::train::{train_model, GridPoint, TrainConfig};

pub const DEFAULT_LEARNING_RATES: [f64; 2] = [3e-5, 5e-5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub weight_triplets: Vec<TaskWeights>,
    pub seeds: Vec<u64>,
}

/// `n` points drawn uniformly from the 2-simplex.
pub fn sample_simplex_triplets(n: usize, seed: u64) -> Vec<TaskWeights> {
    let mut rng = stream_rng(seed, Stream::Grid);
    (0..n)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.random(), rng.random());
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            TaskWeights::new(lo, hi - lo, 1.0 - hi).expect("spacings lie on the simplex")
        })
        .collect()
}

impl GridSpec {
    /// Two learning rates, ten sampled weight triplets, ten seeds.
    pub fn standard(seed: u64) -> Self {
        Self {
            learning_rates: DEFAULT_LEARNING_RATES.to_vec(),
            weight_triplets: sample_simplex_triplets(10, seed),
            seeds: (0..10).collect(),
        }
    }

    pub fn points(&self) -> Vec<GridPoint> {
        self.learning_rates
            .iter()
            .flat_map(|&lr| {
                self.weight_triplets
                    .iter()
                    .map(move |&weights| GridPoint { lr, weights })
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rates.is_empty() || self.weight_triplets.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one learning rate, triplet and seed".into()));
        }
        if self.learning_rates.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::standard(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: SteConfig,
    pub variants: Vec<Variant>,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub k_folds: usize,
    /// Run only the first `n` cross-validation iterations; `None` runs all `k_folds`.
    pub max_iterations: Option<usize>,
    pub baseline_pooling: Pooling,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: SteConfig::default(),
            variants: vec![Variant::Ste, Variant::Baseline],
            grid: GridSpec::default(),
            train: TrainConfig::default(),
            k_folds: 5,
            max_iterations: None,
            baseline_pooling: Pooling::First,
        }
    }
}

impl ExperimentConfig {
    pub fn spec(&self, variant: Variant) -> ModelSpec {
        let mut spec = ModelSpec::new(variant, &self.model);
        spec.baseline_pooling = self.baseline_pooling;
        spec
    }

    fn iterations(&self) -> usize {
        self.max_iterations.map_or(self.k_folds, |m| m.min(self.k_folds))
    }
}

/// Outcome of one cross-validation iteration at the selected grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub iteration: usize,
    pub grid_index: usize,
    pub lr: f64,
    pub weights: TaskWeights,
    pub best_epoch: usize,
    /// Validation loss under uniform task weights, the selection criterion.
    pub selection_loss: f64,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub test: RunMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub label: String,
    pub metrics: RunMetrics,
    pub per_seed: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub k_folds: usize,
    pub iterations: usize,
    pub grid: GridSpec,
    pub runs_trained: usize,
    pub variants: Vec<VariantResult>,
}

/// The model selected for the first seed's first iteration, kept for checkpointing.
#[derive(Clone, Debug)]
pub struct SelectedModel {
    pub variant: Variant,
    pub seed: u64,
    pub fold: FoldResult,
    pub test_ids: Vec<String>,
    pub model: Model,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutput {
    pub report: ExperimentReport,
    pub selected: Vec<SelectedModel>,
}

struct Job {
    variant: usize,
    seed: usize,
    iteration: usize,
    grid: usize,
}

struct JobResult {
    selection_loss: f64,
    best_epoch: usize,
    test: RunMetrics,
    model: Option<Model>,
}

fn subset(records: &[PrescriptionRecord], idx: &[usize]) -> Vec<PrescriptionRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

pub fn run_experiment(dataset: &[PrescriptionRecord], cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.grid.validate()?;
    cfg.model.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no model variants requested".into()));
    }
    let points = cfg.grid.points();
    let iterations = cfg.iterations();

    // one fold plan per seed
    let splits: Vec<Vec<Split>> = cfg
        .grid
        .seeds
        .iter()
        .map(|&seed| {
            let plan = make_folds(dataset, cfg.k_folds, seed)?;
            (0..iterations).map(|it| plan.split(it)).collect()
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for variant in 0..cfg.variants.len() {
        for seed in 0..cfg.grid.seeds.len() {
            for iteration in 0..iterations {
                for grid in 0..points.len() {
                    jobs.push(Job {
                        variant,
                        seed,
                        iteration,
                        grid,
                    });
                }
            }
        }
    }

    let uniform = TaskWeights::uniform();
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(|job| {
            let split = &splits[job.seed][job.iteration];
            split.assert_disjoint()?;
            let train = subset(dataset, &split.train);
            let val = subset(dataset, &split.validation);
            let test = subset(dataset, &split.test);
            let spec = cfg.spec(cfg.variants[job.variant]);
            let seed = cfg.grid.seeds[job.seed];
            let out = train_model(&train, &val, &spec, &points[job.grid], seed, &cfg.train)?;
            let selection_loss = out.model.mean_loss(&val, &uniform)?;
            let test_metrics = out.model.evaluate(&test)?;
            Ok(JobResult {
                selection_loss,
                best_epoch: out.best_epoch,
                test: test_metrics,
                model: (job.seed == 0 && job.iteration == 0).then_some(out.model),
            })
        })
        .collect::<Result<_>>()?;

    let mut variants = Vec::new();
    let mut selected = Vec::new();
    let mut cursor = results.into_iter();
    for &variant in &cfg.variants {
        let mut per_seed = Vec::new();
        for (si, &seed) in cfg.grid.seeds.iter().enumerate() {
            let mut folds = Vec::new();
            for (it, split) in splits[si].iter().enumerate() {
                let runs: Vec<JobResult> = cursor.by_ref().take(points.len()).collect();
                let (gi, best) = runs
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.selection_loss.total_cmp(&b.1.selection_loss).then(a.0.cmp(&b.0)))
                    .expect("non-empty grid");
                let fold = FoldResult {
                    iteration: it,
                    grid_index: gi,
                    lr: points[gi].lr,
                    weights: points[gi].weights,
                    best_epoch: best.best_epoch,
                    selection_loss: best.selection_loss,
                    train_size: split.train.len(),
                    validation_size: split.validation.len(),
                    test_size: split.test.len(),
                    test: best.test.clone(),
                };
                if si == 0 && it == 0 {
                    let model = runs
                        .into_iter()
                        .nth(gi)
                        .and_then(|r| r.model)
                        .expect("first-seed models are retained");
                    selected.push(SelectedModel {
                        variant,
                        seed,
                        fold: fold.clone(),
                        test_ids: split.test.iter().map(|&i| dataset[i].id.clone()).collect(),
                        model,
                    });
                }
                folds.push(fold);
            }
            let fold_metrics: Vec<RunMetrics> = folds.iter().map(|f| f.test.clone()).collect();
            per_seed.push(SeedResult {
                seed,
                metrics: RunMetrics::mean(&fold_metrics)?,
                folds,
            });
        }
        let seed_metrics: Vec<RunMetrics> = per_seed.iter().map(|s| s.metrics.clone()).collect();
        variants.push(VariantResult {
            variant,
            label: variant.label().to_string(),
            metrics: RunMetrics::mean(&seed_metrics)?,
            per_seed,
        });
    }

    Ok(ExperimentOutput {
        report: ExperimentReport {
            k_folds: cfg.k_folds,
            iterations,
            grid: cfg.grid.clone(),
            runs_trained: jobs.len(),
            variants,
        },
        selected,
    })
}

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(out.trim_end().len()));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

impl ExperimentReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Main results: one row per variant, quantity MSE and the two macro-F1 scores.
    pub fn summary_table(&self) -> String {
        let header = ["Model", "Quantity MSE", "Quantity-Tag macro-F1", "Indication macro-F1"]
            .map(String::from);
        let rows: Vec<Vec<String>> = self
            .variants
            .iter()
            .map(|v| {
                vec![
                    v.label.clone(),
                    format!("{:.4}", v.metrics.quantity_mse),
                    format!("{:.4}", v.metrics.tag_macro_f1),
                    format!("{:.4}", v.metrics.indication_macro_f1),
                ]
            })
            .collect();
        table(&header, &rows)
    }

    fn per_class_table(&self, names: &[&str], pick: fn(&RunMetrics) -> &Vec<f64>) -> String {
        let mut header = vec!["Model".to_string()];
        header.extend(names.iter().map(|n| n.to_string()));
        let rows: Vec<Vec<String>> = self
            .variants
            .iter()
            .map(|v| {
                let mut row = vec![v.label.clone()];
                row.extend(pick(&v.metrics).iter().map(|f| format!("{f:.4}")));
                row
            })
            .collect();
        table(&header, &rows)
    }

    /// Per-class F1 for the quantity tag.
    pub fn tag_table(&self) -> String {
        let names: Vec<&str> = QuantityTag::ALL.iter().map(|t| t.name()).collect();
        self.per_class_table(&names, |m| &m.tag_per_class)
    }

    /// Per-class F1 for the indication.
    pub fn indication_table(&self) -> String {
        let names: Vec<&str> = Indication::ALL.iter().map(|t| t.name()).collect();
        self.per_class_table(&names, |m| &m.indication_per_class)
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{}-fold cross validation ({} iterations), {} seeds, {} grid points, {} runs\n",
            self.k_folds,
            self.iterations,
            self.grid.seeds.len(),
            self.grid.learning_rates.len() * self.grid.weight_triplets.len(),
            self.runs_trained
        );
        s.push_str(&self.summary_table());
        s.push_str("\nQuantity tag, per-class F1\n");
        s.push_str(&self.tag_table());
        s.push_str("\nIndication, per-class F1\n");
        s.push_str(&self.indication_table());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_shape() {
        let g = GridSpec::standard(3);
        assert_eq!(g.points().len(), 20);
        assert_eq!(g.seeds.len(), 10);
        for w in &g.weight_triplets {
            let s = w.alpha_qnt + w.beta_qntt + w.beta_ind;
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert_eq!(g, GridSpec::standard(3));
    }

    #[test]
    fn table_aligns_columns() {
        let t = table(
            &["a".into(), "bb".into()],
            &[vec!["long name".into(), "1".into()]],
        );
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].len(), lines[2].len());
    }
}
