//! `train`, `eval`, `synth` and `gradcheck`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ste_core::checkpoint;
use ste_core::data::{load_dataset, synth_dataset, write_dataset, EmbedSpec, PlantedTask, SynthSpec};
use ste_core::experiment::run_experiment;
use ste_core::gradcheck::{run_suite, GradCheckConfig};
use ste_core::{Fault, PrescriptionRecord, RunMetrics, Variant};

use crate::config::RunConfig;
use crate::Failure;

/// Extra fields stored in every checkpoint header written by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iteration: usize,
    pub lr: f64,
    pub weights: ste_core::TaskWeights,
    pub best_epoch: usize,
    pub data: Option<PathBuf>,
    pub embed: EmbedSpec,
    pub test_ids: Vec<String>,
    pub test_metrics: RunMetrics,
}

pub fn variant_slug(v: Variant) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|s| s.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{v:?}").to_lowercase())
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::data(format!("serialising: {e}")))
}

pub fn train(cfg: &RunConfig, out_dir: &Path, verbose: u8) -> Result<(), Failure> {
    let data_path = cfg
        .data
        .as_ref()
        .ok_or_else(|| Failure::usage("no dataset: pass --data or set \"data\" in the config"))?;
    let embed = EmbedSpec {
        d_model: cfg.model.d_model(),
        seed: cfg.embed_seed,
    };
    let records = load_dataset(data_path, &embed)?;
    if verbose > 0 {
        eprintln!("loaded {} records from {}", records.len(), data_path.display());
    }
    let experiment = cfg.experiment();
    let started = std::time::Instant::now();
    let output = run_experiment(&records, &experiment)?;
    if verbose > 0 {
        eprintln!(
            "trained {} runs in {:.1}s",
            output.report.runs_trained,
            started.elapsed().as_secs_f64()
        );
    }

    let ckpt_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", ckpt_dir.display())))?;
    write_file(&out_dir.join("config.json"), to_json(cfg)?)?;
    write_file(&out_dir.join("report.json"), to_json(&output.report)?)?;
    write_file(&out_dir.join("report.txt"), output.report.render_text())?;
    write_file(&out_dir.join("per_class_quantity_tag.txt"), output.report.tag_table())?;
    write_file(&out_dir.join("per_class_indication.txt"), output.report.indication_table())?;

    for sel in &output.selected {
        let meta = CheckpointMeta {
            seed: sel.seed,
            iteration: sel.fold.iteration,
            lr: sel.fold.lr,
            weights: sel.fold.weights,
            best_epoch: sel.fold.best_epoch,
            data: Some(data_path.clone()),
            embed,
            test_ids: sel.test_ids.clone(),
            test_metrics: sel.fold.test.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Failure::data(e.to_string()))?;
        let path = ckpt_dir.join(format!("{}.ckpt", variant_slug(sel.variant)));
        checkpoint::save(&path, &sel.model, meta)?;
    }
    print!("{}", output.report.render_text());
    if verbose > 0 {
        eprintln!("wrote reports and checkpoints to {}", out_dir.display());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    checkpoint: PathBuf,
    variant: Variant,
    records: usize,
    metrics: RunMetrics,
    /// Whether the metrics equal those recorded at training time, bit for bit.
    matches_recorded: Option<bool>,
}

pub fn eval(
    ckpt_path: &Path,
    data: Option<PathBuf>,
    all_records: bool,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let (model, header) = checkpoint::load(ckpt_path).map_err(|e| match e {
        ste_core::Error::Io(io) => Failure::data(format!("cannot read {}: {io}", ckpt_path.display())),
        other => other.into(),
    })?;
    let meta: Option<CheckpointMeta> = serde_json::from_value(header.meta.clone()).ok();
    let data = data
        .or_else(|| meta.as_ref().and_then(|m| m.data.clone()))
        .ok_or_else(|| Failure::usage("no dataset: pass --data"))?;
    let embed = meta.as_ref().map_or(
        EmbedSpec {
            d_model: model.d_model(),
            seed: 0,
        },
        |m| m.embed,
    );
    if embed.d_model != model.d_model() {
        return Err(ste_core::Error::Incompatible(format!(
            "embedding width {} does not match model width {}",
            embed.d_model,
            model.d_model()
        ))
        .into());
    }
    let records = load_dataset(&data, &embed)?;

    let (subset, recorded): (Vec<PrescriptionRecord>, Option<&RunMetrics>) = match &meta {
        Some(m) if !all_records => {
            let picked = m
                .test_ids
                .iter()
                .map(|id| {
                    records
                        .iter()
                        .find(|r| &r.id == id)
                        .cloned()
                        .ok_or_else(|| Failure::data(format!("test record `{id}` missing from {}", data.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (picked, Some(&m.test_metrics))
        }
        _ => (records, None),
    };
    if subset.is_empty() {
        return Err(Failure::data("no records to evaluate"));
    }
    let metrics = model.evaluate(&subset)?;
    let matches_recorded = recorded.map(|r| bitwise_equal(r, &metrics));
    let report = EvalOutput {
        checkpoint: ckpt_path.to_path_buf(),
        variant: model.spec.variant,
        records: subset.len(),
        metrics,
        matches_recorded,
    };
    let json = to_json(&report)?;
    match output {
        Some(p) => write_file(&p, &json)?,
        None => println!("{json}"),
    }
    if matches_recorded == Some(false) {
        return Err(Failure::verify("metrics differ from those recorded in the checkpoint"));
    }
    Ok(())
}

fn bitwise_equal(a: &RunMetrics, b: &RunMetrics) -> bool {
    let bits = |m: &RunMetrics| -> Vec<u64> {
        [m.quantity_mse, m.tag_macro_f1, m.indication_macro_f1]
            .iter()
            .chain(&m.tag_per_class)
            .chain(&m.indication_per_class)
            .map(|v| v.to_bits())
            .collect()
    };
    bits(a) == bits(b)
}

pub fn synth(
    n: usize,
    seed: u64,
    task: PlantedTask,
    d_model: usize,
    output: Option<PathBuf>,
) -> Result<(), Failure> {
    let spec = match task {
        PlantedTask::Order => SynthSpec::order_task(d_model),
        PlantedTask::Content => SynthSpec {
            embed: EmbedSpec { d_model, seed: 0 },
            ..SynthSpec::default()
        },
    };
    let records = synth_dataset(n, seed, &spec)?;
    match output {
        Some(p) => {
            let f = fs::File::create(&p)
                .map_err(|e| Failure::data(format!("cannot create {}: {e}", p.display())))?;
            let mut w = std::io::BufWriter::new(f);
            write_dataset(&mut w, &records)?;
            w.flush().map_err(|e| Failure::data(e.to_string()))?;
        }
        None => write_dataset(std::io::stdout().lock(), &records)?,
    }
    Ok(())
}

pub fn gradcheck(seed: u64, tolerance: f64, fault: Option<Fault>) -> Result<(), Failure> {
    let cfg = GradCheckConfig {
        seed,
        tolerance,
        fault,
        ..GradCheckConfig::default()
    };
    let report = run_suite(&cfg)?;
    print!("{}", report.render());
    let failing: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| {
            format!(
                "{} at {}[{}] (rel err {:.3e})",
                r.component, r.worst_param, r.worst_index, r.max_rel_err
            )
        })
        .collect();
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::verify(format!(
            "gradient check failed (tol {tolerance:.0e}): {}",
            failing.join("; ")
        )))
    }
}
