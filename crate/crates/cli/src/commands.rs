use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use indistill_core::curriculum::{CurriculumSchedule, SchedulerMode};
use indistill_core::data::Normalization;
use indistill_core::metrics::{evaluate_all, EvalReport};
use indistill_core::nn::Model;
use indistill_core::prune::{prune, KernelView};
use indistill_core::train::{
    build_and_distill_auxiliary, distill_student, train_supervised, Checkpoint, DistillConfig, Method, TrainOutcome,
};
use indistill_core::Error;

use crate::config::{ExperimentConfig, Splits};
use crate::ledger::{self, Row};

const TEACHER_FILE: &str = "teacher.ckpt";
const AUXILIARY_FILE: &str = "auxiliary.ckpt";

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    config.resolve_output(path);
    Ok(config)
}

fn prepare_output(config: &ExperimentConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    fs::create_dir_all(&dir)
        .map_err(Error::from)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_outcome(
    path: &Path,
    outcome: &TrainOutcome,
    config: &DistillConfig,
    config_hash: &str,
    normalization: &Normalization,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut metadata = BTreeMap::new();
    metadata.insert("normalization".to_string(), serde_json::to_string(normalization)?);
    metadata.insert("role".to_string(), outcome.model.spec().role.to_string());
    for (k, v) in extra {
        metadata.insert((*k).to_string(), v.clone());
    }
    let checkpoint = Checkpoint {
        model: outcome.model.clone(),
        optimizer: Some(outcome.optimizer.clone()),
        epoch: config.epochs,
        seed: config.seed,
        config_hash: config_hash.to_string(),
        metadata,
    };
    checkpoint
        .save(path)
        .with_context(|| format!("writing checkpoint {}", path.display()))?;
    let csv = path.with_extension("csv");
    fs::write(&csv, outcome.metrics.to_csv()).map_err(Error::from)?;
    Ok(())
}

fn check_compatible(model: &Model, splits: &Splits) -> Result<()> {
    let i = model.spec().input;
    let [c, h, w] = splits.train.image_shape();
    if [i.channels, i.height, i.width] != [c, h, w] {
        return Err(Error::Config(format!(
            "checkpoint model expects {}x{}x{} inputs, dataset holds {c}x{h}x{w}",
            i.channels, i.height, i.width
        ))
        .into());
    }
    Ok(())
}

fn append_trained_metrics(outcome: &mut TrainOutcome, report: &EvalReport) {
    let epoch = outcome.metrics.records.last().map_or(0, |r| r.epoch);
    outcome.metrics.push_metric(epoch, "map", report.map);
    outcome.metrics.push_metric(epoch, &format!("precision_at_{}", report.k), report.precision_at_k);
    outcome.metrics.push_metric(epoch, "accuracy", report.accuracy);
    if let Some(mi) = report.mi_divergence {
        outcome.metrics.push_metric(epoch, "mi_divergence", mi);
    }
}

pub fn train_teacher(config_path: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.teacher.seed = seed;
    }
    config.validate()?;
    let hash = config.hash();
    let splits = config.load_data()?;
    let dir = prepare_output(&config)?;
    let mut outcome = train_supervised(config.teacher_spec()?, &splits.train, &config.teacher)?;
    let report = evaluate_all(&outcome.model, None, &splits.test, config.output.k)?;
    append_trained_metrics(&mut outcome, &report);
    let path = dir.join(TEACHER_FILE);
    save_outcome(&path, &outcome, &config.teacher, &hash, &splits.normalization, &[])?;
    println!("{report}");
    println!("checkpoint={}", path.display());
    ledger::append(
        &dir,
        &Row {
            command: "train-teacher",
            config_hash: &hash,
            config: &DistillConfig {
                method: Method::None,
                ..config.teacher.clone()
            },
            status: "ok",
            report: Some(&report),
            artifact: &path.display().to_string(),
        },
    )
}

fn build_auxiliary(config: &ExperimentConfig, hash: &str, splits: &Splits, teacher_path: &Path) -> Result<Model> {
    let teacher = read_checkpoint(teacher_path)?.model;
    check_compatible(&teacher, splits)?;
    let mut outcome = build_and_distill_auxiliary(
        &teacher,
        &config.student_spec()?,
        config.distill.q,
        &splits.train,
        &config.auxiliary,
    )?;
    let report = evaluate_all(&outcome.model, Some(&teacher), &splits.test, config.output.k)?;
    append_trained_metrics(&mut outcome, &report);
    let dir = prepare_output(config)?;
    let path = dir.join(AUXILIARY_FILE);
    save_outcome(
        &path,
        &outcome,
        &config.auxiliary,
        hash,
        &splits.normalization,
        &[("teacher", teacher_path.display().to_string())],
    )?;
    println!("{report}");
    println!("checkpoint={}", path.display());
    ledger::append(
        &dir,
        &Row {
            command: "distill-aux",
            config_hash: hash,
            config: &DistillConfig {
                method: Method::Okd,
                ..config.auxiliary.clone()
            },
            status: "ok",
            report: Some(&report),
            artifact: &path.display().to_string(),
        },
    )?;
    Ok(outcome.model)
}

pub fn distill_aux(config_path: &Path, teacher: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.auxiliary.seed = seed;
    }
    config.validate()?;
    let hash = config.hash();
    let teacher_path = teacher.map_or_else(|| config.output.dir.join(TEACHER_FILE), Path::to_path_buf);
    let splits = config.load_data()?;
    build_auxiliary(&config, &hash, &splits, &teacher_path)?;
    Ok(())
}

/// Loads the frozen reference: an explicit checkpoint, the saved auxiliary
/// model, or a freshly distilled auxiliary model when only a teacher exists.
fn resolve_reference(config: &ExperimentConfig, hash: &str, splits: &Splits, explicit: Option<&Path>) -> Result<Model> {
    let model = match explicit {
        Some(path) => read_checkpoint(path)?.model,
        None => {
            let aux = config.output.dir.join(AUXILIARY_FILE);
            let teacher = config.output.dir.join(TEACHER_FILE);
            if aux.exists() {
                read_checkpoint(&aux)?.model
            } else if teacher.exists() {
                build_auxiliary(config, hash, splits, &teacher)?
            } else {
                return Err(Error::Config(format!(
                    "no reference model: pass --reference or run train-teacher first (looked in {})",
                    config.output.dir.display()
                ))
                .into());
            }
        }
    };
    check_compatible(&model, splits)?;
    Ok(model)
}

fn run_student(
    config: &ExperimentConfig,
    hash: &str,
    splits: &Splits,
    reference: &Model,
    command: &str,
    tag: &str,
) -> Result<EvalReport> {
    let d = &config.distill;
    let dir = prepare_output(config)?;
    let mut outcome = distill_student(reference, config.student_spec()?, &splits.train, d)?;
    let report = evaluate_all(&outcome.model, Some(reference), &splits.test, config.output.k)?;
    append_trained_metrics(&mut outcome, &report);
    let path = dir.join(format!("student-{}-{}{tag}-seed{}.ckpt", d.method, d.scheduler, d.seed));
    save_outcome(
        &path,
        &outcome,
        d,
        hash,
        &splits.normalization,
        &[("method", d.method.to_string()), ("scheduler", d.scheduler.to_string())],
    )?;
    ledger::append(
        &dir,
        &Row {
            command,
            config_hash: hash,
            config: d,
            status: "ok",
            report: Some(&report),
            artifact: &path.display().to_string(),
        },
    )?;
    Ok(report)
}

pub fn distill(
    config_path: &Path,
    method: Option<Method>,
    scheduler: Option<SchedulerMode>,
    seeds: &[u64],
    reference: Option<&Path>,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(m) = method {
        config.distill.method = m;
    }
    if let Some(s) = scheduler {
        config.distill.scheduler = s;
    }
    if !seeds.is_empty() {
        config.output.seeds = seeds.to_vec();
    }
    config.validate()?;
    let hash = config.hash();
    let splits = config.load_data()?;
    let reference = resolve_reference(&config, &hash, &splits, reference)?;
    for &seed in &config.output.seeds.clone() {
        config.distill.seed = seed;
        let report = run_student(&config, &hash, &splits, &reference, "distill", "")?;
        println!("method={} scheduler={} seed={seed}", config.distill.method, config.distill.scheduler);
        println!("{report}");
    }
    Ok(())
}

pub fn evaluate(config_path: &Path, checkpoint: &Path, reference: Option<&Path>, k: Option<usize>) -> Result<()> {
    let config = load_config(config_path)?;
    config.validate()?;
    let k = k.unwrap_or(config.output.k);
    if k == 0 {
        bail!(Error::Config("k must be positive".into()));
    }
    let ck = read_checkpoint(checkpoint)?;
    let reference = reference.map(read_checkpoint).transpose()?;
    let splits = config.load_data()?;
    check_compatible(&ck.model, &splits)?;
    let report = evaluate_all(&ck.model, reference.as_ref().map(|r| &r.model), &splits.test, k)?;
    println!("{report}");
    let dir = prepare_output(&config)?;
    ledger::append(
        &dir,
        &Row {
            command: "evaluate",
            config_hash: &ck.config_hash,
            config: &DistillConfig {
                seed: ck.seed,
                epochs: ck.epoch,
                ..config.distill.clone()
            },
            status: "ok",
            report: Some(&report),
            artifact: &checkpoint.display().to_string(),
        },
    )
}

pub fn schedule(a: usize, b: usize, epochs: usize, layers: usize) -> Result<()> {
    let s = CurriculumSchedule::build(a, b, epochs, layers)?;
    print!("{}", s.to_csv());
    Ok(())
}

pub fn prune_report(checkpoint: &Path, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        bail!(Error::Config(format!("rate must lie in [0, 1), got {rate}")));
    }
    let ck = read_checkpoint(checkpoint)?;
    let model = &ck.model;
    println!("layer,channel,score,kept");
    for l in 1..=model.spec().feature_layers() {
        let kernel = KernelView::new(model.layer_weight(l).expect("feature layer"))?;
        let p = (rate * kernel.outputs() as f64).round() as usize;
        let sel = prune(&kernel, p.min(kernel.outputs() - 1), l)?;
        for (c, score) in sel.scores.iter().enumerate() {
            println!("{l},{c},{score},{}", u8::from(sel.is_kept(c)));
        }
    }
    Ok(())
}

/// Parses `key=v1,v2,…` axes into a list of points.
fn parse_grid(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut points: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let Some((key, values)) = axis.split_once('=') else {
            bail!(Error::Config(format!("grid axis `{axis}` must look like key=v1,v2")));
        };
        if !matches!(key, "a" | "b" | "q" | "epochs") {
            bail!(Error::Config(format!("cannot sweep `{key}` (use a, b, q or epochs)")));
        }
        let values: Vec<&str> = values.split(',').filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            bail!(Error::Config(format!("grid axis `{key}` has no values")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut p = p.clone();
                    p.push((key.to_string(), v.to_string()));
                    p
                })
            })
            .collect();
    }
    Ok(points)
}

fn apply_point(config: &mut DistillConfig, point: &[(String, String)]) -> Result<()> {
    for (key, value) in point {
        let bad = || Error::Config(format!("bad value `{value}` for {key}"));
        match key.as_str() {
            "a" => config.a = value.parse().map_err(|_| bad())?,
            "b" => config.b = value.parse().map_err(|_| bad())?,
            "q" => config.q = value.parse().map_err(|_| bad())?,
            "epochs" => config.epochs = value.parse().map_err(|_| bad())?,
            _ => unreachable!("keys checked while parsing"),
        }
    }
    Ok(())
}

pub fn sweep(config_path: &Path, grid: &[String], reference: Option<&Path>) -> Result<()> {
    let base = load_config(config_path)?;
    base.validate()?;
    let points = parse_grid(grid)?;
    let mut runnable = Vec::new();
    for point in &points {
        let mut config = base.clone();
        apply_point(&mut config.distill, point)?;
        config.distill.seed = base.output.seeds[0];
        runnable.push((point, config));
    }
    let splits = base.load_data()?;
    let reference = resolve_reference(&base, &base.hash(), &splits, reference)?;
    let dir = prepare_output(&base)?;
    for (point, config) in runnable {
        let label: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let label = label.join(" ");
        let hash = config.hash();
        match config.validate() {
            Ok(()) => {
                let tag: String = point.iter().map(|(k, v)| format!("-{k}{v}")).collect();
                let report = run_student(&config, &hash, &splits, &reference, "sweep", &tag)?;
                println!("{label} map={:.6} precision_at_{}={:.6}", report.map, report.k, report.precision_at_k);
            }
            Err(err @ (Error::InfeasibleSchedule { .. } | Error::Config(_))) => {
                eprintln!("warning: skipping {label}: {err}");
                ledger::append(
                    &dir,
                    &Row {
                        command: "sweep",
                        config_hash: &hash,
                        config: &config.distill,
                        status: "infeasible",
                        report: None,
                        artifact: "",
                    },
                )?;
            }
            Err(err) => return Err(err.into()),
        }
    }
    Ok(())
}
