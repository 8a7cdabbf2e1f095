use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use serde_json::json;

use pneumonet_core::config::Preset;
use pneumonet_core::domains::DomainDataset;
use pneumonet_core::io::{write_atomic, write_atomic_str};
use pneumonet_core::metrics::{loss_log_csv, summarize_runs, Aggregate};
use pneumonet_core::synthetic::{self, SurrogateLayout};
use pneumonet_core::training::{self, build_domains, evaluate, RunOutcome};
use pneumonet_core::{Model, RawDataset, RunConfig, RunReport};

use crate::ConfigArgs;

/// Bad invocation or configuration; exits with 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(pneumonet_core::Error::Config(_)) = cause.downcast_ref::<pneumonet_core::Error>() {
            return 2;
        }
    }
    1
}

fn require_input(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("input not found: {}", path.display())));
    }
    Ok(())
}

/// Creates `out`, refusing a non-empty existing directory unless `force`.
fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        if !out.is_dir() {
            return Err(usage(format!("{} exists and is not a directory", out.display())));
        }
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(())
}

pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let preset: Preset = args.preset.parse()?;
    let mut cfg = RunConfig::preset(preset);
    if let Some(path) = &args.config {
        require_input(path)?;
        cfg = RunConfig::from_file(&cfg, path)?;
    }
    Ok(cfg.with_overrides(&args.sets)?)
}

fn load_data(cfg: &RunConfig) -> Result<RawDataset> {
    let path = Path::new(&cfg.data);
    require_input(path)?;
    RawDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn ingest(npz: &Path, out: &Path, force: bool) -> Result<()> {
    require_input(npz)?;
    let ds = RawDataset::ingest_npz(npz)?;
    prepare_out_dir(out, force)?;
    ds.export_flat(out)?;
    println!("train={} val={} test={}", ds.train.len(), ds.val.len(), ds.test.len());
    for (name, split) in ds.splits() {
        let [normal, pneumonia] = split.class_counts();
        println!("{name}: normal={normal} pneumonia={pneumonia}");
    }
    for (name, sum) in ds.checksums() {
        println!("sha256 {name} {sum}");
    }
    Ok(())
}

pub fn synth(out: &Path, seed: u64, scale_down: usize, force: bool) -> Result<()> {
    if scale_down == 0 {
        return Err(usage("--scale-down must be at least 1"));
    }
    if out.exists() && !force {
        return Err(usage(format!("{} exists (use --force to overwrite)", out.display())));
    }
    let layout = if scale_down == 1 {
        SurrogateLayout::PNEUMONIAMNIST
    } else {
        SurrogateLayout::scaled_down(scale_down)
    };
    let ds = synthetic::generate(layout, seed);
    write_atomic(out, &ds.to_npz_bytes())?;
    println!("train={} val={} test={}", ds.train.len(), ds.val.len(), ds.test.len());
    Ok(())
}

fn f32_bytes(images: &[std::sync::Arc<[f32]>]) -> Vec<u8> {
    images.iter().flat_map(|img| img.iter().flat_map(|v| v.to_le_bytes())).collect()
}

pub fn make_domains(args: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg = resolve_config(args)?;
    let raw = load_data(&cfg)?;
    prepare_out_dir(out, force)?;
    let domains = build_domains(&raw, &cfg);
    let mut manifest = Vec::new();
    for d in &domains {
        let dir = out.join(format!("{}_{}", d.id(), d.name()));
        for (split_name, split) in [("train", &d.train), ("test", &d.test)] {
            write_atomic(&dir.join(format!("{split_name}_images.f32")), &f32_bytes(&split.images))?;
            write_atomic(&dir.join(format!("{split_name}_labels.u8")), &split.labels)?;
        }
        println!("{} {}: train={} test={}", d.id(), d.name(), d.train.len(), d.test.len());
        manifest.push(json!({
            "id": d.id(),
            "name": d.name(),
            "train": d.train.len(),
            "test": d.test.len(),
        }));
    }
    let text = serde_json::to_string_pretty(&json!({
        "domain_seed": cfg.domain_seed,
        "image_side": 28,
        "dtype": "f32le",
        "domains": manifest,
    }))? + "\n";
    write_atomic_str(&out.join("manifest.json"), &text)?;
    Ok(())
}

fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let report = &outcome.report;
    write_atomic_str(&dir.join("report.json"), &report.deterministic_json())?;
    let timing = serde_json::to_string_pretty(&report.timing)? + "\n";
    write_atomic_str(&dir.join("timing.json"), &timing)?;
    write_atomic_str(&dir.join("matrix.csv"), &report.matrix.to_csv())?;
    write_atomic_str(&dir.join("loss.csv"), &loss_log_csv(&report.loss_log))?;
    write_atomic_str(&dir.join("config.toml"), &report.config.to_toml())?;
    outcome.model.save_checkpoint(dir.join("model.ckpt"))?;
    Ok(())
}

fn run_one(cfg: &RunConfig, domains: &[DomainDataset]) -> Result<RunOutcome> {
    for w in pneumonet_core::ModelSpec::new(cfg.architecture).warnings() {
        log::warn!("{w}");
    }
    let outcome = training::run_on(cfg, domains, &mut training::NoObserver)?;
    info!(
        "{} seed {}: average accuracy {:.2}, forgetting {:.2}",
        cfg.method, cfg.seed, outcome.report.average_accuracy, outcome.report.average_forgetting
    );
    Ok(outcome)
}

pub fn train(args: &ConfigArgs, out: &Path, force: bool) -> Result<()> {
    let cfg = resolve_config(args)?;
    let raw = load_data(&cfg)?;
    prepare_out_dir(out, force)?;
    print!("{}", cfg.to_toml());
    let outcome = run_one(&cfg, &build_domains(&raw, &cfg))?;
    write_run(&outcome, out)?;
    println!(
        "average_accuracy={:.2} average_forgetting={:.2}",
        outcome.report.average_accuracy, outcome.report.average_forgetting
    );
    Ok(())
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(args)?;
    require_input(checkpoint)?;
    let model = Model::load_checkpoint(checkpoint)?;
    let raw = load_data(&cfg)?;
    let domains = build_domains(&raw, &cfg);
    let mut rows = Vec::new();
    let mut total = 0.0;
    for d in &domains {
        let acc = evaluate(&model, &d.test, cfg.eval_batch_size)?;
        println!("{}: {acc:.2}", d.name());
        total += acc;
        rows.push(json!({ "domain": d.name(), "accuracy": acc }));
    }
    let mean = total / domains.len() as f64;
    println!("average: {mean:.2}");
    if let Some(path) = out {
        let text = serde_json::to_string_pretty(&json!({
            "architecture": model.spec().architecture().to_string(),
            "domains": rows,
            "average_accuracy": mean,
        }))? + "\n";
        write_atomic_str(path, &text)?;
    }
    Ok(())
}

/// `key=v1,v2` into the key and its values.
fn parse_vary(text: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = text
        .split_once('=')
        .ok_or_else(|| usage(format!("--vary `{text}` is not key=v1,v2,...")))?;
    let key = key.trim().to_string();
    if key == "seed" {
        return Err(usage("vary seeds with --seeds, not --vary"));
    }
    let values: Vec<String> = values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(usage(format!("--vary `{text}` lists no values")));
    }
    Ok((key, values))
}

fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

fn csv_stat_cells(agg: &Aggregate) -> String {
    format!(
        "{:.4},{:.4},{:.4},{:.4}",
        agg.average_accuracy.mean,
        agg.average_accuracy.std,
        agg.average_forgetting.mean,
        agg.average_forgetting.std
    )
}

pub fn sweep(args: &ConfigArgs, vary: &[String], seeds: &[u64], out: &Path, force: bool) -> Result<()> {
    if seeds.is_empty() {
        return Err(usage("--seeds lists no seeds"));
    }
    let base = resolve_config(args)?;
    let axes = vary.iter().map(|v| parse_vary(v)).collect::<Result<Vec<_>>>()?;
    let points = cartesian(&axes);
    // Validate every point before any training starts.
    let mut planned = Vec::new();
    for point in &points {
        let sets: Vec<String> = point.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let configs = seeds
            .iter()
            .map(|s| {
                let mut all = sets.clone();
                all.push(format!("seed={s}"));
                base.with_overrides(&all)
            })
            .collect::<pneumonet_core::Result<Vec<_>>>()?;
        planned.push((point, sets, configs));
    }
    let raw = load_data(&base)?;
    prepare_out_dir(out, force)?;

    let mut csv = axes.iter().map(|(k, _)| k.as_str()).collect::<Vec<_>>().join(",");
    csv.push_str(",runs,mean_accuracy,std_accuracy,mean_forgetting,std_forgetting\n");
    for (point, sets, configs) in planned {
        let point_dir = out.join(sets.join(","));
        let mut reports = Vec::new();
        for cfg in configs {
            let outcome = run_one(&cfg, &build_domains(&raw, &cfg))?;
            let dir = point_dir.join(format!("seed={}", cfg.seed));
            write_run(&outcome, &dir)?;
            reports.push(outcome.report);
        }
        let agg = summarize_runs(&reports)?;
        let values: Vec<&str> = point.iter().map(|(_, v)| v.as_str()).collect();
        csv.push_str(&format!("{},{},{}\n", values.join(","), agg.seeds.len(), csv_stat_cells(&agg)));
        println!(
            "{}: accuracy {} forgetting {}",
            sets.join(","),
            agg.average_accuracy.display(),
            agg.average_forgetting.display()
        );
    }
    write_atomic_str(&out.join("sweep.csv"), &csv)?;
    Ok(())
}

fn collect_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_reports(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "report.json") {
            found.push(path);
        }
    }
    Ok(())
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for dir in runs {
        if !dir.is_dir() {
            return Err(usage(format!("runs directory not found: {}", dir.display())));
        }
        let mut paths = Vec::new();
        collect_reports(dir, &mut paths)?;
        if paths.is_empty() {
            return Err(usage(format!("no report.json under {}", dir.display())));
        }
        let reports = paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                RunReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))
            })
            .collect::<Result<Vec<_>>>()?;
        let agg = summarize_runs(&reports)
            .map_err(|e| usage(format!("{}: {e}", dir.display())))?;
        let name = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        rows.push((name, agg));
    }

    let mut csv = String::from(
        "group,method,runs,accuracy,forgetting,forgetting_excluding_last,\
         mean_accuracy,std_accuracy,mean_forgetting,std_forgetting\n",
    );
    let header = ["group", "method", "runs", "accuracy", "forgetting", "forgetting (excl. last)"];
    let mut table: Vec<[String; 6]> = vec![header.map(String::from)];
    for (name, agg) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            agg.config.method,
            agg.seeds.len(),
            agg.average_accuracy.display(),
            agg.average_forgetting.display(),
            agg.average_forgetting_excluding_last.display(),
            csv_stat_cells(agg),
        ));
        table.push([
            name.clone(),
            agg.config.method.to_string(),
            agg.seeds.len().to_string(),
            agg.average_accuracy.display(),
            agg.average_forgetting.display(),
            agg.average_forgetting_excluding_last.display(),
        ]);
    }
    let widths: Vec<usize> = (0..6)
        .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}", w = *w))
            .collect();
        text.push_str(cells.join("  ").trim_end());
        text.push('\n');
        if i == 0 {
            text.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            text.push('\n');
        }
    }
    write_atomic_str(out, &csv)?;
    write_atomic_str(&out.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}
