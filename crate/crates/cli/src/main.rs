//! `dco-lab`: command-line front end for the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use dco_core::checkpoint::{load_model, AdapterFile};
use dco_core::harness::{
    diagnose_model, pareto_report, read_points_csv, write_diagnosis, write_pareto_outputs, Diagnosis, Experiment,
    ExperimentConfig,
};
use dco_core::training::ObjectiveKind;
use dco_core::{Error, Result};

#[derive(Parser)]
#[command(name = "dco-lab", version, about = "Desk-scale consistency fine-tuning of diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or reuse) the base model.
    TrainBase(Common),
    /// Fine-tune every block of the config for every seed.
    Finetune(Common),
    /// Write guided samples of every fine-tuned run.
    Sample(Common),
    /// Guidance sweep and Pareto report.
    Sweep(Common),
    /// Merge subject and style adapters and score the merged models.
    Merge(Common),
    /// Noise-distance profiles and deviation estimates.
    Diagnose(DiagnoseArgs),
    /// Rebuild the Pareto report from a stored point table.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `out`, then `dco-lab-out`.
    #[arg(long, env = "DCO_LAB_OUT")]
    out: Option<PathBuf>,
    /// Experiment seed (base pretraining and sampling).
    #[arg(long)]
    seed: Option<u64>,
    /// Concurrent runs.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated consistency-guidance scales.
    #[arg(long, value_delimiter = ',')]
    omega_con: Option<Vec<f64>>,
    /// Constant DCO strength for every block.
    #[arg(long)]
    beta: Option<f64>,
    /// Objective for every block.
    #[arg(long, value_parser = ["dm", "dm-prior", "dco"])]
    objective: Option<String>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    /// Diagnose one adapter file instead of the config's runs.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Base checkpoint for `--adapter`; defaults to `<out>/base.ckpt`.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Reference set name for `--adapter`.
    #[arg(long)]
    reference: Option<String>,
    /// Condition for `--adapter`; defaults to the reference set's condition.
    #[arg(long)]
    condition: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Point table; defaults to `<out>/sweep/pareto.csv`.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, env = "DCO_LAB_OUT")]
    out: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn experiment(c: &Common) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::from_file(&c.config)?;
    if let Some(s) = c.seed {
        cfg.override_seed(s);
    }
    if let Some(b) = c.beta {
        cfg.override_beta(b);
    }
    if let Some(o) = &c.objective {
        cfg.override_objective(ObjectiveKind::parse(o)?);
    }
    if let Some(w) = &c.omega_con {
        cfg.override_omega_con(w.clone());
    }
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("dco-lab-out"));
    let workers = c.workers.or(cfg.workers).unwrap_or_else(default_workers);
    Experiment::new(cfg, out, workers)
}

fn diagnosis_json(d: &[Diagnosis]) -> serde_json::Value {
    d.iter()
        .map(|d| {
            json!({
                "label": d.label,
                "seed": d.seed,
                "mean_noise_distance": d.profile.overall,
                "delta": d.delta,
                "delta_std_err": d.delta_std_err,
            })
        })
        .collect()
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::TrainBase(c) => {
            let exp = experiment(&c)?;
            let base = exp.base()?;
            Ok(json!({
                "base": exp.out.join("base.ckpt"),
                "checksum": base.checksum(),
            }))
        }
        Command::Finetune(c) => {
            let exp = experiment(&c)?;
            let base = exp.base()?;
            let runs = exp.runs(&base)?;
            let list: Vec<_> = runs
                .iter()
                .map(|r| {
                    json!({
                        "label": r.label,
                        "seed": r.seed,
                        "dir": exp.run_dir(&r.label, r.seed),
                        "final_loss": r.record.losses.last(),
                    })
                })
                .collect();
            Ok(json!({ "runs": list }))
        }
        Command::Sample(c) => {
            let exp = experiment(&c)?;
            let base = exp.base()?;
            let runs = exp.runs(&base)?;
            exp.sample_runs(&base, &runs)?;
            Ok(json!({ "samples": exp.out.join("samples") }))
        }
        Command::Sweep(c) => {
            let exp = experiment(&c)?;
            let base = exp.base()?;
            let runs = exp.runs(&base)?;
            let (points, report) = exp.sweep(&base, &runs)?;
            Ok(json!({
                "points": points.len(),
                "report": exp.out.join("sweep"),
                "dominance": report.dominance.iter().map(|d| json!({
                    "a": d.a, "b": d.b, "mean": d.mean, "ci": [d.ci.0, d.ci.1],
                })).collect::<Vec<_>>(),
            }))
        }
        Command::Merge(c) => {
            let exp = experiment(&c)?;
            let base = exp.base()?;
            let runs = exp.runs(&base)?;
            let rows = exp.merges(&base, &runs)?;
            Ok(json!({
                "report": exp.out.join("merge").join("report.csv"),
                "rows": rows.iter().map(|r| json!({
                    "method": r.method, "seed": r.seed,
                    "subject": r.subject, "style": r.style, "text": r.text,
                })).collect::<Vec<_>>(),
            }))
        }
        Command::Diagnose(d) => {
            let exp = experiment(&d.common)?;
            match &d.adapter {
                None => {
                    let base = exp.base()?;
                    let runs = exp.runs(&base)?;
                    let out = exp.diagnose(&base, &runs)?;
                    Ok(json!({ "diagnose": exp.out.join("diagnose"), "runs": diagnosis_json(&out) }))
                }
                Some(path) => {
                    let base_path = d.base.clone().unwrap_or_else(|| exp.out.join("base.ckpt"));
                    let base = Arc::new(load_model(&base_path)?);
                    let theta = AdapterFile::load(path)?.attach(base.clone())?;
                    let name = d
                        .reference
                        .as_deref()
                        .ok_or_else(|| Error::InvalidArgument("--adapter needs --reference".into()))?;
                    let refs = exp.world.reference(name)?;
                    let condition = d.condition.clone().unwrap_or_else(|| refs.condition.clone());
                    let mut diag = diagnose_model(
                        &theta,
                        base.as_ref(),
                        &condition,
                        &refs.points,
                        &exp.config.diagnose,
                        exp.config.seed,
                    )?;
                    diag.label = file_label(path);
                    let out = vec![diag];
                    write_diagnosis(&exp.out.join("diagnose"), &out)?;
                    Ok(json!({ "diagnose": exp.out.join("diagnose"), "runs": diagnosis_json(&out) }))
                }
            }
        }
        Command::Report(r) => {
            let out = r.out.unwrap_or_else(|| PathBuf::from("dco-lab-out"));
            let points_path = r.points.unwrap_or_else(|| out.join("sweep").join("pareto.csv"));
            let points = read_points_csv(&points_path)?;
            let report = pareto_report(&points)?;
            let dir = out.join("sweep");
            write_pareto_outputs(&dir, &points, &report)?;
            Ok(json!({ "report": dir, "points": points.len() }))
        }
    }
}

fn file_label(p: &Path) -> String {
    p.file_stem().map_or_else(|| "adapter".into(), |s| s.to_string_lossy().into_owned())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
