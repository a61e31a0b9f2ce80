//! Command-line front door: scan simulation, policy training, evaluation,
//! oracle focus computation, and smoothed path export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::bench::{
    evaluate_policy, export_paths_to_file, paired_significance, write_report_json, EvalReport,
    InitialFocus,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::metrics::MetricKind;
use crate::neural::checkpoint::Checkpoint;
use crate::pgm::read_pgm;
use crate::policy::PolicySpec;
use crate::scan::{
    build_simulated_scan, load_scan, oracle_optimal_focus, save_scan, write_stack_f_star, Scan,
    ScanSet,
};
use crate::train::{train, TrainVariant};

pub const POLICY_NAMES: [&str; 6] = ["fixed", "hc-mgm", "hc-mlr", "rl-mgm", "rl-mlr", "rl-cnn"];

#[derive(Parser)]
#[command(
    name = "afrl",
    about = "Contrast-based video autofocus: scan simulator, DQN trainer, benchmark harness",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate simulated focal-time scans from PGM source images
    Simulate {
        /// Directory of source stills (*.pgm) and/or frame-sequence subdirectories
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of scans to generate
        #[arg(long)]
        count: usize,
        /// Frames per scan (overrides config)
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Train a deep-Q autofocus policy
    Train {
        #[arg(long)]
        scans: PathBuf,
        /// Validation scan directory
        #[arg(long)]
        val: PathBuf,
        /// One of: rl-mgm, rl-mlr, rl-cnn
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from an existing checkpoint of the same architecture
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate a policy over scans, writing report.json and paths.csv
    Eval {
        #[arg(long)]
        scans: PathBuf,
        /// One of: fixed, hc-mgm, hc-mlr, rl-mgm, rl-mlr, rl-cnn
        #[arg(long)]
        policy: String,
        /// Checkpoint (required for rl-* policies)
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Second policy to evaluate and test against the first
        #[arg(long)]
        compare: Option<String>,
        #[arg(long)]
        compare_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        initial_f: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Compute oracle ground-truth focus for a focal-stack scan directory
    OracleFocus {
        #[arg(long)]
        scan: PathBuf,
    },
    /// Re-export smoothed focal paths from an existing paths.csv
    ExportPaths {
        #[arg(long)]
        paths: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Moving-average window in frames
        #[arg(long)]
        window: Option<usize>,
    },
}

pub fn run() -> Result<()> {
    run_with(Cli::parse())
}

fn run_with(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            sources,
            out,
            count,
            frames,
            config,
            seed,
            workers,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = frames {
                cfg.scan_frames = f;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            install_pool(cfg.workers);
            cmd_simulate(&sources, &out, count, &cfg)
        }
        Command::Train {
            scans,
            val,
            variant,
            out,
            config,
            seed,
            resume,
            workers,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            install_pool(cfg.workers);
            cmd_train(&scans, &val, &variant, resume.as_deref(), &out, &cfg)
        }
        Command::Eval {
            scans,
            policy,
            ckpt,
            compare,
            compare_ckpt,
            out,
            initial_f,
            config,
            seed,
            workers,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(f) = initial_f {
                cfg.initial_f = f;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.validate()?;
            install_pool(cfg.workers);
            cmd_eval(
                &scans,
                &policy,
                ckpt.as_deref(),
                compare.as_deref(),
                compare_ckpt.as_deref(),
                &out,
                &cfg,
            )
        }
        Command::OracleFocus { scan } => cmd_oracle_focus(&scan),
        Command::ExportPaths { paths, out, window } => {
            cmd_export_paths(&paths, &out, window.unwrap_or(crate::bench::DEFAULT_SMOOTHING_WINDOW))
        }
    }
}

fn install_pool(workers: usize) {
    if workers > 0 {
        // Ignore the error if a global pool already exists (e.g. tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}

/// A scan source: a still image or an ordered frame sequence.
struct Source {
    id: String,
    frames: Vec<GrayImage>,
}

fn discover_sources(dir: &Path) -> Result<Vec<Source>> {
    let mut sources = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    entries.sort();
    for path in entries {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if path.is_file() && path.extension().is_some_and(|e| e == "pgm") {
            sources.push(Source {
                id,
                frames: vec![read_pgm(&path)?],
            });
        } else if path.is_dir() {
            let mut frame_paths: Vec<PathBuf> = fs::read_dir(&path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "pgm"))
                .collect();
            frame_paths.sort();
            if frame_paths.is_empty() {
                continue;
            }
            let frames = frame_paths
                .iter()
                .map(|p| read_pgm(p))
                .collect::<Result<Vec<_>>>()?;
            sources.push(Source { id, frames });
        }
    }
    if sources.is_empty() {
        return Err(Error::Config(format!(
            "no PGM sources found under {}",
            dir.display()
        )));
    }
    Ok(sources)
}

fn cmd_simulate(sources_dir: &Path, out: &Path, count: usize, cfg: &RunConfig) -> Result<()> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    let sources = discover_sources(sources_dir)?;
    fs::create_dir_all(out)?;

    let summaries: Vec<String> = (0..count)
        .into_par_iter()
        .map(|i| -> Result<String> {
            let source = &sources[i % sources.len()];
            let walk = cfg.walk_config(cfg.seed.wrapping_add(i as u64));
            let scan = build_simulated_scan(
                &source.frames,
                &source.id,
                cfg.scan_frames,
                cfg.crop_size,
                &walk,
            )?;
            let dir = out.join(format!("scan_{i:05}"));
            let sigma0 = scan.sigma0;
            save_scan(&Scan::Simulated(scan), &dir)?;
            Ok(format!(
                "scan_{i:05}: source={} frames={} sigma0={sigma0:.3} seed={}",
                source.id, cfg.scan_frames, walk.seed
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for line in summaries {
        println!("{line}");
    }
    Ok(())
}

fn parse_variant(name: &str, mlr_sigma: f64) -> Result<TrainVariant> {
    match name {
        "rl-mgm" => Ok(TrainVariant::Scalar(MetricKind::Mgm)),
        "rl-mlr" => Ok(TrainVariant::Scalar(MetricKind::Mlr { sigma: mlr_sigma })),
        "rl-cnn" => Ok(TrainVariant::EndToEnd),
        other => Err(Error::Config(format!(
            "unknown training variant {other:?}; valid: rl-mgm, rl-mlr, rl-cnn"
        ))),
    }
}

fn cmd_train(
    scans_dir: &Path,
    val_dir: &Path,
    variant: &str,
    resume: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let variant = parse_variant(variant, cfg.mlr_sigma)?;
    let train_scans = ScanSet::from_dir(scans_dir)?;
    let val_scans = ScanSet::from_dir(val_dir)?;
    let resume_ckpt = resume.map(Checkpoint::load).transpose()?;
    let outcome = train(
        &train_scans,
        &val_scans,
        variant,
        &cfg.train_config(),
        resume_ckpt.as_ref(),
    )?;
    fs::create_dir_all(out)?;
    outcome.best.save(&out.join("best.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    println!(
        "trained {} for {} experiences over {} episodes; best validation MAE {:.4}",
        variant.name(),
        outcome.last.meta.experiences,
        outcome.log.rows.len(),
        outcome.best_val_mae
    );
    Ok(())
}

fn parse_policy(name: &str, ckpt: Option<&Path>, cfg: &RunConfig) -> Result<PolicySpec> {
    let spec = match name {
        "fixed" => PolicySpec::Fixed { f0: cfg.initial_f },
        "hc-mgm" => PolicySpec::HillClimb {
            kind: MetricKind::Mgm,
        },
        "hc-mlr" => PolicySpec::HillClimb {
            kind: MetricKind::Mlr {
                sigma: cfg.mlr_sigma,
            },
        },
        "rl-mgm" | "rl-mlr" | "rl-cnn" => {
            let path = ckpt.ok_or_else(|| {
                Error::Config(format!("policy {name} requires --ckpt <checkpoint>"))
            })?;
            let ckpt = Checkpoint::load(path)?;
            if ckpt.meta.variant != name {
                return Err(Error::ArchitectureMismatch(format!(
                    "checkpoint was trained as {}, requested policy {name}",
                    ckpt.meta.variant
                )));
            }
            PolicySpec::from_checkpoint(&ckpt)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown policy {other:?}; valid: {}",
                POLICY_NAMES.join(", ")
            )))
        }
    };
    Ok(spec)
}

fn table_row(report: &EvalReport) -> String {
    format!(
        "{:<10} {:.3}±{:.3}  in-focus {:.1}%",
        report.policy,
        report.mae,
        report.error_std,
        100.0 * report.in_focus_fraction
    )
}

fn cmd_eval(
    scans_dir: &Path,
    policy: &str,
    ckpt: Option<&Path>,
    compare: Option<&str>,
    compare_ckpt: Option<&Path>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let spec = parse_policy(policy, ckpt, cfg)?;
    let scans = ScanSet::from_dir(scans_dir)?;
    let initial = InitialFocus::Fixed(cfg.initial_f);
    let report = evaluate_policy(&spec, &scans, &initial, cfg.patch_size, cfg.seed)?;
    fs::create_dir_all(out)?;
    write_report_json(&report, &out.join("report.json"))?;
    export_paths_to_file(&report, &out.join("paths.csv"), cfg.smoothing_window)?;
    println!("{}", table_row(&report));

    if let Some(other) = compare {
        let other_spec = parse_policy(other, compare_ckpt, cfg)?;
        let other_report =
            evaluate_policy(&other_spec, &scans, &initial, cfg.patch_size, cfg.seed)?;
        write_report_json(&other_report, &out.join("report_compare.json"))?;
        export_paths_to_file(
            &other_report,
            &out.join("paths_compare.csv"),
            cfg.smoothing_window,
        )?;
        println!("{}", table_row(&other_report));
        let p = paired_significance(&report, &other_report, cfg.bootstrap_iterations, cfg.seed)?;
        println!("paired bootstrap p-value ({policy} vs {other}): {p:.4}");
    }
    Ok(())
}

fn cmd_oracle_focus(scan_dir: &Path) -> Result<()> {
    let scan = load_scan(scan_dir)?;
    let stack = match scan {
        Scan::Stack(s) => s,
        Scan::Simulated(_) => {
            return Err(Error::Incompatible(
                "oracle-focus expects a focal-stack scan, got a simulated scan".into(),
            ))
        }
    };
    let f_star: Vec<f64> = stack
        .images
        .iter()
        .map(|pose| oracle_optimal_focus(pose, &stack.focal_grid))
        .collect::<Result<Vec<_>>>()?;
    write_stack_f_star(scan_dir, f_star.clone())?;
    println!(
        "oracle focus written for {} poses (grid of {})",
        f_star.len(),
        stack.focal_grid.len()
    );
    Ok(())
}

fn cmd_export_paths(paths: &Path, out: &Path, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let mut reader = csv::Reader::from_path(paths)?;
    let headers = reader.headers()?.clone();
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for record in reader.records() {
        rows.push(record?);
    }
    // Group rows by scan while preserving order.
    let mut by_scan: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        by_scan.entry(row[0].to_string()).or_default().push(i);
    }
    let mut smooth = vec![0.0f64; rows.len()];
    for indices in by_scan.values() {
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| {
                rows[i][2]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad f_raw in row {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let averaged = crate::bench::moving_average(&raw, window);
        for (k, &i) in indices.iter().enumerate() {
            smooth[i] = averaged[k];
        }
    }
    let mut writer = csv::Writer::from_path(out)?;
    writer.write_record(&headers)?;
    for (i, row) in rows.iter().enumerate() {
        writer.write_record([
            &row[0],
            &row[1],
            &row[2],
            &smooth[i].to_string(),
            &row[4],
            &row[5],
        ])?;
    }
    writer.flush()?;
    Ok(())
}
