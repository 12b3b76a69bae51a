use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lss_core::shoot::{fit_templates, TemplateSet, Trajectory};
use lss_core::synth::{generate_dataset, read_dataset, write_dataset};
use lss_harness::bench::{bench_pool, CSV_HEADER};
use lss_harness::config::RunConfig;
use lss_harness::eval::{rows_csv, run_eval, EvalOptions};
use lss_harness::report::emit_report;
use lss_harness::train::{evaluate, train_from_config, Condition, Model, Planner};

#[derive(Parser)]
#[command(name = "lss", about = "Multi-camera BEV perception and planning on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Base seed of the samples; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and a report into the run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under test-time conditions.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Drop this many randomly chosen cameras per sample.
        #[arg(long, default_value_t = 0)]
        drop_cam: usize,
        /// Rotation noise σ in degrees applied to the extrinsics the model sees.
        #[arg(long, default_value_t = 0.0)]
        ext_noise_rot: f64,
        /// Translation noise σ in metres.
        #[arg(long, default_value_t = 0.0)]
        ext_noise_trans: f64,
        /// Comma-separated rig cameras to present, e.g. `0,1,2,3`.
        #[arg(long, value_delimiter = ',')]
        cameras: Option<Vec<usize>>,
        /// One row per dropped camera, then a `full` row.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit K-means templates to the expert trajectories of a dataset.
    FitTemplates {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-5/10/20 accuracy of a planning checkpoint.
    PlanEval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Time the pooling kernel against the reference paths.
    BenchPool {
        #[arg(long, default_value_t = 1_000_000)]
        max_points: usize,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write metrics, heatmaps and plan overlays for a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { config, out, count, seed } => {
            let cfg = RunConfig::load(&config)?;
            let samples = generate_dataset(seed.unwrap_or(cfg.seed), count, &cfg.rig()?, &cfg.world()?)?;
            write_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train_from_config(&cfg, &out)?;
            for (k, v) in &outcome.metrics {
                println!("{k} = {v}");
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            drop_cam,
            ext_noise_rot,
            ext_noise_trans,
            cameras,
            sweep,
            out,
        } => {
            let model = Model::load(&ckpt)?;
            let samples = read_dataset(&data)?;
            let opts = EvalOptions {
                cameras,
                drop_cam,
                noise_rot: ext_noise_rot,
                noise_trans: ext_noise_trans,
                sweep,
            };
            emit(&rows_csv(&run_eval(&model, &samples, &opts)?), out.as_ref())?;
        }
        Cmd::FitTemplates { data, k, out, seed } => {
            let samples = read_dataset(&data)?;
            let experts: Vec<Trajectory> = samples.iter().map(|s| s.expert.clone()).collect();
            let ts = fit_templates(&experts, k, seed)?;
            fs::write(&out, ts.to_text())?;
            println!("wrote {} templates to {}", ts.k(), out.display());
        }
        Cmd::PlanEval { ckpt, templates, data } => {
            let mut model = Model::load(&ckpt)?;
            let ts = TemplateSet::from_text(&fs::read_to_string(&templates)?)?;
            model.templates = Some(Planner::new(ts, &model.run)?);
            let samples = read_dataset(&data)?;
            let m = evaluate(&model, &samples, &Condition::clean(&model.run))?;
            let k = model.templates.as_ref().map_or(0, |p| p.set.k()) as f64;
            println!("metric,value,chance");
            for (name, v) in m {
                let top: f64 = name.trim_start_matches("top").parse().unwrap_or(f64::NAN);
                println!("{name},{v},{}", top / k);
            }
        }
        Cmd::BenchPool {
            max_points,
            channels,
            reps,
            seed,
            out,
        } => {
            let rows = bench_pool(max_points, channels, reps, seed)?;
            let mut text = format!("{CSV_HEADER}\n");
            for r in rows {
                text += &r.csv();
                text.push('\n');
            }
            emit(&text, out.as_ref())?;
        }
        Cmd::Report { run } => {
            emit_report(&run)?;
            println!("wrote {}", run.join("report").display());
        }
    }
    Ok(())
}
