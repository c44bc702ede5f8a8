//! The `suit` command line.
//!
//! Every command reads one JSON config, optionally overrides its seeds and
//! output directory, and writes plain files:
//!
//! | command    | outputs                                                   |
//! |------------|-----------------------------------------------------------|
//! | `simulate` | `frames.bin`, `frames.truth.json`, `config.json`          |
//! | `train`    | `params.bin`, `loss.csv`, `config.json`                   |
//! | `eval`     | `eval.csv`, `fusion.csv`, `summary.txt`, `config.json`    |
//! | `bench`    | `bench.csv`, `bench.svg` (optional), `config.json`        |
//!
//! CSV schemas:
//!
//! * `loss.csv`: `step,loss,argmax_accuracy`
//! * `eval.csv`: `pipeline,max_dist,frame,tp,fp,fn,precision,recall`
//! * `fusion.csv`: `frame,bank_bytes,dense_bytes,samples_retained,samples_dropped,clamp_fraction,sample_ms,align_ms,warp_ms,merge_ms`
//! * `bench.csv`: see [`bench::BENCH_HEADER`]

pub mod bench;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::container::{self, TruthManifest};
use crate::error::{Error, Result};
use crate::eval::{compare_single_vs_fused, EvalReport};
use crate::fuse::SequenceRun;
use crate::geonet::{build_dataset, train, GeoNetParams, TrainOutcome};
use crate::sim::{simulate, SimFrame};

pub const FRAMES_FILE: &str = "frames.bin";
pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_ECHO_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(
    name = "suit",
    version,
    about = "Sparse temporal fusion on synthetic BEV heatmaps"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence.
    Simulate(CommonArgs),
    /// Fit the displacement network on a simulated sequence.
    Train(TrainArgs),
    /// Compare single-frame and fused detection.
    Eval(EvalArgs),
    /// Sweep grid sizes and sequence lengths for memory and latency.
    Bench(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frame container; defaults to `<out>/frames.bin`.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Frame container; defaults to `<out>/frames.bin`.
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// Trained parameters; defaults to `<out>/params.bin`.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

/// Loads, seeds and validates the config; returns it with the output dir.
pub fn prepare(args: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => {
            let (cfg, out) = prepare(a)?;
            let frames = cmd_simulate(&cfg, &out)?;
            let s = cfg.sim.spec;
            println!(
                "{} frames, {}x{} cells of {} m, {} channels, {} objects -> {}",
                frames.len(),
                s.height,
                s.width,
                s.cell_size,
                s.channels,
                cfg.sim.object_count,
                out.join(FRAMES_FILE).display()
            );
        }
        Command::Train(a) => {
            let (cfg, out) = prepare(&a.common)?;
            let frames = a.frames.clone().unwrap_or_else(|| out.join(FRAMES_FILE));
            let t = cmd_train(&cfg, &frames, &out)?;
            let last = t.trace.last().expect("at least one step");
            println!(
                "trained {} steps, final loss {:.6}",
                t.trace.len(),
                last.loss
            );
        }
        Command::Eval(a) => {
            let (cfg, out) = prepare(&a.common)?;
            let frames = a.frames.clone().unwrap_or_else(|| out.join(FRAMES_FILE));
            let params = a.params.clone().unwrap_or_else(|| out.join(PARAMS_FILE));
            let (single, fused, _) = cmd_eval(&cfg, &frames, &params, &out)?;
            print!("{}", summary_text(&single, &fused));
        }
        Command::Bench(a) => {
            let (cfg, out) = prepare(a)?;
            let rows = bench::cmd_bench(&cfg, &out)?;
            println!(
                "{} bench points -> {}",
                rows.len(),
                out.join(bench::BENCH_FILE).display()
            );
        }
    }
    Ok(())
}

/// Truth manifest path paired with a frame container.
pub fn truth_path(frames: &Path) -> PathBuf {
    frames.with_extension("truth.json")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<SimFrame>> {
    let frames = simulate(&cfg.sim)?;
    let path = out.join(FRAMES_FILE);
    fs::write(&path, container::encode_frames(&frames)?)?;
    write_json(
        &truth_path(&path),
        &container::manifest(&frames, cfg.echo()),
    )?;
    write_json(&out.join(CONFIG_ECHO_FILE), &cfg.echo())?;
    Ok(frames)
}

/// Reads a frame container and its truth manifest.
pub fn load_frames(path: &Path) -> Result<Vec<SimFrame>> {
    let bytes = fs::read(path)?;
    let text = fs::read_to_string(truth_path(path))?;
    let manifest: TruthManifest = serde_json::from_str(&text)?;
    container::decode_frames(&bytes, &manifest)
}

pub fn cmd_train(cfg: &RunConfig, frames_path: &Path, out: &Path) -> Result<TrainOutcome> {
    let frames = load_frames(frames_path)?;
    let channels = frames
        .first()
        .map_or(cfg.sim.spec.channels, |f| f.spec().channels);
    let dataset = build_dataset(&frames, &cfg.sampling, &cfg.geonet);
    let input = cfg.sampling.max_patch_cells() * channels;
    let init = GeoNetParams::init(
        input,
        cfg.geonet.hidden,
        cfg.geonet.window,
        cfg.geonet.init_seed,
    );
    let outcome = train(init, &dataset, &cfg.geonet.train)?;
    fs::write(
        out.join(PARAMS_FILE),
        container::encode_params(&outcome.params),
    )?;
    write_csv(&out.join("loss.csv"), &outcome.trace)?;
    write_json(&out.join(CONFIG_ECHO_FILE), &cfg.echo())?;
    Ok(outcome)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    frames_path: &Path,
    params_path: &Path,
    out: &Path,
) -> Result<(EvalReport, EvalReport, SequenceRun)> {
    let frames = load_frames(frames_path)?;
    let params = container::decode_params(&fs::read(params_path)?)?;
    let first = frames
        .first()
        .ok_or_else(|| Error::Mismatch("frame container holds no frames".into()))?;
    let expected = cfg.sampling.max_patch_cells() * first.spec().channels;
    if params.input_dim() != expected || params.window != cfg.geonet.window {
        return Err(Error::Mismatch(format!(
            "parameters take {} inputs over a {}x{} window; frames and config need {} inputs over {}x{}",
            params.input_dim(),
            params.window.height,
            params.window.width,
            expected,
            cfg.geonet.window.height,
            cfg.geonet.window.width
        )));
    }
    let (single, fused, run) = compare_single_vs_fused(
        &frames,
        &cfg.sampling,
        &params,
        &cfg.fusion,
        cfg.geonet.assign_radius,
        &cfg.eval,
        cfg.echo(),
    )?;
    let rows: Vec<_> = single.rows.iter().chain(&fused.rows).collect();
    write_csv(&out.join("eval.csv"), &rows)?;
    write_csv(&out.join("fusion.csv"), &run.reports)?;
    fs::write(out.join("summary.txt"), summary_text(&single, &fused))?;
    write_json(&out.join(CONFIG_ECHO_FILE), &cfg.echo())?;
    Ok((single, fused, run))
}

/// Human-readable comparison of two reports.
pub fn summary_text(single: &EvalReport, fused: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "format_version {}\n",
        crate::config::FORMAT_VERSION
    ));
    s.push_str("max_dist  single_P  single_R  fused_P  fused_R  delta_R\n");
    for (a, b) in single.means.iter().zip(&fused.means) {
        s.push_str(&format!(
            "{:>8.1}  {:>8.4}  {:>8.4}  {:>7.4}  {:>7.4}  {:>+7.4}\n",
            a.max_dist,
            a.precision,
            a.recall,
            b.precision,
            b.recall,
            b.recall - a.recall
        ));
    }
    for (name, r) in [("single", single), ("fused", fused)] {
        s.push_str(&format!("{name} matched-distance histogram (cells):\n"));
        for bin in &r.histogram {
            s.push_str(&format!(
                "  [{:.1}, {:.1})  {}\n",
                bin.lo, bin.hi, bin.count
            ));
        }
    }
    s
}

/// Caps the global worker pool from `SUIT_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SUIT_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n >= 1).ok_or_else(|| {
        Error::config(
            "SUIT_THREADS",
            format!("expected a positive integer, got {v:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config("SUIT_THREADS", e.to_string()))
}
