//! `comet` command-line driver: synthetic data generation, training,
//! tracking, evaluation and verification suites.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or I/O error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::exit;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use comet::evalbench::{
    emit_report, load_sequence, ope_metrics, parse_groundtruth, write_tracker_output, Report,
    SequenceRecord, SynthConfig,
};
use comet::onlinetracker::{track_sequence, EstimatorSpec, RefineConfig};
use comet::training::{train, TrainConfig};
use comet::verify::{run_suites, Suite};
use comet::{cometnet, Error, Result};

/// Fixed default seed so plain invocations are reproducible.
const DEFAULT_SEED: u64 = 1002;
/// Crop window area factor relative to the target box, matching training.
const AREA_FACTOR: f64 = 5.0;
/// Relative noise of the gt_jitter rough estimator.
const GT_JITTER_SIGMA: f64 = 0.1;
/// Step budget when --overfit runs without an explicit config.
const OVERFIT_STEPS: usize = 300;
/// Loss ratio the overfit sanity run must reach.
const OVERFIT_RATIO: f64 = 0.1;

#[derive(Parser)]
#[command(name = "comet", version, about = "Small-object tracker toolkit")]
struct Cli {
    /// Seed for every stochastic component.
    #[arg(long, global = true, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Progress chatter on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic sequences into a directory.
    Synth {
        /// Output directory; one subdirectory per sequence.
        #[arg(long)]
        out: PathBuf,
        /// JSON generator config; defaults to 10 easy sequences of 100 frames.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a directory of sequences.
    Train {
        /// Directory whose subdirectories are training sequences.
        #[arg(long)]
        data: PathBuf,
        /// JSON training config; defaults to the desk-scale recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path; the CSV loss log lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Re-feed one fixed batch every step as an optimization sanity
        /// check; fails (exit 1) unless the loss drops below 10% of its
        /// starting value.
        #[arg(long)]
        overfit: bool,
    },
    /// Track one sequence with a trained checkpoint.
    Track {
        /// Checkpoint written by `train`.
        #[arg(long)]
        ckpt: PathBuf,
        /// Sequence directory (frames/ plus groundtruth.txt).
        #[arg(long)]
        seq: PathBuf,
        /// Rough estimator feeding the refinement loop.
        #[arg(long, value_enum, default_value_t = EstimatorArg::GtJitter)]
        estimator: EstimatorArg,
        /// Output file, one "x,y,w,h" line per frame; fallback frames are
        /// listed in a ".flags" sidecar next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score tracker outputs against annotations and emit a report.
    Eval {
        /// Tracker output files, one per sequence, paired with --seq in order.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Sequence directories, one per --pred.
        #[arg(long, required = true)]
        seq: Vec<PathBuf>,
        /// Report directory (report.json, curves.csv, two SVG plots).
        #[arg(long)]
        report: PathBuf,
    },
    /// Run verification suites with fixed seeds.
    Verify {
        /// geometry, gradcheck, group-equiv or all.
        #[arg(long, default_value = "all")]
        suite: String,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimatorArg {
    #[value(name = "gt_jitter")]
    GtJitter,
    Ncc,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            exit(2);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Synth { out, config } => cmd_synth(&out, config.as_deref(), cli.seed, cli.verbose),
        Cmd::Train { data, config, out, overfit } => {
            cmd_train(&data, config.as_deref(), &out, overfit, cli.seed, cli.verbose)
        }
        Cmd::Track { ckpt, seq, estimator, out } => {
            cmd_track(&ckpt, &seq, estimator, &out, cli.seed, cli.verbose)
        }
        Cmd::Eval { pred, seq, report } => cmd_eval(&pred, &seq, &report, cli.seed),
        Cmd::Verify { suite } => cmd_verify(&suite, cli.seed),
    }
}

fn echo_config(tag: &str, value: &serde_json::Value) {
    println!("effective {tag} config: {value}");
}

fn cmd_synth(out: &Path, config: Option<&Path>, seed: u64, verbose: bool) -> Result<i32> {
    let cfg = match config {
        Some(p) => SynthConfig::from_json(&fs::read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    echo_config("synth", &serde_json::to_value(&cfg)?);
    fs::create_dir_all(out)?;
    for i in 0..cfg.num_sequences {
        let rec = comet::evalbench::synth_sequence(&cfg, i, seed)?;
        let dir = out.join(&rec.name);
        rec.write_to_dir(&dir)?;
        if verbose {
            eprintln!("wrote {}", dir.display());
        }
    }
    println!("synth: {} sequences under {}", cfg.num_sequences, out.display());
    Ok(0)
}

/// Loads every subdirectory of `dir` as a sequence, sorted by name.
fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Sequence(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Sequence(format!("no sequence directories under {}", dir.display())));
    }
    dirs.iter().map(|d| load_sequence(d)).collect()
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    overfit: bool,
    seed: u64,
    verbose: bool,
) -> Result<i32> {
    let cfg = match config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
        None => {
            let mut c = TrainConfig::desk();
            if overfit {
                c.steps = OVERFIT_STEPS;
            }
            c
        }
    };
    echo_config("train", &serde_json::to_value(&cfg)?);
    let dataset = load_dataset(data)?;
    if verbose {
        eprintln!("loaded {} sequences from {}", dataset.len(), data.display());
    }

    let log_path = out.with_extension("csv");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let (store, outcome) = train(&dataset, &cfg, seed, overfit, Some(&mut log))?;
    log.flush()?;
    cometnet::save_net(out, &cfg.net, &store)?;

    let ratio = outcome.final_loss / outcome.initial_loss;
    println!(
        "train: {} steps, loss {} -> {} (ratio {:.4}), checkpoint {}, log {}",
        outcome.steps,
        outcome.initial_loss,
        outcome.final_loss,
        ratio,
        out.display(),
        log_path.display(),
    );
    if overfit && !(ratio <= OVERFIT_RATIO) {
        eprintln!("overfit sanity failed: loss ratio {ratio:.4} above {OVERFIT_RATIO}");
        return Ok(1);
    }
    Ok(0)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".flags");
    PathBuf::from(s)
}

fn cmd_track(
    ckpt: &Path,
    seq: &Path,
    estimator: EstimatorArg,
    out: &Path,
    seed: u64,
    verbose: bool,
) -> Result<i32> {
    let (net_cfg, store) = cometnet::load_net(ckpt)?;
    let record = load_sequence(seq)?;
    let refine = RefineConfig::default();
    let (est_spec, est_name) = match estimator {
        EstimatorArg::GtJitter => (
            EstimatorSpec::GtJitter { sigma: GT_JITTER_SIGMA, seed: seed.wrapping_add(1) },
            "gt_jitter",
        ),
        EstimatorArg::Ncc => (EstimatorSpec::Ncc, "ncc"),
    };
    echo_config(
        "track",
        &json!({
            "ckpt": ckpt.display().to_string(),
            "seq": record.name,
            "estimator": est_name,
            "net": net_cfg,
            "refine": refine,
            "area_factor": AREA_FACTOR,
            "seed": seed,
        }),
    );

    let (boxes, fallbacks) =
        track_sequence(&record, &net_cfg, &store, &refine, AREA_FACTOR, est_spec, seed)?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    write_tracker_output(&mut w, &boxes)?;
    w.flush()?;

    let mut flags = String::new();
    for f in &fallbacks {
        flags.push_str(&format!("{f}\n"));
    }
    fs::write(sidecar_path(out), flags)?;
    if verbose {
        eprintln!("tracked {} frames, {} fallbacks", boxes.len(), fallbacks.len());
    }
    println!(
        "track: {} frames -> {} ({} fallback frames)",
        boxes.len(),
        out.display(),
        fallbacks.len()
    );
    Ok(0)
}

fn cmd_eval(preds: &[PathBuf], seqs: &[PathBuf], report_dir: &Path, seed: u64) -> Result<i32> {
    if preds.len() != seqs.len() {
        return Err(Error::Config(format!(
            "{} prediction files vs {} sequences; pair them one-to-one",
            preds.len(),
            seqs.len()
        )));
    }
    let config = json!({
        "pred": preds.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "seq": seqs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "seed": seed,
    });
    echo_config("eval", &config);

    let mut results = BTreeMap::new();
    let mut records = Vec::new();
    for (p, s) in preds.iter().zip(seqs) {
        let rec = load_sequence(s)?;
        let pred_boxes = parse_groundtruth(&fs::read_to_string(p)?)?;
        let res = ope_metrics(&pred_boxes, &rec.gt_boxes)?;
        if results.insert(rec.name.clone(), res).is_some() {
            return Err(Error::Config(format!("duplicate sequence name {}", rec.name)));
        }
        records.push(rec);
    }
    let report = Report::build(results, &records, config)?;
    emit_report(&report, report_dir)?;
    println!(
        "eval: {} sequences, precision@20 {:.4}, success@0.5 {:.4}, auc {:.4} -> {}",
        records.len(),
        report.overall.precision_at_20,
        report.overall.success_at_0_5,
        report.overall.auc,
        report_dir.display(),
    );
    Ok(0)
}

fn cmd_verify(suite: &str, seed: u64) -> Result<i32> {
    let which = Suite::parse(suite)?;
    echo_config("verify", &json!({ "suite": suite, "seed": seed }));
    let reports = run_suites(which, seed)?;
    let mut failed = false;
    for r in &reports {
        println!("{r}");
        for note in &r.notes {
            println!("  {note}");
        }
        failed |= !r.passed();
    }
    Ok(if failed { 1 } else { 0 })
}
