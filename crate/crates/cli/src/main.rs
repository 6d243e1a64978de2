use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cgnn_core::bench::{bench, BenchConfig};
use cgnn_core::io::{
    load_model, read_dataset, read_dataset_header, save_model, simulate_to_file, write_atomic, write_jsonl, RunConfig,
};
use cgnn_core::model::predict;
use cgnn_core::pipeline::{evaluate_runs, train_on_runs, SplitName};
use cgnn_core::train::{Metrics, TrainMode};
use cgnn_core::types::{Condition, PointCloud};
use cgnn_core::Error;

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "CGNN_THREADS";

#[derive(Parser)]
#[command(name = "cgnn", version, about = "Mass-spring simulation and cGNN deformation/force prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Named starting configuration: full, desk or transfer-target.
    #[arg(long, default_value = "full")]
    preset: String,
    /// TOML file replacing the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, e.g. `train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(p) => at(p, RunConfig::load(p))?,
            None => RunConfig::preset(&self.preset)?,
        };
        base.with_overrides(&self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every indentation run and write a dataset file.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summary as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Train a model from scratch on a dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint path; the manifest goes next to it with a .toml extension.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history as JSON lines.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Continue training a checkpoint on another dataset.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Report mean ± std of the error metrics on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, required_unless_present = "identity")]
        checkpoint: Option<PathBuf>,
        /// Score the zero-motion, zero-force baseline instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        identity: bool,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Evaluate even if the dataset differs from the training dataset.
        #[arg(long)]
        allow_hash_mismatch: bool,
        /// Per-sample records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Summary as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the deformed surface and force change for one point cloud.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point cloud, one `x,y,z` line per point in mm.
        #[arg(long)]
        points: PathBuf,
        /// Indenter start and end, `x0,y0,z0,x1,y1,z1` in mm.
        #[arg(long, allow_hyphen_values = true)]
        condition: String,
        /// Deformed cloud in the same format.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one simulated force step against model inference.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the simulator settings from this dataset's header.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        repetitions: usize,
        #[arg(long, default_value_t = 5)]
        markers_per_side: usize,
        /// Report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) => 3,
        Error::Diverged { .. } | Error::BlowUp { .. } | Error::NotConverged { .. } => 4,
        _ => 2,
    }
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, r: Result<T, Error>) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn print_epoch(r: &cgnn_core::train::EpochRecord) {
    eprintln!(
        "epoch {:>4}  train loss {:.4} L_d {:.4} mm |dF| {:.4} N  val loss {:.4} L_d {:.4} mm |dF| {:.4} N  ({:.1}s)",
        r.epoch, r.train_loss, r.train_mean_ld, r.train_force_abs, r.val_loss, r.val_mean_ld, r.val_force_abs, r.seconds
    );
}

fn print_metrics(m: &Metrics) {
    println!("samples     {}", m.num_samples);
    println!("force MSE   {:.4} ± {:.4} N²", m.force_mse.mean, m.force_mse.std);
    println!("force |err| {:.4} ± {:.4} N", m.force_abs.mean, m.force_abs.std);
    println!("mean L_d    {:.4} ± {:.4} mm", m.mean_ld.mean, m.mean_ld.std);
    println!("max L_d     {:.4} ± {:.4} mm", m.max_ld.mean, m.max_ld.std);
}

fn parse_floats(text: &str, what: &str) -> Result<Vec<f64>, Error> {
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Format(format!("{what}: '{}' is not a number", t.trim()))))
        .collect()
}

fn read_points(path: &Path) -> Result<PointCloud, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(line, &format!("{} line {}", path.display(), i + 1))?;
        if v.len() != 3 {
            return Err(Error::Format(format!("{} line {}: expected 3 values, found {}", path.display(), i + 1, v.len())));
        }
        pts.push([v[0], v[1], v[2]]);
    }
    PointCloud::new(pts)
}

fn train_command(mut config: RunConfig, dataset: &Path, init: Option<&Path>, out: &Path, history: Option<&Path>) -> Result<(), Error> {
    let (_, hash, runs) = at(dataset, read_dataset(dataset))?;
    let weights = match init {
        Some(p) => {
            let (manifest, weights) = at(p, load_model(p))?;
            config.model = manifest.model;
            config.train.mode = TrainMode::Finetune;
            Some(weights)
        }
        None => None,
    };
    config.validate()?;
    let (outcome, manifest) = train_on_runs(&runs, &hash, &config, weights.as_ref(), print_epoch)?;
    if let Some(h) = history {
        write_jsonl(h, &outcome.history)?;
    }
    save_model(out, &outcome.best, &manifest)?;
    println!("best epoch {} val loss {:.4}; wrote {}", outcome.best_epoch, outcome.best_val_loss, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { config, out, summary } => {
            let config = config.resolve()?;
            let s = at(&out, simulate_to_file(&out, &config.dataset_header()?))?;
            let t = cgnn_core::train::Summary::of(s.run_seconds.iter().copied());
            println!("runs          {}", s.runs);
            println!("states        {}", s.states);
            println!("max depth     {:.3} mm", s.max_depth_mm);
            println!("time per run  {:.3} ± {:.3} s", t.mean, t.std);
            println!("total time    {:.1} s", s.total_seconds);
            if let Some(p) = summary {
                write_json(&p, &s)?;
            }
            Ok(())
        }
        Command::Train { config, dataset, out, history } => {
            train_command(config.resolve()?, &dataset, None, &out, history.as_deref())
        }
        Command::Finetune { config, checkpoint, dataset, out, history } => {
            train_command(config.resolve()?, &dataset, Some(&checkpoint), &out, history.as_deref())
        }
        Command::Eval { config, dataset, checkpoint, identity, split, allow_hash_mismatch, records, out } => {
            let mut config = config.resolve()?;
            let which: SplitName = split.parse()?;
            let (_, hash) = at(&dataset, read_dataset_header(&dataset))?;
            let weights = match (&checkpoint, identity) {
                (Some(p), false) => {
                    let (manifest, weights) = at(p, load_model(p))?;
                    if manifest.dataset_hash != hash && !allow_hash_mismatch {
                        return Err(Error::HashMismatch { expected: manifest.dataset_hash, found: hash });
                    }
                    config.model = manifest.model;
                    Some(weights)
                }
                _ => None,
            };
            let (_, _, runs) = at(&dataset, read_dataset(&dataset))?;
            let metrics = evaluate_runs(&runs, &config, which, weights.as_ref())?;
            print_metrics(&metrics);
            if let Some(p) = records {
                write_jsonl(&p, &metrics.samples)?;
            }
            if let Some(p) = out {
                write_json(&p, &metrics)?;
            }
            Ok(())
        }
        Command::Predict { checkpoint, points, condition, out } => {
            let (manifest, weights) = at(&checkpoint, load_model(&checkpoint))?;
            let cloud = at(&points, read_points(&points))?;
            let c = parse_floats(&condition, "condition")?;
            if c.len() != 6 {
                return Err(Error::Config(format!("condition needs 6 values, found {}", c.len())));
            }
            let condition = Condition::new([c[0], c[1], c[2]], [c[3], c[4], c[5]])?;
            let (deformed, force) = predict(&cloud, &condition, &weights, &manifest.model)?;
            write_atomic(&out, |w| {
                for p in deformed.points() {
                    writeln!(w, "{},{},{}", p[0], p[1], p[2])?;
                }
                Ok(())
            })?;
            println!("{}", serde_json::json!({ "points": deformed.len(), "force_change": force }));
            Ok(())
        }
        Command::Bench { config, checkpoint, dataset, repetitions, markers_per_side, out } => {
            let mut config = config.resolve()?;
            if let Some(d) = dataset {
                config.msm = at(&d, read_dataset_header(&d))?.0.msm;
            }
            let (manifest, weights) = at(&checkpoint, load_model(&checkpoint))?;
            let cfg = BenchConfig { repetitions, location: None, markers_per_side };
            let r = bench(&config.msm, &weights, &manifest.model, &cfg)?;
            println!("repetitions          {}", r.repetitions);
            println!("location             {} (step {} -> {})", r.location, r.from_step, r.from_step + 1);
            println!(
                "simulate force step  {:.6} ± {:.6} s  ({} points, {} solver steps)",
                r.simulate.seconds.mean, r.simulate.seconds.std, r.simulate.points, r.solver_steps
            );
            println!(
                "predict              {:.6} ± {:.6} s  ({} points)",
                r.predict_full.seconds.mean, r.predict_full.seconds.std, r.predict_full.points
            );
            println!(
                "predict markers      {:.6} ± {:.6} s  ({} points)",
                r.predict_markers.seconds.mean, r.predict_markers.seconds.std, r.predict_markers.points
            );
            println!("simulate / predict   {:.3}", r.ratio);
            if let Some(p) = out {
                write_json(&p, &r)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot start {n} threads: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
