use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use tractory::evalmod::evaluate;
use tractory::fixel::build_fixels;
use tractory::learn::{load_checkpoint, save_checkpoint, DirectionModel};
use tractory::phantom::{generate, PhantomDataset, PhantomSpec};
use tractory::pipeline::{self, RunConfig};
use tractory::tracker::read_tck;
use tractory::volume::read_nifti;
use tractory::{Error, Result};

#[derive(Parser)]
#[command(
    name = "tractory",
    version,
    about = "Learned streamline tractography on synthetic phantoms"
)]
struct Cli {
    /// Worker threads; falls back to TRACTORY_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset (volumes, ground-truth tracks, masks).
    Phantom(PhantomArgs),
    /// Build a fixel map from one or more tractograms.
    Fixel(FixelArgs),
    /// Train the direction model on phantom datasets.
    Train(TrainArgs),
    /// Whole-brain tracking with a checkpoint or the FACT baseline.
    Track(TrackArgs),
    /// Score a tractogram against a phantom's bundle masks.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients of a model head.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration JSON; every section is optional.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Named layout; overrides the bundles of the config's phantom section.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FixelArgs {
    #[arg(long, required = true, num_args = 1..)]
    tracks: Vec<PathBuf>,
    /// Any NIfTI volume on the target grid.
    #[arg(long)]
    grid: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Phantom dataset directories.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Fixel atlas shared by all subjects.
    #[arg(long)]
    fixels: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrackArgs {
    #[arg(long, conflicts_with = "algo", required_unless_present = "algo")]
    checkpoint: Option<PathBuf>,
    /// Model-free baseline; only "fact" is available.
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    phantom: PathBuf,
    /// Fixel atlas; required with a checkpoint.
    #[arg(long)]
    fixels: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long)]
    phantom: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    checkpoint: Option<PathBuf>,
    /// Check a freshly initialised head of the given layer sizes.
    #[arg(long)]
    random: bool,
    #[arg(long, value_delimiter = ',', default_value = "32,16,16,3")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 200)]
    max_weights: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body =
                json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("TRACTORY_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                Error::InvalidArgument(format!("TRACTORY_THREADS='{v}' is not a count"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Fixel(a) => cmd_fixel(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Track(a) => cmd_track(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::from_json(&std::fs::read(p).map_err(|e| io_err(p, e))?),
        None => Ok(RunConfig::default()),
    }
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(p.to_path_buf())
    } else {
        Error::Io {
            path: p.to_path_buf(),
            source: e,
        }
    }
}

fn sha256_file(p: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(
        std::fs::read(p).map_err(|e| io_err(p, e))?,
    )))
}

/// SHA-256 of each input; directories contribute every file they hold.
fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            files.sort();
            for f in files {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

/// Printed on stdout before any compute and embedded in provenance records.
fn announce(command: &str, config: Value, inputs: &BTreeMap<String, String>) -> Value {
    let v = json!({ "command": command, "config": config, "inputs": inputs });
    println!("{v}");
    v
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| io_err(path, e))
}

fn provenance_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut spec = cfg.phantom;
    if let Some(name) = &a.preset {
        let dims = a.dims.map_or(spec.dims, |d| [d; 3]);
        let p = PhantomSpec::preset(name, dims, spec.seed)?;
        spec = PhantomSpec {
            dims,
            bundles: p.bundles,
            geometry_jitter_vox: p.geometry_jitter_vox,
            ..spec
        };
    } else if let Some(d) = a.dims {
        spec.dims = [d; 3];
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    spec.validate()?;
    let inputs = match &a.config.config {
        Some(p) => hash_inputs(&[p])?,
        None => BTreeMap::new(),
    };
    announce("phantom", serde_json::to_value(&spec)?, &inputs);
    let data = generate(&spec)?;
    let written = data.save(&a.out)?;
    println!(
        "{}",
        json!({ "written": written.len(), "bundles": data.bundles.iter().map(|b| &b.name).collect::<Vec<_>>() })
    );
    Ok(())
}

fn cmd_fixel(a: FixelArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut paths: Vec<&Path> = a.tracks.iter().map(|p| p.as_path()).collect();
    paths.push(&a.grid);
    let record = announce(
        "fixel",
        serde_json::to_value(cfg.fixel)?,
        &hash_inputs(&paths)?,
    );
    let (grid_vol, _) = read_nifti(&a.grid)?;
    let mut lines = Vec::new();
    for t in &a.tracks {
        lines.extend(read_tck(t)?.streamlines);
    }
    let map = build_fixels(
        lines.iter().map(|s| s.as_slice()),
        grid_vol.grid(),
        &cfg.fixel,
    )?;
    map.save(&a.out)?;
    write_json(&provenance_path(&a.out), &record)?;
    println!(
        "{}",
        json!({ "streamlines": lines.len(), "nonempty_voxels": map.n_nonempty() })
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut paths: Vec<&Path> = a.data.iter().map(|p| p.as_path()).collect();
    paths.push(&a.fixels);
    let conf = json!({ "features": cfg.features, "train": cfg.train });
    let record = announce("train", conf, &hash_inputs(&paths)?);
    let atlas = tractory::fixel::FixelMap::load(&a.fixels)?;
    let datasets = a
        .data
        .iter()
        .map(|d| PhantomDataset::load(d))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PhantomDataset> = datasets.iter().collect();
    let (model, curve) = pipeline::train_model(&refs, &atlas, &cfg.features, &cfg.train)?;
    save_checkpoint(&model, &a.out, record)?;
    let csv = a.out.join("loss.csv");
    std::fs::write(&csv, curve.to_csv()).map_err(|e| io_err(&csv, e))?;
    let last = curve.epochs.last();
    println!(
        "{}",
        json!({ "epochs": curve.epochs.len(), "stopped_early": curve.stopped_early, "final_loss": last.map(|e| e.loss), "final_mean_cos": last.map(|e| e.mean_cos) })
    );
    Ok(())
}

fn cmd_track(a: TrackArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.tracker.seed = s;
    }
    cfg.tracker.validate()?;
    let mut paths: Vec<&Path> = vec![&a.phantom];
    paths.extend(a.checkpoint.as_deref());
    paths.extend(a.fixels.as_deref());
    let algo = match (&a.algo, &a.checkpoint) {
        (Some(name), _) if name == "fact" => "fact",
        (Some(name), _) => {
            return Err(Error::InvalidArgument(format!(
                "unknown --algo '{name}'; only 'fact' is available"
            )))
        }
        (None, _) => "learned",
    };
    let record = announce(
        "track",
        json!({ "algo": algo, "tracker": cfg.tracker }),
        &hash_inputs(&paths)?,
    );
    let data = PhantomDataset::load(&a.phantom)?;
    let tractogram = match &a.checkpoint {
        None => pipeline::track_fact(&data, &cfg.tracker)?,
        Some(ck) => {
            let (model, _) = load_checkpoint(ck)?;
            check_model_config(&model, &a.config, &cfg)?;
            let fx = a.fixels.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--fixels is required with --checkpoint".into())
            })?;
            let atlas = tractory::fixel::FixelMap::load(fx)?;
            pipeline::track_learned(&model, &data, &atlas, &cfg.tracker)?
        }
    };
    tractogram.write_tck(&a.out)?;
    let mut record = record;
    record["report"] = serde_json::to_value(&tractogram.report)?;
    write_json(&provenance_path(&a.out), &record)?;
    println!(
        "{}",
        json!({ "launched": tractogram.report.merged.launched, "retention": tractogram.report.retention })
    );
    Ok(())
}

/// A config file given alongside a checkpoint must agree on the features.
fn check_model_config(model: &DirectionModel, arg: &ConfigArg, cfg: &RunConfig) -> Result<()> {
    if arg.config.is_some() && model.features != cfg.features {
        return Err(Error::Checkpoint(
            "feature config in --config differs from the checkpoint".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let record = announce(
        "eval",
        serde_json::to_value(cfg.eval)?,
        &hash_inputs(&[&a.tracks, &a.phantom])?,
    );
    let data = PhantomDataset::load(&a.phantom)?;
    let tck = read_tck(&a.tracks)?;
    let lines: Vec<&[[f64; 3]]> = tck.streamlines.iter().map(|s| s.as_slice()).collect();
    let report = evaluate(&lines, &data.grid, &data.regions(), &cfg.eval, None)?;
    let mut out = record;
    out["report"] = serde_json::to_value(&report)?;
    write_json(&a.out, &out)?;
    println!(
        "{}",
        json!({ "mean_dice": report.mean_dice, "assigned": report.assigned, "unassigned": report.unassigned })
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let (head, inputs) = match &a.checkpoint {
        Some(ck) => (load_checkpoint(ck)?.0.head, hash_inputs(&[ck])?),
        None => {
            let mut r = tractory::rng::stream(a.seed, tractory::rng::Domain::Init, &[200]);
            (
                tractory::learn::Mlp::random(&a.sizes, &mut r)?,
                BTreeMap::new(),
            )
        }
    };
    announce(
        "gradcheck",
        json!({ "sizes": head.sizes, "samples": a.samples, "eps": a.eps, "max_weights": a.max_weights, "tolerance": a.tolerance, "seed": a.seed }),
        &inputs,
    );
    let report = pipeline::grad_check_random_batch(&head, a.samples, a.eps, a.max_weights, a.seed)?;
    let passed = report.max_rel_error < a.tolerance;
    println!("{}", json!({ "report": report, "passed": passed }));
    if !passed {
        return Err(Error::Estimation(format!(
            "max relative gradient error {:.3e} exceeds {:.1e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}
