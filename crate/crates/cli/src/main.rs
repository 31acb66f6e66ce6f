//! `coda`: generate synthetic data, pretrain, adapt, evaluate and render.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Machine-readable results go to stdout as JSON; tables go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coda_core::dataset;
use coda_core::gradcheck;
use coda_core::imageio;
use coda_core::synth::{self, DomainSpec};
use coda_core::train::{self, CountingModel, DensityModel, JsonlLog, OracleModel};
use coda_core::{Checkpoint, CodaError, DenseGrid, TrainConfig};

#[derive(Parser)]
#[command(name = "coda", version, about = "Adversarial density adaption for object counting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target dataset pair.
    GenData(GenData),
    /// Stage 1: supervised pretraining on an annotated source dataset.
    Pretrain(Pretrain),
    /// Stage 2: adversarial adaption to unlabeled target images.
    Adapt(Adapt),
    /// Evaluate a checkpoint (or the ground-truth oracle) on annotated data.
    Eval(Eval),
    /// Render a DMAP density map as a grayscale PNG.
    Render(Render),
    /// Check analytic gradients against finite differences.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    /// Built-in domain pair ("shift": dense-small source, sparse-large target).
    #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
    preset: Option<String>,
    /// JSON file with `source` and `target` domain specifications.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory; receives `source/` and `target/`.
    #[arg(long)]
    out: PathBuf,
    /// Images per split.
    #[arg(long)]
    n: usize,
    /// Seed; the source uses 2·seed+1 and the target 2·seed+2.
    /// Without it a spec file's own seeds are used (preset: seed 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Square image side, overriding the preset or spec size.
    #[arg(long)]
    size: Option<usize>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct Pretrain {
    /// Training config (JSON); omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    /// Annotated source dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines log, one record per step (default: `<out>.log.jsonl`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct Adapt {
    /// Training config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Pretrained checkpoint, or a stage-2 checkpoint to resume from.
    #[arg(long)]
    ckpt: PathBuf,
    /// Annotated source dataset directory.
    #[arg(long)]
    source: PathBuf,
    /// Target image directory (only `images/` is read).
    #[arg(long)]
    target: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Held-out annotated target split for periodic evaluation snapshots.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// JSON-lines log (default: `<out>.log.jsonl`; appended when resuming).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Accept a target directory that carries annotations. They are never read.
    #[arg(long)]
    allow_annotated: bool,
}

#[derive(Args)]
struct Eval {
    /// Checkpoint to evaluate.
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Evaluate ground-truth maps against themselves (sanity check).
    #[arg(long)]
    oracle: bool,
    /// Annotated dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated GMAE levels.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    gmae_levels: Vec<u32>,
    /// Restrict counting to each annotation's region of interest.
    #[arg(long)]
    roi: bool,
    /// Config supplying the ground-truth kernel and, for --oracle, the
    /// output stride (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write each predicted density map as `<image_id>.dmap` here.
    #[arg(long)]
    dmap_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Render {
    /// Input DMAP file.
    #[arg(long)]
    dmap: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    /// Check only this operation.
    #[arg(long)]
    op: Option<String>,
    /// Seed for the random inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// List the operation names and exit.
    #[arg(long)]
    list: bool,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<CodaError> for Failure {
    fn from(e: CodaError) -> Self {
        Failure {
            code: if e.is_usage() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn runtime(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value"));
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

fn domain_pair(a: &GenData) -> Result<(DomainSpec, DomainSpec), Failure> {
    let (mut src, mut tgt) = match (&a.preset, &a.spec) {
        (Some(p), _) if p == "shift" => synth::preset_shift_pair(),
        (Some(p), _) => return Err(usage(format!("unknown preset `{p}` (known: shift)"))),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let field = |name: &str| -> Result<DomainSpec, Failure> {
                let part = v.get(name).ok_or_else(|| usage(format!("{}: missing `{name}`", path.display())))?;
                serde_json::from_value(part.clone()).map_err(|e| usage(format!("{}: `{name}`: {e}", path.display())))
            };
            (field("source")?, field("target")?)
        }
        (None, None) => return Err(usage("one of --preset or --spec is required")),
    };
    let seed = a.seed.or(a.preset.as_ref().map(|_| 0));
    if let Some(seed) = seed {
        src.seed = seed.wrapping_mul(2).wrapping_add(1);
        tgt.seed = seed.wrapping_mul(2).wrapping_add(2);
    }
    if let Some(side) = a.size {
        src.image_size = (side, side);
        tgt.image_size = (side, side);
    }
    Ok((src, tgt))
}

fn gen_data(a: GenData) -> CmdResult {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let (src, tgt) = domain_pair(&a)?;
    let non_empty = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return Err(runtime(format!(
            "{} exists and is not empty (use --force to write into it)",
            a.out.display()
        )));
    }
    let mut counts = serde_json::Map::new();
    for (split, spec) in [("source", &src), ("target", &tgt)] {
        let images = synth::generate_domain(spec, a.n)?;
        let mean = images.iter().map(|s| s.annotation.points.len()).sum::<usize>() as f64 / a.n as f64;
        dataset::write_annotated(a.out.join(split), &images)?;
        counts.insert(
            split.into(),
            serde_json::json!({"images": a.n, "mean_count": mean, "domain": spec.name, "seed": spec.seed}),
        );
    }
    print_json(&serde_json::Value::Object(counts));
    Ok(())
}

fn channels(cfg: &TrainConfig) -> usize {
    cfg.counting_net.in_channels
}

fn pretrain(a: Pretrain) -> CmdResult {
    let cfg = TrainConfig::load(&a.config)?;
    let source = dataset::load_annotated(&a.data, channels(&cfg))?;
    let mut log = JsonlLog::create(a.log.clone().unwrap_or_else(|| default_log(&a.out)))?;
    let ckpt = train::pretrain(&cfg, &source, &mut log)?;
    ckpt.save(&a.out)?;
    print_json(&serde_json::json!({"checkpoint": a.out, "stage": 1, "steps": cfg.stage1_steps}));
    Ok(())
}

fn adapt(a: Adapt) -> CmdResult {
    let cfg = TrainConfig::load(&a.config)?;
    if dataset::has_annotations(&a.target) && !a.allow_annotated {
        return Err(usage(format!(
            "target directory {} contains annotations; pass --allow-annotated to proceed (they are not read)",
            a.target.display()
        )));
    }
    let pretrained = Checkpoint::load(&a.ckpt)?;
    let source = dataset::load_annotated(&a.source, channels(&cfg))?;
    let target: Vec<DenseGrid> = dataset::load_images(&a.target, channels(&cfg))?
        .into_iter()
        .map(|s| s.image)
        .collect();
    let eval_set = a.eval.as_ref().map(|d| dataset::load_annotated(d, channels(&cfg))).transpose()?;
    let log_path = a.log.clone().unwrap_or_else(|| default_log(&a.out));
    let resuming = pretrained.scalar("meta.stage") == Some(2.0);
    let mut log = if resuming { JsonlLog::append(log_path)? } else { JsonlLog::create(log_path)? };
    let outcome = train::adapt(&cfg, &pretrained, &source, &target, eval_set.as_deref(), &mut log)?;
    outcome.checkpoint.save(&a.out)?;
    print_json(&serde_json::json!({
        "checkpoint": a.out,
        "stage": 2,
        "steps_run": outcome.alternation.len(),
        "resumed": resuming,
    }));
    Ok(())
}

fn eval(a: Eval) -> CmdResult {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let samples = dataset::load_annotated(&a.data, channels(&cfg))?;
    let model: Box<dyn DensityModel> = match &a.ckpt {
        Some(path) => Box::new(CountingModel::from_checkpoint(&Checkpoint::load(path)?)?),
        None => Box::new(OracleModel {
            sigma: cfg.sigma,
            stride: cfg.counting_net.output_stride(),
        }),
    };
    let name = a.data.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = train::evaluate_dataset(model.as_ref(), &samples, cfg.sigma, &a.gmae_levels, a.roi, &name)?;
    if let Some(dir) = &a.dmap_dir {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        for s in &samples {
            let id = &s.annotation.as_ref().expect("annotated").image_id;
            model.density(s)?.save_dmap(dir.join(format!("{id}.dmap")))?;
        }
    }
    eprint!("{}", report.table());
    let json = serde_json::to_value(&report).expect("report serializes");
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&json).expect("json"))
            .map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    }
    print_json(&json);
    Ok(())
}

fn render(a: Render) -> CmdResult {
    let map = DenseGrid::load_dmap(&a.dmap)?;
    imageio::render_density(&map, &a.out)?;
    Ok(())
}

fn run_gradcheck(a: Gradcheck) -> CmdResult {
    if a.list {
        print_json(&serde_json::json!(gradcheck::op_names()));
        return Ok(());
    }
    let results = gradcheck::run_suite(a.op.as_deref(), a.seed).map_err(|e| usage(e.to_string()))?;
    for r in &results {
        eprintln!("{:<24} {:.3e} {}", r.op, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    let all = results.iter().all(|r| r.passed);
    print_json(&serde_json::json!({
        "tolerance": gradcheck::GRAD_TOL,
        "passed": all,
        "ops": results,
    }));
    if all {
        Ok(())
    } else {
        Err(runtime("gradient check failed"))
    }
}
