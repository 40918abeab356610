//! `relgraph` command-line entry point.
//!
//! Every command writes only under `--out`. Failures print one JSON line on
//! stderr and exit with 2 (usage), 3 (config), 4 (data or checkpoint) or
//! 5 (numeric failure).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relgraph::checkpoint::Checkpoint;
use relgraph::data::{
    compute_stats, generate_synthetic, load_annotations, save_annotations, AnnotatedImage,
    LoadOptions, SynthConfig,
};
use relgraph::gradsuite::run_suite;
use relgraph::loss::MaskingMode;
use relgraph::model::{Model, ModelConfig};
use relgraph::par::{derive_seed, Execution};
use relgraph::pipeline::{ablate, quantize};
use relgraph::quant::{params_checkpoint, QuantizedModel};
use relgraph::report::{self, Report};
use relgraph::tensor::gradcheck::DEFAULT_TOLERANCE;
use relgraph::train::{load_training, save_training, Precision, Session, TrainState};

#[derive(Parser, Debug)]
#[command(
    name = "relgraph",
    version,
    about = "Pairwise social-relation recognition toolkit"
)]
struct Cli {
    /// Model and training configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Run on one thread even when built with the parallel feature.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train and test splits.
    GenData(GenData),
    /// Dataset statistics and class weights.
    Stats(DataArg),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint with unilateral and bilateral masks.
    Eval(EvalArgs),
    /// Cumulative ablation over the five switches.
    Ablate(AblateArgs),
    /// Calibrate, fine-tune with fake quantization and export INT8.
    Quantize(QuantizeArgs),
    /// Write a deployable parameter file from a training checkpoint.
    Export(ExportArgs),
    /// Finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, default_value_t = 64)]
    images: usize,
    #[arg(long, default_value_t = 16)]
    test_images: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_persons: usize,
    #[arg(long, default_value_t = 4)]
    max_persons: usize,
    /// Comma-separated class probabilities.
    #[arg(long, value_delimiter = ',')]
    imbalance: Option<Vec<f64>>,
    /// Keep `synthetic:<seed>` references instead of writing PNG files.
    #[arg(long)]
    no_png: bool,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Annotation file.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Evaluated after every epoch when given.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Overrides the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a training checkpoint; its sidecar configuration wins.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct QuantizeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval: PathBuf,
    /// Float training checkpoint; without it a model is trained first.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Float epochs when no checkpoint is given.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Export INT8; requires calibrated activation ranges.
    #[arg(long)]
    int8: bool,
}

#[derive(Args, Debug)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }

    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            kind: "config",
            message: e.to_string(),
        }
    }

    fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 5,
            kind: "numeric",
            message: message.into(),
        }
    }
}

impl From<relgraph::Error> for Failure {
    fn from(e: relgraph::Error) -> Self {
        use relgraph::Error as E;
        let (code, kind) = match &e {
            E::Config(_) => (3, "config"),
            E::Data(_) | E::TooFewPersons(_) => (4, "data"),
            E::Format(_) | E::Io { .. } => (4, "io"),
            E::Numeric(_) | E::Shape(_) => (5, "numeric"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write_file(path: &Path, body: &str) -> CliResult {
    std::fs::write(path, body).map_err(|e| relgraph::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| relgraph::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

struct Ctx {
    cfg: ModelConfig,
    out: PathBuf,
    exec: Execution,
    seed: Option<u64>,
}

impl Ctx {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut cfg = match &cli.config {
            Some(p) => ModelConfig::load(p).map_err(Failure::config)?,
            None => ModelConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.train.seed = s;
        }
        create_dir(&cli.out)?;
        Ok(Self {
            cfg,
            out: cli.out.clone(),
            exec: if cli.sequential {
                Execution::Sequential
            } else {
                Execution::default()
            },
            seed: cli.seed,
        })
    }

    fn load_opts(cfg: &ModelConfig) -> LoadOptions {
        LoadOptions {
            classes: cfg.dims.classes,
            height: cfg.dims.image_height,
            width: cfg.dims.image_width,
        }
    }

    fn data(&self, path: &Path) -> CliResult<Vec<AnnotatedImage>> {
        Ok(load_annotations(path, Self::load_opts(&self.cfg))?)
    }

    fn emit(&self, r: &Report, stem: &str) -> CliResult {
        r.write(&self.out, stem)?;
        print!("{}", r.text);
        Ok(())
    }
}

fn gen_data(ctx: &Ctx, a: &GenData) -> CliResult {
    if ctx.cfg.dims.image_height != ctx.cfg.dims.image_width {
        return Err(Failure::config("synthetic images are square"));
    }
    let seed = ctx.seed.unwrap_or(ctx.cfg.train.seed);
    let base = SynthConfig {
        images: a.images,
        classes: a.classes.unwrap_or(ctx.cfg.dims.classes),
        min_persons: a.min_persons,
        max_persons: a.max_persons,
        imbalance: a.imbalance.clone(),
        seed,
        size: ctx.cfg.dims.image_height,
    };
    for (split, images, split_seed) in [
        ("train", a.images, seed),
        ("test", a.test_images, derive_seed(&[seed, 1])),
    ] {
        if images == 0 {
            continue;
        }
        let cfg = SynthConfig {
            images,
            seed: split_seed,
            ..base.clone()
        };
        let data = generate_synthetic(&cfg)?;
        let dir = ctx.out.join(split);
        create_dir(&dir)?;
        save_annotations(&dir.join("annotations.json"), &data, !a.no_png)?;
        println!("{split}: {} images -> {}", data.len(), dir.display());
    }
    Ok(())
}

fn stats(ctx: &Ctx, a: &DataArg) -> CliResult {
    let data = ctx.data(&a.data)?;
    let s = compute_stats(&data, ctx.cfg.dims.classes)?;
    ctx.emit(
        &Report {
            text: s.to_text(),
            kv: s.to_kv(),
        },
        "stats",
    )
}

fn train(ctx: &Ctx, a: &TrainArgs) -> CliResult {
    let (model, cfg, mut state) = match &a.resume {
        Some(p) => load_training(p)?,
        None => {
            let (model, params) = Model::new::<f32>(&ctx.cfg)?;
            (model, ctx.cfg.clone(), TrainState::new(params))
        }
    };
    let opts = Ctx::load_opts(&cfg);
    let train_data = load_annotations(&a.data, opts)?;
    let eval_data = a
        .eval
        .as_deref()
        .map(|p| load_annotations(p, opts))
        .transpose()?;
    let session = Session::new(&model, &train_data, ctx.exec)?;
    let epochs = a.epochs.unwrap_or(cfg.train.epochs);

    let log_path = ctx.out.join("train.jsonl");
    let file = if a.resume.is_some() {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(file.map_err(|e| relgraph::Error::Io {
        path: log_path.clone(),
        source: e,
    })?);
    let every = cfg.train.checkpoint_every;
    let mut best = state.best_map;
    let mut on_epoch = |l: &relgraph::train::EpochLog, s: &TrainState| -> relgraph::Result<()> {
        let line = serde_json::to_string(l).map_err(|e| relgraph::Error::Data(e.to_string()))?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| relgraph::Error::Io {
                path: log_path.clone(),
                source: e,
            })?;
        if every > 0 && s.epoch.is_multiple_of(every) {
            save_training(&ctx.out.join(format!("epoch{:04}.rgnet", s.epoch)), &cfg, s)?;
        }
        if s.best_map != best {
            best = s.best_map;
            save_training(&ctx.out.join("best.rgnet"), &cfg, s)?;
        }
        println!(
            "epoch {:>4}  loss {:.5}{}",
            l.epoch,
            l.loss,
            l.map.map(|m| format!("  mAP {m:.2}")).unwrap_or_default()
        );
        Ok(())
    };
    session.train(
        &mut state,
        &train_data,
        eval_data.as_deref(),
        epochs,
        &mut on_epoch,
    )?;
    save_training(&ctx.out.join("checkpoint.rgnet"), &cfg, &state)?;
    Ok(())
}

/// A checkpoint is either a training state or an INT8 export.
fn load_any(
    path: &Path,
) -> CliResult<(
    ModelConfig,
    relgraph::params::ParamStore<f32>,
    Option<QuantizedModel>,
)> {
    let c = Checkpoint::load(path)?;
    if c.get("state.step").is_some() {
        let (_, cfg, state) = load_training(path)?;
        Ok((cfg, state.params, None))
    } else {
        let q = QuantizedModel::load(path)?;
        Ok((q.config.clone(), q.params.clone(), Some(q)))
    }
}

fn eval(ctx: &Ctx, a: &EvalArgs) -> CliResult {
    let (cfg, params, q) = load_any(&a.checkpoint)?;
    let data = load_annotations(&a.data, Ctx::load_opts(&cfg))?;
    let (model, _) = Model::new::<f32>(&cfg)?;
    let mut session = Session::new(&model, &data, ctx.exec)?;
    session.max_persons = session.max_persons.max(cfg.dims.max_persons);
    let precision = q.as_ref().map_or(Precision::FLOAT, |q| q.precision());
    let uni = session.evaluate(&params, &data, MaskingMode::Unilateral, precision)?;
    let bi = session.evaluate(&params, &data, MaskingMode::Bilateral, precision)?;
    ctx.emit(
        &report::evaluation(&[("unilateral", &uni), ("bilateral", &bi)]),
        "eval",
    )
}

fn ablate_cmd(ctx: &Ctx, a: &AblateArgs) -> CliResult {
    let train_data = ctx.data(&a.data)?;
    let eval_data = ctx.data(&a.eval)?;
    let epochs = a.epochs.unwrap_or(ctx.cfg.train.epochs);
    let rows = ablate(&ctx.cfg, &train_data, &eval_data, epochs, ctx.exec)?;
    ctx.emit(&report::ablation(&rows), "ablation")
}

fn quantize_cmd(ctx: &Ctx, a: &QuantizeArgs) -> CliResult {
    let (model, cfg, mut state) = match &a.checkpoint {
        Some(p) => load_training(p)?,
        None => {
            let (model, params) = Model::new::<f32>(&ctx.cfg)?;
            (model, ctx.cfg.clone(), TrainState::new(params))
        }
    };
    let opts = Ctx::load_opts(&cfg);
    let train_data = load_annotations(&a.data, opts)?;
    let eval_data = load_annotations(&a.eval, opts)?;
    let session = Session::new(&model, &train_data, ctx.exec)?;
    if a.checkpoint.is_none() {
        let epochs = a.epochs.unwrap_or(cfg.train.epochs);
        session.train(&mut state, &train_data, None, epochs, &mut |_, _| Ok(()))?;
    }
    let (q, rep) = quantize(&session, &mut state, &train_data, &eval_data)?;
    let fp32_path = ctx.out.join("model-fp32.rgnet");
    params_checkpoint(&state.params).save(&fp32_path)?;
    write_file(&fp32_path.with_extension("toml"), &cfg.to_toml())?;
    q.save(&ctx.out.join("model-int8.rgnet"))?;
    save_training(&ctx.out.join("qat.rgnet"), &cfg, &state)?;
    ctx.emit(&report::quantization(&rep), "quantize")
}

fn export(ctx: &Ctx, a: &ExportArgs) -> CliResult {
    let (_, cfg, state) = load_training(&a.checkpoint)?;
    if a.int8 {
        let q = QuantizedModel::from_state(&cfg, &state)?;
        q.save(&ctx.out.join("model-int8.rgnet"))?;
    } else {
        let path = ctx.out.join("model-fp32.rgnet");
        params_checkpoint(&state.params).save(&path)?;
        write_file(&path.with_extension("toml"), &cfg.to_toml())?;
    }
    Ok(())
}

fn grad_check(ctx: &Ctx, a: &GradCheckArgs) -> CliResult {
    let first = ctx.seed.unwrap_or(0);
    let seeds: Vec<u64> = (first..first + a.seeds).collect();
    let results = run_suite(&seeds)?;
    ctx.emit(
        &report::gradient_checks(&results, DEFAULT_TOLERANCE),
        "gradcheck",
    )?;
    match results.iter().find(|r| r.max_rel_error > DEFAULT_TOLERANCE) {
        Some(r) => Err(Failure::numeric(format!(
            "gradient check {} seed {} has relative error {:.3e}",
            r.check, r.seed, r.max_rel_error
        ))),
        None => Ok(()),
    }
}

fn run(cli: &Cli) -> CliResult {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Stats(a) => stats(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Ablate(a) => ablate_cmd(&ctx, a),
        Command::Quantize(a) => quantize_cmd(&ctx, a),
        Command::Export(a) => export(&ctx, a),
        Command::GradCheck(a) => grad_check(&ctx, a),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = serde_json::json!({"error": f.kind, "code": f.code, "message": f.message});
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return fail(Failure::usage(first.trim_start_matches("error: ")));
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
