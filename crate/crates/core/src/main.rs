//! Command-line entry point for the whole pipeline.
//!
//! Exit codes: 0 on success, 1 for invalid input (bad flags, illegal signal
//! combinations), 2 for runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mogen::amg::{SignalConfig, SignalSet};
use mogen::checkpoint::Checkpoint;
use mogen::diagnostics::{dump_attention, feature_distribution, pipeline_grad_check, GRAD_CHECK_STEP};
use mogen::eval::{evaluate, run_ablation, write_ablation_csv, AblationEntry, EvalOptions};
use mogen::geometry::NormBox;
use mogen::image::Image;
use mogen::moca::{gen_dataset, load_dataset, save_dataset, DataItem, SceneConfig};
use mogen::model::{Mode, Model};
use mogen::schedule::NoiseSchedule;
use mogen::train::{train, training_checkpoint, Stage, TrainConfig, TrainState, OPTIMIZER_SEGMENT};
use mogen::{Error, ModelConfig, Result};

#[derive(Parser)]
#[command(name = "mogen", version, about = "Multi-object image generation with quantity-consistent conditioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene dataset.
    GenData(GenData),
    /// Train the backbone and text embeddings from scratch.
    Pretrain(TrainArgs),
    /// Train the semantic parser and layout adapters on a pretrained model.
    TrainRsa(TrainArgs),
    /// Train the guidance modules on a model from the previous stage.
    TrainAmg(TrainAmgArgs),
    /// Generate one image.
    Sample(SampleArgs),
    /// Generate images for a dataset and score them.
    Eval(EvalArgs),
    /// Score several checkpoints on the same items.
    Ablate(AblateArgs),
    /// Write phrase attention maps and feature histograms.
    Diagnose(DiagnoseArgs),
    /// Compare reverse-mode gradients with central differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    dir: PathBuf,
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint of the previous stage (required after pretraining).
    #[arg(long)]
    init: Option<PathBuf>,
    /// Continue an interrupted run of the same stage from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Use the small test configuration for a fresh model.
    #[arg(long)]
    tiny: bool,
}

#[derive(Args)]
struct TrainAmgArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Train guidance on the pretrained backbone without the parser.
    #[arg(long)]
    amg_only: bool,
    /// Comma-separated weights of T, T+S, T+O, T+B, T+O+B, T+S+O batches.
    #[arg(long)]
    subset_weights: Option<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Boxes as `x0,y0,x1,y1;x0,y0,x1,y1;...` in normalized coordinates.
    #[arg(long)]
    boxes: Option<String>,
    /// Structure reference image (PPM).
    #[arg(long)]
    structure: Option<PathBuf>,
    /// Comma-separated object reference images (PPM).
    #[arg(long)]
    objects: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "full")]
    mode: String,
    /// Signal configuration: T, T+S, T+O, T+B, T+O+B or T+S+O.
    #[arg(long, default_value = "T")]
    signals: String,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate only the first `limit` items.
    #[arg(long)]
    limit: Option<usize>,
    /// Summary CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-item CSV.
    #[arg(long)]
    items_out: Option<PathBuf>,
    /// Directory for the generated images.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Entries `name=mode:checkpoint`, e.g. `baseline=baseline:pre.ck`.
    #[arg(long = "entry", required = true)]
    entries: Vec<String>,
    #[arg(long, default_value = "T")]
    signals: String,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: Vec<String>,
    #[arg(long, default_value_t = 500)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

fn threads() -> usize {
    std::env::var("MOGEN_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn parse_mode(s: &str) -> Result<Mode> {
    [Mode::BASELINE, Mode::RSA_ONLY, Mode::AMG_ONLY, Mode::FULL]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::Validation(format!("unknown mode {s:?}; expected baseline, rsa-only, amg-only or full")))
}

fn load_items(dir: &Path, limit: Option<usize>) -> Result<Vec<DataItem>> {
    let mut items = load_dataset(dir)?;
    if let Some(n) = limit {
        items.truncate(n);
    }
    Ok(items)
}

fn run_training(args: &TrainArgs, stage: Stage, subset_weights: Option<[f64; 6]>) -> Result<()> {
    let data = load_dataset(&args.data)?;
    if data.is_empty() {
        return Err(Error::Validation(format!("dataset {} is empty", args.data.display())));
    }
    let mut cfg = TrainConfig { steps: args.steps, batch_size: args.batch, seed: args.seed, ..TrainConfig::new(stage) };
    if let Some(w) = subset_weights {
        cfg.subset_weights = w;
    }
    let (mut model, mut state) = if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path)?;
        let mut model = ck.to_model()?;
        model.store.train_only(|n| stage.trains(n));
        let seg = ck
            .segments
            .get(OPTIMIZER_SEGMENT)
            .ok_or_else(|| Error::Checkpoint(format!("{} holds no optimizer state", path.display())))?;
        let state = TrainState::from_segment(seg, &model.store)?;
        (model, state)
    } else {
        let model = match (&args.init, stage) {
            (Some(path), _) => Checkpoint::load(path)?.to_model()?,
            (None, Stage::Pretrain) => {
                let base = if args.tiny { ModelConfig::tiny() } else { ModelConfig::default() };
                Model::new(ModelConfig { image_size: data[0].image.width, ..base }, args.seed)?
            }
            (None, _) => return Err(Error::Validation("--init is required for this stage".into())),
        };
        let mut model = model;
        model.store.train_only(|n| stage.trains(n));
        let state = TrainState::fresh(&model.store);
        (model, state)
    };
    let log = train(&mut model, &data, &cfg, &mut state)?;
    if let Some(path) = &args.log {
        log.write_csv(path)?;
    }
    training_checkpoint(&model, &state)?.save(&args.out)?;
    if let Some(last) = log.losses.iter().rev().find(|l| !l.is_nan()) {
        println!("{}: {} steps, last loss {last:.6}", stage.name(), state.next_step);
    }
    Ok(())
}

fn parse_boxes(s: &str) -> Result<Vec<NormBox>> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(NormBox::parse).collect()
}

fn sample(args: &SampleArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let signals = SignalSet {
        structure: args.structure.as_deref().map(Image::read_ppm).transpose()?,
        objects: args
            .objects
            .as_deref()
            .map(|s| s.split(',').map(|p| Image::read_ppm(Path::new(p.trim()))).collect::<Result<Vec<_>>>())
            .transpose()?
            .unwrap_or_default(),
        boxes: args.boxes.as_deref().map(parse_boxes).transpose()?.unwrap_or_default(),
    };
    // Reject illegal combinations before touching the checkpoint.
    signals.validate()?;
    let model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let sched = NoiseSchedule::linear(model.cfg.timesteps)?;
    let img = model.sample(&[args.prompt.as_str()], &[&signals], mode, &[args.seed], args.steps, &sched)?;
    img[0].quantized().write_ppm(&args.out)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let mode = parse_mode(&args.mode)?;
    let config = SignalConfig::parse(&args.signals)?;
    let items = load_items(&args.data, args.limit)?;
    let model = Checkpoint::load(&args.ckpt)?.to_model()?;
    let opts = EvalOptions { n_steps: args.steps, seed: args.seed, threads: threads(), ..Default::default() };
    let (report, images) = evaluate(&model, mode, &items, config, &opts)?;
    let row = mogen::eval::AblationRow { name: mode.name().into(), signals: config, report };
    write_ablation_csv(std::slice::from_ref(&row), &args.out)?;
    if let Some(path) = &args.items_out {
        row.report.write_items_csv(path)?;
    }
    if let Some(dir) = &args.images {
        std::fs::create_dir_all(dir)?;
        for (i, img) in images.iter().enumerate() {
            img.quantized().write_ppm(&dir.join(format!("{i:06}.ppm")))?;
        }
    }
    println!(
        "{} {}: numerical {:.2} spatial {:.4} appearance {:.4} img {:.4}",
        row.name, config, row.report.numerical, row.report.spatial_sim, row.report.appearance_sim, row.report.img_sim
    );
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let config = SignalConfig::parse(&args.signals)?;
    let mut specs = Vec::new();
    for e in &args.entries {
        let (name, rest) = e.split_once('=').ok_or_else(|| Error::Validation(format!("entry {e:?} is not name=mode:checkpoint")))?;
        let (mode, path) = rest.split_once(':').ok_or_else(|| Error::Validation(format!("entry {e:?} is not name=mode:checkpoint")))?;
        specs.push((name.to_string(), parse_mode(mode)?, PathBuf::from(path)));
    }
    let items = load_items(&args.data, args.limit)?;
    let models = specs.iter().map(|(_, _, p)| Checkpoint::load(p)?.to_model()).collect::<Result<Vec<_>>>()?;
    let entries: Vec<AblationEntry<'_>> = specs
        .iter()
        .zip(&models)
        .map(|((name, mode, _), model)| AblationEntry { name: name.clone(), model, mode: *mode })
        .collect();
    let opts = EvalOptions { n_steps: args.steps, seed: args.seed, threads: threads(), ..Default::default() };
    let rows = run_ablation(&entries, &items, config, &opts)?;
    write_ablation_csv(&rows, &args.out)?;
    for r in &rows {
        println!("{} {}: numerical {:.2} spatial {:.4}", r.name, r.signals, r.report.numerical, r.report.spatial_sim);
    }
    Ok(())
}

fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    if args.prompt.is_empty() {
        return Err(Error::Validation("at least one --prompt is required".into()));
    }
    let model = Checkpoint::load(&args.ckpt)?.to_model()?;
    if args.t == 0 || args.t > model.cfg.timesteps {
        return Err(Error::Validation(format!("--t must lie in 1..={}", model.cfg.timesteps)));
    }
    std::fs::create_dir_all(&args.out_dir)?;
    for (i, p) in args.prompt.iter().enumerate() {
        dump_attention(&model, p, &args.out_dir.join(format!("attention_{i}.csv")))?;
    }
    let prompts: Vec<&str> = args.prompt.iter().map(String::as_str).collect();
    let [g, p] = feature_distribution(&model, &prompts, args.t, args.seed, &args.out_dir.join("features.csv"))?;
    println!("v_glob median {:.6} range [{:.4}, {:.4}]", g.median, g.min, g.max);
    println!("v_phr median {:.6} range [{:.4}, {:.4}]", p.median, p.min, p.max);
    Ok(())
}

fn grad_check(args: &GradCheckArgs) -> Result<bool> {
    let report = pipeline_grad_check(args.seed, GRAD_CHECK_STEP)?;
    for (name, err, n) in &report.entries {
        println!("{name}\t{err:.3e}\t{n}");
    }
    let worst = report.worst().cloned().unwrap_or_default();
    println!("max relative error {:.3e} ({})", worst.1, worst.0);
    Ok(report.max_error() < args.tolerance)
}

fn gen_data(args: &GenData) -> Result<()> {
    if args.max_objects == 0 {
        return Err(Error::Validation("--max-objects must be at least 1".into()));
    }
    let cfg = SceneConfig { image_size: args.image_size, max_objects: args.max_objects, ..Default::default() };
    if cfg.max_side > cfg.image_size {
        return Err(Error::Validation(format!("--image-size must be at least {}", cfg.max_side)));
    }
    let items = gen_dataset(args.seed, args.n, &cfg, ModelConfig::default().ref_size);
    save_dataset(&items, &args.dir)
}

fn parse_weights(s: &str) -> Result<[f64; 6]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| Error::Validation(format!("bad weight {x:?}"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| Error::Validation("expected six subset weights".into()))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(a) => gen_data(&a)?,
        Command::Pretrain(a) => run_training(&a, Stage::Pretrain, None)?,
        Command::TrainRsa(a) => run_training(&a, Stage::Rsa, None)?,
        Command::TrainAmg(a) => {
            let stage = if a.amg_only { Stage::AmgOnly } else { Stage::Amg };
            let w = a.subset_weights.as_deref().map(parse_weights).transpose()?;
            run_training(&a.train, stage, w)?
        }
        Command::Sample(a) => sample(&a)?,
        Command::Eval(a) => eval(&a)?,
        Command::Ablate(a) => ablate(&a)?,
        Command::Diagnose(a) => diagnose(&a)?,
        Command::GradCheck(a) => return grad_check(&a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e @ Error::Validation(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
