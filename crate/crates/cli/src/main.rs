use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pqvit::checkpoint::Checkpoint;
use pqvit::dataset::{decode_f32_le, generate_dataset, Dataset, DatasetSpec, Split};
use pqvit::metrics::{write_report, MetricsReport};
use pqvit::raster::{rasterize, ImageSpec};
use pqvit::signal::{DisturbanceClass, TimeGrid};
use pqvit::train::{check_geometry, evaluate, prepare_input, train, LabelMap, TrainConfig, TrainOptions};
use pqvit::vit::{argmax, ViTConfig};
use pqvit::Error;

/// Power-quality disturbance classification with a Vision Transformer.
///
/// Set PQVIT_THREADS to bound the worker thread count.
#[derive(Parser, Debug)]
#[command(name = "pqvit", version)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Gen(GenArgs),
    /// Render dataset records as PGM images.
    Render(RenderArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metric CSVs.
    Eval(EvalArgs),
    /// Classify one raw signal file.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Sampling frequency in Hz.
    #[arg(long, default_value_t = 3200.0)]
    fs: f64,
    /// Fundamental frequency in Hz.
    #[arg(long, default_value_t = 50.0)]
    f0: f64,
    /// Samples per record.
    #[arg(long, default_value_t = 650)]
    n_samples: usize,
}

impl GridArgs {
    fn grid(&self) -> TimeGrid {
        TimeGrid {
            fs: self.fs,
            f0: self.f0,
            n_samples: self.n_samples,
        }
    }
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 15_000)]
    per_class: usize,
    /// Comma-separated class ids (default: all 17).
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u8>>,
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of each class assigned to the training split.
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[command(flatten)]
    grid: GridArgs,
}

#[derive(Args, Debug, Clone)]
struct ImageArgs {
    #[arg(long, default_value_t = 224)]
    height: usize,
    #[arg(long, default_value_t = 224)]
    width: usize,
    #[arg(long, default_value_t = -2.2, allow_hyphen_values = true)]
    amp_min: f64,
    #[arg(long, default_value_t = 2.2)]
    amp_max: f64,
}

impl ImageArgs {
    fn spec(&self) -> ImageSpec {
        ImageSpec {
            height: self.height,
            width: self.width,
            amp_range: (self.amp_min, self.amp_max),
            ..ImageSpec::default()
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Test,
}

impl SplitArg {
    fn matches(self, split: Split) -> bool {
        match self {
            SplitArg::All => true,
            SplitArg::Train => split == Split::Train,
            SplitArg::Test => split == Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the PGM files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[command(flatten)]
    image: ImageArgs,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    #[arg(long, default_value_t = 768)]
    dim: usize,
    #[arg(long, default_value_t = 12)]
    layers: usize,
    #[arg(long, default_value_t = 12)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    /// Skip the layer norm before the head.
    #[arg(long)]
    no_final_norm: bool,
    #[arg(long, default_value_t = 1e-6)]
    ln_eps: f64,
    /// Weight initialization seed (default: the training seed).
    #[arg(long)]
    init_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Final checkpoint path.
    #[arg(long, default_value = "model.pqvt")]
    out: PathBuf,
    /// History CSV path (default: next to the checkpoint).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    eval_batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.02)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Save a checkpoint every N epochs (0: only the final one).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Directory for periodic checkpoints (default: next to the checkpoint).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Continue from a saved checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    image: ImageArgs,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the metric CSVs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Overrides the checkpoint's evaluation batch size.
    #[arg(long)]
    eval_batch_size: Option<usize>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Raw little-endian f32 samples.
    #[arg(long)]
    signal: PathBuf,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Ok(threads) = std::env::var("PQVIT_THREADS") {
        let n: usize = threads
            .parse()
            .with_context(|| format!("PQVIT_THREADS={threads} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir).with_context(|| format!("opening dataset {}", dir.display()))
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let classes = match a.classes {
        Some(ids) => ids.into_iter().map(DisturbanceClass::from_id).collect::<pqvit::Result<Vec<_>>>()?,
        None => DisturbanceClass::ALL.to_vec(),
    };
    let spec = DatasetSpec {
        per_class: a.per_class,
        classes,
        snr_db: a.snr_db,
        seed: a.seed,
        train_fraction: a.train_fraction,
        grid: a.grid.grid(),
    };
    let manifest = generate_dataset(&spec, &a.out)?;
    for (id, n) in manifest.class_counts() {
        println!("{}: {n}", DisturbanceClass::from_id(id)?);
    }
    println!(
        "train {}, test {}, total {} -> {}",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        manifest.entries.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let dataset = open_dataset(&a.dataset)?;
    let spec = a.image.spec();
    spec.validate()?;
    let entries: Vec<_> = dataset.manifest.entries.iter().filter(|e| a.split.matches(e.split)).collect();
    let store = match dataset.signal_store() {
        Ok(s) => s,
        Err(e) => match entries.first() {
            Some(first) => bail!(Error::Data(format!("cannot read record {}: {e}", first.index))),
            None => return Err(e.into()),
        },
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for e in &entries {
        let samples = store.get(e)?;
        let image = rasterize(&samples, &spec)?;
        image.write_pgm(&a.out.join(format!("{:06}_c{:02}.pgm", e.index, e.class_id)))?;
    }
    println!("wrote {} images to {}", entries.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let dataset = open_dataset(&a.dataset)?;
    let labels = LabelMap::for_dataset(&dataset);
    let image = a.image.spec();
    let model = ViTConfig {
        image_height: image.height,
        image_width: image.width,
        channels: image.channels,
        patch_size: a.model.patch_size,
        dim: a.model.dim,
        layers: a.model.layers,
        heads: a.model.heads,
        mlp_ratio: a.model.mlp_ratio,
        num_classes: labels.len(),
        final_norm: !a.model.no_final_norm,
        ln_eps: a.model.ln_eps,
        init_seed: a.model.init_seed.unwrap_or(a.seed),
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        eval_batch_size: a.eval_batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
    };
    let parent = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let options = TrainOptions {
        checkpoint_dir: Some(a.checkpoint_dir.unwrap_or_else(|| parent.clone())),
        resume,
    };
    let outcome = train(&dataset, &model, &config, &image, &options)?;
    if !parent.as_os_str().is_empty() {
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    outcome.checkpoint.save(&a.out)?;
    let history_path = a.history.unwrap_or_else(|| a.out.with_extension("history.csv"));
    outcome.history.write_csv(&history_path)?;

    let eval_acc = match outcome.history.records.last() {
        Some(r) => r.eval_acc,
        None => {
            let cm = evaluate(
                &outcome.checkpoint.model()?,
                &dataset,
                Split::Test,
                &image,
                &labels,
                config.eval_batch_size,
            )?;
            pqvit::metrics::accuracy(&cm)?
        }
    };
    println!("checkpoint: {}", a.out.display());
    println!("history: {}", history_path.display());
    println!("final eval accuracy: {eval_acc:.4}");
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let dataset = open_dataset(&a.dataset)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    if ck.header.grid != *dataset.grid() {
        bail!(Error::Config(format!(
            "checkpoint was trained on {:?}, dataset uses {:?}",
            ck.header.grid,
            dataset.grid()
        )));
    }
    let labels = LabelMap::for_dataset(&dataset);
    if labels.class_ids != ck.header.class_ids {
        bail!(Error::Config(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            ck.header.class_ids, labels.class_ids
        )));
    }
    check_geometry(&ck.header.model, &ck.header.image)?;
    let model = ck.model()?;
    let batch = a.eval_batch_size.unwrap_or(ck.header.train.eval_batch_size);
    let mut cm = pqvit::ConfusionMatrix::zeros(labels.len());
    for split in [Split::Train, Split::Test] {
        if a.split.matches(split) && dataset.manifest.count(split) > 0 {
            cm.merge(&evaluate(&model, &dataset, split, &ck.header.image, &labels, batch)?)?;
        }
    }
    let report = MetricsReport::from_confusion(&cm)?;
    let names: Vec<String> = labels.class_ids.iter().map(|id| format!("C{id}")).collect();
    write_report(&a.out, &cm, &report, &names)?;
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}",
        report.accuracy, report.macro_avg.precision, report.macro_avg.recall, report.macro_avg.f1
    );
    println!("reports: {}", a.out.display());
    Ok(())
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let raw = fs::read(&a.signal).with_context(|| format!("reading {}", a.signal.display()))?;
    let expected = ck.header.grid.n_samples;
    if raw.len() != 4 * expected {
        bail!(Error::Data(format!(
            "{} holds {} bytes; expected {expected} samples ({} bytes of f32)",
            a.signal.display(),
            raw.len(),
            4 * expected
        )));
    }
    let samples = decode_f32_le(&raw);
    let model = ck.model()?;
    let probs = model.forward(&prepare_input(&samples, &ck.header.image)?)?;
    let best = argmax(&probs);
    let class = DisturbanceClass::from_id(ck.header.class_ids[best])?;
    println!("class {} {}", class.id(), class.name());
    for (id, p) in ck.header.class_ids.iter().zip(&probs) {
        println!("C{id} {p:.9}");
    }
    Ok(())
}
