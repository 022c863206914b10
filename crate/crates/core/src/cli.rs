//! Command-line front end. `main` lives in `src/bin/efpn.rs`; everything
//! here is testable without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::RgbImage;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, image_to_tensor, load_checkpoint, load_dataset, load_image, save_checkpoint, save_dataset,
    save_image, ClassPalette, SegSample,
};
use crate::error::{Error, ErrorClass, Result};
use crate::imbalance::{
    apply_balance, balance_plan, combined_workflow, decompose, ClassStats, EnsembleBundle, GroupSpec,
};
use crate::mask::IndexMask;
use crate::metrics::ConfusionMatrix;
use crate::model::{gradcheck_model, EfpnConfig, EfpnModel};
use crate::tensor::Tensor;
use crate::trainer::{evaluate, split, Trainer};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Config => EXIT_CONFIG,
        ErrorClass::Data => EXIT_DATA,
        ErrorClass::Numeric => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "efpn", version, about = "Lightweight multi-scale feature pyramid segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a single model; writes checkpoints, history.csv and metrics.json.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue the run found in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint or ensemble directory on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory; the test split of the configured data otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Segment one image; writes a colour mask and optionally an overlay.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Print the fully resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the per-component parameter count.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the FLOP breakdown and the per-level ratio against the inception reference.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Input side length; the configured input size otherwise.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Finite-difference check of the whole model on a tiny configuration.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 2e-3)]
        tolerance: f64,
    },
    /// Generate the configured synthetic dataset into a directory.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Balance a dataset by under-sampling and augmentation.
    Augment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the class decomposition of the configured training data.
    Decompose {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run the decomposition and balancing workflow and evaluate the ensemble.
    Ensemble {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, resume } => train_cmd(&cfg.load()?, resume),
        Command::Eval { cfg, model, data } => eval_cmd(&cfg.load()?, &model, data.as_deref()),
        Command::Predict {
            cfg,
            model,
            input,
            output,
            overlay,
        } => predict_cmd(&cfg.load()?, &model, &input, &output, overlay.as_deref()),
        Command::Config { cfg } => {
            print!("{}", cfg.load()?.to_json());
            Ok(())
        }
        Command::Params { cfg } => {
            let c = cfg.load()?;
            let rows = c.model.param_breakdown();
            let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(5);
            for (name, n) in &rows {
                println!("{name:<width$} {n:>12}");
            }
            println!("{:<width$} {:>12}", "total", c.model.param_count());
            Ok(())
        }
        Command::Flops { cfg, size } => {
            let c = cfg.load()?;
            let size = size.unwrap_or(c.model.input_size);
            let probe = EfpnConfig {
                input_size: size,
                ..c.model.clone()
            };
            probe.validate()?;
            let rows = c.model.flop_breakdown(size);
            let width = rows.iter().map(|(name, _)| name.len()).max().unwrap_or(0).max(5);
            for (name, n) in &rows {
                println!("{name:<width$} {n:>16}");
            }
            println!("{:<width$} {:>16}", "total", c.model.flop_count(size));
            print_json(&probe.flop_ratio_vs_inception())
        }
        Command::Gradcheck {
            seed,
            epsilon,
            tolerance,
        } => {
            let report = gradcheck_model(&EfpnConfig::small(2, 16, 16, 16, 3), seed, epsilon, tolerance)?;
            println!(
                "max relative error {:.3e} over {} elements ({} skipped near kinks)",
                report.max_rel_error, report.checked, report.skipped
            );
            if report.passed {
                Ok(())
            } else {
                Err(Error::numeric(format!(
                    "gradient check failed: {:.3e} exceeds {:.1e}",
                    report.max_rel_error, tolerance
                )))
            }
        }
        Command::Synth { cfg, output } => {
            let c = cfg.load()?;
            let samples = generate_synthetic(&c.synthetic)?;
            save_dataset(&output, &samples, &c.palette()?)?;
            println!("wrote {} samples to {}", samples.len(), output.display());
            Ok(())
        }
        Command::Augment { cfg, output } => {
            let c = cfg.load()?;
            if let Some(src) = &c.dataset {
                let same = match (fs::canonicalize(src), fs::canonicalize(&output)) {
                    (Ok(a), Ok(b)) => a == b,
                    _ => false,
                };
                if same {
                    return Err(Error::usage("augment would overwrite its input dataset; choose another --output"));
                }
            }
            let samples = load_samples(&c)?;
            let stats = ClassStats::from_samples(&samples, c.model.num_classes);
            let plan = balance_plan(&stats, c.imbalance.cap);
            let balanced = apply_balance(&samples, &stats, &plan, &c.imbalance.augmentation)?;
            save_dataset(&output, &balanced, &c.palette()?)?;
            print_json(&seeded(&c, &plan))
        }
        Command::Decompose { cfg } => {
            let c = cfg.load()?;
            let (train, _, _) = split(&load_samples(&c)?, c.train.split, c.seed)?;
            let stats = ClassStats::from_samples(&train, c.model.num_classes);
            print_json(&seeded(&c, &decompose(&stats, c.imbalance.group_size, &c.imbalance.conflicts)?))
        }
        Command::Ensemble { cfg } => ensemble_cmd(&cfg.load()?),
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::data(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

/// Any JSON artifact, tagged with the root seed of the run that produced it.
#[derive(Serialize)]
struct Seeded<'a, T: Serialize> {
    seed: u64,
    #[serde(flatten)]
    body: &'a T,
}

fn seeded<'a, T: Serialize>(cfg: &RunConfig, body: &'a T) -> Seeded<'a, T> {
    Seeded { seed: cfg.seed, body }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::data(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The configured dataset directory, or the synthetic generator.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<SegSample>> {
    match &cfg.dataset {
        Some(dir) => load_dataset(dir, &cfg.palette()?),
        None => generate_synthetic(&cfg.synthetic),
    }
}

fn train_cmd(cfg: &RunConfig, resume: bool) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let samples = load_samples(cfg)?;
    let (train, val, test) = split(&samples, cfg.train.split, cfg.seed)?;
    log::info!("split: {} train, {} val, {} test", train.len(), val.len(), test.len());
    let state_path = out.join("train_state.bin");
    let mut trainer = if resume {
        let state = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let best_path = out.join("best.ckpt");
        let best = if best_path.exists() {
            Some(load_checkpoint(&best_path)?)
        } else {
            None
        };
        let mut t = Trainer::restore(load_checkpoint(&out.join("last.ckpt"))?, &state, best)?;
        if t.model.config() != &cfg.model {
            return Err(Error::config("the model section differs from the run being resumed"));
        }
        let stored = crate::trainer::TrainConfig {
            epochs: cfg.train.epochs,
            ..t.config.clone()
        };
        if stored != cfg.train {
            return Err(Error::config("only train.epochs may change when resuming"));
        }
        t.config.epochs = cfg.train.epochs;
        log::info!("resuming after epoch {}", t.epoch);
        t
    } else {
        fs::write(out.join("config.json"), cfg.to_json()).map_err(|e| Error::io(out.join("config.json"), e))?;
        Trainer::new(EfpnModel::build(cfg.model.clone(), cfg.seed)?, cfg.train.clone())?
    };
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.run_epoch(&train, &val)?;
        log::info!(
            "epoch {}: train loss {:.4}, val loss {:.4}, val mIoU {:.4}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_iou
        );
        save_checkpoint(&trainer.model, &out.join("last.ckpt"))?;
        if trainer.best.as_ref().is_some_and(|b| b.1 == r.epoch) {
            save_checkpoint(&trainer.best_model()?, &out.join("best.ckpt"))?;
        }
        fs::write(&state_path, trainer.state_bytes()).map_err(|e| Error::io(&state_path, e))?;
        trainer.history.write_csv(&out.join("history.csv"))?;
    }
    let best = trainer.best_model()?;
    save_checkpoint(&best, &out.join("best.ckpt"))?;
    trainer.history.write_csv(&out.join("history.csv"))?;
    if test.is_empty() {
        log::warn!("test split is empty; no metrics written");
        return Ok(());
    }
    let ev = evaluate(&best, &test, cfg.train.batch_size)?;
    let report = ev.confusion.report(&cfg.palette()?.ciw())?;
    write_json(&out.join("metrics.json"), &seeded(cfg, &report))?;
    print_json(&seeded(cfg, &report))
}

enum Predictor {
    Single(EfpnModel),
    Bundle(EnsembleBundle),
}

impl Predictor {
    fn load(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(Predictor::Bundle(EnsembleBundle::load(path)?))
        } else {
            Ok(Predictor::Single(load_checkpoint(path)?))
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            Predictor::Single(m) => m.num_classes(),
            Predictor::Bundle(b) => b.num_classes,
        }
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<IndexMask>> {
        match self {
            Predictor::Single(m) => m.predict(x),
            Predictor::Bundle(b) => Ok(b.predict(x)?.0),
        }
    }
}

fn eval_cmd(cfg: &RunConfig, model: &Path, data: Option<&Path>) -> Result<()> {
    let palette = cfg.palette()?;
    let predictor = Predictor::load(model)?;
    if predictor.num_classes() != palette.len() {
        return Err(Error::config(format!(
            "model predicts {} classes but the palette has {}",
            predictor.num_classes(),
            palette.len()
        )));
    }
    let samples = match data {
        Some(dir) => load_dataset(dir, &palette)?,
        None => split(&load_samples(cfg)?, cfg.train.split, cfg.seed)?.2,
    };
    let mut confusion = ConfusionMatrix::new(palette.len());
    for s in &samples {
        let pred = predictor.predict(&s.image)?;
        confusion.accumulate(&pred[0], &s.mask)?;
    }
    print_json(&seeded(cfg, &confusion.report(&palette.ciw())?))
}

fn predict_cmd(cfg: &RunConfig, model: &Path, input: &Path, output: &Path, overlay: Option<&Path>) -> Result<()> {
    let palette = cfg.palette()?;
    let predictor = Predictor::load(model)?;
    if predictor.num_classes() > palette.len() {
        return Err(Error::config(format!(
            "model predicts {} classes but the palette has only {}",
            predictor.num_classes(),
            palette.len()
        )));
    }
    let img = load_image(input)?;
    let mask = predictor.predict(&image_to_tensor(&img))?.remove(0);
    save_image(&palette.encode_mask(&mask)?, output)?;
    if let Some(path) = overlay {
        save_image(&blend(&img, &mask, &palette), path)?;
    }
    Ok(())
}

/// Paints defect pixels half-transparent in their class colour.
pub fn blend(img: &RgbImage, mask: &IndexMask, palette: &ClassPalette) -> RgbImage {
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let c = mask.get(y as usize, x as usize);
        if c == 0 {
            continue;
        }
        if let Some(rgb) = palette.color(c as usize) {
            for ch in 0..3 {
                px.0[ch] = ((px.0[ch] as u16 + rgb[ch] as u16) / 2) as u8;
            }
        }
    }
    out
}

fn ensemble_cmd(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.json"), cfg.to_json()).map_err(|e| Error::io(out.join("config.json"), e))?;
    let samples = load_samples(cfg)?;
    let (train, val, test) = split(&samples, cfg.train.split, cfg.seed)?;
    if test.is_empty() {
        return Err(Error::config("the ensemble workflow needs a non-empty test split"));
    }
    let ciw = cfg.palette()?.ciw();
    let outcome = combined_workflow(&train, &val, &test, &cfg.model, &cfg.train, &cfg.imbalance, &ciw)?;
    outcome.bundle.save(&out.join("ensemble"))?;
    for (j, h) in outcome.histories.iter().enumerate() {
        h.write_csv(&out.join(format!("history_group{j}.csv")))?;
    }
    let groups = GroupSummary::new(&outcome.bundle.group_spec, &outcome.group_train_sizes);
    write_json(&out.join("groups.json"), &seeded(cfg, &groups))?;
    write_json(&out.join("metrics.json"), &seeded(cfg, &outcome.metrics))?;
    print_json(&seeded(cfg, &outcome.metrics))
}

#[derive(Serialize)]
struct GroupSummary<'a> {
    groups: &'a [Vec<usize>],
    train_sizes: &'a [usize],
}

impl<'a> GroupSummary<'a> {
    fn new(spec: &'a GroupSpec, sizes: &'a [usize]) -> Self {
        GroupSummary {
            groups: &spec.groups,
            train_sizes: sizes,
        }
    }
}
