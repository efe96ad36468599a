//! `lssat`: train, evaluate and sweep texture-aware masked-autoencoding
//! classifiers, extract LDP images and generate synthetic datasets.
//!
//! Exit codes: 0 ok, 2 usage error, 3 data error, 4 numeric failure.
//! `LSSAT_THREADS` caps the worker threads used inside a run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lssat_core::data::{dataset_for, read_image, write_pgm};
use lssat_core::model::{load_checkpoint, save_checkpoint, TOY_PRESETS};
use lssat_core::report::aggregate_sweep;
use lssat_core::texture::{gray_image, ldp_image};
use lssat_core::train::evaluate_split;
use lssat_core::{
    Checkpoint, ConfigurationTriplet, DatasetSource, Error, ErrorKind, ExperimentConfig,
    RunReport, SplitFractions, SynthFamily, TaskKind,
};

#[derive(Parser)]
#[command(name = "lssat", version, about = "Texture-aware masked-autoencoding auxiliary training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of its (possibly overridden)
    /// dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/evaluate")]
        out: PathBuf,
    },
    /// Run every configuration triplet for each preset and write the tables.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Comma-separated backbone presets.
        #[arg(long, value_delimiter = ',', default_values_t = TOY_PRESETS.map(String::from))]
        presets: Vec<String>,
        /// Comma-separated triplets such as `RGB/LDP/RGB`; all five by default.
        #[arg(long, value_delimiter = ',')]
        triplets: Vec<String>,
        /// Cells trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Write the LDP code image of a PGM/PPM/PNG file as an 8-bit PGM.
    ExtractLdp {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Write a synthetic dataset as PPM images plus `labels.csv`.
    GenSynth {
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = DatasetArg::Synth)]
        family: DatasetArg,
        #[arg(long, default_value_t = 250)]
        per_class: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    /// Synthetic texture families.
    Synth,
    /// Synthetic raw vs locally smoothed noise.
    Deepfake,
    /// Image directory with a label CSV.
    Dir,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Multiclass,
    MultiAttribute,
}

/// Experiment settings: a JSON config file (or built-in defaults) with
/// per-field flag overrides.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON experiment config; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the desk-scale defaults instead of the full-scale ones.
    #[arg(long, conflicts_with = "config")]
    desk_scale: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    triplet: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    drop_path: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    shared_encoder: Option<bool>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Samples per class for synthetic datasets.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Train, val and test fractions, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
}

impl ConfigArgs {
    fn base(&self) -> lssat_core::Result<ExperimentConfig> {
        match (&self.config, self.desk_scale) {
            (Some(path), _) => ExperimentConfig::load(path),
            (None, true) => Ok(ExperimentConfig::desk_scale()),
            (None, false) => Ok(ExperimentConfig::default()),
        }
    }

    fn apply(&self, cfg: &mut ExperimentConfig, seed: Option<u64>) -> lssat_core::Result<()> {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        set!(
            preset, lambda, mask_ratio, patch_size, image_size, batch_size, epochs, lr_max,
            lr_min, weight_decay, momentum, drop_path, k, num_classes, shared_encoder
        );
        if let Some(t) = &self.triplet {
            cfg.triplet = t.parse::<ConfigurationTriplet>()?;
        }
        if let Some(task) = self.task {
            cfg.task = match task {
                TaskArg::Multiclass => TaskKind::Multiclass,
                TaskArg::MultiAttribute => TaskKind::MultiAttribute,
            };
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(f) = &self.split {
            cfg.split = SplitFractions {
                train: f[0],
                val: f[1],
                test: f[2],
            };
        }
        self.apply_dataset(cfg)
    }

    fn apply_dataset(&self, cfg: &mut ExperimentConfig) -> lssat_core::Result<()> {
        let kind = match (self.dataset, &cfg.dataset) {
            (Some(d), _) => d,
            (None, DatasetSource::Synthetic { family: SynthFamily::Textures, .. }) => DatasetArg::Synth,
            (None, DatasetSource::Synthetic { family: SynthFamily::Deepfake, .. }) => DatasetArg::Deepfake,
            (None, DatasetSource::Directory { .. }) => DatasetArg::Dir,
        };
        let (old_per_class, old_root, old_labels) = match &cfg.dataset {
            DatasetSource::Synthetic { per_class, .. } => (Some(*per_class), None, None),
            DatasetSource::Directory { root, labels } => (None, Some(root.clone()), Some(labels.clone())),
        };
        cfg.dataset = match kind {
            DatasetArg::Synth | DatasetArg::Deepfake => DatasetSource::Synthetic {
                family: if kind == DatasetArg::Synth {
                    SynthFamily::Textures
                } else {
                    SynthFamily::Deepfake
                },
                per_class: self.per_class.or(old_per_class).unwrap_or(250),
                classes: cfg.num_classes,
            },
            DatasetArg::Dir => {
                let missing = |flag: &str| Error::Config(format!("--dataset dir needs --{flag}"));
                DatasetSource::Directory {
                    root: self.data_root.clone().or(old_root).ok_or_else(|| missing("data-root"))?,
                    labels: self.labels.clone().or(old_labels).ok_or_else(|| missing("labels"))?,
                }
            }
        };
        Ok(())
    }

    fn resolve(&self, seed: Option<u64>) -> lssat_core::Result<ExperimentConfig> {
        let mut cfg = self.base()?;
        self.apply(&mut cfg, seed)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> lssat_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> lssat_core::Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the effective config and seed every run directory starts with.
fn echo(dir: &Path, cfg: &ExperimentConfig) -> lssat_core::Result<()> {
    create_dir(dir)?;
    cfg.save(&dir.join("config.json"))?;
    write(&dir.join("seed"), &format!("{}\n", cfg.seed))
}

fn summary(report: &RunReport) -> String {
    let auc = report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    format!(
        "accuracy {:.4}  auc {auc}  train {}  test {}",
        report.average_accuracy, report.train_size, report.test_size
    )
}

fn run(cli: Cli) -> lssat_core::Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = config.resolve(seed)?;
            if config.dry_run {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let data = dataset_for(&cfg)?;
            echo(&out, &cfg)?;
            let (report, model) = lssat_core::run_experiment(&cfg, &data)?;
            write(&out.join("report.json"), &report.to_json())?;
            save_checkpoint(&out.join("model.ckpt"), &Checkpoint::from_model(&model, &cfg))?;
            println!("{}", summary(&report));
        }
        Command::Evaluate {
            checkpoint,
            config,
            seed,
            out,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let mut cfg = match &config.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ckpt.config.clone(),
            };
            config.apply(&mut cfg, seed)?;
            cfg.validate()?;
            if cfg.preset != ckpt.preset {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds a {} model, config asks for {}",
                    ckpt.preset, cfg.preset
                )));
            }
            if config.dry_run {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let model = Checkpoint {
                config: cfg.clone(),
                ..ckpt
            }
            .into_model()?;
            let data = dataset_for(&cfg)?;
            echo(&out, &cfg)?;
            let report = evaluate_split(&model, &cfg, &data)?;
            write(&out.join("report.json"), &report.to_json())?;
            println!("{}", summary(&report));
        }
        Command::Sweep {
            config,
            seed,
            presets,
            triplets,
            jobs,
            out,
        } => {
            let cfg = config.resolve(Some(seed))?;
            let triplets = if triplets.is_empty() {
                ConfigurationTriplet::all()
            } else {
                triplets.iter().map(|t| t.parse()).collect::<lssat_core::Result<_>>()?
            };
            for p in &presets {
                lssat_core::model::backbone_preset(p)?;
            }
            if config.dry_run {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let data = dataset_for(&cfg)?;
            echo(&out, &cfg)?;
            let grid = lssat_core::run_sweep(&cfg, &triplets, &presets, &data, jobs)?;
            let table = aggregate_sweep(&grid, &out)?;
            print!("{}", table.to_csv());
        }
        Command::ExtractLdp { input, output, k } => {
            let img = read_image(&input)?;
            let ldp = ldp_image(&gray_image(&img, 0, 0)?, k)?;
            write_pgm(&output, &ldp.to_gray())?;
        }
        Command::GenSynth {
            out,
            family,
            per_class,
            classes,
            size,
            seed,
        } => {
            let data = match family {
                DatasetArg::Synth => lssat_core::data::generate_synthetic(per_class, classes, size, seed)?,
                DatasetArg::Deepfake => lssat_core::data::generate_deepfake_style(per_class, size, seed)?,
                DatasetArg::Dir => {
                    return Err(Error::Config("gen-synth needs --family synth or deepfake".into()))
                }
            };
            data.save(&out)?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("LSSAT_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("LSSAT_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
