//! Command-line front end for the whole pipeline: one binary, one config
//! file, and flags that only locate files or toggle config sections.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ez_core::dataset::{default_audio_loader, from_data_directory, Dataset, UtteranceDataset};
use ez_core::finetune::{inject_lora, LoraSpec};
use ez_core::manifest::{load_data_directory, DataDirectory};
use ez_core::model::TrainableModel;
use ez_core::reference::{generate_toy_corpus, ToyClassifier, ToyCorpusSpec};
use ez_core::trainer::{self, load_checkpoint, ModelConfig, TrainConfig};
use ez_core::{modelhub, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Every diagnostic line starts with this.
pub const ERROR_PREFIX: &str = "ez: error:";

/// Default adapter shape for `train --lora` when the config has no
/// `[lora]` section.
pub const DEFAULT_LORA_RANK: usize = 8;
pub const DEFAULT_LORA_ALPHA: f64 = 8.0;

#[derive(Debug, Parser)]
#[command(name = "ez", version, about = "Recipe-free speech training pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a Kaldi data directory and print one violation per line.
    ValidateDatadir { dir: PathBuf },

    /// Write a synthetic sine-tone corpus as a data directory.
    GenToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },

    /// Run only the statistics phase.
    CollectStats {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Statistics collection followed by training.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        valid_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Enable the `[lora]` section (defaults when absent).
        #[arg(long)]
        lora: bool,
        /// Enable the `[augmentation]` section (defaults when absent).
        #[arg(long)]
        augment: bool,
        /// Start from the parameters stored in this checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },

    /// Predict every utterance of a data directory with the best checkpoint.
    Infer {
        #[arg(long)]
        model_dir: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Fetch a pretrained bundle into the cache and print its path.
    Download {
        #[arg(long)]
        id: String,
        #[arg(long)]
        registry: String,
        /// Defaults to $EZ_HOME, then the per-user cache directory.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

/// Failure of a subcommand after argument parsing.
#[derive(Debug)]
enum Failure {
    Domain(Error),
    Message(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Domain(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Domain(e) => write!(f, "{e}"),
            Failure::Message(m) => f.write_str(m),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `argv` (including the program name), runs the subcommand, and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => return usage_error(e),
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            // Keep the diagnostic on a single greppable line.
            let msg = f.to_string().replace('\n', "; ");
            eprintln!("{ERROR_PREFIX} {msg}");
            EXIT_FAILURE
        }
    }
}

fn usage_error(e: clap::Error) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            print!("{e}");
            EXIT_OK
        }
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("{ERROR_PREFIX} no subcommand given");
            eprint!("{}", e.render());
            EXIT_USAGE
        }
        _ => {
            let rendered = e.render().to_string();
            let first = rendered
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid usage")
                .trim_start_matches("error: ");
            eprintln!("{ERROR_PREFIX} {first}");
            let mut cmd = <Cli as clap::CommandFactory>::command();
            eprintln!("{}", cmd.render_usage());
            eprintln!("Run `ez --help` for the list of subcommands.");
            EXIT_USAGE
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::ValidateDatadir { dir } => validate_datadir(&dir),
        Command::GenToy { out, n, classes, seed } => {
            let dd = generate_toy_corpus(&ToyCorpusSpec::new(n, classes, seed), &out)?;
            println!("wrote {} utterances to {}", dd.num_utterances(), out.display());
            Ok(())
        }
        Command::CollectStats { train_dir, config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let ds = load_dataset(&train_dir)?;
            let art = trainer::collect_stats_phase(&cfg, &ds, &out)?;
            let state = if art.recomputed { "collected" } else { "up to date" };
            println!(
                "statistics {state} for {} items in {}",
                art.shapes.len(),
                out.join(trainer::STATS_DIR).display()
            );
            Ok(())
        }
        Command::Train {
            config,
            train_dir,
            valid_dir,
            out,
            lora,
            augment,
            init_from,
        } => train(
            &config,
            &train_dir,
            &valid_dir,
            &out,
            lora,
            augment,
            init_from.as_deref(),
        ),
        Command::Infer {
            model_dir,
            data_dir,
            out,
        } => infer(&model_dir, &data_dir, &out),
        Command::Download {
            id,
            registry,
            cache_dir,
        } => {
            let root = cache_dir.unwrap_or_else(modelhub::default_cache_root);
            let bundle = modelhub::from_pretrained(&id, &root, &registry, &modelhub::DefaultTransport)?;
            println!("{}", bundle.root.display());
            Ok(())
        }
    }
}

fn validate_datadir(dir: &Path) -> CmdResult {
    let dd = match load_data_directory(dir) {
        Ok(dd) => dd,
        Err(Error::ValidationFailure(violations)) => {
            for v in &violations {
                println!("{v}");
            }
            return Err(Failure::Message(format!(
                "{} has {} violation(s)",
                dir.display(),
                violations.len()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    println!("{}: {} utterances, no violations", dir.display(), dd.num_utterances());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<UtteranceDataset, Error> {
    let dd = load_data_directory(dir)?;
    from_data_directory(&dd, default_audio_loader())
}

/// Number of classes implied by `class<k>` transcripts.
fn infer_num_classes(dirs: &[&DataDirectory]) -> Result<usize, Failure> {
    let mut max = None;
    for dd in dirs {
        for (id, t) in &dd.text {
            let k: usize = t
                .strip_prefix("class")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Failure::Message(format!(
                        "cannot infer the class count: transcript `{t}` of `{id}` is not a class token; set [model] n_classes"
                    ))
                })?;
            max = max.max(Some(k));
        }
    }
    Ok(max.map_or(2, |m| (m + 1).max(2)))
}

fn build_model(cfg: &TrainConfig) -> Result<TrainableModel, Error> {
    let m = cfg.model.as_ref().expect("model section resolved before building");
    let model = ToyClassifier::new(m.n_classes, m.sample_rate).into_model();
    match &cfg.lora {
        Some(spec) => inject_lora(&model, spec, cfg.seed),
        None => Ok(model),
    }
}

fn train(
    config: &Path,
    train_dir: &Path,
    valid_dir: &Path,
    out: &Path,
    lora: bool,
    augment: bool,
    init_from: Option<&Path>,
) -> CmdResult {
    let mut cfg = TrainConfig::load(config)?;
    cfg.lora = if lora {
        Some(
            cfg.lora
                .take()
                .unwrap_or_else(|| LoraSpec::new(&["W"], DEFAULT_LORA_RANK, DEFAULT_LORA_ALPHA)),
        )
    } else {
        None
    };
    cfg.augmentation = if augment {
        Some(cfg.augmentation.take().unwrap_or_default())
    } else {
        None
    };

    let train_dd = load_data_directory(train_dir)?;
    let valid_dd = load_data_directory(valid_dir)?;
    if cfg.model.is_none() {
        cfg.model = Some(ModelConfig {
            n_classes: infer_num_classes(&[&train_dd, &valid_dd])?,
            sample_rate: 16000,
        });
    }
    cfg.validate()?;

    let train_ds = from_data_directory(&train_dd, default_audio_loader())?;
    let valid_ds = from_data_directory(&valid_dd, default_audio_loader())?;

    let mut model = ToyClassifier::new(
        cfg.model.as_ref().map_or(2, |m| m.n_classes),
        cfg.model.as_ref().map_or(16000, |m| m.sample_rate),
    )
    .into_model();
    if let Some(path) = init_from {
        let ckpt = load_checkpoint(path)?;
        for (name, value) in &mut model.params {
            match ckpt.params.get(name) {
                Some(t) if t.shape == value.shape => *value = t.clone(),
                _ => {
                    return Err(Failure::Message(format!(
                        "{} has no parameter `{name}` with shape {:?}",
                        path.display(),
                        value.shape
                    )))
                }
            }
        }
    }
    if let Some(spec) = &cfg.lora {
        model = inject_lora(&model, spec, cfg.seed)?;
    }

    let result = trainer::train(&mut model, &train_ds, &valid_ds, &cfg, out, None)?;
    let last = result.history.last();
    println!(
        "trained {} epoch(s){}; best epoch {}; last valid loss {}",
        result.epochs_run,
        if result.stopped_early { " (stopped early)" } else { "" },
        result.best_epoch,
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.valid_loss)),
    );
    Ok(())
}

fn infer(model_dir: &Path, data_dir: &Path, out: &Path) -> CmdResult {
    let cfg = TrainConfig::load(model_dir.join(trainer::RESOLVED_CONFIG))?;
    if cfg.model.is_none() {
        return Err(Failure::Message(format!(
            "{} lacks a [model] section",
            model_dir.join(trainer::RESOLVED_CONFIG).display()
        )));
    }
    let mut model = build_model(&cfg)?;
    let ckpt = load_checkpoint(trainer::checkpoint_path(model_dir, trainer::BEST))?;
    let expected: BTreeSet<&String> = model.params.keys().collect();
    let found: BTreeSet<&String> = ckpt.params.keys().collect();
    if expected != found {
        return Err(Failure::Message(format!(
            "best checkpoint parameters {found:?} do not match the configured model {expected:?}"
        )));
    }
    model.params = ckpt.params;

    let ds = load_dataset(data_dir)?;
    let mut lines = String::new();
    let (mut correct, mut scored) = (0usize, 0usize);
    for i in 0..ds.len() {
        let item = ds.get_item(i)?;
        let pred = model.predict(&item)?;
        if let Some(text) = item.get("text").and_then(|t| t.as_tokens()) {
            scored += 1;
            correct += usize::from(text.trim() == pred);
        }
        lines.push_str(ds.id(i));
        lines.push('\t');
        lines.push_str(&pred);
        lines.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Message(format!("{}: {e}", parent.display())))?;
    }
    let mut f = fs::File::create(out).map_err(|e| Failure::Message(format!("{}: {e}", out.display())))?;
    f.write_all(lines.as_bytes())
        .map_err(|e| Failure::Message(format!("{}: {e}", out.display())))?;
    println!(
        "wrote {} predictions to {}; accuracy {:.4}",
        ds.len(),
        out.display(),
        correct as f64 / scored.max(1) as f64
    );
    Ok(())
}
