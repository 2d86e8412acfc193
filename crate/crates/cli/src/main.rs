//! `vkd`: generate data, train, evaluate, predict and export latents.
//!
//! Exit codes: 0 ok, 1 check failure, 2 usage or configuration error,
//! 3 I/O or file-format error, 4 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use vkd_core::config::{self, Config};
use vkd_core::data::{self, Dataset};
use vkd_core::eval;
use vkd_core::gradcheck;
use vkd_core::tensor::OpKind;
use vkd_core::trainer::{self, TrainState};
use vkd_core::{Error, VkdModel};

#[derive(Parser)]
#[command(name = "vkd", version, about = "Variational knowledge distillation on paired image/text data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset in VKDS format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on one dataset, early-stopping on another.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training log CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write 0 in the log's wall_ms column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Per-class ROC AUC of image-only predictions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write image-only class probabilities.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_SAMPLES)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write conditional-prior means with labels for external embedding.
    ExportLatents {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every backward rule and objective.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        trials: u64,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Print every config key with its default.
    Keys,
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::Parse { .. } | Error::Checkpoint(_) => 3,
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => 4,
            _ => 2,
        };
        Failure { code, msg: e.to_string() }
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 2, msg: msg.into() }
}

fn load_config(path: Option<&Path>) -> Result<(Config, Vec<String>), Failure> {
    match path {
        None => Ok((Config::default(), Vec::new())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure {
                code: 3,
                msg: format!("{}: {e}", p.display()),
            })?;
            Ok((Config::parse(&text)?, Config::keys_in(&text)))
        }
    }
}

fn read_data(path: &Path) -> Result<Dataset, Failure> {
    data::read_dataset(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", path.display(), f.msg);
        f
    })
}

fn load_model(path: &Path) -> Result<VkdModel, Failure> {
    let state = trainer::load_checkpoint(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", path.display(), f.msg);
        f
    })?;
    Ok(state.best_model()?)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Failure {
        code: 3,
        msg: format!("{}: {e}", path.display()),
    })
}

fn gen_data(out: &Path, config: Option<&Path>, seed: Option<u64>) -> CliResult {
    let (mut cfg, _) = load_config(config)?;
    if let Some(s) = seed {
        cfg.gen.seed = s;
    }
    let ds = data::generate(&cfg.gen)?;
    data::write_dataset(&ds, out)?;
    println!("wrote {} samples to {}", ds.len(), out.display());
    let prev: Vec<String> = ds.prevalence().iter().map(|p| format!("{p:.4}")).collect();
    println!("prevalence {}", prev.join(" "));
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    val: &'a Path,
    config: Option<&'a Path>,
    out: &'a Path,
    log: Option<&'a Path>,
    resume: Option<&'a Path>,
    no_timing: bool,
}

fn train(a: TrainArgs) -> CliResult {
    let (mut cfg, explicit) = load_config(a.config)?;
    let train_ds = read_data(a.data)?;
    let val_ds = read_data(a.val)?;
    for (key, from_cfg, from_data) in [
        ("input_dim", cfg.model.input_dim, train_ds.input_dim),
        ("vocab", cfg.model.vocab, train_ds.vocab),
        ("n_classes", cfg.model.n_classes, train_ds.n_classes),
    ] {
        if explicit.iter().any(|k| k == key) && from_cfg != from_data {
            return Err(usage(format!("config sets {key}={from_cfg} but the data has {from_data}")));
        }
    }
    cfg.model.input_dim = train_ds.input_dim;
    cfg.model.vocab = train_ds.vocab;
    cfg.model.n_classes = train_ds.n_classes;

    let state = match a.resume {
        Some(p) => {
            let mut s = trainer::load_checkpoint(p)?;
            if s.model.config().latent_dim != cfg.model.latent_dim && explicit.iter().any(|k| k == "latent_dim") {
                return Err(Error::LatentDimMismatch {
                    config: cfg.model.latent_dim,
                    checkpoint: s.model.config().latent_dim,
                }
                .into());
            }
            if a.config.is_some() {
                s.config = cfg.train.clone();
            }
            s
        }
        None => TrainState::new(VkdModel::init(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?,
    };

    let mut log = Vec::new();
    let mut state = state;
    let result = (|| -> Result<(), Error> {
        while !state.finished() {
            trainer::run_epoch(&mut state, &train_ds, &val_ds, &mut log)?;
            if let Some(row) = log.iter().rev().find(|r| r.is_epoch_row()) {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  kl {:.4}  val auc {:.4}",
                    row.epoch, row.train.total, row.train.kl, row.val_macro_auc
                );
            }
        }
        Ok(())
    })();
    if let Some(p) = a.log {
        let rows: Vec<_> = if a.no_timing {
            log.iter().map(|r| r.without_timing()).collect()
        } else {
            log.clone()
        };
        write_file(p, &trainer::log_csv(&rows))?;
    }
    result?;
    trainer::save_checkpoint(&state, a.out)?;
    match state.early.best_auc {
        Some(auc) => println!("best validation macro AUC {auc:.4} after {} epochs", state.epoch),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn eval_cmd(data: &Path, model: &Path, samples: usize, seed: u64, report: Option<&Path>) -> CliResult {
    let ds = read_data(data)?;
    let m = load_model(model)?;
    let r = eval::evaluate(&m, &ds, samples, seed)?;
    println!("class  auc");
    for (j, a) in r.per_class.iter().enumerate() {
        match a {
            Some(a) => println!("{:>5}  {a:.4}", j + 1),
            None => println!("{:>5}  NA", j + 1),
        }
    }
    println!("macro  {:.4}", r.macro_auc);
    if !r.excluded.is_empty() {
        let ex: Vec<String> = r.excluded.iter().map(|j| (j + 1).to_string()).collect();
        println!("excluded (single-class labels): {}", ex.join(" "));
    }
    if let Some(p) = report {
        write_file(p, &r.to_csv())?;
    }
    Ok(())
}

fn infer(data: &Path, model: &Path, samples: usize, seed: u64, out: &Path) -> CliResult {
    let ds = read_data(data)?;
    let m = load_model(model)?;
    if m.config().input_dim != ds.input_dim {
        return Err(Error::DimensionMismatch {
            expected: format!("d={}", m.config().input_dim),
            found: format!("d={}", ds.input_dim),
        }
        .into());
    }
    let preds = eval::predict(&m, &ds.images()?, samples, seed)?;
    write_file(out, &eval::predictions_csv(&preds))
}

fn export(data: &Path, model: &Path, out: &Path) -> CliResult {
    let ds = read_data(data)?;
    let m = load_model(model)?;
    write_file(out, &eval::latents_csv(&m, &ds)?)
}

fn gradcheck_cmd(trials: u64, corrupt: Option<&str>) -> CliResult {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| usage(format!("unknown op family `{name}`")))?),
    };
    let report = gradcheck::run_suite(trials, fault)?;
    println!("{:<16} {:>7} {:>12}", "family", "trials", "max rel err");
    for e in &report.entries {
        let mark = if e.worst.max_rel_error < gradcheck::TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<16} {:>7} {:>12.3e}  {mark}", e.family, e.trials, e.worst.max_rel_error);
    }
    if report.passed() {
        println!("all checks below {:e}", gradcheck::TOLERANCE);
        return Ok(());
    }
    let msgs: Vec<String> = report
        .entries
        .iter()
        .filter(|e| !(e.worst.max_rel_error < gradcheck::TOLERANCE))
        .map(|e| {
            let w = &e.worst;
            format!(
                "{}: param {} index {}: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                e.family, w.param, w.index, w.analytic, w.numeric, w.max_rel_error
            )
        })
        .collect();
    Err(Failure {
        code: 1,
        msg: format!("gradient check failed\n{}", msgs.join("\n")),
    })
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData { out, config, seed } => gen_data(&out, config.as_deref(), seed),
        Command::Train {
            data,
            val,
            config,
            out,
            log,
            resume,
            no_timing,
        } => train(TrainArgs {
            data: &data,
            val: &val,
            config: config.as_deref(),
            out: &out,
            log: log.as_deref(),
            resume: resume.as_deref(),
            no_timing,
        }),
        Command::Eval {
            data,
            model,
            samples,
            seed,
            report,
        } => eval_cmd(&data, &model, samples, seed, report.as_deref()),
        Command::Infer {
            data,
            model,
            samples,
            seed,
            out,
        } => infer(&data, &model, samples, seed, &out),
        Command::ExportLatents { data, model, out } => export(&data, &model, &out),
        Command::Gradcheck { trials, corrupt } => gradcheck_cmd(trials, corrupt.as_deref()),
        Command::Keys => {
            print!("{}", config::help_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(config::help_text()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
