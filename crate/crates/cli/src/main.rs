//! `boostemb` command-line driver.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use boostemb_core::data::synth_gaussian;
use boostemb_core::eval::evaluate;
use boostemb_core::gradcheck::{self, GradcheckOptions, Module};
use boostemb_core::trainer::{self, init_solver, metrics_csv, streams};
use boostemb_core::{
    Checkpoint, DiversityKind, EnsembleModel, Error, FeatureSet, GroupPartition, RegressorBank,
    Rng, TrainState,
};
use clap::{Args, Parser, Subcommand};

use config::{keys_help, Settings};

#[derive(Parser, Debug)]
#[command(
    name = "boostemb",
    version,
    about = "Boosted metric-embedding ensembles with diversity losses",
    after_long_help = keys_help() + "\nPrecedence: defaults < --config file < --set < dedicated flags.\n\
Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.\n\
Logging: BIER_LOG=error|warn|info|debug|trace."
)]
struct Cli {
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the `threads` key.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// `key = value` file; see `--help` for the keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian-cluster feature file.
    Gen {
        /// `key = value` file with the generator keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Generator key override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Write CSV instead of the binary format.
        #[arg(long)]
        csv: bool,
    },
    /// Fit the embedding matrix to the diversity loss alone.
    Init {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// activation | adversarial
        #[arg(long)]
        diversity: Option<String>,
    },
    /// Train with the boosted metric loss plus the diversity loss.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Full checkpoint to continue, or a model-only one to start from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics CSV destination.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Held-out set for the retrieval and correlation columns.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        diversity: Option<String>,
        #[arg(long)]
        lambda_div: Option<f64>,
    },
    /// Recall@K and learner correlations of a checkpoint.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated cut-offs.
        #[arg(long)]
        ks: Option<String>,
        /// Also write the CSV report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// all | losses | boosting | diversity
        #[arg(long, default_value = "all")]
        module: String,
        /// Negate the named gradient before comparing.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print group sizes for a split of d dimensions into m learners.
    Partition {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        m: usize,
        /// Use the published size table.
        #[arg(long)]
        preset: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::Io { source, context } if source.kind() == std::io::ErrorKind::NotFound => {
                Failure::Data(format!("file not found: {context}"))
            }
            Error::Io { .. } | Error::Format { .. } | Error::Parse { .. } => {
                Failure::Data(e.to_string())
            }
            _ if e.is_numeric_failure() => Failure::Numeric(e.to_string()),
            Error::Degenerate(_) | Error::UndefinedCorrelation(_) => {
                Failure::Numeric(e.to_string())
            }
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BIER_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn settings(cli_seed: Option<u64>, threads: Option<usize>, file: Option<&Path>, set: &[String]) -> Result<Settings, Failure> {
    let mut s = match file {
        Some(p) => Settings::load(p).map_err(|m| {
            if m.starts_with("file not found") {
                Failure::Data(m)
            } else {
                Failure::Usage(m)
            }
        })?,
        None => Settings::default(),
    };
    for kv in set {
        s.set_assignment(kv).map_err(Failure::Usage)?;
    }
    if let Some(seed) = cli_seed {
        s.set("seed", &seed.to_string()).map_err(Failure::Usage)?;
    }
    if let Some(t) = threads {
        s.set("threads", &t.to_string()).map_err(Failure::Usage)?;
    }
    Ok(s)
}

fn override_key(s: &mut Settings, key: &str, value: Option<String>) -> Outcome {
    if let Some(v) = value {
        s.set(key, &v).map_err(Failure::Usage)?;
    }
    Ok(())
}

fn load_features(path: &Path) -> Result<FeatureSet, Failure> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let set = if is_csv {
        FeatureSet::load_csv(path)
    } else {
        FeatureSet::load(path)
    };
    Ok(set?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("creating {}: {e}", path.display())))
}

fn dispatch(cli: Cli) -> Outcome {
    let (seed, threads) = (cli.seed, cli.threads);
    match cli.command {
        Command::Gen { spec, set, out, csv } => {
            let s = settings(seed, None, spec.as_deref(), &set)?;
            let spec = s.synth_spec().map_err(Failure::Usage)?;
            let data = synth_gaussian(&spec)?;
            if csv {
                let w = data.write_csv(create(&out)?)?;
                w.into_inner()
                    .map_err(|e| Failure::Data(format!("writing {}: {e}", out.display())))?;
            } else {
                data.save(&out)?;
            }
            println!(
                "wrote {} samples, {} classes, {} features to {}",
                data.len(),
                data.n_classes,
                data.dim(),
                out.display()
            );
            Ok(())
        }
        Command::Init {
            data,
            cfg,
            out,
            diversity,
        } => {
            let mut s = settings(seed, threads, cfg.config.as_deref(), &cfg.set)?;
            override_key(&mut s, "diversity", diversity)?;
            let tc = s.train_config().map_err(Failure::Usage)?;
            let ic = s.init_config().map_err(Failure::Usage)?;
            let set = load_features(&data)?;
            let partition = tc.partition.resolve(tc.embed_dim, tc.learners)?;
            let mut rng = Rng::with_stream(tc.seed, streams::MODEL_INIT);
            let mut model = EnsembleModel::random(set.dim(), partition, tc.backbone_hidden, &mut rng)?;
            let hidden = (0..set.len())
                .map(|i| model.hidden(set.sample(i)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut bank = match ic.kind {
                DiversityKind::Adversarial => {
                    let mut rng = Rng::with_stream(tc.seed, streams::BANK_INIT);
                    let b = RegressorBank::random(&model.partition, tc.regressor_hidden, &mut rng)?;
                    println!(
                        "regressor bank: {} regressors, hidden width {}, seed {}",
                        b.len(),
                        tc.regressor_hidden,
                        tc.seed
                    );
                    Some(b)
                }
                DiversityKind::Activation => None,
            };
            let report = init_solver(&hidden, &mut model, bank.as_mut(), &ic)?;
            println!(
                "{} diversity loss: {:.6e} -> {:.6e} after {} iterations{}",
                ic.kind,
                report.initial_loss,
                report.final_loss,
                report.iterations,
                if report.converged { " (converged)" } else { "" }
            );
            println!(
                "interaction term: {:.6e} -> {:.6e}",
                report.initial_interaction(),
                report.final_interaction()
            );
            println!(
                "squared norms in [{:.6}, {:.6}], band 1 ± {}: {}",
                report.min_sq_norm,
                report.max_sq_norm,
                ic.norm_band,
                if report.within_band { "within" } else { "OUTSIDE" }
            );
            Checkpoint::model_only(model, bank).save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Train {
            data,
            cfg,
            out,
            resume,
            metrics,
            eval_data,
            iterations,
            diversity,
            lambda_div,
        } => {
            let mut s = settings(seed, threads, cfg.config.as_deref(), &cfg.set)?;
            override_key(&mut s, "iterations", iterations.map(|v| v.to_string()))?;
            override_key(&mut s, "diversity", diversity)?;
            override_key(&mut s, "lambda_div", lambda_div.map(|v| v.to_string()))?;
            let tc = s.train_config().map_err(Failure::Usage)?;
            let train = load_features(&data)?;
            let eval = eval_data.as_deref().map(load_features).transpose()?;
            let mut state = match resume {
                Some(p) => {
                    let ckpt = Checkpoint::load(&p)?;
                    if ckpt.model.input_dim() != train.dim() {
                        return Err(Failure::Usage(format!(
                            "checkpoint expects {} features, data has {}",
                            ckpt.model.input_dim(),
                            train.dim()
                        )));
                    }
                    TrainState::resume(tc, ckpt)?
                }
                None => TrainState::new(tc, train.dim())?,
            };
            let start = state.iteration;
            let rows = trainer::run(&mut state, &train, eval.as_ref())?;
            if let Some(path) = metrics {
                let mut w = create(&path)?;
                w.write_all(metrics_csv(&rows).as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))?;
            }
            state.checkpoint().save(&out)?;
            if let Some(last) = rows.last() {
                println!("{}", trainer::METRICS_HEADER);
                println!("{}", last.to_csv_line());
            }
            println!(
                "trained iterations {}..{}, wrote {}",
                start,
                state.iteration,
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            data,
            ckpt,
            cfg,
            ks,
            csv,
        } => {
            let mut s = settings(seed, threads, cfg.config.as_deref(), &cfg.set)?;
            override_key(&mut s, "ks", ks)?;
            let opts = s.eval_options().map_err(Failure::Usage)?;
            let set = load_features(&data)?;
            let model = Checkpoint::load(&ckpt)?.model;
            if model.input_dim() != set.dim() {
                return Err(Failure::Usage(format!(
                    "checkpoint expects {} features, data has {}",
                    model.input_dim(),
                    set.dim()
                )));
            }
            if let Some(&k) = opts.ks.iter().find(|&&k| k >= set.len()) {
                return Err(Failure::Usage(format!(
                    "K={k} must be smaller than the {} samples",
                    set.len()
                )));
            }
            let report = evaluate(&model, &set, &opts)?;
            print!("{}", report.to_table());
            println!();
            print!("{}", report.to_csv());
            if let Some(path) = csv {
                let mut w = create(&path)?;
                w.write_all(report.to_csv().as_bytes())
                    .and_then(|_| w.flush())
                    .map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Gradcheck {
            module,
            inject_fault,
        } => {
            let modules = match module.as_str() {
                "all" => None,
                m => Some(vec![m.parse::<Module>()?]),
            };
            let report = gradcheck::run(&GradcheckOptions {
                modules,
                seed: seed.unwrap_or(0),
                inject_fault,
            })?;
            for c in &report.checks {
                println!(
                    "{:<5} {}/{:<36} worst rel. error {:.3e} over {} instances",
                    if c.passed() { "ok" } else { "FAIL" },
                    c.module,
                    c.name,
                    c.worst_rel_error,
                    c.instances
                );
            }
            for (m, worst) in report.worst_per_module() {
                println!("module {m:<10} worst rel. error {worst:.3e}");
            }
            if report.passed() {
                println!("all gradients within {:e}", gradcheck::TOLERANCE);
                Ok(())
            } else {
                let names: Vec<String> = report
                    .failures()
                    .map(|c| format!("{}/{}", c.module, c.name))
                    .collect();
                Err(Failure::Numeric(format!(
                    "gradient check failed: {}",
                    names.join(", ")
                )))
            }
        }
        Command::Partition { d, m, preset } => {
            let p = if preset {
                GroupPartition::preset(d, m).ok_or_else(|| {
                    Failure::Usage(format!("no preset group sizes for d={d}, M={m}"))
                })?
            } else {
                GroupPartition::proportional(d, m)?
            };
            let sizes: Vec<String> = p.sizes().iter().map(usize::to_string).collect();
            println!("{}", sizes.join(" "));
            Ok(())
        }
    }
}
