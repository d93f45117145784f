use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use armi_mtl::harness::gradcheck::check_architecture;
use armi_mtl::harness::{
    ensemble_files, evaluate_checkpoint, predict_file, train, write_run, Checkpoint, PredictionFile, Profile,
    RunReport, TaskMetrics, TrainConfig, TrainData, REPORT_JSON,
};
use armi_mtl::metrics::MetricsReport;
use armi_mtl::models::{Architecture, TaskSelection};
use armi_mtl::objectives::Task2Loss;
use armi_mtl::{Error, ErrorKind, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "armi", version, about = "Multi-task misogyny identification and categorization")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and run report.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled TSV file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory for metrics.json and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print JSON instead of the text table.
        #[arg(long)]
        json: bool,
    },
    /// Write predictions with logits for a TSV file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the logits of several prediction files.
    Ensemble {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true, num_args = 1..)]
        files: Vec<PathBuf>,
    },
    /// Compare analytic and numeric gradients at a tiny configuration.
    Gradcheck {
        /// Architectures to check (default: all six).
        #[arg(long = "arch")]
        architectures: Vec<Architecture>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render a stored metrics or run report JSON file as text.
    Report {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "arch")]
    architecture: Option<Architecture>,
    /// Task trained by an ST architecture.
    #[arg(long)]
    tasks: Option<TaskSelection>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    task2_loss: Option<Task2Loss>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::load(path, self.profile)?,
            None => TrainConfig::profile(self.profile.unwrap_or(Profile::Toy)),
        };
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            architecture => architecture,
            tasks => tasks,
            epochs => epochs,
            learning_rate => learning_rate,
            batch_size => batch_size,
            task2_loss => task2_loss,
            gamma => gamma,
            lambda2 => lambda2,
            split_fraction => split_fraction,
        );
        for (flag, slot) in [
            (&self.train, &mut c.paths.train),
            (&self.dev, &mut c.paths.dev),
            (&self.test, &mut c.paths.test),
            (&self.out, &mut c.paths.output_dir),
        ] {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => {
            let config = args.config()?;
            let out = config
                .paths
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("no output directory given (--out or paths.output_dir)".into()))?;
            let data = TrainData::load(&config)?;
            let (ckpt, report) = train(&config, &data)?;
            write_run(&out, &ckpt, &report)?;
            print!("{}", report.to_text());
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            json,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let metrics = evaluate_checkpoint(&ckpt, &data)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))?;
                write(&dir.join("metrics.json"), &metrics.to_json())?;
                write(&dir.join("metrics.txt"), &metrics.to_text())?;
            }
            if json {
                println!("{}", metrics.to_json());
            } else {
                print!("{}", metrics.to_text());
            }
        }
        Command::Predict { checkpoint, input, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let preds = predict_file(&ckpt, &input)?;
            preds.write(&out)?;
            log::info!("wrote {} predictions to {}", preds.ids.len(), out.display());
        }
        Command::Ensemble { out, files } => {
            let loaded = files.iter().map(|f| PredictionFile::load(f)).collect::<Result<Vec<_>>>()?;
            ensemble_files(&loaded, &files)?.write(&out)?;
        }
        Command::Gradcheck {
            architectures,
            seed,
            json,
        } => {
            let archs = if architectures.is_empty() {
                Architecture::ALL.to_vec()
            } else {
                architectures
            };
            let mut failed = Vec::new();
            let mut reports = Vec::new();
            for arch in archs {
                let r = check_architecture(arch, seed)?;
                if !json {
                    println!(
                        "{:<9} {:>6} coordinates  max relative error {:.3e}  {}",
                        arch.name(),
                        r.coordinates,
                        r.max_rel_error,
                        if r.passed { "ok" } else { "FAILED" }
                    );
                }
                if !r.passed {
                    failed.push(arch.name());
                }
                reports.push((arch.name(), r));
            }
            if json {
                let map: serde_json::Map<_, _> = reports
                    .into_iter()
                    .map(|(a, r)| (a.to_string(), serde_json::to_value(r).expect("report serializes")))
                    .collect();
                println!("{}", serde_json::to_string_pretty(&map).expect("map serializes"));
            }
            if !failed.is_empty() {
                return Err(Error::NonFinite {
                    op: format!("gradient check of {}", failed.join(", ")),
                });
            }
        }
        Command::Report { file, json } => {
            let text = fs::read_to_string(&file).map_err(|e| Error::Data(format!("cannot read {}: {e}", file.display())))?;
            let (rendered, canonical) = if let Ok(r) = RunReport::from_json(&text) {
                (r.to_text(), r.to_json())
            } else if let Ok(m) = MetricsReport::from_json(&text) {
                (m.to_text(), m.to_json())
            } else {
                let m = TaskMetrics::from_json(&text).map_err(|_| {
                    Error::Data(format!(
                        "{}: not a metrics report, task metrics or run report ({REPORT_JSON})",
                        file.display()
                    ))
                })?;
                (m.to_text(), m.to_json())
            };
            if json {
                println!("{canonical}");
            } else {
                print!("{rendered}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
