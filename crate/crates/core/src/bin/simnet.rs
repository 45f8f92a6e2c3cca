use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use simnet::config::RunConfig;
use simnet::pipeline;
use simnet::verify::{run_suite, SUITES};
use simnet::SimNetError;

#[derive(Parser)]
#[command(name = "simnet", version, about = "Similarity networks: preparation, training, evaluation and verification")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `key=value` override of a config field, e.g. `model.templates=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for batch-parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load or synthesize images, normalize them and fit the whitening.
    Prepare {
        #[arg(long)]
        out: PathBuf,
        /// CIFAR-10 binary directory; overrides `data.dir`.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Build an untrained model from a prepared cache.
    Init {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes the trained model and a history CSV.
    Train {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
    },
    /// Accuracy report (JSON on stdout) and confusion matrix CSV.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Evaluate on the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run property suites; exits with 1 if any check fails.
    Verify {
        /// Suite names; all suites when omitted.
        suites: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Order probed by the `psd` witness search.
        #[arg(long)]
        p: Option<f64>,
    },
    /// Decision regions of two weighted l1 templates as `x,y,label` CSV.
    Raster {
        #[arg(long)]
        out: PathBuf,
        /// Weight of the template at (-1, 0); the other has unit weight.
        #[arg(long, default_value_t = 3.0)]
        weight: f64,
        #[arg(long, default_value_t = 201)]
        resolution: usize,
    },
}

fn exit_code(err: &SimNetError) -> u8 {
    match err {
        SimNetError::Format { .. } | SimNetError::Io { .. } => 3,
        SimNetError::Config(_) | SimNetError::Argument(_) | SimNetError::Json(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<bool, SimNetError> {
    let mut config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    config.train.threads = cli.threads;
    if cli.threads > 0 {
        // ignore the error if a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match cli.command {
        Command::Prepare { out, data_dir } => {
            if data_dir.is_some() {
                config.data.dir = data_dir;
            }
            let data = pipeline::cmd_prepare(&config, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "source": data.source,
                    "train": data.train.len(),
                    "test": data.test.len(),
                    "out": out,
                })
            );
        }
        Command::Init { cache, out } => {
            let net = pipeline::cmd_init(&cache, &config, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "method": config.init.method,
                    "templates": net.num_templates(),
                    "classes": net.num_classes(),
                    "out": out,
                })
            );
        }
        Command::Train { model, cache, out, history } => {
            let h = pipeline::cmd_train(&model, &cache, &config, &out, &history, |r| {
                eprintln!("epoch {} loss {:.5} train_acc {:.4} val_acc {:?}", r.epoch, r.loss, r.train_acc, r.val_acc);
            })?;
            println!("{}", serde_json::to_string(&h.last())?);
        }
        Command::Eval { model, cache, train_split, confusion, json } => {
            let report = pipeline::cmd_eval(&model, &cache, train_split, json.as_deref(), confusion.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Verify { suites, seed, p } => {
            if let Some(seed) = seed {
                config.verify.seed = seed;
            }
            if let Some(p) = p {
                config.verify.psd_p = p;
            }
            let names = if suites.is_empty() { config.verify.suites.clone() } else { suites };
            if let Some(bad) = names.iter().find(|s| !SUITES.contains(&s.as_str())) {
                return Err(SimNetError::Argument(format!(
                    "unknown suite `{bad}`, expected one of {}",
                    SUITES.join(", ")
                )));
            }
            let mut ok = true;
            for name in &names {
                let report = run_suite(name, &config.verify)?;
                print!("{report}");
                ok &= report.passed();
            }
            println!("{}", if ok { "all checks passed" } else { "some checks failed" });
            return Ok(ok);
        }
        Command::Raster { out, weight, resolution } => {
            pipeline::cmd_raster(weight, (resolution, resolution), &out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
