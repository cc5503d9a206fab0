//! `ste`: train and evaluate Sig-Transformer Encoder models, check gradients,
//! and compute path signatures from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric or verification failure.

mod config;
mod run;
mod sig;

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ste_core::data::PlantedTask;
use ste_core::{sig_dim, Fault, Variant};

use config::RunConfig;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(m: impl Into<String>) -> Self {
        Self { code: 1, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn verify(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }
}

impl From<ste_core::Error> for Failure {
    fn from(e: ste_core::Error) -> Self {
        use ste_core::Error as E;
        let code = match &e {
            E::Config(_) | E::Contract(_) | E::Overflow(_) => 1,
            E::Dimension { .. } | E::Data(_) | E::Parse { .. } | E::Incompatible(_) | E::Io(_) | E::Json(_) => 2,
            E::Numeric(_) | E::Divergence { .. } => 3,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ste", version, about = "Sig-Transformer Encoder toolkit")]
struct Cli {
    /// Increase diagnostic output on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Drop positional encoding.
    Pe,
    /// Replace signature transforms by the reduced path.
    St,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Task {
    Content,
    Order,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    ReluHalfGrad,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validated grid search; writes reports and checkpoints.
    Train {
        /// JSON run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL dataset (overrides the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, env = "STE_OUTPUT_DIR")]
        output_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_seeds: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Run only the first N cross-validation iterations.
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Add an ablation row to the report; repeatable.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
    },
    /// Score a checkpoint; by default on the test records it was selected with.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate every record instead of the recorded test fold.
        #[arg(long)]
        all: bool,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Corrupt a backward rule to confirm the checks fail.
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
    /// Truncated signature dimension sum_{k=1..N} d^k.
    Sigdim {
        #[arg(required_unless_present = "table")]
        d: Option<usize>,
        #[arg(required_unless_present = "table")]
        order: Option<usize>,
        /// Print the reference dimension table with inconsistent rows marked.
        #[arg(long)]
        table: bool,
    },
    /// Signature coefficients of a piecewise-linear path given as CSV rows.
    Sig {
        /// CSV file, one point per row; `-` reads stdin.
        path: PathBuf,
        #[arg(long, short = 'n')]
        order: usize,
        /// One output row per prefix instead of the whole path.
        #[arg(long)]
        stream: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a planted synthetic dataset as JSONL.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Task::Content)]
        task: Task,
        /// Embedding width of the records' toy embedder.
        #[arg(long, default_value_t = 8)]
        d_model: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train {
            config,
            data,
            output_dir,
            seed,
            n_seeds,
            max_epochs,
            max_iterations,
            ablate,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = n_seeds {
                cfg.n_seeds = n;
            }
            if let Some(m) = max_epochs {
                cfg.train.max_epochs = m;
            }
            if let Some(m) = max_iterations {
                cfg.max_iterations = Some(m);
            }
            for a in ablate {
                cfg.add_variant(match a {
                    Ablation::Pe => Variant::SteNoPe,
                    Ablation::St => Variant::SteNoSt,
                });
            }
            let out = cfg.resolve_output_dir(output_dir);
            cfg.output_dir = Some(out.clone());
            std::fs::create_dir_all(&out)
                .map_err(|e| Failure::data(format!("cannot create {}: {e}", out.display())))?;
            run::train(&cfg, &out, cli.verbose)
        }
        Command::Eval {
            checkpoint,
            data,
            all,
            output,
        } => run::eval(&checkpoint, data, all, output),
        Command::Gradcheck {
            seed,
            tolerance,
            inject_fault,
        } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::ReluHalfGrad => Fault::ReluHalfGrad,
            });
            run::gradcheck(seed, tolerance, fault)
        }
        Command::Sigdim { d, order, table } => {
            if table {
                print!("{}", sig::dims_table()?);
                return Ok(());
            }
            let (d, order) = (d.unwrap_or(0), order.unwrap_or(0));
            if d == 0 || order == 0 {
                return Err(Failure::usage("d and order must be positive"));
            }
            println!("{}", sig_dim(d, order)?);
            Ok(())
        }
        Command::Sig {
            path,
            order,
            stream,
            output,
        } => {
            if order == 0 {
                return Err(Failure::usage("order must be positive"));
            }
            let parsed = if path.as_os_str() == "-" {
                sig::read_path_csv(std::io::stdin().lock())?
            } else {
                let f = File::open(&path)
                    .map_err(|e| Failure::data(format!("cannot open {}: {e}", path.display())))?;
                sig::read_path_csv(f)?
            };
            match output {
                Some(p) => {
                    let f = File::create(&p)
                        .map_err(|e| Failure::data(format!("cannot create {}: {e}", p.display())))?;
                    sig::write_signature_csv(&parsed, order, stream, BufWriter::new(f))
                }
                None => sig::write_signature_csv(&parsed, order, stream, std::io::stdout().lock()),
            }
        }
        Command::Synth {
            n,
            seed,
            task,
            d_model,
            output,
        } => {
            let task = match task {
                Task::Content => PlantedTask::Content,
                Task::Order => PlantedTask::Order,
            };
            run::synth(n, seed, task, d_model, output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
