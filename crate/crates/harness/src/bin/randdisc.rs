//! `randdisc train | attack | certify | report`
//!
//! Settings come from `--config <file.toml>` (the keys of
//! [`harness::ExperimentSpec`]) and are then overridden by flags.
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use harness::experiment::{defense_list, train_model};
use harness::report::sidecar;
use harness::{emit_plot_data, read_report, run_experiment, ExitKind, ExperimentSpec, HarnessError};
use randdisc::classifier::{save_checkpoint, LossKind};
use randdisc::transforms::DownsampleConfig;

#[derive(Parser)]
#[command(name = "randdisc", version, about = "Randomized discretization experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the default CNN and save the checkpoint.
    Train(Overrides),
    /// Attack every defense over the ε sweep and write the report.
    Attack(Overrides),
    /// Like `attack`, and also certify the certifiable defenses.
    Certify(Overrides),
    /// Turn a report into plot tables.
    Report {
        #[command(flatten)]
        overrides: Overrides,
        /// Report to read; the configured output when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory for the tables; `<report stem>.plots` next to the report when omitted.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML file with experiment settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    #[arg(long)]
    pnm_dir: Option<PathBuf>,
    #[arg(long)]
    pnm_label: Option<usize>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    subset_seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fail instead of training when the checkpoint is missing.
    #[arg(long)]
    no_train: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    train_seed: Option<u64>,
    /// Comma-separated, e.g. `identity,gaussian,rand_disc`.
    #[arg(long, value_delimiter = ',')]
    defenses: Option<Vec<String>>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    t: Option<f64>,
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    tvm_lambda: Option<f64>,
    #[arg(long)]
    tvm_iters: Option<usize>,
    #[arg(long)]
    resize_min: Option<usize>,
    #[arg(long)]
    resize_max: Option<usize>,
    /// Comma-separated budgets, ascending.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    grad_copies: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Use the margin loss with this confidence instead of cross-entropy.
    #[arg(long)]
    cw_kappa: Option<f64>,
    #[arg(long)]
    votes: Option<usize>,
    #[arg(long)]
    certify_votes: Option<usize>,
    #[arg(long)]
    center_draws: Option<usize>,
    #[arg(long)]
    assignment_draws: Option<usize>,
    /// Fixed pooling `filter,stride` for the downsampled defense.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    downsample: Option<Vec<usize>>,
    #[arg(long)]
    output: Option<PathBuf>,
}

macro_rules! set {
    ($($src:expr => $dst:expr),* $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst = v; })*
    };
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentSpec, HarnessError> {
        let mut spec = match &self.config {
            Some(path) => ExperimentSpec::load(path)?,
            None => ExperimentSpec::default(),
        };
        set! {
            self.id => spec.id,
            self.seed => spec.seed,
            self.mnist_dir => spec.data.mnist_dir,
            self.pnm_label => spec.data.pnm_label,
            self.subset => spec.data.subset,
            self.subset_seed => spec.data.subset_seed,
            self.checkpoint => spec.model.checkpoint,
            self.epochs => spec.model.train.epochs,
            self.batch_size => spec.model.train.batch_size,
            self.learning_rate => spec.model.train.learning_rate,
            self.momentum => spec.model.train.momentum,
            self.train_seed => spec.model.train.seed,
            self.sigma => spec.transform.sigma,
            self.tau => spec.transform.tau,
            self.s => spec.transform.s,
            self.k => spec.transform.k,
            self.gamma => spec.transform.gamma,
            self.alpha => spec.transform.alpha,
            self.t => spec.transform.t,
            self.bits => spec.baselines.bits,
            self.tvm_lambda => spec.baselines.tvm_lambda,
            self.tvm_iters => spec.baselines.tvm_iters,
            self.resize_min => spec.baselines.resize_min,
            self.resize_max => spec.baselines.resize_max,
            self.epsilons => spec.attack.epsilons,
            self.steps => spec.attack.steps,
            self.grad_copies => spec.attack.grad_copies,
            self.votes => spec.votes,
            self.certify_votes => spec.certify.votes,
            self.center_draws => spec.certify.center_draws,
            self.assignment_draws => spec.certify.assignment_draws,
            self.output => spec.output,
        }
        if self.pnm_dir.is_some() {
            spec.data.pnm_dir = self.pnm_dir.clone();
        }
        if self.no_train {
            spec.model.train_if_missing = false;
        }
        if self.eta.is_some() {
            spec.attack.eta = self.eta;
        }
        if let Some(kappa) = self.cw_kappa {
            spec.attack.loss = LossKind::CarliniWagner { kappa };
        }
        if let Some(names) = &self.defenses {
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            spec.defenses = defense_list(&names)?;
        }
        if let Some(d) = &self.downsample {
            spec.certify.downsample = Some(DownsampleConfig {
                filter_size: d[0],
                stride: d[1],
            });
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(o) => {
            let spec = o.resolve()?;
            let model = train_model(&spec.data.mnist_dir, &spec.model.train, &mut log)?;
            let path = &spec.model.checkpoint;
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
            }
            save_checkpoint(&model, path)
                .map_err(|e| HarnessError::library(format!("saving {}", path.display()), e))?;
            println!("{}", path.display());
        }
        Command::Attack(o) => {
            let mut spec = o.resolve()?;
            spec.certify.enabled = false;
            print_rows(&run_experiment(&spec, &mut log)?);
        }
        Command::Certify(o) => {
            let mut spec = o.resolve()?;
            spec.certify.enabled = true;
            print_rows(&run_experiment(&spec, &mut log)?);
        }
        Command::Report {
            overrides,
            input,
            plot_dir,
        } => {
            let spec = overrides.resolve()?;
            let input = input.unwrap_or(spec.output);
            let rows = read_report(&input)?;
            let dir = plot_dir.unwrap_or_else(|| sidecar(&input, "plots"));
            for path in emit_plot_data(&rows, &dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn print_rows(rows: &[harness::ReportRow]) {
    println!("defense,epsilon,clean,robust,certified");
    for r in rows {
        let cert = r.certified_accuracy.map(|c| c.to_string()).unwrap_or_default();
        println!(
            "{},{},{},{},{}",
            r.defense, r.epsilon, r.clean_accuracy, r.robust_accuracy, cert
        );
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { ExitKind::Usage as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // harness errors already spell out their causes
            let kind = match e.downcast_ref::<HarnessError>() {
                Some(h) => {
                    eprintln!("error: {h}");
                    h.exit_kind()
                }
                None => {
                    eprintln!("error: {e:#}");
                    ExitKind::Data
                }
            };
            ExitCode::from(kind as u8)
        }
    }
}
