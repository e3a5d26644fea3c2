use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nrmf::compress::{compress_network, CompressionReport, Source};
use nrmf::harness::{
    network_ranks, run_four_paths, run_sv_experiment, test_accuracy, write_ranks, write_report, write_trajectories,
    ExperimentSpec,
};
use nrmf::nn::{load_network, save_network, Layer};
use nrmf::nrmf::{read_rank_csv, train, write_rank_csv, TrainOptions};
use nrmf::{Error, Result};

#[derive(Parser)]
#[command(name = "nrmf", version, about = "Tucker-2 rank selection and compression for small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Experiment config (flat TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_parser = ["nrmf", "vbmf"])]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model from scratch with the regularizer.
    Train(Common),
    /// Pick Tucker-2 ranks for every spatial conv of a checkpoint.
    SelectRanks {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Factorize a checkpoint at the given ranks (rank swap if already factorized).
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rank CSV as written by select-ranks.
        #[arg(long)]
        ranks: PathBuf,
    },
    /// Train a checkpoint further without the regularizer.
    FineTune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train with and without the regularizer and log singular values.
    SvExperiment(Common),
    /// Run the four rank × initialization compression paths.
    FourPaths(Common),
    /// Parameter report for a compressed checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn spec_from(c: &Common) -> Result<ExperimentSpec> {
    let mut spec = match &c.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(v) = c.seed {
        spec.seed = v;
    }
    if let Some(v) = c.alpha {
        spec.alpha = v;
    }
    if let Some(v) = c.p {
        spec.p = v;
    }
    if let Some(v) = &c.out_dir {
        spec.out_dir = v.clone();
    }
    if let Some(m) = &c.method {
        spec.method = m.parse()?;
    }
    spec.validate()?;
    Ok(spec)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train(c) => {
            let spec = spec_from(&c)?;
            let (train_set, test_set) = spec.load_data()?;
            let out = train(&spec.initial_network()?, &spec.train_config(), &train_set, &spec.train_options())?;
            let dir = &spec.out_dir;
            write_trajectories(&dir.join("trajectories"), &out.trajectories)?;
            let ranks = network_ranks(&out.net, spec.method, spec.p)?;
            write_ranks(&dir.join(format!("ranks/{}.csv", spec.method)), &ranks)?;
            save_network(&out.net, &dir.join("checkpoints/trained"))?;
            let mut csv = String::from("epoch,objective\n");
            for (e, j) in out.epoch_objective.iter().enumerate() {
                csv.push_str(&format!("{},{:e}\n", e + 1, j));
            }
            write_file(&dir.join("report.csv"), csv.as_bytes())?;
            writeln!(stdout, "test accuracy {:.4}", test_accuracy(&out.net, &test_set)?)?;
            write_rank_csv(&mut stdout, &ranks)?;
        }
        Command::SelectRanks { common, checkpoint } => {
            let spec = spec_from(&common)?;
            let net = load_network(&checkpoint)?;
            let ranks = network_ranks(&net, spec.method, spec.p)?;
            write_ranks(&spec.out_dir.join(format!("ranks/{}.csv", spec.method)), &ranks)?;
            write_rank_csv(&mut stdout, &ranks)?;
        }
        Command::Compress { common, checkpoint, ranks } => {
            let spec = spec_from(&common)?;
            let net = load_network(&checkpoint)?;
            let table = read_rank_csv(&fs::read_to_string(&ranks)?)?;
            let factorized =
                net.layers().iter().any(|l| matches!(l, Layer::Conv2d(c) if c.provenance.is_some()));
            let source = if factorized { Source::RankSwap } else { Source::FreshDecompose };
            let (small, report) = compress_network(&net, &table, source)?;
            save_network(&small, &spec.out_dir.join("checkpoints/compressed"))?;
            write_report(&spec.out_dir.join("report.csv"), &report)?;
            write!(stdout, "{}", report.display_table())?;
        }
        Command::FineTune { common, checkpoint } => {
            let spec = spec_from(&common)?;
            let (train_set, test_set) = spec.load_data()?;
            let net = load_network(&checkpoint)?;
            let before = test_accuracy(&net, &test_set)?;
            let opts = TrainOptions { monitored: Some(Vec::new()), penalty: spec.penalty };
            let tuned = train(&net, &spec.finetune_config(), &train_set, &opts)?.net;
            let after = test_accuracy(&tuned, &test_set)?;
            save_network(&tuned, &spec.out_dir.join("checkpoints/finetuned"))?;
            let csv = format!("accuracy_before,accuracy_after\n{before:.4},{after:.4}\n");
            write_file(&spec.out_dir.join("report.csv"), csv.as_bytes())?;
            write!(stdout, "{csv}")?;
        }
        Command::SvExperiment(c) => {
            let spec = spec_from(&c)?;
            let result = run_sv_experiment(&spec)?;
            for s in &result.summary {
                writeln!(
                    stdout,
                    "{:<12} layer {:>2}  sum(lambda) {:.6e} -> {:.6e}  sum(xi) {:.6e} -> {:.6e}  {}",
                    s.arm,
                    s.layer,
                    s.lambda_start,
                    s.lambda_end,
                    s.xi_start,
                    s.xi_end,
                    if s.decreased() { "decreasing" } else { "non-decreasing" }
                )?;
            }
        }
        Command::FourPaths(c) => {
            let spec = spec_from(&c)?;
            let result = run_four_paths(&spec)?;
            result.write_csv(&mut stdout)?;
        }
        Command::Report { common, checkpoint } => {
            let spec = spec_from(&common)?;
            let report = CompressionReport::from_network(&load_network(&checkpoint)?)?;
            if report.rows.is_empty() {
                return Err(Error::Config(format!("{} holds no factorized layers", checkpoint.display())));
            }
            write_report(&spec.out_dir.join("report.csv"), &report)?;
            write!(stdout, "{}", report.display_table())?;
        }
    }
    stdout.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help / --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
