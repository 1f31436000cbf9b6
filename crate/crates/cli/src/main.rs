//! `uad`: the few-shot traffic anomaly detection pipeline, one subcommand per stage.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "uad", version, about = "Few-shot traffic anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default 1, or META_UAD_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct Tuning {
    /// Support shots per class (sets both meta-training and M-shot M).
    #[arg(long = "M")]
    pub m: Option<usize>,
    /// Validation shots per class.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Anomaly classes per episode.
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Outer learning rate.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Autoencoder training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Pcap,
    PacketCsv,
    FlowsJsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    Mshot,
    Standard,
    Crossdataset,
    Ablation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SetArg {
    Set1,
    Set2,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble flows from packets and write a flow feature CSV.
    Extract {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "pcap")]
        format: InputFormat,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "set2")]
        set: SetArg,
        /// Selection JSON written by `select`; replaces the canonical 33 features.
        #[arg(long, value_name = "FILE")]
        selection: Option<PathBuf>,
        /// Label for every flow (overrides labels in flows-jsonl input).
        #[arg(long)]
        label: Option<String>,
        /// Also write the assembled flows as JSON lines.
        #[arg(long, value_name = "FILE")]
        flows_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Filter and rank the 81 statistics of a set1 CSV.
    Select {
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        /// Importance report JSON; repeatable. Without any, permutation importance is computed.
        #[arg(long, value_name = "FILE")]
        importance: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the LSTM autoencoder on flow packet matrices.
    TrainAe {
        #[arg(long, value_name = "JSONL")]
        flows: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[command(flatten)]
        tuning: Tuning,
        #[command(flatten)]
        common: Common,
    },
    /// Write set3 features (selected statistics plus latent vector).
    Encode {
        #[arg(long, value_name = "JSONL")]
        flows: PathBuf,
        #[arg(long, value_name = "FILE")]
        ae: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train a detector on a labeled feature CSV.
    MetaTrain {
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training classes (comma separated); default all anomaly classes in the data.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
        /// family.json from `synth`; its training classes are used.
        #[arg(long, value_name = "FILE", conflicts_with = "classes")]
        family: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a model on few-shot examples of a novel class.
    Adapt {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Feature CSV; rows labeled normal are normal shots, all others novel shots.
        #[arg(long, value_name = "CSV")]
        shots: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Adaptation steps; default the model's inner steps.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Classify the rows of a feature CSV.
    Detect {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run an evaluation protocol and write the results JSON.
    Evaluate {
        #[arg(value_enum, default_value = "mshot")]
        protocol: Protocol,
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Crossdataset: meta-train on this CSV instead of loading --model.
        #[arg(long, value_name = "CSV", conflicts_with = "model")]
        source: Option<PathBuf>,
        /// Ablation input flows (labeled JSON lines).
        #[arg(long, value_name = "JSONL")]
        flows: Option<PathBuf>,
        /// family.json: training and novel class split.
        #[arg(long, value_name = "FILE")]
        family: Option<PathBuf>,
        /// Test classes (comma separated).
        #[arg(long, value_delimiter = ',', conflicts_with = "family")]
        classes: Option<Vec<String>>,
        /// Results JSON; printed to stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Also write one summary row per arm or feature set.
        #[arg(long, value_name = "CSV")]
        csv: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic task family.
    Synth {
        /// Output directory (packets.csv, flows.jsonl, family.json).
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Classes including normal.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        flows_per_class: Option<usize>,
        #[arg(long)]
        separation: Option<f64>,
        /// Classes differ only in packet order.
        #[arg(long)]
        temporal: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common, tuning: &Tuning) -> Result<RunConfig, CliError> {
    let flags = Overrides {
        seed: common.seed,
        threads: common.threads,
        m: tuning.m,
        n: tuning.n,
        k: tuning.k,
        episodes: tuning.episodes,
        beta: tuning.beta,
        repeats: tuning.repeats,
        epochs: tuning.epochs,
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &flags)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker threads: {e}", cfg.threads)))?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let none = Tuning::default();
    match cli.command {
        Command::Extract {
            input,
            format,
            out,
            set,
            selection,
            label,
            flows_out,
            common,
        } => {
            if set == SetArg::Set1 && selection.is_some() {
                return Err(CliError::Usage(
                    "--selection cannot be used with --set set1 (set1 keeps all 81 statistics)".into(),
                ));
            }
            let cfg = resolve(&common, &none)?;
            commands::extract(&cfg, &input, format, &out, set, selection.as_deref(), label, flows_out.as_deref())
        }
        Command::Select {
            data,
            importance,
            out,
            common,
        } => commands::select(&resolve(&common, &none)?, &data, &importance, &out),
        Command::TrainAe {
            flows,
            out,
            tuning,
            common,
        } => commands::train_ae(&resolve(&common, &tuning)?, &flows, &out),
        Command::Encode { flows, ae, out, common } => commands::encode(&resolve(&common, &none)?, &flows, &ae, &out),
        Command::MetaTrain {
            data,
            out,
            classes,
            family,
            tuning,
            common,
        } => commands::meta_train(&resolve(&common, &tuning)?, &data, &out, classes, family.as_deref()),
        Command::Adapt {
            model,
            shots,
            out,
            steps,
            common,
        } => commands::adapt(&resolve(&common, &none)?, &model, &shots, &out, steps),
        Command::Detect {
            model,
            data,
            out,
            common,
        } => commands::detect(&resolve(&common, &none)?, &model, &data, &out),
        Command::Evaluate {
            protocol,
            model,
            data,
            source,
            flows,
            family,
            classes,
            out,
            csv,
            tuning,
            common,
        } => {
            let inputs = commands::EvalInputs {
                model,
                data,
                source,
                flows,
                family,
                classes,
            };
            inputs.check(protocol)?;
            commands::evaluate(&resolve(&common, &tuning)?, protocol, &inputs, out.as_deref(), csv.as_deref())
        }
        Command::Synth {
            out,
            classes,
            flows_per_class,
            separation,
            temporal,
            common,
        } => {
            let mut cfg = resolve(&common, &none)?;
            if let Some(c) = classes {
                cfg.synthetic.n_classes = c;
            }
            if let Some(f) = flows_per_class {
                cfg.synthetic.flows_per_class = f;
            }
            if let Some(s) = separation {
                cfg.synthetic.class_separation = s;
            }
            if temporal {
                cfg.synthetic.temporal_signal = true;
            }
            commands::synth(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("uad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
