use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deltatune_cli::count::run_count;
use deltatune_cli::multitask::{load_inputs, run_multitask, MultitaskOptions};
use deltatune_cli::spec::{DeltaChoice, ModelSpec};
use deltatune_cli::tasks::{TaskId, TaskSpec};
use deltatune_cli::train::{run_train, TrainOptions, DEFAULT_BATCH};
use deltatune_cli::viscmd::run_vis;
use deltatune_core::backbones::{NamingConvention, ToyformerConfig};

fn parse_convention(s: &str) -> Result<NamingConvention, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_task(s: &str) -> Result<TaskId, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_delta(s: &str) -> Result<DeltaChoice, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Backbone naming convention: A (BERT-style) or B (T5-style)
    #[arg(long, default_value = "A", value_parser = parse_convention)]
    model: NamingConvention,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    max_len: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    /// Seed for backbone init (and dataset generation in `train`)
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl ModelArgs {
    fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            convention: self.model,
            config: ToyformerConfig {
                d_model: self.d_model,
                n_heads: self.heads,
                d_ff: self.d_ff,
                n_layers: self.layers,
                vocab: self.vocab,
                max_len: self.max_len,
                n_classes: self.classes,
                seed: self.seed,
            },
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "deltatune", version, about = "Delta tuning on toy transformer backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the module tree, optionally with a delta attached
    Vis {
        #[command(flatten)]
        model: ModelArgs,
        /// none | full | lora | adapter | bitfit | prefix | path to config.json
        #[arg(long, default_value = "none", value_parser = parse_delta)]
        delta: DeltaChoice,
    },
    /// Train a delta (or baseline) on a synthetic task and save it
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "none", value_parser = parse_delta)]
        delta: DeltaChoice,
        #[arg(long, default_value = "parity", value_parser = parse_task)]
        task: TaskId,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        /// Output directory for config.json, delta.bin and report.json
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the pooler trainable as well
        #[arg(long, default_value_t = false)]
        train_pooler: bool,
    },
    /// Report backbone size, delta size and the trainable ratio
    Count {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "none", value_parser = parse_delta)]
        delta: DeltaChoice,
    },
    /// Serve several task deltas on one backbone, hot-swapping per input
    Multitask {
        #[command(flatten)]
        model: ModelArgs,
        /// Delta checkpoint directories (at least two)
        #[arg(long, num_args = 1.., required = true)]
        deltas: Vec<PathBuf>,
        /// JSON file: [{"tokens": [..], "delta": <dir index>}, ..]
        #[arg(long)]
        inputs: PathBuf,
    },
}

fn run(cli: Cli) -> deltatune_core::Result<()> {
    match cli.command {
        Command::Vis { model, delta } => {
            let text = run_vis(&model.to_spec(), &delta)?;
            print!("{text}");
        }
        Command::Train {
            model,
            delta,
            task,
            steps,
            lr,
            out,
            train_pooler,
        } => {
            let spec = model.to_spec();
            let opts = TrainOptions {
                task: TaskSpec {
                    vocab: spec.config.vocab.min(8),
                    ..TaskSpec::new(task, model.seed)
                },
                model: spec,
                delta,
                steps,
                lr,
                out,
                train_pooler,
                batch_size: DEFAULT_BATCH,
            };
            let report = run_train(&opts)?;
            eprintln!("{}", report.summary());
            println!("{}", report.to_json());
        }
        Command::Count { model, delta } => {
            let report = run_count(&model.to_spec(), &delta)?;
            println!("{}", report.to_json());
        }
        Command::Multitask { model, deltas, inputs } => {
            let opts = MultitaskOptions {
                model: model.to_spec(),
                delta_dirs: deltas,
                inputs: load_inputs(&inputs)?,
            };
            let report = run_multitask(&opts)?;
            println!("{}", report.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
