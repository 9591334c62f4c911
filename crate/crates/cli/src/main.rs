mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mme", version, about = "Mixture of mesh experts: data, training, evaluation and diagnostics")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// INI file with sections data, gate, experts, trainer, agent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Epochs of the command's own training loop.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Comma-separated expert ids, e.g. walk_rnn,face_mlp,oracle:2:0.9
    #[arg(long, global = true, value_delimiter = ',')]
    pub experts: Option<Vec<String>>,
    #[arg(long, global = true)]
    pub walks_train: Option<usize>,
    #[arg(long, global = true)]
    pub walks_infer: Option<usize>,
    /// Range of the agent's λ, as lo,hi.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub lambda_range: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// classification, retrieval or segmentation
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
    },
    /// Supervised pre-training of the trainable experts.
    PretrainExperts {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Imitation pre-training of one gate per expert, then averaging.
    PretrainGate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        experts_ckpt: Option<PathBuf>,
    },
    /// Average imitation gates into the initial expert-weight gate.
    InitGate {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Expert count of the resulting gate; defaults to the number of inputs.
        #[arg(long)]
        num_experts: Option<usize>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Joint training of gate and experts, with λ from the agent.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        experts_ckpt: Option<PathBuf>,
        #[arg(long)]
        gate_ckpt: Option<PathBuf>,
        /// Replace the agent with a constant λ.
        #[arg(long, allow_hyphen_values = true)]
        static_lambda: Option<f64>,
        /// kld, cosine, mse or none
        #[arg(long)]
        loss_sim: Option<String>,
    },
    /// Evaluate a trained system; appends rows to metrics.csv.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Hard-voting ensemble of the experts instead of the gate.
        #[arg(long)]
        ensemble: bool,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print random walks of one OFF file or of every mesh in a dataset.
    DumpWalks {
        #[arg(long)]
        mesh: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Finite-difference checks of every differentiable operation.
    Gradcheck,
    /// λ trace of a training log as CSV.
    PlotLambda {
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
