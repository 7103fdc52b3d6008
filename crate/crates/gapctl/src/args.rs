use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gapkit::conesim::{Activation, WeightInit};
use gapkit::geometry::SplitSelector;
use gapkit::probe::TrainConfig;

use crate::grid::{List, parse_grid, parse_lambda, parse_u64_list, parse_usize_list};

#[derive(Debug, Parser)]
#[command(name = "gapctl", version, about = "Measure, visualize and close the gap between paired image and text embeddings")]
pub struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Suppress warnings.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gap vector norm and cone concentration of one split.
    Analyze(AnalyzeArgs),
    /// Joint PCA projection of both modalities, as CSV.
    Project(ProjectArgs),
    /// Shift both modalities toward each other and write a new .gapemb file.
    Align(AlignArgs),
    /// Train and score one linear probe on aligned embeddings.
    Probe(ProbeArgs),
    /// Run the lambda x seed probe grid.
    Sweep(SweepArgs),
    /// Synthetic experiments that need no embedding file.
    #[command(subcommand)]
    Simulate(SimulateCommand),
    /// Re-aggregate and check an existing sweep report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl From<SplitArg> for SplitSelector {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitSelector::Train,
            SplitArg::Val => SplitSelector::Val,
            SplitArg::Test => SplitSelector::Test,
            SplitArg::All => SplitSelector::All,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Tanh,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Gaussian,
    Orthogonal,
}

impl From<InitArg> for WeightInit {
    fn from(i: InitArg) -> Self {
        match i {
            InitArg::Gaussian => WeightInit::Gaussian,
            InitArg::Orthogonal => WeightInit::Orthogonal,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorpusArg {
    Gaussian,
    Homogeneous,
    Diverse,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Input .gapemb file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Write JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Number of components.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    pub k: u8,
    /// Rows used both to fit and to project.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write components and explained variance as JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of the train gap vector to remove, in [0, 1].
    #[arg(long, value_parser = parse_lambda)]
    pub lambda: f64,
    /// Output .gapemb file; a manifest is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 200)]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Share of train rows held out when the file has no val split.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Use plain cross-entropy for multiclass tasks.
    #[arg(long)]
    pub unweighted_multiclass: bool,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: 0,
            val_fraction: self.val_fraction,
            weighted_multiclass: !self.unweighted_multiclass,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.0, value_parser = parse_lambda)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `start:end:step` or a comma list; values are rounded to 3 decimals.
    #[arg(long, default_value = "0:1:0.1", value_parser = parse_grid)]
    pub lambdas: List<f64>,
    /// Number of seeds, run as 0..N.
    #[arg(long, default_value_t = 5, conflicts_with = "seed_list")]
    pub seeds: u64,
    /// Explicit comma-separated seeds.
    #[arg(long, value_parser = parse_u64_list)]
    pub seed_list: Option<List<u64>>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, env = "GAPCTL_WORKERS", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// JSON report; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-cell CSV (lambda, seed, auc).
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-lambda CSV with mean and std AUC and geometry.
    #[arg(long)]
    pub aggregate_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Existing sweep report.
    #[arg(long = "in", value_name = "PATH")]
    pub input: PathBuf,
    /// Fail if the stored aggregates disagree with the records.
    #[arg(long)]
    pub check: bool,
    /// Re-aggregated report; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub aggregate_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NetArgs {
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, value_enum, default_value = "relu")]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub init: InitArg,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
}

#[derive(Debug, Subcommand)]
pub enum SimulateCommand {
    /// Cone concentration of random networks against depth.
    Cone(ConeArgs),
    /// Data versus weight variance of random network outputs.
    Variance(VarianceArgs),
    /// InfoNCE split into attraction and repulsion on a random batch.
    Infonce(InfonceArgs),
    /// Train a two-tower contrastive model and track its gap.
    Toyclip(ToyclipArgs),
}

#[derive(Debug, Args)]
pub struct ConeArgs {
    #[arg(long, default_value = "0,1,2,4,8,16", value_parser = parse_usize_list)]
    pub depths: List<usize>,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long, default_value_t = 64)]
    pub input_dim: usize,
    /// Gaussian inputs per replicate.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Independent replicates (input and weight draws).
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-replicate rows (depth, replicate, r, mean cosine).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[arg(long, value_enum, default_value = "diverse")]
    pub corpus: CorpusArg,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[command(flatten)]
    pub net: NetArgs,
    /// Weight draws per decomposition.
    #[arg(long, default_value_t = 8)]
    pub draws: usize,
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    /// Diversity multiplier for the comparison corpus.
    #[arg(long, default_value_t = 0.5)]
    pub diversity_factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfonceArgs {
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    /// Noise added to image rows to form their text partners.
    #[arg(long, default_value_t = 0.5)]
    pub pair_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sample rows (index, total, attraction, repulsion).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ToyclipArgs {
    /// Paired samples.
    #[arg(long, default_value_t = 2048)]
    pub n: usize,
    /// Input width of both towers.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub latent_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, value_enum, default_value = "tanh")]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    pub init: InitArg,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.07)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0.003)]
    pub lr: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
    /// Minibatch seed; the towers are drawn with `2 * seed + 1` and `2 * seed + 2`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Apply the activation on the output layer too.
    #[arg(long)]
    pub no_linear_head: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trajectory rows (step, gap_norm, r_image, r_text, loss).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}
