//! Command-line flags. List-valued flags use dashes between entries, as in
//! `--arch-embedding-size=1000000-1000000-1000000`.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::builder::BoolishValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::datagen::criteo::{NUM_CATEGORICAL, NUM_DENSE};
use crate::datagen::DenseDistribution;
use crate::error::{Error, Result};
use crate::model::{DlrmConfig, Interaction};
use crate::optim::Optimizer;
use crate::parallel::Schedule;

/// Parses `a-b-c` into positive integers.
pub fn parse_dash_list(s: &str) -> std::result::Result<Vec<usize>, String> {
    if s.is_empty() {
        return Err("malformed list: empty".into());
    }
    s.split('-')
        .map(|tok| match tok.parse::<usize>() {
            Ok(0) => Err(format!("malformed list {s:?}: entries must be positive")),
            Ok(v) => Ok(v),
            Err(_) => Err(format!("malformed list {s:?}: {tok:?} is not a positive integer")),
        })
        .collect()
}

/// A dash-separated list flag value. The full path keeps clap from treating
/// it as a repeated flag.
pub type DashList = ::std::vec::Vec<usize>;

pub fn format_dash_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataGeneration {
    #[default]
    Random,
    Synthetic,
    Criteo,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adagrad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Emit {
    #[default]
    Text,
    Json,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Training with metric logging and optional validation.
    #[default]
    Train,
    /// Timed iterations; only the final report is printed.
    Bench,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Coin flips.
    #[default]
    Random,
    /// Bernoulli draws from a fixed random teacher model.
    Planted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum DenseKind {
    #[default]
    Uniform,
    Normal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum ScheduleKind {
    #[default]
    Sequential,
    Concurrent,
}

/// Flags of a training or benchmark run.
#[derive(Clone, Debug, PartialEq, Args)]
pub struct RunArgs {
    /// Rows per embedding table, e.g. 1000000-1000000.
    #[arg(long, value_parser = parse_dash_list, default_value = "4-3-2")]
    pub arch_embedding_size: DashList,
    /// Embedding dimension d.
    #[arg(long, default_value_t = 2)]
    pub arch_sparse_feature_size: usize,
    /// Bottom MLP widths, dense input first and d last.
    #[arg(long, value_parser = parse_dash_list, default_value = "4-3-2")]
    pub arch_mlp_bot: DashList,
    /// Top MLP layer widths ending in 1; the input width is derived.
    #[arg(long, value_parser = parse_dash_list, default_value = "4-2-1")]
    pub arch_mlp_top: DashList,
    #[arg(long, value_enum, default_value_t)]
    pub data_generation: DataGeneration,
    #[arg(long, default_value_t = 1)]
    pub mini_batch_size: usize,
    /// Iterations to run; 0 reads a Criteo file to the end.
    #[arg(long, default_value_t = 10)]
    pub num_batches: usize,
    #[arg(long, default_value_t = 2)]
    pub num_indices_per_lookup: usize,
    /// Use exactly k lookups per sample instead of a count in [1, k].
    #[arg(long, value_parser = BoolishValueParser::new(), num_args = 0..=1, default_value = "false", default_missing_value = "true")]
    pub num_indices_per_lookup_fixed: bool,
    #[arg(long, value_parser = BoolishValueParser::new(), num_args = 0..=1, default_value = "false", default_missing_value = "true")]
    pub enable_profiling: bool,
    #[arg(long, value_enum, default_value_t)]
    pub optimizer: OptimizerKind,
    #[arg(long, default_value_t = crate::optim::DEFAULT_LEARNING_RATE)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub num_devices: usize,
    #[arg(long)]
    pub criteo_path: Option<PathBuf>,
    /// Hash-bucket counts of the 26 categorical features; defaults to the
    /// embedding sizes.
    #[arg(long, value_parser = parse_dash_list)]
    pub vocab_sizes: Option<DashList>,
    #[arg(long, value_enum, default_value_t)]
    pub emit: Emit,

    #[arg(long, value_enum, default_value_t)]
    pub mode: Mode,
    /// Validate every N iterations (0 disables).
    #[arg(long, default_value_t = 0)]
    pub eval_interval: usize,
    /// Mini-batches in the validation set.
    #[arg(long, default_value_t = 1)]
    pub num_val_batches: usize,
    /// Criteo file used for validation.
    #[arg(long)]
    pub criteo_val_path: Option<PathBuf>,
    /// Training metrics are averaged over this many iterations per record.
    #[arg(long, default_value_t = 1)]
    pub print_freq: usize,
    /// Directory with `table_<i>.profile` files for synthetic data.
    #[arg(long)]
    pub trace_profile_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub labels: LabelKind,
    #[arg(long, value_enum, default_value_t)]
    pub dense_distribution: DenseKind,
    #[arg(long, value_enum, default_value_t)]
    pub schedule: ScheduleKind,
    #[arg(long)]
    pub load_model: Option<PathBuf>,
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Also write JSON-lines metrics here.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
    /// Write the per-step communication volume table here.
    #[arg(long)]
    pub comm_report: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "dlrm", version, about = "Deep learning recommendation model training and benchmarks")]
#[command(args_conflicts_with_subcommands = true)]
pub struct Cli {
    #[command(subcommand)]
    pub tool: Option<Tool>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Tool {
    /// Profile an access trace (whitespace-separated ids) into a stack-distance profile.
    ProfileTrace {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a synthetic trace from a profile.
    GenTrace {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Minimum first-touch probability; defaults to one that reaches all
        /// uniques early in the trace. Pass 0 to disable.
        #[arg(long)]
        min_first_touch: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        /// Print LRU hit rates of the generated trace at these capacities.
        #[arg(long, value_parser = parse_dash_list)]
        lru_capacities: Option<DashList>,
    },
}

/// Everything a run needs besides the model architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    pub data: DataGeneration,
    pub batch_size: usize,
    pub num_batches: usize,
    pub indices_per_lookup: usize,
    pub indices_fixed: bool,
    pub profiling: bool,
    pub optimizer: Optimizer,
    pub num_devices: usize,
    pub schedule: Schedule,
    pub criteo_path: Option<PathBuf>,
    pub criteo_val_path: Option<PathBuf>,
    pub vocab_sizes: Vec<usize>,
    pub emit: Emit,
    pub eval_interval: usize,
    pub num_val_batches: usize,
    pub print_freq: usize,
    pub trace_profile_dir: Option<PathBuf>,
    pub labels: LabelKind,
    pub dense_distribution: DenseDistribution,
    pub load_model: Option<PathBuf>,
    pub save_model: Option<PathBuf>,
    pub metrics_out: Option<PathBuf>,
    pub comm_report: Option<PathBuf>,
}

/// A validated run: architecture plus options.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub config: DlrmConfig,
    pub options: RunOptions,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("--{name} must be positive")));
    }
    Ok(())
}

impl RunArgs {
    pub fn into_spec(self) -> Result<RunSpec> {
        let config = DlrmConfig {
            embedding_sizes: self.arch_embedding_size,
            sparse_dim: self.arch_sparse_feature_size,
            bottom_mlp: self.arch_mlp_bot,
            top_mlp: self.arch_mlp_top,
            interaction: Interaction::Dot,
            seed: self.seed,
        };
        config.validate()?;
        positive("mini-batch-size", self.mini_batch_size)?;
        positive("num-indices-per-lookup", self.num_indices_per_lookup)?;
        positive("num-devices", self.num_devices)?;
        positive("print-freq", self.print_freq)?;
        positive("num-val-batches", self.num_val_batches)?;
        let optimizer = match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.learning_rate),
            OptimizerKind::Adagrad => Optimizer::adagrad(self.learning_rate),
        };
        optimizer.validate()?;
        let vocab_sizes = self.vocab_sizes.unwrap_or_else(|| config.embedding_sizes.clone());
        match self.data_generation {
            DataGeneration::Criteo => {
                if self.criteo_path.is_none() {
                    return Err(Error::Config("--data-generation=criteo requires --criteo-path".into()));
                }
                if config.num_tables() != NUM_CATEGORICAL {
                    return Err(Error::Config(format!(
                        "Criteo data has {NUM_CATEGORICAL} categorical features but --arch-embedding-size lists {} tables",
                        config.num_tables()
                    )));
                }
                if config.dense_dim() != NUM_DENSE {
                    return Err(Error::Config(format!(
                        "Criteo data has {NUM_DENSE} dense features but the bottom MLP input width is {}",
                        config.dense_dim()
                    )));
                }
                if vocab_sizes.len() != NUM_CATEGORICAL {
                    return Err(Error::Config(format!(
                        "--vocab-sizes needs {NUM_CATEGORICAL} entries, got {}",
                        vocab_sizes.len()
                    )));
                }
                if let Some(t) = (0..NUM_CATEGORICAL).find(|&t| vocab_sizes[t] > config.embedding_sizes[t]) {
                    return Err(Error::Config(format!(
                        "vocabulary size {} of feature {t} exceeds its embedding table of {} rows",
                        vocab_sizes[t], config.embedding_sizes[t]
                    )));
                }
            }
            DataGeneration::Random | DataGeneration::Synthetic => {
                positive("num-batches", self.num_batches)?;
                if let Some((t, &m)) = config
                    .embedding_sizes
                    .iter()
                    .enumerate()
                    .find(|(_, &m)| m < self.num_indices_per_lookup)
                {
                    return Err(Error::Config(format!(
                        "--num-indices-per-lookup={} exceeds the {m} rows of table {t}",
                        self.num_indices_per_lookup
                    )));
                }
            }
        }
        if self.criteo_val_path.is_some() && self.data_generation != DataGeneration::Criteo {
            return Err(Error::Config("--criteo-val-path only applies to Criteo data".into()));
        }
        Ok(RunSpec {
            config,
            options: RunOptions {
                mode: self.mode,
                data: self.data_generation,
                batch_size: self.mini_batch_size,
                num_batches: self.num_batches,
                indices_per_lookup: self.num_indices_per_lookup,
                indices_fixed: self.num_indices_per_lookup_fixed,
                profiling: self.enable_profiling,
                optimizer,
                num_devices: self.num_devices,
                schedule: match self.schedule {
                    ScheduleKind::Sequential => Schedule::Sequential,
                    ScheduleKind::Concurrent => Schedule::Concurrent,
                },
                criteo_path: self.criteo_path,
                criteo_val_path: self.criteo_val_path,
                vocab_sizes,
                emit: self.emit,
                eval_interval: self.eval_interval,
                num_val_batches: self.num_val_batches,
                print_freq: self.print_freq,
                trace_profile_dir: self.trace_profile_dir,
                labels: self.labels,
                dense_distribution: match self.dense_distribution {
                    DenseKind::Uniform => DenseDistribution::Uniform,
                    DenseKind::Normal => DenseDistribution::Normal,
                },
                load_model: self.load_model,
                save_model: self.save_model,
                metrics_out: self.metrics_out,
                comm_report: self.comm_report,
            },
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "dlrm")]
struct RunOnly {
    #[command(flatten)]
    run: RunArgs,
}

/// Parses run flags (`argv[0]` is the program name) into a validated spec.
pub fn parse_args<I, T>(argv: I) -> Result<RunSpec>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    RunOnly::try_parse_from(argv)
        .map_err(|e| Error::InvalidArgument(e.to_string().trim_end().to_string()))?
        .run
        .into_spec()
}

impl RunSpec {
    /// Flags that parse back into this spec.
    pub fn to_args(&self) -> Vec<String> {
        let c = &self.config;
        let o = &self.options;
        let name = |v: &dyn ValueEnumName| v.name();
        let mut a = vec![
            "dlrm".to_string(),
            format!("--arch-embedding-size={}", format_dash_list(&c.embedding_sizes)),
            format!("--arch-sparse-feature-size={}", c.sparse_dim),
            format!("--arch-mlp-bot={}", format_dash_list(&c.bottom_mlp)),
            format!("--arch-mlp-top={}", format_dash_list(&c.top_mlp)),
            format!("--data-generation={}", name(&o.data)),
            format!("--mini-batch-size={}", o.batch_size),
            format!("--num-batches={}", o.num_batches),
            format!("--num-indices-per-lookup={}", o.indices_per_lookup),
            format!("--num-indices-per-lookup-fixed={}", o.indices_fixed),
            format!("--enable-profiling={}", o.profiling),
            format!(
                "--optimizer={}",
                match o.optimizer {
                    Optimizer::Sgd { .. } => "sgd",
                    Optimizer::Adagrad { .. } => "adagrad",
                }
            ),
            format!("--learning-rate={}", o.optimizer.learning_rate()),
            format!("--seed={}", c.seed),
            format!("--num-devices={}", o.num_devices),
            format!("--vocab-sizes={}", format_dash_list(&o.vocab_sizes)),
            format!("--emit={}", name(&o.emit)),
            format!("--mode={}", name(&o.mode)),
            format!("--eval-interval={}", o.eval_interval),
            format!("--num-val-batches={}", o.num_val_batches),
            format!("--print-freq={}", o.print_freq),
            format!("--labels={}", name(&o.labels)),
            format!(
                "--dense-distribution={}",
                match o.dense_distribution {
                    DenseDistribution::Uniform => "uniform",
                    DenseDistribution::Normal => "normal",
                }
            ),
            format!(
                "--schedule={}",
                match o.schedule {
                    Schedule::Sequential => "sequential",
                    Schedule::Concurrent => "concurrent",
                }
            ),
        ];
        let paths = [
            ("criteo-path", &o.criteo_path),
            ("criteo-val-path", &o.criteo_val_path),
            ("trace-profile-dir", &o.trace_profile_dir),
            ("load-model", &o.load_model),
            ("save-model", &o.save_model),
            ("metrics-out", &o.metrics_out),
            ("comm-report", &o.comm_report),
        ];
        for (flag, p) in paths {
            if let Some(p) = p {
                a.push(format!("--{flag}={}", p.display()));
            }
        }
        a
    }
}

trait ValueEnumName {
    fn name(&self) -> String;
}

impl<T: ValueEnum> ValueEnumName for T {
    fn name(&self) -> String {
        self.to_possible_value()
            .expect("no skipped variants")
            .get_name()
            .to_string()
    }
}
