//! Argument definitions. Experiment settings are generated from
//! [`ExperimentConfig::KEYS`], one `--kebab-case` flag per key.

use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "qgnn",
    version,
    about = "Quantization-aware GNN training and packed inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Train a model and write checkpoint, model file, metrics and manifest.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a model file or checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        source: ModelSource,
    },
    /// Write a packed model file from a checkpoint.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target width (fp, 8, 4 or 2); defaults to the trained one.
        /// Other widths calibrate on the configured dataset.
        #[arg(long = "to-bits")]
        to_bits: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time packed inference and append a CSV report row.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "model-file")]
        model_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Worker threads; timing is single-threaded by default.
        #[arg(long)]
        threads: Option<usize>,
        /// CSV file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a block-model bundle from the `sbm-*` settings.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write a seeded split from the split settings.
        #[arg(long)]
        with_splits: bool,
    },
    /// Grids over range scales or depths.
    #[command(subcommand)]
    Sweep(Sweep),
    /// Convert a LINQS citation dump into a bundle.
    Convert {
        #[arg(long)]
        content: PathBuf,
        #[arg(long)]
        cites: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the header and metadata of a model file.
    Info {
        #[arg(long = "model-file")]
        model_file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum Sweep {
    /// Quantization error of one hook's activations across `γ` and widths.
    Gamma {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "hook-class", default_value = "aggregate")]
        hook_class: String,
        /// Defaults to the first hook of the class.
        #[arg(long = "hook-layer")]
        hook_layer: Option<usize>,
        #[arg(long = "grid-bits", default_value = "2,4,8")]
        grid_bits: String,
        /// Comma list, or `start:stop:step`.
        #[arg(long, default_value = "0.05:1.0:0.05")]
        gammas: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and smoothness across depths and widths.
    Layers {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "grid-layers", default_value = "2,4,6,8,10,12")]
        grid_layers: String,
        #[arg(long = "grid-bits", default_value = "fp,8")]
        grid_bits: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelSource {
    /// Packed model file, evaluated with integer inference.
    #[arg(long = "model-file")]
    pub model_file: Option<PathBuf>,
    /// Checkpoint, evaluated with the training-time forward.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// `--config FILE` plus per-key overrides applied on top of it.
#[derive(Debug, Clone, Default)]
pub struct ConfigArgs {
    pub file: Option<PathBuf>,
    pub sets: Vec<(String, String)>,
}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn key_help(key: &str) -> &'static str {
    match key {
        "model" => "gcn or smp",
        "bits" => "fp, 8, 4 or 2",
        "bt" => "off, bt or bt-star; bare flag means bt",
        "bt_from" => "Source width the truncation starts from",
        "bt_classes" => "all, or a comma list of input, weight, message, aggregate, update",
        "layers" => "Layer count, propagation steps for smp",
        "hidden" => "Hidden width",
        "mu" => "Smoothness weight of the propagation",
        "delta0" => "Initial smoothness budget",
        "eta_h" => "Propagation step size",
        "eta_lambda" => "Multiplier step size",
        "eta_s" => "Slack step size",
        "lambda0" => "Initial multiplier",
        "slack0" => "Initial slack",
        "lambda_mode" => "free or nonneg",
        "lr" => "Learning rate of weights",
        "wd" => "Weight decay of weights",
        "lr_gamma" => "Learning rate of range scales",
        "wd_gamma" => "Weight decay of range scales",
        "wd_mode" => "decoupled or l2",
        "dropout" => "Drop probability in [0, 1)",
        "gamma0" => "Initial range scale",
        "epochs" => "Training epochs",
        "seed" => "Initialisation and dropout seed",
        "split" => "random or bundle",
        "split_seed" => "Seed of the random split",
        "train_per_class" => "Training nodes per class for the random split",
        "val_size" => "Validation nodes for the random split",
        "data" => "Bundle directory or sbm",
        "sbm_blocks" => "Block count of the generated graph",
        "sbm_nodes" => "Node count of the generated graph",
        "sbm_p_in" => "Edge probability inside a block",
        "sbm_p_out" => "Edge probability across blocks",
        "sbm_features" => "Feature width of the generated graph",
        "sbm_separation" => "Distance between block feature means",
        "sbm_seed" => "Seed of the generated graph",
        _ => "",
    }
}

fn config_keys() -> impl Iterator<Item = &'static str> {
    ExperimentConfig::KEYS.into_iter().filter(|k| *k != "format")
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.file {
            Some(p) => ExperimentConfig::parse(&std::fs::read_to_string(p).map_err(|e| Error::io_at(p, e))?)?,
            None => ExperimentConfig::default(),
        };
        for (k, v) in &self.sets {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        if let Some(p) = m.get_one::<PathBuf>("config") {
            self.file = Some(p.clone());
        }
        for key in config_keys() {
            if let Some(v) = m.get_one::<String>(key) {
                self.sets.push((key.to_string(), v.clone()));
            }
        }
        if m.get_flag("bt_star") {
            self.sets.push(("bt".into(), "bt-star".into()));
        }
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("key = value experiment file; flags override it"),
            )
            .arg(
                Arg::new("bt_star")
                    .long("bt-star")
                    .action(ArgAction::SetTrue)
                    .conflicts_with("bt")
                    .help("Shorthand for --bt bt-star"),
            );
        for key in config_keys() {
            let mut arg = Arg::new(key)
                .long(flag(key))
                .value_name("VALUE")
                .help(key_help(key))
                .help_heading("Experiment");
            if key == "bt" {
                arg = arg.num_args(0..=1).default_missing_value("bt");
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}
