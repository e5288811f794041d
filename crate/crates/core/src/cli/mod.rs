//! The `qgnn` command surface.
//!
//! Every failure prints one line `error[CODE]: message` to stderr and exits
//! nonzero; usage errors use code `E_USAGE` and exit status 2.

mod args;
mod output;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Parser;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, SplitProtocol};
use crate::data::{self, Bundle, Splits};
use crate::error::{Error, Result};
use crate::infer::{benchmark, BenchConfig, QuantizedModel};
use crate::model::{
    self, accuracy, eval_pass, Calibration, ElementClass, ForwardOptions, Model, ModelConfig, QuantMode,
};
use crate::quant::gamma_sweep;
use crate::tape::Tape;

pub use args::{Cli, Cmd, ConfigArgs, ModelSource, Sweep};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MODEL_FILE: &str = "model.qgnn";
pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MOMENTS_FILE: &str = "moments.csv";
pub const TRACE_FILE: &str = "smp_trace.csv";

/// Parses `args`, runs the command and returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[E_USAGE]: {first}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        // A closed stdout, as under `| head`, ends the command quietly.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train { config, out } => cmd_train(&config.resolve()?, &out),
        Cmd::Eval { config, source } => cmd_eval(&config.resolve()?, &source),
        Cmd::Export {
            config,
            checkpoint,
            to_bits,
            out,
        } => cmd_export(&config, &checkpoint, to_bits.as_deref(), &out),
        Cmd::Bench {
            config,
            model_file,
            repeats,
            warmup,
            threads,
            out,
        } => {
            let cfg = BenchConfig {
                warmup,
                repeats,
                threads,
            };
            cmd_bench(&config.resolve()?, &model_file, &cfg, out.as_deref())
        }
        Cmd::Gen {
            config,
            out,
            with_splits,
        } => cmd_gen(&config.resolve()?, &out, with_splits),
        Cmd::Sweep(Sweep::Gamma {
            config,
            checkpoint,
            hook_class,
            hook_layer,
            grid_bits,
            gammas,
            out,
        }) => {
            let class: ElementClass = hook_class.parse()?;
            let bits = parse_bits_list(&grid_bits, false)?;
            let gammas = parse_grid(&gammas)?;
            cmd_sweep_gamma(
                &config,
                &checkpoint,
                (class, hook_layer),
                &bits,
                &gammas,
                out.as_deref(),
            )
        }
        Cmd::Sweep(Sweep::Layers {
            config,
            grid_layers,
            grid_bits,
            out,
        }) => {
            let layers = parse_list::<usize>("grid-layers", &grid_layers)?;
            let bits = parse_bits_list(&grid_bits, true)?;
            cmd_sweep_layers(&config.resolve()?, &layers, &bits, out.as_deref())
        }
        Cmd::Convert { content, cites, out } => cmd_convert(&content, &cites, &out),
        Cmd::Info { model_file } => cmd_info(&model_file),
    }
}

/// Trained parameters with the activation ranges of their evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub calibration: Vec<(ElementClass, usize, f64, f64)>,
}

impl Checkpoint {
    pub fn new(model: Model, calibration: &Calibration) -> Self {
        let calibration = calibration.iter().map(|(&(c, l), &(a, b))| (c, l, a, b)).collect();
        Self { model, calibration }
    }

    pub fn calibration(&self) -> Calibration {
        self.calibration.iter().map(|&(c, l, a, b)| ((c, l), (a, b))).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// The bundle directory of `path`: as given when it exists or is
/// absolute, otherwise under `QGNN_DATA_DIR`.
pub fn resolve_data_dir(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        path.to_path_buf()
    } else {
        data::dataset_path(&path.to_string_lossy())
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Bundle> {
    match &cfg.data {
        DataSource::Sbm => data::generate_sbm(&cfg.sbm_spec()),
        DataSource::Dir(p) => data::load_bundle(&resolve_data_dir(p)),
    }
}

pub fn splits_for(cfg: &ExperimentConfig, bundle: &Bundle) -> Result<Splits> {
    match cfg.split {
        SplitProtocol::Random => data::make_splits(
            &bundle.labels,
            bundle.classes,
            cfg.split_seed,
            cfg.train_per_class,
            cfg.val_size,
        ),
        SplitProtocol::Bundle => bundle.splits.clone().ok_or_else(|| Error::Config {
            field: "split".into(),
            msg: format!("bundle `{}` has no stored split", bundle.name),
        }),
    }
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bundle = load_data(cfg)?;
    let splits = splits_for(cfg, &bundle)?;
    let mcfg = cfg.model_config(bundle.features.cols(), bundle.classes)?;
    let mut model = Model::new(mcfg, cfg.seed)?;
    let report = model::train(
        &mut model,
        &bundle.graph,
        &bundle.features,
        &bundle.labels,
        &splits,
        &cfg.train_config(),
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    output::write_metrics(&out.join(METRICS_FILE), &report.metrics)?;
    output::write_moments(&out.join(MOMENTS_FILE), &report.metrics)?;
    if mcfg.kind == model::ModelKind::Smp {
        output::write_trace(&out.join(TRACE_FILE), &report.metrics)?;
    }
    Checkpoint::new(model.clone(), &report.calibration).save(&out.join(CHECKPOINT_FILE))?;
    let meta = cfg.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let bytes = QuantizedModel::from_trained(&model, &report.calibration, meta)?.save(&out.join(MODEL_FILE))?;
    output::write_manifest(out, cfg)?;
    println!(
        "best_epoch={} val_acc={:.4} test_acc={:.4} model_bytes={bytes}",
        report.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        report.best_val_acc,
        report.test_acc,
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig, source: &ModelSource) -> Result<()> {
    let bundle = load_data(cfg)?;
    let splits = splits_for(cfg, &bundle)?;
    let logits = match (&source.model_file, &source.checkpoint) {
        (Some(path), _) => {
            QuantizedModel::load(path)?
                .infer(&bundle.graph, &bundle.features)?
                .logits
        }
        (None, Some(path)) => eval_pass(&Checkpoint::load(path)?.model, &bundle.graph, &bundle.features)?.logits,
        (None, None) => return Err(Error::invalid("give --model-file or --checkpoint")),
    };
    println!(
        "train_acc={:.4} val_acc={:.4} test_acc={:.4}",
        accuracy(&logits, &bundle.labels, &splits.train)?,
        accuracy(&logits, &bundle.labels, &splits.val)?,
        accuracy(&logits, &bundle.labels, &splits.test)?,
    );
    Ok(())
}

/// Re-targets a trained model to `mode`, calibrating new ranges on the
/// configured dataset when the mode changes.
pub fn retarget(ckpt: &Checkpoint, mode: QuantMode, cfg: Option<&ExperimentConfig>) -> Result<(Model, Calibration)> {
    let old = ckpt.model.config();
    if old.mode == mode {
        return Ok((ckpt.model.clone(), ckpt.calibration()));
    }
    let cfg = cfg.ok_or_else(|| Error::invalid("a different width needs a dataset to calibrate on"))?;
    let mut model = Model::new(ModelConfig { mode, ..*old }, 0)?;
    for l in 0..model.num_linears() {
        model.set_weight(l, ckpt.model.weight(l).clone())?;
        model.set_bias(l, ckpt.model.bias(l).clone())?;
    }
    let bundle = load_data(cfg)?;
    let pass = eval_pass(&model, &bundle.graph, &bundle.features)?;
    Ok((model, pass.calibration))
}

fn cmd_export(args: &ConfigArgs, checkpoint: &Path, to_bits: Option<&str>, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mode = match to_bits {
        None => ckpt.model.config().mode,
        Some(b) => {
            let mut cfg = ExperimentConfig::default();
            cfg.set("bits", b)?;
            cfg.quant_mode()?
        }
    };
    let cfg = if mode == ckpt.model.config().mode {
        None
    } else {
        Some(args.resolve()?)
    };
    let (model, calibration) = retarget(&ckpt, mode, cfg.as_ref())?;
    let meta = vec![("source".to_string(), checkpoint.display().to_string())];
    let bytes = QuantizedModel::from_trained(&model, &calibration, meta)?.save(out)?;
    println!("bits={} bytes={bytes} path={}", mode_bits(mode), out.display());
    Ok(())
}

fn mode_bits(mode: QuantMode) -> String {
    mode.source_bits().map_or("fp".to_string(), |b| b.to_string())
}

fn cmd_bench(cfg: &ExperimentConfig, model_file: &Path, bench: &BenchConfig, out: Option<&Path>) -> Result<()> {
    let model = QuantizedModel::load(model_file)?;
    let bundle = load_data(cfg)?;
    let report = benchmark(&model, &bundle.graph, &bundle.features, bench)?;
    output::write_rows(out, &[report])
}

fn cmd_gen(cfg: &ExperimentConfig, out: &Path, with_splits: bool) -> Result<()> {
    let mut bundle = data::generate_sbm(&cfg.sbm_spec())?;
    if with_splits {
        bundle.splits = Some(data::make_splits(
            &bundle.labels,
            bundle.classes,
            cfg.split_seed,
            cfg.train_per_class,
            cfg.val_size,
        )?);
    }
    data::write_bundle(&bundle, out)?;
    let s = bundle.stats();
    println!(
        "nodes={} edges={} features={} classes={}",
        s.nodes, s.edges, s.features, s.classes
    );
    Ok(())
}

fn cmd_convert(content: &Path, cites: &Path, out: &Path) -> Result<()> {
    let (bundle, report) = data::planetoid::convert_linqs(content, cites)?;
    data::write_bundle(&bundle, out)?;
    let s = bundle.stats();
    println!(
        "nodes={} edges={} features={} classes={} dropped_citations={}",
        s.nodes, s.edges, s.features, s.classes, report.dropped_citations
    );
    Ok(())
}

fn cmd_info(path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::io_at(path, e))?;
    let m = QuantizedModel::from_bytes(&bytes)?;
    let c = m.config();
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "kind = {}", c.kind)?;
    writeln!(stdout, "mode = {}", c.mode)?;
    writeln!(stdout, "layers = {}", c.layers)?;
    writeln!(stdout, "dims = {} {} {}", c.in_dim, c.hidden, c.classes)?;
    writeln!(stdout, "file_bytes = {}", bytes.len())?;
    writeln!(stdout, "weight_bytes = {}", m.weight_bytes())?;
    for (k, v) in m.metadata() {
        writeln!(stdout, "meta.{k} = {v}")?;
    }
    Ok(())
}

/// Samples feeding hook `(class, layer)` in the checkpoint's evaluation
/// forward, before quantization.
/// Values entering one hook. A missing layer picks the first hook of the class.
pub fn hook_samples(model: &Model, bundle: &Bundle, hook: (ElementClass, Option<usize>)) -> Result<Vec<f64>> {
    let mut tape = Tape::new(Some(&bundle.graph), 0, false);
    let fwd = model.forward(&mut tape, &bundle.features, &ForwardOptions::default())?;
    let node = fwd
        .hooks
        .iter()
        .find(|h| h.class == hook.0 && hook.1.is_none_or(|l| h.layer == l))
        .ok_or_else(|| match hook.1 {
            Some(l) => Error::invalid(format!("the model has no {} hook at layer {l}", hook.0)),
            None => Error::invalid(format!("the model has no {} hook", hook.0)),
        })?
        .node;
    Ok(match tape.quant_record(node) {
        Some(r) => r.source.data().to_vec(),
        None => tape.value(node).data().to_vec(),
    })
}

fn cmd_sweep_gamma(
    args: &ConfigArgs,
    checkpoint: &Path,
    hook: (ElementClass, Option<usize>),
    bits: &[Option<u8>],
    gammas: &[f64],
    out: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let bundle = load_data(&args.resolve()?)?;
    let samples = hook_samples(&ckpt.model, &bundle, hook)?;
    let bits: Vec<u8> = bits.iter().flatten().copied().collect();
    let rows = gamma_sweep(&samples, &bits, gammas)?;
    output::write_rows(out, &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerSweepRow {
    pub layers: usize,
    pub bits: String,
    pub best_epoch: Option<usize>,
    pub val_acc: f64,
    pub test_acc: f64,
    pub s_bar: Option<f64>,
}

pub fn sweep_layers(cfg: &ExperimentConfig, layers: &[usize], bits: &[Option<u8>]) -> Result<Vec<LayerSweepRow>> {
    let bundle = load_data(cfg)?;
    let splits = splits_for(cfg, &bundle)?;
    let cells: Vec<(usize, Option<u8>)> = layers.iter().flat_map(|&l| bits.iter().map(move |&b| (l, b))).collect();
    cells
        .par_iter()
        .map(|&(l, b)| {
            let mut c = cfg.clone();
            c.layers = l;
            c.bits = b;
            let mcfg = c.model_config(bundle.features.cols(), bundle.classes)?;
            let mut model = Model::new(mcfg, c.seed)?;
            let r = model::train(
                &mut model,
                &bundle.graph,
                &bundle.features,
                &bundle.labels,
                &splits,
                &c.train_config(),
            )?;
            Ok(LayerSweepRow {
                layers: l,
                bits: b.map_or("fp".to_string(), |b| b.to_string()),
                best_epoch: r.best_epoch,
                val_acc: r.best_val_acc,
                test_acc: r.test_acc,
                s_bar: r.metrics.last().and_then(|m| m.s_bar),
            })
        })
        .collect()
}

fn cmd_sweep_layers(cfg: &ExperimentConfig, layers: &[usize], bits: &[Option<u8>], out: Option<&Path>) -> Result<()> {
    output::write_rows(out, &sweep_layers(cfg, layers, bits)?)
}

fn parse_list<T: std::str::FromStr>(field: &str, s: &str) -> Result<Vec<T>> {
    let items: Vec<T> = s
        .split(',')
        .map(|t| {
            t.trim().parse().map_err(|_| Error::Config {
                field: field.into(),
                msg: format!("cannot parse `{t}`"),
            })
        })
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config {
            field: field.into(),
            msg: "empty grid".into(),
        });
    }
    Ok(items)
}

fn parse_bits_list(s: &str, allow_fp: bool) -> Result<Vec<Option<u8>>> {
    let mut cfg = ExperimentConfig::default();
    let mut out = Vec::new();
    for t in s.split(',') {
        cfg.set("bits", t)?;
        if cfg.bits.is_none() && !allow_fp {
            return Err(Error::Config {
                field: "grid-bits".into(),
                msg: "floating point has no quantization error".into(),
            });
        }
        out.push(cfg.bits);
    }
    Ok(out)
}

/// A comma list, or `start:stop:step` with `stop` included.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let err = |msg: &str| Error::Config {
        field: "gammas".into(),
        msg: msg.into(),
    };
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [_] => parse_list::<f64>("gammas", s)?,
        [a, b, c] => {
            let p = |t: &str| t.trim().parse::<f64>().map_err(|_| err("cannot parse range"));
            let (start, stop, step) = (p(a)?, p(b)?, p(c)?);
            if !(step > 0.0 && start > 0.0 && stop >= start) {
                return Err(err("need 0 < start <= stop and a positive step"));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|i| start + i as f64 * step).collect()
        }
        _ => return Err(err("expected a list or start:stop:step")),
    };
    if grid.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
        return Err(err("range scales must be positive"));
    }
    Ok(grid)
}
