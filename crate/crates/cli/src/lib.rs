//! Command implementations behind the `snnmx` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use snn_minimax::config::{InitMode, RunConfig};
use snn_minimax::data::{load_checkpoint, save_checkpoint, Checkpoint, Dataset, EpochRow, MetricsWriter};
use snn_minimax::minimax::{counted_sparsity, CompressionRun, RunObserver};
use snn_minimax::resource::ResourceModel;
use snn_minimax::snn::{Architecture, SpikingNetwork};
use snn_minimax::train::evaluate;
use snn_minimax::Error;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Long flags owned by the argument parser; any other `--key=value` is a config override.
const OWN_FLAGS: &[&str] = &["config", "seed", "out", "resume", "help", "version"];

#[derive(Debug, Parser)]
#[command(name = "snnmx", version, about = "Train and compress spiking neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense baseline; writes baseline.ckpt and metrics.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a last.ckpt written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compress to each budget; writes budget_<b>.ckpt, final.ckpt and metrics.csv.
    Compress {
        #[command(flatten)]
        common: Common,
        /// Continue from a last.ckpt written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Report accuracy, sparsity and resource use of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
    },
    /// Summarise the per-budget checkpoints in the output directory as summary.csv.
    ExportMetrics {
        #[command(flatten)]
        common: Common,
    },
}

/// Split `--key=value` overrides from the arguments clap should see.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((key, value)) = a.strip_prefix("--").and_then(|kv| kv.split_once('=')) {
            if !OWN_FLAGS.contains(&key) {
                overrides.push((key.replace('-', "_"), value.to_string()));
                continue;
            }
        }
        rest.push(a.clone());
    }
    (rest, overrides)
}

/// Parse, run and map the outcome to an exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let (rest, overrides) = split_overrides(&args);
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &overrides) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 1 for configuration problems, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    let is_config = e
        .chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config { .. })));
    if is_config {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

pub fn run(command: Command, overrides: &[(String, String)]) -> anyhow::Result<()> {
    match command {
        Command::Train { common, resume } => {
            let cfg = load_config(&common, overrides)?;
            cmd_train(&cfg, &common.out, resume.as_deref())
        }
        Command::Compress { common, resume } => {
            let cfg = load_config(&common, overrides)?;
            cmd_compress(&cfg, &common.out, resume.as_deref())
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common, overrides)?;
            let report = cmd_eval(&cfg, &checkpoint)?;
            print!("{report}");
            Ok(())
        }
        Command::ExportMetrics { common } => {
            let rows = cmd_export_metrics(&common.out)?;
            println!("wrote {} rows to {}", rows, common.out.join("summary.csv").display());
            Ok(())
        }
    }
}

/// Config file, then `--key=value` overrides, then `--seed`.
pub fn load_config(common: &Common, overrides: &[(String, String)]) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config("--config", format!("{}: {e}", p.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in overrides {
        cfg.apply_override(k, v)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes metrics rows, budget snapshots and a per-epoch resume point.
struct Recorder {
    out: PathBuf,
    metrics: MetricsWriter<fs::File>,
    last_acc: Option<f64>,
}

impl RunObserver for Recorder {
    fn epoch(&mut self, row: &EpochRow) -> snn_minimax::Result<()> {
        self.last_acc = Some(row.acc);
        self.metrics.append(row)
    }

    fn budget_reached(&mut self, budget: f64, accuracy: f64, run: &CompressionRun) -> snn_minimax::Result<()> {
        let mut ck = run.checkpoint(Some(budget), Some(accuracy));
        ck.resume = None;
        let path = self.out.join(budget_file_name(budget));
        info!(
            "budget {budget}: accuracy {accuracy:.4}, sparsity {:.5} -> {}",
            run.counted_sparsity(),
            path.display()
        );
        save_checkpoint(&path, &ck)
    }
}

pub fn budget_file_name(budget: f64) -> String {
    format!("budget_{budget}.ckpt")
}

fn open_recorder(out: &Path, resumed: bool) -> anyhow::Result<Recorder> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.csv");
    if !resumed && metrics_path.exists() {
        fs::remove_file(&metrics_path)?;
    }
    Ok(Recorder {
        out: out.to_path_buf(),
        metrics: MetricsWriter::open(&metrics_path)?,
        last_acc: None,
    })
}

/// Step the run, saving `last.ckpt` whenever an epoch ends.
fn drive(run: &mut CompressionRun, train: &Dataset, test: &Dataset, rec: &mut Recorder) -> anyhow::Result<()> {
    let last = rec.out.join("last.ckpt");
    loop {
        let epoch = run.epoch();
        let more = run.step(train, Some(test), rec)?;
        if run.epoch() != epoch {
            save_checkpoint(&last, &run.checkpoint(None, rec.last_acc))?;
        }
        if !more {
            return Ok(());
        }
    }
}

fn final_checkpoint(
    run: &CompressionRun,
    test: &Dataset,
    eval_batch: usize,
    last_acc: Option<f64>,
) -> anyhow::Result<Checkpoint> {
    let acc = match last_acc {
        Some(a) => a,
        None => evaluate(run.net(), test, eval_batch)?,
    };
    let mut ck = run.checkpoint(None, Some(acc));
    ck.resume = None;
    Ok(ck)
}

fn start_or_resume(
    cfg: &RunConfig,
    net: impl FnOnce() -> anyhow::Result<SpikingNetwork>,
    budgets: Vec<f64>,
    resume: Option<&Path>,
) -> anyhow::Result<CompressionRun> {
    let mut schedule = cfg.schedule()?;
    schedule.budgets = budgets;
    Ok(match resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            info!("resuming from {} at epoch {}, iteration {}", p.display(), ck.epoch, ck.iteration);
            CompressionRun::resume(&ck, schedule, cfg.settings())?
        }
        None => {
            let net = net()?;
            let state = cfg.pruning_state(&net);
            CompressionRun::new(net, state, cfg.resource, schedule, cfg.settings())?
        }
    })
}

/// Dense training. Budgets in the config are ignored.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    if !cfg.budgets.is_empty() {
        warn!("train ignores budgets {:?}", cfg.budgets);
    }
    let (train, test) = cfg.load_data()?;
    info!("train: {} samples, test: {} samples, model {}", train.len(), test.len(), cfg.model);
    let mut run = start_or_resume(cfg, || Ok(cfg.build_network()?), Vec::new(), resume)?;
    let mut rec = open_recorder(out, resume.is_some())?;
    drive(&mut run, &train, &test, &mut rec)?;
    let ck = final_checkpoint(&run, &test, cfg.eval_batch, rec.last_acc)?;
    let path = out.join("baseline.ckpt");
    save_checkpoint(&path, &ck)?;
    info!("baseline accuracy {:.4} -> {}", ck.accuracy.unwrap_or(0.0), path.display());
    Ok(())
}

/// Network the compression starts from, per the config's `init`.
pub fn initial_network(cfg: &RunConfig, out: &Path) -> anyhow::Result<SpikingNetwork> {
    let path = match &cfg.init {
        Some(InitMode::Scratch) => return Ok(cfg.build_network()?),
        Some(InitMode::Pretrained(p)) => p.clone(),
        None => out.join("baseline.ckpt"),
    };
    if !path.exists() {
        return Err(Error::config(
            "init",
            format!("baseline checkpoint {} not found; run `train` first or set init = scratch", path.display()),
        )
        .into());
    }
    let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let mut net = ck.network()?;
    let want: Architecture = cfg.architecture()?;
    if net.architecture() != want {
        return Err(Error::config(
            "model",
            format!("config model {want} does not match checkpoint model {}", net.architecture()),
        )
        .into());
    }
    if net.timesteps() != cfg.timesteps {
        warn!("checkpoint was trained with T={}, compressing with T={}", net.timesteps(), cfg.timesteps);
        net.set_timesteps(cfg.timesteps)?;
    }
    net.detach_reset = cfg.detach_reset;
    net.mark_prunable(cfg.min_prunable);
    info!("starting from {} (accuracy at save {:?})", path.display(), ck.accuracy);
    Ok(net)
}

pub fn cmd_compress(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let (train, test) = cfg.load_data()?;
    let mut run = start_or_resume(cfg, || initial_network(cfg, out), cfg.budgets.clone(), resume)?;
    let prunable: usize = run.net().prunable_layers().map(|l| run.net().layers[l].weight.len()).sum();
    if prunable == 0 && !cfg.budgets.is_empty() {
        bail!(Error::config("min_prunable", "no layer is large enough to prune"));
    }
    info!(
        "compress: budgets {:?}, {} prunable weights, resource {}",
        cfg.budgets, prunable, cfg.resource
    );
    let mut rec = open_recorder(out, resume.is_some())?;
    drive(&mut run, &train, &test, &mut rec)?;
    if !run.remaining_budgets().is_empty() {
        warn!("budgets {:?} were not reached", run.remaining_budgets());
    }
    let ck = final_checkpoint(&run, &test, cfg.eval_batch, rec.last_acc)?;
    save_checkpoint(&out.join("final.ckpt"), &ck)?;
    Ok(())
}

/// Accuracy and sparsity report for a checkpoint on the config's test set.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<String> {
    use std::fmt::Write;

    let ck = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let net = ck.network()?;
    let (_, test) = cfg.load_data()?;
    if test.features() != net.input_len() || test.classes() > net.output_len() {
        bail!(Error::dim(format!(
            "checkpoint model {} does not fit a dataset with {} features and {} classes",
            net.architecture(),
            test.features(),
            test.classes()
        )));
    }
    let acc = evaluate(&net, &test, cfg.eval_batch)?;
    let rm = ResourceModel::new(&net, ck.resource, ck.pruning.granularity);
    let mut s = String::new();
    writeln!(s, "checkpoint    {}", checkpoint.display())?;
    writeln!(s, "model         {} (T={})", net.architecture(), net.timesteps())?;
    if let Some(b) = ck.budget_tag {
        writeln!(s, "budget        {b}")?;
    }
    writeln!(s, "accuracy      {acc}")?;
    if let Some(saved) = ck.accuracy {
        writeln!(s, "saved acc     {saved}")?;
    }
    writeln!(s, "sparsity      {}", counted_sparsity(&net))?;
    writeln!(s, "resource      {} {}", ck.resource, rm.measured(&net, 0.0))?;
    writeln!(s)?;
    writeln!(s, "{:>5} {:>9} {:>10} {:>10} {:>8} {:>8} {:>12}", "layer", "prunable", "weights", "zeros", "units", "zero_u", "connectivity")?;
    let (mut w_sum, mut z_sum) = (0, 0);
    for u in rm.layer_report(&net, 0.0) {
        w_sum += u.weights;
        z_sum += u.zero_weights;
        writeln!(
            s,
            "{:>5} {:>9} {:>10} {:>10} {:>8} {:>8} {:>12.6}",
            u.layer,
            u.prunable,
            u.weights,
            u.zero_weights,
            u.units,
            u.zero_units,
            1.0 - u.zero_weights as f64 / u.weights as f64
        )?;
    }
    writeln!(
        s,
        "{:>5} {:>9} {:>10} {:>10} {:>8} {:>8} {:>12.6}",
        "all",
        "",
        w_sum,
        z_sum,
        "",
        "",
        1.0 - z_sum as f64 / w_sum.max(1) as f64
    )?;
    Ok(s)
}

/// One summary row per checkpoint in `out` (baseline first, then budgets descending).
pub fn cmd_export_metrics(out: &Path) -> anyhow::Result<usize> {
    let mut found = Vec::new();
    for entry in fs::read_dir(out).with_context(|| format!("reading {}", out.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name == "baseline.ckpt" || (name.starts_with("budget_") && name.ends_with(".ckpt")) {
            found.push(path);
        }
    }
    let mut rows = Vec::new();
    for path in found {
        let ck = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        let net = ck.network()?;
        let rm = ResourceModel::new(&net, ck.resource, ck.pruning.granularity);
        rows.push((ck.budget_tag.unwrap_or(1.0), ck, counted_sparsity(&net), rm.measured(&net, 0.0)));
    }
    rows.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["budget", "epoch", "iteration", "accuracy", "counted_sparsity", "resource_kind", "resource"])?;
    for (budget, ck, sparsity, resource) in &rows {
        w.write_record([
            budget.to_string(),
            ck.epoch.to_string(),
            ck.iteration.to_string(),
            ck.accuracy.map_or(String::new(), |a| a.to_string()),
            sparsity.to_string(),
            ck.resource.to_string(),
            resource.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_own_flags() {
        let (rest, ov) = split_overrides(&strings(&[
            "snnmx",
            "compress",
            "--config=a.cfg",
            "--seed",
            "3",
            "--budgets=0.5,0.2",
            "--min-prunable=10",
            "--resume",
            "--out=x",
        ]));
        assert_eq!(rest, strings(&["snnmx", "compress", "--config=a.cfg", "--seed", "3", "--resume", "--out=x"]));
        assert_eq!(
            ov,
            vec![("budgets".to_string(), "0.5,0.2".to_string()), ("min_prunable".to_string(), "10".to_string())]
        );
    }

    #[test]
    fn values_keep_their_own_equals_signs() {
        let (_, ov) = split_overrides(&strings(&["snnmx", "train", "--data_dir=/a=b"]));
        assert_eq!(ov, vec![("data_dir".to_string(), "/a=b".to_string())]);
    }
}
