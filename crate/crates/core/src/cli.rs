//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Primitive;
use crate::error::{Error, Result};
use crate::geom::{PointCloud, SceneFlow};
use crate::harness::{
    ablate, cost_volume_scaling, evaluate, gradient_suite, synth_pair, AblationConfig, LossMode,
    Pair, SynthSpec, TrainConfig, Trainer,
};
use crate::io::{append_log, read_rows, truncate_log, write_rows, Checkpoint};
use crate::losses::LossConfig;
use crate::network::{Network, NetworkConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSettings {
    pub lr: Option<f64>,
    pub steps: Option<u64>,
    pub train_pairs: Option<usize>,
    pub eval_pairs: Option<usize>,
    pub repeats: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { repeats: 3 }
    }
}

/// Everything a run can be configured with; every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: SynthSpec,
    pub ablation: AblationSettings,
    pub bench: BenchSettings,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.loss.validate(self.network.levels)?;
        self.train.validate()?;
        self.data.validate(self.network.min_points())?;
        if self.bench.repeats == 0 {
            return Err(Error::Config("bench.repeats must be >= 1".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        let d = AblationConfig::default();
        let a = &self.ablation;
        AblationConfig {
            network: self.network.clone(),
            loss: self.loss.clone(),
            data: self.data.clone(),
            lr: a.lr.unwrap_or(self.train.lr),
            steps: a.steps.unwrap_or(d.steps),
            train_pairs: a.train_pairs.unwrap_or(d.train_pairs),
            eval_pairs: a.eval_pairs.unwrap_or(d.eval_pairs),
            repeats: a.repeats.unwrap_or(d.repeats),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pointpwc",
    version,
    about = "Scene flow estimation on point clouds"
)]
pub struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory (meaning depends on the command).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic pair as p, q and gt files.
    Synth {
        /// Write the binary point format instead of text.
        #[arg(long)]
        binary: bool,
    },
    /// Train a network and write checkpoint.ckpt and log.csv.
    Train(TrainArgs),
    /// Predict full-resolution flow for a pair of clouds.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        p: PathBuf,
        #[arg(long)]
        q: PathBuf,
    },
    /// Compare a predicted flow file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        /// Seeded instances per component.
        #[arg(long, default_value_t = 20)]
        instances: u64,
        /// Corrupt this primitive's adjoint (negative control).
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Train the three feature configurations and report EPE3D for each.
    Ablate,
    /// Per-component forward timings.
    Bench,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// supervised or self-supervised; overrides the config.
    #[arg(long)]
    pub loss: Option<String>,
    /// Total step count; overrides the config.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub p: Option<PathBuf>,
    #[arg(long)]
    pub q: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
}

/// Usage and configuration problems exit with 1, everything else with 2.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!(
            "{what} file {} does not exist",
            path.display()
        )))
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    PointCloud::new(read_rows(path)?)
}

fn read_flow(path: &Path) -> Result<SceneFlow> {
    SceneFlow::new(read_rows(path)?)
}

/// Parses `args` (including the program name) and runs the command,
/// writing human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            if e.use_stderr() {
                eprint!("{e}");
            } else {
                let _ = write!(out, "{e}");
            }
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

fn execute(cli: &Cli, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.data.seed = cli.seed;
    match &cli.command {
        Command::Synth { binary } => cmd_synth(&cfg, cli, *binary, out),
        Command::Train(args) => cmd_train(&mut cfg, cli, args, out),
        Command::Infer { checkpoint, p, q } => cmd_infer(&cfg, cli, checkpoint, p, q, out),
        Command::Eval { pred, gt } => cmd_eval(pred, gt, out),
        Command::Gradcheck {
            instances,
            inject_fault,
        } => cmd_gradcheck(cli.seed, *instances, inject_fault.as_deref(), out),
        Command::Ablate => cmd_ablate(&cfg, cli, out),
        Command::Bench => cmd_bench(&cfg, cli, out),
    }
}

fn io_runtime(e: std::io::Error) -> Failure {
    Failure::Runtime(Error::invalid(format!("writing output: {e}")))
}

fn cmd_synth(
    cfg: &RunConfig,
    cli: &Cli,
    binary: bool,
    out: &mut dyn Write,
) -> std::result::Result<i32, Failure> {
    cfg.validate()?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("synth"));
    let pair = synth_pair(&cfg.data)?;
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(Error::io(&dir, e)))?;
    let ext = if binary { "bin" } else { "txt" };
    let files = [
        ("p", pair.p.points()),
        ("q", pair.q.points()),
        ("gt", pair.gt.as_ref().unwrap().vectors()),
    ];
    for (name, rows) in files {
        let path = dir.join(format!("{name}.{ext}"));
        write_rows(&path, rows)?;
        writeln!(out, "wrote {} ({} rows)", path.display(), rows.len()).map_err(io_runtime)?;
    }
    Ok(EXIT_OK)
}

fn training_pair(
    cfg: &RunConfig,
    args: &TrainArgs,
    mode: LossMode,
) -> std::result::Result<Pair, Failure> {
    match (&args.p, &args.q) {
        (Some(p), Some(q)) => {
            require_file(p, "--p")?;
            require_file(q, "--q")?;
            let gt = match &args.gt {
                Some(g) => {
                    require_file(g, "--gt")?;
                    Some(read_flow(g)?)
                }
                None if mode == LossMode::Supervised => {
                    return Err(usage(
                        "supervised training needs --gt (ground-truth flow file)",
                    ));
                }
                None => None,
            };
            Ok(Pair {
                p: read_cloud(p)?,
                q: read_cloud(q)?,
                gt,
            })
        }
        (None, None) => {
            if args.gt.is_some() {
                return Err(usage("--gt needs --p and --q"));
            }
            Ok(synth_pair(&cfg.data)?)
        }
        _ => Err(usage("--p and --q must be given together")),
    }
}

fn cmd_train(
    cfg: &mut RunConfig,
    cli: &Cli,
    args: &TrainArgs,
    out: &mut dyn Write,
) -> std::result::Result<i32, Failure> {
    if let Some(l) = &args.loss {
        cfg.train.loss = l.parse()?;
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let mode = cfg.train.loss;
    let pair = training_pair(cfg, args, mode)?;
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("run"));
    let ckpt_path = dir.join("checkpoint.ckpt");
    let log_path = dir.join("log.csv");

    let network = Network::new(cfg.network.clone(), cli.seed)?;
    network.check_input(&pair.p, "first cloud")?;
    network.check_input(&pair.q, "second cloud")?;
    let mut trainer = Trainer::new(network, cfg.loss.clone(), mode, cfg.train.lr)?;
    if args.resume && ckpt_path.is_file() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        ckpt.restore(&mut trainer.network.params, Some(&mut trainer.adam))?;
        trainer.step = ckpt.step;
        truncate_log(&log_path, ckpt.step)?;
        writeln!(out, "resuming from step {}", ckpt.step).map_err(io_runtime)?;
    } else if !args.resume {
        let _ = fs::remove_file(&log_path);
    }
    fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(Error::io(&dir, e)))?;

    let remaining = cfg.train.steps.saturating_sub(trainer.step);
    let every = cfg.train.checkpoint_every;
    let mut pending: Vec<String> = Vec::new();
    let save = |t: &Trainer, pending: &mut Vec<String>| -> Result<()> {
        append_log(&log_path, pending)?;
        pending.clear();
        Checkpoint::from_state(&t.network.params, Some(&t.adam), t.step).save(&ckpt_path)
    };
    let pairs = [pair];
    let result = trainer.run(&pairs, remaining, |t, rec| {
        pending.push(rec.csv_row());
        if every > 0 && rec.step % every == 0 {
            save(t, &mut pending)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        // Keep the log of completed steps for diagnosis.
        append_log(&log_path, &pending)?;
        return Err(e.into());
    }
    save(&trainer, &mut pending)?;
    writeln!(
        out,
        "trained to step {} ({mode:?}); checkpoint {}",
        trainer.step,
        ckpt_path.display()
    )
    .map_err(io_runtime)?;
    Ok(EXIT_OK)
}

fn cmd_infer(
    cfg: &RunConfig,
    cli: &Cli,
    checkpoint: &Path,
    p: &Path,
    q: &Path,
    out: &mut dyn Write,
) -> std::result::Result<i32, Failure> {
    cfg.network.validate()?;
    require_file(checkpoint, "--checkpoint")?;
    require_file(p, "--p")?;
    require_file(q, "--q")?;
    let dest = cli.out.clone().unwrap_or_else(|| PathBuf::from("flow.txt"));
    let mut network = Network::new(cfg.network.clone(), 0)?;
    Checkpoint::load(checkpoint)?.restore(&mut network.params, None)?;
    let flow = network.infer(&read_cloud(p)?, &read_cloud(q)?)?;
    write_rows(&dest, flow.vectors())?;
    writeln!(out, "wrote {} ({} rows)", dest.display(), flow.len()).map_err(io_runtime)?;
    Ok(EXIT_OK)
}

fn cmd_eval(pred: &Path, gt: &Path, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    require_file(pred, "--pred")?;
    require_file(gt, "--gt")?;
    let m = evaluate(&read_flow(pred)?, &read_flow(gt)?)?;
    let text = format!(
        "epe3d {}\nacc_strict {}\nacc_relaxed {}\noutlier {}\n\
         # thresholds follow scene-flow literature conventions: strict EPE<0.05 or rel<5%, \
         relaxed EPE<0.1 or rel<10%, outlier EPE>0.3 or rel>10%\n",
        m.epe3d, m.acc_strict, m.acc_relaxed, m.outlier
    );
    out.write_all(text.as_bytes()).map_err(io_runtime)?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(
    seed: u64,
    instances: u64,
    fault: Option<&str>,
    out: &mut dyn Write,
) -> std::result::Result<i32, Failure> {
    let fault: Option<Primitive> = match fault {
        Some(s) => Some(s.parse().map_err(|e: Error| usage(e.to_string()))?),
        None => None,
    };
    if instances == 0 {
        return Err(usage("--instances must be >= 1"));
    }
    let rows = gradient_suite(seed, instances, fault)?;
    writeln!(
        out,
        "{:<24} {:>12} {:>10} {:>8}  result",
        "component", "max_rel_err", "tolerance", "probes"
    )
    .map_err(io_runtime)?;
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        writeln!(
            out,
            "{:<24} {:>12.3e} {:>10.0e} {:>8}  {}",
            r.component,
            r.max_rel_error,
            r.tolerance,
            r.probes,
            if r.passed() { "pass" } else { "FAIL" }
        )
        .map_err(io_runtime)?;
    }
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}

fn cmd_ablate(
    cfg: &RunConfig,
    cli: &Cli,
    out: &mut dyn Write,
) -> std::result::Result<i32, Failure> {
    cfg.validate()?;
    let rows = ablate(&cfg.ablation(), cli.seed)?;
    let mut text = format!("{:<32} {:>10}\n", "configuration", "EPE3D");
    for r in &rows {
        text.push_str(&format!("{:<32} {:>10.5}\n", r.label(), r.epe3d));
    }
    out.write_all(text.as_bytes()).map_err(io_runtime)?;
    if let Some(path) = &cli.out {
        let json = serde_json::to_string_pretty(&rows)
            .map_err(|e| Failure::Runtime(Error::invalid(e.to_string())))?;
        fs::write(path, json).map_err(|e| Failure::Runtime(Error::io(path, e)))?;
    }
    Ok(EXIT_OK)
}

fn cmd_bench(cfg: &RunConfig, cli: &Cli, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    cfg.validate()?;
    let pair = synth_pair(&cfg.data)?;
    let network = Network::new(cfg.network.clone(), cli.seed)?;
    let mut totals = [0.0; 4];
    let mut names = [""; 4];
    for _ in 0..cfg.bench.repeats {
        let t = network.component_timings(&pair.p, &pair.q)?;
        for (i, (name, ms)) in t.rows().into_iter().enumerate() {
            names[i] = name;
            totals[i] += ms;
        }
    }
    let mut text = format!("{:<24} {:>10}\n", "component", "ms");
    for (name, total) in names.iter().zip(totals) {
        text.push_str(&format!(
            "{:<24} {:>10.3}\n",
            name,
            total / cfg.bench.repeats as f64
        ));
    }
    let fit = cost_volume_scaling(
        &[128, 256, 512],
        256,
        cfg.network.k_cost,
        cfg.bench.repeats,
        cli.seed,
    )?;
    text.push_str(&format!(
        "\ncost volume, k = {}, n2 = 256\n{:<8} {:>10}\n",
        cfg.network.k_cost, "n1", "ms"
    ));
    for (n1, ms) in &fit.points {
        text.push_str(&format!("{n1:<8} {ms:>10.3}\n"));
    }
    text.push_str(&format!(
        "slope {:.5} ms/point, R^2 {:.4}\n",
        fit.slope, fit.r2
    ));
    out.write_all(text.as_bytes()).map_err(io_runtime)?;
    Ok(EXIT_OK)
}
