//! The `parconv` command line.
//!
//! [`run`] parses arguments, executes one subcommand and maps the outcome to
//! an exit code: 0 on success, 1 for usage or validation errors, 2 for
//! failures while running. It writes only to the given streams and to the
//! files named on the command line.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::costmodel::{
    CalibrationSetup, CommModel, CostParams, DEFAULT_BATCH, DEFAULT_DATASET_SIZE, DEFAULT_EPOCHS,
    calibrate, load_observations, predict_total, prediction_table,
};
use crate::error::{Error, Result};
use crate::fabric::{DEFAULT_MEMORY_CAPACITY, Scheduling};
use crate::model::{Batch, Params};
use crate::netdef::{ActShape, NetworkSpec, parse_network_file};
use crate::schemes::{ParallelPlan, equivalence_divergence};
use crate::sgd::SgdConfig;
use crate::trainer::{
    Dataset, Series, Split, TrainConfig, XAxis, YAxis, emit_csv, emit_svg, gen_synthetic, train,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Largest relative divergence `verify` accepts.
pub const VERIFY_TOLERANCE: f64 = 1e-9;

pub const TRAIN_FILE: &str = "train.psds";
pub const TEST_FILE: &str = "test.psds";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Parser)]
#[command(
    name = "parconv",
    version,
    about = "Parallel CNN training over simulated devices and a training-time cost model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset pair.
    GenData(GenDataArgs),
    /// Check that parallel plans reproduce single-device training.
    Verify(VerifyArgs),
    /// Train a network under one plan and write metrics and charts.
    Train(TrainArgs),
    /// Predict training time for one or more plans.
    Estimate(EstimateArgs),
    /// Fit cost parameters to observed training times.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchedulerArg {
    Cooperative,
    Threaded,
}

impl From<SchedulerArg> for Scheduling {
    fn from(s: SchedulerArg) -> Self {
        match s {
            SchedulerArg::Cooperative => Scheduling::Cooperative,
            SchedulerArg::Threaded => Scheduling::Threaded,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CommModelArg {
    PerWorker,
    Aggregate,
}

impl From<CommModelArg> for CommModel {
    fn from(c: CommModelArg) -> Self {
        match c {
            CommModelArg::PerWorker => CommModel::PerWorker,
            CommModelArg::Aggregate => CommModel::Aggregate,
        }
    }
}

#[derive(Debug, Args)]
struct SgdArgs {
    #[arg(long, default_value_t = SgdConfig::default().learning_rate)]
    lr: f64,
    #[arg(long, default_value_t = SgdConfig::default().momentum)]
    momentum: f64,
    #[arg(long, default_value_t = SgdConfig::default().weight_decay)]
    weight_decay: f64,
}

impl SgdArgs {
    fn config(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: usize,
    #[arg(long)]
    per_class: usize,
    /// Sample shape as `CxHxW`.
    #[arg(long, value_parser = parse_shape)]
    shape: ActShape,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving `train.psds` and `test.psds`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    net: PathBuf,
    /// Comma-separated plan files.
    #[arg(long, value_delimiter = ',', required = true)]
    plans: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SchedulerArg::Cooperative)]
    scheduler: SchedulerArg,
    #[command(flatten)]
    sgd: SgdArgs,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    net: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    epochs: u64,
    #[arg(long)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding `train.psds` and `test.psds`.
    #[arg(long)]
    data: PathBuf,
    /// Cost parameters for the simulated-time axis and device memory.
    #[arg(long)]
    cost: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = SchedulerArg::Cooperative)]
    scheduler: SchedulerArg,
    /// Also record measured wall-clock time (output is then not reproducible).
    #[arg(long)]
    wall_clock: bool,
    #[command(flatten)]
    sgd: SgdArgs,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[arg(long)]
    net: PathBuf,
    /// Plan files; repeat the flag or separate with commas.
    #[arg(long, value_delimiter = ',', required = true)]
    plan: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long)]
    cost: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: u64,
    #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
    dataset_size: u64,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    net: PathBuf,
    /// CSV with columns `plan_d,plan_m,days`.
    #[arg(long)]
    observations: PathBuf,
    /// Where the fitted cost parameters are written.
    #[arg(long)]
    out: PathBuf,
    /// Cross layers of every model-parallel plan in the observations.
    #[arg(long, value_delimiter = ',')]
    cross_layers: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_BATCH)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: u64,
    #[arg(long, default_value_t = DEFAULT_DATASET_SIZE)]
    dataset_size: u64,
    /// Device memory in bytes, used to reject infeasible plans.
    #[arg(long, default_value_t = DEFAULT_MEMORY_CAPACITY)]
    memory: u64,
    #[arg(long, value_enum, default_value_t = CommModelArg::PerWorker)]
    comm_model: CommModelArg,
}

fn parse_shape(s: &str) -> std::result::Result<ActShape, String> {
    let dims: Vec<usize> = s
        .split(['x', 'X'])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| format!("expected CxHxW, got {s:?}"))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok(ActShape::Map { c, h, w }),
        _ => Err(format!("expected three positive extents CxHxW, got {s:?}")),
    }
}

/// Run the command line `args` (including the program name).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                EXIT_VALIDATION
            } else {
                let _ = write!(out, "{rendered}");
                EXIT_OK
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a, out),
        Command::Verify(a) => verify(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Estimate(a) => estimate(&a, out),
        Command::Calibrate(a) => calibrate_cmd(&a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME }
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    let (train_set, test_set) = gen_synthetic(a.classes, a.per_class, a.shape, a.seed)?;
    ensure_dir(&a.out)?;
    for (set, name) in [(&train_set, TRAIN_FILE), (&test_set, TEST_FILE)] {
        let path = a.out.join(name);
        set.save(&path)?;
        writeln!(out, "wrote {} ({} samples)", path.display(), set.len())?;
    }
    Ok(EXIT_OK)
}

/// Random batches for the equivalence check, drawn from a synthetic set.
fn verify_batches(net: &NetworkSpec, steps: usize, batch: usize, seed: u64) -> Result<Vec<Batch>> {
    if steps == 0 || batch == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    let classes = net.classes();
    let per_class = (steps * batch).div_ceil(classes);
    let (set, _) = gen_synthetic(classes, per_class, net.input(), seed)?;
    (0..steps)
        .map(|s| {
            let rows: Vec<usize> = (s * batch..(s + 1) * batch).collect();
            Batch::new(
                set.images().select_rows(&rows)?,
                rows.iter().map(|&r| set.labels()[r]).collect(),
            )
        })
        .collect()
}

fn verify(a: &VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let net = parse_network_file(&a.net)?;
    let plans = a.plans.iter().map(ParallelPlan::load).collect::<Result<Vec<_>>>()?;
    let batches = verify_batches(&net, a.steps, a.batch, a.seed)?;
    let params = Params::init(&net, a.seed);
    let sgd = a.sgd.config();
    writeln!(out, "{:<40} {:<8} {:>12} {:>12} {:>12} {:>6}", "plan_file", "plan", "loss_div", "param_div", "max_div", "ok")?;
    let mut all_ok = true;
    for (path, plan) in a.plans.iter().zip(&plans) {
        let d = equivalence_divergence(&net, plan, &params, sgd, &batches, a.scheduler.into())?;
        let ok = d.max() <= VERIFY_TOLERANCE;
        all_ok &= ok;
        writeln!(
            out,
            "{:<40} {:<8} {:>12.3e} {:>12.3e} {:>12.3e} {:>6}",
            path.display().to_string(),
            plan.to_string(),
            d.loss,
            d.params,
            d.max(),
            if ok { "yes" } else { "no" }
        )?;
    }
    Ok(if all_ok { EXIT_OK } else { EXIT_VALIDATION })
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let net = parse_network_file(&a.net)?;
    let plan = ParallelPlan::load(&a.plan)?;
    let mut cfg = TrainConfig::new(net, plan);
    cfg.epochs = a.epochs;
    cfg.batch = a.batch;
    cfg.seed = a.seed;
    cfg.sgd = a.sgd.config();
    cfg.scheduling = a.scheduler.into();
    cfg.wall_clock = a.wall_clock;
    if let Some(path) = &a.cost {
        cfg.cost = CostParams::load(path)?;
    }
    cfg.validate()?;
    let train_set = Dataset::load(a.data.join(TRAIN_FILE), Split::Train)?;
    let test_set = Dataset::load(a.data.join(TEST_FILE), Split::Test)?;
    let records = train(&cfg, &train_set, &test_set)?.records;

    ensure_dir(&a.out_dir)?;
    emit_csv(&records, a.out_dir.join(METRICS_FILE))?;
    let label = cfg.plan.to_string();
    let series = [Series {
        label: &label,
        records: &records,
    }];
    let mut xs = vec![XAxis::Updates, XAxis::SimTime];
    if a.wall_clock {
        xs.push(XAxis::WallTime);
    }
    for y in [YAxis::TrainLoss, YAxis::TestError] {
        for &x in &xs {
            emit_svg(&series, x, y, a.out_dir.join(format!("{}_vs_{}.svg", y.slug(), x.slug())))?;
        }
    }
    if let Some(last) = records.last() {
        let err = records.iter().rev().find_map(|r| r.test_error).unwrap_or(f64::NAN);
        writeln!(
            out,
            "plan {label}: {} updates, final loss {:.6}, test error {:.4}, simulated {:.6e} s",
            last.update, last.train_loss, err, last.sim_seconds
        )?;
    }
    writeln!(out, "wrote {}", a.out_dir.display())?;
    Ok(EXIT_OK)
}

fn estimate(a: &EstimateArgs, out: &mut dyn Write) -> Result<i32> {
    let net = parse_network_file(&a.net)?;
    let cost = CostParams::load(&a.cost)?;
    let rows = a
        .plan
        .iter()
        .map(|p| predict_total(&ParallelPlan::load(p)?, &net, a.batch, a.epochs, a.dataset_size, &cost))
        .collect::<Result<Vec<_>>>()?;
    write!(out, "{}", prediction_table(&rows))?;
    Ok(EXIT_OK)
}

fn calibrate_cmd(a: &CalibrateArgs, out: &mut dyn Write) -> Result<i32> {
    let net = parse_network_file(&a.net)?;
    let observations = load_observations(&a.observations, &a.cross_layers)?;
    let setup = CalibrationSetup {
        batch: a.batch,
        epochs: a.epochs,
        dataset_size: a.dataset_size,
        memory: a.memory,
        comm_model: a.comm_model.into(),
    };
    let cal = calibrate(&observations, &net, &setup)?;
    cal.params.save(&a.out)?;
    write!(out, "{}", cal.params.to_text())?;
    writeln!(out, "{cal}")?;
    Ok(EXIT_OK)
}
