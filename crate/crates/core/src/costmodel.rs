//! Analytic training-time model.
//!
//! A step costs compute followed by communication, with no overlap:
//!
//! - compute: the worker FLOPs of one column on a shard of `B/d` samples,
//!   divided by `F * e(B/d)` where `e(b) = b / (b + b_half)` models the
//!   device's under-utilization at small batches;
//! - communication: the busiest worker's traffic, `(bytes in + out) / W`
//!   plus `(messages in + out) * L`, taken from the predicted per-link
//!   ledger of [`comm_volume`].
//!
//! [`CommModel::Aggregate`] instead charges the fabric-wide byte and message
//! totals, which treats all links as one shared channel.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fabric::{DEFAULT_MEMORY_CAPACITY, WorkerId, meter_assert};
use crate::netdef::{NetworkSpec, columnize};
use crate::schemes::{ParallelPlan, comm_volume, worker_footprints};

pub const SECONDS_PER_DAY: f64 = 86_400.0;
/// Training-set size of the reference benchmark.
pub const DEFAULT_DATASET_SIZE: u64 = 1_281_167;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_EPOCHS: u64 = 100;

/// Hardware constants of one simulated device and its links.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// Peak FLOP/s of one device.
    pub throughput: f64,
    /// Bytes per second per link; may be infinite.
    pub bandwidth: f64,
    /// Seconds per message.
    pub latency: f64,
    /// Per-device batch at which the device runs at half its peak.
    pub b_half: f64,
    /// Device memory in bytes.
    pub memory: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            throughput: 1e12,
            bandwidth: 1e9,
            latency: 1e-5,
            b_half: 32.0,
            memory: DEFAULT_MEMORY_CAPACITY,
        }
    }
}

const KEYS: [&str; 5] = ["throughput", "bandwidth", "latency", "b_half", "memory"];

impl CostParams {
    /// Throughput must be positive and finite, bandwidth positive (possibly
    /// infinite), latency and `b_half` non-negative, memory positive. The
    /// zero and infinite limits make the closed-form special cases reachable.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Error::config(format!("cost parameter {what} = {v} is out of range"));
        if !(self.throughput.is_finite() && self.throughput > 0.0) {
            return Err(bad("throughput", self.throughput));
        }
        if !(self.bandwidth > 0.0) {
            return Err(bad("bandwidth", self.bandwidth));
        }
        if !(self.latency.is_finite() && self.latency >= 0.0) {
            return Err(bad("latency", self.latency));
        }
        if !(self.b_half.is_finite() && self.b_half >= 0.0) {
            return Err(bad("b_half", self.b_half));
        }
        if self.memory == 0 {
            return Err(Error::config("cost parameter memory must be positive"));
        }
        Ok(())
    }

    /// `e(b) = b / (b + b_half)`.
    pub fn efficiency(&self, per_device_batch: f64) -> f64 {
        efficiency(per_device_batch, self.b_half)
    }

    /// `key = value` lines; floats use the shortest exact representation.
    pub fn to_text(&self) -> String {
        format!(
            "throughput = {:e}\nbandwidth = {:e}\nlatency = {:e}\nb_half = {:e}\nmemory = {}\n",
            self.throughput, self.bandwidth, self.latency, self.b_half, self.memory
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values: [Option<&str>; 5] = [None; 5];
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: n + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let k = k.trim();
            let slot = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| err(format!("unknown cost parameter {k:?}")))?;
            if values[slot].replace(v.trim()).is_some() {
                return Err(err(format!("duplicate cost parameter {k:?}")));
            }
        }
        let get = |i: usize| {
            values[i].ok_or_else(|| Error::config(format!("missing cost parameter {:?}", KEYS[i])))
        };
        let float = |i: usize| -> Result<f64> {
            let v = get(i)?;
            v.parse()
                .map_err(|_| Error::config(format!("cost parameter {} is not a number: {v:?}", KEYS[i])))
        };
        let memory = get(4)?;
        let p = Self {
            throughput: float(0)?,
            bandwidth: float(1)?,
            latency: float(2)?,
            b_half: float(3)?,
            memory: memory
                .parse()
                .map_err(|_| Error::config(format!("cost parameter memory is not a byte count: {memory:?}")))?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// `b / (b + b_half)`; identically 1 when `b_half = 0`.
pub fn efficiency(per_device_batch: f64, b_half: f64) -> f64 {
    per_device_batch / (per_device_batch + b_half)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CommModel {
    /// The busiest worker's traffic sets the communication time.
    #[default]
    PerWorker,
    /// All traffic is serialized on one channel.
    Aggregate,
}

/// Plan-dependent workload of one step; independent of [`CostParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoad {
    pub plan: ParallelPlan,
    pub per_device_batch: usize,
    /// FLOPs executed by each worker (all workers are equally loaded).
    pub worker_flops: u64,
    /// `(bytes, messages)` sent plus received by each worker.
    pub worker_traffic: Vec<(u64, u64)>,
    pub total_bytes: u64,
    pub total_messages: u64,
    pub worker_footprints: Vec<u64>,
}

impl StepLoad {
    pub fn new(plan: &ParallelPlan, net: &NetworkSpec, batch: usize) -> Result<Self> {
        let shard = plan.shard_size(batch)?;
        let cs = columnize(net, plan.model_columns, &plan.cross_layers)?;
        let volume = comm_volume(plan, net, batch)?;
        let worker_traffic = (0..plan.workers())
            .map(|w| {
                let s = volume.ledger.through(w);
                (s.bytes, s.messages)
            })
            .collect();
        Ok(Self {
            plan: plan.clone(),
            per_device_batch: shard,
            worker_flops: cs.column_report(shard).total_flops(),
            worker_traffic,
            total_bytes: volume.total_bytes(),
            total_messages: volume.total_messages(),
            worker_footprints: worker_footprints(plan, net, batch)?,
        })
    }

    /// Fails with [`Error::Infeasible`] when a worker exceeds `memory`.
    pub fn check_memory(&self, memory: u64) -> Result<()> {
        for (w, &bytes) in self.worker_footprints.iter().enumerate() {
            if let Err(e) = meter_assert(WorkerId(w), bytes, memory) {
                return Err(Error::Infeasible(format!("plan {}: {e}", self.plan)));
            }
        }
        Ok(())
    }

    /// Step time without the memory check.
    pub fn time(&self, cp: &CostParams, model: CommModel) -> StepTime {
        let compute = self.worker_flops as f64 / (cp.throughput * cp.efficiency(self.per_device_batch as f64));
        let link = |bytes: u64, messages: u64| {
            let transfer = if bytes == 0 { 0.0 } else { bytes as f64 / cp.bandwidth };
            transfer + messages as f64 * cp.latency
        };
        let comm = match model {
            CommModel::PerWorker => self
                .worker_traffic
                .iter()
                .map(|&(b, m)| link(b, m))
                .fold(0.0, f64::max),
            CommModel::Aggregate => link(self.total_bytes, self.total_messages),
        };
        StepTime { compute, comm }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTime {
    pub compute: f64,
    pub comm: f64,
}

impl StepTime {
    pub fn seconds(&self) -> f64 {
        self.compute + self.comm
    }
}

/// Modelled duration of one step of `plan`.
pub fn step_time(plan: &ParallelPlan, net: &NetworkSpec, batch: usize, cp: &CostParams) -> Result<StepTime> {
    cp.validate()?;
    let load = StepLoad::new(plan, net, batch)?;
    load.check_memory(cp.memory)?;
    Ok(load.time(cp, CommModel::default()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimePrediction {
    pub plan: ParallelPlan,
    pub step: StepTime,
    pub steps_per_epoch: u64,
    pub epochs: u64,
}

impl TimePrediction {
    pub fn step_seconds(&self) -> f64 {
        self.step.seconds()
    }

    pub fn epoch_seconds(&self) -> f64 {
        self.steps_per_epoch as f64 * self.step_seconds()
    }

    pub fn total_seconds(&self) -> f64 {
        (self.steps_per_epoch * self.epochs) as f64 * self.step_seconds()
    }

    pub fn days(&self) -> f64 {
        self.total_seconds() / SECONDS_PER_DAY
    }
}

/// `ceil(D / B)` steps per epoch.
pub fn steps_per_epoch(dataset_size: u64, batch: usize) -> u64 {
    dataset_size.div_ceil(batch as u64)
}

/// Time for `epochs` passes over `dataset_size` samples.
pub fn predict_total(
    plan: &ParallelPlan,
    net: &NetworkSpec,
    batch: usize,
    epochs: u64,
    dataset_size: u64,
    cp: &CostParams,
) -> Result<TimePrediction> {
    Ok(TimePrediction {
        plan: plan.clone(),
        step: step_time(plan, net, batch, cp)?,
        steps_per_epoch: steps_per_epoch(dataset_size, batch),
        epochs,
    })
}

/// Aligned plain-text table of predictions, one row per plan.
pub fn prediction_table(rows: &[TimePrediction]) -> String {
    let mut out = format!(
        "{:<8} {:>14} {:>14} {:>14} {:>12} {:>16} {:>10}\n",
        "plan", "compute_s", "comm_s", "step_s", "steps/epoch", "epoch_s", "days"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<8} {:>14.6e} {:>14.6e} {:>14.6e} {:>12} {:>16.3} {:>10.3}\n",
            r.plan.to_string(),
            r.step.compute,
            r.step.comm,
            r.step_seconds(),
            r.steps_per_epoch,
            r.epoch_seconds(),
            r.days()
        ));
    }
    out
}

/// A measured training time for one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub plan: ParallelPlan,
    pub days: f64,
}

/// Read `plan_d,plan_m,days` CSV rows; every plan gets `cross_layers`.
pub fn load_observations(path: impl AsRef<Path>, cross_layers: &[usize]) -> Result<Vec<Observation>> {
    parse_observations(std::fs::File::open(path)?, cross_layers)
}

pub fn parse_observations(reader: impl std::io::Read, cross_layers: &[usize]) -> Result<Vec<Observation>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["plan_d", "plan_m", "days"] {
        return Err(Error::Format(format!(
            "observation header must be plan_d,plan_m,days, got {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let row_err = |what: &str| Error::Parse {
            line: n + 2,
            message: format!("bad {what}: {:?}", rec.iter().collect::<Vec<_>>()),
        };
        let d: usize = field(0).parse().map_err(|_| row_err("plan_d"))?;
        let m: usize = field(1).parse().map_err(|_| row_err("plan_m"))?;
        let days: f64 = field(2).parse().map_err(|_| row_err("days"))?;
        if !(days.is_finite() && days > 0.0) {
            return Err(row_err("days"));
        }
        let cross = if m > 1 { cross_layers.to_vec() } else { Vec::new() };
        out.push(Observation {
            plan: ParallelPlan::new(d, m, cross)?,
            days,
        });
    }
    Ok(out)
}

/// Fixed settings of a calibration run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationSetup {
    pub batch: usize,
    pub epochs: u64,
    pub dataset_size: u64,
    /// Device memory; not fitted, only used to reject infeasible plans.
    pub memory: u64,
    pub comm_model: CommModel,
}

impl Default for CalibrationSetup {
    fn default() -> Self {
        Self {
            batch: DEFAULT_BATCH,
            epochs: DEFAULT_EPOCHS,
            dataset_size: DEFAULT_DATASET_SIZE,
            memory: DEFAULT_MEMORY_CAPACITY,
            comm_model: CommModel::default(),
        }
    }
}

/// Search box (inclusive, log-spaced) and resolution of the calibration grid.
pub const GRID_POINTS: usize = 16;
pub const THROUGHPUT_RANGE: (f64, f64) = (1e11, 1e14);
pub const BANDWIDTH_RANGE: (f64, f64) = (1e8, 1e11);
pub const LATENCY_RANGE: (f64, f64) = (1e-6, 1e-1);
pub const B_HALF_RANGE: (f64, f64) = (1.0, 256.0);

const RANGES: [(f64, f64); 4] = [THROUGHPUT_RANGE, BANDWIDTH_RANGE, LATENCY_RANGE, B_HALF_RANGE];
/// Pattern search stops once every log-step is below this.
const MIN_LOG_STEP: f64 = 1e-10;
const MAX_REFINE_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub params: CostParams,
    /// Mean squared log-ratio of predicted to observed days.
    pub objective: f64,
    /// `(observation, predicted days)` per input row.
    pub fit: Vec<(Observation, f64)>,
}

struct Objective<'a> {
    loads: Vec<StepLoad>,
    observed: Vec<f64>,
    steps: f64,
    setup: &'a CalibrationSetup,
}

impl Objective<'_> {
    fn params(&self, x: &[f64; 4]) -> CostParams {
        CostParams {
            throughput: x[0].exp(),
            bandwidth: x[1].exp(),
            latency: x[2].exp(),
            b_half: x[3].exp(),
            memory: self.setup.memory,
        }
    }

    fn days(&self, cp: &CostParams) -> Vec<f64> {
        self.loads
            .iter()
            .map(|l| self.steps * l.time(cp, self.setup.comm_model).seconds() / SECONDS_PER_DAY)
            .collect()
    }

    fn eval(&self, x: &[f64; 4]) -> f64 {
        let pred = self.days(&self.params(x));
        let n = pred.len() as f64;
        pred.iter()
            .zip(&self.observed)
            .map(|(p, o)| (p / o).ln().powi(2))
            .sum::<f64>()
            / n
    }
}

/// Fit `(F, W, L, b_half)` to observed training times.
///
/// A `GRID_POINTS^4` log-spaced grid over the documented box is scanned in
/// lexicographic order (the first strict minimum wins), then refined by a
/// compass search in log space that halves its step whenever no axis move
/// improves the objective. Both phases are deterministic.
pub fn calibrate(observations: &[Observation], net: &NetworkSpec, setup: &CalibrationSetup) -> Result<Calibration> {
    if observations.len() < 4 {
        return Err(Error::Calibration(format!(
            "need at least 4 observations to fit 4 parameters, got {}",
            observations.len()
        )));
    }
    let loads = observations
        .iter()
        .map(|o| {
            let load = StepLoad::new(&o.plan, net, setup.batch)?;
            load.check_memory(setup.memory)?;
            Ok(load)
        })
        .collect::<Result<Vec<_>>>()?;
    let obj = Objective {
        loads,
        observed: observations.iter().map(|o| o.days).collect(),
        steps: (steps_per_epoch(setup.dataset_size, setup.batch) * setup.epochs) as f64,
        setup,
    };
    if obj.steps == 0.0 {
        return Err(Error::Calibration("zero epochs or samples leave nothing to fit".into()));
    }

    let axes: Vec<Vec<f64>> = RANGES
        .iter()
        .map(|&(lo, hi)| {
            let (lo, hi) = (lo.ln(), hi.ln());
            (0..GRID_POINTS)
                .map(|k| lo + (hi - lo) * k as f64 / (GRID_POINTS - 1) as f64)
                .collect()
        })
        .collect();
    let mut best_x = [axes[0][0], axes[1][0], axes[2][0], axes[3][0]];
    let mut best = f64::INFINITY;
    for &f in &axes[0] {
        for &w in &axes[1] {
            for &l in &axes[2] {
                for &b in &axes[3] {
                    let x = [f, w, l, b];
                    let v = obj.eval(&x);
                    if v < best {
                        best = v;
                        best_x = x;
                    }
                }
            }
        }
    }

    let bounds: Vec<(f64, f64)> = RANGES.iter().map(|&(lo, hi)| (lo.ln(), hi.ln())).collect();
    let mut step: [f64; 4] = std::array::from_fn(|i| (bounds[i].1 - bounds[i].0) / (GRID_POINTS - 1) as f64);
    for _ in 0..MAX_REFINE_ITERATIONS {
        if step.iter().all(|&s| s < MIN_LOG_STEP) {
            break;
        }
        let mut improved = false;
        'axes: for axis in 0..4 {
            for sign in [1.0, -1.0] {
                let mut x = best_x;
                x[axis] = (x[axis] + sign * step[axis]).clamp(bounds[axis].0, bounds[axis].1);
                let v = obj.eval(&x);
                if v < best {
                    best = v;
                    best_x = x;
                    improved = true;
                    break 'axes;
                }
            }
        }
        if !improved {
            step.iter_mut().for_each(|s| *s *= 0.5);
        }
    }

    let params = obj.params(&best_x);
    let fit = observations.iter().cloned().zip(obj.days(&params)).collect();
    Ok(Calibration {
        params,
        objective: best,
        fit,
    })
}

impl fmt::Display for Calibration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>10} {:>10} {:>9}", "plan", "observed", "predicted", "rel_err")?;
        for (o, p) in &self.fit {
            writeln!(
                f,
                "{:<8} {:>10.3} {:>10.3} {:>9.4}",
                o.plan.to_string(),
                o.days,
                p,
                (p - o.days) / o.days
            )?;
        }
        write!(f, "objective {:.6e}", self.objective)
    }
}
