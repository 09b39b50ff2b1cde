//! Data-, model- and hybrid-parallel SGD steps over a [`Fabric`], and the
//! single-device reference step they are checked against.
//!
//! A [`Cluster`] owns one fabric laid out as a `d x m` grid (see
//! [`ParallelPlan`]). [`data_parallel_step`], [`model_parallel_step`] and
//! [`hybrid_step`] are the same grid program restricted to `m = 1`, `d = 1`
//! and general grids respectively.
//!
//! Conventions: shard `i` is the contiguous rows `i*B/d .. (i+1)*B/d`; shard
//! losses and gradients are normalized by the global batch `B`, so the
//! root's ascending-order sum is the full-batch mean; the root of column `j`
//! is worker `(0, j)`.

mod plan;
mod program;

pub use plan::ParallelPlan;
pub use program::WorkerState;

use crate::error::{Error, Result};
use crate::fabric::{
    CommLedger, DEFAULT_WIRE_ELEMENT_BYTES, DeviceSpec, Fabric, Scheduling, WorkerId,
};
use crate::model::{Batch, Params, loss_and_grads, merge_params, split_params};
use crate::netdef::{ColumnizedSpec, NetworkSpec, column_footprint_bytes, columnize, cross_connection_bytes};
use crate::sgd::{SgdConfig, SgdState, sgd_step};

use program::GridStep;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    /// Full-batch mean loss before the update.
    pub loss: f64,
    /// Traffic of this step alone.
    pub ledger: CommLedger,
    /// Modelled duration of the step, when a cost model is attached.
    pub sim_seconds: Option<f64>,
}

/// Outcome of [`reference_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStep {
    pub result: StepResult,
    pub params: Params,
    pub sgd: SgdState,
}

fn check_loss(loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    Ok(loss)
}

/// One full-batch forward, backward and SGD update on a single device.
pub fn reference_step(net: &NetworkSpec, params: &Params, sgd: &SgdState, batch: &Batch) -> Result<ReferenceStep> {
    let (loss, grads) = loss_and_grads(net, params, batch, batch.len())?;
    let (p, sgd) = sgd_step(params.tensors(), grads.tensors(), sgd)?;
    Ok(ReferenceStep {
        result: StepResult {
            loss: check_loss(loss)?,
            ledger: CommLedger::new(1),
            sim_seconds: None,
        },
        params: params.with_tensors(p)?,
        sgd,
    })
}

/// Resident bytes of every worker of `plan` during a step with global batch `batch`.
pub fn worker_footprints(plan: &ParallelPlan, net: &NetworkSpec, batch: usize) -> Result<Vec<u64>> {
    let cs = columnize(net, plan.model_columns, &plan.cross_layers)?;
    let shard = plan.shard_size(batch)?;
    let root = column_footprint_bytes(&cs, shard, true);
    let replica = column_footprint_bytes(&cs, shard, false);
    Ok((0..plan.workers())
        .map(|w| if plan.is_root(WorkerId(w)) { root } else { replica })
        .collect())
}

/// Predicted traffic of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CommVolume {
    /// Predicted per-link counters, directly comparable to a measured ledger.
    pub ledger: CommLedger,
    /// Activation traffic between the columns of all replicas.
    pub cross_bytes: u64,
    /// Gradient and parameter round trips between replicas.
    pub replica_bytes: u64,
}

impl CommVolume {
    pub fn total_bytes(&self) -> u64 {
        self.cross_bytes + self.replica_bytes
    }

    pub fn total_messages(&self) -> u64 {
        self.ledger.total_messages()
    }
}

/// Closed-form traffic of one step at the fabric's default wire size.
pub fn comm_volume(plan: &ParallelPlan, net: &NetworkSpec, batch: usize) -> Result<CommVolume> {
    comm_volume_with(plan, net, batch, DEFAULT_WIRE_ELEMENT_BYTES)
}

/// Closed-form traffic of one step: `d` replicas each pay the column
/// exchange for a shard of `B/d`, and every column pays `2(d-1)` messages of
/// its parameter count.
pub fn comm_volume_with(plan: &ParallelPlan, net: &NetworkSpec, batch: usize, wire: u64) -> Result<CommVolume> {
    let cs = columnize(net, plan.model_columns, &plan.cross_layers)?;
    let shard = plan.shard_size(batch)?;
    let (d, m) = (plan.data_shards, plan.model_columns);
    let mut ledger = CommLedger::new(plan.workers());
    let cross = cross_connection_bytes(&cs, shard, wire);
    for i in 0..d {
        for layer in &cross.layers {
            let per_pair = shard as u64 * layer.slice_elements as u64 * wire;
            let directions = if layer.backward_messages > 0 { 2 } else { 1 };
            for a in 0..m {
                for b in (0..m).filter(|&b| b != a) {
                    for _ in 0..directions {
                        ledger.record(plan.worker(i, a).0, plan.worker(i, b).0, per_pair);
                    }
                }
            }
        }
    }
    let column_bytes = cs.column_params() * wire;
    for j in 0..m {
        for i in 1..d {
            let (root, peer) = (plan.worker(0, j).0, plan.worker(i, j).0);
            ledger.record(peer, root, column_bytes);
            ledger.record(root, peer, column_bytes);
        }
    }
    Ok(CommVolume {
        ledger,
        cross_bytes: d as u64 * cross.total_bytes(),
        replica_bytes: 2 * (d as u64 - 1) * m as u64 * column_bytes,
    })
}

/// A fabric running one training plan.
pub struct Cluster {
    plan: ParallelPlan,
    cs: ColumnizedSpec,
    fabric: Fabric<WorkerState>,
}

impl Cluster {
    /// Distribute unsplit parameters over the plan's grid.
    pub fn new(
        net: &NetworkSpec,
        plan: &ParallelPlan,
        params: &Params,
        sgd: SgdConfig,
        device: DeviceSpec,
        scheduling: Scheduling,
    ) -> Result<Self> {
        let cs = columnize(net, plan.model_columns, &plan.cross_layers)?;
        let cols = split_params(&cs, params)?;
        Self::build(plan, cs, cols, sgd, device, scheduling)
    }

    /// Start from per-column parameters; works for grouped layouts that have
    /// no unsplit equivalent.
    pub fn from_columns(
        net: &NetworkSpec,
        plan: &ParallelPlan,
        columns: Vec<Params>,
        sgd: SgdConfig,
        device: DeviceSpec,
        scheduling: Scheduling,
    ) -> Result<Self> {
        let cs = columnize(net, plan.model_columns, &plan.cross_layers)?;
        if columns.len() != plan.model_columns {
            return Err(Error::config(format!(
                "{} column parameter sets for {} columns",
                columns.len(),
                plan.model_columns
            )));
        }
        let template = Params::zeros_for_column(&cs);
        for c in &columns {
            template.with_tensors(c.tensors().to_vec())?;
        }
        Self::build(plan, cs, columns, sgd, device, scheduling)
    }

    fn build(
        plan: &ParallelPlan,
        cs: ColumnizedSpec,
        cols: Vec<Params>,
        sgd: SgdConfig,
        device: DeviceSpec,
        scheduling: Scheduling,
    ) -> Result<Self> {
        sgd.validate()?;
        let fabric = Fabric::spawn(plan.workers(), device, scheduling, |w| {
            let params = cols[plan.coords(w).1].clone();
            let sgd = plan
                .is_root(w)
                .then(|| SgdState::new(sgd, params.tensors()).expect("config validated above"));
            WorkerState { params, sgd }
        })?;
        Ok(Self {
            plan: plan.clone(),
            cs,
            fabric,
        })
    }

    pub fn plan(&self) -> &ParallelPlan {
        &self.plan
    }

    pub fn columnized(&self) -> &ColumnizedSpec {
        &self.cs
    }

    pub fn fabric(&self) -> &Fabric<WorkerState> {
        &self.fabric
    }

    /// Cumulative traffic since the cluster was built.
    pub fn ledger(&self) -> CommLedger {
        self.fabric.ledger()
    }

    /// Column parameters as held by replica 0.
    pub fn column_params(&self) -> Vec<Params> {
        (0..self.plan.model_columns)
            .map(|j| self.fabric.state(self.plan.worker(0, j)).params.clone())
            .collect()
    }

    /// Parameters mapped back to the unsplit layout.
    pub fn params(&self) -> Result<Params> {
        merge_params(&self.cs, &self.column_params())
    }

    /// One synchronous update on the global batch.
    pub fn step(&mut self, batch: &Batch) -> Result<StepResult> {
        let shard = self.plan.shard_size(batch.len())?;
        let program = GridStep {
            plan: &self.plan,
            cs: &self.cs,
            batch,
            footprint_root: column_footprint_bytes(&self.cs, shard, true),
            footprint_replica: column_footprint_bytes(&self.cs, shard, false),
        };
        let before = self.fabric.ledger();
        let losses = self.fabric.run(&program)?;
        let loss = (0..self.plan.data_shards)
            .map(|i| losses[self.plan.worker(i, 0).0])
            .sum();
        Ok(StepResult {
            loss: check_loss(loss)?,
            ledger: self.fabric.ledger().since(&before),
            sim_seconds: None,
        })
    }
}

/// Data-parallel step; the cluster's plan must have a single column.
pub fn data_parallel_step(cluster: &mut Cluster, batch: &Batch) -> Result<StepResult> {
    if cluster.plan.model_columns != 1 {
        return Err(Error::config(format!("data parallelism needs m = 1, plan is {}", cluster.plan)));
    }
    cluster.step(batch)
}

/// Model-parallel step; the cluster's plan must have a single replica.
pub fn model_parallel_step(cluster: &mut Cluster, batch: &Batch) -> Result<StepResult> {
    if cluster.plan.data_shards != 1 {
        return Err(Error::config(format!("model parallelism needs d = 1, plan is {}", cluster.plan)));
    }
    cluster.step(batch)
}

/// Hybrid step on an arbitrary `d x m` grid.
pub fn hybrid_step(cluster: &mut Cluster, batch: &Batch) -> Result<StepResult> {
    cluster.step(batch)
}

/// Largest relative gaps between a plan and the single-device reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    /// Over the per-update loss sequence.
    pub loss: f64,
    /// Between the final parameters.
    pub params: f64,
}

impl Divergence {
    pub fn max(&self) -> f64 {
        self.loss.max(self.params)
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Train `plan` and the reference side by side on `batches` from the same
/// start and report how far apart they drift.
pub fn equivalence_divergence(
    net: &NetworkSpec,
    plan: &ParallelPlan,
    params: &Params,
    sgd: SgdConfig,
    batches: &[Batch],
    scheduling: Scheduling,
) -> Result<Divergence> {
    let mut cluster = Cluster::new(net, plan, params, sgd, DeviceSpec::default(), scheduling)?;
    let mut reference = params.clone();
    let mut state = SgdState::new(sgd, reference.tensors())?;
    let mut loss = 0.0f64;
    for b in batches {
        let r = reference_step(net, &reference, &state, b)?;
        let c = cluster.step(b)?;
        loss = loss.max(rel_gap(c.loss, r.result.loss));
        reference = r.params;
        state = r.sgd;
    }
    Ok(Divergence {
        loss,
        params: cluster.params()?.rel_divergence(&reference),
    })
}
