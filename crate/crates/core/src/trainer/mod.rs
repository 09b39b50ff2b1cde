//! Training loops, synthetic data and metric output.
//!
//! Every epoch draws a Fisher-Yates permutation from the `(seed, epoch)`
//! stream and cuts it into `floor(N / B)` batches (a trailing partial batch
//! is dropped). The batch sequence depends only on the seed, never on the
//! plan, so runs under different plans see identical data.

mod data;
mod metrics;

pub use data::{Dataset, SYNTHETIC_NOISE_STD, Split, gen_synthetic, load_dataset};
pub use metrics::{
    CSV_HEADER, MetricsRecord, Series, XAxis, YAxis, emit_csv, emit_svg, read_csv, render_svg,
    write_csv,
};

use std::time::Instant;

use crate::costmodel::{CostParams, StepLoad};
use crate::error::{Error, Result};
use crate::fabric::{DEFAULT_WIRE_ELEMENT_BYTES, DeviceSpec, Scheduling};
use crate::kernels::argmax_rows;
use crate::model::{Batch, Params, predict};
use crate::netdef::NetworkSpec;
use crate::rng::{SplitMix64, Stream};
use crate::schemes::{Cluster, ParallelPlan};
use crate::sgd::SgdConfig;

/// Rows per forward pass when scoring a test set.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetworkSpec,
    pub plan: ParallelPlan,
    pub epochs: u64,
    pub batch: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    /// Drives the simulated-time axis; its `memory` is also the capacity of
    /// every simulated device.
    pub cost: CostParams,
    pub scheduling: Scheduling,
    /// Record measured wall-clock time (makes output non-reproducible).
    pub wall_clock: bool,
}

impl TrainConfig {
    pub fn new(net: NetworkSpec, plan: ParallelPlan) -> Self {
        Self {
            net,
            plan,
            epochs: 1,
            batch: 16,
            seed: 0,
            sgd: SgdConfig::default(),
            cost: CostParams::default(),
            scheduling: Scheduling::default(),
            wall_clock: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.plan.shard_size(self.batch)?;
        self.sgd.validate()?;
        self.cost.validate()
    }
}

/// Batch order of one epoch: row indices of each batch.
pub fn epoch_batches(seed: u64, epoch: u64, samples: usize, batch: usize) -> Vec<Vec<usize>> {
    let perm = SplitMix64::stream(seed, Stream::Epoch(epoch)).permutation(samples);
    perm.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn check_compatible(net: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.classes() != net.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, network {} has {}",
            data.classes(),
            net.name(),
            net.classes()
        )));
    }
    if data.sample_shape() != net.input() {
        return Err(Error::config(format!(
            "dataset samples are {}, network expects {}",
            data.sample_shape(),
            net.input()
        )));
    }
    Ok(())
}

/// Misclassification rate; predictions are row-wise argmaxes, ties to the
/// lowest class.
pub fn evaluate(net: &NetworkSpec, params: &Params, test: &Dataset) -> Result<f64> {
    check_compatible(net, test)?;
    let mut wrong = 0usize;
    let n = test.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let logits = predict(net, params, &test.images().batch_slice(start, end)?)?;
        wrong += argmax_rows(&logits)
            .iter()
            .zip(&test.labels()[start..end])
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(wrong as f64 / n as f64)
}

/// Outcome of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    /// One row per update.
    pub records: Vec<MetricsRecord>,
    /// Final parameters in the unsplit layout.
    pub params: Params,
}

/// Train from `Params::init(net, seed)` and record one metric row per update.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainRun> {
    cfg.validate()?;
    check_compatible(&cfg.net, train_set)?;
    check_compatible(&cfg.net, test_set)?;
    if train_set.len() < cfg.batch {
        return Err(Error::config(format!(
            "training set has {} samples, fewer than the batch of {}",
            train_set.len(),
            cfg.batch
        )));
    }
    let load = StepLoad::new(&cfg.plan, &cfg.net, cfg.batch)?;
    load.check_memory(cfg.cost.memory)?;
    let step_seconds = load.time(&cfg.cost, Default::default()).seconds();

    let device = DeviceSpec {
        memory_capacity: cfg.cost.memory,
        wire_element_size: DEFAULT_WIRE_ELEMENT_BYTES,
    };
    let init = Params::init(&cfg.net, cfg.seed);
    let mut cluster = Cluster::new(&cfg.net, &cfg.plan, &init, cfg.sgd, device, cfg.scheduling)?;
    let started = Instant::now();
    let mut records: Vec<MetricsRecord> = Vec::new();
    let mut update = 0u64;
    for epoch in 1..=cfg.epochs {
        for rows in epoch_batches(cfg.seed, epoch, train_set.len(), cfg.batch) {
            let batch = Batch::new(
                train_set.images().select_rows(&rows)?,
                rows.iter().map(|&r| train_set.labels()[r]).collect(),
            )?;
            let r = cluster.step(&batch)?;
            update += 1;
            records.push(MetricsRecord {
                update,
                epoch,
                train_loss: r.loss,
                test_error: None,
                sim_seconds: update as f64 * step_seconds,
                wall_seconds: if cfg.wall_clock {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                ledger_bytes: cluster.ledger().total_bytes(),
            });
        }
        let err = evaluate(&cfg.net, &cluster.params()?, test_set)?;
        if let Some(last) = records.last_mut() {
            last.test_error = Some(err);
        }
    }
    Ok(TrainRun {
        records,
        params: cluster.params()?,
    })
}
