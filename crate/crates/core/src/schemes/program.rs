//! The per-worker step shared by all three schemes.
//!
//! Every worker `(i, j)` runs column `j` of the columnized network on shard
//! `i` of the batch, exchanging activations (forward) and activation
//! gradients (backward) with the other columns of its replica at gather
//! points. Replicas then sum their column gradients at the column root,
//! which updates and broadcasts the column's parameters. With `m = 1` the
//! column exchange vanishes (data parallelism); with `d = 1` the gradient
//! round trip vanishes (model parallelism).

use crate::error::Result;
use crate::fabric::{Endpoint, Tag, WorkerProgram};
use crate::kernels::softmax_xent_normalized;
use crate::model::{Batch, LayerCache, Params, layer_backward, layer_forward};
use crate::netdef::{ColumnizedSpec, InputMode, Placement};
use crate::sgd::{SgdState, sgd_step};
use crate::tensor::{Tensor, pack, unpack};

use super::ParallelPlan;

/// What one simulated device holds between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerState {
    /// This worker's column of the parameters.
    pub params: Params,
    /// Momentum buffers; present only on column roots, which apply updates.
    pub sgd: Option<SgdState>,
}

pub(crate) struct GridStep<'a> {
    pub plan: &'a ParallelPlan,
    pub cs: &'a ColumnizedSpec,
    pub batch: &'a Batch,
    pub footprint_root: u64,
    pub footprint_replica: u64,
}

const FORWARD: &str = "activations";
const BACKWARD: &str = "activation-grads";
const GRADS: &str = "param-grads";
const PARAMS: &str = "params";

impl GridStep<'_> {
    /// Column-local loss (normalized by the global batch) and parameter gradients.
    async fn column_grads(&self, ep: &Endpoint, params: &Params, shard: &Batch) -> Result<(f64, Params)> {
        let (_, j) = self.plan.coords(ep.id());
        let row = self.plan.replica_group(self.plan.coords(ep.id()).0);
        let layers = self.cs.layers();
        let last = layers.len() - 1;

        let mut act = shard.images.clone();
        let mut caches: Vec<LayerCache> = Vec::with_capacity(last);
        for (li, cl) in layers[..last].iter().enumerate() {
            let input = if cl.input == InputMode::Gathered {
                let tag = Tag::new(FORWARD, li as u32);
                Tensor::concat_axis1(&ep.all_gather(&row, act, tag).await?)?
            } else {
                act
            };
            let (out, cache) = layer_forward(&cl.spec, params.layer(li), input)?;
            caches.push(cache);
            act = out;
        }
        let (loss, mut grad) = softmax_xent_normalized(&act, &shard.labels, self.batch.len())?;

        let first_param = layers.iter().position(|l| l.spec.has_params()).unwrap_or(last);
        let mut grads = params.clone();
        for li in (0..last).rev() {
            let cl = &layers[li];
            let g = layer_backward(&cl.spec, params.layer(li), &caches[li], &grad)?;
            if let Some((gw, gb)) = g.params {
                let (w, b) = grads.layer_mut(li).expect("column layout has this layer");
                *w = gw;
                *b = gb;
            }
            if li <= first_param {
                break;
            }
            grad = if cl.input == InputMode::Gathered {
                let width = cl.held_input.channels();
                let parts = (0..self.cs.columns())
                    .map(|k| g.input.narrow_axis1(k * width, width))
                    .collect::<Result<Vec<_>>>()?;
                match cl.placement {
                    Placement::Split => {
                        let tag = Tag::new(BACKWARD, li as u32);
                        ep.reduce_scatter(&row, parts, tag).await?
                    }
                    // Every column already holds the full input gradient.
                    _ => parts.into_iter().nth(j).expect("column index in range"),
                }
            } else {
                g.input
            };
        }
        Ok((loss, grads))
    }
}

impl WorkerProgram<WorkerState> for GridStep<'_> {
    type Output = f64;

    async fn run(&self, ep: &Endpoint, state: &mut WorkerState) -> Result<f64> {
        let (i, j) = self.plan.coords(ep.id());
        let root = self.plan.is_root(ep.id());
        let footprint = if root {
            self.footprint_root
        } else {
            self.footprint_replica
        };
        ep.reserve(footprint)?;

        let b = self.plan.shard_size(self.batch.len())?;
        let shard = self.batch.shard(i * b, (i + 1) * b)?;
        let (loss, grads) = self.column_grads(ep, &state.params, &shard).await?;

        let column = self.plan.column_group(j);
        let column_root = column[0];
        let summed = if column.len() > 1 {
            let packed = pack(grads.tensors());
            ep.reduce_to_root(&column, column_root, packed, GRADS)
                .await?
                .map(|t| unpack(&t, grads.tensors()))
                .transpose()?
        } else {
            Some(grads.into_tensors())
        };
        let updated = match (summed, state.sgd.as_mut()) {
            (Some(g), Some(sgd)) => {
                let (p, next) = sgd_step(state.params.tensors(), &g, sgd)?;
                *sgd = next;
                Some(pack(&p))
            }
            _ => None,
        };
        if column.len() > 1 {
            let flat = ep.broadcast_from_root(&column, column_root, updated, PARAMS).await?;
            state.params = state.params.with_tensors(unpack(&flat, state.params.tensors())?)?;
        } else if let Some(flat) = updated {
            state.params = state.params.with_tensors(unpack(&flat, state.params.tensors())?)?;
        }
        ep.release(footprint);
        Ok(loss)
    }
}
