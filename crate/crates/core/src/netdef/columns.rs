//! Partitioning a network into model-parallel columns.
//!
//! Every conv/fc layer except the head is split by filters (or units) across
//! `m` columns. A column normally consumes only its own slice of the previous
//! activation; at a cross layer it instead receives every column's slice and
//! consumes the concatenation, in ascending column order. Fully connected
//! layers always cross. The head (last fc layer) is replicated on every
//! column so that each column produces the full logits and the loss.

use std::collections::BTreeSet;

use super::{ActShape, LayerSpec, NetworkSpec};
use crate::error::{Error, Result};

/// Whether the activation a column holds is the full tensor or its slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Full,
    Sliced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// Consume what the column already holds.
    Local,
    /// All-gather the column slices first.
    Gathered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Filters or units divided across columns.
    Split,
    /// Full copy on every column.
    Replicated,
    /// Parameter-free layer applied to whatever the column holds.
    Passthrough,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnLayer {
    /// Column-local layer (split layers carry `N/m` filters or `U/m` units).
    pub spec: LayerSpec,
    pub placement: Placement,
    pub input: InputMode,
    /// Per-sample activation the column holds before this layer.
    pub held_input: ActShape,
    /// Per-sample activation the layer consumes (after any gather).
    pub in_shape: ActShape,
    pub out_shape: ActShape,
    pub out_dist: Dist,
    /// A split layer consuming only its own slice: a block-diagonal piece of
    /// the unsplit layer.
    pub grouped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnizedSpec {
    base: NetworkSpec,
    columns: usize,
    cross_layers: BTreeSet<usize>,
    layers: Vec<ColumnLayer>,
}

impl ColumnizedSpec {
    pub fn base(&self) -> &NetworkSpec {
        &self.base
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    /// Cross layers as requested (fc layers are crossed implicitly).
    pub fn cross_layers(&self) -> &BTreeSet<usize> {
        &self.cross_layers
    }

    pub fn layers(&self) -> &[ColumnLayer] {
        &self.layers
    }

    /// Layers whose input is all-gathered across columns.
    pub fn gather_points(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.input == InputMode::Gathered)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when the columns compute exactly the unsplit base network, so that
    /// parameters map one-to-one between the two layouts.
    pub fn is_reparameterizable(&self) -> bool {
        !self.layers.iter().any(|l| l.grouped)
    }
}

pub fn columnize(net: &NetworkSpec, columns: usize, cross_layers: &[usize]) -> Result<ColumnizedSpec> {
    if columns == 0 {
        return Err(Error::config("column count must be at least 1"));
    }
    let cross: BTreeSet<usize> = cross_layers.iter().copied().collect();
    for &i in &cross {
        match net.layers().get(i) {
            None => {
                return Err(Error::Partition {
                    layer: i,
                    message: format!("no such layer (network has {})", net.layers().len()),
                });
            }
            Some(l) if !l.has_params() => {
                return Err(Error::Partition {
                    layer: i,
                    message: format!("cross layers must be conv or fc, got {}", l.keyword()),
                });
            }
            _ => {}
        }
    }
    let m = columns;
    let head = net.head();
    let mut dist = Dist::Full;
    let mut held = net.input();
    let mut layers = Vec::with_capacity(net.layers().len());
    for (i, &layer) in net.layers().iter().enumerate() {
        let full_in = net.input_of(i);
        let full_out = net.shapes()[i];
        let gather = m > 1 && dist == Dist::Sliced && (cross.contains(&i) || matches!(layer, LayerSpec::Fc { .. }));
        if m > 1 && dist == Dist::Full && cross.contains(&i) {
            return Err(Error::Partition {
                layer: i,
                message: "cross layer consumes an activation that is not split across columns"
                    .into(),
            });
        }
        let in_shape = if gather { full_in } else { held };
        let input = if gather { InputMode::Gathered } else { InputMode::Local };
        let consumes_slice = m > 1 && !gather && dist == Dist::Sliced;
        let entry = match layer {
            LayerSpec::Conv { filters, .. } | LayerSpec::Fc { units: filters } if i != head => {
                if filters % m != 0 {
                    return Err(Error::Partition {
                        layer: i,
                        message: format!(
                            "{} with {filters} outputs does not split into {m} columns",
                            layer.keyword()
                        ),
                    });
                }
                let spec = match layer {
                    LayerSpec::Conv {
                        kernel,
                        stride,
                        pad,
                        ..
                    } => LayerSpec::Conv {
                        filters: filters / m,
                        kernel,
                        stride,
                        pad,
                    },
                    _ => LayerSpec::Fc { units: filters / m },
                };
                let out_shape = full_out.with_channels(filters / m);
                ColumnLayer {
                    spec,
                    placement: Placement::Split,
                    input,
                    held_input: held,
                    in_shape,
                    out_shape,
                    out_dist: if m > 1 { Dist::Sliced } else { Dist::Full },
                    grouped: consumes_slice,
                }
            }
            LayerSpec::Fc { .. } => {
                // The head: replicated, must see the full features.
                debug_assert!(m == 1 || dist == Dist::Full || gather);
                ColumnLayer {
                    spec: layer,
                    placement: Placement::Replicated,
                    input,
                    held_input: held,
                    in_shape,
                    out_shape: full_out,
                    out_dist: Dist::Full,
                    grouped: false,
                }
            }
            LayerSpec::Conv { .. } => unreachable!("the head is an fc layer"),
            LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::SoftmaxXent { .. } => {
                let out_shape = layer.infer(in_shape).map_err(|message| Error::Layer {
                    layer: i,
                    message,
                })?;
                ColumnLayer {
                    spec: layer,
                    placement: if matches!(layer, LayerSpec::SoftmaxXent { .. }) {
                        Placement::Replicated
                    } else {
                        Placement::Passthrough
                    },
                    input,
                    held_input: held,
                    in_shape,
                    out_shape,
                    out_dist: dist,
                    grouped: false,
                }
            }
        };
        dist = entry.out_dist;
        held = entry.out_shape;
        layers.push(entry);
    }
    Ok(ColumnizedSpec {
        base: net.clone(),
        columns,
        cross_layers: cross,
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrossLayerTraffic {
    pub layer: usize,
    /// Per-sample elements of one column's slice.
    pub slice_elements: usize,
    pub forward_bytes: u64,
    pub backward_bytes: u64,
    pub forward_messages: u64,
    pub backward_messages: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CrossTraffic {
    pub layers: Vec<CrossLayerTraffic>,
}

impl CrossTraffic {
    pub fn total_bytes(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.forward_bytes + l.backward_bytes)
            .sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.layers
            .iter()
            .map(|l| l.forward_messages + l.backward_messages)
            .sum()
    }
}

/// Bytes exchanged between the columns of one replica in one training step.
///
/// At each gather point every column sends its `batch x slice` activation to
/// each of the other `m - 1` columns, and the same amount of gradient flows
/// back. The replicated head needs no backward exchange: every column
/// computes the same input gradient and keeps its own slice.
pub fn cross_connection_bytes(cs: &ColumnizedSpec, batch: usize, wire_element_bytes: u64) -> CrossTraffic {
    let m = cs.columns() as u64;
    let pairs = m * (m - 1);
    let layers = cs
        .gather_points()
        .into_iter()
        .map(|i| {
            let l = &cs.layers()[i];
            let slice_elements = l.held_input.elements();
            let fwd = batch as u64 * slice_elements as u64 * pairs * wire_element_bytes;
            let backward = l.placement == Placement::Split;
            CrossLayerTraffic {
                layer: i,
                slice_elements,
                forward_bytes: fwd,
                backward_bytes: if backward { fwd } else { 0 },
                forward_messages: pairs,
                backward_messages: if backward { pairs } else { 0 },
            }
        })
        .collect();
    CrossTraffic { layers }
}
