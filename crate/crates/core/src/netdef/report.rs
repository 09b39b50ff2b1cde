//! Parameter, FLOP, activation and memory accounting.
//!
//! FLOP convention: one multiply-accumulate is two FLOPs, and the backward
//! pass (input and weight gradients) costs twice the forward pass.

use super::{ActShape, ColumnizedSpec, InputMode, LayerSpec, NetworkSpec};

/// Bytes per stored element on a modelled device.
pub const DEVICE_ELEMENT_BYTES: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerReport {
    pub layer: usize,
    pub output: ActShape,
    pub params: u64,
    pub forward_flops: u64,
    pub backward_flops: u64,
    pub activation_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeReport {
    pub batch: usize,
    pub layers: Vec<LayerReport>,
}

impl ShapeReport {
    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn total_forward_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.forward_flops).sum()
    }

    pub fn total_backward_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.backward_flops).sum()
    }

    /// Forward plus backward FLOPs for one training step.
    pub fn total_flops(&self) -> u64 {
        self.total_forward_flops() + self.total_backward_flops()
    }

    pub fn total_activation_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.activation_bytes).sum()
    }
}

pub(crate) fn layer_params(layer: &LayerSpec, input: ActShape) -> u64 {
    match *layer {
        LayerSpec::Conv {
            filters, kernel, ..
        } => (filters * input.channels() * kernel * kernel + filters) as u64,
        LayerSpec::Fc { units } => (input.elements() * units + units) as u64,
        _ => 0,
    }
}

fn layer_forward_flops(layer: &LayerSpec, input: ActShape, output: ActShape, batch: usize) -> u64 {
    let macs = match *layer {
        LayerSpec::Conv { kernel, .. } => {
            // output elements x (input channels x kernel window)
            output.elements() * input.channels() * kernel * kernel
        }
        LayerSpec::Fc { units } => input.elements() * units,
        _ => 0,
    };
    2 * batch as u64 * macs as u64
}

fn report<'a>(
    batch: usize,
    layers: impl Iterator<Item = (&'a LayerSpec, ActShape, ActShape)>,
) -> ShapeReport {
    let layers = layers
        .enumerate()
        .map(|(i, (spec, input, output))| {
            let fwd = layer_forward_flops(spec, input, output, batch);
            LayerReport {
                layer: i,
                output,
                params: layer_params(spec, input),
                forward_flops: fwd,
                backward_flops: 2 * fwd,
                activation_bytes: (batch * output.elements()) as u64 * DEVICE_ELEMENT_BYTES,
            }
        })
        .collect();
    ShapeReport { batch, layers }
}

pub fn shape_report(net: &NetworkSpec, batch: usize) -> ShapeReport {
    report(
        batch,
        net.layers()
            .iter()
            .enumerate()
            .map(|(i, l)| (l, net.input_of(i), net.shapes()[i])),
    )
}

impl ColumnizedSpec {
    /// Report for a single column (all columns have identical shapes).
    pub fn column_report(&self, batch: usize) -> ShapeReport {
        report(
            batch,
            self.layers().iter().map(|l| (&l.spec, l.in_shape, l.out_shape)),
        )
    }

    /// Parameters held by one column, including its replica of the head.
    pub fn column_params(&self) -> u64 {
        self.column_report(1).total_params()
    }

    /// Parameters summed over all columns; differs from the base count where
    /// layers are grouped (fewer) or replicated (more).
    pub fn total_column_params(&self) -> u64 {
        self.column_params() * self.columns() as u64
    }
}

/// Resident bytes on one device: parameters, optional velocities, and every
/// activation kept for the backward pass.
pub fn network_footprint_bytes(net: &NetworkSpec, batch: usize, with_velocity: bool) -> u64 {
    let r = shape_report(net, batch);
    let params = r.total_params() * if with_velocity { 2 } else { 1 };
    let acts = (batch * net.input().elements()) as u64
        + net
            .shapes()
            .iter()
            .map(|s| (batch * s.elements()) as u64)
            .sum::<u64>();
    (params + acts) * DEVICE_ELEMENT_BYTES
}

/// As [`network_footprint_bytes`] for one column, counting the gathered
/// full-size inputs at cross layers.
pub fn column_footprint_bytes(cs: &ColumnizedSpec, batch: usize, with_velocity: bool) -> u64 {
    let params = cs.column_params() * if with_velocity { 2 } else { 1 };
    let mut acts = (batch * cs.base().input().elements()) as u64;
    for l in cs.layers() {
        acts += (batch * l.out_shape.elements()) as u64;
        if l.input == InputMode::Gathered {
            acts += (batch * l.in_shape.elements()) as u64;
        }
    }
    (params + acts) * DEVICE_ELEMENT_BYTES
}
