//! Declarative network descriptions.
//!
//! A [`NetworkSpec`] is an input shape plus a linear list of layers. Building
//! one runs shape inference, so every accepted network has a defined, positive
//! activation shape after each layer.

mod columns;
mod parse;
mod report;

use std::fmt;

pub use columns::{
    ColumnLayer, ColumnizedSpec, CrossLayerTraffic, CrossTraffic, Dist, InputMode, Placement,
    columnize, cross_connection_bytes,
};
pub use parse::{parse_network, parse_network_file};
pub use report::{
    DEVICE_ELEMENT_BYTES, LayerReport, ShapeReport, column_footprint_bytes, network_footprint_bytes,
    shape_report,
};

use crate::error::{Error, Result};
use crate::kernels::window_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        units: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    SoftmaxXent {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Fc { .. })
    }

    pub fn keyword(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Fc { .. } => "fc",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::SoftmaxXent { .. } => "softmax",
        }
    }

    /// Output shape for the given input, or a message describing the mismatch.
    pub fn infer(&self, input: ActShape) -> std::result::Result<ActShape, String> {
        match *self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                pad,
            } => {
                let ActShape::Map { h, w, .. } = input else {
                    return Err(format!("conv needs a C x H x W input, got {input}"));
                };
                match (
                    window_extent(h, kernel, stride, pad),
                    window_extent(w, kernel, stride, pad),
                ) {
                    (Some(oh), Some(ow)) => Ok(ActShape::Map {
                        c: filters,
                        h: oh,
                        w: ow,
                    }),
                    _ => Err(format!(
                        "conv kernel {kernel} stride {stride} pad {pad} does not tile {input}"
                    )),
                }
            }
            LayerSpec::Fc { units } => Ok(ActShape::Flat(units)),
            LayerSpec::Relu => Ok(input),
            LayerSpec::MaxPool { kernel, stride } => {
                let ActShape::Map { c, h, w } = input else {
                    return Err(format!("maxpool needs a C x H x W input, got {input}"));
                };
                match (
                    window_extent(h, kernel, stride, 0),
                    window_extent(w, kernel, stride, 0),
                ) {
                    (Some(oh), Some(ow)) => Ok(ActShape::Map { c, h: oh, w: ow }),
                    _ => Err(format!(
                        "maxpool {kernel} stride {stride} does not tile {input}"
                    )),
                }
            }
            LayerSpec::SoftmaxXent { classes } => match input {
                ActShape::Flat(k) if k == classes => Ok(input),
                _ => Err(format!("softmax over {classes} classes got input {input}")),
            },
        }
    }

    fn check_extents(&self) -> std::result::Result<(), String> {
        let ok = match *self {
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                ..
            } => filters > 0 && kernel > 0 && stride > 0,
            LayerSpec::Fc { units } => units > 0,
            LayerSpec::Relu => true,
            LayerSpec::MaxPool { kernel, stride } => kernel > 0 && stride > 0,
            LayerSpec::SoftmaxXent { classes } => classes > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{} has a zero extent", self.keyword()))
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ActShape {
    pub fn elements(&self) -> usize {
        match *self {
            ActShape::Map { c, h, w } => c * h * w,
            ActShape::Flat(n) => n,
        }
    }

    /// Extent of the axis that columns split and concatenate along.
    pub fn channels(&self) -> usize {
        match *self {
            ActShape::Map { c, .. } => c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn with_channels(&self, channels: usize) -> ActShape {
        match *self {
            ActShape::Map { h, w, .. } => ActShape::Map { c: channels, h, w },
            ActShape::Flat(_) => ActShape::Flat(channels),
        }
    }

    /// Tensor shape for a batch of `batch` samples.
    pub fn batched(&self, batch: usize) -> Vec<usize> {
        match *self {
            ActShape::Map { c, h, w } => vec![batch, c, h, w],
            ActShape::Flat(n) => vec![batch, n],
        }
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActShape::Map { c, h, w } => write!(f, "{c}x{h}x{w}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    name: String,
    input: ActShape,
    layers: Vec<LayerSpec>,
    shapes: Vec<ActShape>,
}

impl NetworkSpec {
    /// Validate the layer list and run shape inference.
    pub fn new(name: impl Into<String>, input: ActShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let ActShape::Map { c, h, w } = input else {
            return Err(Error::config("network input must be C x H x W"));
        };
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("network input {input} has a zero extent")));
        }
        if layers.is_empty() {
            return Err(Error::config("network has no layers"));
        }
        let softmaxes = layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::SoftmaxXent { .. }))
            .count();
        if softmaxes != 1 || !matches!(layers.last(), Some(LayerSpec::SoftmaxXent { .. })) {
            return Err(Error::config(
                "network needs exactly one softmax layer, and it must be last",
            ));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            layer
                .check_extents()
                .and_then(|_| layer.infer(cur))
                .map(|s| {
                    cur = s;
                    shapes.push(s);
                })
                .map_err(|message| Error::Layer { layer: i, message })?;
        }
        Ok(Self {
            name: name.into(),
            input,
            layers,
            shapes,
        })
    }

    /// The default desk-scale testbed network.
    pub fn tinynet() -> Self {
        Self::new(
            "tinynet",
            ActShape::Map { c: 3, h: 16, w: 16 },
            vec![
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    kernel: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Fc { units: 32 },
                LayerSpec::Relu,
                LayerSpec::Fc { units: 10 },
                LayerSpec::SoftmaxXent { classes: 10 },
            ],
        )
        .expect("tinynet is valid")
    }

    /// Index of the intermediate conv layer where tinynet's columns cross.
    pub const TINYNET_CROSS_LAYER: usize = 3;

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input(&self) -> ActShape {
        self.input
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    /// Output shape of each layer.
    pub fn shapes(&self) -> &[ActShape] {
        &self.shapes
    }

    pub fn input_of(&self, layer: usize) -> ActShape {
        if layer == 0 {
            self.input
        } else {
            self.shapes[layer - 1]
        }
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxXent { classes }) => *classes,
            _ => unreachable!("validated on construction"),
        }
    }

    /// The last fully connected layer, which produces the logits.
    pub fn head(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Fc { .. }))
            .expect("a flat softmax input implies an fc layer")
    }

    /// Same network with a different class count in the head and loss.
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        let head = self.head();
        let mut layers = self.layers.clone();
        layers[head] = LayerSpec::Fc { units: classes };
        *layers.last_mut().unwrap() = LayerSpec::SoftmaxXent { classes };
        Self::new(self.name.clone(), self.input, layers)
    }
}
