//! Parameters, initialization and the single-device reference executor.

use crate::error::{Error, Result};
use crate::kernels::{
    ConvParams, conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_xent_normalized,
};
use crate::netdef::{ActShape, ColumnLayer, ColumnizedSpec, LayerSpec, NetworkSpec, Placement};
use crate::rng::{SplitMix64, Stream};
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.01;

/// A mini-batch: `images` is `B x C x H x W`, one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.dim(0) != labels.len() {
            return Err(Error::shape(format!(
                "batch images {:?} with {} labels",
                images.shape(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Contiguous rows `start..end`.
    pub fn shard(&self, start: usize, end: usize) -> Result<Batch> {
        Ok(Batch {
            images: self.images.batch_slice(start, end)?,
            labels: self.labels[start..end].to_vec(),
        })
    }
}

/// Parameter tensors of a network in layer order, weights before bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// For each layer, the index of its weight tensor (bias follows it).
    slots: Vec<Option<usize>>,
    tensors: Vec<Tensor>,
}

fn param_shapes(spec: &LayerSpec, input: ActShape) -> Option<(Vec<usize>, Vec<usize>)> {
    match *spec {
        LayerSpec::Conv {
            filters, kernel, ..
        } => Some((
            vec![filters, input.channels(), kernel, kernel],
            vec![filters],
        )),
        LayerSpec::Fc { units } => Some((vec![input.elements(), units], vec![units])),
        _ => None,
    }
}

impl Params {
    fn build<'a>(
        layers: impl Iterator<Item = (&'a LayerSpec, ActShape)>,
        mut weight: impl FnMut(&[usize]) -> Tensor,
    ) -> Self {
        let mut slots = Vec::new();
        let mut tensors = Vec::new();
        for (spec, input) in layers {
            match param_shapes(spec, input) {
                Some((w, b)) => {
                    slots.push(Some(tensors.len()));
                    tensors.push(weight(&w));
                    tensors.push(Tensor::zeros(&b));
                }
                None => slots.push(None),
            }
        }
        Self { slots, tensors }
    }

    /// Gaussian weights (mean 0, std [`INIT_STD`]) and zero biases.
    pub fn init(net: &NetworkSpec, seed: u64) -> Self {
        let mut rng = SplitMix64::stream(seed, Stream::Init);
        Self::build(
            net.layers()
                .iter()
                .enumerate()
                .map(|(i, l)| (l, net.input_of(i))),
            |shape| Tensor::from_fn(shape, |_| INIT_STD * rng.next_normal()),
        )
    }

    pub fn zeros(net: &NetworkSpec) -> Self {
        Self::build(
            net.layers()
                .iter()
                .enumerate()
                .map(|(i, l)| (l, net.input_of(i))),
            Tensor::zeros,
        )
    }

    /// Zero parameters with the layout of one column.
    pub fn zeros_for_column(cs: &ColumnizedSpec) -> Self {
        Self::build(cs.layers().iter().map(|l| (&l.spec, l.in_shape)), Tensor::zeros)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Same layout, new values.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() != self.tensors.len()
            || tensors
                .iter()
                .zip(&self.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape("parameter tensors do not match the layout"));
        }
        Ok(Self {
            slots: self.slots.clone(),
            tensors,
        })
    }

    pub fn layer(&self, layer: usize) -> Option<(&Tensor, &Tensor)> {
        let s = self.slots.get(layer).copied().flatten()?;
        Some((&self.tensors[s], &self.tensors[s + 1]))
    }

    fn slot(&self, layer: usize) -> Result<usize> {
        self.slots
            .get(layer)
            .copied()
            .flatten()
            .ok_or_else(|| Error::shape(format!("layer {layer} has no parameters")))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        let s = self.slots.get(layer).copied().flatten()?;
        let (w, rest) = self.tensors[s..].split_first_mut()?;
        Some((w, &mut rest[0]))
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Largest tensor-relative divergence over all parameter tensors.
    pub fn rel_divergence(&self, other: &Params) -> f64 {
        assert_eq!(self.tensors.len(), other.tensors.len());
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.rel_divergence(b))
            .fold(0.0, f64::max)
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { input: Tensor },
    Fc { input: Tensor, input_shape: Vec<usize> },
    Relu { input: Tensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    None,
}

/// Forward one non-loss layer. `params` is `Some((weights, bias))` for conv/fc.
pub fn layer_forward(
    spec: &LayerSpec,
    params: Option<(&Tensor, &Tensor)>,
    input: Tensor,
) -> Result<(Tensor, LayerCache)> {
    match *spec {
        LayerSpec::Conv { stride, pad, .. } => {
            let (w, b) = params.ok_or_else(|| Error::shape("conv layer without parameters"))?;
            let p = ConvParams::new(w.clone(), b.clone(), stride, pad)?;
            let out = conv2d_forward(&input, &p)?;
            Ok((out, LayerCache::Conv { input }))
        }
        LayerSpec::Fc { .. } => {
            let (w, b) = params.ok_or_else(|| Error::shape("fc layer without parameters"))?;
            let input_shape = input.shape().to_vec();
            let flat = input.flatten_batch();
            let out = fc_forward(&flat, w, b)?;
            Ok((
                out,
                LayerCache::Fc {
                    input: flat,
                    input_shape,
                },
            ))
        }
        LayerSpec::Relu => {
            let out = relu_forward(&input);
            Ok((out, LayerCache::Relu { input }))
        }
        LayerSpec::MaxPool { kernel, stride } => {
            let pooled = maxpool_forward(&input, kernel, stride)?;
            Ok((
                pooled.output,
                LayerCache::Pool {
                    input_shape: input.shape().to_vec(),
                    argmax: pooled.argmax,
                },
            ))
        }
        LayerSpec::SoftmaxXent { .. } => Err(Error::shape("loss layer has no plain forward")),
    }
}

pub struct LayerGrads {
    pub input: Tensor,
    pub params: Option<(Tensor, Tensor)>,
}

pub fn layer_backward(
    spec: &LayerSpec,
    params: Option<(&Tensor, &Tensor)>,
    cache: &LayerCache,
    grad_out: &Tensor,
) -> Result<LayerGrads> {
    match (spec, cache) {
        (LayerSpec::Conv { stride, pad, .. }, LayerCache::Conv { input }) => {
            let (w, b) = params.ok_or_else(|| Error::shape("conv layer without parameters"))?;
            let p = ConvParams::new(w.clone(), b.clone(), *stride, *pad)?;
            let g = conv2d_backward(input, &p, grad_out)?;
            Ok(LayerGrads {
                input: g.input,
                params: Some((g.weights, g.bias)),
            })
        }
        (LayerSpec::Fc { .. }, LayerCache::Fc { input, input_shape }) => {
            let (w, b) = params.ok_or_else(|| Error::shape("fc layer without parameters"))?;
            let g = fc_backward(input, w, b, grad_out)?;
            Ok(LayerGrads {
                input: g.input.reshape(input_shape)?,
                params: Some((g.weights, g.bias)),
            })
        }
        (LayerSpec::Relu, LayerCache::Relu { input }) => Ok(LayerGrads {
            input: relu_backward(input, grad_out)?,
            params: None,
        }),
        (LayerSpec::MaxPool { .. }, LayerCache::Pool { input_shape, argmax }) => Ok(LayerGrads {
            input: maxpool_backward(input_shape, argmax, grad_out)?,
            params: None,
        }),
        _ => Err(Error::shape(format!(
            "cache does not belong to a {} layer",
            spec.keyword()
        ))),
    }
}

/// Logits of the unsplit network.
pub fn predict(net: &NetworkSpec, params: &Params, images: &Tensor) -> Result<Tensor> {
    let last = net.layers().len() - 1;
    let mut act = images.clone();
    for (i, spec) in net.layers()[..last].iter().enumerate() {
        act = layer_forward(spec, params.layer(i), act)?.0;
    }
    Ok(act)
}

/// Loss and parameter gradients of the unsplit network on `batch`, with the
/// loss divided by `norm`.
pub fn loss_and_grads(
    net: &NetworkSpec,
    params: &Params,
    batch: &Batch,
    norm: usize,
) -> Result<(f64, Params)> {
    let last = net.layers().len() - 1;
    let mut act = batch.images.clone();
    let mut caches = Vec::with_capacity(last);
    for (i, spec) in net.layers()[..last].iter().enumerate() {
        let (out, cache) = layer_forward(spec, params.layer(i), act)?;
        caches.push(cache);
        act = out;
    }
    let (loss, mut grad) = softmax_xent_normalized(&act, &batch.labels, norm)?;
    let mut grads = params.clone();
    for i in (0..last).rev() {
        let spec = &net.layers()[i];
        let g = layer_backward(spec, params.layer(i), &caches[i], &grad)?;
        if let Some((gw, gb)) = g.params {
            let s = grads.slot(i)?;
            grads.tensors[s] = gw;
            grads.tensors[s + 1] = gb;
        }
        grad = g.input;
    }
    Ok((loss, grads))
}

fn require_reparameterizable(cs: &ColumnizedSpec) -> Result<()> {
    if !cs.is_reparameterizable() {
        let layer = cs.layers().iter().position(|l| l.grouped).unwrap_or(0);
        return Err(Error::Partition {
            layer,
            message: "grouped column layer has no unsplit equivalent".into(),
        });
    }
    Ok(())
}

/// Map unsplit parameters onto the columns of `cs`.
pub fn split_params(cs: &ColumnizedSpec, unsplit: &Params) -> Result<Vec<Params>> {
    require_reparameterizable(cs)?;
    let m = cs.columns();
    let mut cols: Vec<Params> = (0..m).map(|_| Params::zeros_for_column(cs)).collect();
    for (i, cl) in cs.layers().iter().enumerate() {
        let Some((w, b)) = unsplit.layer(i) else {
            continue;
        };
        for (j, col) in cols.iter_mut().enumerate() {
            let (cw, cb) = col.layer_mut(i).expect("column layout mirrors the base");
            match (cl.placement, cl.spec) {
                (Placement::Replicated, _) => {
                    *cw = w.clone();
                    *cb = b.clone();
                }
                (Placement::Split, LayerSpec::Conv { filters, .. }) => {
                    *cw = w.narrow_axis0(j * filters, filters)?;
                    *cb = b.narrow_axis0(j * filters, filters)?;
                }
                (Placement::Split, LayerSpec::Fc { units }) => {
                    *cw = w.narrow_axis1(j * units, units)?;
                    *cb = b.narrow_axis0(j * units, units)?;
                }
                _ => unreachable!("only conv and fc layers carry parameters"),
            }
        }
    }
    Ok(cols)
}

/// Inverse of [`split_params`]; replicated layers are read from column 0.
pub fn merge_params(cs: &ColumnizedSpec, cols: &[Params]) -> Result<Params> {
    require_reparameterizable(cs)?;
    if cols.len() != cs.columns() {
        return Err(Error::shape(format!(
            "{} column parameter sets for {} columns",
            cols.len(),
            cs.columns()
        )));
    }
    let mut out = Params::zeros(cs.base());
    for (i, cl) in cs.layers().iter().enumerate() {
        let Some((w, b)) = out.layer_mut(i) else {
            continue;
        };
        let parts: Vec<(&Tensor, &Tensor)> = cols
            .iter()
            .map(|c| c.layer(i).expect("column layout mirrors the base"))
            .collect();
        let ws: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
        let bs: Vec<Tensor> = parts.iter().map(|p| p.1.clone()).collect();
        match (cl.placement, cl.spec) {
            (Placement::Replicated, _) => {
                *w = ws[0].clone();
                *b = bs[0].clone();
            }
            (Placement::Split, LayerSpec::Conv { .. }) => {
                *w = Tensor::concat_axis0(&ws)?;
                *b = Tensor::concat_axis0(&bs)?;
            }
            (Placement::Split, LayerSpec::Fc { .. }) => {
                *w = Tensor::concat_axis1(&ws)?;
                *b = Tensor::concat_axis0(&bs)?;
            }
            _ => unreachable!("only conv and fc layers carry parameters"),
        }
    }
    Ok(out)
}

/// Forward one column layer given the held activation, or the gathered
/// per-column activations when the layer's input is gathered.
pub fn column_layer_forward(
    cl: &ColumnLayer,
    params: Option<(&Tensor, &Tensor)>,
    input: Tensor,
) -> Result<(Tensor, LayerCache)> {
    layer_forward(&cl.spec, params, input)
}

/// Logits of a columnized network evaluated on one device, columns run in
/// lockstep with direct concatenation at gather points.
pub fn columnized_predict(cs: &ColumnizedSpec, cols: &[Params], images: &Tensor) -> Result<Tensor> {
    use crate::netdef::InputMode;
    let m = cs.columns();
    if cols.len() != m {
        return Err(Error::shape(format!("{} parameter sets for {m} columns", cols.len())));
    }
    let last = cs.layers().len() - 1;
    let mut acts: Vec<Tensor> = vec![images.clone(); m];
    for (i, cl) in cs.layers()[..last].iter().enumerate() {
        let gathered = if cl.input == InputMode::Gathered {
            Some(Tensor::concat_axis1(&acts)?)
        } else {
            None
        };
        for (j, act) in acts.iter_mut().enumerate() {
            let input = match &gathered {
                Some(g) => g.clone(),
                None => std::mem::replace(act, Tensor::zeros(&[1])),
            };
            *act = column_layer_forward(cl, cols[j].layer(i), input)?.0;
        }
    }
    Ok(acts.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netdef::columnize;

    fn toy_batch(net: &NetworkSpec, b: usize, seed: u64) -> Batch {
        let mut rng = SplitMix64::new(seed);
        let shape = net.input().batched(b);
        let images = Tensor::from_fn(&shape, |_| rng.next_normal());
        let labels = (0..b).map(|i| i % net.classes()).collect();
        Batch::new(images, labels).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let net = NetworkSpec::tinynet();
        let a = Params::init(&net, 5);
        let b = Params::init(&net, 5);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&Params::init(&net, 6)));
        let (w, bias) = a.layer(0).unwrap();
        assert_eq!(w.shape(), &[8, 3, 3, 3]);
        assert!(bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.element_count(), 17554);
        let sd = (w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64).sqrt();
        assert!(sd > 0.005 && sd < 0.02, "{sd}");
    }

    #[test]
    fn zero_head_gives_ln_k() {
        let net = NetworkSpec::tinynet();
        let mut p = Params::init(&net, 1);
        let (w, _) = p.layer_mut(net.head()).unwrap();
        *w = Tensor::zeros(w.shape());
        let batch = toy_batch(&net, 4, 2);
        let (loss, _) = loss_and_grads(&net, &p, &batch, 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn split_merge_round_trip() {
        let net = NetworkSpec::tinynet();
        let p = Params::init(&net, 3);
        for m in [1, 2, 4] {
            let cs = columnize(&net, m, &[3]).unwrap();
            let cols = split_params(&cs, &p).unwrap();
            assert_eq!(cols.len(), m);
            assert!(merge_params(&cs, &cols).unwrap().bit_eq(&p));
        }
    }

    #[test]
    fn columnized_forward_matches_unsplit() {
        let net = NetworkSpec::tinynet();
        let p = Params::init(&net, 9);
        let images = toy_batch(&net, 3, 4).images;
        let want = predict(&net, &p, &images).unwrap();
        for m in [1, 2, 4] {
            let cs = columnize(&net, m, &[3]).unwrap();
            let cols = split_params(&cs, &p).unwrap();
            let got = columnized_predict(&cs, &cols, &images).unwrap();
            assert!(got.rel_divergence(&want) < 1e-12, "m={m}");
        }
    }

    #[test]
    fn grouped_networks_do_not_reparameterize() {
        let net = NetworkSpec::tinynet();
        let cs = columnize(&net, 2, &[]).unwrap();
        assert!(split_params(&cs, &Params::zeros(&net)).is_err());
    }
}
