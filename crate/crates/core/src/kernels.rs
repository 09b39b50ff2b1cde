//! Forward and backward kernels for the supported layer types.
//!
//! All reductions run in ascending flat-index order of the summed indices,
//! with any bias added first, so results are reproducible bit-for-bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `out_channels x in_channels x kh x kw`
    pub weights: Tensor,
    /// `out_channels`
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn new(weights: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        if weights.shape().len() != 4 {
            return Err(Error::shape(format!(
                "conv weights must be 4-d, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.dim(0)] {
            return Err(Error::shape(format!(
                "conv bias {:?} does not match {} filters",
                bias.shape(),
                weights.dim(0)
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv stride must be positive"));
        }
        Ok(Self {
            weights,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.dim(2), self.weights.dim(3))
    }
}

/// Output extent of a sliding window; `None` if the window does not tile the
/// padded input exactly.
pub fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn expect_order(t: &Tensor, order: usize, what: &str) -> Result<()> {
    if t.shape().len() != order {
        return Err(Error::shape(format!(
            "{what} must be {order}-d, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_geometry(input: &Tensor, p: &ConvParams) -> Result<ConvGeometry> {
    expect_order(input, 4, "conv input")?;
    let [batch, channels, height, width] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
    if channels != p.in_channels() {
        return Err(Error::shape(format!(
            "conv input has {channels} channels, filters expect {}",
            p.in_channels()
        )));
    }
    let (kh, kw) = p.kernel();
    let out_h = window_extent(height, kh, p.stride, p.pad);
    let out_w = window_extent(width, kw, p.stride, p.pad);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::config(format!(
            "conv {kh}x{kw} stride {} pad {} does not tile a {height}x{width} input",
            p.stride, p.pad
        )));
    };
    Ok(ConvGeometry {
        batch,
        channels,
        height,
        width,
        filters: p.out_channels(),
        kh,
        kw,
        out_h,
        out_w,
    })
}

/// Output positions `o` whose input coordinate `o * stride + k - pad` lies
/// inside `0..extent` for kernel offset `k`; taps over zero padding are skipped.
fn valid_outputs(k: usize, stride: usize, pad: usize, extent: usize, outputs: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = (extent + pad)
        .checked_sub(k)
        .map_or(0, |limit| limit.div_ceil(stride))
        .min(outputs);
    lo..hi.max(lo)
}

/// Direct convolution. Every output starts from its bias and accumulates
/// `x * w` over input channel, kernel row and kernel column in ascending order.
pub fn conv2d_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let g = conv_geometry(input, p)?;
    let x = input.data();
    let w = p.weights.data();
    let plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.batch * g.filters * plane];
    for b in 0..g.batch {
        for n in 0..g.filters {
            let ob = &mut out[(b * g.filters + n) * plane..][..plane];
            ob.fill(p.bias.data()[n]);
            for c in 0..g.channels {
                let xplane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                for i in 0..g.kh {
                    let oys = valid_outputs(i, p.stride, p.pad, g.height, g.out_h);
                    for j in 0..g.kw {
                        let wv = w[((n * g.channels + c) * g.kh + i) * g.kw + j];
                        let oxs = valid_outputs(j, p.stride, p.pad, g.width, g.out_w);
                        for oy in oys.clone() {
                            let xrow = &xplane[(oy * p.stride + i - p.pad) * g.width..][..g.width];
                            let orow = &mut ob[oy * g.out_w..][..g.out_w];
                            for ox in oxs.clone() {
                                orow[ox] += wv * xrow[ox * p.stride + j - p.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.batch, g.filters, g.out_h, g.out_w], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let g = conv_geometry(input, p)?;
    let expected = [g.batch, g.filters, g.out_h, g.out_w];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv grad_out {:?} does not match output {expected:?}",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = p.weights.data();
    let go = grad_out.data();
    let plane = g.out_h * g.out_w;
    let in_plane = g.height * g.width;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.filters];
    for b in 0..g.batch {
        for n in 0..g.filters {
            let gob = &go[(b * g.filters + n) * plane..][..plane];
            for &up in gob {
                gb[n] += up;
            }
            for c in 0..g.channels {
                let base = (b * g.channels + c) * in_plane;
                for i in 0..g.kh {
                    let oys = valid_outputs(i, p.stride, p.pad, g.height, g.out_h);
                    for j in 0..g.kw {
                        let widx = ((n * g.channels + c) * g.kh + i) * g.kw + j;
                        let wv = w[widx];
                        let oxs = valid_outputs(j, p.stride, p.pad, g.width, g.out_w);
                        let mut acc = gw[widx];
                        for oy in oys.clone() {
                            let row = base + (oy * p.stride + i - p.pad) * g.width;
                            let gorow = &gob[oy * g.out_w..][..g.out_w];
                            for ox in oxs.clone() {
                                let xi = row + ox * p.stride + j - p.pad;
                                let up = gorow[ox];
                                gx[xi] += up * wv;
                                acc += up * x[xi];
                            }
                        }
                        gw[widx] = acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(p.weights.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.filters], gb)?,
    })
}

fn fc_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    expect_order(input, 2, "fc input")?;
    expect_order(weights, 2, "fc weights")?;
    let (b, d) = (input.dim(0), input.dim(1));
    let (wd, u) = (weights.dim(0), weights.dim(1));
    if d != wd {
        return Err(Error::shape(format!(
            "fc input has {d} features, weights expect {wd}"
        )));
    }
    if bias.shape() != [u] {
        return Err(Error::shape(format!(
            "fc bias {:?} does not match {u} units",
            bias.shape()
        )));
    }
    Ok((b, d, u))
}

pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, d, u) = fc_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let mut out = Vec::with_capacity(b * u);
    for r in 0..b {
        let mut row = bias.data().to_vec();
        for k in 0..d {
            let xv = x[r * d + k];
            let wrow = &w[k * u..(k + 1) * u];
            for (acc, wv) in row.iter_mut().zip(wrow) {
                *acc += xv * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Tensor::new(vec![b, u], out)
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<FcGrads> {
    let (b, d, u) = fc_dims(input, weights, bias)?;
    if grad_out.shape() != [b, u] {
        return Err(Error::shape(format!(
            "fc grad_out {:?} does not match output [{b}, {u}]",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; b * d];
    let mut gw = vec![0.0; d * u];
    let mut gb = vec![0.0; u];
    for r in 0..b {
        let grow = &go[r * u..(r + 1) * u];
        for (acc, g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        for k in 0..d {
            let wrow = &w[k * u..(k + 1) * u];
            let mut acc = 0.0;
            for (g, wv) in grow.iter().zip(wrow) {
                acc += g * wv;
            }
            gx[r * d + k] = acc;
            let xv = x[r * d + k];
            for (gwv, g) in gw[k * u..(k + 1) * u].iter_mut().zip(grow) {
                *gwv += xv * g;
            }
        }
    }
    Ok(FcGrads {
        input: Tensor::new(vec![b, d], gx)?,
        weights: Tensor::new(vec![d, u], gw)?,
        bias: Tensor::new(vec![u], gb)?,
    })
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Passes the upstream gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu grad_out {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub output: Tensor,
    /// Flat input index of the selected element, one per output element.
    pub argmax: Vec<usize>,
}

pub fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<PoolOutput> {
    expect_order(x, 4, "maxpool input")?;
    let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (Some(oh), Some(ow)) = (
        window_extent(h, kernel, stride, 0),
        window_extent(w, kernel, stride, 0),
    ) else {
        return Err(Error::config(format!(
            "maxpool {kernel} stride {stride} does not tile a {h}x{w} input"
        )));
    };
    let data = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = data[best_idx];
                for i in 0..kernel {
                    for j in 0..kernel {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![b, c, oh, ow], out)?,
        argmax,
    })
}

pub fn maxpool_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::shape(format!(
            "maxpool grad_out has {} elements, argmax has {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let n = gx.len();
    let gd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        if idx >= n {
            return Err(Error::shape(format!("argmax index {idx} out of range")));
        }
        gd[idx] += g;
    }
    Ok(gx)
}

/// Mean cross-entropy over the batch with its gradient.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = logits.shape().first().copied().unwrap_or(0);
    softmax_xent_normalized(logits, labels, batch)
}

/// Cross-entropy summed over rows and divided by `norm` instead of the local
/// batch size; a shard of a larger batch passes the global batch size so that
/// shard losses and gradients add up to the full-batch mean.
pub fn softmax_xent_normalized(
    logits: &Tensor,
    labels: &[usize],
    norm: usize,
) -> Result<(f64, Tensor)> {
    expect_order(logits, 2, "logits")?;
    let (b, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if norm == 0 {
        return Err(Error::config("loss normalization must be positive"));
    }
    let inv = 1.0 / norm as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * k);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::config(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[label] - max);
        for (c, e) in exps.iter().enumerate() {
            let p = e / z;
            let target = if c == label { 1.0 } else { 0.0 };
            grad.push((p - target) * inv);
        }
    }
    Ok((loss * inv, Tensor::new(vec![b, k], grad)?))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dim(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let p = ConvParams::new(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1, 0).unwrap();
        let out = conv2d_forward(&t(&[1, 1, 1, 1], &[3.25]), &p).unwrap();
        assert_eq!(out.data(), &[3.25]);
    }

    #[test]
    fn conv_sum_of_ones() {
        let p = ConvParams::new(Tensor::full(&[1, 1, 3, 3], 1.0), t(&[1], &[0.0]), 1, 0).unwrap();
        let out = conv2d_forward(&Tensor::full(&[1, 1, 3, 3], 1.0), &p).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let p = ConvParams::new(Tensor::full(&[1, 2, 3, 3], 1.0), t(&[1], &[0.0]), 1, 0).unwrap();
        let err = conv2d_forward(&Tensor::zeros(&[1, 1, 3, 3]), &p).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let p = ConvParams::new(Tensor::full(&[1, 1, 2, 2], 1.0), t(&[1], &[0.0]), 2, 0).unwrap();
        let err = conv2d_forward(&Tensor::zeros(&[1, 1, 3, 3]), &p).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ConvParams::new(Tensor::zeros(&[2, 1, 1, 1]), t(&[1], &[0.0]), 1, 0).is_err());
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let p = ConvParams::new(Tensor::full(&[2, 1, 3, 3], 0.5), t(&[2], &[0.1, 0.2]), 1, 1).unwrap();
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weights.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[1, 2, 3, 3])).is_err());
    }

    #[test]
    fn conv_backward_pointwise_closed_form() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 - 2.0);
        let p = ConvParams::new(w, Tensor::zeros(&[2]), 1, 0).unwrap();
        let go = Tensor::from_fn(&[2, 2, 2, 2], |i| (i as f64 * 0.11).cos());
        let g = conv2d_backward(&x, &p, &go).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut want = 0.0;
                for b in 0..2 {
                    for s in 0..4 {
                        want += x.data()[(b * 3 + c) * 4 + s] * go.data()[(b * 2 + n) * 4 + s];
                    }
                }
                assert!((g.weights.data()[n * 3 + c] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fc_identity_and_constant() {
        let x = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let out = fc_forward(&x, &eye, &Tensor::zeros(&[4])).unwrap();
        assert!(out.bit_eq(&x));
        let bias = t(&[2], &[1.5, -2.0]);
        let out = fc_forward(&x, &Tensor::zeros(&[4, 2]), &bias).unwrap();
        for row in out.data().chunks(2) {
            assert_eq!(row, bias.data());
        }
        assert!(fc_forward(&x, &Tensor::zeros(&[3, 2]), &bias).is_err());
    }

    #[test]
    fn fc_backward_degenerate_cases() {
        let x = t(&[1, 3], &[1.0, -2.0, 0.5]);
        let w = t(&[3, 1], &[0.3, 0.2, 0.1]);
        let b = t(&[1], &[0.0]);
        let g = fc_backward(&x, &w, &b, &t(&[1, 1], &[2.0])).unwrap();
        assert_eq!(g.weights.data(), &[2.0, -4.0, 1.0]);
        assert_eq!(g.bias.data(), &[2.0]);
        let z = fc_backward(&x, &w, &b, &t(&[1, 1], &[0.0])).unwrap();
        assert!(z.input.data().iter().chain(z.weights.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn relu_tie_at_zero() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let p = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(p.output.data(), &[4.0]);
        assert_eq!(p.argmax, vec![3]);

        let flat = Tensor::full(&[1, 1, 2, 2], 7.0);
        let p = maxpool_forward(&flat, 2, 2).unwrap();
        assert_eq!(p.argmax, vec![0]);
        let g = maxpool_backward(flat.shape(), &p.argmax, &t(&[1, 1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        for k in [2usize, 5, 10] {
            let (loss, grad) = softmax_xent(&Tensor::full(&[3, k], 0.7), &[0, 1, k - 1]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12);
            for row in grad.data().chunks(k) {
                assert!(row.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_label_range() {
        let err = softmax_xent(&Tensor::zeros(&[1, 3]), &[3]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(softmax_xent(&Tensor::zeros(&[2, 3]), &[0]).is_err());
    }

    #[test]
    fn argmax_ties_to_lowest() {
        let l = t(&[2, 3], &[1.0, 3.0, 3.0, 0.0, 0.0, 0.0]);
        assert_eq!(argmax_rows(&l), vec![1, 0]);
    }
}
