//! Central finite-difference checks of the backward kernels.
//!
//! Each check draws a random small problem, computes the analytic gradient
//! of a scalar loss and compares it entry by entry with
//! `(f(x + h) - f(x - h)) / 2h`. Layer kernels use `sum(output^2) / 2` as
//! the loss; the softmax check differentiates the cross-entropy itself.

use crate::error::Result;
use crate::kernels::{
    ConvParams, conv2d_backward, conv2d_forward, fc_backward, fc_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_xent,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that entries whose true
/// gradient is zero are judged by their absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Worst relative error of one kernel over a number of random trials.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.worst < FD_TOLERANCE
    }
}

/// Numerical gradient of `f` at `x`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Largest entry-wise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

fn half_sq(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>() / 2.0
}

fn range(rng: &mut SplitMix64, lo: usize, hi: usize) -> usize {
    lo + rng.below((hi - lo + 1) as u64) as usize
}

fn uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 2.0 * rng.next_f64() - 1.0)
}

fn with_data(like: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(like.shape().to_vec(), data.to_vec()).expect("same length")
}

/// Random convolution with batch, channels, filters, kernel, stride and pad
/// all varied.
pub fn check_conv2d(rng: &mut SplitMix64) -> Result<f64> {
    let (b, c, n) = (range(rng, 1, 2), range(rng, 1, 3), range(rng, 1, 3));
    let (kh, kw) = (range(rng, 1, 3), range(rng, 1, 3));
    let stride = range(rng, 1, 2);
    let pad = range(rng, 0, kh.min(kw) - 1);
    // Input extent giving `out` windows that tile the padded input exactly.
    let extent = |k: usize, rng: &mut SplitMix64| {
        let mut out = range(rng, 1, 3);
        while (out - 1) * stride + k <= 2 * pad {
            out += 1;
        }
        (out - 1) * stride + k - 2 * pad
    };
    let (h, w) = (extent(kh, rng), extent(kw, rng));
    let x = uniform(rng, &[b, c, h, w]);
    let p = ConvParams::new(uniform(rng, &[n, c, kh, kw]), uniform(rng, &[n]), stride, pad)?;
    let out = conv2d_forward(&x, &p)?;
    let g = conv2d_backward(&x, &p, &out)?;

    let loss_x = |v: &[f64]| half_sq(&conv2d_forward(&with_data(&x, v), &p).expect("valid"));
    let loss_w = |v: &[f64]| {
        let q = ConvParams { weights: with_data(&p.weights, v), ..p.clone() };
        half_sq(&conv2d_forward(&x, &q).expect("valid"))
    };
    let loss_b = |v: &[f64]| {
        let q = ConvParams { bias: with_data(&p.bias, v), ..p.clone() };
        half_sq(&conv2d_forward(&x, &q).expect("valid"))
    };
    Ok([
        max_rel_error(g.input.data(), &central_difference(loss_x, x.data(), FD_STEP)),
        max_rel_error(g.weights.data(), &central_difference(loss_w, p.weights.data(), FD_STEP)),
        max_rel_error(g.bias.data(), &central_difference(loss_b, p.bias.data(), FD_STEP)),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

pub fn check_fc(rng: &mut SplitMix64) -> Result<f64> {
    let (b, d, u) = (range(rng, 1, 4), range(rng, 1, 6), range(rng, 1, 5));
    let x = uniform(rng, &[b, d]);
    let w = uniform(rng, &[d, u]);
    let bias = uniform(rng, &[u]);
    let out = fc_forward(&x, &w, &bias)?;
    let g = fc_backward(&x, &w, &bias, &out)?;
    let loss_x = |v: &[f64]| half_sq(&fc_forward(&with_data(&x, v), &w, &bias).expect("valid"));
    let loss_w = |v: &[f64]| half_sq(&fc_forward(&x, &with_data(&w, v), &bias).expect("valid"));
    let loss_b = |v: &[f64]| half_sq(&fc_forward(&x, &w, &with_data(&bias, v)).expect("valid"));
    Ok([
        max_rel_error(g.input.data(), &central_difference(loss_x, x.data(), FD_STEP)),
        max_rel_error(g.weights.data(), &central_difference(loss_w, w.data(), FD_STEP)),
        max_rel_error(g.bias.data(), &central_difference(loss_b, bias.data(), FD_STEP)),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

/// Inputs are kept at least 0.01 away from the kink at zero.
pub fn check_relu(rng: &mut SplitMix64) -> Result<f64> {
    let shape = [range(rng, 1, 3), range(rng, 1, 3), range(rng, 1, 4), range(rng, 1, 4)];
    let x = Tensor::from_fn(&shape, |_| {
        let v = 2.0 * rng.next_f64() - 1.0;
        if v.abs() < 0.01 { v + 0.02f64.copysign(v) } else { v }
    });
    let g = relu_backward(&x, &relu_forward(&x))?;
    let loss = |v: &[f64]| half_sq(&relu_forward(&with_data(&x, v)));
    Ok(max_rel_error(g.data(), &central_difference(loss, x.data(), FD_STEP)))
}

/// Inputs are a shuffled ladder with spacing 0.01, so no perturbation can
/// change which element wins a window.
pub fn check_maxpool(rng: &mut SplitMix64) -> Result<f64> {
    let k = range(rng, 1, 3);
    let stride = range(rng, 1, k);
    let extent = |rng: &mut SplitMix64| (range(rng, 1, 3) - 1) * stride + k;
    let shape = [range(rng, 1, 2), range(rng, 1, 3), extent(rng), extent(rng)];
    let len: usize = shape.iter().product();
    let order = rng.permutation(len);
    let x = Tensor::from_fn(&shape, |i| order[i] as f64 * 0.01 - 0.5);
    let p = maxpool_forward(&x, k, stride)?;
    let g = maxpool_backward(x.shape(), &p.argmax, &p.output)?;
    let loss = |v: &[f64]| half_sq(&maxpool_forward(&with_data(&x, v), k, stride).expect("valid").output);
    Ok(max_rel_error(g.data(), &central_difference(loss, x.data(), FD_STEP)))
}

pub fn check_softmax_xent(rng: &mut SplitMix64) -> Result<f64> {
    let (b, k) = (range(rng, 1, 5), range(rng, 2, 7));
    let logits = Tensor::from_fn(&[b, k], |_| 4.0 * rng.next_f64() - 2.0);
    let labels: Vec<usize> = (0..b).map(|_| rng.below(k as u64) as usize).collect();
    let (_, g) = softmax_xent(&logits, &labels)?;
    let loss = |v: &[f64]| softmax_xent(&with_data(&logits, v), &labels).expect("valid").0;
    Ok(max_rel_error(g.data(), &central_difference(loss, logits.data(), FD_STEP)))
}

type Check = fn(&mut SplitMix64) -> Result<f64>;

pub const CHECKS: [(&str, Check); 5] = [
    ("conv2d", check_conv2d),
    ("fc", check_fc),
    ("relu", check_relu),
    ("maxpool", check_maxpool),
    ("softmax_xent", check_softmax_xent),
];

/// Run every kernel check `trials` times from `seed`.
pub fn check_all(seed: u64, trials: usize) -> Result<Vec<KernelCheck>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, &(kernel, check))| {
            let mut rng = SplitMix64::new(seed.wrapping_add(i as u64));
            let mut worst = 0.0f64;
            for _ in 0..trials {
                worst = worst.max(check(&mut rng)?);
            }
            Ok(KernelCheck { kernel, trials, worst })
        })
        .collect()
}
