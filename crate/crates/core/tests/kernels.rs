//! Kernels against direct-summation oracles, finite differences and
//! property-based invariants.

use parconv::Tensor;
use parconv::gradcheck::{FD_TOLERANCE, check_all};
use parconv::kernels::{
    ConvParams, conv2d_forward, fc_forward, maxpool_backward, maxpool_forward, relu_backward,
    relu_forward, softmax_xent,
};
use parconv::model::{Params, predict};
use parconv::netdef::{LayerSpec, NetworkSpec, parse_network, shape_report};
use parconv::rng::SplitMix64;
use parconv::sgd::{SgdConfig, SgdState, sgd_step};
use proptest::prelude::*;

/// Six nested loops over output and window, bias first, window taps in
/// ascending order. Every tap counts as one multiply-accumulate, padded taps
/// included, which is what a dense implementation performs.
fn naive_conv(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize, macs: &mut u64) -> Tensor {
    let [b, c, h, wd] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let [n, _, kh, kw] = [w.dim(0), w.dim(1), w.dim(2), w.dim(3)];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, n, oh, ow]);
    for bi in 0..b {
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[ni];
                    for ci in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                *macs += 1;
                                let (y, xx) = ((oy * stride + i) as isize - pad as isize, (ox * stride + j) as isize - pad as isize);
                                if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * c + ci) * h + y as usize) * wd + xx as usize];
                                acc += xv * w.data()[((ni * c + ci) * kh + i) * kw + j];
                            }
                        }
                    }
                    out.data_mut()[((bi * n + ni) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn naive_fc(x: &Tensor, w: &Tensor, bias: &Tensor, macs: &mut u64) -> Tensor {
    let (b, d, u) = (x.dim(0), w.dim(0), w.dim(1));
    let mut out = Tensor::zeros(&[b, u]);
    for r in 0..b {
        for k in 0..u {
            let mut acc = bias.data()[k];
            for i in 0..d {
                *macs += 1;
                acc += x.data()[r * d + i] * w.data()[i * u + k];
            }
            out.data_mut()[r * u + k] = acc;
        }
    }
    out
}

fn naive_maxpool(x: &Tensor, k: usize, s: usize) -> Tensor {
    let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    Tensor::from_fn(&[b, c, oh, ow], |o| {
        let (plane, oy, ox) = (o / (oh * ow), (o / ow) % oh, o % ow);
        let mut best = f64::NEG_INFINITY;
        for i in 0..k {
            for j in 0..k {
                best = best.max(x.data()[plane * h * w + (oy * s + i) * w + ox * s + j]);
            }
        }
        best
    })
}

fn normal(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.next_normal())
}

fn max_rel(a: &Tensor, b: &Tensor) -> f64 {
    a.rel_divergence(b)
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = SplitMix64::new(1);
    let x = normal(&mut rng, &[1, 2, 5, 5]);
    let w = normal(&mut rng, &[3, 2, 3, 3]);
    let bias = normal(&mut rng, &[3]);
    let p = ConvParams::new(w.clone(), bias.clone(), 2, 1).unwrap();
    let got = conv2d_forward(&x, &p).unwrap();
    let want = naive_conv(&x, &w, &bias, 2, 1, &mut 0);
    assert_eq!(got.shape(), &[1, 3, 3, 3]);
    assert!(max_rel(&got, &want) <= 1e-12);
}

#[test]
fn fc_matches_triple_loop() {
    let mut rng = SplitMix64::new(2);
    let x = normal(&mut rng, &[3, 4]);
    let w = normal(&mut rng, &[4, 2]);
    let bias = normal(&mut rng, &[2]);
    let got = fc_forward(&x, &w, &bias).unwrap();
    assert!(max_rel(&got, &naive_fc(&x, &w, &bias, &mut 0)) <= 1e-12);
}

#[test]
fn maxpool_matches_naive_windows() {
    let mut rng = SplitMix64::new(3);
    let x = normal(&mut rng, &[1, 1, 6, 6]);
    let got = maxpool_forward(&x, 2, 2).unwrap();
    assert!(got.output.bit_eq(&naive_maxpool(&x, 2, 2)));
    for (o, &src) in got.output.data().iter().zip(&got.argmax) {
        assert_eq!(*o, x.data()[src]);
    }
}

#[test]
fn every_backward_kernel_passes_finite_differences() {
    for c in check_all(20, 100).unwrap() {
        assert_eq!(c.trials, 100);
        assert!(c.worst < FD_TOLERANCE, "{}: worst relative error {}", c.kernel, c.worst);
    }
}

/// Runs a network with the oracle kernels, counting multiply-accumulates.
fn naive_network_forward(net: &NetworkSpec, params: &Params, x: &Tensor, macs: &mut u64) -> Tensor {
    let mut a = x.clone();
    for (i, layer) in net.layers().iter().enumerate() {
        a = match *layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let (w, b) = params.layer(i).unwrap();
                naive_conv(&a, w, b, stride, pad, macs)
            }
            LayerSpec::Fc { .. } => {
                let (w, b) = params.layer(i).unwrap();
                let batch = a.dim(0);
                let flat = a.clone().reshape(&[batch, a.len() / batch]).unwrap();
                naive_fc(&flat, w, b, macs)
            }
            LayerSpec::Relu => relu_forward(&a),
            LayerSpec::MaxPool { kernel, stride } => naive_maxpool(&a, kernel, stride),
            LayerSpec::SoftmaxXent { .. } => a,
        };
    }
    a
}

#[test]
fn flop_count_is_twice_the_oracle_macs() {
    let nets = [
        NetworkSpec::tinynet(),
        parse_network("input 2 11 11\nconv 4 3 2 1\nrelu\nmaxpool 2 2\nfc 7\nrelu\nfc 3\nsoftmax 3\n").unwrap(),
    ];
    for net in nets {
        let batch = 3;
        let params = Params::init(&net, 5).with_tensors(
            Params::init(&net, 5).tensors().iter().map(|t| t.scale(50.0)).collect(),
        ).unwrap();
        let x = normal(&mut SplitMix64::new(6), &net.input().batched(batch));
        let mut macs = 0;
        let logits = naive_network_forward(&net, &params, &x, &mut macs);
        assert_eq!(shape_report(&net, batch).total_forward_flops(), 2 * macs, "{}", net.name());
        assert!(max_rel(&predict(&net, &params, &x).unwrap(), &logits) <= 1e-12);
    }
}

fn conv_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, usize, usize, u64)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..3, 1usize..4, 1usize..4, any::<u64>())
        .prop_filter_map("window must fit", |(b, c, n, k, s, pad, oh, ow, seed)| {
            if pad >= k {
                return None;
            }
            let h = ((oh - 1) * s + k).checked_sub(2 * pad).filter(|&v| v > 0)?;
            let w = ((ow - 1) * s + k).checked_sub(2 * pad).filter(|&v| v > 0)?;
            Some((vec![b, c, h, w], vec![n, c, k, k], s, pad, seed))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_bit_identical_to_the_canonical_order((xs, ws, s, pad, seed) in conv_case()) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&mut rng, &xs);
        let w = normal(&mut rng, &ws);
        let bias = normal(&mut rng, &[ws[0]]);
        let got = conv2d_forward(&x, &ConvParams::new(w.clone(), bias.clone(), s, pad).unwrap()).unwrap();
        prop_assert!(got.bit_eq(&naive_conv(&x, &w, &bias, s, pad, &mut 0)));
        prop_assert!(got.is_finite());
    }

    #[test]
    fn fc_is_bit_identical_to_the_triple_loop(b in 1usize..5, d in 1usize..8, u in 1usize..6, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let (x, w, bias) = (normal(&mut rng, &[b, d]), normal(&mut rng, &[d, u]), normal(&mut rng, &[u]));
        prop_assert!(fc_forward(&x, &w, &bias).unwrap().bit_eq(&naive_fc(&x, &w, &bias, &mut 0)));
    }

    #[test]
    fn softmax_rows_sum_to_zero_and_ignore_shifts(b in 1usize..5, k in 2usize..9, shift in -50.0f64..50.0, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let logits = Tensor::from_fn(&[b, k], |_| 5.0 * rng.next_normal());
        let labels: Vec<usize> = (0..b).map(|_| rng.below(k as u64) as usize).collect();
        let (loss, grad) = softmax_xent(&logits, &labels).unwrap();
        for row in grad.data().chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-12);
        }
        let shifted = Tensor::from_fn(&[b, k], |i| logits.data()[i] + shift);
        let (loss2, _) = softmax_xent(&shifted, &labels).unwrap();
        prop_assert!((loss - loss2).abs() <= 1e-12 * loss.abs().max(1.0));
    }

    #[test]
    fn relu_backward_masks_by_sign(values in prop::collection::vec(-3.0f64..3.0, 1..40)) {
        let n = values.len();
        let x = Tensor::new(vec![n], values).unwrap();
        let g = relu_backward(&x, &Tensor::full(&[n], 2.0)).unwrap();
        for (xv, gv) in x.data().iter().zip(g.data()) {
            prop_assert_eq!(*gv, if *xv > 0.0 { 2.0 } else { 0.0 });
        }
    }

    #[test]
    fn maxpool_backward_conserves_gradient_mass(c in 1usize..3, o in 1usize..4, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let x = normal(&mut rng, &[1, c, 2 * o, 2 * o]);
        let p = maxpool_forward(&x, 2, 2).unwrap();
        let go = normal(&mut rng, p.output.shape());
        let gx = maxpool_backward(x.shape(), &p.argmax, &go).unwrap();
        // Windows do not overlap, so each upstream value lands on one input.
        let (a, b): (f64, f64) = (go.data().iter().sum(), gx.data().iter().sum());
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        prop_assert_eq!(gx.data().iter().filter(|v| **v != 0.0).count(), go.data().iter().filter(|v| **v != 0.0).count());
    }

    #[test]
    fn sgd_step_is_deterministic(len in 1usize..20, lr in 0.0f64..0.5, momentum in 0.0f64..0.99, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let p = vec![normal(&mut rng, &[len])];
        let g = vec![normal(&mut rng, &[len])];
        let cfg = SgdConfig { learning_rate: lr, momentum, weight_decay: 0.0005 };
        let state = SgdState::new(cfg, &p).unwrap();
        let (p1, s1) = sgd_step(&p, &g, &state).unwrap();
        let (p2, s2) = sgd_step(&p, &g, &state).unwrap();
        prop_assert!(p1[0].bit_eq(&p2[0]));
        prop_assert_eq!(s1, s2);
        prop_assert!(p1[0].is_finite());
    }

    #[test]
    fn concat_then_split_round_trips(parts in 1usize..5, width in 1usize..4, rows in 1usize..4, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let pieces: Vec<Tensor> = (0..parts).map(|_| normal(&mut rng, &[rows, width, 2])).collect();
        let whole = Tensor::concat_axis1(&pieces).unwrap();
        prop_assert_eq!(whole.len(), whole.shape().iter().product::<usize>());
        let back = whole.split_axis1(parts).unwrap();
        for (a, b) in back.iter().zip(&pieces) {
            prop_assert!(a.bit_eq(b));
        }
    }
}
