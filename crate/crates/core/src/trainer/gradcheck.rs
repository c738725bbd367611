//! Finite-difference verification of analytic gradients in 64-bit.
//!
//! A sampled parameter is skipped when nudging it by `±FD_STEP` moves the
//! network across a non-differentiable point: a leaky unit changes sign, a
//! maxpool window changes its winner, or an anchor slot changes between
//! positive, ignored and negative objectness. Central differences across such
//! a point measure the jump, not the derivative.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{BBox, GroundTruth};
use crate::loss::{detection_loss_with_grad, LossWeights, LsrConfig, TargetMask};
use crate::network::{LayerKind, LayerSpec, Network, NetworkSpec, Trace};
use crate::tensor::{
    backward_conv2d, conv2d_cached, Activation, ConvParams, NormGrads, Normalization, Tensor,
};

use super::head_layout;

pub const FD_STEP: f64 = 1e-3;
/// Fraction of parameters sampled by [`grad_check_composite`].
pub const SAMPLE_FRACTION: f64 = 0.05;
pub const LINEAR_TOLERANCE: f64 = 1e-8;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Denominator floor of [`relative_error`].
const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMode {
    Correct,
    /// Negates the loss gradient before backpropagation.
    SignFlipped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Sampled parameters whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
    pub param_count: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error <= tolerance
    }
}

fn param_mut(net: &mut Network<f64>, mut flat: usize) -> &mut f64 {
    for v in net.trainable_mut() {
        if flat < v.len() {
            return &mut v[flat];
        }
        flat -= v.len();
    }
    panic!("parameter index out of range")
}

fn linear_slot(p: &mut ConvParams<f64>, i: usize) -> &mut f64 {
    let n = p.weights.len();
    if i < n {
        return &mut p.weights[i];
    }
    match &mut p.norm {
        Normalization::Bias(b) => &mut b[i - n],
        Normalization::BatchNorm(_) => unreachable!("bias probe"),
    }
}

/// A 1x1 linear convolution with bias under `0.5 * sum(out^2)`, every
/// parameter checked.
pub fn grad_check_linear(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (2, 3);
    let mut params = ConvParams {
        in_channels: cin,
        out_channels: cout,
        kernel: 1,
        weights: (0..cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        norm: Normalization::Bias((0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        activation: Activation::Linear,
    };
    let input = Tensor::<f64>::from_fn(cin, 4, 4, |_, _, _| rng.gen_range(-1.0..1.0));
    let loss = |p: &ConvParams<f64>| {
        let (out, _) = conv2d_cached(&input, p).expect("valid probe");
        0.5 * out.sum_squares()
    };
    let (out, cache) = conv2d_cached(&input, &params).expect("valid probe");
    let g = backward_conv2d(&out, &input, &params, &cache).expect("valid probe");
    let analytic: Vec<f64> = match &g.norm {
        NormGrads::Bias(b) => g.weights.iter().chain(b).copied().collect(),
        NormGrads::BatchNorm { .. } => unreachable!("bias probe"),
    };
    let mut max_err: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *linear_slot(&mut params, i);
        *linear_slot(&mut params, i) = orig + FD_STEP;
        let up = loss(&params);
        *linear_slot(&mut params, i) = orig - FD_STEP;
        let down = loss(&params);
        *linear_slot(&mut params, i) = orig;
        max_err = max_err.max(relative_error(a, (up - down) / (2.0 * FD_STEP)));
    }
    GradCheckReport {
        max_relative_error: max_err,
        checked: analytic.len(),
        skipped: 0,
        param_count: analytic.len(),
    }
}

/// A ten-layer network exercising every layer kind on a 3x8x8 input:
/// batch-normalized leaky convolutions, two maxpools, a route, a reorg, a
/// two-source route and a 2x2 detection head with two anchors.
pub fn probe_spec() -> NetworkSpec {
    let conv = |filters, kernel| LayerKind::Convolutional {
        filters,
        kernel,
        batch_norm: true,
    };
    let anchors = vec![(0.6, 0.8), (1.4, 1.1)];
    let num_classes = 3;
    let kinds = vec![
        conv(4, 3),
        LayerKind::MaxPool,
        conv(4, 3),
        LayerKind::MaxPool,
        conv(4, 1),
        LayerKind::Route { sources: vec![2] },
        LayerKind::Reorg { stride: 2 },
        LayerKind::Route { sources: vec![6, 4] },
        LayerKind::Convolutional {
            filters: anchors.len() * (5 + num_classes),
            kernel: 1,
            batch_norm: false,
        },
        LayerKind::Detection,
    ];
    NetworkSpec {
        input_shape: (3, 8, 8),
        layers: kinds
            .into_iter()
            .enumerate()
            .map(|(index, kind)| LayerSpec { index, kind })
            .collect(),
        anchors,
        num_classes,
    }
}

/// Everything that selects a branch of a piecewise-defined operation.
fn kink_signature(net: &Network<f64>, trace: &Trace<f64>, mask: &TargetMask) -> Vec<u8> {
    let mut sig = mask.0.clone();
    for (i, layer) in net.spec().layers.iter().enumerate() {
        match &layer.kind {
            LayerKind::Convolutional { .. } => {
                let p = net.params()[i].as_ref().expect("conv params");
                if p.activation == Activation::Leaky {
                    let cache = trace.conv_caches[i].as_ref().expect("conv cache");
                    sig.extend(cache.pre_act.data().iter().map(|v| u8::from(*v > 0.0)));
                }
            }
            LayerKind::MaxPool => {
                let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
                let (c, h, w) = x.shape();
                for ci in 0..c {
                    for y in (0..h).step_by(2) {
                        for xx in (0..w).step_by(2) {
                            let mut best = (0u8, x.get(ci, y, xx));
                            for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                                let v = x.get(ci, y + dy, xx + dx);
                                if v > best.1 {
                                    best = (k as u8 + 1, v);
                                }
                            }
                            sig.push(best.0);
                        }
                    }
                }
            }
            _ => {}
        }
    }
    sig
}

struct Probe {
    image: Tensor<f64>,
    gts: Vec<GroundTruth>,
    weights: LossWeights,
    lsr: LsrConfig,
}

impl Probe {
    fn evaluate(&self, net: &Network<f64>) -> (f64, Tensor<f64>, Trace<f64>, Vec<u8>) {
        let trace = net.forward_trace(&self.image).expect("valid probe");
        let head = head_layout(net);
        let (loss, grad, mask) =
            detection_loss_with_grad(trace.output(), &self.gts, &head, &self.weights, &self.lsr).expect("valid probe");
        let sig = kink_signature(net, &trace, &mask);
        (loss.total, grad, trace, sig)
    }
}

/// Builds a randomized probe network and ground truth from `seed`, then
/// compares analytic and central-difference gradients of the detection loss
/// on a random [`SAMPLE_FRACTION`] of the parameters.
pub fn grad_check_composite(seed: u64, mode: BackwardMode) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::<f64>::build(probe_spec(), seed).expect("probe spec is valid");
    for p in net.params_mut().iter_mut().flatten() {
        match &mut p.norm {
            Normalization::BatchNorm(bn) => {
                for c in 0..bn.gamma.len() {
                    bn.gamma[c] = rng.gen_range(0.5..1.5);
                    bn.beta[c] = rng.gen_range(-0.5..0.5);
                    bn.running_mean[c] = rng.gen_range(-0.3..0.3);
                    bn.running_var[c] = rng.gen_range(0.2..1.0);
                }
            }
            Normalization::Bias(b) => b.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5)),
        }
    }
    let image = Tensor::<f64>::from_fn(3, 8, 8, |_, _, _| rng.gen_range(0.0..1.0));
    let n_gts = rng.gen_range(1..=2);
    let gts = (0..n_gts)
        .map(|_| {
            let (w, h) = (rng.gen_range(0.15..0.6), rng.gen_range(0.15..0.6));
            let (cx, cy) = (rng.gen_range(w / 2.0..1.0 - w / 2.0), rng.gen_range(h / 2.0..1.0 - h / 2.0));
            GroundTruth {
                class_id: rng.gen_range(0..3),
                bbox: BBox::from_center(cx, cy, w, h),
            }
        })
        .collect();
    let probe = Probe {
        image,
        gts,
        weights: LossWeights::default(),
        lsr: LsrConfig::new(0.1, 3).expect("valid smoothing"),
    };

    let (_, mut grad_out, trace, sig0) = probe.evaluate(&net);
    if mode == BackwardMode::SignFlipped {
        grad_out.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let (grads, _) = net.backward(&trace, &grad_out).expect("valid probe");
    let analytic: Vec<f64> = grads.slices().concat();
    let total = analytic.len();
    let n_sample = ((SAMPLE_FRACTION * total as f64).ceil() as usize).max(1);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        param_count: total,
    };
    for idx in sample(&mut rng, total, n_sample).into_vec() {
        let orig = *param_mut(&mut net, idx);
        *param_mut(&mut net, idx) = orig + FD_STEP;
        let (up, _, _, sig_up) = probe.evaluate(&net);
        *param_mut(&mut net, idx) = orig - FD_STEP;
        let (down, _, _, sig_down) = probe.evaluate(&net);
        *param_mut(&mut net, idx) = orig;
        if sig_up != sig0 || sig_down != sig0 {
            report.skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.checked += 1;
        report.max_relative_error = report.max_relative_error.max(relative_error(analytic[idx], numeric));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_is_small() {
        let net = Network::<f64>::build(probe_spec(), 0).unwrap();
        assert!(net.trainable_len() < 5000);
        assert_eq!(net.shapes().last(), Some(&(16, 2, 2)));
    }

    #[test]
    fn linear_probe_is_exact() {
        let r = grad_check_linear(3);
        assert!(r.passes(LINEAR_TOLERANCE), "{r:?}");
    }

    #[test]
    fn composite_probe_and_negative_control() {
        let r = grad_check_composite(1, BackwardMode::Correct);
        assert!(r.passes(COMPOSITE_TOLERANCE), "{r:?}");
        let bad = grad_check_composite(1, BackwardMode::SignFlipped);
        assert!(bad.max_relative_error > 0.5, "{bad:?}");
    }
}
