//! The detector graph: specs, weight-bearing runtime networks, and the
//! `IYW1` weight file format.

mod spec;
mod weights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    self, backward_concat_channels, backward_conv2d, backward_maxpool2, backward_reorg, BatchNorm,
    ConvCache, ConvParams, NormGrads, Normalization, Real, Shape, ShapeError, Tensor,
};

pub use spec::{
    iyolo_spec, tiny_spec, LayerKind, LayerSpec, NetworkSpec, CLASS_NAMES, DEFAULT_ANCHORS,
    DEFAULT_NUM_CLASSES, TINY_GRID, TINY_INPUT,
};
pub use weights::{
    decode_weights, encode_weights, expected_file_len, load_weights, load_weights_any,
    save_weights, WeightsError, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network spec at layer {layer}: {reason}")]
    InvalidSpec { layer: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// A spec together with the parameters of every convolutional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Real = f32> {
    spec: NetworkSpec,
    shapes: Vec<Shape>,
    /// `Some` exactly at convolutional layers.
    params: Vec<Option<ConvParams<T>>>,
}

/// Per-layer values recorded by [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace<T: Real = f32> {
    pub input: Tensor<T>,
    pub outputs: Vec<Tensor<T>>,
    pub conv_caches: Vec<Option<ConvCache<T>>>,
}

impl<T: Real> Trace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty network")
    }
}

/// Gradient of a scalar loss with respect to every trainable parameter.
/// Running batch-norm statistics are not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real = f32> {
    pub layers: Vec<Option<LayerGrads<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T: Real = f32> {
    pub weights: Vec<T>,
    pub norm: NormGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Flat views in the same order as [`Network::trainable_mut`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for l in self.layers.iter().flatten() {
            match &l.norm {
                NormGrads::Bias(b) => {
                    out.push(l.weights.as_slice());
                    out.push(b.as_slice());
                }
                NormGrads::BatchNorm { gamma, beta } => {
                    out.push(l.weights.as_slice());
                    out.push(gamma.as_slice());
                    out.push(beta.as_slice());
                }
            }
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().flatten() {
            out.push(&mut l.weights);
            match &mut l.norm {
                NormGrads::Bias(b) => out.push(b),
                NormGrads::BatchNorm { gamma, beta } => {
                    out.push(gamma);
                    out.push(beta);
                }
            }
        }
        out
    }

    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerGrads {
                        weights: vec![T::ZERO; p.weights.len()],
                        norm: match &p.norm {
                            Normalization::Bias(b) => NormGrads::Bias(vec![T::ZERO; b.len()]),
                            Normalization::BatchNorm(bn) => NormGrads::BatchNorm {
                                gamma: vec![T::ZERO; bn.gamma.len()],
                                beta: vec![T::ZERO; bn.beta.len()],
                            },
                        },
                    })
                })
                .collect(),
        }
    }

    /// `self += scale * other`. Panics if the layouts differ.
    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: f64) {
        let src = other.slices();
        let dst = self.slices_mut();
        assert_eq!(src.len(), dst.len(), "gradient layouts differ");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.len(), s.len(), "gradient layouts differ");
            for (a, b) in d.iter_mut().zip(s) {
                *a = T::from_f64(a.to_f64() + scale * b.to_f64());
            }
        }
    }

    /// `self = a * self + b * other`. Panics if the layouts differ.
    pub fn add_scaled_in_place(&mut self, a: f64, other: &Gradients<T>, b: f64) {
        let src = other.slices();
        let dst = self.slices_mut();
        assert_eq!(src.len(), dst.len(), "gradient layouts differ");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.len(), s.len(), "gradient layouts differ");
            for (x, y) in d.iter_mut().zip(s) {
                *x = T::from_f64(a * x.to_f64() + b * y.to_f64());
            }
        }
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(T) -> T) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = f(*v));
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> Network<T> {
    /// Random initialization: conv weights uniform in `±sqrt(2 / fan_in)`,
    /// batch norm at identity statistics, biases zero.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self, NetworkError> {
        let shapes = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            params.push(match &layer.kind {
                LayerKind::Convolutional {
                    filters,
                    kernel,
                    batch_norm,
                } => {
                    let cin = spec.layer_input_shape(&shapes, i).0;
                    let fan_in = cin * kernel * kernel;
                    let bound = (2.0 / fan_in as f64).sqrt();
                    let weights = (0..filters * fan_in)
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect();
                    let norm = if *batch_norm {
                        Normalization::BatchNorm(BatchNorm::identity(*filters))
                    } else {
                        Normalization::Bias(vec![T::ZERO; *filters])
                    };
                    Some(ConvParams {
                        in_channels: cin,
                        out_channels: *filters,
                        kernel: *kernel,
                        weights,
                        norm,
                        activation: layer.kind.activation().expect("conv layer"),
                    })
                }
                _ => None,
            });
        }
        Ok(Self { spec, shapes, params })
    }

    /// Assembles a network from explicit parameters, checking them against the layer layout.
    pub fn from_params(spec: NetworkSpec, params: Vec<Option<ConvParams<T>>>) -> Result<Self, NetworkError> {
        let shapes = spec.validate()?;
        if params.len() != spec.layers.len() {
            return Err(NetworkError::InvalidSpec {
                layer: params.len().min(spec.layers.len()),
                reason: format!("{} parameter slots for {} layers", params.len(), spec.layers.len()),
            });
        }
        for (i, (layer, p)) in spec.layers.iter().zip(&params).enumerate() {
            let bad = |reason: String| NetworkError::InvalidSpec { layer: i, reason };
            match (&layer.kind, p) {
                (
                    LayerKind::Convolutional {
                        filters,
                        kernel,
                        batch_norm,
                    },
                    Some(p),
                ) => {
                    p.validate()?;
                    let cin = spec.layer_input_shape(&shapes, i).0;
                    if p.out_channels != *filters || p.kernel != *kernel || p.in_channels != cin {
                        return Err(bad(format!(
                            "params {}x{}x{k}x{k} do not match {filters}x{cin}x{kernel}x{kernel}",
                            p.out_channels,
                            p.in_channels,
                            k = p.kernel
                        )));
                    }
                    if p.has_batch_norm() != *batch_norm {
                        return Err(bad("batch norm presence does not match spec".into()));
                    }
                    if p.activation != layer.kind.activation().expect("conv") {
                        return Err(bad("activation does not match spec".into()));
                    }
                }
                (LayerKind::Convolutional { .. }, None) => return Err(bad("missing conv params".into())),
                (_, Some(_)) => return Err(bad("params given for a parameter-free layer".into())),
                (_, None) => {}
            }
        }
        Ok(Self { spec, shapes, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<ConvParams<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<ConvParams<T>>] {
        &mut self.params
    }

    pub fn grid_size(&self) -> usize {
        self.shapes.last().expect("validated").1
    }

    /// Total stored scalars, including running statistics.
    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.param_count()).sum()
    }

    /// Trainable parameter arrays, in the same order as [`Gradients::slices`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for p in self.params.iter_mut().flatten() {
            out.push(&mut p.weights);
            match &mut p.norm {
                Normalization::Bias(b) => out.push(b),
                Normalization::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
            }
        }
        out
    }

    pub fn trainable_len(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| {
                p.weights.len()
                    + match &p.norm {
                        Normalization::Bias(b) => b.len(),
                        Normalization::BatchNorm(bn) => 2 * bn.gamma.len(),
                    }
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|p| {
            let norm_ok = match &p.norm {
                Normalization::Bias(b) => b.iter().all(|v| v.is_finite()),
                Normalization::BatchNorm(bn) => [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                    .iter()
                    .all(|v| v.iter().all(|x| x.is_finite())),
            };
            norm_ok && p.weights.iter().all(|v| v.is_finite())
        })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64())).collect::<Vec<U>>();
        Network {
            spec: self.spec.clone(),
            shapes: self.shapes.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| ConvParams {
                        in_channels: p.in_channels,
                        out_channels: p.out_channels,
                        kernel: p.kernel,
                        weights: conv(&p.weights),
                        norm: match &p.norm {
                            Normalization::Bias(b) => Normalization::Bias(conv(b)),
                            Normalization::BatchNorm(bn) => Normalization::BatchNorm(BatchNorm {
                                gamma: conv(&bn.gamma),
                                beta: conv(&bn.beta),
                                running_mean: conv(&bn.running_mean),
                                running_var: conv(&bn.running_var),
                                epsilon: bn.epsilon,
                            }),
                        },
                        activation: p.activation,
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<(), NetworkError> {
        image.expect_shape("forward", "image", self.spec.input_shape)?;
        Ok(())
    }

    fn route(&self, sources: &[usize], outputs: &[Option<Tensor<T>>]) -> Result<Tensor<T>, NetworkError> {
        let mut it = sources.iter();
        let first = *it.next().expect("validated route");
        let mut acc = outputs[first].clone().expect("route source retained");
        for &s in it {
            acc = tensor::concat_channels(&acc, outputs[s].as_ref().expect("route source retained"))?;
        }
        Ok(acc)
    }

    /// Raw detection tensor for one image. Intermediate maps are dropped as
    /// soon as no later layer needs them.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_input(image)?;
        let consumers = self.spec.consumers();
        let last_use: Vec<usize> = consumers
            .iter()
            .enumerate()
            .map(|(i, c)| c.iter().copied().max().unwrap_or(i))
            .collect();
        let n = self.spec.layers.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        for i in 0..n {
            let out = {
                let input = if i == 0 { Some(image) } else { outputs[i - 1].as_ref() };
                self.layer_forward(i, input, &outputs, None)?
            };
            outputs[i] = Some(out);
            for j in 0..i {
                if last_use[j] <= i && j != n - 1 {
                    outputs[j] = None;
                }
            }
        }
        Ok(outputs[n - 1].take().expect("last output"))
    }

    fn layer_forward(
        &self,
        i: usize,
        input: Option<&Tensor<T>>,
        outputs: &[Option<Tensor<T>>],
        cache: Option<&mut Option<ConvCache<T>>>,
    ) -> Result<Tensor<T>, NetworkError> {
        let layer = &self.spec.layers[i];
        Ok(match &layer.kind {
            LayerKind::Convolutional { .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                let x = input.expect("conv input retained");
                match cache {
                    Some(slot) => {
                        let (y, c) = tensor::conv2d_cached(x, p)?;
                        *slot = Some(c);
                        y
                    }
                    None => tensor::conv2d(x, p)?,
                }
            }
            LayerKind::MaxPool => tensor::maxpool2(input.expect("pool input retained"))?,
            LayerKind::Reorg { stride } => tensor::reorg(input.expect("reorg input retained"), *stride)?,
            LayerKind::Route { sources } => self.route(sources, outputs)?,
            LayerKind::Detection => input.expect("detection input retained").clone(),
        })
    }

    /// Forward pass that keeps every intermediate for [`Network::backward`].
    pub fn forward_trace(&self, image: &Tensor<T>) -> Result<Trace<T>, NetworkError> {
        self.check_input(image)?;
        let n = self.spec.layers.len();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; n];
        let mut caches: Vec<Option<ConvCache<T>>> = vec![None; n];
        for i in 0..n {
            let input = if i == 0 { Some(image) } else { outputs[i - 1].as_ref() };
            let out = self.layer_forward(i, input, &outputs, Some(&mut caches[i]))?;
            outputs[i] = Some(out);
        }
        Ok(Trace {
            input: image.clone(),
            outputs: outputs.into_iter().map(|o| o.expect("every layer ran")).collect(),
            conv_caches: caches,
        })
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the raw detection tensor)
    /// through a recorded trace. Returns parameter gradients and the image gradient.
    pub fn backward(&self, trace: &Trace<T>, grad_output: &Tensor<T>) -> Result<(Gradients<T>, Tensor<T>), NetworkError> {
        let n = self.spec.layers.len();
        grad_output.expect_shape("backward", "grad_output", self.shapes[n - 1])?;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[n - 1] = Some(grad_output.clone());
        let mut param_grads = Gradients {
            layers: vec![None; n],
        };
        let mut grad_image: Option<Tensor<T>> = None;

        fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<(), ShapeError> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let input = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
            let to_prev = match &self.spec.layers[i].kind {
                LayerKind::Convolutional { .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let cache = trace.conv_caches[i].as_ref().expect("trace has conv cache");
                    let cg = backward_conv2d(&g, input, p, cache)?;
                    param_grads.layers[i] = Some(LayerGrads {
                        weights: cg.weights,
                        norm: cg.norm,
                    });
                    Some(cg.input)
                }
                LayerKind::MaxPool => Some(backward_maxpool2(&g, input)?),
                LayerKind::Reorg { stride } => Some(backward_reorg(&g, *stride)?),
                LayerKind::Detection => Some(g),
                LayerKind::Route { sources } => {
                    let mut rest = g;
                    for (k, &s) in sources.iter().enumerate() {
                        let part = if k + 1 == sources.len() {
                            rest.clone()
                        } else {
                            let (head, tail) = backward_concat_channels(&rest, self.shapes[s].0)?;
                            rest = tail;
                            head
                        };
                        accumulate(&mut grads[s], part)?;
                    }
                    None
                }
            };
            if let Some(gp) = to_prev {
                if i == 0 {
                    grad_image = Some(gp);
                } else {
                    accumulate(&mut grads[i - 1], gp)?;
                }
            }
        }
        // Layers whose output never reaches the head get zero gradients.
        let zeros = Gradients::zeros_like(self);
        for (slot, z) in param_grads.layers.iter_mut().zip(zeros.layers) {
            if slot.is_none() {
                *slot = z;
            }
        }
        let grad_image = grad_image.unwrap_or_else(|| {
            let (c, h, w) = self.spec.input_shape;
            Tensor::zeros(c, h, w)
        });
        Ok((param_grads, grad_image))
    }

    /// Data-dependent batch-norm initialization: sets every running mean and
    /// variance to the per-channel statistics of the pre-normalization
    /// activations over `images`, layer by layer.
    pub fn calibrate_batch_norm(&mut self, images: &[Tensor<T>]) -> Result<(), NetworkError> {
        if images.is_empty() {
            return Ok(());
        }
        for img in images {
            self.check_input(img)?;
        }
        let n = self.spec.layers.len();
        let mut outs: Vec<Vec<Option<Tensor<T>>>> = vec![vec![None; n]; images.len()];
        for i in 0..n {
            if let (LayerKind::Convolutional { batch_norm: true, .. }, Some(p)) =
                (&self.spec.layers[i].kind, self.params[i].as_ref())
            {
                let zs: Vec<Tensor<T>> = images
                    .iter()
                    .zip(&outs)
                    .map(|(img, o)| {
                        let x = if i == 0 { img } else { o[i - 1].as_ref().expect("prev") };
                        tensor::convolve(x, &p.weights, p.out_channels, p.kernel)
                    })
                    .collect::<Result<_, _>>()?;
                let channels = p.out_channels;
                let mut mean = vec![0.0f64; channels];
                let mut sq = vec![0.0f64; channels];
                let count = (zs.len() * zs[0].plane_len()) as f64;
                for z in &zs {
                    for c in 0..channels {
                        for v in z.channel(c) {
                            let v = v.to_f64();
                            mean[c] += v;
                            sq[c] += v * v;
                        }
                    }
                }
                if let Some(Normalization::BatchNorm(bn)) = self.params[i].as_mut().map(|p| &mut p.norm) {
                    for c in 0..channels {
                        let m = mean[c] / count;
                        let var = (sq[c] / count - m * m).max(0.0);
                        bn.running_mean[c] = T::from_f64(m);
                        bn.running_var[c] = T::from_f64(var.max(1e-8));
                    }
                }
            }
            for (k, img) in images.iter().enumerate() {
                let input = if i == 0 { Some(img) } else { outs[k][i - 1].as_ref() };
                let out = self.layer_forward(i, input, &outs[k], None)?;
                outs[k][i] = Some(out);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let a = Network::<f32>::build(tiny_spec(3), 7).unwrap();
        let b = Network::<f32>::build(tiny_spec(3), 7).unwrap();
        assert_eq!(a, b);
        let c = Network::<f32>::build(tiny_spec(3), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn head_layer_param_count() {
        let net = Network::<f32>::build(iyolo_spec(), 7).unwrap();
        assert_eq!(net.params()[29].as_ref().unwrap().param_count(), 41_000);
        assert!(net.all_finite());
    }

    #[test]
    fn init_bounds_follow_fan_in() {
        let net = Network::<f32>::build(tiny_spec(3), 1).unwrap();
        for p in net.params().iter().flatten() {
            let bound = (2.0 / (p.in_channels * p.kernel * p.kernel) as f64).sqrt() as f32;
            assert!(p.weights.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn tiny_forward_shape_and_wrong_input() {
        let net = Network::<f32>::build(tiny_spec(3), 3).unwrap();
        let out = net.forward(&Tensor::filled(3, 64, 64, 0.5)).unwrap();
        assert_eq!(out.shape(), (40, 4, 4));
        assert!(matches!(
            net.forward(&Tensor::zeros(3, 32, 32)),
            Err(NetworkError::Shape(_))
        ));
    }

    #[test]
    fn trace_matches_forward_and_route_layout() {
        let net = Network::<f32>::build(tiny_spec(3), 5).unwrap();
        let img = Tensor::from_fn(3, 64, 64, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 10.0);
        let trace = net.forward_trace(&img).unwrap();
        assert_eq!(trace.output(), &net.forward(&img).unwrap());
        let reorged = tensor::reorg(&trace.outputs[15], 2).unwrap();
        let routed = &trace.outputs[26];
        assert_eq!(routed.channels(), reorged.channels() + trace.outputs[23].channels());
        assert_eq!(&routed.data()[..reorged.data().len()], reorged.data());
    }

    #[test]
    fn gradients_cover_every_conv_layer() {
        let net = Network::<f64>::build(tiny_spec(3), 5).unwrap();
        let img = Tensor::filled(3, 64, 64, 0.3);
        let trace = net.forward_trace(&img).unwrap();
        let g = Tensor::filled(40, 4, 4, 1.0);
        let (grads, gi) = net.backward(&trace, &g).unwrap();
        assert_eq!(grads.len(), net.trainable_len());
        assert_eq!(gi.shape(), (3, 64, 64));
    }

    #[test]
    fn calibration_normalizes_first_layer() {
        let mut net = Network::<f64>::build(tiny_spec(3), 2).unwrap();
        let imgs: Vec<Tensor<f64>> = (0..3)
            .map(|k| Tensor::from_fn(3, 64, 64, |c, y, x| ((c + y * 5 + x * 3 + k) % 13) as f64 / 13.0))
            .collect();
        net.calibrate_batch_norm(&imgs).unwrap();
        let p = net.params()[0].as_ref().unwrap();
        let Normalization::BatchNorm(bn) = &p.norm else { panic!() };
        let zs: Vec<_> = imgs
            .iter()
            .map(|im| tensor::convolve(im, &p.weights, p.out_channels, p.kernel).unwrap())
            .collect();
        let normed: Vec<f64> = zs
            .iter()
            .flat_map(|z| tensor::batch_norm(z, bn).unwrap().channel(0).to_vec())
            .collect();
        let mean = normed.iter().sum::<f64>() / normed.len() as f64;
        let var = normed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / normed.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
