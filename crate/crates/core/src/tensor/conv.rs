use rayon::prelude::*;

use super::{leaky_relu, backward_leaky_relu, Real, ShapeError, Tensor, DEFAULT_LEAKY_SLOPE};

pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Below this many multiply-adds a convolution runs on the calling thread.
const PARALLEL_WORK: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Leaky,
    Linear,
}

/// Inference-form batch normalization: `y = gamma * (x - mean) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
}

impl<T: Real> BatchNorm<T> {
    /// Identity statistics: gamma 1, beta 0, mean 0, var 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![T::ONE; channels],
            beta: vec![T::ZERO; channels],
            running_mean: vec![T::ZERO; channels],
            running_var: vec![T::ONE; channels],
            epsilon: DEFAULT_BN_EPSILON,
        }
    }

    #[inline]
    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.running_var[c].to_f64() + self.epsilon).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Normalization<T: Real = f32> {
    Bias(Vec<T>),
    BatchNorm(BatchNorm<T>),
}

/// A stride-1, same-padded convolution followed by bias or batch norm and an activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out x in x k x k`, row-major.
    pub weights: Vec<T>,
    pub norm: Normalization<T>,
    pub activation: Activation,
}

impl<T: Real> ConvParams<T> {
    pub fn validate(&self) -> Result<(), ShapeError> {
        let op = "conv_params";
        if self.kernel != 1 && self.kernel != 3 {
            return Err(ShapeError::new(op, format!("kernel must be 1 or 3, got {}", self.kernel)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ShapeError::new(op, "channel counts must be >= 1"));
        }
        let expected = self.out_channels * self.in_channels * self.kernel * self.kernel;
        if self.weights.len() != expected {
            return Err(ShapeError::new(
                op,
                format!("weights length {} != {expected}", self.weights.len()),
            ));
        }
        match &self.norm {
            Normalization::Bias(b) => {
                if b.len() != self.out_channels {
                    return Err(ShapeError::new(op, format!("bias length {} != {}", b.len(), self.out_channels)));
                }
            }
            Normalization::BatchNorm(bn) => {
                for (name, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    if v.len() != self.out_channels {
                        return Err(ShapeError::new(
                            op,
                            format!("{name} length {} != {}", v.len(), self.out_channels),
                        ));
                    }
                }
                if bn.running_var.iter().any(|v| !(v.to_f64() > 0.0)) {
                    return Err(ShapeError::new(op, "running_var elements must be > 0"));
                }
            }
        }
        Ok(())
    }

    /// Number of scalars stored for this layer (running statistics included).
    pub fn param_count(&self) -> usize {
        let norm = match &self.norm {
            Normalization::Bias(_) => self.out_channels,
            Normalization::BatchNorm(_) => 4 * self.out_channels,
        };
        self.weights.len() + norm
    }

    pub fn has_batch_norm(&self) -> bool {
        matches!(self.norm, Normalization::BatchNorm(_))
    }
}

/// Intermediates saved by [`conv2d_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T: Real = f32> {
    /// Raw convolution output, before bias / batch norm.
    pub pre_norm: Tensor<T>,
    /// Input to the activation.
    pub pre_act: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NormGrads<T: Real = f32> {
    Bias(Vec<T>),
    BatchNorm { gamma: Vec<T>, beta: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T: Real = f32> {
    pub input: Tensor<T>,
    pub weights: Vec<T>,
    pub norm: NormGrads<T>,
}

fn widen<T: Real>(data: &[T]) -> Vec<f64> {
    data.iter().map(|v| v.to_f64()).collect()
}

/// `acc[y][x] += w * src[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn accumulate_shifted(acc: &mut [f64], src: &[f64], w: f64, h: usize, wd: usize, dy: isize, dx: isize) {
    let (h, wd) = (h as isize, wd as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (wd - dx).min(wd);
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let a = (y * wd + x0) as usize;
        let s = ((y + dy) * wd + x0 + dx) as usize;
        let n = (x1 - x0) as usize;
        for (acc, src) in acc[a..a + n].iter_mut().zip(&src[s..s + n]) {
            *acc += w * *src;
        }
    }
}

/// `sum_{y,x} a[y][x] * b[y + dy][x + dx]` over every in-bounds position.
#[inline]
fn dot_shifted(a: &[f64], b: &[f64], h: usize, wd: usize, dy: isize, dx: isize) -> f64 {
    let (h, wd) = (h as isize, wd as isize);
    let y0 = (-dy).max(0);
    let y1 = (h - dy).min(h);
    let x0 = (-dx).max(0);
    let x1 = (wd - dx).min(wd);
    let mut sum = 0.0;
    if x0 >= x1 {
        return sum;
    }
    for y in y0..y1 {
        let ia = (y * wd + x0) as usize;
        let ib = ((y + dy) * wd + x0 + dx) as usize;
        let n = (x1 - x0) as usize;
        sum += dot(&a[ia..ia + n], &b[ib..ib + n]);
    }
    sum
}

/// Spatial planes at most this large use the patch-matrix kernels.
const PATCH_PLANE_MAX: usize = 256;

/// Patch matrix: row `p` holds the `cin * k * k` zero-padded inputs seen by
/// output position `p`, in weight order.
fn im2col(src: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = cin * k * k;
    let pad = (k / 2) as isize;
    let mut col = vec![0.0; h * w * r];
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * r..(y * w + x + 1) * r];
            for i in 0..cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            row[(i * k + ky) * k + kx] = src[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input planes.
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let r = cin * k * k;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cin * h * w];
    for y in 0..h {
        for x in 0..w {
            let row = &col[(y * w + x) * r..(y * w + x + 1) * r];
            for i in 0..cin {
                for ky in 0..k {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            out[(i * h + sy as usize) * w + sx as usize] += row[(i * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut sum = lanes.iter().sum::<f64>();
    for (x, y) in ra.iter().zip(rb) {
        sum += x * y;
    }
    sum
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn for_each_plane<F>(out: &mut [f64], plane: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if work >= PARALLEL_WORK {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Plain same-padded stride-1 convolution without bias.
pub fn convolve<T: Real>(
    input: &Tensor<T>,
    weights: &[T],
    out_channels: usize,
    kernel: usize,
) -> Result<Tensor<T>, ShapeError> {
    let (cin, h, w) = input.shape();
    if weights.len() != out_channels * cin * kernel * kernel {
        return Err(ShapeError::new(
            "conv2d",
            format!(
                "weights length {} does not match {out_channels}x{cin}x{kernel}x{kernel}",
                weights.len()
            ),
        ));
    }
    let pad = (kernel / 2) as isize;
    let src = widen(input.data());
    let wts = widen(weights);
    let plane = h * w;
    let mut acc = vec![0.0f64; out_channels * plane];
    let work = out_channels * cin * kernel * kernel * plane;
    if plane <= PATCH_PLANE_MAX {
        let r = cin * kernel * kernel;
        let col = im2col(&src, cin, h, w, kernel);
        for_each_plane(&mut acc, plane, work, |o, out| {
            let wo = &wts[o * r..(o + 1) * r];
            for (p, v) in out.iter_mut().enumerate() {
                *v = dot(wo, &col[p * r..(p + 1) * r]);
            }
        });
        return Tensor::new(out_channels, h, w, acc.into_iter().map(T::from_f64).collect());
    }
    for_each_plane(&mut acc, plane, work, |o, out| {
        for i in 0..cin {
            let s = &src[i * plane..(i + 1) * plane];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = wts[((o * cin + i) * kernel + ky) * kernel + kx];
                    accumulate_shifted(out, s, wv, h, w, ky as isize - pad, kx as isize - pad);
                }
            }
        }
    });
    Tensor::new(out_channels, h, w, acc.into_iter().map(T::from_f64).collect())
}

/// Gradients of [`convolve`] with respect to its input and weights.
pub fn backward_convolve<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weights: &[T],
    kernel: usize,
) -> Result<(Tensor<T>, Vec<T>), ShapeError> {
    let (cin, h, w) = input.shape();
    let cout = grad_out.channels();
    grad_out.expect_shape("backward_conv2d", "grad_out", (cout, h, w))?;
    if weights.len() != cout * cin * kernel * kernel {
        return Err(ShapeError::new("backward_conv2d", "weights length does not match shapes"));
    }
    let pad = (kernel / 2) as isize;
    let plane = h * w;
    let src = widen(input.data());
    let g = widen(grad_out.data());
    let wts = widen(weights);
    let kk = kernel * kernel;
    let work = cout * cin * kk * plane;

    if plane <= PATCH_PLANE_MAX {
        let r = cin * kk;
        let col = im2col(&src, cin, h, w, kernel);
        let mut grad_w = vec![0.0f64; cout * r];
        for_each_plane(&mut grad_w, r, work, |o, gw| {
            for p in 0..plane {
                let gv = g[o * plane + p];
                if gv != 0.0 {
                    axpy(gw, gv, &col[p * r..(p + 1) * r]);
                }
            }
        });
        let mut grad_col = vec![0.0f64; plane * r];
        for_each_plane(&mut grad_col, r, work, |p, gc| {
            for o in 0..cout {
                let gv = g[o * plane + p];
                if gv != 0.0 {
                    axpy(gc, gv, &wts[o * r..(o + 1) * r]);
                }
            }
        });
        let grad_in = col2im(&grad_col, cin, h, w, kernel);
        return Ok((
            Tensor::new(cin, h, w, grad_in.into_iter().map(T::from_f64).collect())?,
            grad_w.into_iter().map(T::from_f64).collect(),
        ));
    }
    let mut grad_w = vec![0.0f64; cout * cin * kk];
    for_each_plane(&mut grad_w, cin * kk, work, |o, gw| {
        let go = &g[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let s = &src[i * plane..(i + 1) * plane];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    gw[(i * kernel + ky) * kernel + kx] =
                        dot_shifted(go, s, h, w, ky as isize - pad, kx as isize - pad);
                }
            }
        }
    });

    let mut grad_in = vec![0.0f64; cin * plane];
    for_each_plane(&mut grad_in, plane, work, |i, gi| {
        for o in 0..cout {
            let go = &g[o * plane..(o + 1) * plane];
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let wv = wts[((o * cin + i) * kernel + ky) * kernel + kx];
                    accumulate_shifted(gi, go, wv, h, w, pad - ky as isize, pad - kx as isize);
                }
            }
        }
    });

    Ok((
        Tensor::new(cin, h, w, grad_in.into_iter().map(T::from_f64).collect())?,
        grad_w.into_iter().map(T::from_f64).collect(),
    ))
}

pub fn bias_add<T: Real>(input: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>, ShapeError> {
    if bias.len() != input.channels() {
        return Err(ShapeError::new("bias_add", "bias length != channels"));
    }
    let mut out = input.clone();
    let plane = out.plane_len();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

/// Bias gradient: per-channel sum of `grad_out`.
pub fn backward_bias<T: Real>(grad_out: &Tensor<T>) -> Vec<T> {
    let plane = grad_out.plane_len();
    grad_out
        .data()
        .chunks(plane)
        .map(|c| T::from_f64(c.iter().map(|v| v.to_f64()).sum()))
        .collect()
}

pub fn batch_norm<T: Real>(input: &Tensor<T>, bn: &BatchNorm<T>) -> Result<Tensor<T>, ShapeError> {
    if bn.gamma.len() != input.channels() {
        return Err(ShapeError::new("batch_norm", "parameter length != channels"));
    }
    let mut out = input.clone();
    let plane = out.plane_len();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let scale = bn.gamma[c].to_f64() * bn.inv_std(c);
        let mean = bn.running_mean[c].to_f64();
        let beta = bn.beta[c].to_f64();
        chunk
            .iter_mut()
            .for_each(|v| *v = T::from_f64(scale * (v.to_f64() - mean) + beta));
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`; running statistics are constants.
pub fn backward_batch_norm<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    bn: &BatchNorm<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), ShapeError> {
    grad_out.expect_shape("backward_batch_norm", "grad_out", input.shape())?;
    let plane = input.plane_len();
    let mut grad_in = grad_out.clone();
    let mut d_gamma = Vec::with_capacity(input.channels());
    let mut d_beta = Vec::with_capacity(input.channels());
    for c in 0..input.channels() {
        let inv_std = bn.inv_std(c);
        let mean = bn.running_mean[c].to_f64();
        let gamma = bn.gamma[c].to_f64();
        let g = grad_out.channel(c);
        let x = input.channel(c);
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for (gv, xv) in g.iter().zip(x) {
            let gv = gv.to_f64();
            sg += gv;
            sgx += gv * (xv.to_f64() - mean) * inv_std;
        }
        d_beta.push(T::from_f64(sg));
        d_gamma.push(T::from_f64(sgx));
        let k = gamma * inv_std;
        grad_in.data_mut()[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v = T::from_f64(v.to_f64() * k));
    }
    Ok((grad_in, d_gamma, d_beta))
}

fn check_input<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<(), ShapeError> {
    if input.channels() != params.in_channels {
        return Err(ShapeError::new(
            "conv2d",
            format!(
                "input has {} channels, layer expects {}",
                input.channels(),
                params.in_channels
            ),
        ));
    }
    Ok(())
}

fn normalize<T: Real>(z: &Tensor<T>, norm: &Normalization<T>) -> Result<Tensor<T>, ShapeError> {
    match norm {
        Normalization::Bias(b) => bias_add(z, b),
        Normalization::BatchNorm(bn) => batch_norm(z, bn),
    }
}

fn activate<T: Real>(u: Tensor<T>, act: Activation) -> Tensor<T> {
    match act {
        Activation::Leaky => leaky_relu(&u, DEFAULT_LEAKY_SLOPE),
        Activation::Linear => u,
    }
}

/// Full convolutional layer: convolution, then bias or batch norm, then activation.
pub fn conv2d<T: Real>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>, ShapeError> {
    check_input(input, params)?;
    let z = convolve(input, &params.weights, params.out_channels, params.kernel)?;
    let u = normalize(&z, &params.norm)?;
    Ok(activate(u, params.activation))
}

/// [`conv2d`] that also returns the intermediates needed by [`backward_conv2d`].
pub fn conv2d_cached<T: Real>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
) -> Result<(Tensor<T>, ConvCache<T>), ShapeError> {
    check_input(input, params)?;
    let pre_norm = convolve(input, &params.weights, params.out_channels, params.kernel)?;
    let pre_act = normalize(&pre_norm, &params.norm)?;
    let out = activate(pre_act.clone(), params.activation);
    Ok((out, ConvCache { pre_norm, pre_act }))
}

pub fn backward_conv2d<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    cache: &ConvCache<T>,
) -> Result<ConvGrads<T>, ShapeError> {
    check_input(input, params)?;
    grad_out.expect_shape("backward_conv2d", "grad_out", cache.pre_act.shape())?;
    let g_act = match params.activation {
        Activation::Leaky => backward_leaky_relu(grad_out, &cache.pre_act, DEFAULT_LEAKY_SLOPE)?,
        Activation::Linear => grad_out.clone(),
    };
    let (g_z, norm) = match &params.norm {
        Normalization::Bias(_) => {
            let gb = backward_bias(&g_act);
            (g_act, NormGrads::Bias(gb))
        }
        Normalization::BatchNorm(bn) => {
            let (gz, gamma, beta) = backward_batch_norm(&g_act, &cache.pre_norm, bn)?;
            (gz, NormGrads::BatchNorm { gamma, beta })
        }
    };
    let (g_in, g_w) = backward_convolve(&g_z, input, &params.weights, params.kernel)?;
    Ok(ConvGrads {
        input: g_in,
        weights: g_w,
        norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(weights: Vec<f32>, bias: Vec<f32>, cin: usize, cout: usize, k: usize) -> ConvParams {
        ConvParams {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            weights,
            norm: Normalization::Bias(bias),
            activation: Activation::Linear,
        }
    }

    #[test]
    fn identity_1x1() {
        let x = Tensor::new(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = conv2d(&x, &linear(vec![1.0], vec![0.0], 1, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_3x3_hand_values() {
        let x = Tensor::new(1, 3, 3, (1..=9).map(|v| v as f32).collect()).unwrap();
        let y = conv2d(&x, &linear(vec![1.0; 9], vec![0.0], 1, 1, 3)).unwrap();
        assert_eq!(y.get(0, 1, 1), 45.0);
        assert_eq!(y.get(0, 0, 0), 12.0);
        // 1+2+3+4+5+6
        assert_eq!(y.get(0, 0, 1), 21.0);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros(2, 3, 3);
        let err = conv2d(&x, &linear(vec![1.0], vec![0.0], 1, 1, 1)).unwrap_err();
        assert_eq!(err.op, "conv2d");
    }

    #[test]
    fn identity_backward_passes_gradient() {
        let x = Tensor::new(1, 2, 2, vec![1.0f32, -2.0, 3.0, 4.0]).unwrap();
        let p = linear(vec![1.0], vec![0.0], 1, 1, 1);
        let (_, cache) = conv2d_cached(&x, &p).unwrap();
        let g = Tensor::new(1, 2, 2, vec![0.5f32, 1.5, -1.0, 2.0]).unwrap();
        let grads = backward_conv2d(&g, &x, &p, &cache).unwrap();
        assert_eq!(grads.input, g);
        assert_eq!(grads.norm, NormGrads::Bias(vec![3.0]));
        assert_eq!(grads.weights, vec![0.5 - 3.0 - 3.0 + 8.0]);
    }

    #[test]
    fn batch_norm_inference_form() {
        let x = Tensor::new(1, 1, 2, vec![3.0f64, 5.0]).unwrap();
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![1.0],
            running_mean: vec![1.0],
            running_var: vec![4.0 - DEFAULT_BN_EPSILON],
            epsilon: DEFAULT_BN_EPSILON,
        };
        let y = batch_norm(&x, &bn).unwrap();
        assert!((y.get(0, 0, 0) - 3.0).abs() < 1e-12);
        assert!((y.get(0, 0, 1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn validate_rejects_bad_kernel_and_variance() {
        let mut p = linear(vec![0.0; 4], vec![0.0], 1, 1, 2);
        assert!(p.validate().is_err());
        p = ConvParams {
            kernel: 1,
            weights: vec![0.0],
            norm: Normalization::BatchNorm(BatchNorm {
                running_var: vec![0.0],
                ..BatchNorm::identity(1)
            }),
            ..p
        };
        assert!(p.validate().is_err());
    }
}
