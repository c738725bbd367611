use super::{Real, ShapeError, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::ZERO) {
            *v = *v * s;
        }
    });
    out
}

/// `pre_act` is the activation input; at exactly zero the `slope` branch is taken.
pub fn backward_leaky_relu<T: Real>(
    grad_out: &Tensor<T>,
    pre_act: &Tensor<T>,
    slope: f64,
) -> Result<Tensor<T>, ShapeError> {
    grad_out.expect_shape("backward_leaky_relu", "grad_out", pre_act.shape())?;
    let s = T::from_f64(slope);
    let mut out = grad_out.clone();
    for (g, x) in out.data_mut().iter_mut().zip(pre_act.data()) {
        if !(*x > T::ZERO) {
            *g = *g * s;
        }
    }
    Ok(out)
}

/// Logistic function, stable for arbitrarily large `|x|`.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::from_f64(sigmoid_scalar(v.to_f64())));
    out
}

/// Gradient of [`sigmoid`] given its output `y`: `g * y * (1 - y)`.
pub fn backward_sigmoid<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    grad_out.expect_shape("backward_sigmoid", "grad_out", output.shape())?;
    let mut out = grad_out.clone();
    for (g, y) in out.data_mut().iter_mut().zip(output.data()) {
        let y = y.to_f64();
        *g = T::from_f64(g.to_f64() * y * (1.0 - y));
    }
    Ok(out)
}

/// Space-to-depth: `out[c*s*s + dy*s + dx][y][x] = in[c][s*y + dy][s*x + dx]`.
pub fn reorg<T: Real>(input: &Tensor<T>, stride: usize) -> Result<Tensor<T>, ShapeError> {
    let (c, h, w) = input.shape();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(ShapeError::new(
            "reorg",
            format!("spatial dims {h}x{w} not divisible by stride {stride}"),
        ));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Tensor::zeros(c * stride * stride, oh, ow);
    for ci in 0..c {
        for dy in 0..stride {
            for dx in 0..stride {
                let oc = ci * stride * stride + dy * stride + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        out.set(oc, y, x, input.get(ci, stride * y + dy, stride * x + dx));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`reorg`] (depth-to-space).
pub fn reorg_inverse<T: Real>(input: &Tensor<T>, stride: usize) -> Result<Tensor<T>, ShapeError> {
    let (oc, oh, ow) = input.shape();
    let s2 = stride * stride;
    if stride == 0 || oc % s2 != 0 {
        return Err(ShapeError::new(
            "reorg_inverse",
            format!("channels {oc} not divisible by stride^2 = {s2}"),
        ));
    }
    let c = oc / s2;
    let mut out = Tensor::zeros(c, oh * stride, ow * stride);
    for ci in 0..c {
        for dy in 0..stride {
            for dx in 0..stride {
                let src = ci * s2 + dy * stride + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        out.set(ci, stride * y + dy, stride * x + dx, input.get(src, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reorg is a permutation, so its gradient is the inverse permutation.
pub fn backward_reorg<T: Real>(grad_out: &Tensor<T>, stride: usize) -> Result<Tensor<T>, ShapeError> {
    reorg_inverse(grad_out, stride)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(ShapeError::new(
            "concat_channels",
            format!("spatial mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(a.channels() + b.channels(), a.height(), a.width(), data)
}

/// Splits the gradient back into the `first_channels` leading channels and the rest.
pub fn backward_concat_channels<T: Real>(
    grad_out: &Tensor<T>,
    first_channels: usize,
) -> Result<(Tensor<T>, Tensor<T>), ShapeError> {
    let (c, h, w) = grad_out.shape();
    if first_channels == 0 || first_channels >= c {
        return Err(ShapeError::new(
            "backward_concat_channels",
            format!("cannot split {c} channels at {first_channels}"),
        ));
    }
    let split = first_channels * h * w;
    let (a, b) = grad_out.data().split_at(split);
    Ok((
        Tensor::new(first_channels, h, w, a.to_vec())?,
        Tensor::new(c - first_channels, h, w, b.to_vec())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_values() {
        let x = Tensor::new(1, 1, 3, vec![1.0f32, -1.0, 0.0]).unwrap();
        let y = leaky_relu(&x, DEFAULT_LEAKY_SLOPE);
        assert_eq!(y.data(), &[1.0, -0.1, 0.0]);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Tensor::new(1, 1, 5, vec![0.0f32, -1000.0, 1000.0, -1e4, 1e4]).unwrap();
        let y = sigmoid(&x);
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(y.data()[2], 1.0);
        assert!(y.all_finite());
    }

    #[test]
    fn reorg_hand_mapping() {
        let x = Tensor::new(1, 2, 2, vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = reorg(&x, 2).unwrap();
        assert_eq!(y.shape(), (4, 1, 1));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn reorg_full_size_shape() {
        let x = Tensor::<f32>::zeros(512, 26, 26);
        assert_eq!(reorg(&x, 2).unwrap().shape(), (2048, 13, 13));
    }

    #[test]
    fn reorg_rejects_odd() {
        assert!(reorg(&Tensor::<f32>::zeros(1, 3, 4), 2).is_err());
    }

    #[test]
    fn concat_shapes_and_copies() {
        let a = Tensor::from_fn(2, 2, 2, |c, y, x| (c * 4 + y * 2 + x) as f32);
        let c = concat_channels(&a, &a).unwrap();
        assert_eq!(c.shape(), (4, 2, 2));
        assert_eq!(&c.data()[..8], a.data());
        assert_eq!(&c.data()[8..], a.data());
        let (g1, g2) = backward_concat_channels(&c, 2).unwrap();
        assert_eq!(g1, a);
        assert_eq!(g2, a);
        let big = concat_channels(&Tensor::<f32>::zeros(2048, 13, 13), &Tensor::zeros(1024, 13, 13)).unwrap();
        assert_eq!(big.shape(), (3072, 13, 13));
    }

    #[test]
    fn concat_spatial_mismatch() {
        let err = concat_channels(&Tensor::<f32>::zeros(1, 2, 2), &Tensor::zeros(1, 2, 3)).unwrap_err();
        assert_eq!(err.op, "concat_channels");
    }

    #[test]
    fn empty_channel_tensor_is_rejected() {
        assert!(Tensor::<f32>::new(0, 13, 13, vec![]).is_err());
    }
}
