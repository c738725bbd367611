use super::{Real, ShapeError, Tensor};

/// Index into the 2x2 window of the first (row-major) maximum.
#[inline]
fn argmax_window<T: Real>(input: &Tensor<T>, c: usize, y: usize, x: usize) -> (usize, usize) {
    let mut best = (2 * y, 2 * x);
    let mut best_v = input.get(c, best.0, best.1);
    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
        let (yy, xx) = (2 * y + dy, 2 * x + dx);
        let v = input.get(c, yy, xx);
        if v > best_v {
            best_v = v;
            best = (yy, xx);
        }
    }
    best
}

fn check_even<T: Real>(op: &'static str, input: &Tensor<T>) -> Result<(), ShapeError> {
    if !input.height().is_multiple_of(2) || !input.width().is_multiple_of(2) {
        return Err(ShapeError::new(
            op,
            format!("spatial dims {}x{} must be even", input.height(), input.width()),
        ));
    }
    Ok(())
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    check_even("maxpool2", input)?;
    let (c, h, w) = input.shape();
    let mut out = Tensor::zeros(c, h / 2, w / 2);
    for ci in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let (yy, xx) = argmax_window(input, ci, y, x);
                out.set(ci, y, x, input.get(ci, yy, xx));
            }
        }
    }
    Ok(out)
}

/// Routes each output gradient to the first maximum of its window.
pub fn backward_maxpool2<T: Real>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>, ShapeError> {
    check_even("backward_maxpool2", input)?;
    let (c, h, w) = input.shape();
    grad_out.expect_shape("backward_maxpool2", "grad_out", (c, h / 2, w / 2))?;
    let mut grad_in = Tensor::zeros(c, h, w);
    for ci in 0..c {
        for y in 0..h / 2 {
            for x in 0..w / 2 {
                let (yy, xx) = argmax_window(input, ci, y, x);
                grad_in.set(ci, yy, xx, grad_out.get(ci, y, x));
            }
        }
    }
    Ok(grad_in)
}
