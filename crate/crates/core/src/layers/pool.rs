use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T> {
    pub output: Tensor<T>,
    /// Flat input offset selected for each output cell.
    pub argmax: Vec<usize>,
}

/// Max pooling over `window x window` cells. Ties go to the first cell in
/// row-major order.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<MaxPoolOutput<T>> {
    expect_rank(x, 4, "maxpool input")?;
    if window == 0 || stride == 0 {
        return Err(Error::invalid("maxpool window and stride must be positive"));
    }
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if window > h || window > w {
        return Err(Error::invalid(format!(
            "maxpool window {window} larger than input {h}x{w}"
        )));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let data = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + window {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_vec(&[n, c, oh, ow], out)?,
        argmax,
    })
}

/// Routes each output gradient to the input cell that produced the max.
pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != argmax.len() {
        return Err(Error::invalid(format!(
            "maxpool backward: {} gradients for {} pooled cells",
            dy.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(dx)
}
