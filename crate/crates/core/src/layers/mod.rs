//! Forward and backward passes for every layer of the network.
//!
//! Each layer is a pure function of its inputs and parameters. Backward
//! passes take the forward input (or the recorded argmax routing) instead of
//! hidden state, so callers decide what to cache.

mod activation;
mod conv;
mod fc;
mod loss;
mod pool;
mod roi_pool;

pub use activation::{relu, relu_backward};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use fc::{fully_connected, fully_connected_backward, FcGrads, FcParams};
pub use loss::{softmax_cross_entropy, softmax_rows, SoftmaxLoss};
pub use pool::{maxpool2d, maxpool2d_backward, MaxPoolOutput};
pub use roi_pool::{roi_feature_window, roi_pool, roi_pool_backward, BatchRoi, RoiPoolOutput, RoiPoolSpec};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::invalid(format!(
            "{what}: expected a rank-{rank} tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::gradcheck::{finite_diff_check, GradCheckReport};
    use crate::tensor::{gaussian_init, Rng, Tensor};

    pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        gaussian_init(shape, 0.0, 1.0, rng).unwrap()
    }

    /// Projects a layer output onto a fixed random direction so a
    /// tensor-valued map becomes a scalar objective.
    pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    pub fn check(
        f: impl FnMut(&Tensor<f64>) -> f64,
        x: &Tensor<f64>,
        grad: &Tensor<f64>,
        tol: f64,
    ) -> GradCheckReport {
        let r = finite_diff_check(f, x, grad, 1e-6, tol).unwrap();
        assert!(r.pass, "gradient check failed: {r:?}");
        r
    }
}
