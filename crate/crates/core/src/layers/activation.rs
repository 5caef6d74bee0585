use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward input was strictly positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != dy.shape() {
        return Err(Error::invalid(format!(
            "relu backward: input shape {:?} vs gradient shape {:?}",
            x.shape(),
            dy.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check, dot, random};
    use crate::tensor::Rng;

    #[test]
    fn clamps_negatives() {
        let x = Tensor::from_vec(&[3], vec![-1.0f32, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn positive_input_is_identity() {
        let x = Tensor::from_vec(&[4], vec![0.5f64, 1.0, 3.0, 1e-3]).unwrap();
        assert_eq!(relu(&x), x);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut x = random(&[2, 3, 4], &mut rng);
            // stay away from the kink
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v = 0.5;
                }
            }
            let r = random(&[2, 3, 4], &mut rng);
            let grad = relu_backward(&x, &r).unwrap();
            check(|t| dot(&relu(t), &r), &x, &grad, 1e-5);
        }
    }
}
