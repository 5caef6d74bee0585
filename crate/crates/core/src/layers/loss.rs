use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct SoftmaxLoss<T> {
    /// Mean negative log-likelihood over rows.
    pub loss: T,
    pub dlogits: Tensor<T>,
}

/// Row-wise softmax of a `[R, K]` tensor, max-subtracted.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 2, "softmax input")?;
    let k = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_vec(logits.shape(), out)
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxLoss<T>> {
    expect_rank(logits, 2, "softmax_cross_entropy logits")?;
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != rows {
        return Err(Error::invalid(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if let Some((row, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(Error::invalid(format!(
            "label {l} at row {row} out of range for {k} classes"
        )));
    }
    let inv_rows = T::one() / T::from_f64(rows as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let log_z = z.ln();
        total = total + (log_z - (row[label] - m));
        for (j, &v) in row.iter().enumerate() {
            let p = (v - m - log_z).exp();
            let target = if j == label { T::one() } else { T::zero() };
            grad.push((p - target) * inv_rows);
        }
    }
    Ok(SoftmaxLoss {
        loss: total * inv_rows,
        dlogits: Tensor::from_vec(logits.shape(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check, random};
    use crate::tensor::Rng;

    #[test]
    fn uniform_logits() {
        let l = Tensor::from_vec(&[1, 2], vec![0.0f64, 0.0]).unwrap();
        let out = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let l = Tensor::from_vec(&[1, 2], vec![100.0f32, 0.0]).unwrap();
        let out = softmax_cross_entropy(&l, &[0]).unwrap();
        assert!(out.loss.is_finite() && out.loss < 1e-6);
        assert!(out.dlogits.all_finite());
    }

    #[test]
    fn label_out_of_range() {
        let l = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        assert!(matches!(softmax_cross_entropy(&l, &[0, 3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = Rng::new(1);
        let p = softmax_rows(&random(&[4, 5], &mut rng)).unwrap();
        for row in p.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(400 + seed);
            let logits = random(&[5, 3], &mut rng);
            let labels: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
            let out = softmax_cross_entropy(&logits, &labels).unwrap();
            check(|t| softmax_cross_entropy(t, &labels).unwrap().loss, &logits, &out.dlogits, 1e-6);
        }
    }
}
