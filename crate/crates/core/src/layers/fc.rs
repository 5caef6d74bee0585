use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Fully-connected layer parameters: `weights` is `[out_dim, in_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct FcGrads<T> {
    pub dx: Tensor<T>,
    pub dweights: Tensor<T>,
    pub dbias: Tensor<T>,
}

impl<T: Scalar> FcParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        expect_rank(&weights, 2, "fc weights")?;
        expect_rank(&bias, 1, "fc bias")?;
        if bias.len() != weights.shape()[0] {
            return Err(Error::invalid(format!(
                "fc bias length {} does not match out_dim {}",
                bias.len(),
                weights.shape()[0]
            )));
        }
        Ok(FcParams { weights, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Multiply-accumulates for a batch of `rows` inputs.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim() * self.out_dim()) as u64
    }

    fn rows_of(&self, x: &Tensor<T>) -> Result<usize> {
        let rows = x.shape()[0];
        let flat = x.len() / rows;
        if flat != self.in_dim() {
            return Err(Error::invalid(format!(
                "fc input {:?} flattens to {flat} features, layer expects in_dim {}",
                x.shape(),
                self.in_dim()
            )));
        }
        Ok(rows)
    }

    /// `y = x W^T + b`, with `x` flattened to `[N, in_dim]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.rows_of(x)?;
        let (ind, outd) = (self.in_dim(), self.out_dim());
        let w = self.weights.data();
        let b = self.bias.data();
        let mut y = Vec::with_capacity(rows * outd);
        for xr in x.data().chunks_exact(ind) {
            for o in 0..outd {
                let wr = &w[o * ind..(o + 1) * ind];
                let acc = super::dot(xr, wr);
                y.push(acc + b[o]);
            }
        }
        Tensor::from_vec(&[rows, outd], y)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<FcGrads<T>> {
        let rows = self.rows_of(x)?;
        let (ind, outd) = (self.in_dim(), self.out_dim());
        if dy.shape() != [rows, outd] {
            return Err(Error::invalid(format!(
                "fc backward: gradient shape {:?}, expected [{rows}, {outd}]",
                dy.shape()
            )));
        }
        let w = self.weights.data();
        let mut dx = vec![T::zero(); rows * ind];
        let mut dw = vec![T::zero(); outd * ind];
        let mut db = vec![T::zero(); outd];
        for (n, xr) in x.data().chunks_exact(ind).enumerate() {
            let dyr = &dy.data()[n * outd..(n + 1) * outd];
            let dxr = &mut dx[n * ind..(n + 1) * ind];
            for (o, &g) in dyr.iter().enumerate() {
                if g == T::zero() {
                    continue;
                }
                db[o] = db[o] + g;
                let wr = &w[o * ind..(o + 1) * ind];
                let dwr = &mut dw[o * ind..(o + 1) * ind];
                for i in 0..ind {
                    dxr[i] = dxr[i] + g * wr[i];
                    dwr[i] = dwr[i] + g * xr[i];
                }
            }
        }
        Ok(FcGrads {
            dx: Tensor::from_vec(x.shape(), dx)?,
            dweights: Tensor::from_vec(&[outd, ind], dw)?,
            dbias: Tensor::from_vec(&[outd], db)?,
        })
    }
}

pub fn fully_connected<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>) -> Result<Tensor<T>> {
    p.forward(x)
}

pub fn fully_connected_backward<T: Scalar>(x: &Tensor<T>, p: &FcParams<T>, dy: &Tensor<T>) -> Result<FcGrads<T>> {
    p.backward(x, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check, dot, random};
    use crate::tensor::Rng;

    #[test]
    fn identity_weights() {
        let w = Tensor::from_vec(&[3, 3], vec![1.0f32, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let p = FcParams::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn hand_product() {
        let w = Tensor::from_vec(&[2, 2], vec![1.0f64, 1.0, 0.0, 1.0]).unwrap();
        let p = FcParams::new(w, Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[3.0, 2.0]);
    }

    #[test]
    fn dim_mismatch() {
        let p = FcParams::new(Tensor::<f32>::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = Tensor::zeros(&[1, 4]).unwrap();
        assert!(matches!(p.forward(&x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = Rng::new(100 + seed);
            let (n, ind, outd) = (1 + seed as usize % 3, 2 + seed as usize % 5, 1 + seed as usize % 4);
            let x = random(&[n, ind], &mut rng);
            let p = FcParams::new(random(&[outd, ind], &mut rng), random(&[outd], &mut rng)).unwrap();
            let r = random(&[n, outd], &mut rng);
            let g = p.backward(&x, &r).unwrap();
            check(|t| dot(&p.forward(t).unwrap(), &r), &x, &g.dx, 1e-5);
            check(
                |t| dot(&FcParams::new(t.clone(), p.bias.clone()).unwrap().forward(&x).unwrap(), &r),
                &p.weights,
                &g.dweights,
                1e-5,
            );
            check(
                |t| dot(&FcParams::new(p.weights.clone(), t.clone()).unwrap().forward(&x).unwrap(), &r),
                &p.bias,
                &g.dbias,
                1e-5,
            );
        }
    }
}
