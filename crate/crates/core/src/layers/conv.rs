use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 2-D convolution parameters. `weights` is `[out_ch, in_ch, kh, kw]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dweights: Tensor<T>,
    pub dbias: Tensor<T>,
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn pixels(&self) -> usize {
        self.oh * self.ow
    }
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        expect_rank(&weights, 4, "conv weights")?;
        expect_rank(&bias, 1, "conv bias")?;
        if bias.len() != weights.shape()[0] {
            return Err(Error::invalid(format!(
                "conv bias length {} does not match out_ch {}",
                bias.len(),
                weights.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(ConvParams {
            weights,
            bias,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Output spatial extents for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let (ph, pw) = (h + 2 * self.pad, w + 2 * self.pad);
        if kh > ph || kw > pw {
            return Err(Error::invalid(format!(
                "conv kernel {kh}x{kw} larger than padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        let (kh, kw) = self.kernel();
        (n * oh * ow * self.out_channels() * self.in_channels() * kh * kw) as u64
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        expect_rank(x, 4, "conv input")?;
        let s = x.shape();
        if s[1] != self.in_channels() {
            return Err(Error::invalid(format!(
                "conv input has {} channels (dim 1 of {:?}), weights expect in_ch {}",
                s[1],
                s,
                self.in_channels()
            )));
        }
        let (oh, ow) = self.output_hw(s[2], s[3])?;
        let (kh, kw) = self.kernel();
        Ok(Geometry {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            kh,
            kw,
            oh,
            ow,
        })
    }

    /// Unfolds one image into `[c*kh*kw, oh*ow]` columns.
    fn im2col(&self, g: &Geometry, img: &[T], cols: &mut [T]) {
        let pixels = g.pixels();
        for c in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let out = &mut cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &img[(c * g.h + iy as usize) * g.w..][..g.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, g: &Geometry, cols: &[T], img: &mut [T]) {
        let pixels = g.pixels();
        for c in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (c * g.kh + ky) * g.kw + kx;
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * g.h + iy as usize) * g.w..][..g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Cross-correlation of `x: [N, C, H, W]` with the kernel bank.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.geometry(x)?;
        let (patch, pixels, oc) = (g.patch(), g.pixels(), self.out_channels());
        let w = self.weights.data();
        let mut cols = vec![T::zero(); patch * pixels];
        let mut y = vec![T::zero(); g.n * oc * pixels];
        for n in 0..g.n {
            let img = &x.data()[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
            self.im2col(&g, img, &mut cols);
            let yn = &mut y[n * oc * pixels..(n + 1) * oc * pixels];
            for o in 0..oc {
                let yo = &mut yn[o * pixels..(o + 1) * pixels];
                yo.fill(self.bias.data()[o]);
                for k in 0..patch {
                    let wk = w[o * patch + k];
                    let col = &cols[k * pixels..(k + 1) * pixels];
                    for (yv, &cv) in yo.iter_mut().zip(col) {
                        *yv = *yv + wk * cv;
                    }
                }
            }
        }
        Tensor::from_vec(&[g.n, oc, g.oh, g.ow], y)
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
        let g = self.geometry(x)?;
        let (patch, pixels, oc) = (g.patch(), g.pixels(), self.out_channels());
        if dy.shape() != [g.n, oc, g.oh, g.ow] {
            return Err(Error::invalid(format!(
                "conv backward: gradient shape {:?}, expected {:?}",
                dy.shape(),
                [g.n, oc, g.oh, g.ow]
            )));
        }
        let w = self.weights.data();
        let img_len = g.c * g.h * g.w;
        let mut cols = vec![T::zero(); patch * pixels];
        let mut dcols = vec![T::zero(); patch * pixels];
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); oc * patch];
        let mut db = vec![T::zero(); oc];
        for n in 0..g.n {
            self.im2col(&g, &x.data()[n * img_len..(n + 1) * img_len], &mut cols);
            let dyn_ = &dy.data()[n * oc * pixels..(n + 1) * oc * pixels];
            dcols.fill(T::zero());
            for o in 0..oc {
                let dyo = &dyn_[o * pixels..(o + 1) * pixels];
                db[o] = db[o] + dyo.iter().copied().sum();
                for k in 0..patch {
                    let col = &cols[k * pixels..(k + 1) * pixels];
                    let acc = super::dot(dyo, col);
                    dw[o * patch + k] = dw[o * patch + k] + acc;
                    let wk = w[o * patch + k];
                    let dcol = &mut dcols[k * pixels..(k + 1) * pixels];
                    for (d, &gv) in dcol.iter_mut().zip(dyo) {
                        *d = *d + wk * gv;
                    }
                }
            }
            self.col2im(&g, &dcols, &mut dx[n * img_len..(n + 1) * img_len]);
        }
        Ok(ConvGrads {
            dx: Tensor::from_vec(x.shape(), dx)?,
            dweights: Tensor::from_vec(self.weights.shape(), dw)?,
            dbias: Tensor::from_vec(&[oc], db)?,
        })
    }
}

pub fn conv2d<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    p.forward(x)
}

pub fn conv2d_backward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, dy: &Tensor<T>) -> Result<ConvGrads<T>> {
    p.backward(x, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check, dot, random};
    use crate::tensor::Rng;

    /// Direct seven-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, p: &ConvParams<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (kh, kw) = p.kernel();
        let oc = p.out_channels();
        let oh = (h + 2 * p.pad - kh) / p.stride + 1;
        let ow = (w + 2 * p.pad - kw) / p.stride + 1;
        let mut y = Tensor::zeros(&[n, oc, oh, ow]).unwrap();
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = p.bias.data()[o];
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * p.stride + ky) as isize - p.pad as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x.get(&[b, ci, iy as usize, ix as usize]).unwrap()
                                            * p.weights.get(&[o, ci, ky, kx]).unwrap();
                                    }
                                }
                            }
                        }
                        let off = y.offset(&[b, o, oy, ox]).unwrap();
                        y.data_mut()[off] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn all_ones_sums_window() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0f32).unwrap();
        let p = ConvParams::new(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, 0).unwrap();
        let y = p.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = Rng::new(5);
        let x = random(&[2, 1, 4, 5], &mut rng);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, 0).unwrap();
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn channel_mismatch_names_dims() {
        let p = ConvParams::<f32>::new(Tensor::zeros(&[2, 3, 3, 3]).unwrap(), Tensor::zeros(&[2]).unwrap(), 1, 1).unwrap();
        let err = p.forward(&Tensor::zeros(&[1, 4, 8, 8]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("4 channels"), "{err}");
        let p = ConvParams::<f32>::new(Tensor::zeros(&[2, 3, 3, 3]).unwrap(), Tensor::zeros(&[2]).unwrap(), 1, 0).unwrap();
        let err = p.forward(&Tensor::zeros(&[1, 3, 2, 2]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("larger than padded input"), "{err}");
    }

    #[test]
    fn matches_naive_reference() {
        for (seed, stride, pad) in [(1u64, 1usize, 0usize), (2, 1, 1), (3, 2, 1), (4, 2, 0)] {
            let mut rng = Rng::new(seed);
            let x = random(&[2, 3, 7, 6], &mut rng);
            let p = ConvParams::new(random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng), stride, pad).unwrap();
            let a = p.forward(&x).unwrap();
            let b = naive_conv(&x, &p);
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = Rng::new(200 + seed);
            let (stride, pad) = ((seed % 2) as usize + 1, (seed % 3 == 0) as usize);
            let x = random(&[2, 3, 5, 5], &mut rng);
            let p = ConvParams::new(random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng), stride, pad).unwrap();
            let y = p.forward(&x).unwrap();
            let r = random(y.shape(), &mut rng);
            let g = p.backward(&x, &r).unwrap();
            check(|t| dot(&p.forward(t).unwrap(), &r), &x, &g.dx, 1e-5);
            check(
                |t| dot(&ConvParams::new(t.clone(), p.bias.clone(), stride, pad).unwrap().forward(&x).unwrap(), &r),
                &p.weights,
                &g.dweights,
                1e-5,
            );
            check(
                |t| dot(&ConvParams::new(p.weights.clone(), t.clone(), stride, pad).unwrap().forward(&x).unwrap(), &r),
                &p.bias,
                &g.dbias,
                1e-5,
            );
        }
    }
}
