use serde::{Deserialize, Serialize};

use super::expect_rank;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pooled grid size and the image-to-feature-map scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiPoolSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub spatial_scale: f64,
}

impl RoiPoolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.out_h == 0 || self.out_w == 0 {
            return Err(Error::invalid("RoI pooled grid must be at least 1x1"));
        }
        if !(self.spatial_scale > 0.0 && self.spatial_scale <= 1.0) {
            return Err(Error::invalid(format!(
                "spatial_scale must be in (0, 1], got {}",
                self.spatial_scale
            )));
        }
        Ok(())
    }
}

/// A region in image pixel coordinates tied to one image of the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchRoi {
    pub batch_idx: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BatchRoi {
    pub fn new(batch_idx: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BatchRoi {
            batch_idx,
            x1,
            y1,
            x2,
            y2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoiPoolOutput<T> {
    /// `[R, C, out_h, out_w]`.
    pub output: Tensor<T>,
    /// Flat feature-map offset of the max for each output cell, `None` for
    /// an empty bin.
    pub argmax: Vec<Option<usize>>,
}

/// Maps one image-space extent onto feature cells: start by floor, end by
/// ceil, clamped to the map and never narrower than one cell. Returns a
/// half-open `[start, end)` range.
fn map_extent(lo: f64, hi: f64, scale: f64, extent: usize) -> (usize, usize) {
    let start = ((lo * scale).floor().max(0.0) as usize).min(extent - 1);
    let end = ((hi * scale).ceil().max(0.0) as usize).min(extent).max(start + 1);
    (start, end)
}

/// Feature-map window `(y_start, y_end, x_start, x_end)`, half-open, that
/// a RoI pools over.
pub fn roi_feature_window(roi: &BatchRoi, spatial_scale: f64, feat_h: usize, feat_w: usize) -> (usize, usize, usize, usize) {
    let (y0, y1) = map_extent(roi.y1, roi.y2, spatial_scale, feat_h);
    let (x0, x1) = map_extent(roi.x1, roi.x2, spatial_scale, feat_w);
    (y0, y1, x0, x1)
}

/// Bin `i` of `bins` over a span of `len` cells: `[floor(i*len/bins), ceil((i+1)*len/bins))`.
#[inline]
fn bin_range(i: usize, bins: usize, len: usize) -> (usize, usize) {
    let start = i * len / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end.min(len))
}

fn check_inputs<T: Scalar>(feat: &Tensor<T>, rois: &[BatchRoi], spec: &RoiPoolSpec) -> Result<()> {
    expect_rank(feat, 4, "roi_pool feature map")?;
    spec.validate()?;
    if rois.is_empty() {
        return Err(Error::invalid("roi_pool needs at least one RoI"));
    }
    let n = feat.shape()[0];
    for (r, roi) in rois.iter().enumerate() {
        if roi.batch_idx >= n {
            return Err(Error::invalid(format!(
                "RoI {r} has batch_idx {} but the batch holds {n} images",
                roi.batch_idx
            )));
        }
        if ![roi.x1, roi.y1, roi.x2, roi.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("RoI {r} has non-finite coordinates")));
        }
    }
    Ok(())
}

/// Adaptive max pooling of each RoI onto a fixed `out_h x out_w` grid.
pub fn roi_pool<T: Scalar>(feat: &Tensor<T>, rois: &[BatchRoi], spec: &RoiPoolSpec) -> Result<RoiPoolOutput<T>> {
    check_inputs(feat, rois, spec)?;
    let s = feat.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let (oh, ow) = (spec.out_h, spec.out_w);
    let data = feat.data();
    let mut out = Vec::with_capacity(rois.len() * c * oh * ow);
    let mut argmax = Vec::with_capacity(rois.len() * c * oh * ow);
    for roi in rois {
        let (ry0, ry1, rx0, rx1) = roi_feature_window(roi, spec.spatial_scale, h, w);
        let (rh, rw) = (ry1 - ry0, rx1 - rx0);
        for ch in 0..c {
            let plane = (roi.batch_idx * c + ch) * h * w;
            for by in 0..oh {
                let (y0, y1) = bin_range(by, oh, rh);
                for bx in 0..ow {
                    let (x0, x1) = bin_range(bx, ow, rw);
                    let mut best: Option<usize> = None;
                    for y in ry0 + y0..ry0 + y1 {
                        let row = plane + y * w;
                        for idx in row + rx0 + x0..row + rx0 + x1 {
                            if best.is_none_or(|b| data[idx] > data[b]) {
                                best = Some(idx);
                            }
                        }
                    }
                    out.push(best.map_or(T::zero(), |b| data[b]));
                    argmax.push(best);
                }
            }
        }
    }
    Ok(RoiPoolOutput {
        output: Tensor::from_vec(&[rois.len(), c, oh, ow], out)?,
        argmax,
    })
}

/// Scatters pooled gradients back to the argmax cells of the feature map.
pub fn roi_pool_backward<T: Scalar>(feat_shape: &[usize], argmax: &[Option<usize>], dy: &Tensor<T>) -> Result<Tensor<T>> {
    if dy.len() != argmax.len() {
        return Err(Error::invalid(format!(
            "roi_pool backward: {} gradients for {} pooled cells",
            dy.len(),
            argmax.len()
        )));
    }
    let mut dfeat = Tensor::zeros(feat_shape)?;
    let d = dfeat.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        if let Some(i) = idx {
            d[i] = d[i] + g;
        }
    }
    Ok(dfeat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{check, dot, random};
    use crate::tensor::Rng;

    /// Brute-force reference: scans every feature cell of the image and keeps
    /// those whose centre-free integer coordinate falls inside the bin.
    fn oracle(feat: &Tensor<f64>, roi: &BatchRoi, spec: &RoiPoolSpec) -> Vec<f64> {
        let s = feat.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let sx1 = ((roi.x1 * spec.spatial_scale).floor() as i64).clamp(0, w as i64 - 1);
        let sy1 = ((roi.y1 * spec.spatial_scale).floor() as i64).clamp(0, h as i64 - 1);
        let sx2 = ((roi.x2 * spec.spatial_scale).ceil() as i64).clamp(sx1 + 1, w as i64).max(sx1 + 1);
        let sy2 = ((roi.y2 * spec.spatial_scale).ceil() as i64).clamp(sy1 + 1, h as i64).max(sy1 + 1);
        let (rh, rw) = ((sy2 - sy1) as f64, (sx2 - sx1) as f64);
        let mut out = vec![];
        for ch in 0..c {
            for by in 0..spec.out_h {
                for bx in 0..spec.out_w {
                    let ylo = sy1 + (by as f64 * rh / spec.out_h as f64).floor() as i64;
                    let yhi = sy1 + ((by + 1) as f64 * rh / spec.out_h as f64).ceil() as i64;
                    let xlo = sx1 + (bx as f64 * rw / spec.out_w as f64).floor() as i64;
                    let xhi = sx1 + ((bx + 1) as f64 * rw / spec.out_w as f64).ceil() as i64;
                    let mut m = f64::NEG_INFINITY;
                    for y in 0..h as i64 {
                        for x in 0..w as i64 {
                            if y >= ylo && y < yhi && x >= xlo && x < xhi {
                                m = m.max(feat.get(&[roi.batch_idx, ch, y as usize, x as usize]).unwrap());
                            }
                        }
                    }
                    out.push(if m == f64::NEG_INFINITY { 0.0 } else { m });
                }
            }
        }
        out
    }

    fn random_roi(rng: &mut Rng, n: usize, img_h: f64, img_w: f64) -> BatchRoi {
        let x1 = rng.uniform(0.0, img_w - 1.0).floor();
        let y1 = rng.uniform(0.0, img_h - 1.0).floor();
        let x2 = rng.uniform(x1 + 1.0, img_w).ceil();
        let y2 = rng.uniform(y1 + 1.0, img_h).ceil();
        BatchRoi::new(rng.below(n), x1, y1, x2, y2)
    }

    #[test]
    fn quadrant_maxima() {
        let feat = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let spec = RoiPoolSpec { out_h: 2, out_w: 2, spatial_scale: 1.0 };
        let out = roi_pool(&feat, &[BatchRoi::new(0, 0.0, 0.0, 4.0, 4.0)], &spec).unwrap();
        assert_eq!(out.output.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn identity_binning() {
        let mut rng = Rng::new(7);
        let feat = random(&[1, 3, 5, 4], &mut rng);
        let spec = RoiPoolSpec { out_h: 5, out_w: 4, spatial_scale: 1.0 };
        let out = roi_pool(&feat, &[BatchRoi::new(0, 0.0, 0.0, 4.0, 5.0)], &spec).unwrap();
        assert_eq!(out.output.data(), feat.data());
    }

    #[test]
    fn degenerate_roi_pools_one_cell() {
        let feat = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let spec = RoiPoolSpec { out_h: 2, out_w: 2, spatial_scale: 0.5 };
        let out = roi_pool(&feat, &[BatchRoi::new(0, 3.0, 3.0, 3.0, 3.0)], &spec).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn bad_batch_index() {
        let feat = Tensor::<f32>::zeros(&[2, 1, 4, 4]).unwrap();
        let spec = RoiPoolSpec { out_h: 2, out_w: 2, spatial_scale: 1.0 };
        assert!(matches!(
            roi_pool(&feat, &[BatchRoi::new(2, 0.0, 0.0, 2.0, 2.0)], &spec),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn forward_equals_oracle_and_gradient_checks() {
        for seed in 0..20 {
            let mut rng = Rng::new(500 + seed);
            let feat = random(&[2, 2, 6, 7], &mut rng);
            let spec = RoiPoolSpec { out_h: 3, out_w: 2, spatial_scale: 0.5 };
            let rois: Vec<BatchRoi> = (0..10).map(|_| random_roi(&mut rng, 2, 12.0, 14.0)).collect();
            let out = roi_pool(&feat, &rois, &spec).unwrap();
            let expect: Vec<f64> = rois.iter().flat_map(|r| oracle(&feat, r, &spec)).collect();
            assert_eq!(out.output.data(), &expect[..]);

            let r = random(out.output.shape(), &mut rng);
            let dfeat = roi_pool_backward(feat.shape(), &out.argmax, &r).unwrap();
            check(|t| dot(&roi_pool(t, &rois, &spec).unwrap().output, &r), &feat, &dfeat, 1e-5);
            assert!((dfeat.sum() - r.sum()).abs() < 1e-10, "gradient mass not conserved");
        }
    }
}
