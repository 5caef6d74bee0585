//! Region production and labeling: the five-window multi-scale scan used for
//! non-rigid objects, dense grid proposals (or proposals read from a file)
//! for rigid objects, IoU, threshold labeling and minibatch sampling.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Axis-aligned rectangle in image pixels, `[x1, x2) x [y1, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1,
            y1,
            x2,
            y2,
            class_id: None,
            score: None,
        }
    }

    /// Checked constructor: coordinates finite with `x2 > x1`, `y2 > y1`.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox::new(x1, y1, x2, y2);
        b.validate()?;
        Ok(b)
    }

    pub fn with_class(mut self, class_id: usize) -> Self {
        self.class_id = Some(class_id);
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 <= self.x1 || self.y2 <= self.y1 {
            return Err(Error::invalid(format!(
                "box [{}, {}, {}, {}] must have x2 > x1 and y2 > y1",
                self.x1, self.y1, self.x2, self.y2
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
            ..*self
        }
    }

    pub fn same_extent(&self, other: &BBox) -> bool {
        self.x1 == other.x1 && self.y1 == other.y1 && self.x2 == other.x2 && self.y2 == other.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// The whole image plus four corner-anchored windows of `floor(2w/3) x floor(2h/3)`.
pub fn multiscale_windows(width: usize, height: usize) -> Result<Vec<BBox>> {
    if width < 3 || height < 3 {
        return Err(Error::invalid(format!(
            "multi-scale windows need an image of at least 3x3, got {width}x{height}"
        )));
    }
    let (sw, sh) = (2 * width / 3, 2 * height / 3);
    let (w, h) = (width as f64, height as f64);
    let (fw, fh) = (sw as f64, sh as f64);
    let (rx, by) = ((width - sw) as f64, (height - sh) as f64);
    Ok(vec![
        BBox::new(0.0, 0.0, w, h),
        BBox::new(0.0, 0.0, fw, fh),
        BBox::new(rx, 0.0, w, fh),
        BBox::new(0.0, by, fw, h),
        BBox::new(rx, by, w, h),
    ])
}

/// Default scales for [`grid_proposals`].
pub const DEFAULT_PROPOSAL_SCALES: [f64; 5] = [0.9, 0.7, 0.5, 0.3, 0.2];
pub const DEFAULT_PROPOSAL_STRIDE: f64 = 0.25;

/// Dense multi-scale grid of windows standing in for an external proposal
/// generator. For each scale `s` the window is `floor(s*w) x floor(s*h)`,
/// stepped by `stride_frac` of its own size; ordering is scale-major then
/// row-major.
pub fn grid_proposals(width: usize, height: usize, scales: &[f64], stride_frac: f64) -> Result<Vec<BBox>> {
    if scales.is_empty() {
        return Err(Error::invalid("grid_proposals needs at least one scale"));
    }
    if let Some(s) = scales.iter().find(|&&s| !(s > 0.0 && s <= 1.0)) {
        return Err(Error::invalid(format!("proposal scale {s} outside (0, 1]")));
    }
    if !(stride_frac > 0.0 && stride_frac <= 1.0) {
        return Err(Error::invalid(format!("stride fraction {stride_frac} outside (0, 1]")));
    }
    if width == 0 || height == 0 {
        return Err(Error::invalid("grid_proposals needs a non-empty image"));
    }
    let mut boxes = Vec::new();
    for &s in scales {
        let ww = ((s * width as f64).floor() as usize).max(1);
        let wh = ((s * height as f64).floor() as usize).max(1);
        let sx = ((stride_frac * ww as f64).floor() as usize).max(1);
        let sy = ((stride_frac * wh as f64).floor() as usize).max(1);
        for y in (0..=height - wh).step_by(sy) {
            for x in (0..=width - ww).step_by(sx) {
                boxes.push(BBox::new(x as f64, y as f64, (x + ww) as f64, (y + wh) as f64));
            }
        }
    }
    Ok(boxes)
}

/// Proposals read from a text file, keyed by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub by_image: BTreeMap<String, Vec<BBox>>,
    /// Boxes that had at least one coordinate clamped into the image.
    pub clamped: usize,
    /// Boxes dropped because clamping left no area.
    pub dropped: usize,
}

impl ProposalSet {
    pub fn get(&self, image_id: &str) -> Option<&[BBox]> {
        self.by_image.get(image_id).map(Vec::as_slice)
    }

    /// Clamp every box of `image_id` into a `width x height` image.
    pub fn clamp_to(&mut self, image_id: &str, width: usize, height: usize) {
        let Some(boxes) = self.by_image.get_mut(image_id) else {
            return;
        };
        let (w, h) = (width as f64, height as f64);
        let before = boxes.len();
        let mut clamped = 0;
        boxes.retain_mut(|b| {
            let c = BBox {
                x1: b.x1.clamp(0.0, w),
                y1: b.y1.clamp(0.0, h),
                x2: b.x2.clamp(0.0, w),
                y2: b.y2.clamp(0.0, h),
                ..*b
            };
            if !c.same_extent(b) {
                clamped += 1;
            }
            *b = c;
            b.validate().is_ok()
        });
        self.dropped += before - boxes.len();
        self.clamped += clamped;
        if clamped > 0 {
            log::warn!("{clamped} proposal boxes of `{image_id}` clamped to its {width}x{height} bounds");
        }
    }
}

/// Parses `<image_id> <x1> <y1> <x2> <y2>` rows. Blank lines and `#`
/// comments are skipped. Negative coordinates are clamped to zero.
pub fn parse_proposals(text: &str) -> Result<ProposalSet> {
    let mut set = ProposalSet::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 5 fields `<image_id> <x1> <y1> <x2> <y2>`, found {}", fields.len()),
            });
        }
        let mut c = [0f64; 4];
        for (slot, f) in c.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{f}` is not a number"),
            })?;
        }
        let b = BBox::try_new(c[0], c[1], c[2], c[3]).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let clamped = BBox {
            x1: b.x1.max(0.0),
            y1: b.y1.max(0.0),
            ..b
        };
        if !clamped.same_extent(&b) {
            set.clamped += 1;
        }
        if clamped.validate().is_err() {
            set.dropped += 1;
            continue;
        }
        set.by_image.entry(fields[0].to_string()).or_default().push(clamped);
    }
    if set.clamped > 0 {
        log::warn!("{} proposal boxes clamped to image bounds", set.clamped);
    }
    Ok(set)
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<ProposalSet> {
    parse_proposals(&fs::read_to_string(path)?)
}

/// A RoI with its training label (0 = background) and best overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledRoi {
    pub bbox: BBox,
    pub label: usize,
    pub max_iou: f64,
}

impl LabeledRoi {
    pub fn is_foreground(&self) -> bool {
        self.label > 0
    }
}

/// Labels each RoI with the class of its best-overlapping ground-truth box
/// when that overlap reaches `threshold`; ties go to the lowest gt index.
/// Ground-truth boxes without a class count as class 1.
pub fn label_rois(rois: &[BBox], gt: &[BBox], threshold: f64) -> Vec<LabeledRoi> {
    rois.iter()
        .map(|roi| {
            let mut best = (0.0, None);
            for g in gt {
                let o = iou(roi, g);
                if o > best.0 {
                    best = (o, Some(g));
                }
            }
            let (max_iou, arg) = best;
            let label = match arg {
                Some(g) if max_iou >= threshold => g.class_id.unwrap_or(1),
                _ => 0,
            };
            LabeledRoi {
                bbox: *roi,
                label,
                max_iou,
            }
        })
        .collect()
}

fn take_without_replacement<'a>(pool: &mut Vec<&'a LabeledRoi>, n: usize, rng: &mut Rng) -> Vec<&'a LabeledRoi> {
    let n = n.min(pool.len());
    for i in 0..n {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.drain(..n).collect()
}

/// Draws exactly `count` RoIs: up to `round(fg_fraction * count)`
/// foreground, the rest background. A short pool is topped up from the
/// other one; if both run out the remainder is drawn with replacement.
pub fn sample_rois(labeled: &[LabeledRoi], count: usize, fg_fraction: f64, rng: &mut Rng) -> Vec<LabeledRoi> {
    if labeled.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut fg: Vec<&LabeledRoi> = labeled.iter().filter(|r| r.is_foreground()).collect();
    let mut bg: Vec<&LabeledRoi> = labeled.iter().filter(|r| !r.is_foreground()).collect();
    let fg_target = ((fg_fraction.clamp(0.0, 1.0) * count as f64).round() as usize).min(count);

    let mut picked = take_without_replacement(&mut fg, fg_target, rng);
    let bg_picked = take_without_replacement(&mut bg, count - picked.len(), rng);
    let short = count - picked.len() - bg_picked.len();
    picked.extend(take_without_replacement(&mut fg, short, rng));
    picked.extend(bg_picked);

    let mut out: Vec<LabeledRoi> = picked.into_iter().copied().collect();
    while out.len() < count {
        out.push(labeled[rng.below(labeled.len())]);
    }
    out
}

/// Greedy non-maximum suppression. Returns indices of kept boxes in
/// descending score order (ties keep input order).
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len().min(scores.len())).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::tensor::Rng;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn windows_for_30x30() {
        let w = multiscale_windows(30, 30).unwrap();
        let coords: Vec<[f64; 4]> = w.iter().map(BBox::coords).collect();
        assert_eq!(
            coords,
            vec![
                [0.0, 0.0, 30.0, 30.0],
                [0.0, 0.0, 20.0, 20.0],
                [10.0, 0.0, 30.0, 20.0],
                [0.0, 10.0, 20.0, 30.0],
                [10.0, 10.0, 30.0, 30.0],
            ]
        );
    }

    #[test]
    fn windows_for_square_image_are_symmetric() {
        let w = multiscale_windows(47, 47).unwrap();
        for sub in &w[1..] {
            assert_eq!((sub.width(), sub.height()), (w[1].width(), w[1].height()));
        }
        // reflection across the main diagonal swaps the two off-diagonal corners
        let t = |b: &BBox| [b.y1, b.x1, b.y2, b.x2];
        assert_eq!(t(&w[2]), w[3].coords());
        assert_eq!(t(&w[1]), w[1].coords());
        assert_eq!(t(&w[4]), w[4].coords());
        // anti-diagonal reflection swaps the top-left and bottom-right windows
        let n = 47.0;
        let a = |b: &BBox| [n - b.y2, n - b.x2, n - b.y1, n - b.x1];
        assert_eq!(a(&w[1]), w[4].coords());
    }

    #[test]
    fn windows_at_minimum_size() {
        let w = multiscale_windows(3, 3).unwrap();
        assert_eq!(w.len(), 5);
        for sub in &w[1..] {
            assert_eq!((sub.width(), sub.height()), (2.0, 2.0));
        }
        assert!(w.iter().all(|x| x.validate().is_ok()));
        assert!(multiscale_windows(2, 10).is_err());
    }

    #[test]
    fn grid_whole_image_at_unit_scale() {
        for stride in [0.1, 0.5, 1.0] {
            let g = grid_proposals(37, 23, &[1.0], stride).unwrap();
            assert_eq!(g.len(), 1);
            assert_eq!(g[0].coords(), [0.0, 0.0, 37.0, 23.0]);
        }
    }

    #[test]
    fn grid_enumeration() {
        let g = grid_proposals(100, 100, &[0.5], 0.5).unwrap();
        assert_eq!(g.len(), 9);
        let offs: Vec<(f64, f64)> = g.iter().map(|b| (b.x1, b.y1)).collect();
        let mut expect = vec![];
        for y in [0.0, 25.0, 50.0] {
            for x in [0.0, 25.0, 50.0] {
                expect.push((x, y));
            }
        }
        assert_eq!(offs, expect);
        assert!(g.iter().all(|b| b.width() == 50.0 && b.height() == 50.0));
    }

    #[test]
    fn grid_default_count() {
        let g = grid_proposals(480, 320, &DEFAULT_PROPOSAL_SCALES, DEFAULT_PROPOSAL_STRIDE).unwrap();
        // 1 + 4 + 25 + 100 + 289 windows per scale
        assert_eq!(g.len(), 419);
        assert!(grid_proposals(10, 10, &[], 0.5).is_err());
        assert!(grid_proposals(10, 10, &[1.5], 0.5).is_err());
    }

    #[test]
    fn proposal_file_rows() {
        let set = parse_proposals("img1 10 10 50 50\n").unwrap();
        assert_eq!(set.get("img1").unwrap(), &[b(10.0, 10.0, 50.0, 50.0)]);
        assert!(parse_proposals("").unwrap().by_image.is_empty());
        let set = parse_proposals("# header\n\na 0 0 1 1 # trailing\na -3 0 4 4\n").unwrap();
        assert_eq!(set.get("a").unwrap().len(), 2);
        assert_eq!(set.clamped, 1);
    }

    #[test]
    fn proposal_file_errors_name_the_line() {
        match parse_proposals("a 0 0 1 1\nb 5 0 5 9\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_proposals("a 0 0 x 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_proposals("a 0 0 1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn proposal_clamp_to_image() {
        let mut set = parse_proposals("a 0 0 80 40\na 70 0 90 10\n").unwrap();
        set.clamp_to("a", 64, 64);
        assert_eq!(set.get("a").unwrap(), &[b(0.0, 0.0, 64.0, 40.0)]);
        assert_eq!((set.clamped, set.dropped), (2, 1));
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn labeling_examples() {
        let gt = [b(0.0, 0.0, 10.0, 10.0).with_class(2)];
        let l = label_rois(&[b(0.0, 0.0, 10.0, 10.0)], &gt, 0.5);
        assert_eq!((l[0].label, l[0].max_iou), (2, 1.0));

        let l = label_rois(&[b(0.0, 0.0, 10.0, 10.0)], &[], 0.5);
        assert_eq!((l[0].label, l[0].max_iou), (0, 0.0));

        let roi = [b(5.0, 0.0, 15.0, 10.0)];
        assert_eq!(label_rois(&roi, &gt, 0.5)[0].label, 0);
        assert_eq!(label_rois(&roi, &gt, 0.2)[0].label, 2);
    }

    #[test]
    fn labeling_ties_prefer_lowest_index() {
        let gt = [b(0.0, 0.0, 10.0, 10.0).with_class(3), b(0.0, 0.0, 10.0, 10.0).with_class(1)];
        assert_eq!(label_rois(&[b(0.0, 0.0, 10.0, 10.0)], &gt, 0.5)[0].label, 3);
    }

    fn pool(fg: usize, bg: usize) -> Vec<LabeledRoi> {
        (0..fg + bg)
            .map(|i| LabeledRoi {
                bbox: b(i as f64, 0.0, i as f64 + 1.0, 1.0),
                label: usize::from(i < fg),
                max_iou: if i < fg { 0.7 } else { 0.1 },
            })
            .collect()
    }

    #[test]
    fn sampling_quota() {
        let s = sample_rois(&pool(100, 500), 64, 0.25, &mut Rng::new(1));
        assert_eq!(s.len(), 64);
        assert_eq!(s.iter().filter(|r| r.is_foreground()).count(), 16);
        // without replacement: distinct boxes
        let mut xs: Vec<i64> = s.iter().map(|r| r.bbox.x1 as i64).collect();
        xs.sort();
        xs.dedup();
        assert_eq!(xs.len(), 64);
    }

    #[test]
    fn sampling_fill_rules() {
        let s = sample_rois(&pool(0, 200), 64, 0.25, &mut Rng::new(2));
        assert_eq!(s.len(), 64);
        assert!(s.iter().all(|r| !r.is_foreground()));

        let s = sample_rois(&pool(30, 10), 64, 0.25, &mut Rng::new(2));
        assert_eq!(s.len(), 64);
        assert!(s.iter().filter(|r| r.is_foreground()).count() >= 30);

        let s = sample_rois(&pool(2, 8), 64, 0.25, &mut Rng::new(3));
        assert_eq!(s.len(), 64);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = pool(40, 300);
        assert_eq!(sample_rois(&p, 64, 0.25, &mut Rng::new(5)), sample_rois(&p, 64, 0.25, &mut Rng::new(5)));
    }

    #[test]
    fn nms_suppresses_overlaps() {
        let boxes = [b(0.0, 0.0, 10.0, 10.0), b(1.0, 0.0, 11.0, 10.0), b(20.0, 20.0, 30.0, 30.0)];
        assert_eq!(nms(&boxes, &[0.8, 0.9, 0.5], 0.3), vec![1, 2]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0i32..50, 0i32..50, 1i32..30, 1i32..30)
            .prop_map(|(x, y, w, h)| b(x as f64, y as f64, (x + w) as f64, (y + h) as f64))
    }

    proptest! {
        #[test]
        fn iou_properties(a in arb_box(), c in arb_box(), dx in -20i32..20, dy in -20i32..20) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert_eq!(v == 1.0, a.same_extent(&c));
            let moved = iou(&a.translate(dx as f64, dy as f64), &c.translate(dx as f64, dy as f64));
            prop_assert!((moved - v).abs() < 1e-12);
        }

        #[test]
        fn windows_structure(w in 3usize..400, h in 3usize..400) {
            let wins = multiscale_windows(w, h).unwrap();
            prop_assert_eq!(wins.len(), 5);
            for sub in &wins[1..] {
                prop_assert!(wins[0].contains(sub) && !sub.same_extent(&wins[0]));
            }
        }

        #[test]
        fn labeling_monotone(rois in prop::collection::vec(arb_box(), 1..10),
                             gt in prop::collection::vec((arb_box(), 1usize..4), 0..5),
                             t1 in 0.05f64..0.9, dt in 0.0f64..0.5) {
            let gt: Vec<BBox> = gt.into_iter().map(|(g, c)| g.with_class(c)).collect();
            let t2 = (t1 + dt).min(1.0);
            let lo = label_rois(&rois, &gt, t1);
            let hi = label_rois(&rois, &gt, t2);
            for (a, c) in lo.iter().zip(&hi) {
                if c.is_foreground() {
                    prop_assert_eq!(a.label, c.label);
                }
            }
        }

        #[test]
        fn sample_length(fg in 0usize..50, bg in 0usize..50, count in 1usize..100, frac in 0.0f64..1.0, seed in any::<u64>()) {
            prop_assume!(fg + bg > 0);
            prop_assert_eq!(sample_rois(&pool(fg, bg), count, frac, &mut Rng::new(seed)).len(), count);
        }
    }
}
