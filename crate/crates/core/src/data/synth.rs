//! Procedural stand-in for a crowd-event dataset. Malicious scenes contain
//! fire or smoke plus helmets or police; benign scenes contain cars or
//! police and never fire or smoke. Every ground-truth box is the tight
//! bound of the pixels drawn for that object.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::imageio::write_image;
use super::manifest::{Category, DatasetManifest, EventLabel, ManifestEntry};
use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Number of images; must be even so the two events split exactly.
    pub count: usize,
    /// Inclusive range of image widths and heights.
    pub min_size: usize,
    pub max_size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 20,
            min_size: 64,
            max_size: 64,
            noise: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, min_input: usize) -> Result<()> {
        if self.count == 0 || !self.count.is_multiple_of(2) {
            return Err(Error::config(format!(
                "synthetic image count must be even and positive for a balanced split, got {}",
                self.count
            )));
        }
        if self.min_size > self.max_size {
            return Err(Error::config("synthetic min_size exceeds max_size"));
        }
        if self.min_size < min_input {
            return Err(Error::config(format!(
                "synthetic image size {} is below the network minimum input size {min_input}",
                self.min_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("synthetic noise must be a non-negative number"));
        }
        Ok(())
    }
}

/// Float RGB canvas, channel-major like the tensors it becomes.
struct Canvas {
    w: usize,
    h: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.w + x];
        for c in 0..3 {
            p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn into_tensor(self) -> Tensor<f32> {
        let (w, h) = (self.w, self.h);
        let mut data = vec![0.0f32; 3 * w * h];
        for (i, p) in self.px.iter().enumerate() {
            for c in 0..3 {
                // Quantized to 8 bits so the tensor equals its decoded image file.
                data[c * w * h + i] = ((p[c].clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
            }
        }
        Tensor::from_vec(&[3, h, w], data).expect("shape matches buffer")
    }
}

/// A shape mask in local coordinates, painted by a color function.
struct Shape {
    w: usize,
    h: usize,
    mask: Vec<bool>,
}

impl Shape {
    fn new(w: usize, h: usize, inside: impl Fn(f64, f64) -> bool) -> Self {
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                mask.push(inside(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        Shape { w, h, mask }
    }

    /// Tight bound `(x1, y1, x2, y2)` of the set pixels, in local coordinates.
    fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.mask[y * self.w + x] {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1)),
                    });
                }
            }
        }
        b
    }
}

fn disc(cx: f64, cy: f64, r: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r
}

fn blob(rng: &mut Rng, w: usize, h: usize) -> Shape {
    let n = rng.range_inclusive(3, 6);
    let (wf, hf) = (w as f64, h as f64);
    let circles: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let r = rng.uniform(0.18, 0.32) * wf.min(hf);
            (rng.uniform(r, wf - r), rng.uniform(r, hf - r), r)
        })
        .collect();
    Shape::new(w, h, |x, y| circles.iter().any(|&(cx, cy, r)| disc(cx, cy, r)(x, y)))
}

/// Per-pixel colour and opacity of an object, given `(x, y, w, h)`.
type Painter = Box<dyn Fn(usize, usize, usize, usize) -> ([f64; 3], f64)>;

/// Renders one object at `(ox, oy)` and returns its local mask.
fn object_shape(cat: Category, rng: &mut Rng, scale: f64) -> (Shape, Painter) {
    let s = |lo: f64, hi: f64, rng: &mut Rng| ((rng.uniform(lo, hi) * scale).round() as usize).max(3);
    match cat {
        Category::Police => {
            let (w, h) = (s(9.0, 13.0, rng), s(15.0, 21.0, rng));
            let band = (h as f64 * rng.uniform(0.35, 0.5)) as usize;
            let shape = Shape::new(w, h, |_, _| true);
            let paint = move |_x: usize, y: usize, _w: usize, _h: usize| {
                if y >= band && y < band + 2 {
                    ([0.95, 0.95, 0.95], 1.0)
                } else {
                    ([0.08, 0.12, 0.45], 1.0)
                }
            };
            (shape, Box::new(paint))
        }
        Category::Helmet => {
            let r = s(5.0, 8.0, rng) as f64;
            let (w, h) = ((2.0 * r) as usize, r as usize + 2);
            let shape = Shape::new(w, h, move |x, y| y >= r + 0.5 || disc(r, r + 0.5, r)(x, y));
            let paint = move |_x: usize, y: usize, _w: usize, h: usize| {
                if y + 2 >= h {
                    ([0.55, 0.45, 0.05], 1.0)
                } else {
                    ([0.98, 0.85, 0.1], 1.0)
                }
            };
            (shape, Box::new(paint))
        }
        Category::Car => {
            let (w, body_h) = (s(18.0, 26.0, rng), s(7.0, 10.0, rng));
            let wheel = (body_h as f64 * 0.35).max(1.5);
            let h = body_h + wheel as usize;
            let (wf, bh) = (w as f64, body_h as f64);
            let shape = Shape::new(w, h, move |x, y| {
                y <= bh || disc(wf * 0.25, bh, wheel)(x, y) || disc(wf * 0.75, bh, wheel)(x, y)
            });
            let tone = rng.uniform(0.0, 1.0);
            let body = if tone < 0.5 { [0.8, 0.1, 0.12] } else { [0.55, 0.58, 0.62] };
            let paint = move |_x: usize, y: usize, _w: usize, _h: usize| {
                if y >= body_h {
                    ([0.05, 0.05, 0.05], 1.0)
                } else {
                    (body, 1.0)
                }
            };
            (shape, Box::new(paint))
        }
        Category::Fire => {
            let (w, h) = (s(12.0, 24.0, rng), s(14.0, 26.0, rng));
            let shape = blob(rng, w, h);
            let paint = move |_x: usize, y: usize, _w: usize, h: usize| {
                let t = y as f64 / h.max(1) as f64;
                ([1.0, 0.85 - 0.6 * t, 0.15 * (1.0 - t)], 1.0)
            };
            (shape, Box::new(paint))
        }
        Category::Smoke => {
            let (w, h) = (s(14.0, 26.0, rng), s(14.0, 26.0, rng));
            let shape = blob(rng, w, h);
            let grey = rng.uniform(0.68, 0.85);
            let paint = move |_x: usize, _y: usize, _w: usize, _h: usize| ([grey, grey, grey * 1.02], 0.8);
            (shape, Box::new(paint))
        }
    }
}

fn background(rng: &mut Rng, w: usize, h: usize, scale: f64) -> Canvas {
    let base: [f64; 3] = [rng.uniform(0.3, 0.5), rng.uniform(0.35, 0.5), rng.uniform(0.3, 0.45)];
    let gx = rng.uniform(-0.1, 0.1);
    let gy = rng.uniform(-0.1, 0.1);
    let mut px = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let g = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
            px.push([base[0] + g, base[1] + g, base[2] + g]);
        }
    }
    let mut canvas = Canvas { w, h, px };
    // Crowd clutter: small dark and skin-toned heads present in every scene.
    let heads = ((w * h) as f64 / 220.0) as usize;
    for _ in 0..heads {
        let r = rng.uniform(1.2, 2.2) * scale;
        let (cx, cy) = (rng.uniform(0.0, w as f64), rng.uniform(0.0, h as f64));
        let color = if rng.bernoulli(0.5) { [0.2, 0.15, 0.1] } else { [0.85, 0.65, 0.5] };
        let inside = disc(cx, cy, r);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    canvas.blend(x, y, color, 1.0);
                }
            }
        }
    }
    canvas
}

fn overlaps(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize), margin: usize) -> bool {
    a.0 < b.2 + margin && b.0 < a.2 + margin && a.1 < b.3 + margin && b.1 < a.3 + margin
}

/// Places `cats` without overlap; objects that do not fit are skipped.
fn place(canvas: &mut Canvas, cats: &[Category], rng: &mut Rng, scale: f64) -> BTreeMap<Category, Vec<[f64; 4]>> {
    let mut taken: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut boxes: BTreeMap<Category, Vec<[f64; 4]>> = BTreeMap::new();
    for &cat in cats {
        let (shape, paint) = object_shape(cat, rng, scale);
        let Some((bx1, by1, bx2, by2)) = shape.bounds() else { continue };
        if shape.w > canvas.w || shape.h > canvas.h {
            continue;
        }
        for _ in 0..100 {
            let ox = rng.range_inclusive(0, canvas.w - shape.w);
            let oy = rng.range_inclusive(0, canvas.h - shape.h);
            let b = (ox + bx1, oy + by1, ox + bx2, oy + by2);
            if taken.iter().any(|&t| overlaps(t, b, 1)) {
                continue;
            }
            for y in 0..shape.h {
                for x in 0..shape.w {
                    if shape.mask[y * shape.w + x] {
                        let (color, alpha) = paint(x, y, shape.w, shape.h);
                        canvas.blend(ox + x, oy + y, color, alpha);
                    }
                }
            }
            taken.push(b);
            boxes.entry(cat).or_default().push([b.0 as f64, b.1 as f64, b.2 as f64, b.3 as f64]);
            break;
        }
    }
    boxes
}

fn scene_objects(event: EventLabel, rng: &mut Rng) -> Vec<Category> {
    let mut cats = Vec::new();
    match event {
        EventLabel::Malicious => {
            // Non-rigid objects first so they always find room.
            for _ in 0..rng.range_inclusive(1, 2) {
                cats.push(if rng.bernoulli(0.5) { Category::Fire } else { Category::Smoke });
            }
            for _ in 0..rng.range_inclusive(1, 2) {
                cats.push(if rng.bernoulli(0.6) { Category::Helmet } else { Category::Police });
            }
        }
        EventLabel::Benign => {
            for _ in 0..rng.range_inclusive(1, 3) {
                cats.push(if rng.bernoulli(0.6) { Category::Car } else { Category::Police });
            }
        }
    }
    cats
}

fn add_noise(canvas: &mut Canvas, noise: f64, rng: &mut Rng) {
    if noise == 0.0 {
        return;
    }
    for p in &mut canvas.px {
        for v in p.iter_mut() {
            *v += noise * rng.standard_normal();
        }
    }
}

/// Rendered images plus their manifest. Image `i` is `images/img_{i:04}.png`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor<f32>>,
}

impl SyntheticDataset {
    /// Writes `manifest.json` and `images/` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (entry, img) in self.manifest.entries.iter().zip(&self.images) {
            write_image(dir.join(&entry.image), img)?;
        }
        write_atomic(dir.join("manifest.json"), self.manifest.to_json().as_bytes())
    }

    pub fn into_dataset(self) -> Dataset {
        let samples = self
            .manifest
            .entries
            .iter()
            .zip(self.images)
            .map(|(e, image)| Sample::new(e, image))
            .collect();
        Dataset { samples }
    }
}

/// Generates a balanced dataset. Labels alternate benign, malicious, ... and
/// each image draws from its own forked random stream.
pub fn generate_synthetic(spec: &SyntheticSpec, min_input: usize) -> Result<SyntheticDataset> {
    spec.validate(min_input)?;
    let root = Rng::new(spec.seed);
    let mut entries = Vec::with_capacity(spec.count);
    let mut images = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = root.fork(i as u64);
        let event = if i % 2 == 0 { EventLabel::Benign } else { EventLabel::Malicious };
        let w = rng.range_inclusive(spec.min_size, spec.max_size);
        let h = rng.range_inclusive(spec.min_size, spec.max_size);
        let scale = w.min(h) as f64 / 64.0;
        let mut canvas = background(&mut rng, w, h, scale);
        let cats = scene_objects(event, &mut rng);
        let boxes = place(&mut canvas, &cats, &mut rng, scale);
        add_noise(&mut canvas, spec.noise, &mut rng);
        entries.push(ManifestEntry {
            image: format!("images/img_{i:04}.png"),
            event,
            boxes,
            size: Some([w, h]),
        });
        images.push(canvas.into_tensor());
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest::new(entries),
        images,
    })
}

/// Number of classes of the pretraining task.
pub const PRETRAIN_CLASSES: usize = 4;

/// Scene-classification images for warm-starting the shared layers. The
/// class is the kind of shape filling the scene: discs, rectangles, stripes
/// or triangles, in random colors.
pub fn generate_pretrain(count: usize, size: usize, seed: u64) -> Result<(Vec<Tensor<f32>>, Vec<usize>)> {
    if count == 0 || size < 8 {
        return Err(Error::config("pretraining set needs at least one image of size 8 or more"));
    }
    let root = Rng::new(seed ^ 0x5EED_0F5C_E4E5);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.fork(i as u64);
        let class = i % PRETRAIN_CLASSES;
        let mut canvas = background(&mut rng, size, size, size as f64 / 64.0);
        let sz = size as f64;
        for _ in 0..rng.range_inclusive(2, 4) {
            let color = [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)];
            let r = rng.uniform(0.08, 0.18) * sz;
            let (cx, cy) = (rng.uniform(r, sz - r), rng.uniform(r, sz - r));
            let period = rng.uniform(3.0, 6.0);
            let inside = move |x: f64, y: f64| -> bool {
                let (dx, dy) = (x - cx, y - cy);
                match class {
                    0 => dx * dx + dy * dy <= r * r,
                    1 => dx.abs() <= r && dy.abs() <= 0.6 * r,
                    2 => dx.abs() <= r && dy.abs() <= r && (dy + r).rem_euclid(period) < period / 2.0,
                    _ => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
                }
            };
            for y in 0..size {
                for x in 0..size {
                    if inside(x as f64 + 0.5, y as f64 + 0.5) {
                        canvas.blend(x, y, color, 1.0);
                    }
                }
            }
        }
        add_noise(&mut canvas, 0.03, &mut rng);
        images.push(canvas.into_tensor());
        labels.push(class);
    }
    Ok((images, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Task;

    #[test]
    fn balanced_and_deterministic() {
        let spec = SyntheticSpec {
            count: 20,
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&spec, 48).unwrap();
        let b = generate_synthetic(&spec, 48).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.manifest.count(EventLabel::Benign), 10);
        assert_eq!(a.manifest.count(EventLabel::Malicious), 10);
    }

    #[test]
    fn placement_rules() {
        let spec = SyntheticSpec {
            count: 40,
            seed: 3,
            min_size: 56,
            max_size: 96,
            ..Default::default()
        };
        let d = generate_synthetic(&spec, 48).unwrap();
        for e in &d.manifest.entries {
            let nonrigid = e.gt_boxes(Task::NonRigid);
            match e.event {
                EventLabel::Malicious => assert!(!nonrigid.is_empty()),
                EventLabel::Benign => {
                    assert!(nonrigid.is_empty());
                    assert!(!e.gt_boxes(Task::Rigid).is_empty());
                }
            }
            let [w, h] = e.size.unwrap();
            for b in e.gt_boxes(Task::Rigid).iter().chain(&nonrigid) {
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= w as f64 && b.y2 <= h as f64);
            }
        }
    }

    #[test]
    fn boxes_tightly_bound_rendered_pixels() {
        let spec = SyntheticSpec {
            count: 6,
            noise: 0.0,
            seed: 11,
            ..Default::default()
        };
        let d = generate_synthetic(&spec, 48).unwrap();
        let clean = |seed| {
            let mut rng = Rng::new(spec.seed).fork(seed);
            let _ = (rng.range_inclusive(64, 64), rng.range_inclusive(64, 64));
            background(&mut rng, 64, 64, 1.0).into_tensor()
        };
        for (i, (e, img)) in d.manifest.entries.iter().zip(&d.images).enumerate() {
            let bg = clean(i as u64);
            let changed = |x: usize, y: usize| (0..3).any(|c| img.get(&[c, y, x]).unwrap() != bg.get(&[c, y, x]).unwrap());
            for list in e.boxes.values() {
                for b in list {
                    let [x1, y1, x2, y2] = b.map(|v| v as usize);
                    assert!((x1..x2).any(|x| changed(x, y1)) && (x1..x2).any(|x| changed(x, y2 - 1)));
                    assert!((y1..y2).any(|y| changed(x1, y)) && (y1..y2).any(|y| changed(x2 - 1, y)));
                }
            }
        }
    }

    #[test]
    fn rejects_small_or_odd() {
        let small = SyntheticSpec {
            min_size: 32,
            max_size: 32,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&small, 48), Err(Error::Config(_))));
        let odd = SyntheticSpec {
            count: 7,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&odd, 48), Err(Error::Config(_))));
    }

    #[test]
    fn pretrain_classes_cycle() {
        let (imgs, labels) = generate_pretrain(8, 48, 1).unwrap();
        assert_eq!(imgs.len(), 8);
        assert_eq!(labels, vec![0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(imgs[0].shape(), &[3, 48, 48]);
    }
}
