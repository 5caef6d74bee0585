//! 8-bit RGB image files (PNG and binary PPM) as `[3, H, W]` tensors with
//! values in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(image_err(path, "unsupported image extension (expected .png or .ppm)")),
    }
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = p[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("shape matches buffer")
}

/// Quantizes a `[3, H, W]` tensor (values clamped to `[0, 1]`) to 8 bits.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let [c, h, w] = t.shape() else {
        return Err(Error::invalid(format!("expected a [3, H, W] image tensor, got {:?}", t.shape())));
    };
    if *c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let (h, w) = (*h, *w);
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| image_err(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format_of(path)?).map_err(|e| image_err(path, e))?;
    Ok(rgb_to_tensor(&img.to_rgb8()))
}

/// Writes PNG or PPM according to the extension, atomically.
pub fn write_image(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let fmt = format_of(path)?;
    let mut buf = Cursor::new(Vec::new());
    tensor_to_rgb(t)?.write_to(&mut buf, fmt).map_err(|e| image_err(path, e))?;
    write_atomic(path, buf.get_ref())
}

/// Size `(width, height)` from the file header, without decoding pixels.
pub fn image_size(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|e| image_err(path, e))?;
    Ok((w as usize, h as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient() -> Tensor<f32> {
        let (h, w) = (5, 7);
        let data = (0..3 * h * w).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn png_and_ppm_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let t = gradient();
        for name in ["x.png", "x.ppm"] {
            let p = dir.path().join(name);
            write_image(&p, &t).unwrap();
            assert_eq!(read_image(&p).unwrap(), t, "{name}");
            assert_eq!(image_size(&p).unwrap(), (7, 5));
        }
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("missing.png");
        assert!(read_image(&p).unwrap_err().to_string().contains("missing.png"));
        assert!(write_image(dir.path().join("x.gif"), &gradient()).is_err());
    }
}
