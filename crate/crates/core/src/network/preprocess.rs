use std::path::Path;

use image::RgbImage;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// How frames whose size differs from the network input are adapted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResizePolicy {
    /// Center-crop when the frame is at least as large as the input in both
    /// dimensions, otherwise bilinear resize. Cropping leaves the pixel-level
    /// noise untouched.
    #[default]
    CropOrResize,
    /// Always bilinear resize.
    Resize,
}

pub const MIN_FRAME_EXTENT: u32 = 16;

/// Converts an 8-bit RGB frame to a `[3, height, width]` tensor in `[0, 1]`.
pub fn preprocess_frame(image: &RgbImage, height: usize, width: usize, policy: ResizePolicy) -> Result<Tensor<f32>> {
    let (w, h) = image.dimensions();
    if w < MIN_FRAME_EXTENT || h < MIN_FRAME_EXTENT {
        return Err(Error::InvalidArgument(format!(
            "frame of {w}x{h} is smaller than the {MIN_FRAME_EXTENT}x{MIN_FRAME_EXTENT} minimum"
        )));
    }
    let (w, h) = (w as usize, h as usize);
    let raw = image.as_raw();
    let plane = height * width;
    let mut out = vec![0.0f32; 3 * plane];

    let crop = h >= height && w >= width && policy == ResizePolicy::CropOrResize;
    if crop {
        let (top, left) = ((h - height) / 2, (w - width) / 2);
        for y in 0..height {
            for x in 0..width {
                let src = ((top + y) * w + left + x) * 3;
                for c in 0..3 {
                    out[c * plane + y * width + x] = raw[src + c] as f32 / 255.0;
                }
            }
        }
    } else {
        bilinear_into(raw, h, w, height, width, &mut out);
    }
    Tensor::new([3, height, width], out)
}

/// Half-pixel-centred bilinear sampling with edge clamping.
fn bilinear_into(raw: &[u8], h: usize, w: usize, height: usize, width: usize, out: &mut [f32]) {
    let plane = height * width;
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| raw[(yy * w + xx) * 3 + c] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[c * plane + y * width + x] = ((top * (1.0 - fy) + bottom * fy) / 255.0) as f32;
            }
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Reads a frame file and preprocesses it.
pub fn load_frame(path: &Path, height: usize, width: usize, policy: ResizePolicy) -> Result<Tensor<f32>> {
    let img = load_rgb(path)?;
    preprocess_frame(&img, height, width, policy).map_err(|e| match e {
        Error::InvalidArgument(message) => Error::Image {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use image::Rgb;

    use super::*;

    fn pattern(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 + y * 3) as u8, (x ^ y) as u8, (x * y % 251) as u8]))
    }

    #[test]
    fn exact_size_is_only_scaled() {
        let img = pattern(800, 480);
        let t = preprocess_frame(&img, 480, 800, ResizePolicy::default()).unwrap();
        assert_eq!(t.shape(), [3, 480, 800]);
        let px = img.get_pixel(123, 45);
        for c in 0..3 {
            assert_eq!(t.data()[c * 480 * 800 + 45 * 800 + 123], px[c] as f32 / 255.0);
        }
    }

    #[test]
    fn whatsapp_frame_is_center_cropped() {
        let img = pattern(848, 480);
        let t = preprocess_frame(&img, 480, 800, ResizePolicy::default()).unwrap();
        for (x, y) in [(0u32, 0u32), (799, 479), (400, 200)] {
            let px = img.get_pixel(x + 24, y);
            assert_eq!(t.data()[(y * 800 + x) as usize], px[0] as f32 / 255.0);
        }
    }

    #[test]
    fn smaller_frames_are_resized() {
        let img = pattern(400, 240);
        let t = preprocess_frame(&img, 480, 800, ResizePolicy::default()).unwrap();
        assert_eq!(t.shape(), [3, 480, 800]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tiny_frames_are_rejected() {
        assert!(preprocess_frame(&pattern(8, 8), 64, 64, ResizePolicy::default()).is_err());
    }
}
