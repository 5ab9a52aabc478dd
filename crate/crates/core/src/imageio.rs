//! PNG frame I/O and overlay rendering.

use std::path::Path;

use image::{imageops, ImageReader, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::domain::BoundingBox;
use crate::error::{io_err, Result};

pub fn to_rgb_image(pixels: &Array3<f32>) -> RgbImage {
    let (h, w, _) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = |c: usize| (pixels[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn from_rgb_image(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Reads an image as `H x W x 3` in `[0, 1]`, optionally resized
/// (bilinear) to `(height, width)`.
pub fn read_rgb(path: impl AsRef<Path>, size: Option<(usize, usize)>) -> Result<Array3<f32>> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(io_err(path))?
        .decode()?
        .to_rgb8();
    let img = match size {
        Some((h, w)) if img.dimensions() != (w as u32, h as u32) => {
            imageops::resize(&img, w as u32, h as u32, imageops::FilterType::Triangle)
        }
        _ => img,
    };
    Ok(from_rgb_image(&img))
}

/// `(height, width)` from the file header.
pub fn image_size(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path.as_ref())?;
    Ok((h as usize, w as usize))
}

pub fn write_rgb(path: impl AsRef<Path>, pixels: &Array3<f32>) -> Result<()> {
    to_rgb_image(pixels).save(path.as_ref())?;
    Ok(())
}

/// Blue-to-red heat colour for a value in `[0, 1]`.
pub fn heat(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Frame blended with a heat map of `cam`.
pub fn blend_heat(pixels: &Array3<f32>, cam: &Array2<f32>, alpha: f32) -> Array3<f32> {
    Array3::from_shape_fn(pixels.dim(), |(y, x, c)| {
        (1.0 - alpha) * pixels[[y, x, c]] + alpha * heat(cam[[y, x]])[c]
    })
}

pub fn draw_box(pixels: &mut Array3<f32>, b: &BoundingBox, color: [f32; 3]) {
    let (h, w, _) = pixels.dim();
    let (x0, y0) = (b.x_min.min(w - 1), b.y_min.min(h - 1));
    let (x1, y1) = ((b.x_max - 1).min(w - 1), (b.y_max - 1).min(h - 1));
    let mut put = |y: usize, x: usize| {
        for c in 0..3 {
            pixels[[y, x, c]] = color[c];
        }
    };
    for x in x0..=x1 {
        put(y0, x);
        put(y1, x);
    }
    for y in y0..=y1 {
        put(y, x0);
        put(y, x1);
    }
}

pub const GREEN: [f32; 3] = [0.0, 1.0, 0.0];
pub const RED: [f32; 3] = [1.0, 0.0, 0.0];

/// Frame on the left, heat overlay on the right; ground truth in green,
/// prediction in red on both panels.
pub fn overlay(
    pixels: &Array3<f32>,
    cam: &Array2<f32>,
    gt: &[BoundingBox],
    pred: Option<&BoundingBox>,
) -> Array3<f32> {
    let (h, w, _) = pixels.dim();
    let mut left = pixels.clone();
    let mut right = blend_heat(pixels, cam, 0.5);
    for panel in [&mut left, &mut right] {
        for b in gt {
            draw_box(panel, b, GREEN);
        }
        if let Some(p) = pred {
            draw_box(panel, p, RED);
        }
    }
    let mut out = Array3::zeros((h, 2 * w, 3));
    out.slice_mut(ndarray::s![.., ..w, ..]).assign(&left);
    out.slice_mut(ndarray::s![.., w.., ..]).assign(&right);
    out
}
