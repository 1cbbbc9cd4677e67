//! Feature-map dumps and detection overlays: for each of F_b, F_di, F_ds the
//! channel holding the maximum activation is selected, min-max normalized
//! and written as a grayscale PNG.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView2};

use crate::error::Result;
use crate::model::{write_file, Detection, Detector};

const OVERLAY_SCORE_MIN: f64 = 0.3;
const CLASS_COLORS: [[u8; 3]; 3] = [[230, 60, 60], [60, 200, 90], [70, 110, 240]];

/// Index of the channel whose maximum activation is largest; ties go to the
/// lower index.
pub fn select_max_channel(f: &Array3<f64>) -> usize {
    let (c, _, _) = f.dim();
    let mut best_idx = 0;
    let mut best = f64::NEG_INFINITY;
    for ci in 0..c {
        let m = f
            .index_axis(ndarray::Axis(0), ci)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if m > best {
            best = m;
            best_idx = ci;
        }
    }
    best_idx
}

/// Min-max normalize to 8-bit gray; a constant map renders mid-gray.
pub fn normalize_to_gray(map: ArrayView2<'_, f64>, upscale: usize) -> image::GrayImage {
    let (h, w) = map.dim();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in map.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    let mut img = image::GrayImage::new((w * upscale) as u32, (h * upscale) as u32);
    for y in 0..h * upscale {
        for x in 0..w * upscale {
            let v = map[[y / upscale, x / upscale]];
            let g = if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                128
            };
            img.put_pixel(x as u32, y as u32, image::Luma([g]));
        }
    }
    img
}

/// Render detection boxes over the input image.
pub fn render_detections(image: &Array3<f64>, detections: &[Detection]) -> image::RgbImage {
    let (_, h, w) = image.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (image[[0, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[1, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
                (image[[2, y, x]] * 255.0).round().clamp(0.0, 255.0) as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    for det in detections {
        if det.score < OVERLAY_SCORE_MIN {
            continue;
        }
        let color = CLASS_COLORS[det.class_id % CLASS_COLORS.len()];
        let x1 = det.bbox.x1.round().clamp(0.0, (w - 1) as f64) as u32;
        let y1 = det.bbox.y1.round().clamp(0.0, (h - 1) as f64) as u32;
        let x2 = det.bbox.x2.round().clamp(0.0, (w - 1) as f64) as u32;
        let y2 = det.bbox.y2.round().clamp(0.0, (h - 1) as f64) as u32;
        for x in x1..=x2 {
            img.put_pixel(x, y1, image::Rgb(color));
            img.put_pixel(x, y2, image::Rgb(color));
        }
        for y in y1..=y2 {
            img.put_pixel(x1, y, image::Rgb(color));
            img.put_pixel(x2, y, image::Rgb(color));
        }
    }
    img
}

fn png_bytes_of_gray(img: &image::GrayImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::L8,
        )
        .map_err(crate::error::Error::Image)?;
    Ok(bytes)
}

fn png_bytes_of_rgb(img: &image::RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    use image::ImageEncoder;
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            image::ExtendedColorType::Rgb8,
        )
        .map_err(crate::error::Error::Image)?;
    Ok(bytes)
}

/// Write `<prefix>_{f_b,f_di,f_ds}.png` plus `<prefix>_overlay.png` under
/// `out_dir`; returns the written paths.
pub fn viz_features(
    detector: &Detector,
    image: &Array3<f64>,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>> {
    let (f_b, f_di, f_ds) = detector.feature_maps(image)?;
    let mut written = Vec::new();
    for (tag, map) in [("f_b", &f_b), ("f_di", &f_di), ("f_ds", &f_ds)] {
        let ch = select_max_channel(map);
        let gray = normalize_to_gray(map.index_axis(ndarray::Axis(0), ch), 8);
        let path = out_dir.join(format!("{prefix}_{tag}.png"));
        write_file(&path, &png_bytes_of_gray(&gray)?)?;
        written.push(path);
    }
    let detections = detector.detect(image)?;
    let overlay = render_detections(image, &detections);
    let path = out_dir.join(format!("{prefix}_overlay.png"));
    write_file(&path, &png_bytes_of_rgb(&overlay)?)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn constant_map_renders_uniform_gray() {
        let f = ndarray::Array2::from_elem((4, 4), 2.5);
        let img = normalize_to_gray(f.view(), 2);
        assert!(img.pixels().all(|p| p.0[0] == 128));
        assert_eq!(img.width(), 8);
    }

    #[test]
    fn channel_selection_matches_loop_argmax() {
        let mut rng = crate::rng::rng_from_seed(3);
        for _ in 0..20 {
            let f = Array3::from_shape_fn((8, 5, 5), |_| rng.gen_range(-4.0..4.0));
            let got = select_max_channel(&f);
            let mut best = (0usize, f64::NEG_INFINITY);
            for c in 0..8 {
                for y in 0..5 {
                    for x in 0..5 {
                        if f[[c, y, x]] > best.1 {
                            best = (c, f[[c, y, x]]);
                        }
                    }
                }
            }
            assert_eq!(got, best.0);
        }
    }

    #[test]
    fn recombined_map_matches_fb_before_normalization() {
        use crate::model::{Detector, Method, ModelConfig};
        let det = Detector::new(ModelConfig::new(64, Method::Vdd, 3)).unwrap();
        let mut rng = crate::rng::rng_from_seed(8);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
        let (f_b, f_di, f_ds) = det.feature_maps(&img).unwrap();
        let recombined = &f_di + &f_ds;
        let max_err = f_b
            .iter()
            .zip(recombined.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-9, "max recombination error {max_err}");
    }

    #[test]
    fn viz_writes_four_pngs() {
        use crate::model::{Detector, Method, ModelConfig};
        let dir = tempfile::tempdir().unwrap();
        let det = Detector::new(ModelConfig::new(64, Method::Vdd, 4)).unwrap();
        let mut rng = crate::rng::rng_from_seed(9);
        let img = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(0.0..1.0));
        let paths = viz_features(&det, &img, dir.path(), "probe").unwrap();
        assert_eq!(paths.len(), 4);
        for p in paths {
            assert!(p.exists());
            let bytes = std::fs::read(&p).unwrap();
            assert!(image::load_from_memory(&bytes).is_ok());
        }
    }
}
