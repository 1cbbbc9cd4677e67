//! Deterministic labeled-scene generator: procedural background plus 1..n
//! colored shapes (circle / square / triangle) with tight bounding boxes.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::detect::BoxF;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;

const MIN_SHAPE: f64 = 20.0;
const MAX_SHAPE: f64 = 60.0;
const PIXEL_NOISE: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct SceneSpec {
    /// Square image side in pixels.
    pub image_size: usize,
    pub n_objects: usize,
    /// Procedural background style, 0..=3.
    pub background: u8,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn new(image_size: usize, n_objects: usize, background: u8, rng_seed: u64) -> Self {
        Self {
            image_size,
            n_objects,
            background,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn class_id(&self) -> usize {
        match self {
            ShapeKind::Circle => 0,
            ShapeKind::Square => 1,
            ShapeKind::Triangle => 2,
        }
    }
}

/// Geometry and color of one drawn shape; `size` is the bounding-box side.
#[derive(Debug, Clone, Copy)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub color: [f64; 3],
}

impl ShapeParams {
    pub fn bbox(&self) -> BoxF {
        let h = self.size / 2.0;
        BoxF::new(self.cx - h, self.cy - h, self.cx + h, self.cy + h)
    }
}

/// One image with its domain tag; boxes are present exactly for source
/// (domain 0) samples.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image: Array3<f64>,
    pub domain: u8,
    pub boxes: Vec<BoxF>,
    pub class_ids: Vec<usize>,
}

impl ImageSample {
    pub fn source(image: Array3<f64>, boxes: Vec<BoxF>, class_ids: Vec<usize>) -> Self {
        Self {
            image,
            domain: 0,
            boxes,
            class_ids,
        }
    }

    pub fn unlabeled_target(image: Array3<f64>) -> Self {
        Self {
            image,
            domain: 1,
            boxes: Vec::new(),
            class_ids: Vec::new(),
        }
    }
}

/// Pixel-center coverage test used by the rasterizer.
pub fn point_in_shape(shape: &ShapeParams, px: f64, py: f64) -> bool {
    let h = shape.size / 2.0;
    match shape.kind {
        ShapeKind::Circle => {
            let dx = px - shape.cx;
            let dy = py - shape.cy;
            dx * dx + dy * dy <= h * h
        }
        ShapeKind::Square => (px - shape.cx).abs() <= h && (py - shape.cy).abs() <= h,
        ShapeKind::Triangle => {
            // isoceles, apex up: A=(cx, cy-h), B=(cx-h, cy+h), C=(cx+h, cy+h)
            let (ax, ay) = (shape.cx, shape.cy - h);
            let (bx, by) = (shape.cx - h, shape.cy + h);
            let (cx_, cy_) = (shape.cx + h, shape.cy + h);
            let sign = |x1: f64, y1: f64, x2: f64, y2: f64| (px - x2) * (y1 - y2) - (x1 - x2) * (py - y2);
            let d1 = sign(ax, ay, bx, by);
            let d2 = sign(bx, by, cx_, cy_);
            let d3 = sign(cx_, cy_, ax, ay);
            let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
            let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
            !(has_neg && has_pos)
        }
    }
}

/// Boolean coverage mask of a shape over an `size x size` pixel grid.
pub fn shape_mask(shape: &ShapeParams, image_size: usize) -> Array2<bool> {
    let b = shape.bbox();
    let y_lo = b.y1.floor().max(0.0) as usize;
    let y_hi = (b.y2.ceil() as usize).min(image_size);
    let x_lo = b.x1.floor().max(0.0) as usize;
    let x_hi = (b.x2.ceil() as usize).min(image_size);
    let mut mask = Array2::from_elem((image_size, image_size), false);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            if point_in_shape(shape, x as f64 + 0.5, y as f64 + 0.5) {
                mask[[y, x]] = true;
            }
        }
    }
    mask
}

fn background(style: u8, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    // coarse random grid, bilinearly upsampled, per channel
    let grid_n = 6;
    let mut grid = vec![[[0.0f64; 3]; 8]; 8];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            for c in cell.iter_mut() {
                *c = rng.gen_range(0.30..0.65);
            }
        }
    }
    let step = size as f64 / grid_n as f64;
    let mut img = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let gy = (y as f64 / step).min(grid_n as f64 - 1e-9);
            let gx = (x as f64 / step).min(grid_n as f64 - 1e-9);
            let (iy, ix) = (gy.floor() as usize, gx.floor() as usize);
            let (fy, fx) = (gy - iy as f64, gx - ix as f64);
            for c in 0..3 {
                let v00 = grid[iy][ix][c];
                let v01 = grid[iy][ix + 1][c];
                let v10 = grid[iy + 1][ix][c];
                let v11 = grid[iy + 1][ix + 1][c];
                let mut v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                // style overlays keep backgrounds from looking identical
                match style % 4 {
                    1 => v += 0.10 * (y as f64 / size as f64),
                    2 => v += 0.10 * (x as f64 / size as f64),
                    3 => {
                        let dx = x as f64 / size as f64 - 0.5;
                        let dy = y as f64 / size as f64 - 0.5;
                        v += 0.12 * (1.0 - (dx * dx + dy * dy).sqrt());
                    }
                    _ => {}
                }
                img[[c, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn luminance(c: &[f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Generate a labeled source-domain scene together with the drawn shape
/// parameters (exposed for rasterization oracles).
pub fn generate_scene_with_shapes(spec: &SceneSpec) -> Result<(ImageSample, Vec<ShapeParams>)> {
    if spec.image_size < 32 {
        return Err(Error::InvalidConfig(format!(
            "image_size {} < 32",
            spec.image_size
        )));
    }
    if spec.n_objects < 1 {
        return Err(Error::InvalidConfig("n_objects must be >= 1".into()));
    }
    let size = spec.image_size;
    let mut rng = rng_from_seed(spec.rng_seed);
    let mut img = background(spec.background, size, &mut rng);
    let bg_lum = {
        let mut acc = 0.0;
        for y in 0..size {
            for x in 0..size {
                acc += 0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
            }
        }
        acc / (size * size) as f64
    };

    let mut shapes: Vec<ShapeParams> = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let max_side = MAX_SHAPE.min(size as f64 / 2.0);
        let mut placed = None;
        for _attempt in 0..40 {
            let s = rng.gen_range(MIN_SHAPE..max_side);
            let half = s / 2.0;
            let cx = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
            let cy = rng.gen_range(half + 1.0..size as f64 - half - 1.0);
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Circle,
                1 => ShapeKind::Square,
                _ => ShapeKind::Triangle,
            };
            let candidate = ShapeParams {
                kind,
                cx,
                cy,
                size: s,
                color: [0.0; 3],
            };
            let overlaps = shapes
                .iter()
                .any(|sh| crate::detect::iou(&sh.bbox(), &candidate.bbox()) > 0.25);
            if !overlaps {
                placed = Some(candidate);
                break;
            }
            placed = Some(candidate); // last resort: accept the final attempt
        }
        let mut shape = placed.expect("at least one attempt ran");
        // pick a color with some luminance contrast against the background
        for _ in 0..10 {
            let c = [
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
            ];
            shape.color = c;
            if (luminance(&c) - bg_lum).abs() >= 0.25 {
                break;
            }
        }
        shapes.push(shape);
    }

    for shape in &shapes {
        let mask = shape_mask(shape, size);
        for y in 0..size {
            for x in 0..size {
                if mask[[y, x]] {
                    for c in 0..3 {
                        img[[c, y, x]] = shape.color[c];
                    }
                }
            }
        }
    }

    // sensor-style pixel noise
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE)).clamp(0.0, 1.0);
    }

    let boxes: Vec<BoxF> = shapes.iter().map(|s| s.bbox()).collect();
    let class_ids: Vec<usize> = shapes.iter().map(|s| s.kind.class_id()).collect();
    Ok((ImageSample::source(img, boxes, class_ids), shapes))
}

pub fn generate_scene(spec: &SceneSpec) -> Result<ImageSample> {
    generate_scene_with_shapes(spec).map(|(s, _)| s)
}
