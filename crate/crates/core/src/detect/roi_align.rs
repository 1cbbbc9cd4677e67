//! RoI-Align: bilinear pooling of a feature map over proposals into a fixed
//! grid, 2x2 sample points per bin, averaged. Continuous coordinates use the
//! half-pixel-aligned convention (grid values sit at cell centers), and
//! sample points are clamped to the map border, which keeps the operation
//! differentiable almost everywhere.

use ndarray::{Array3, Array4};

use super::boxes::BoxF;

const SAMPLES_PER_AXIS: usize = 2;

#[derive(Clone, Copy)]
struct Tap {
    y0: usize,
    x0: usize,
    y1: usize,
    x1: usize,
    dy: f64,
    dx: f64,
}

fn tap(h: usize, w: usize, sy: f64, sx: f64) -> Tap {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    Tap {
        y0,
        x0,
        y1,
        x1,
        dy: sy - y0 as f64,
        dx: sx - x0 as f64,
    }
}

fn sample_points(
    proposal: &BoxF,
    spatial_scale: f64,
    out: usize,
) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
    let fx1 = proposal.x1 * spatial_scale - 0.5;
    let fy1 = proposal.y1 * spatial_scale - 0.5;
    let bin_w = (proposal.x2 - proposal.x1).max(1e-6) * spatial_scale / out as f64;
    let bin_h = (proposal.y2 - proposal.y1).max(1e-6) * spatial_scale / out as f64;
    (0..out).flat_map(move |by| {
        (0..out).flat_map(move |bx| {
            (0..SAMPLES_PER_AXIS).flat_map(move |iy| {
                (0..SAMPLES_PER_AXIS).map(move |ix| {
                    let sy = fy1 + (by as f64 + (iy as f64 + 0.5) / SAMPLES_PER_AXIS as f64) * bin_h;
                    let sx = fx1 + (bx as f64 + (ix as f64 + 0.5) / SAMPLES_PER_AXIS as f64) * bin_w;
                    (by, bx, sy, sx)
                })
            })
        })
    })
}

/// Pool `f` over `proposals` (image coordinates) into `(n, c, out, out)`.
pub fn roi_align(
    f: &Array3<f64>,
    proposals: &[BoxF],
    out: usize,
    spatial_scale: f64,
) -> Array4<f64> {
    let (c, h, w) = f.dim();
    let inv_samples = 1.0 / (SAMPLES_PER_AXIS * SAMPLES_PER_AXIS) as f64;
    let mut pooled = Array4::zeros((proposals.len(), c, out, out));
    for (pi, p) in proposals.iter().enumerate() {
        for (by, bx, sy, sx) in sample_points(p, spatial_scale, out) {
            let t = tap(h, w, sy, sx);
            let (w00, w01, w10, w11) = (
                (1.0 - t.dy) * (1.0 - t.dx),
                (1.0 - t.dy) * t.dx,
                t.dy * (1.0 - t.dx),
                t.dy * t.dx,
            );
            for ci in 0..c {
                let v = w00 * f[[ci, t.y0, t.x0]]
                    + w01 * f[[ci, t.y0, t.x1]]
                    + w10 * f[[ci, t.y1, t.x0]]
                    + w11 * f[[ci, t.y1, t.x1]];
                pooled[[pi, ci, by, bx]] += v * inv_samples;
            }
        }
    }
    pooled
}

/// Scatter the pooled gradient back onto the feature map.
pub fn roi_align_backward(
    f_dims: (usize, usize, usize),
    proposals: &[BoxF],
    out: usize,
    spatial_scale: f64,
    g: &Array4<f64>,
) -> Array3<f64> {
    let (c, h, w) = f_dims;
    let inv_samples = 1.0 / (SAMPLES_PER_AXIS * SAMPLES_PER_AXIS) as f64;
    let mut gf = Array3::zeros((c, h, w));
    for (pi, p) in proposals.iter().enumerate() {
        for (by, bx, sy, sx) in sample_points(p, spatial_scale, out) {
            let t = tap(h, w, sy, sx);
            let (w00, w01, w10, w11) = (
                (1.0 - t.dy) * (1.0 - t.dx),
                (1.0 - t.dy) * t.dx,
                t.dy * (1.0 - t.dx),
                t.dy * t.dx,
            );
            for ci in 0..c {
                let go = g[[pi, ci, by, bx]] * inv_samples;
                gf[[ci, t.y0, t.x0]] += go * w00;
                gf[[ci, t.y0, t.x1]] += go * w01;
                gf[[ci, t.y1, t.x0]] += go * w10;
                gf[[ci, t.y1, t.x1]] += go * w11;
            }
        }
    }
    gf
}
