//! Parameterized weather-style corruptions. Every shift is expressed as
//! `x' = clamp01(x + severity * delta)` with `delta` a pure function of the
//! clean image and the shift seed, so the per-pixel distance to the clean
//! image is nondecreasing in severity and severity 0 is the identity.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::ImageSample;
use crate::error::{Error, Result};
use crate::rng::{child_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    Fog,
    Rain,
    Night,
    /// Per-image uniform pick between rain-on-dusk and rain-on-night; no
    /// sub-domain label is exposed.
    Compound,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub severity: f64,
    pub rng_seed: u64,
}

impl DomainShift {
    pub fn new(kind: ShiftKind, severity: f64, rng_seed: u64) -> Self {
        Self {
            kind,
            severity,
            rng_seed,
        }
    }
}

/// Compound-member styles, used directly when building per-sub-domain eval
/// splits for the compound protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompoundMember {
    RainOnDusk,
    RainOnNight,
}

fn add_fog(delta: &mut Array3<f64>, x: &Array3<f64>) {
    // contrast compression toward a bright constant
    delta.zip_mut_with(x, |d, &v| *d += 0.75 * (0.92 - v));
}

fn add_dusk(delta: &mut Array3<f64>, x: &Array3<f64>) {
    // pull toward a dim violet-grey ambient color
    const TINT: [f64; 3] = [0.34, 0.22, 0.33];
    const K: [f64; 3] = [0.62, 0.68, 0.60];
    let (_, h, w) = x.dim();
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                delta[[c, y, xx]] += K[c] * (TINT[c] - x[[c, y, xx]]);
            }
        }
    }
}

fn add_night(delta: &mut Array3<f64>, x: &Array3<f64>, rng: &mut ChaCha8Rng) {
    // strong brightness scale-down plus per-pixel sensor noise
    let (_, h, w) = x.dim();
    for c in 0..3 {
        for y in 0..h {
            for xx in 0..w {
                let eta: f64 = rng.sample(StandardNormal);
                delta[[c, y, xx]] += -0.82 * x[[c, y, xx]] + 0.06 * eta;
            }
        }
    }
}

fn add_rain(delta: &mut Array3<f64>, x: &Array3<f64>, rng: &mut ChaCha8Rng) {
    let (_, h, w) = x.dim();
    // slight overall dimming under rain
    delta.zip_mut_with(x, |d, &v| *d += -0.18 * v);
    // oriented bright streaks
    let n_streaks = 40;
    for _ in 0..n_streaks {
        let x0 = rng.gen_range(0.0..w as f64);
        let y0 = rng.gen_range(0.0..h as f64);
        let len = rng.gen_range(8.0..24.0);
        let angle: f64 = rng.gen_range(-0.28..-0.12); // radians off vertical
        let intensity = rng.gen_range(0.25..0.45);
        let (dx, dy) = (angle.sin(), angle.cos());
        let steps = (len * 2.0) as usize;
        for s in 0..steps {
            let t = s as f64 * 0.5;
            let px = x0 + t * dx;
            let py = y0 + t * dy;
            if px < 0.0 || py < 0.0 {
                continue;
            }
            let (xi, yi) = (px as usize, py as usize);
            if xi >= w || yi >= h {
                continue;
            }
            for c in 0..3 {
                delta[[c, yi, xi]] = delta[[c, yi, xi]].max(intensity - 0.18 * x[[c, yi, xi]]);
            }
        }
    }
}

fn delta_for_member(
    member: CompoundMember,
    x: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let mut delta = Array3::zeros(x.dim());
    match member {
        CompoundMember::RainOnDusk => {
            add_dusk(&mut delta, x);
            add_rain(&mut delta, x, rng);
        }
        CompoundMember::RainOnNight => {
            add_night(&mut delta, x, rng);
            add_rain(&mut delta, x, rng);
        }
    }
    delta
}

fn shifted(x: &Array3<f64>, delta: &Array3<f64>, severity: f64) -> Array3<f64> {
    let mut out = x.clone();
    out.zip_mut_with(delta, |v, &d| *v = (*v + severity * d).clamp(0.0, 1.0));
    out
}

/// Apply a shift to a sample. Geometry is untouched: boxes and classes are
/// copied verbatim, and the domain tag is preserved; the corpus builder
/// decides how the result is labeled and persisted.
pub fn apply_domain_shift(sample: &ImageSample, shift: &DomainShift) -> Result<ImageSample> {
    if !(0.0..=1.0).contains(&shift.severity) {
        return Err(Error::InvalidConfig(format!(
            "severity {} outside [0, 1]",
            shift.severity
        )));
    }
    let x = &sample.image;
    let mut rng = rng_from_seed(shift.rng_seed);
    let delta = match shift.kind {
        ShiftKind::None => Array3::zeros(x.dim()),
        ShiftKind::Fog => {
            let mut d = Array3::zeros(x.dim());
            add_fog(&mut d, x);
            d
        }
        ShiftKind::Rain => {
            let mut d = Array3::zeros(x.dim());
            add_rain(&mut d, x, &mut rng);
            d
        }
        ShiftKind::Night => {
            let mut d = Array3::zeros(x.dim());
            add_night(&mut d, x, &mut rng);
            d
        }
        ShiftKind::Compound => {
            let member = if rng.gen_bool(0.5) {
                CompoundMember::RainOnDusk
            } else {
                CompoundMember::RainOnNight
            };
            let mut member_rng = rng_from_seed(child_seed(shift.rng_seed, 1));
            delta_for_member(member, x, &mut member_rng)
        }
    };
    Ok(ImageSample {
        image: shifted(x, &delta, shift.severity),
        domain: sample.domain,
        boxes: sample.boxes.clone(),
        class_ids: sample.class_ids.clone(),
    })
}

/// Apply one named compound member (for building per-sub-domain eval splits).
pub fn apply_compound_member(
    sample: &ImageSample,
    member: CompoundMember,
    severity: f64,
    rng_seed: u64,
) -> Result<ImageSample> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidConfig(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    let mut member_rng = rng_from_seed(child_seed(rng_seed, 1));
    let delta = delta_for_member(member, &sample.image, &mut member_rng);
    Ok(ImageSample {
        image: shifted(&sample.image, &delta, severity),
        domain: sample.domain,
        boxes: sample.boxes.clone(),
        class_ids: sample.class_ids.clone(),
    })
}
