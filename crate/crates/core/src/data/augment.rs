use serde::{Deserialize, Serialize};

use super::Sample;
use crate::elastic::Field2D;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub rotation_max_deg: f64,
    pub color_scale_range: [f64; 2],
    pub color_shift_range: [f64; 2],
    /// Probability that each of the three transforms is applied.
    pub apply_prob: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise_sigma: 0.02,
            rotation_max_deg: 15.0,
            color_scale_range: [0.9, 1.1],
            color_shift_range: [-0.05, 0.05],
            apply_prob: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose transforms are all identities.
    pub fn identity() -> Self {
        AugmentConfig {
            noise_sigma: 0.0,
            rotation_max_deg: 0.0,
            color_scale_range: [1.0, 1.0],
            color_shift_range: [0.0, 0.0],
            apply_prob: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if !(self.noise_sigma >= 0.0) || !(self.rotation_max_deg >= 0.0) {
            return Err(Error::Config("noise sigma and rotation range must be non-negative".into()));
        }
        if !ordered(self.color_scale_range) || !ordered(self.color_shift_range) {
            return Err(Error::Config("color ranges must be ordered [low, high]".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config(format!("apply_prob {} outside [0, 1]", self.apply_prob)));
        }
        Ok(())
    }
}

pub fn add_gaussian_noise(image: &Tensor4, sigma: f64, rng: &mut RngStream) -> Tensor4 {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    out
}

/// Snaps coordinates that are integral up to rounding noise, so exact
/// quarter turns map pixels onto pixels.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Source coordinate `(y, x)` of output pixel `(y, x)` under a rotation by
/// `angle_deg` about the image centre (counter-clockwise as displayed).
fn source(y: usize, x: usize, cy: f64, cx: f64, cos: f64, sin: f64) -> (f64, f64) {
    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
    // inverse of the forward map x' = c·dx + s·dy, y' = −s·dx + c·dy
    let sx = cos * dx - sin * dy;
    let sy = sin * dx + cos * dy;
    (snap(sy + cy), snap(sx + cx))
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let at = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let top = at(y0, x0) * (1.0 - fx) + if fx > 0.0 { at(y0, x0 + 1) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + if fx > 0.0 { at(y0 + 1, x0 + 1) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

fn nearest(field: &Field2D, y: f64, x: f64) -> f64 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= field.height() as f64 || xx >= field.width() as f64 {
        0.0
    } else {
        field.get(yy as usize, xx as usize)
    }
}

/// Rotates image (bilinear) and masks (nearest) about the centre; pixels
/// sourced from outside the frame become 0.
pub fn rotate_sample(sample: &Sample, angle_deg: f64) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let coords: Vec<(f64, f64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| source(y, x, cy, cx, cos, sin))
        .collect();
    let mut image = Tensor4::zeros(sample.image.dims());
    for c in 0..sample.image.channels() {
        let src = sample.image.plane_of(0, c);
        let dst = image.plane_of_mut(0, c);
        for (d, &(sy, sx)) in dst.iter_mut().zip(&coords) {
            *d = bilinear(src, h, w, sy, sx);
        }
    }
    let warp = |f: &Field2D| Field2D::from_fn(h, w, |y, x| {
        let (sy, sx) = coords[y * w + x];
        nearest(f, sy, sx)
    });
    Sample {
        id: sample.id.clone(),
        image,
        mask: warp(&sample.mask),
        fov: sample.fov.as_ref().map(warp),
    }
}

/// Per-channel affine map `v ↦ scale·v + shift`, clamped to `[0, 1]`.
pub fn color_jitter(image: &Tensor4, scales: &[f64], shifts: &[f64]) -> Tensor4 {
    let mut out = image.clone();
    for n in 0..image.batch() {
        for c in 0..image.channels() {
            for v in out.plane_of_mut(n, c) {
                *v = (scales[c] * *v + shifts[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Noise, then rotation, then color jitter, each applied with `apply_prob`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<Sample> {
    cfg.validate()?;
    let mut out = sample.clone();
    if rng.bernoulli(cfg.apply_prob) && cfg.noise_sigma > 0.0 {
        out.image = add_gaussian_noise(&out.image, cfg.noise_sigma, rng);
    }
    if rng.bernoulli(cfg.apply_prob) && cfg.rotation_max_deg > 0.0 {
        let angle = rng.uniform_range(-cfg.rotation_max_deg, cfg.rotation_max_deg);
        out = rotate_sample(&out, angle);
    }
    if rng.bernoulli(cfg.apply_prob) {
        let channels = out.image.channels();
        let draw = |rng: &mut RngStream, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.uniform_range(r[0], r[1]) };
        let scales: Vec<f64> = (0..channels).map(|_| draw(rng, cfg.color_scale_range)).collect();
        let shifts: Vec<f64> = (0..channels).map(|_| draw(rng, cfg.color_shift_range)).collect();
        if scales.iter().any(|&s| s != 1.0) || shifts.iter().any(|&s| s != 0.0) {
            out.image = color_jitter(&out.image, &scales, &shifts);
        }
    }
    Ok(out)
}
