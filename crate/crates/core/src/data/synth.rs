//! Procedural retina-like images with branching vessel trees.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Sample;
use crate::elastic::Field2D;
use crate::error::{Error, Result};
use crate::tensor::{RngStream, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Levels of bifurcation below each root vessel.
    pub branch_depth: usize,
    /// Vessel widths in pixels; roots start near the top, leaves end near the bottom.
    pub width_range: [f64; 2],
    /// Standard deviation of the heading change per unit length, in radians.
    pub curvature: f64,
    /// Inclusive range of root vessels per image.
    pub trees: [usize; 2],
    /// Image height and width must be multiples of this (the network's `2^depth`).
    pub size_divisor: usize,
    /// Gaussian pixel noise added to the rendered image.
    pub noise_sigma: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            branch_depth: 3,
            width_range: [1.0, 4.0],
            curvature: 0.08,
            trees: [2, 2],
            size_divisor: 16,
            noise_sigma: 0.02,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let [lo, hi] = self.width_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("vessel width range [{lo}, {hi}] is not ordered and positive")));
        }
        if hi >= height.min(width) as f64 / 2.0 {
            return Err(Error::Config(format!(
                "vessel width {hi} too large for {height}x{width} images"
            )));
        }
        if self.size_divisor == 0 || height % self.size_divisor != 0 || width % self.size_divisor != 0 {
            return Err(Error::Config(format!(
                "image size {height}x{width} must be divisible by {}",
                self.size_divisor
            )));
        }
        if self.trees[0] == 0 || self.trees[0] > self.trees[1] {
            return Err(Error::Config(format!("tree count range {:?} invalid", self.trees)));
        }
        if !(self.curvature >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::Config("curvature and noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: [f64; 2],
    b: [f64; 2],
    width: f64,
}

const STEP: f64 = 2.0;
const SPLIT_SHRINK: f64 = 0.7;

struct Grower<'a> {
    params: &'a SynthParams,
    height: f64,
    width: f64,
    segments: Vec<Segment>,
}

impl Grower<'_> {
    fn inside(&self, p: [f64; 2]) -> bool {
        let m = 2.0;
        p[0] > -m && p[0] < self.width + m && p[1] > -m && p[1] < self.height + m
    }

    /// Grows one vessel from `start` and recurses at its end.
    fn grow(&mut self, rng: &mut RngStream, start: [f64; 2], heading: f64, width: f64, length: f64, level: usize) {
        let mut p = start;
        let mut theta = heading;
        let mut travelled = 0.0;
        let drift = rng.normal() * self.params.curvature * 0.5;
        while travelled < length {
            theta += drift * STEP + rng.normal() * self.params.curvature * STEP.sqrt();
            let q = [p[0] + STEP * theta.cos(), p[1] + STEP * theta.sin()];
            self.segments.push(Segment { a: p, b: q, width });
            p = q;
            travelled += STEP;
            if !self.inside(p) {
                return;
            }
        }
        if level >= self.params.branch_depth {
            return;
        }
        let child_width = (width * SPLIT_SHRINK).max(self.params.width_range[0]);
        for side in [-1.0, 1.0] {
            let spread = rng.uniform_range(20.0, 50.0).to_radians();
            let child_length = length * rng.uniform_range(0.6, 0.85);
            self.grow(rng, p, theta + side * spread, child_width, child_length, level + 1);
        }
    }
}

fn distance_to_segment(p: [f64; 2], s: &Segment) -> f64 {
    let d = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - s.a[0]) * d[0] + (p[1] - s.a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [s.a[0] + t * d[0], s.a[1] + t * d[1]];
    (p[0] - c[0]).hypot(p[1] - c[1])
}

/// Renders stroke coverage (anti-aliased) and the exact mask `distance ≤ width/2`.
fn rasterize(segments: &[Segment], height: usize, width: usize) -> (Field2D, Field2D) {
    let mut coverage = Field2D::zeros(height, width);
    let mut mask = Field2D::zeros(height, width);
    for s in segments {
        let r = s.width / 2.0 + 1.0;
        let x0 = (s.a[0].min(s.b[0]) - r).floor().max(0.0) as usize;
        let x1 = ((s.a[0].max(s.b[0]) + r).ceil().max(0.0) as usize).min(width);
        let y0 = (s.a[1].min(s.b[1]) - r).floor().max(0.0) as usize;
        let y1 = ((s.a[1].max(s.b[1]) + r).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = distance_to_segment([x as f64 + 0.5, y as f64 + 0.5], s);
                let c = (s.width / 2.0 - d + 0.5).clamp(0.0, 1.0);
                if c > coverage.get(y, x) {
                    coverage.set(y, x, c);
                }
                if d <= s.width / 2.0 {
                    mask.set(y, x, 1.0);
                }
            }
        }
    }
    (coverage, mask)
}

fn random_root(rng: &mut RngStream, height: f64, width: f64) -> ([f64; 2], f64) {
    let edge = rng.below(4);
    let t = rng.uniform_range(0.2, 0.8);
    let start = match edge {
        0 => [t * width, 0.0],
        1 => [width, t * height],
        2 => [t * width, height],
        _ => [0.0, t * height],
    };
    let centre = [width / 2.0, height / 2.0];
    let heading = (centre[1] - start[1]).atan2(centre[0] - start[0]) + rng.uniform_range(-0.4, 0.4);
    (start, heading)
}

fn render_sample(params: &SynthParams, height: usize, width: usize, rng: &mut RngStream, id: String) -> Result<Sample> {
    let (hf, wf) = (height as f64, width as f64);
    let mut grower = Grower {
        params,
        height: hf,
        width: wf,
        segments: Vec::new(),
    };
    let trees = params.trees[0] + rng.below(params.trees[1] - params.trees[0] + 1);
    let [wlo, whi] = params.width_range;
    for _ in 0..trees {
        let (start, heading) = random_root(rng, hf, wf);
        let root_width = rng.uniform_range(wlo.max(whi * 0.7), whi);
        let length = hf.min(wf) * rng.uniform_range(0.4, 0.55);
        grower.grow(rng, start, heading, root_width, length, 0);
    }
    let (coverage, mask) = rasterize(&grower.segments, height, width);

    // Smooth background: a few low-frequency waves over a reddish base.
    let base = [0.78, 0.45, 0.25];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.uniform_range(0.0, 2.0 * PI);
            let freq = rng.uniform_range(0.5, 2.0) * 2.0 * PI / hf.max(wf);
            (angle.cos() * freq, angle.sin() * freq, rng.uniform_range(0.0, 2.0 * PI), rng.uniform_range(0.02, 0.06))
        })
        .collect();
    let contrast = rng.uniform_range(0.35, 0.55);
    let mut image = Tensor4::zeros([1, 3, height, width]);
    for y in 0..height {
        for x in 0..width {
            let shade: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let darken = 1.0 - contrast * coverage.get(y, x);
            for (c, b) in base.iter().enumerate() {
                let noise = params.noise_sigma * rng.normal();
                image.set(0, c, y, x, ((b + shade) * darken + noise).clamp(0.0, 1.0));
            }
        }
    }
    Sample::new(id, image, mask, None)
}

/// Generates `count` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic_vessels(
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Vec<Sample>> {
    params.validate(height, width)?;
    let root = RngStream::new(seed, 0x5eed);
    (0..count)
        .map(|i| {
            let mut rng = root.derive(i as u64);
            // retry until the tree leaves at least a couple of pixels inside the frame
            loop {
                let s = render_sample(params, height, width, &mut rng, format!("synth_{i:04}"))?;
                if s.mask.sum() >= 2.0 {
                    return Ok(s);
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance() {
        let s = Segment {
            a: [0.0, 0.0],
            b: [4.0, 0.0],
            width: 1.0,
        };
        assert_eq!(distance_to_segment([2.0, 3.0], &s), 3.0);
        assert_eq!(distance_to_segment([7.0, 4.0], &s), 5.0);
    }

    #[test]
    fn rejects_bad_params() {
        let p = SynthParams::default();
        assert!(p.validate(64, 60).is_err());
        let wide = SynthParams {
            width_range: [1.0, 40.0],
            ..p.clone()
        };
        assert!(wide.validate(64, 64).is_err());
        let inverted = SynthParams {
            width_range: [3.0, 2.0],
            ..p
        };
        assert!(inverted.validate(64, 64).is_err());
    }
}
