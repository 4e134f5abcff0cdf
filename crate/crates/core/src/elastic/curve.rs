//! Direct evaluation of the line-element interaction energy of polygonal curves.
//!
//! `E = 1/(8π) Σ_a Σ_{b≠a} (dl_a · dl_b) / max(r_ab, ε)` over every segment of
//! every curve, where `r_ab` is the distance between segment midpoints and `ε`
//! is a core cutoff regularizing the self-interaction singularity. This is an
//! O(M²) brute-force oracle for the spectral field form.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Positive,
    Negative,
}

impl Orientation {
    pub fn sign(self) -> f64 {
        match self {
            Orientation::Positive => 1.0,
            Orientation::Negative => -1.0,
        }
    }
}

/// Oriented polygonal curve; segments run between consecutive vertices
/// (plus last-to-first when closed) and are flipped for negative orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyCurve {
    vertices: Vec<[f64; 2]>,
    closed: bool,
    orientation: Orientation,
}

/// A segment's midpoint and oriented line element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineElement {
    pub midpoint: [f64; 2],
    pub dl: [f64; 2],
}

impl PolyCurve {
    pub fn new(vertices: Vec<[f64; 2]>, closed: bool, orientation: Orientation) -> Result<Self> {
        let min = if closed { 3 } else { 2 };
        if vertices.len() < min {
            return Err(Error::Input(format!(
                "{} curve needs at least {min} vertices, got {}",
                if closed { "closed" } else { "open" },
                vertices.len()
            )));
        }
        let curve = PolyCurve {
            vertices,
            closed,
            orientation,
        };
        if let Some(i) = curve.segments().position(|(a, b)| a == b) {
            return Err(Error::Input(format!("zero-length segment at vertex {i}")));
        }
        Ok(curve)
    }

    /// Regular polygon with `n` vertices approximating a circle, counter-clockwise
    /// in (x, y) before orientation is applied.
    pub fn circle(center: [f64; 2], radius: f64, n: usize, orientation: Orientation) -> Result<Self> {
        let vertices = (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect();
        Self::new(vertices, true, orientation)
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    fn segments(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        let count = if self.closed { n } else { n - 1 };
        (0..count).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn segment_count(&self) -> usize {
        if self.closed {
            self.vertices.len()
        } else {
            self.vertices.len() - 1
        }
    }

    pub fn line_elements(&self) -> Vec<LineElement> {
        let s = self.orientation.sign();
        self.segments()
            .map(|(a, b)| LineElement {
                midpoint: [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0],
                dl: [s * (b[0] - a[0]), s * (b[1] - a[1])],
            })
            .collect()
    }

    pub fn length(&self) -> f64 {
        self.segments().map(|(a, b)| (b[0] - a[0]).hypot(b[1] - a[1])).sum()
    }

    pub fn mean_segment_length(&self) -> f64 {
        self.length() / self.segment_count() as f64
    }
}

fn pair_sum(a: &[LineElement], b: &[LineElement], cutoff: f64, skip_diagonal: bool) -> f64 {
    let mut total = 0.0;
    for (i, ea) in a.iter().enumerate() {
        for (j, eb) in b.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            let r = (ea.midpoint[0] - eb.midpoint[0]).hypot(ea.midpoint[1] - eb.midpoint[1]);
            total += (ea.dl[0] * eb.dl[0] + ea.dl[1] * eb.dl[1]) / r.max(cutoff);
        }
    }
    total
}

fn check_cutoff(core_cutoff: f64) -> Result<()> {
    if !(core_cutoff > 0.0) {
        return Err(Error::Config(format!("core cutoff must be positive, got {core_cutoff}")));
    }
    Ok(())
}

/// Total energy of the union of `curves`, self-pairs excluded.
pub fn curve_energy_direct(curves: &[PolyCurve], core_cutoff: f64) -> Result<f64> {
    check_cutoff(core_cutoff)?;
    let elements: Vec<LineElement> = curves.iter().flat_map(|c| c.line_elements()).collect();
    Ok(pair_sum(&elements, &elements, core_cutoff, true) / (8.0 * PI))
}

/// Self energy `1/(8π) Σ_{a≠b}` of one curve.
pub fn curve_self_energy(curve: &PolyCurve, core_cutoff: f64) -> Result<f64> {
    curve_energy_direct(std::slice::from_ref(curve), core_cutoff)
}

/// Cross term `1/(4π) Σ_{a∈first} Σ_{b∈second}` between two curves.
pub fn curve_interaction_energy(first: &PolyCurve, second: &PolyCurve, core_cutoff: f64) -> Result<f64> {
    check_cutoff(core_cutoff)?;
    Ok(pair_sum(&first.line_elements(), &second.line_elements(), core_cutoff, false) / (4.0 * PI))
}
