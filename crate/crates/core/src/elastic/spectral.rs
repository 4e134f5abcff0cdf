//! Spectral evaluation of the elastic interaction energy.
//!
//! For a combined field `u`, the energy of the boundary line elements coupled
//! through a `1/r` kernel reduces in Fourier space to a `|k|`-weighted norm:
//!
//! ```text
//! E(u) = ½ Σ_k |k| |û(k)|²,     û = unitary DFT of u
//! ∂E/∂u = Re IDFT(|k| û)
//! ```
//!
//! Absolute physical constants are absorbed into the loss weight.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Field2D;
use crate::error::{Error, Result};

/// Sign carried by the ground-truth field: `u = α·H(φ) + TARGET_SIGN·g`.
pub const TARGET_SIGN: f64 = -1.0;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticConfig {
    /// Weight of the predicted indicator in the combined field.
    pub alpha: f64,
    /// Transition width of the smoothed Heaviside.
    pub heaviside_width: f64,
    /// 1 = periodic grid, 2 = zero-pad to twice each extent.
    pub pad_factor: usize,
}

impl Default for ElasticConfig {
    fn default() -> Self {
        ElasticConfig {
            alpha: 1.0,
            heaviside_width: 0.1,
            pad_factor: 1,
        }
    }
}

impl ElasticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.heaviside_width > 0.0) {
            return Err(Error::Config(format!(
                "heaviside width must be positive, got {}",
                self.heaviside_width
            )));
        }
        if !matches!(self.pad_factor, 1 | 2) {
            return Err(Error::Config(format!("pad factor must be 1 or 2, got {}", self.pad_factor)));
        }
        Ok(())
    }
}

/// `H_β(φ) = ½ (1 + (2/π) arctan(φ/β))`.
pub fn smoothed_heaviside(phi: &Field2D, width: f64) -> Field2D {
    phi.map(|p| heaviside(p, width))
}

/// `H'_β(φ) = β / (π (β² + φ²))`.
pub fn smoothed_heaviside_derivative(phi: &Field2D, width: f64) -> Field2D {
    phi.map(|p| heaviside_derivative(p, width))
}

#[inline]
pub fn heaviside(phi: f64, width: f64) -> f64 {
    0.5 * (1.0 + 2.0 / PI * (phi / width).atan())
}

#[inline]
pub fn heaviside_derivative(phi: f64, width: f64) -> f64 {
    width / (PI * (width * width + phi * phi))
}

/// `|k|` sampled on the DFT frequency grid of an `height × width` domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralMultiplier {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SpectralMultiplier {
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Entry at integer frequency indices `(ky, kx)` in DFT order.
    pub fn at(&self, ky: usize, kx: usize) -> f64 {
        self.values[ky * self.width + kx]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

fn angular_frequency(index: usize, extent: usize) -> f64 {
    let signed = if index <= extent / 2 {
        index as f64
    } else {
        index as f64 - extent as f64
    };
    2.0 * PI * signed / extent as f64
}

pub fn fourier_multiplier(height: usize, width: usize) -> Result<SpectralMultiplier> {
    if height < 4 || width < 4 {
        return Err(Error::Config(format!(
            "spectral grid must be at least 4x4, got {height}x{width}"
        )));
    }
    let mut values = Vec::with_capacity(height * width);
    for ky in 0..height {
        let fy = angular_frequency(ky, height);
        for kx in 0..width {
            let fx = angular_frequency(kx, width);
            values.push((fy * fy + fx * fx).sqrt());
        }
    }
    Ok(SpectralMultiplier { height, width, values })
}

/// Cached FFT plans and multiplier for one grid size.
pub struct SpectralOperator {
    height: usize,
    width: usize,
    multiplier: SpectralMultiplier,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl SpectralOperator {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        let multiplier = fourier_multiplier(height, width)?;
        let mut planner = FftPlanner::new();
        Ok(SpectralOperator {
            height,
            width,
            multiplier,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        })
    }

    pub fn multiplier(&self) -> &SpectralMultiplier {
        &self.multiplier
    }

    fn transform(&self, buf: &mut Vec<Complex64>, forward: bool) {
        let (h, w) = (self.height, self.width);
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process(buf);
        let mut t = vec![Complex64::default(); h * w];
        for y in 0..h {
            for x in 0..w {
                t[x * h + y] = buf[y * w + x];
            }
        }
        col.process(&mut t);
        for x in 0..w {
            for y in 0..h {
                buf[y * w + x] = t[x * h + y];
            }
        }
    }

    /// Unnormalized forward DFT.
    fn spectrum(&self, u: &Field2D) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut buf, true);
        buf
    }

    fn check(&self, u: &Field2D) -> Result<()> {
        if u.dims() != (self.height, self.width) {
            return Err(Error::shape(
                format!("field {:?}", u.dims()),
                format!("operator {}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }

    /// `½ Σ |k| |û|²` with the unitary transform.
    pub fn energy(&self, u: &Field2D) -> Result<f64> {
        self.check(u)?;
        let spec = self.spectrum(u);
        let norm = (self.height * self.width) as f64;
        let e: f64 = spec
            .iter()
            .zip(self.multiplier.values())
            .map(|(z, m)| m * z.norm_sqr())
            .sum();
        Ok(0.5 * e / norm)
    }

    /// `Re IDFT(|k| û)`: the gradient of [`Self::energy`].
    pub fn apply(&self, u: &Field2D) -> Result<Field2D> {
        self.check(u)?;
        let mut spec = self.spectrum(u);
        for (z, m) in spec.iter_mut().zip(self.multiplier.values()) {
            *z *= *m;
        }
        self.transform(&mut spec, false);
        let norm = (self.height * self.width) as f64;
        Field2D::from_vec(self.height, self.width, spec.iter().map(|z| z.re / norm).collect())
    }
}

fn padded_operator(height: usize, width: usize, pad_factor: usize) -> Result<SpectralOperator> {
    SpectralOperator::new(height * pad_factor, width * pad_factor)
}

/// Elastic energy of an arbitrary combined field.
pub fn elastic_energy_field(u: &Field2D, config: &ElasticConfig) -> Result<f64> {
    config.validate()?;
    let op = padded_operator(u.height(), u.width(), config.pad_factor)?;
    if config.pad_factor == 1 {
        op.energy(u)
    } else {
        op.energy(&u.zero_pad(u.height() * config.pad_factor, u.width() * config.pad_factor))
    }
}

fn check_loss_inputs(pred_prob: &Field2D, target_mask: &Field2D) -> Result<()> {
    pred_prob.expect_dims(target_mask)?;
    if let Some(v) = pred_prob
        .data()
        .iter()
        .find(|&&v| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&v))
    {
        return Err(Error::Domain(format!("prediction value {v} outside [0, 1]")));
    }
    if !target_mask.is_binary() {
        return Err(Error::Domain("target mask must contain only 0 and 1".into()));
    }
    Ok(())
}

/// `u = α·pred + TARGET_SIGN·g`.
pub fn combined_field(pred: &Field2D, target: &Field2D, alpha: f64) -> Result<Field2D> {
    pred.zip_map(target, |p, g| alpha * p + TARGET_SIGN * g)
}

/// Reusable evaluator for one grid size; avoids re-planning FFTs per call.
pub struct ElasticLoss {
    config: ElasticConfig,
    height: usize,
    width: usize,
    op: SpectralOperator,
}

impl ElasticLoss {
    pub fn new(height: usize, width: usize, config: ElasticConfig) -> Result<Self> {
        config.validate()?;
        let op = padded_operator(height, width, config.pad_factor)?;
        Ok(ElasticLoss {
            config,
            height,
            width,
            op,
        })
    }

    pub fn config(&self) -> &ElasticConfig {
        &self.config
    }

    fn combined(&self, pred_prob: &Field2D, target_mask: &Field2D) -> Result<Field2D> {
        check_loss_inputs(pred_prob, target_mask)?;
        if pred_prob.dims() != (self.height, self.width) {
            return Err(Error::shape(
                format!("field {:?}", pred_prob.dims()),
                format!("loss grid {}x{}", self.height, self.width),
            ));
        }
        let u = combined_field(pred_prob, target_mask, self.config.alpha)?;
        let p = self.config.pad_factor;
        Ok(if p == 1 { u } else { u.zero_pad(self.height * p, self.width * p) })
    }

    pub fn value(&self, pred_prob: &Field2D, target_mask: &Field2D) -> Result<f64> {
        let u = self.combined(pred_prob, target_mask)?;
        self.op.energy(&u)
    }

    /// Loss value and `∂L/∂pred`.
    pub fn value_and_grad(&self, pred_prob: &Field2D, target_mask: &Field2D) -> Result<(f64, Field2D)> {
        let u = self.combined(pred_prob, target_mask)?;
        let value = self.op.energy(&u)?;
        let alpha = self.config.alpha;
        let grad = self
            .op
            .apply(&u)?
            .crop(self.height, self.width)
            .map(|v| alpha * v);
        Ok((value, grad))
    }
}

/// Elastic interaction loss between a foreground probability map and a binary target.
pub fn elastic_loss(pred_prob: &Field2D, target_mask: &Field2D, config: &ElasticConfig) -> Result<f64> {
    ElasticLoss::new(pred_prob.height(), pred_prob.width(), *config)?.value(pred_prob, target_mask)
}

/// Exact gradient of [`elastic_loss`] with respect to `pred_prob`.
pub fn elastic_loss_grad(pred_prob: &Field2D, target_mask: &Field2D, config: &ElasticConfig) -> Result<Field2D> {
    Ok(ElasticLoss::new(pred_prob.height(), pred_prob.width(), *config)?
        .value_and_grad(pred_prob, target_mask)?
        .1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_profile() {
        let w = 0.1;
        assert_eq!(heaviside(0.0, w), 0.5);
        assert!(heaviside(10.0 * w, w) >= 0.96);
        assert!(heaviside(-10.0 * w, w) <= 0.04);
        assert!((heaviside_derivative(0.0, w) - 1.0 / (PI * w)).abs() < 1e-12);
    }

    #[test]
    fn multiplier_entries() {
        let m = fourier_multiplier(64, 64).unwrap();
        assert_eq!(m.at(0, 0), 0.0);
        assert!((m.at(0, 1) - 2.0 * PI / 64.0).abs() < 1e-15);
        let m = fourier_multiplier(8, 8).unwrap();
        for ky in 0..8 {
            for kx in 0..8 {
                assert_eq!(m.at(ky, kx), m.at((8 - ky) % 8, (8 - kx) % 8));
                assert!(m.at(ky, kx) >= 0.0);
            }
        }
        assert!(fourier_multiplier(3, 8).is_err());
    }

    #[test]
    fn constant_field_has_no_energy() {
        let u = Field2D::filled(16, 12, 3.7);
        assert!(elastic_energy_field(&u, &ElasticConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn single_cosine_mode() {
        // cos(2πx/W) on 32x32: two modes (0, ±1), unnormalized amplitude HW/2,
        // unitary amplitude HW/2/sqrt(HW) = 16, |k| = 2π/32 each.
        let u = Field2D::from_fn(32, 32, |_, x| (2.0 * PI * x as f64 / 32.0).cos());
        let expected = 0.5 * 2.0 * 16.0f64.powi(2) * (2.0 * PI / 32.0);
        let e = elastic_energy_field(&u, &ElasticConfig::default()).unwrap();
        assert!((e - expected).abs() < 1e-10, "{e} vs {expected}");
    }

    #[test]
    fn exact_match_has_zero_loss_and_gradient() {
        let g = Field2D::from_fn(16, 16, |y, x| if (4..10).contains(&y) && (3..12).contains(&x) { 1.0 } else { 0.0 });
        let cfg = ElasticConfig::default();
        assert!(elastic_loss(&g, &g, &cfg).unwrap().abs() < 1e-12);
        assert!(elastic_loss_grad(&g, &g, &cfg).unwrap().max_abs() < 1e-12);
        let half = Field2D::filled(16, 16, 0.5);
        assert!(elastic_loss(&half, &g, &cfg).unwrap() > 0.0);
    }

    #[test]
    fn periodic_gradient_sums_to_zero() {
        let g = Field2D::from_fn(12, 12, |y, x| ((y + x) % 3 == 0) as u8 as f64);
        let p = Field2D::from_fn(12, 12, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        let grad = elastic_loss_grad(&p, &g, &ElasticConfig::default()).unwrap();
        assert!(grad.sum().abs() < 1e-9);
    }

    #[test]
    fn domain_errors() {
        let g = Field2D::zeros(8, 8);
        let cfg = ElasticConfig::default();
        let bad = Field2D::filled(8, 8, 1.1);
        assert!(matches!(elastic_loss(&bad, &g, &cfg), Err(Error::Domain(_))));
        let soft = Field2D::filled(8, 8, 0.5);
        assert!(matches!(elastic_loss(&soft, &soft, &cfg), Err(Error::Domain(_))));
        let cfg3 = ElasticConfig { pad_factor: 3, ..cfg };
        assert!(matches!(elastic_loss(&soft, &g, &cfg3), Err(Error::Config(_))));
    }
}
