//! DropBlock: structured dropout that zeroes square regions of feature maps.
//!
//! Seeds are drawn only where a full block fits, at rate
//! `drop_rate / bs² · HW / ((H - bs + 1)(W - bs + 1))`, so the expected number
//! of seeded cells equals `drop_rate · HW`. One mask is shared by every channel
//! of a sample and survivors are rescaled by `total / kept`.

use super::{Mode, RngStream, Tensor4};
use crate::error::{Error, Result};

/// Per-sample multiplicative mask (zero or the rescale factor), shared across channels.
#[derive(Clone, Debug)]
pub struct DropMask {
    plane: usize,
    factors: Vec<f64>,
}

impl DropMask {
    pub fn factors(&self, sample: usize) -> &[f64] {
        &self.factors[sample * self.plane..(sample + 1) * self.plane]
    }

    /// Fraction of zeroed positions in one sample.
    pub fn dropped_fraction(&self, sample: usize) -> f64 {
        let f = self.factors(sample);
        f.iter().filter(|&&v| v == 0.0).count() as f64 / f.len() as f64
    }
}

pub fn validate(block_size: usize, drop_rate: f64, height: usize, width: usize) -> Result<()> {
    if block_size == 0 || block_size % 2 == 0 {
        return Err(Error::Config(format!("DropBlock size must be a positive odd integer, got {block_size}")));
    }
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(Error::Config(format!("DropBlock rate must lie in [0, 1), got {drop_rate}")));
    }
    if block_size > height.min(width) {
        return Err(Error::Config(format!(
            "DropBlock size {block_size} exceeds feature map {height}x{width}"
        )));
    }
    Ok(())
}

/// Seed probability per valid block position.
pub fn seed_rate(block_size: usize, drop_rate: f64, height: usize, width: usize) -> f64 {
    let bs = block_size as f64;
    let valid = ((height - block_size + 1) * (width - block_size + 1)) as f64;
    drop_rate / (bs * bs) * (height * width) as f64 / valid
}

fn sample_mask(h: usize, w: usize, block_size: usize, gamma: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut keep = vec![true; h * w];
    for top in 0..=h - block_size {
        for left in 0..=w - block_size {
            if rng.bernoulli(gamma) {
                for y in top..top + block_size {
                    keep[y * w + left..y * w + left + block_size].fill(false);
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 { 0.0 } else { (h * w) as f64 / kept as f64 };
    keep.into_iter().map(|k| if k { scale } else { 0.0 }).collect()
}

/// Applies DropBlock. Returns the mask when one was sampled (train mode with
/// a positive rate); `None` means the op acted as the identity.
pub fn dropblock(
    x: &Tensor4,
    block_size: usize,
    drop_rate: f64,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor4, Option<DropMask>)> {
    let [n, c, h, w] = x.dims();
    validate(block_size, drop_rate, h, w)?;
    if mode == Mode::Eval || drop_rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let gamma = seed_rate(block_size, drop_rate, h, w);
    let mut factors = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        factors.extend(sample_mask(h, w, block_size, gamma, rng));
    }
    let mask = DropMask { plane: h * w, factors };
    let out = apply(x, &mask, n, c);
    Ok((out, Some(mask)))
}

fn apply(x: &Tensor4, mask: &DropMask, n: usize, c: usize) -> Tensor4 {
    let mut out = x.clone();
    for ni in 0..n {
        let f = mask.factors(ni);
        for ci in 0..c {
            for (v, &m) in out.plane_of_mut(ni, ci).iter_mut().zip(f) {
                *v *= m;
            }
        }
    }
    out
}

/// VJP of [`dropblock`]: the same mask applied to the upstream gradient.
pub fn dropblock_vjp(mask: Option<&DropMask>, grad_out: &Tensor4) -> Tensor4 {
    match mask {
        None => grad_out.clone(),
        Some(m) => apply(grad_out, m, grad_out.batch(), grad_out.channels()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_and_eval_are_identity() {
        let mut rng = RngStream::new(5, 0);
        let x = Tensor4::from_fn([2, 3, 9, 9], |_, _, _, _| rng.normal());
        let (y, m) = dropblock(&x, 7, 0.0, Mode::Train, &mut rng).unwrap();
        assert!(m.is_none());
        assert_eq!(y, x);
        let (y, m) = dropblock(&x, 7, 0.5, Mode::Eval, &mut rng).unwrap();
        assert!(m.is_none());
        assert_eq!(y, x);
    }

    #[test]
    fn mask_is_shared_across_channels_and_rescaled() {
        let mut rng = RngStream::new(6, 0);
        let x = Tensor4::filled([1, 4, 16, 16], 1.0);
        let (y, m) = dropblock(&x, 3, 0.3, Mode::Train, &mut rng).unwrap();
        let m = m.unwrap();
        for c in 1..4 {
            assert_eq!(y.plane_of(0, c), y.plane_of(0, 0));
        }
        // the rescale preserves the total mass of a constant map
        assert!((y.plane_of(0, 0).iter().sum::<f64>() - 256.0).abs() < 1e-9 || m.dropped_fraction(0) == 1.0);
    }

    #[test]
    fn rejects_bad_configuration() {
        let x = Tensor4::zeros([1, 1, 5, 5]);
        let mut rng = RngStream::new(0, 0);
        assert!(dropblock(&x, 7, 0.1, Mode::Train, &mut rng).is_err());
        assert!(dropblock(&x, 2, 0.1, Mode::Train, &mut rng).is_err());
        assert!(dropblock(&x, 3, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let x = Tensor4::filled([2, 2, 12, 12], 1.0);
        let (a, _) = dropblock(&x, 5, 0.2, Mode::Train, &mut RngStream::new(11, 4)).unwrap();
        let (b, _) = dropblock(&x, 5, 0.2, Mode::Train, &mut RngStream::new(11, 4)).unwrap();
        assert_eq!(a, b);
    }
}
