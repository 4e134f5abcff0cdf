use serde::{Deserialize, Serialize};

use super::{Mode, Tensor4};
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Exponential moving averages of per-channel batch statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// False until a train-mode update or an explicit [`RunningStats::initialize`].
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Marks the current values (mean 0, variance 1 unless changed) as usable in eval mode.
    pub fn initialize(&mut self) {
        self.initialized = true;
    }
}

/// Saved forward state for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    x_hat: Tensor4,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor4,
    pub gamma: Tensor4,
    pub beta: Tensor4,
}

fn check_affine(x: &Tensor4, gamma: &Tensor4, beta: &Tensor4, stats: &RunningStats) -> Result<()> {
    let c = x.channels();
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.dims() != [1, c, 1, 1] {
            return Err(Error::shape(format!("{name} {:?}", t.dims()), format!("input {:?}", x.dims())));
        }
    }
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(
            format!("running stats for {} channels", stats.mean.len()),
            format!("input {:?}", x.dims()),
        ));
    }
    Ok(())
}

/// Per-channel batch normalization over (N, H, W).
pub fn batchnorm2d(
    x: &Tensor4,
    gamma: &Tensor4,
    beta: &Tensor4,
    stats: &mut RunningStats,
    mode: Mode,
    epsilon: f64,
) -> Result<(Tensor4, BatchNormCache)> {
    check_affine(x, gamma, beta, stats)?;
    if epsilon <= 0.0 {
        return Err(Error::Config("batch norm epsilon must be positive".into()));
    }
    let [n, c, _, _] = x.dims();
    let plane = x.plane();
    let count = (n * plane) as f64;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let s: f64 = (0..n).map(|ni| x.plane_of(ni, ci).iter().sum::<f64>()).sum();
                let mu = s / count;
                let ss: f64 = (0..n)
                    .map(|ni| x.plane_of(ni, ci).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
                    .sum();
                mean[ci] = mu;
                var[ci] = ss / count;
            }
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ci in 0..c {
                stats.mean[ci] = (1.0 - BN_MOMENTUM) * stats.mean[ci] + BN_MOMENTUM * mean[ci];
                stats.var[ci] = (1.0 - BN_MOMENTUM) * stats.var[ci] + BN_MOMENTUM * var[ci] * unbias;
            }
            stats.initialized = true;
            (mean, var)
        }
        Mode::Eval => {
            if !stats.initialized {
                return Err(Error::Config(
                    "batch norm in eval mode needs initialized running statistics".into(),
                ));
            }
            (stats.mean.clone(), stats.var.clone())
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(x.dims());
    let mut out = Tensor4::zeros(x.dims());
    for ni in 0..n {
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let src = x.plane_of(ni, ci);
            let xh = x_hat.plane_of_mut(ni, ci);
            for (h, &v) in xh.iter_mut().zip(src) {
                *h = (v - mean[ci]) * inv_std[ci];
            }
            let xh = x_hat.plane_of(ni, ci);
            for (o, &h) in out.plane_of_mut(ni, ci).iter_mut().zip(xh) {
                *o = g * h + b;
            }
        }
    }
    Ok((out, BatchNormCache { x_hat, inv_std, mode }))
}

/// VJP of [`batchnorm2d`]. In train mode the batch statistics are part of the graph.
pub fn batchnorm2d_vjp(cache: &BatchNormCache, gamma: &Tensor4, grad_out: &Tensor4) -> Result<BatchNormGrads> {
    cache.x_hat.expect_dims(grad_out)?;
    let [n, c, _, _] = grad_out.dims();
    let count = (n * grad_out.plane()) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        for ni in 0..n {
            let g = grad_out.plane_of(ni, ci);
            let h = cache.x_hat.plane_of(ni, ci);
            dbeta[ci] += g.iter().sum::<f64>();
            dgamma[ci] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    let mut dx = Tensor4::zeros(grad_out.dims());
    for ci in 0..c {
        let scale = gamma.data()[ci] * cache.inv_std[ci];
        for ni in 0..n {
            let g = grad_out.plane_of(ni, ci);
            let h = cache.x_hat.plane_of(ni, ci);
            let d = dx.plane_of_mut(ni, ci);
            match cache.mode {
                Mode::Train => {
                    let (sb, sg) = (dbeta[ci] / count, dgamma[ci] / count);
                    for i in 0..d.len() {
                        d[i] = scale * (g[i] - sb - h[i] * sg);
                    }
                }
                Mode::Eval => {
                    for i in 0..d.len() {
                        d[i] = scale * g[i];
                    }
                }
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: Tensor4::channel_vector(dgamma),
        beta: Tensor4::channel_vector(dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = RngStream::new(9, 0);
        let x = Tensor4::from_fn([3, 2, 5, 4], |_, c, _, _| 3.0 + c as f64 + 2.0 * rng.normal());
        let gamma = Tensor4::filled([1, 2, 1, 1], 1.0);
        let beta = Tensor4::zeros([1, 2, 1, 1]);
        let mut stats = RunningStats::new(2);
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &mut stats, Mode::Train, BN_EPSILON).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|n| y.plane_of(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            // epsilon shrinks the variance by var/(var+eps)
            assert!((v - 1.0).abs() < 1e-5, "variance {v}");
        }
        assert!(stats.initialized);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor4::filled([2, 1, 3, 3], 4.2);
        let gamma = Tensor4::filled([1, 1, 1, 1], 1.0);
        let beta = Tensor4::zeros([1, 1, 1, 1]);
        let mut stats = RunningStats::new(1);
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &mut stats, Mode::Train, BN_EPSILON).unwrap();
        assert!(y.max_abs() < 1e-6);
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor4::from_fn([1, 1, 2, 2], |_, _, y, x| (2 * y + x) as f64);
        let gamma = Tensor4::filled([1, 1, 1, 1], 1.0);
        let beta = Tensor4::zeros([1, 1, 1, 1]);
        let mut stats = RunningStats::new(1);
        batchnorm2d(&x, &gamma, &beta, &mut stats, Mode::Train, BN_EPSILON).unwrap();
        // batch mean 1.5, unbiased variance 5/3
        assert!((stats.mean[0] - 0.15).abs() < 1e-15);
        assert!((stats.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_requires_initialized_stats() {
        let x = Tensor4::filled([1, 1, 2, 2], 1.0);
        let gamma = Tensor4::filled([1, 1, 1, 1], 1.0);
        let beta = Tensor4::zeros([1, 1, 1, 1]);
        let mut stats = RunningStats::new(1);
        assert!(batchnorm2d(&x, &gamma, &beta, &mut stats, Mode::Eval, BN_EPSILON).is_err());
        stats.initialize();
        let (y, _) = batchnorm2d(&x, &gamma, &beta, &mut stats, Mode::Eval, BN_EPSILON).unwrap();
        assert!((y.data()[0] - 1.0 / (1.0 + BN_EPSILON).sqrt()).abs() < 1e-15);
    }
}
