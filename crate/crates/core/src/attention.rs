//! Global context aggregation at the network bottleneck.
//!
//! Two parallel branches share the input feature map `x` (one sample, `C`
//! channels over `N_p = H·W` positions, viewed as a `C × N_p` matrix):
//!
//! * spatial: `y_i = x_i + W_z Σ_j ω_ij (W_v x_j)` with
//!   `ω_ij = (W_q x_i)ᵀ (W_k x_j) / N_p`, where `i, j` index positions;
//! * channel: `z_i = x_i + Σ_j ω'_ij x_j` with `ω'_ij = ⟨x_i, x_j⟩ / N_p`,
//!   where `i, j` index channel maps.
//!
//! Similarities are plain dot products divided by `N_p`; there is no softmax.
//! The fused output keeps a single identity path: `x + Δ_spatial + Δ_channel`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, ParamTensor, RngStream, Tensor4};

/// The four 1×1 convolution kernels of the spatial branch, each `(C, C, 1, 1)`.
#[derive(Clone, Debug)]
pub struct SpatialAttentionWeights {
    pub query: ParamTensor,
    pub key: ParamTensor,
    pub value: ParamTensor,
    pub output: ParamTensor,
}

impl SpatialAttentionWeights {
    /// He-normal query/key/value kernels and a zero output kernel, so the
    /// spatial branch starts as the identity.
    pub fn new(prefix: &str, channels: usize, rng: &mut RngStream) -> Self {
        let dims = [channels, channels, 1, 1];
        SpatialAttentionWeights {
            query: ParamTensor::he_normal(format!("{prefix}.query"), dims, channels, rng),
            key: ParamTensor::he_normal(format!("{prefix}.key"), dims, channels, rng),
            value: ParamTensor::he_normal(format!("{prefix}.value"), dims, channels, rng),
            output: ParamTensor::zeros(format!("{prefix}.output"), dims),
        }
    }

    /// Builds weights from explicit `(C, C, 1, 1)` kernels.
    pub fn from_kernels(query: Tensor4, key: Tensor4, value: Tensor4, output: Tensor4) -> Result<Self> {
        let dims = query.dims();
        if dims[0] != dims[1] || dims[2] != 1 || dims[3] != 1 {
            return Err(Error::shape(format!("query {dims:?}"), "expected (C, C, 1, 1)"));
        }
        for t in [&key, &value, &output] {
            if t.dims() != dims {
                return Err(Error::shape(format!("{dims:?}"), format!("{:?}", t.dims())));
            }
        }
        Ok(SpatialAttentionWeights {
            query: ParamTensor::new("query", query),
            key: ParamTensor::new("key", key),
            value: ParamTensor::new("value", value),
            output: ParamTensor::new("output", output),
        })
    }

    pub fn channels(&self) -> usize {
        self.query.value.dims()[0]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 4] {
        [&mut self.query, &mut self.key, &mut self.value, &mut self.output]
    }

    pub fn params(&self) -> [&ParamTensor; 4] {
        [&self.query, &self.key, &self.value, &self.output]
    }

    fn check(&self, x: &Tensor4) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(
                format!("input {:?}", x.dims()),
                format!("attention weights for {} channels", self.channels()),
            ));
        }
        Ok(())
    }
}

/// Square similarity matrix, row-major: spatial `N_p × N_p` or channel `C × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub size: usize,
    pub entries: Vec<f64>,
}

impl AttentionMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }
}

/// Gradients of the spatial branch (and of the fused aggregator).
#[derive(Clone, Debug)]
pub struct SpatialGrads {
    pub input: Tensor4,
    pub query: Tensor4,
    pub key: Tensor4,
    pub value: Tensor4,
    pub output: Tensor4,
}

/// `W · X` for a `C × C` kernel and a `C × P` sample.
fn project(w: &Tensor4, x: &[f64], c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * p];
    gemm(c, c, p, w.data(), false, x, false, &mut out, 0.0);
    out
}

/// `ω = Qᵀ K / N_p` for `C × P` projections.
pub fn spatial_similarity(q: &[f64], k: &[f64], channels: usize, positions: usize) -> AttentionMatrix {
    let mut entries = vec![0.0; positions * positions];
    gemm(positions, channels, positions, q, true, k, false, &mut entries, 0.0);
    let inv = 1.0 / positions as f64;
    entries.iter_mut().for_each(|v| *v *= inv);
    AttentionMatrix { size: positions, entries }
}

/// `ω' = X Xᵀ / N_p` for a `C × P` sample.
pub fn channel_similarity(x: &[f64], channels: usize, positions: usize) -> AttentionMatrix {
    let mut entries = vec![0.0; channels * channels];
    gemm(channels, positions, channels, x, false, x, true, &mut entries, 0.0);
    let inv = 1.0 / positions as f64;
    entries.iter_mut().for_each(|v| *v *= inv);
    AttentionMatrix { size: channels, entries }
}

struct SpatialForward {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    omega: AttentionMatrix,
    /// `A = V ωᵀ`, the aggregated values before `W_z`.
    agg: Vec<f64>,
}

fn spatial_forward(x: &[f64], w: &SpatialAttentionWeights, c: usize, p: usize) -> SpatialForward {
    let q = project(&w.query.value, x, c, p);
    let k = project(&w.key.value, x, c, p);
    let v = project(&w.value.value, x, c, p);
    let omega = spatial_similarity(&q, &k, c, p);
    let mut agg = vec![0.0; c * p];
    gemm(c, p, p, &v, false, &omega.entries, true, &mut agg, 0.0);
    SpatialForward { q, k, v, omega, agg }
}

/// Spatial-attention global context aggregator, applied per sample.
pub fn spatial_aggregate(x: &Tensor4, w: &SpatialAttentionWeights) -> Result<Tensor4> {
    w.check(x)?;
    let (c, p) = (x.channels(), x.plane());
    let mut out = x.clone();
    for n in 0..x.batch() {
        let fwd = spatial_forward(x.sample(n), w, c, p);
        gemm(c, c, p, w.output.value.data(), false, &fwd.agg, false, out.sample_mut(n), 1.0);
    }
    Ok(out)
}

/// VJP of [`spatial_aggregate`] with respect to the input and all four kernels.
pub fn spatial_aggregate_vjp(x: &Tensor4, w: &SpatialAttentionWeights, grad_out: &Tensor4) -> Result<SpatialGrads> {
    w.check(x)?;
    x.expect_dims(grad_out)?;
    let (c, p) = (x.channels(), x.plane());
    let kdims = [c, c, 1, 1];
    let mut grads = SpatialGrads {
        input: grad_out.clone(),
        query: Tensor4::zeros(kdims),
        key: Tensor4::zeros(kdims),
        value: Tensor4::zeros(kdims),
        output: Tensor4::zeros(kdims),
    };
    let inv_p = 1.0 / p as f64;
    for n in 0..x.batch() {
        let xs = x.sample(n);
        let g = grad_out.sample(n);
        let fwd = spatial_forward(xs, w, c, p);

        // Y = X + Wz A
        gemm(c, p, c, g, false, &fwd.agg, true, grads.output.data_mut(), 1.0);
        let mut d_agg = vec![0.0; c * p];
        gemm(c, c, p, w.output.value.data(), true, g, false, &mut d_agg, 0.0);

        // A = V ωᵀ
        let mut d_omega = vec![0.0; p * p];
        gemm(p, c, p, &d_agg, true, &fwd.v, false, &mut d_omega, 0.0);
        let mut d_v = vec![0.0; c * p];
        gemm(c, p, p, &d_agg, false, &fwd.omega.entries, false, &mut d_v, 0.0);

        // ω = Qᵀ K / N_p
        let mut d_q = vec![0.0; c * p];
        gemm(c, p, p, &fwd.k, false, &d_omega, true, &mut d_q, 0.0);
        let mut d_k = vec![0.0; c * p];
        gemm(c, p, p, &fwd.q, false, &d_omega, false, &mut d_k, 0.0);
        d_q.iter_mut().chain(d_k.iter_mut()).for_each(|v| *v *= inv_p);

        let dx = grads.input.sample_mut(n);
        for (d_proj, kernel, d_kernel) in [
            (&d_q, &w.query.value, &mut grads.query),
            (&d_k, &w.key.value, &mut grads.key),
            (&d_v, &w.value.value, &mut grads.value),
        ] {
            gemm(c, p, c, d_proj, false, xs, true, d_kernel.data_mut(), 1.0);
            gemm(c, c, p, kernel.data(), true, d_proj, false, dx, 1.0);
        }
    }
    Ok(grads)
}

/// Channel-attention global context aggregator (parameter free), applied per sample.
pub fn channel_aggregate(x: &Tensor4) -> Result<Tensor4> {
    let (c, p) = (x.channels(), x.plane());
    let mut out = x.clone();
    for n in 0..x.batch() {
        let xs = x.sample(n);
        let omega = channel_similarity(xs, c, p);
        gemm(c, c, p, &omega.entries, false, xs, false, out.sample_mut(n), 1.0);
    }
    Ok(out)
}

/// VJP of [`channel_aggregate`].
///
/// With `Z = X + ω' X` and `ω' = X Xᵀ / N_p`:
/// `dX = G + ω' G + (G Xᵀ + X Gᵀ) X / N_p`.
pub fn channel_aggregate_vjp(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    x.expect_dims(grad_out)?;
    let (c, p) = (x.channels(), x.plane());
    let inv_p = 1.0 / p as f64;
    let mut dx = grad_out.clone();
    for n in 0..x.batch() {
        let xs = x.sample(n);
        let g = grad_out.sample(n);
        let omega = channel_similarity(xs, c, p);
        let mut gx = vec![0.0; c * c];
        gemm(c, p, c, g, false, xs, true, &mut gx, 0.0);
        let mut sym = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                sym[i * c + j] = (gx[i * c + j] + gx[j * c + i]) * inv_p;
            }
        }
        let d = dx.sample_mut(n);
        gemm(c, c, p, &omega.entries, false, g, false, d, 1.0);
        gemm(c, c, p, &sym, false, xs, false, d, 1.0);
    }
    Ok(dx)
}

/// Fused aggregator: `x + (spatial(x) - x) + (channel(x) - x)`.
pub fn agca_forward(x: &Tensor4, w: &SpatialAttentionWeights) -> Result<Tensor4> {
    let s = spatial_aggregate(x, w)?;
    let c = channel_aggregate(x)?;
    let mut out = s;
    for ((o, &cv), &xv) in out.data_mut().iter_mut().zip(c.data()).zip(x.data()) {
        *o += cv - xv;
    }
    Ok(out)
}

/// VJP of [`agca_forward`].
pub fn agca_vjp(x: &Tensor4, w: &SpatialAttentionWeights, grad_out: &Tensor4) -> Result<SpatialGrads> {
    let mut grads = spatial_aggregate_vjp(x, w, grad_out)?;
    let dc = channel_aggregate_vjp(x, grad_out)?;
    for ((d, &c), &g) in grads.input.data_mut().iter_mut().zip(dc.data()).zip(grad_out.data()) {
        *d += c - g;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(dims: [usize; 4], rng: &mut RngStream) -> Tensor4 {
        Tensor4::from_fn(dims, |_, _, _, _| rng.uniform_range(-1.0, 1.0))
    }

    fn random_weights(c: usize, rng: &mut RngStream) -> SpatialAttentionWeights {
        let d = [c, c, 1, 1];
        SpatialAttentionWeights::from_kernels(random(d, rng), random(d, rng), random(d, rng), random(d, rng)).unwrap()
    }

    #[test]
    fn zero_output_kernel_gives_identity() {
        let mut rng = RngStream::new(1, 0);
        let x = random([2, 3, 4, 4], &mut rng);
        let mut w = random_weights(3, &mut rng);
        w.output.value.fill(0.0);
        assert_eq!(spatial_aggregate(&x, &w).unwrap(), x);
    }

    #[test]
    fn scalar_case() {
        let one = Tensor4::filled([1, 1, 1, 1], 1.0);
        let w = SpatialAttentionWeights::from_kernels(one.clone(), one.clone(), one.clone(), one).unwrap();
        let x = Tensor4::filled([1, 1, 1, 1], 2.0);
        let y = spatial_aggregate(&x, &w).unwrap();
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn channel_branch_zero_and_single_channel() {
        let z = Tensor4::zeros([1, 3, 2, 2]);
        assert_eq!(channel_aggregate(&z).unwrap(), z);

        let mut rng = RngStream::new(2, 0);
        let x = random([1, 1, 3, 3], &mut rng);
        let norm2: f64 = x.data().iter().map(|v| v * v).sum();
        let expected = x.map(|v| v + norm2 / 9.0 * v);
        let got = channel_aggregate(&x).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = RngStream::new(3, 0);
        let w = random_weights(4, &mut rng);
        let x = Tensor4::zeros([1, 3, 2, 2]);
        assert!(matches!(spatial_aggregate(&x, &w), Err(Error::Shape { .. })));
    }

    #[test]
    fn fused_output_with_zero_output_kernel() {
        let mut rng = RngStream::new(4, 0);
        let mut w = random_weights(2, &mut rng);
        w.output.value.fill(0.0);
        let zero = Tensor4::zeros([1, 2, 3, 3]);
        assert_eq!(agca_forward(&zero, &w).unwrap(), zero);
        let x = random([1, 2, 3, 3], &mut rng);
        assert_eq!(agca_forward(&x, &w).unwrap(), channel_aggregate(&x).unwrap());
    }

    #[test]
    fn similarity_shapes() {
        let mut rng = RngStream::new(5, 0);
        let x = random([1, 3, 2, 5], &mut rng);
        let w = random_weights(3, &mut rng);
        let q = project(&w.query.value, x.sample(0), 3, 10);
        let k = project(&w.key.value, x.sample(0), 3, 10);
        assert_eq!(spatial_similarity(&q, &k, 3, 10).entries.len(), 100);
        let cm = channel_similarity(x.sample(0), 3, 10);
        assert_eq!(cm.size, 3);
        assert!((cm.get(0, 1) - cm.get(1, 0)).abs() < 1e-15);
    }
}
