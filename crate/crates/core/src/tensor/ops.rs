use super::Tensor4;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn relu_vjp(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    x.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels(x: &Tensor4) -> Result<Tensor4> {
    let [n, c, _, _] = x.dims();
    if c < 2 {
        return Err(Error::Config(format!("softmax needs at least 2 channels, got {c}")));
    }
    let plane = x.plane();
    let mut out = Tensor4::zeros(x.dims());
    for ni in 0..n {
        let src = x.sample(ni);
        let dst = out.sample_mut(ni);
        for p in 0..plane {
            let max = (0..c).map(|ci| src[ci * plane + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for ci in 0..c {
                let e = (src[ci * plane + p] - max).exp();
                dst[ci * plane + p] = e;
                total += e;
            }
            for ci in 0..c {
                dst[ci * plane + p] /= total;
            }
        }
    }
    Ok(out)
}

/// VJP of [`softmax_channels`] given its output `y`.
pub fn softmax_channels_vjp(y: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    y.expect_dims(grad_out)?;
    let [n, c, _, _] = y.dims();
    let plane = y.plane();
    let mut dx = Tensor4::zeros(y.dims());
    for ni in 0..n {
        let (ys, gs) = (y.sample(ni), grad_out.sample(ni));
        let d = dx.sample_mut(ni);
        for p in 0..plane {
            let inner: f64 = (0..c).map(|ci| ys[ci * plane + p] * gs[ci * plane + p]).sum();
            for ci in 0..c {
                let i = ci * plane + p;
                d[i] = ys[i] * (gs[i] - inner);
            }
        }
    }
    Ok(dx)
}

/// Stacks the channels of `a` followed by those of `b`.
pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    for ni in 0..n {
        data.extend_from_slice(a.sample(ni));
        data.extend_from_slice(b.sample(ni));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data)
}

/// VJP of [`concat_channels`]: splits the gradient after `first` channels.
pub fn split_channels(grad: &Tensor4, first: usize) -> Result<(Tensor4, Tensor4)> {
    let [n, c, h, w] = grad.dims();
    if first == 0 || first >= c {
        return Err(Error::shape(format!("split at {first}"), format!("{:?}", grad.dims())));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for ni in 0..n {
        let s = grad.sample(ni);
        a.extend_from_slice(&s[..first * plane]);
        b.extend_from_slice(&s[first * plane..]);
    }
    Ok((
        Tensor4::from_vec([n, first, h, w], a)?,
        Tensor4::from_vec([n, c - first, h, w], b)?,
    ))
}
