//! Layers with cached forward state and explicit backward passes.

use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, batchnorm2d_vjp, conv2d, conv2d_vjp, conv_transpose2d, conv_transpose2d_vjp, dropblock,
    dropblock_vjp, relu, relu_vjp, BatchNormCache, DropMask, Mode, ParamTensor, RngStream, RunningStats, Tensor4,
    BN_EPSILON,
};

fn missing_cache(layer: &str) -> Error {
    Error::Input(format!("{layer}: backward called without a cached forward pass"))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamTensor,
    pub bias: ParamTensor,
    stride: usize,
    padding: usize,
    input: Option<Tensor4>,
}

impl Conv {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, rng: &mut RngStream) -> Self {
        Conv {
            kernel: ParamTensor::he_normal(format!("{name}.weight"), [cout, cin, k, k], cin * k * k, rng),
            bias: ParamTensor::zeros(format!("{name}.bias"), [1, cout, 1, 1]),
            stride,
            padding,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv2d(x, &self.kernel.value, &self.bias.value, self.stride, self.padding)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.kernel.name))?;
        let g = conv2d_vjp(&x, &self.kernel.value, self.stride, self.padding, grad)?;
        self.kernel.accumulate(&g.kernel);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.kernel, &self.bias]
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct UpConv {
    pub kernel: ParamTensor,
    pub bias: ParamTensor,
    input: Option<Tensor4>,
}

impl UpConv {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut RngStream) -> Self {
        UpConv {
            // each output pixel receives exactly one tap per input channel
            kernel: ParamTensor::he_normal(format!("{name}.weight"), [cin, cout, 2, 2], cin, rng),
            bias: ParamTensor::zeros(format!("{name}.bias"), [1, cout, 1, 1]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = conv_transpose2d(x, &self.kernel.value, &self.bias.value, 2)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.kernel.name))?;
        let g = conv_transpose2d_vjp(&x, &self.kernel.value, 2, grad)?;
        self.kernel.accumulate(&g.kernel);
        self.bias.accumulate(&g.bias);
        Ok(g.input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.kernel, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.kernel, &self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    pub stats: RunningStats,
    cache: Option<BatchNormCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: ParamTensor::new(format!("{name}.gamma"), Tensor4::filled([1, channels, 1, 1], 1.0)),
            beta: ParamTensor::zeros(format!("{name}.beta"), [1, channels, 1, 1]),
            stats: RunningStats::new(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode, calibrate: bool) -> Result<Tensor4> {
        let (y, cache) = batchnorm2d(x, &self.gamma.value, &self.beta.value, &mut self.stats, mode, BN_EPSILON)?;
        if calibrate {
            set_to_batch_statistics(&mut self.stats, x);
        }
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.take().ok_or_else(|| missing_cache(&self.name))?;
        let g = batchnorm2d_vjp(&cache, &self.gamma.value, grad)?;
        self.gamma.accumulate(&g.gamma);
        self.beta.accumulate(&g.beta);
        Ok(g.input)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.gamma, &self.beta]
    }
}

/// Overwrites running statistics with the (biased) statistics of `x`, so an
/// eval-mode pass normalizes `x` exactly as a train-mode pass does.
fn set_to_batch_statistics(stats: &mut RunningStats, x: &Tensor4) {
    let [n, c, _, _] = x.dims();
    let count = (n * x.plane()) as f64;
    for ci in 0..c {
        let mean = (0..n).map(|ni| x.plane_of(ni, ci).iter().sum::<f64>()).sum::<f64>() / count;
        let var = (0..n)
            .map(|ni| x.plane_of(ni, ci).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
            .sum::<f64>()
            / count;
        stats.mean[ci] = mean;
        stats.var[ci] = var;
    }
    stats.initialized = true;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropBlockSpec {
    pub block_size: usize,
    pub rate: f64,
}

impl DropBlockSpec {
    /// Block size used on an `h × w` map: the configured size, reduced to the
    /// largest odd size that fits.
    pub fn effective_size(&self, h: usize, w: usize) -> usize {
        let fit = h.min(w);
        let fit = if fit % 2 == 0 { fit - 1 } else { fit };
        self.block_size.min(fit)
    }
}

/// Forward-pass context shared by all layers.
pub struct Pass<'a> {
    pub mode: Mode,
    pub rng: &'a mut RngStream,
    /// Set BN running statistics to the batch statistics of this pass.
    pub calibrate: bool,
}

/// `conv3×3 → DropBlock → BN → ReLU`.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: BatchNorm,
    dropblock: Option<DropBlockSpec>,
    mask: Option<Option<DropMask>>,
    pre_relu: Option<Tensor4>,
}

impl ConvUnit {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dropblock: Option<DropBlockSpec>,
        rng: &mut RngStream,
    ) -> Self {
        ConvUnit {
            conv: Conv::new(&format!("{name}.conv"), cin, cout, 3, stride, 1, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), cout),
            dropblock,
            mask: None,
            pre_relu: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, pass: &mut Pass) -> Result<Tensor4> {
        let mut y = self.conv.forward(x)?;
        let mut mask = None;
        if let Some(spec) = self.dropblock {
            let bs = spec.effective_size(y.height(), y.width());
            let (d, m) = dropblock(&y, bs, spec.rate, pass.mode, pass.rng)?;
            y = d;
            mask = m;
        }
        self.mask = Some(mask);
        let z = self.bn.forward(&y, pass.mode, pass.calibrate)?;
        let out = relu(&z);
        self.pre_relu = Some(z);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let z = self.pre_relu.take().ok_or_else(|| missing_cache(&self.bn.name))?;
        let mask = self.mask.take().ok_or_else(|| missing_cache(&self.bn.name))?;
        let g = relu_vjp(&z, grad)?;
        let g = self.bn.backward(&g)?;
        let g = dropblock_vjp(mask.as_ref(), &g);
        self.conv.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.conv.params_mut();
        p.extend(self.bn.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut p = self.conv.params();
        p.extend(self.bn.params());
        p
    }
}

/// Two conv units plus an input skip (1×1 projection when widths differ).
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub projection: Option<Conv>,
}

impl ResBlock {
    pub fn new(name: &str, cin: usize, cout: usize, dropblock: Option<DropBlockSpec>, rng: &mut RngStream) -> Self {
        ResBlock {
            first: ConvUnit::new(&format!("{name}.unit1"), cin, cout, 1, dropblock, rng),
            second: ConvUnit::new(&format!("{name}.unit2"), cout, cout, 1, dropblock, rng),
            projection: (cin != cout).then(|| Conv::new(&format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
        }
    }

    pub fn forward(&mut self, x: &Tensor4, pass: &mut Pass) -> Result<Tensor4> {
        let a = self.first.forward(x, pass)?;
        let b = self.second.forward(&a, pass)?;
        let skip = match &mut self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        b.add(&skip)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let g = self.second.backward(grad)?;
        let mut gx = self.first.backward(&g)?;
        let gskip = match &mut self.projection {
            Some(p) => p.backward(grad)?,
            None => grad.clone(),
        };
        gx.add_assign(&gskip)?;
        Ok(gx)
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = self.first.params_mut();
        p.extend(self.second.params_mut());
        if let Some(proj) = &mut self.projection {
            p.extend(proj.params_mut());
        }
        p
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut p = self.first.params();
        p.extend(self.second.params());
        if let Some(proj) = &self.projection {
            p.extend(proj.params());
        }
        p
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        vec![&mut self.first.bn, &mut self.second.bn]
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        vec![&self.first.bn, &self.second.bn]
    }
}
