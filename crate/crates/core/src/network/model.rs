use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv, ConvUnit, DropBlockSpec, Pass, ResBlock, UpConv};
use crate::attention::{agca_forward, agca_vjp, SpatialAttentionWeights};
use crate::elastic::Field2D;
use crate::error::{Error, Result};
use crate::tensor::{concat_channels, softmax_channels, softmax_channels_vjp, split_channels, Mode, ParamTensor, RngStream, Tensor4};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaeiUnetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropblock_size: usize,
    pub dropblock_rate: f64,
    pub use_agca: bool,
    pub use_dropblock: bool,
}

impl Default for GaeiUnetConfig {
    fn default() -> Self {
        GaeiUnetConfig {
            in_channels: 3,
            num_classes: NUM_CLASSES,
            base_channels: 16,
            depth: 4,
            dropblock_size: 7,
            dropblock_rate: 0.18,
            use_agca: true,
            use_dropblock: true,
        }
    }
}

impl GaeiUnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::Config("in_channels, base_channels and depth must be positive".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}, got {}", self.num_classes)));
        }
        if self.use_dropblock {
            if self.dropblock_size == 0 || self.dropblock_size % 2 == 0 {
                return Err(Error::Config(format!("dropblock size must be odd, got {}", self.dropblock_size)));
            }
            if !(0.0..1.0).contains(&self.dropblock_rate) {
                return Err(Error::Config(format!("dropblock rate {} outside [0, 1)", self.dropblock_rate)));
            }
        }
        Ok(())
    }

    pub fn size_divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.size_divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::Config(format!(
                "input {height}x{width} is not divisible by 2^depth = {d}"
            )));
        }
        Ok(())
    }

    /// Channel width of encoder level `level`.
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// U-Net with residual DropBlock blocks, optional context aggregation at the
/// bottleneck and a two-class softmax head.
#[derive(Clone, Debug)]
pub struct Network {
    config: GaeiUnetConfig,
    encoders: Vec<ResBlock>,
    downs: Vec<ConvUnit>,
    attention: Option<SpatialAttentionWeights>,
    ups: Vec<UpConv>,
    decoders: Vec<ResBlock>,
    head: Conv,
    bottleneck: Option<Tensor4>,
    probabilities: Option<Tensor4>,
}

pub fn build_network(config: &GaeiUnetConfig, rng: &mut RngStream) -> Result<Network> {
    config.validate()?;
    let drop = config.use_dropblock.then_some(DropBlockSpec {
        block_size: config.dropblock_size,
        rate: config.dropblock_rate,
    });
    let mut encoders = Vec::with_capacity(config.depth);
    let mut downs = Vec::with_capacity(config.depth);
    let mut cin = config.in_channels;
    for level in 0..config.depth {
        let c = config.channels_at(level);
        encoders.push(ResBlock::new(&format!("enc{level}"), cin, c, drop, rng));
        downs.push(ConvUnit::new(&format!("down{level}"), c, 2 * c, 2, drop, rng));
        cin = 2 * c;
    }
    let bottom = config.channels_at(config.depth);
    let attention = config
        .use_agca
        .then(|| SpatialAttentionWeights::new("agca", bottom, rng));
    let mut ups = Vec::with_capacity(config.depth);
    let mut decoders = Vec::with_capacity(config.depth);
    for level in (0..config.depth).rev() {
        let c = config.channels_at(level);
        ups.push(UpConv::new(&format!("up{level}"), 2 * c, c, rng));
        decoders.push(ResBlock::new(&format!("dec{level}"), 2 * c, c, drop, rng));
    }
    let mut head = Conv::new("head", config.base_channels, NUM_CLASSES, 1, 1, 0, rng);
    // both classes start at probability ½ everywhere
    head.kernel.value.fill(0.0);
    Ok(Network {
        config: config.clone(),
        encoders,
        downs,
        attention,
        ups,
        decoders,
        head,
        bottleneck: None,
        probabilities: None,
    })
}

impl Network {
    pub fn config(&self) -> &GaeiUnetConfig {
        &self.config
    }

    /// Softmax probabilities `(N, 2, H, W)`; channel 1 is the vessel class.
    /// Train mode caches what [`Network::backward`] needs.
    pub fn forward(&mut self, x: &Tensor4, mode: Mode, rng: &mut RngStream) -> Result<Tensor4> {
        self.run_forward(x, &mut Pass { mode, rng, calibrate: false })
    }

    /// Train-mode pass that sets every BN running statistic to the batch statistics it sees.
    pub fn calibrate_batchnorm(&mut self, x: &Tensor4, rng: &mut RngStream) -> Result<Tensor4> {
        self.run_forward(
            x,
            &mut Pass {
                mode: Mode::Train,
                rng,
                calibrate: true,
            },
        )
    }

    fn run_forward(&mut self, x: &Tensor4, pass: &mut Pass) -> Result<Tensor4> {
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(
                format!("input {:?}", x.dims()),
                format!("{} input channels", self.config.in_channels),
            ));
        }
        self.config.check_input(x.height(), x.width())?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs) {
            let e = enc.forward(&h, pass)?;
            h = down.forward(&e, pass)?;
            skips.push(e);
        }
        if let Some(w) = &self.attention {
            let y = agca_forward(&h, w)?;
            self.bottleneck = Some(h);
            h = y;
        }
        for (up, dec) in self.ups.iter_mut().zip(&mut self.decoders) {
            let u = up.forward(&h)?;
            let skip = skips.pop().expect("one skip per level");
            h = dec.forward(&concat_channels(&skip, &u)?, pass)?;
        }
        let logits = self.head.forward(&h)?;
        let p = softmax_channels(&logits)?;
        self.probabilities = Some(p.clone());
        Ok(p)
    }

    /// Backpropagates `∂L/∂probabilities`, accumulating parameter gradients.
    /// Returns `∂L/∂input`.
    pub fn backward(&mut self, grad_probabilities: &Tensor4) -> Result<Tensor4> {
        let p = self
            .probabilities
            .take()
            .ok_or_else(|| Error::Input("network backward without forward".into()))?;
        let g = softmax_channels_vjp(&p, grad_probabilities)?;
        self.backward_from_logits(&g)
    }

    /// Backpropagates `∂L/∂logits` (the pre-softmax head output).
    pub fn backward_from_logits(&mut self, grad_logits: &Tensor4) -> Result<Tensor4> {
        self.probabilities = None;
        let mut g = self.head.backward(grad_logits)?;
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for (up, dec) in self.ups.iter_mut().zip(&mut self.decoders).rev() {
            let gc = dec.backward(&g)?;
            let skip_channels = gc.channels() / 2;
            let (gs, gu) = split_channels(&gc, skip_channels)?;
            skip_grads.push(gs);
            g = up.backward(&gu)?;
        }
        if let Some(w) = &mut self.attention {
            let x = self
                .bottleneck
                .take()
                .ok_or_else(|| Error::Input("attention backward without forward".into()))?;
            let ag = agca_vjp(&x, w, &g)?;
            w.query.accumulate(&ag.query);
            w.key.accumulate(&ag.key);
            w.value.accumulate(&ag.value);
            w.output.accumulate(&ag.output);
            g = ag.input;
        }
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs).rev() {
            let mut ge = down.backward(&g)?;
            ge.add_assign(&skip_grads.pop().expect("one skip gradient per level"))?;
            g = enc.backward(&ge)?;
        }
        Ok(g)
    }

    /// Every trainable tensor in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut p = Vec::new();
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs) {
            p.extend(enc.params_mut());
            p.extend(down.params_mut());
        }
        if let Some(w) = &mut self.attention {
            p.extend(w.params_mut());
        }
        for (up, dec) in self.ups.iter_mut().zip(&mut self.decoders) {
            p.extend(up.params_mut());
            p.extend(dec.params_mut());
        }
        p.extend(self.head.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut p = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            p.extend(enc.params());
            p.extend(down.params());
        }
        if let Some(w) = &self.attention {
            p.extend(w.params());
        }
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            p.extend(up.params());
            p.extend(dec.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut b = Vec::new();
        for (enc, down) in self.encoders.iter_mut().zip(&mut self.downs) {
            b.extend(enc.batchnorms_mut());
            b.push(&mut down.bn);
        }
        for dec in &mut self.decoders {
            b.extend(dec.batchnorms_mut());
        }
        b
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm> {
        let mut b = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            b.extend(enc.batchnorms());
            b.push(&down.bn);
        }
        for dec in &self.decoders {
            b.extend(dec.batchnorms());
        }
        b
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Marks all running statistics usable at their current values.
    pub fn initialize_running_stats(&mut self) {
        for bn in self.batchnorms_mut() {
            bn.stats.initialize();
        }
    }

    /// Eval-mode foreground probability and its `> 0.5` mask for one `(1, C, H, W)` image.
    pub fn predict(&mut self, image: &Tensor4) -> Result<(Field2D, Field2D)> {
        if image.batch() != 1 {
            return Err(Error::Input(format!("predict expects one image, got batch {}", image.batch())));
        }
        // eval mode never draws from the stream
        let mut rng = RngStream::new(0, 0);
        let p = self.forward(image, Mode::Eval, &mut rng)?;
        self.probabilities = None;
        self.bottleneck = None;
        let prob = Field2D::from_vec(p.height(), p.width(), p.plane_of(0, 1).to_vec())?;
        let mask = prob.threshold(0.5);
        Ok((prob, mask))
    }
}
