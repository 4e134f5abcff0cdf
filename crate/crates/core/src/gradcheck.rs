//! Central finite-difference checks of every analytic gradient.
//!
//! Tensor-valued ops are reduced to a scalar through a random projection
//! `L = ⟨R, f(x)⟩`, whose gradient is the op's VJP applied to `R`.

use crate::attention::{
    agca_forward, agca_vjp, channel_aggregate, channel_aggregate_vjp, spatial_aggregate, spatial_aggregate_vjp,
    SpatialAttentionWeights,
};
use crate::elastic::{ElasticConfig, ElasticLoss, Field2D};
use crate::error::{Error, Result};
use crate::network::{build_network, loss_total, loss_total_with_config, GaeiUnetConfig, LossWeights, Network};
use crate::tensor::{
    batchnorm2d, batchnorm2d_vjp, concat_channels, conv2d, conv2d_vjp, conv_transpose2d, conv_transpose2d_vjp,
    dropblock, dropblock_vjp, relu, relu_vjp, softmax_channels, softmax_channels_vjp, split_channels, Mode,
    RngStream, RunningStats, Tensor4, BN_EPSILON,
};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Retry step when the default stencil straddles a non-differentiable point.
pub const KINK_STEP: f64 = 1e-7;
/// Floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-6;
/// The elastic energy sums over the whole padded grid, so its difference
/// quotient is roundoff-limited at [`FD_STEP`]; a larger step keeps it clean.
pub const ELASTIC_FD_STEP: f64 = 1e-4;
pub const ELASTIC_TOLERANCE: f64 = 1e-5;
/// Tolerance for individual ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for whole-network checks.
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per tensor per instance.
const PROBES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Tensor,
    Attention,
    Elastic,
    Network,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Tensor, Suite::Attention, Suite::Elastic, Suite::Network];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Tensor => "tensor",
            Suite::Attention => "attention",
            Suite::Elastic => "elastic",
            Suite::Network => "network",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Added to every analytic gradient entry; nonzero values must make checks fail.
    pub perturb: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            instances: 10,
            seed: 2024,
            perturb: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub probes: usize,
    pub worst_relative_error: f64,
    /// Probes re-measured with [`KINK_STEP`].
    pub kink_retries: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_relative_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

struct Tracker {
    name: String,
    tolerance: f64,
    step: f64,
    probes_per_tensor: usize,
    perturb: f64,
    instances: usize,
    probes: usize,
    worst: f64,
    kinks: usize,
}

impl Tracker {
    fn new(name: &str, tolerance: f64, opts: &GradcheckOptions) -> Self {
        Tracker {
            name: name.into(),
            tolerance,
            step: FD_STEP,
            probes_per_tensor: PROBES,
            perturb: opts.perturb,
            instances: 0,
            probes: 0,
            worst: 0.0,
            kinks: 0,
        }
    }

    /// Compares `analytic[i]` against a central difference of `f` along entry `i` of `x`.
    fn probe(
        &mut self,
        x: &Tensor4,
        analytic: &Tensor4,
        rng: &mut RngStream,
        mut f: impl FnMut(&Tensor4) -> Result<f64>,
    ) -> Result<()> {
        x.expect_dims(analytic)?;
        let n = x.len();
        let k = self.probes_per_tensor;
        let picks: Vec<usize> = if n <= k { (0..n).collect() } else { (0..k).map(|_| rng.below(n)).collect() };
        let mut xp = x.clone();
        for i in picks {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + self.step;
            let up = f(&xp)?;
            xp.data_mut()[i] = orig - self.step;
            let down = f(&xp)?;
            xp.data_mut()[i] = orig;
            let mut numeric = (up - down) / (2.0 * self.step);
            let a = analytic.data()[i] + self.perturb;
            if relative_error(a, numeric) > self.tolerance {
                // A kink (ReLU) inside the stencil shows up as disagreeing one-sided slopes.
                let centre = f(&xp)?;
                let (fwd, bwd) = ((up - centre) / self.step, (centre - down) / self.step);
                if relative_error(fwd, bwd) > self.tolerance {
                    xp.data_mut()[i] = orig + KINK_STEP;
                    let up = f(&xp)?;
                    xp.data_mut()[i] = orig - KINK_STEP;
                    let down = f(&xp)?;
                    xp.data_mut()[i] = orig;
                    numeric = (up - down) / (2.0 * KINK_STEP);
                    self.kinks += 1;
                }
            }
            self.worst = self.worst.max(relative_error(a, numeric));
            self.probes += 1;
        }
        Ok(())
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name,
            instances: self.instances,
            probes: self.probes,
            worst_relative_error: self.worst,
            kink_retries: self.kinks,
            tolerance: self.tolerance,
        }
    }
}

fn random(dims: [usize; 4], rng: &mut RngStream) -> Tensor4 {
    Tensor4::from_fn(dims, |_, _, _, _| rng.uniform_range(-1.0, 1.0))
}

fn project(r: &Tensor4, y: &Tensor4) -> Result<f64> {
    r.dot(y)
}

fn tensor_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let root = RngStream::new(opts.seed, 11);

    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let mut t = Tracker::new(&format!("conv2d[s{stride},p{pad}]"), OP_TOLERANCE, opts);
        for i in 0..opts.instances {
            let mut rng = root.derive(i as u64 * 10 + stride as u64 + pad as u64 * 3);
            let x = random([2, 3, 6, 6], &mut rng);
            let k = random([4, 3, 3, 3], &mut rng);
            let b = random([1, 4, 1, 1], &mut rng);
            let y = conv2d(&x, &k, &b, stride, pad)?;
            let r = random(y.dims(), &mut rng);
            let g = conv2d_vjp(&x, &k, stride, pad, &r)?;
            t.probe(&x, &g.input, &mut rng, |xp| project(&r, &conv2d(xp, &k, &b, stride, pad)?))?;
            t.probe(&k, &g.kernel, &mut rng, |kp| project(&r, &conv2d(&x, kp, &b, stride, pad)?))?;
            t.probe(&b, &g.bias, &mut rng, |bp| project(&r, &conv2d(&x, &k, bp, stride, pad)?))?;
            t.instances += 1;
        }
        out.push(t.finish());
    }

    let mut t = Tracker::new("conv_transpose2d", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(100 + i as u64);
        let x = random([2, 4, 3, 3], &mut rng);
        let k = random([4, 3, 2, 2], &mut rng);
        let b = random([1, 3, 1, 1], &mut rng);
        let y = conv_transpose2d(&x, &k, &b, 2)?;
        let r = random(y.dims(), &mut rng);
        let g = conv_transpose2d_vjp(&x, &k, 2, &r)?;
        t.probe(&x, &g.input, &mut rng, |xp| project(&r, &conv_transpose2d(xp, &k, &b, 2)?))?;
        t.probe(&k, &g.kernel, &mut rng, |kp| project(&r, &conv_transpose2d(&x, kp, &b, 2)?))?;
        t.probe(&b, &g.bias, &mut rng, |bp| project(&r, &conv_transpose2d(&x, &k, bp, 2)?))?;
        t.instances += 1;
    }
    out.push(t.finish());

    for mode in [Mode::Train, Mode::Eval] {
        let mut t = Tracker::new(&format!("batchnorm2d[{mode:?}]").to_lowercase(), OP_TOLERANCE, opts);
        for i in 0..opts.instances {
            let mut rng = root.derive(200 + i as u64);
            let x = random([3, 2, 4, 4], &mut rng);
            let gamma = random([1, 2, 1, 1], &mut rng);
            let beta = random([1, 2, 1, 1], &mut rng);
            let mut stats = RunningStats::new(2);
            stats.mean = vec![rng.uniform_range(-0.5, 0.5), rng.uniform_range(-0.5, 0.5)];
            stats.var = vec![rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0)];
            stats.initialize();
            let run = |x: &Tensor4, g: &Tensor4, b: &Tensor4| -> Result<Tensor4> {
                let mut s = stats.clone();
                Ok(batchnorm2d(x, g, b, &mut s, mode, BN_EPSILON)?.0)
            };
            let (y, cache) = batchnorm2d(&x, &gamma, &beta, &mut stats.clone(), mode, BN_EPSILON)?;
            let r = random(y.dims(), &mut rng);
            let g = batchnorm2d_vjp(&cache, &gamma, &r)?;
            t.probe(&x, &g.input, &mut rng, |xp| project(&r, &run(xp, &gamma, &beta)?))?;
            t.probe(&gamma, &g.gamma, &mut rng, |gp| project(&r, &run(&x, gp, &beta)?))?;
            t.probe(&beta, &g.beta, &mut rng, |bp| project(&r, &run(&x, &gamma, bp)?))?;
            t.instances += 1;
        }
        out.push(t.finish());
    }

    let mut t = Tracker::new("dropblock", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(300 + i as u64);
        let x = random([2, 3, 9, 9], &mut rng);
        let mask_seed = RngStream::new(opts.seed, 1000 + i as u64);
        let (y, mask) = dropblock(&x, 3, 0.3, Mode::Train, &mut mask_seed.clone())?;
        let r = random(y.dims(), &mut rng);
        let g = dropblock_vjp(mask.as_ref(), &r);
        t.probe(&x, &g, &mut rng, |xp| project(&r, &dropblock(xp, 3, 0.3, Mode::Train, &mut mask_seed.clone())?.0))?;
        t.instances += 1;
    }
    out.push(t.finish());

    let mut t = Tracker::new("relu", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(400 + i as u64);
        // keep entries away from the kink so the difference quotient is one-sided-free
        let x = random([1, 2, 5, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let r = random(x.dims(), &mut rng);
        let g = relu_vjp(&x, &r)?;
        t.probe(&x, &g, &mut rng, |xp| project(&r, &relu(xp)))?;
        t.instances += 1;
    }
    out.push(t.finish());

    let mut t = Tracker::new("softmax_channels", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(500 + i as u64);
        let x = random([2, 3, 4, 4], &mut rng).scale(3.0);
        let y = softmax_channels(&x)?;
        let r = random(y.dims(), &mut rng);
        let g = softmax_channels_vjp(&y, &r)?;
        t.probe(&x, &g, &mut rng, |xp| project(&r, &softmax_channels(xp)?))?;
        t.instances += 1;
    }
    out.push(t.finish());

    let mut t = Tracker::new("concat_channels", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(600 + i as u64);
        let a = random([2, 2, 3, 3], &mut rng);
        let b = random([2, 3, 3, 3], &mut rng);
        let r = random([2, 5, 3, 3], &mut rng);
        let (ga, gb) = split_channels(&r, 2)?;
        t.probe(&a, &ga, &mut rng, |ap| project(&r, &concat_channels(ap, &b)?))?;
        t.probe(&b, &gb, &mut rng, |bp| project(&r, &concat_channels(&a, bp)?))?;
        t.instances += 1;
    }
    out.push(t.finish());
    Ok(out)
}

fn random_attention(c: usize, rng: &mut RngStream) -> Result<SpatialAttentionWeights> {
    let d = [c, c, 1, 1];
    SpatialAttentionWeights::from_kernels(random(d, rng), random(d, rng), random(d, rng), random(d, rng))
}

fn with_kernel(w: &SpatialAttentionWeights, which: usize, k: &Tensor4) -> Result<SpatialAttentionWeights> {
    let mut ks = [
        w.query.value.clone(),
        w.key.value.clone(),
        w.value.value.clone(),
        w.output.value.clone(),
    ];
    ks[which] = k.clone();
    let [q, kk, v, o] = ks;
    SpatialAttentionWeights::from_kernels(q, kk, v, o)
}

fn attention_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let root = RngStream::new(opts.seed, 12);
    let mut out = Vec::new();
    for fused in [false, true] {
        let name = if fused { "agca_fused" } else { "spatial_aggregate" };
        let fwd = |x: &Tensor4, w: &SpatialAttentionWeights| if fused { agca_forward(x, w) } else { spatial_aggregate(x, w) };
        let mut t = Tracker::new(name, OP_TOLERANCE, opts);
        for i in 0..opts.instances {
            let mut rng = root.derive(i as u64 + if fused { 1000 } else { 0 });
            let x = random([2, 3, 3, 4], &mut rng);
            let w = random_attention(3, &mut rng)?;
            let r = random(x.dims(), &mut rng);
            let g = if fused { agca_vjp(&x, &w, &r)? } else { spatial_aggregate_vjp(&x, &w, &r)? };
            t.probe(&x, &g.input, &mut rng, |xp| project(&r, &fwd(xp, &w)?))?;
            for (which, gk) in [&g.query, &g.key, &g.value, &g.output].into_iter().enumerate() {
                let current = w.params()[which].value.clone();
                t.probe(&current, gk, &mut rng, |kp| project(&r, &fwd(&x, &with_kernel(&w, which, kp)?)?))?;
            }
            t.instances += 1;
        }
        out.push(t.finish());
    }
    let mut t = Tracker::new("channel_aggregate", OP_TOLERANCE, opts);
    for i in 0..opts.instances {
        let mut rng = root.derive(2000 + i as u64);
        let x = random([2, 4, 3, 3], &mut rng);
        let r = random(x.dims(), &mut rng);
        let g = channel_aggregate_vjp(&x, &r)?;
        t.probe(&x, &g, &mut rng, |xp| project(&r, &channel_aggregate(xp)?))?;
        t.instances += 1;
    }
    out.push(t.finish());
    Ok(out)
}

fn field_tensor(f: &Field2D) -> Result<Tensor4> {
    Tensor4::from_vec([1, 1, f.height(), f.width()], f.data().to_vec())
}

fn elastic_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let root = RngStream::new(opts.seed, 13);
    let mut out = Vec::new();
    for size in [32, 48] {
        for pad in [1, 2] {
            let cfg = ElasticConfig {
                pad_factor: pad,
                alpha: 1.0,
                ..ElasticConfig::default()
            };
            let op = ElasticLoss::new(size, size, cfg)?;
            let mut t = Tracker::new(&format!("elastic_loss_grad[{size}x{size},pad{pad}]"), ELASTIC_TOLERANCE, opts);
            t.step = ELASTIC_FD_STEP;
            t.probes_per_tensor = 20;
            for i in 0..opts.instances {
                let mut rng = root.derive((size * 10 + pad) as u64 * 100 + i as u64);
                let pred = Field2D::from_fn(size, size, |_, _| rng.uniform_range(0.05, 0.95));
                let target = Field2D::from_fn(size, size, |_, _| rng.bernoulli(0.2) as u8 as f64);
                let (_, g) = op.value_and_grad(&pred, &target)?;
                let x = field_tensor(&pred)?;
                t.probe(&x, &field_tensor(&g)?, &mut rng, |xp| {
                    op.value(&Field2D::from_vec(size, size, xp.data().to_vec())?, &target)
                })?;
                t.instances += 1;
            }
            out.push(t.finish());
        }
    }
    Ok(out)
}

/// Replaces every parameter with random values so no gradient path is trivially zero.
pub fn randomize_parameters(network: &mut Network, rng: &mut RngStream, scale: f64) {
    for p in network.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.uniform_range(-scale, scale);
        }
    }
}

fn network_loss(
    network: &mut Network,
    x: &Tensor4,
    targets: &[Field2D],
    weights: &LossWeights,
    mode: Mode,
    rng_seed: &RngStream,
) -> Result<f64> {
    let pred = network.forward(x, mode, &mut rng_seed.clone())?;
    Ok(loss_total_with_config(&pred, targets, weights, &ElasticConfig::default())?.total)
}

fn network_suite(opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    let root = RngStream::new(opts.seed, 14);
    let mut out = Vec::new();

    // loss with respect to logits through the softmax
    let mut t = Tracker::new("loss_total[logits 1x2x16x16]", OP_TOLERANCE, opts);
    let weights = LossWeights::default();
    let op = ElasticLoss::new(16, 16, ElasticConfig::default())?;
    for i in 0..opts.instances {
        let mut rng = root.derive(i as u64);
        let logits = random([1, 2, 16, 16], &mut rng).scale(2.0);
        let targets = vec![Field2D::from_fn(16, 16, |_, _| rng.bernoulli(0.3) as u8 as f64)];
        let pred = softmax_channels(&logits)?;
        let g = loss_total(&pred, &targets, &weights, Some(&op))?.grad_logits(&pred)?;
        t.probe(&logits, &g, &mut rng, |lp| {
            Ok(loss_total(&softmax_channels(lp)?, &targets, &weights, Some(&op))?.total)
        })?;
        t.instances += 1;
    }
    out.push(t.finish());

    let config = GaeiUnetConfig {
        in_channels: 3,
        base_channels: 4,
        depth: 1,
        dropblock_size: 3,
        ..GaeiUnetConfig::default()
    };
    for mode in [Mode::Eval, Mode::Train] {
        let mut t = Tracker::new(
            &format!("network_end_to_end[depth1,base4,{}]", if mode == Mode::Eval { "eval" } else { "train" }),
            NETWORK_TOLERANCE,
            opts,
        );
        for i in 0..opts.instances {
            let mut rng = root.derive(1000 + i as u64 + if mode == Mode::Train { 500 } else { 0 });
            let mut net = build_network(&config, &mut rng)?;
            randomize_parameters(&mut net, &mut rng, 0.5);
            for bn in net.batchnorms_mut() {
                for (m, v) in bn.stats.mean.iter_mut().zip(bn.stats.var.iter_mut()) {
                    *m = rng.uniform_range(-0.2, 0.2);
                    *v = rng.uniform_range(0.5, 2.0);
                }
                bn.stats.initialize();
            }
            let x = random([2, 3, 8, 8], &mut rng);
            let targets: Vec<Field2D> = (0..2)
                .map(|_| Field2D::from_fn(8, 8, |_, _| rng.bernoulli(0.3) as u8 as f64))
                .collect();
            let drop_seed = root.derive(9000 + i as u64);
            let reference = net.clone();

            net.zero_grad();
            let pred = net.forward(&x, mode, &mut drop_seed.clone())?;
            let loss = loss_total_with_config(&pred, &targets, &weights, &ElasticConfig::default())?;
            net.backward(&loss.grad_probabilities)?;
            let analytic: Vec<(Tensor4, Tensor4)> =
                net.params().iter().map(|p| (p.value.clone(), p.grad.clone())).collect();

            for (pi, (value, grad)) in analytic.iter().enumerate() {
                t.probe(value, grad, &mut rng, |vp| {
                    let mut probe_net = reference.clone();
                    probe_net.params_mut()[pi].value = vp.clone();
                    network_loss(&mut probe_net, &x, &targets, &weights, mode, &drop_seed)
                })?;
            }
            t.instances += 1;
        }
        out.push(t.finish());
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, opts: &GradcheckOptions) -> Result<Vec<CheckResult>> {
    if opts.instances == 0 {
        return Err(Error::Config("gradient check needs at least one instance".into()));
    }
    match suite {
        Suite::Tensor => tensor_suite(opts),
        Suite::Attention => attention_suite(opts),
        Suite::Elastic => elastic_suite(opts),
        Suite::Network => network_suite(opts),
    }
}

/// One line per check: status, name, worst relative error and tolerance.
pub fn format_report(results: &[CheckResult]) -> String {
    results
        .iter()
        .map(|r| {
            format!(
                "{} {:<40} worst_rel={:.3e} tol={:.0e} ({} instances, {} probes, {} kink retries)\n",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.worst_relative_error,
                r.tolerance,
                r.instances,
                r.probes,
                r.kink_retries
            )
        })
        .collect()
}
