use super::{RngStream, Tensor4};

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor4,
    pub grad: Tensor4,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Tensor4) -> Self {
        let grad = Tensor4::zeros(value.dims());
        ParamTensor {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, dims: [usize; 4]) -> Self {
        Self::new(name, Tensor4::zeros(dims))
    }

    /// He-normal initialization scaled by the kernel fan-in (`dims[1..]` product).
    pub fn he_normal(name: impl Into<String>, dims: [usize; 4], fan_in: usize, rng: &mut RngStream) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let value = Tensor4::from_fn(dims, |_, _, _, _| rng.normal() * std);
        Self::new(name, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn accumulate(&mut self, g: &Tensor4) {
        self.grad
            .add_assign(g)
            .expect("gradient dims must match parameter dims");
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
