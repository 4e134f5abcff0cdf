use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamTensor;

/// Piecewise-constant learning rate over 1-based epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    /// `(last_epoch, lr)` phases in increasing order of `last_epoch`; epochs
    /// past the final phase keep its rate.
    pub phases: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            phases: vec![(100, 1e-3), (150, 1e-4)],
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            phases: vec![(usize::MAX, lr)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("learning-rate schedule is empty".into()));
        }
        if self.phases.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config("learning-rate phases must have increasing end epochs".into()));
        }
        if let Some((_, lr)) = self.phases.iter().find(|(_, lr)| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rate {lr} is invalid")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.phases
            .iter()
            .find(|(last, _)| epoch <= *last)
            .or(self.phases.last())
            .map(|(_, lr)| *lr)
            .unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&ParamTensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            config,
            state: AdamState {
                step: 0,
                first: zeros.clone(),
                second: zeros,
            },
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState, params: &[&ParamTensor]) -> Result<Self> {
        let sizes: Vec<usize> = params.iter().map(|p| p.numel()).collect();
        let ok = |m: &Vec<Vec<f64>>| m.len() == sizes.len() && m.iter().zip(&sizes).all(|(v, &s)| v.len() == s);
        if !ok(&state.first) || !ok(&state.second) {
            return Err(Error::Checkpoint("optimizer state does not match the parameter layout".into()));
        }
        Ok(Adam { config, state })
    }

    /// One bias-corrected update of every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut ParamTensor], lr: f64) -> Result<()> {
        if params.len() != self.state.first.len() {
            return Err(Error::shape(
                format!("{} parameters", params.len()),
                format!("optimizer for {}", self.state.first.len()),
            ));
        }
        self.state.step += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.state.first).zip(&mut self.state.second) {
            let g = p.grad.data().to_vec();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
