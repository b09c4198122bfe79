//! SGD with heavy-ball momentum and Adam, both with optional weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// Heavy-ball coefficient (SGD only).
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding it to
    /// the gradient.
    pub decoupled_weight_decay: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            decoupled_weight_decay: false,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} / {}", self.beta1, self.beta2));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(len: usize) -> Self {
        SgdState {
            velocity: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

fn check_lengths(params: usize, grads: usize, state: &[usize]) -> Result<()> {
    if grads != params || state.iter().any(|&s| s != params) {
        return Err(Error::Shape(format!(
            "optimizer step: params {params}, grads {grads}, state {state:?}"
        )));
    }
    Ok(())
}

/// `v ← μ·v + g (+ wd·θ)`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[state.velocity.len()])?;
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    for ((theta, &g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let g = if cfg.decoupled_weight_decay { g } else { g + wd * *theta };
        *v = cfg.momentum * *v + g;
        if cfg.decoupled_weight_decay {
            *theta -= lr * wd * *theta;
        }
        *theta -= lr * *v;
    }
    Ok(())
}

/// One bias-corrected Adam step. `state.t` is incremented before use, so the
/// first call runs with `t = 1`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), &[state.m.len(), state.v.len()])?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = cfg.learning_rate;
    let wd = cfg.weight_decay;
    for (((theta, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let g = if cfg.decoupled_weight_decay { g } else { g + wd * *theta };
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        if cfg.decoupled_weight_decay {
            *theta -= lr * wd * *theta;
        }
        *theta -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum SlotState {
    Sgd(SgdState),
    Adam(AdamState),
}

/// Optimizer state for a list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    slots: Vec<SlotState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, sizes: &[usize]) -> Self {
        let slots = sizes
            .iter()
            .map(|&n| match cfg.kind {
                OptimizerKind::Sgd => SlotState::Sgd(SgdState::new(n)),
                OptimizerKind::Adam => SlotState::Adam(AdamState::new(n)),
            })
            .collect();
        Optimizer { cfg, slots }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    /// Updates every parameter tensor whose `trainable` flag is set.
    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], trainable: &[bool]) -> Result<()> {
        if params.len() != self.slots.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::Shape("optimizer parameter list mismatch".into()));
        }
        for (((p, g), slot), &on) in params.iter_mut().zip(grads).zip(&mut self.slots).zip(trainable) {
            if !on {
                continue;
            }
            match slot {
                SlotState::Sgd(s) => sgd_step(p, g, s, &self.cfg)?,
                SlotState::Adam(s) => adam_step(p, g, s, &self.cfg)?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_vanilla_single_step() {
        let cfg = OptimizerConfig::sgd(0.1, 0.0);
        let mut theta = [0.0];
        let mut st = SgdState::new(1);
        sgd_step(&mut theta, &[1.0], &mut st, &cfg).unwrap();
        assert_eq!(theta[0], -0.1);
    }

    #[test]
    fn heavy_ball_two_steps() {
        // v1 = 1, v2 = 0.9 + 1 = 1.9; theta = -1 then -2.9
        let cfg = OptimizerConfig::sgd(1.0, 0.9);
        let mut theta = [0.0];
        let mut st = SgdState::new(1);
        sgd_step(&mut theta, &[1.0], &mut st, &cfg).unwrap();
        assert_eq!(theta[0], -1.0);
        sgd_step(&mut theta, &[1.0], &mut st, &cfg).unwrap();
        assert_eq!(theta[0], -2.9);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut theta = [0.3, -1.2];
        let mut st = SgdState::new(2);
        sgd_step(&mut theta, &[0.0, 0.0], &mut st, &OptimizerConfig::sgd(0.5, 0.9)).unwrap();
        assert_eq!(theta, [0.3, -1.2]);
        let mut ast = AdamState::new(2);
        adam_step(&mut theta, &[0.0, 0.0], &mut ast, &OptimizerConfig::adam(0.5)).unwrap();
        assert_eq!(theta, [0.3, -1.2]);
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let cfg = OptimizerConfig::adam(1e-3);
        for g in [1e-3, -0.2, 5.0, -40.0] {
            let mut theta = [1.0];
            let mut st = AdamState::new(1);
            adam_step(&mut theta, &[g], &mut st, &cfg).unwrap();
            let expected = -cfg.learning_rate * g / (g.abs() + cfg.epsilon);
            assert!((theta[0] - 1.0 - expected).abs() < 1e-15);
            assert!((theta[0] - 1.0 + 1e-3 * g.signum()).abs() <= 1e-3 * cfg.epsilon / g.abs() + 1e-15);
        }
    }

    #[test]
    fn adam_two_step_trace() {
        // Hand iteration, g = 0.5, lr = 1e-3, defaults:
        // t=1: m=0.05, v=0.00025, m̂=0.5, v̂=0.25 -> Δ = -1e-3·0.5/(0.5+1e-8)
        // t=2: m=0.095, v=0.00049975, m̂=0.5, v̂=0.25 -> same Δ
        let cfg = OptimizerConfig::adam(1e-3);
        let mut theta = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut theta, &[0.5], &mut st, &cfg).unwrap();
        assert!((theta[0] - -0.0009999999800000003).abs() <= 1e-12);
        adam_step(&mut theta, &[0.5], &mut st, &cfg).unwrap();
        assert!((theta[0] - -0.0019999999599999933).abs() <= 1e-12);
        assert_eq!(st.t, 2);
    }

    #[test]
    fn large_epsilon_suppresses_adaptivity() {
        let cfg = OptimizerConfig {
            epsilon: 0.01,
            ..OptimizerConfig::adam(1e-3)
        };
        let mut st = AdamState::new(4);
        let mut theta = [0.0; 4];
        let grads = [1e-4, -5e-5, 2e-6, -1e-4];
        for _ in 0..5 {
            let before = theta;
            adam_step(&mut theta, &grads, &mut st, &cfg).unwrap();
            let bc1 = 1.0 - cfg.beta1.powi(st.t as i32);
            for i in 0..4 {
                let m_hat = st.m[i] / bc1;
                let step = (theta[i] - before[i]).abs();
                assert!(step <= cfg.learning_rate * m_hat.abs() / cfg.epsilon * (1.0 + 1e-12));
                // far below the sign-like step lr that ε = 1e-8 would give
                assert!(step < 0.02 * cfg.learning_rate);
            }
        }
    }

    #[test]
    fn coupled_weight_decay_enters_gradient() {
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::sgd(1.0, 0.0)
        };
        let mut theta = [2.0];
        let mut st = SgdState::new(1);
        sgd_step(&mut theta, &[0.0], &mut st, &cfg).unwrap();
        assert!((theta[0] - 1.8).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut theta = [0.0; 2];
        let mut st = SgdState::new(3);
        assert!(sgd_step(&mut theta, &[0.0; 2], &mut st, &OptimizerConfig::sgd(0.1, 0.0)).is_err());
    }

    #[test]
    fn frozen_slots_untouched() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), &[1, 1]);
        let mut params = vec![vec![1.0], vec![1.0]];
        opt.step(&mut params, &[vec![1.0], vec![1.0]], &[false, true]).unwrap();
        assert_eq!(params[0], vec![1.0]);
        assert!(params[1][0] < 1.0);
    }
}
