//! Label-smoothed cross-entropy, Adam with decoupled weight decay, and the
//! warmup / inverse-square-root learning-rate schedule.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::Parameters;
use crate::tape::{Tape, Var};
use crate::tensor::TensorError;

/// Mean over rows of `−Σ_c q_c log softmax(logits)_c` with
/// `q = (1−ε)·onehot(target) + ε/C`.
pub fn label_smoothed_ce(tape: &Tape, logits: &Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(TensorError::Contract(format!("{} targets for {n} rows of logits", targets.len())).into());
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(TensorError::Contract(format!("target {t} outside {c} classes")).into());
    }
    if !(0.0..1.0).contains(&epsilon) {
        return config_err(format!("label smoothing must lie in [0, 1), got {epsilon}"));
    }
    let mut q = vec![epsilon / c as f64; n * c];
    for (row, &t) in targets.iter().enumerate() {
        q[row * c + t] += 1.0 - epsilon;
    }
    let logp = tape.log_softmax(logits);
    let weighted = tape.mul_const(&logp, Rc::new(q))?;
    Ok(tape.scale(&tape.sum(&weighted), -1.0 / n as f64))
}

/// Row-wise argmax.
pub fn predictions(logits: &crate::tensor::Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 1e-6,
        }
    }
}

/// Moment estimates for every parameter, in traversal order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, t| m.push(vec![0.0; t.numel()]));
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update using the gradients stored on the parameters. Missing
    /// gradients count as zero. Nothing changes if any gradient is non-finite.
    pub fn update<P: Parameters + ?Sized>(&mut self, params: &mut P, lr: f64) -> Result<()> {
        let mut bad = None;
        let mut count = 0;
        params.visit("", &mut |name, t| {
            count += 1;
            if bad.is_none() && t.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFiniteGradient(name));
        }
        if count != self.m.len() {
            return config_err(format!(
                "optimizer tracks {} tensors, model has {count}",
                self.m.len()
            ));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut idx = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, t| {
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            idx += 1;
            let grad = t.grad.take();
            let data = t.data_mut();
            for k in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * data[k]);
            }
        });
        Ok(())
    }
}

/// `lr(s) = base · d^(−1/2) · min(s^(−1/2), s · warmup^(−3/2))` for steps `s ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub d_model: usize,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn new(base: f64, d_model: usize, warmup: usize) -> Result<Self> {
        if !(base > 0.0 && base.is_finite()) || d_model == 0 || warmup == 0 {
            return config_err(format!(
                "schedule needs positive base, d_model and warmup (got {base}, {d_model}, {warmup})"
            ));
        }
        Ok(Self {
            base,
            d_model,
            warmup,
        })
    }

    /// Schedule whose value at the end of warmup is `peak`.
    pub fn with_peak(peak: f64, d_model: usize, warmup: usize) -> Result<Self> {
        Self::new(peak * (d_model as f64).sqrt() * (warmup as f64).sqrt(), d_model, warmup)
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step == 0 {
            return config_err("learning-rate steps start at 1");
        }
        let s = step as f64;
        let w = self.warmup as f64;
        Ok(self.base / (self.d_model as f64).sqrt() * s.powf(-0.5).min(s * w.powf(-1.5)))
    }
}
