//! Adam, cosine annealing, and the dice loss/metric used for training and
//! evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use thiserror::Error;

use crate::tensor::{sigmoid, Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("parameter `{name}` changed shape between steps")]
    StateShape { name: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("epoch {t} outside schedule range [0, {t_max}]")]
    EpochOutOfRange { t: usize, t_max: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("mask contains a value other than 0 or 1")]
    NonBinary,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OptimError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam moment buffers keyed by parameter name, plus the shared step count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element = f32> {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every `(name, param)` pair, then
    /// clears the gradients. Fails without touching anything if a gradient
    /// is missing.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(OptimError::MissingGradient(name.to_string()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (c1, c2) = (T::lit(1.0 - beta1.powi(t)), T::lit(1.0 - beta2.powi(t)));
        let (lr, eps) = (T::lit(lr), T::lit(eps));
        let one = T::one();
        for (name, p) in params {
            let grad = p.take_grad().expect("checked above");
            let slot = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.len()],
                v: vec![T::zero(); grad.len()],
            });
            if slot.m.len() != grad.len() {
                return Err(OptimError::StateShape {
                    name: name.to_string(),
                });
            }
            for (((theta, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine annealing without restarts:
/// `lr(t) = eta_min + ½(base_lr − eta_min)(1 + cos(π·t/T_max))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    base_lr: f64,
    eta_min: f64,
    t_max: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, eta_min: f64, t_max: usize) -> Result<Self> {
        if !(0.0..=base_lr).contains(&eta_min) {
            return Err(OptimError::InvalidSchedule(format!(
                "eta_min {eta_min} must lie in [0, base_lr={base_lr}]"
            )));
        }
        if t_max == 0 {
            return Err(OptimError::InvalidSchedule("t_max must be at least 1".into()));
        }
        Ok(Self {
            base_lr,
            eta_min,
            t_max,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Learning rate after `t` completed epochs.
    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.t_max {
            return Err(OptimError::EpochOutOfRange { t, t_max: self.t_max });
        }
        if t == self.t_max {
            return Ok(self.eta_min);
        }
        let phase = PI * t as f64 / self.t_max as f64;
        Ok(self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + phase.cos()))
    }
}

/// Default smoothing term of the soft dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// `(2·Σpg + eps) / (Σp + Σg + eps)`, accumulated in f64.
pub fn soft_dice_coefficient<T: Element>(probs: &[T], target: &[T], eps: f64) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(target) {
        let (p, g) = (p.to_f64().unwrap_or(f64::NAN), g.to_f64().unwrap_or(f64::NAN));
        inter += p * g;
        sp += p;
        sg += g;
    }
    (2.0 * inter + eps) / (sp + sg + eps)
}

/// `1 − soft dice` of `sigmoid(logits)` against a binary target, pooled
/// over every voxel of the batch.
pub fn soft_dice_loss<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &Tensor<T>,
    eps: f64,
) -> Result<Var> {
    let lv = tape.value(logits)?;
    if lv.shape() != target.shape() {
        return Err(OptimError::ShapeMismatch(
            lv.shape().to_vec(),
            target.shape().to_vec(),
        ));
    }
    if target.data().iter().any(|&g| g != T::zero() && g != T::one()) {
        return Err(OptimError::NonBinary);
    }
    let probs: Vec<T> = lv.data().iter().map(|&l| sigmoid(l)).collect();
    let g: Vec<T> = target.data().to_vec();
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &t) in probs.iter().zip(&g) {
        let (p, t) = (p.to_f64().unwrap_or(f64::NAN), t.to_f64().unwrap_or(f64::NAN));
        inter += p * t;
        sp += p;
        sg += t;
    }
    let num = 2.0 * inter + eps;
    let den = sp + sg + eps;
    let loss = Tensor::scalar(T::lit(1.0 - num / den));
    let backward = Box::new(move |dy: &[T]| {
        // ∂L/∂p_i = −(2·g_i·den − num) / den², then through the sigmoid.
        let den2 = den * den;
        let upstream = dy[0].to_f64().unwrap_or(f64::NAN);
        let grad = probs
            .iter()
            .zip(&g)
            .map(|(&p, &t)| {
                let (p, t) = (p.to_f64().unwrap_or(f64::NAN), t.to_f64().unwrap_or(f64::NAN));
                let dp = -(2.0 * t * den - num) / den2;
                T::lit(upstream * dp * p * (1.0 - p))
            })
            .collect();
        vec![Some(grad)]
    });
    Ok(tape.custom("soft_dice_loss", &[logits], loss, backward)?)
}

/// Binary mask of `sigmoid(logits) > threshold`.
pub fn binarize<T: Element>(logits: &[T], threshold: f64) -> Vec<u8> {
    logits
        .iter()
        .map(|&l| u8::from(sigmoid(l).to_f64().unwrap_or(0.0) > threshold))
        .collect()
}

/// `2|P∩T| / (|P| + |T|)` on 0/1 masks; both empty scores 1.
pub fn dice_score(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(OptimError::ShapeMismatch(vec![pred.len()], vec![target.len()]));
    }
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target) {
        if p > 1 || t > 1 {
            return Err(OptimError::NonBinary);
        }
        inter += usize::from(p & t);
        np += usize::from(p);
        nt += usize::from(t);
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// [`dice_score`] on binary tensors of equal shape.
pub fn dice_score_tensors<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(OptimError::ShapeMismatch(
            pred.shape().to_vec(),
            target.shape().to_vec(),
        ));
    }
    let to_mask = |t: &Tensor<T>| -> Result<Vec<u8>> {
        t.data()
            .iter()
            .map(|&v| {
                if v == T::zero() {
                    Ok(0)
                } else if v == T::one() {
                    Ok(1)
                } else {
                    Err(OptimError::NonBinary)
                }
            })
            .collect()
    };
    dice_score(&to_mask(pred)?, &to_mask(target)?)
}
