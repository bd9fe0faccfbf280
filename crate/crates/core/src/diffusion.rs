//! Cosine noise schedule, forward noising, the denoising objective and ancestral sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{ImageBatch, Normalization};
use crate::error::{Error, Result};
use crate::optim::{AdamState, EmaShadow};
use crate::params::{BoundParams, ParamSet};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Largest admissible β.
pub const BETA_CLIP: f64 = 0.999;

/// Parameters that determine a [`NoiseSchedule`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub offset: f64,
    pub beta_clip: f64,
    /// Divide by ᾱ at t = 0 so the schedule starts at exactly 1.
    pub normalize_alpha_bar: bool,
}

impl ScheduleConfig {
    pub fn cosine(steps: usize, offset: f64) -> Self {
        Self {
            steps,
            offset,
            beta_clip: BETA_CLIP,
            normalize_alpha_bar: false,
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::cosine(1000, 0.008)
    }
}

/// Precomputed `ᾱ_t` (t = 0..=T) and `β_t` (t = 1..=T).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
}

impl NoiseSchedule {
    /// `ᾱ_t = cos²(((t/T + s)/(1 + s))·π/2)` and `β_t = min(1 − ᾱ_t/ᾱ_{t−1}, clip)`.
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            offset,
            beta_clip,
            normalize_alpha_bar,
        } = config;
        if steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::contract(format!(
                "cosine offset must be positive, got {offset}"
            )));
        }
        if !(beta_clip > 0.0 && beta_clip < 1.0) {
            return Err(Error::contract(format!(
                "beta clip must lie in (0, 1), got {beta_clip}"
            )));
        }
        let f = |t: usize| {
            if t == steps {
                // cos(π/2) is exactly zero; the floating-point cosine is not.
                return 0.0;
            }
            let phase =
                (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| if normalize_alpha_bar { f(t) / f0 } else { f(t) })
            .collect();
        let beta = (1..=steps)
            .map(|t| (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(beta_clip))
            .collect();
        Ok(Self {
            config,
            alpha_bar,
            beta,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `β_t` for `t ∈ 1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// `√ᾱ·x0 + √(1 − ᾱ)·ε` elementwise.
pub fn noised(x0: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Closed-form draw from `q(x_t | x_0)` given the caller's standard-normal `eps`.
pub fn forward_sample(
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Dimension {
            op: "forward_sample",
            lhs: x0.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        });
    }
    Tensor::new(
        x0.shape(),
        noised(x0.data(), eps.data(), sched.alpha_bar(t)),
    )
}

/// A network that predicts the noise added to `x_t`.
pub trait Denoiser {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// `(C, H, W)` of the images this model consumes and produces.
    fn image_shape(&self) -> [usize; 3];

    /// Predicted noise for the batch `x` (`N×C×H×W`) at per-sample timesteps `t`.
    fn predict(&self, tape: &mut Tape, params: &BoundParams, x: Var, t: &[usize]) -> Result<Var>;
}

/// A denoiser with its optimizer and EMA shadow.
#[derive(Debug, Clone)]
pub struct Trainer<M> {
    pub model: M,
    pub adam: AdamState,
    pub ema: EmaShadow,
}

impl<M: Denoiser> Trainer<M> {
    pub fn new(model: M, adam: crate::optim::AdamConfig, ema_decay: f64) -> Result<Self> {
        let adam = AdamState::new(model.params(), adam);
        let ema = EmaShadow::new(model.params(), ema_decay)?;
        Ok(Self { model, adam, ema })
    }
}

fn check_batch(model_shape: [usize; 3], batch: &ImageBatch) -> Result<()> {
    let s = batch.data.shape();
    if s.len() != 4 || s[1..] != model_shape {
        return Err(Error::contract(format!(
            "model expects N×{}×{}×{} images, batch is {s:?}",
            model_shape[0], model_shape[1], model_shape[2]
        )));
    }
    Ok(())
}

/// One optimisation step on the noise-prediction objective; returns the batch loss.
///
/// Each image gets its own timestep drawn uniformly from `1..=T`; the timesteps are drawn
/// before the noise.
pub fn train_step<M: Denoiser>(
    trainer: &mut Trainer<M>,
    batch: &ImageBatch,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<f64> {
    check_batch(trainer.model.image_shape(), batch)?;
    if batch.normalization != Normalization::Signed {
        return Err(Error::contract(
            "training batches must be normalized to [-1, 1]",
        ));
    }
    let n = batch.len();
    if n == 0 {
        return Err(Error::contract("empty training batch"));
    }
    let per_image = batch.data.numel() / n;
    let steps: Vec<usize> = (0..n)
        .map(|_| rng.random_range(1..=sched.steps()))
        .collect();
    let eps = standard_normal(rng, batch.data.numel());
    let mut xt = Vec::with_capacity(eps.len());
    for (s, &t) in steps.iter().enumerate() {
        let range = s * per_image..(s + 1) * per_image;
        xt.extend(noised(
            &batch.data.data()[range.clone()],
            &eps[range],
            sched.alpha_bar(t),
        ));
    }

    let mut tape = Tape::new();
    let bound = trainer.model.params().bind(&mut tape);
    let x = tape.constant(Tensor::new(batch.data.shape(), xt)?);
    let target = tape.constant(Tensor::new(batch.data.shape(), eps)?);
    let pred = trainer.model.predict(&mut tape, &bound, x, &steps)?;
    let loss = tape.mse_loss(pred, target)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("training loss became {value}")));
    }
    tape.backward(loss)?;
    let grads = bound.grads(&tape);
    trainer.adam.step(trainer.model.params_mut(), &grads)?;
    trainer.ema.update(trainer.model.params())?;
    Ok(value)
}

/// Ancestral sampling from pure noise:
/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√(1−β_t) + √β_t·z`, with `z = 0` on the last step.
/// The result is clamped to `[−1, 1]`.
pub fn reverse_sample<M: Denoiser>(
    model: &M,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ImageBatch> {
    if n == 0 {
        return Err(Error::contract("reverse_sample needs n ≥ 1"));
    }
    let [c, h, w] = model.image_shape();
    let shape = [n, c, h, w];
    let numel = n * c * h * w;
    let mut x = standard_normal(rng, numel);
    for t in (1..=sched.steps()).rev() {
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let xv = tape.constant(Tensor::new(&shape, x.clone())?);
        let pred = model.predict(&mut tape, &bound, xv, &vec![t; n])?;
        let eps_hat = tape.value(pred).data();
        let beta = sched.beta(t);
        let coef = beta / (1.0 - sched.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let sigma = beta.sqrt();
        let z = if t > 1 {
            standard_normal(rng, numel)
        } else {
            vec![0.0; numel]
        };
        for ((xi, &e), zi) in x.iter_mut().zip(eps_hat).zip(z) {
            *xi = inv_sqrt_alpha * (*xi - coef * e) + sigma * zi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("sampler diverged at step {t}")));
        }
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    ImageBatch::new(Tensor::new(&shape, x)?, vec![-1; n], Normalization::Signed)
}
