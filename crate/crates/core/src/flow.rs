//! Conditional flow matching: probability path, regression target, training
//! loop and ODE sampling in both directions.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::model::Model;
use crate::nn::Ctx;
use crate::ode::{self, Direction, OdeError, SolverFamily, SolverSpec, Trajectory};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, FlowRng, RngState};
use crate::tensor::{Tensor, TensorError};
use crate::uvit::{AttentionReweight, EditHooks};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("target field denominator {0:e} below 1e-8")]
    Singular(f64),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, FlowError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub sigma_min: f32,
    pub time_grid_n: usize,
    pub generate: SolverSpec,
    pub invert: SolverSpec,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: 1e-4,
            time_grid_n: 100,
            generate: SolverSpec::dopri5(1e-5, Direction::Generate),
            invert: SolverSpec::dopri5(1e-5, Direction::Invert),
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(FlowError::Invalid(format!("sigma_min {} outside (0, 1)", self.sigma_min)));
        }
        if self.time_grid_n == 0 {
            return Err(FlowError::Invalid("time_grid_n must be positive".into()));
        }
        self.generate.validate()?;
        self.invert.validate()?;
        Ok(())
    }

    /// Fixed-step euler on the editing grid.
    pub fn grid_solver(&self, direction: Direction) -> SolverSpec {
        SolverSpec::fixed(SolverFamily::Euler, self.time_grid_n, direction)
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(FlowError::TimeOutOfRange(t))
    }
}

/// `x_t = t x1 + (1 - (1 - sigma_min) t) noise`.
pub fn sample_path_point(x1: &Tensor, t: f64, noise: &Tensor, sigma_min: f64) -> Result<Tensor> {
    check_time(t)?;
    if x1.shape() != noise.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "sample_path_point",
            lhs: x1.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        }
        .into());
    }
    let s = 1.0 - (1.0 - sigma_min) * t;
    let data: Vec<f64> = x1
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &n)| t * a as f64 + s * n as f64)
        .collect();
    Ok(Tensor::from_f64(x1.shape().to_vec(), &data)?)
}

/// `w = (x1 - (1 - sigma_min) x_t) / (1 - (1 - sigma_min) t)`.
pub fn target_field(x_t: &Tensor, x1: &Tensor, t: f64, sigma_min: f64) -> Result<Tensor> {
    check_time(t)?;
    if x1.shape() != x_t.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "target_field",
            lhs: x_t.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        }
        .into());
    }
    let k = 1.0 - sigma_min;
    let denom = 1.0 - k * t;
    if denom.abs() < 1e-8 {
        return Err(FlowError::Singular(denom));
    }
    let data: Vec<f64> = x1
        .data()
        .iter()
        .zip(x_t.data())
        .map(|(&a, &x)| (a as f64 - k * x as f64) / denom)
        .collect();
    Ok(Tensor::from_f64(x1.shape().to_vec(), &data)?)
}

/// One minibatch for the CFM objective.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `[B, ..latent]`
    pub x1: Tensor,
    pub prompts: Vec<Vec<u32>>,
    pub t: Vec<f32>,
    pub noise: Tensor,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, prompt_len: usize) -> Result<()> {
        let b = self.t.len();
        if self.x1.shape().first() != Some(&b) || self.x1.shape() != self.noise.shape() {
            return Err(FlowError::Invalid(format!(
                "batch shapes disagree: x1 {:?}, noise {:?}, {b} times",
                self.x1.shape(),
                self.noise.shape()
            )));
        }
        if prompt_len > 0 && self.prompts.len() != b {
            return Err(FlowError::Invalid(format!("{} prompts for batch of {b}", self.prompts.len())));
        }
        if self.prompts.iter().any(|p| p.len() != prompt_len) {
            return Err(FlowError::Invalid(format!("prompts must have length {prompt_len}")));
        }
        if let Some(&t) = self.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(FlowError::TimeOutOfRange(t as f64));
        }
        Ok(())
    }

    /// Path points and regression targets, each `[B, ..latent]`.
    pub fn path_and_target(&self, sigma_min: f64) -> Result<(Tensor, Tensor)> {
        let (x1s, ns) = (self.x1.unstack(), self.noise.unstack());
        let mut xs = Vec::with_capacity(self.len());
        let mut ws = Vec::with_capacity(self.len());
        for ((x1, n), &t) in x1s.iter().zip(&ns).zip(&self.t) {
            let xt = sample_path_point(x1, t as f64, n, sigma_min)?;
            ws.push(target_field(&xt, x1, t as f64, sigma_min)?);
            xs.push(xt);
        }
        Ok((Tensor::stack(&xs)?, Tensor::stack(&ws)?))
    }
}

/// Records `sum_b |v_b - w_b|^2 / B` on `cx`'s tape and returns the loss node.
pub fn cfm_loss(model: &Model, cx: &mut Ctx, batch: &TrainingBatch, sigma_min: f64) -> Result<crate::autograd::Var> {
    batch.validate(model.prompt_length())?;
    let (xt, w) = batch.path_and_target(sigma_min)?;
    let x = cx.tape.constant(xt);
    let w = cx.tape.constant(w);
    let out = model.forward(cx, x, &batch.prompts, &batch.t, &EditHooks::none())?;
    let diff = cx.tape.sub(out.velocity, w)?;
    let sq = cx.tape.sum_sq(diff)?;
    Ok(cx.tape.scale(sq, 1.0 / batch.len() as f32)?)
}

/// Latents with their prompt tokens; prompts may be empty for unconditional data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    /// `[n, ..latent]`
    pub latents: Tensor,
    pub prompts: Vec<Vec<u32>>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.latents.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row(&self, i: usize) -> &[f32] {
        let per = self.latents.len() / self.len();
        &self.latents.data()[i * per..(i + 1) * per]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Probability of replacing a whole prompt with padding.
    pub caption_dropout: f32,
    /// Probability of dropping each remaining prompt word.
    pub word_dropout: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            seed: 0,
            adam: AdamConfig::default(),
            caption_dropout: 0.1,
            word_dropout: 0.2,
        }
    }
}

/// Model, optimizer and data stream of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub rng: FlowRng,
    pub step: u64,
    pub sigma_min: f32,
    pub batch_size: usize,
    pub caption_dropout: f32,
    pub word_dropout: f32,
    pub losses: Vec<f32>,
}

impl Trainer {
    pub fn new(model: Model, config: &TrainConfig, sigma_min: f32) -> Self {
        let adam = Adam::new(config.adam.clone(), &model.params);
        Self {
            model,
            adam,
            rng: rng::stream(config.seed, 0x7a11),
            step: 0,
            sigma_min,
            batch_size: config.batch_size,
            caption_dropout: config.caption_dropout,
            word_dropout: config.word_dropout,
            losses: Vec::new(),
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn sample_batch(&mut self, data: &TrainSet) -> Result<TrainingBatch> {
        if data.is_empty() || self.batch_size == 0 {
            return Err(FlowError::Invalid("empty dataset or batch".into()));
        }
        let b = self.batch_size;
        let mut x1 = Vec::with_capacity(b * data.latents.len() / data.len());
        let mut prompts = Vec::with_capacity(b);
        let mut t = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.rng.random_range(0..data.len());
            x1.extend_from_slice(data.row(i));
            if !data.prompts.is_empty() {
                let p = self.drop_words(&data.prompts[i]);
                prompts.push(p);
            }
            t.push(self.rng.random::<f32>());
        }
        let mut shape = data.latents.shape().to_vec();
        shape[0] = b;
        let noise = rng::normal_tensor(&mut self.rng, &shape);
        Ok(TrainingBatch {
            x1: Tensor::new(shape, x1)?,
            prompts,
            t,
            noise,
        })
    }

    /// Left-packed copy of `ids` with dropped words removed.
    fn drop_words(&mut self, ids: &[u32]) -> Vec<u32> {
        let mut out = vec![crate::prompt::PAD; ids.len()];
        if self.rng.random::<f32>() < self.caption_dropout {
            return out;
        }
        let mut n = 0;
        for &id in ids {
            if id != crate::prompt::PAD && self.rng.random::<f32>() >= self.word_dropout {
                out[n] = id;
                n += 1;
            }
        }
        out
    }

    /// One optimizer step. Parameters are untouched when the loss or the
    /// gradient is non-finite.
    pub fn step(&mut self, data: &TrainSet) -> Result<f32> {
        let batch = self.sample_batch(data)?;
        let diverged = |step, reason: String| FlowError::Diverged { step, reason };
        let mut tape = Tape::new();
        let mut cx = Ctx::new(&mut tape, &self.model.params, true);
        let loss = match cfm_loss(&self.model, &mut cx, &batch, self.sigma_min as f64) {
            Ok(l) => l,
            Err(FlowError::Tensor(e @ TensorError::NonFinite { .. })) => return Err(diverged(self.step, e.to_string())),
            Err(e) => return Err(e),
        };
        let value = tape.value(loss).item();
        let grads = tape.backward(loss).map_err(|e| diverged(self.step, e.to_string()))?;
        self.model.params.accumulate(&grads).map_err(|e| diverged(self.step, e.to_string()))?;
        self.adam.step(&mut self.model.params);
        if self.model.params.iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
            return Err(diverged(self.step, "non-finite parameter after update".into()));
        }
        self.step += 1;
        self.losses.push(value);
        Ok(value)
    }

    pub fn run(&mut self, data: &TrainSet, steps: u64, mut on_step: impl FnMut(u64, f32)) -> Result<()> {
        for _ in 0..steps {
            let l = self.step(data)?;
            on_step(self.step, l);
        }
        Ok(())
    }
}

/// Exponential moving average of a loss curve, seeded with the first value.
pub fn ema(values: &[f32], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v as f64,
            Some(a) => alpha * v as f64 + (1.0 - alpha) * a,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

/// Per-evaluation modifications applied while sampling.
pub trait Steering: Sync {
    /// u-space offset to add at evaluation time `t`, already gated.
    fn offset(&self, t: f64) -> Option<Tensor>;
    /// Attention reweighting at evaluation time `t`, already gated.
    fn reweight(&self, t: f64) -> Option<AttentionReweight>;
}

pub struct NoSteering;

impl Steering for NoSteering {
    fn offset(&self, _t: f64) -> Option<Tensor> {
        None
    }

    fn reweight(&self, _t: f64) -> Option<AttentionReweight> {
        None
    }
}

/// `0 < t < t_edit`.
pub fn edit_window(t: f64, t_edit: f64) -> bool {
    t > 0.0 && t < t_edit
}

/// Integrates the learned field over `spec`'s direction from `x`.
pub fn integrate_model(
    model: &Model,
    x: &Tensor,
    prompts: &[Vec<u32>],
    spec: &SolverSpec,
    steering: &dyn Steering,
    observer: Option<ode::Observer<'_, Tensor>>,
) -> Result<(Tensor, Trajectory<Tensor>)> {
    let field = |t: f64, state: &Tensor| {
        let offset = steering.offset(t);
        let reweight = steering.reweight(t);
        let hooks = EditHooks {
            u_offset: offset.as_ref(),
            reweight: reweight.as_ref(),
            retain_attention: false,
        };
        model.velocity(state, prompts, t as f32, &hooks).map_err(|e| OdeError::field(t, e))
    };
    Ok(ode::integrate(field, x, spec, observer)?)
}

/// Noise `x0` at `t = 0` to data at `t = 1`.
pub fn generate(
    model: &Model,
    x0: &Tensor,
    prompts: &[Vec<u32>],
    spec: &SolverSpec,
    steering: &dyn Steering,
) -> Result<(Tensor, Trajectory<Tensor>)> {
    if spec.direction != Direction::Generate {
        return Err(FlowError::Invalid("generate needs a generate-direction solver".into()));
    }
    integrate_model(model, x0, prompts, spec, steering, None)
}

/// Data `x1` at `t = 1` back to noise at `t = 0`.
pub fn invert(model: &Model, x1: &Tensor, prompts: &[Vec<u32>], spec: &SolverSpec) -> Result<(Tensor, Trajectory<Tensor>)> {
    if spec.direction != Direction::Invert {
        return Err(FlowError::Invalid("invert needs an invert-direction solver".into()));
    }
    integrate_model(model, x1, prompts, spec, &NoSteering, None)
}

/// `sum ||a_i - b_i|| / ||b_i||` averaged over the batch axis.
pub fn mean_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let (ra, rb) = (a.unstack(), b.unstack());
    let n = ra.len().max(1);
    ra.iter()
        .zip(&rb)
        .map(|(x, y)| {
            let d = x.sub(y).map(|d| d.l2_norm()).unwrap_or(f64::INFINITY);
            d / y.l2_norm().max(1e-12)
        })
        .sum::<f64>()
        / n as f64
}
