//! Checkpoint-backed operations shared by the command line and the HTTP API.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::data::OracleError;
use crate::edit::{self, DirectionBank, EditError, EditPlan, Lookup};
use crate::flow::{self, FlowError, NoSteering};
use crate::io::{Checkpoint, CheckpointMeta, IoError};
use crate::model::Model;
use crate::ode::{Direction, OdeError, SolverFamily, SolverSpec, Trajectory};
use crate::prompt::{PromptError, ReweightSpec, Vocabulary};
use crate::rng;
use crate::tensor::{Tensor, TensorError};
use crate::uvit::EditHooks;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    NotFound(String),
    #[error("model not loaded")]
    Unavailable,
}

impl From<OdeError> for EngineError {
    fn from(e: OdeError) -> Self {
        EngineError::Flow(e.into())
    }
}

/// Machine-readable error classes reported by the CLI and the API.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    MissingFile,
    Io,
    Digest,
    Format,
    Config,
    Validation,
    UnknownAttribute,
    UnknownWord,
    NotFound,
    Solver,
    Diverged,
    Unavailable,
    Internal,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::MissingFile | Category::Io => 3,
            Category::Digest | Category::Format => 4,
            Category::Config | Category::Validation => 2,
            Category::UnknownAttribute | Category::UnknownWord | Category::NotFound => 5,
            Category::Solver | Category::Diverged => 6,
            Category::Unavailable | Category::Internal => 1,
        }
    }
}

fn flow_category(e: &FlowError) -> Category {
    match e {
        FlowError::Ode(OdeError::InvalidSpec(_)) | FlowError::Invalid(_) | FlowError::TimeOutOfRange(_) => {
            Category::Validation
        }
        FlowError::Ode(_) | FlowError::Singular(_) => Category::Solver,
        FlowError::Diverged { .. } => Category::Diverged,
        FlowError::Tensor(TensorError::NonFinite { .. }) => Category::Solver,
        FlowError::Tensor(_) => Category::Validation,
    }
}

impl EngineError {
    pub fn category(&self) -> Category {
        match self {
            EngineError::Io(IoError::File { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                Category::MissingFile
            }
            EngineError::Io(IoError::File { .. }) => Category::Io,
            EngineError::Io(IoError::Digest { .. }) => Category::Digest,
            EngineError::Io(IoError::Png(_)) => Category::Validation,
            EngineError::Io(_) => Category::Format,
            EngineError::Config(ConfigError::Read { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
                Category::MissingFile
            }
            EngineError::Config(_) => Category::Config,
            EngineError::Flow(e) => flow_category(e),
            EngineError::Edit(EditError::UnknownAttribute(_)) => Category::UnknownAttribute,
            EngineError::Edit(EditError::Flow(e) | EditError::Collection { source: e, .. }) => flow_category(e),
            EngineError::Edit(EditError::Prompt(PromptError::UnknownWord(_))) => Category::UnknownWord,
            EngineError::Edit(_) => Category::Validation,
            EngineError::Prompt(PromptError::UnknownWord(_)) => Category::UnknownWord,
            EngineError::Prompt(_) => Category::Validation,
            EngineError::Tensor(_) | EngineError::Oracle(_) | EngineError::Invalid(_) => Category::Validation,
            EngineError::NotFound(_) => Category::NotFound,
            EngineError::Unavailable => Category::Unavailable,
        }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// A solver choice as given on the command line or in a request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverChoice {
    pub solver: SolverFamily,
    pub steps: usize,
    pub atol: f64,
    pub rtol: f64,
}

impl Default for SolverChoice {
    fn default() -> Self {
        Self {
            solver: SolverFamily::Dopri5,
            steps: 100,
            atol: 1e-5,
            rtol: 1e-5,
        }
    }
}

impl SolverChoice {
    pub fn spec(&self, direction: Direction) -> Result<SolverSpec> {
        let spec = SolverSpec {
            family: self.solver,
            steps: self.steps,
            atol: self.atol,
            rtol: self.rtol,
            direction,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One reweighted prompt word.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordScale {
    pub word: String,
    #[serde(alias = "c")]
    pub scale: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrWeight {
    #[serde(alias = "k")]
    pub attribute: String,
    #[serde(alias = "w")]
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditRequest {
    pub attrs: Vec<AttrWeight>,
    pub t_edit: f64,
    #[serde(flatten)]
    pub solver: SolverChoice,
    pub reweights: Vec<WordScale>,
    pub reweight_blocks: Option<Vec<usize>>,
    pub allow_negative: bool,
    pub lookup: Lookup,
}

impl Default for EditRequest {
    fn default() -> Self {
        Self {
            attrs: Vec::new(),
            t_edit: 0.5,
            solver: SolverChoice::default(),
            reweights: Vec::new(),
            reweight_blocks: None,
            allow_negative: false,
            lookup: Lookup::Linear,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub image: Tensor,
    pub baseline: Tensor,
    pub relative_edit_error: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Heatmap {
    pub position: usize,
    pub token: String,
    /// Row-major `grid[0] x grid[1]` map, mean over heads.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub block: usize,
    pub step: usize,
    pub t: f64,
    pub grid: [usize; 2],
    pub heatmaps: Vec<Heatmap>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub solver: SolverFamily,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub evaluations: usize,
    pub times: Vec<f64>,
}

impl TrajectorySummary {
    pub fn new(family: SolverFamily, traj: &Trajectory<Tensor>) -> Self {
        Self {
            solver: family,
            accepted_steps: traj.accepted(),
            rejected_steps: traj.rejected(),
            evaluations: traj.evaluations,
            times: traj.times(),
        }
    }
}

/// A frozen model with its vocabulary and optional direction bank.
#[derive(Clone, Debug)]
pub struct Engine {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub vocab: Option<Vocabulary>,
    pub bank: Option<DirectionBank>,
}

impl Engine {
    pub fn new(checkpoint: Checkpoint, bank: Option<DirectionBank>) -> Result<Self> {
        if let Some(b) = &bank {
            if b.latent_shape != checkpoint.model.latent_shape() {
                return Err(EngineError::Invalid(format!(
                    "bank latent shape {:?} does not match model {:?}",
                    b.latent_shape,
                    checkpoint.model.latent_shape()
                )));
            }
        }
        Ok(Self {
            vocab: checkpoint.meta.vocabulary.clone(),
            meta: checkpoint.meta,
            model: checkpoint.model,
            bank,
        })
    }

    pub fn load(checkpoint: impl AsRef<std::path::Path>, bank: Option<&std::path::Path>) -> Result<Self> {
        let ckpt = Checkpoint::load(checkpoint)?;
        let bank = bank.map(crate::io::load_bank).transpose()?;
        Self::new(ckpt, bank)
    }

    pub fn vocabulary(&self) -> Result<&Vocabulary> {
        self.vocab
            .as_ref()
            .ok_or_else(|| EngineError::Invalid("model takes no prompts".into()))
    }

    /// Token ids for `text`; empty for unconditional models.
    pub fn prompt_ids(&self, text: &str) -> Result<Vec<u32>> {
        match &self.vocab {
            Some(v) => Ok(v.tokenize(text, self.model.prompt_length())?),
            None if text.trim().is_empty() => Ok(Vec::new()),
            None => Err(EngineError::Invalid("model takes no prompts".into())),
        }
    }

    fn prompts(&self, ids: Vec<u32>) -> Vec<Vec<u32>> {
        if self.vocab.is_some() {
            vec![ids]
        } else {
            Vec::new()
        }
    }

    pub fn noise(&self, seeds: &[u64]) -> Result<Tensor> {
        let shape = self.model.latent_shape();
        Ok(Tensor::stack(
            &seeds.iter().map(|&s| rng::noise_for_seed(s, &shape)).collect::<Vec<_>>(),
        )?)
    }

    /// Generates one latent per seed; returns the batch and its trajectory.
    pub fn sample(&self, seeds: &[u64], prompt: &str, solver: &SolverChoice) -> Result<(Tensor, Trajectory<Tensor>)> {
        let ids = self.prompt_ids(prompt)?;
        let x0 = self.noise(seeds)?;
        Ok(flow::generate(
            &self.model,
            &x0,
            &self.prompts(ids),
            &solver.spec(Direction::Generate)?,
            &NoSteering,
        )?)
    }

    /// Inverts a batch of latents back to noise.
    pub fn invert(&self, latents: &Tensor, prompt: &str, solver: &SolverChoice) -> Result<(Tensor, Trajectory<Tensor>)> {
        let shape = self.model.latent_shape();
        let x = if latents.shape() == shape.as_slice() {
            let mut b = vec![1];
            b.extend(&shape);
            latents.clone().reshape(b)?
        } else {
            latents.clone()
        };
        if x.shape()[1..] != shape[..] {
            return Err(EngineError::Invalid(format!(
                "image shape {:?} does not match model latent {:?}",
                latents.shape(),
                shape
            )));
        }
        let ids = self.prompt_ids(prompt)?;
        Ok(flow::invert(&self.model, &x, &self.prompts(ids), &solver.spec(Direction::Invert)?)?)
    }

    pub fn plan(&self, prompt_ids: &[u32], req: &EditRequest) -> Result<EditPlan> {
        let attributes = req.attrs.iter().map(|a| (a.attribute.clone(), a.weight)).collect();
        let mut plan = EditPlan::new(attributes, req.t_edit, req.solver.spec(Direction::Generate)?, 0);
        plan.lookup = req.lookup;
        if !plan.attributes.is_empty() {
            plan.validate(self.bank.as_ref())?;
        } else if !(req.t_edit > 0.0 && req.t_edit <= 1.0) {
            return Err(EditError::Gate(req.t_edit).into());
        }
        if !req.reweights.is_empty() {
            let vocab = self.vocabulary()?;
            let depth = self.model.uvit().map(|u| u.config.depth).unwrap_or(0);
            for r in &req.reweights {
                if vocab.id(&r.word).is_none() {
                    return Err(PromptError::UnknownWord(r.word.clone()).into());
                }
                let spec = ReweightSpec {
                    positions: vocab.find_target_tokens(prompt_ids, &[r.word.as_str()]),
                    scale: r.scale,
                    t_edit: req.t_edit,
                    blocks: req.reweight_blocks.clone(),
                    allow_negative: req.allow_negative,
                };
                spec.validate(prompt_ids.len(), depth)?;
                plan.reweights.push(spec);
            }
        }
        Ok(plan)
    }

    /// Edits from `x0` and reports the relative change against the unedited
    /// sample from the same noise.
    pub fn edit(&self, x0: &Tensor, prompt: &str, req: &EditRequest) -> Result<EditOutcome> {
        let ids = self.prompt_ids(prompt)?;
        let plan = self.plan(&ids, req)?;
        let prompts = self.prompts(ids);
        let (image, traj) = edit::edit_generate(&self.model, x0, &prompts, &plan, self.bank.as_ref())?;
        let (baseline, _) = flow::generate(&self.model, x0, &prompts, &plan.solver, &NoSteering)?;
        let relative_edit_error = edit::relative_edit_error(&image, &baseline)?;
        Ok(EditOutcome {
            image,
            baseline,
            relative_edit_error,
            evaluations: traj.evaluations,
        })
    }

    /// Per-token attention of image patches in `block` at euler grid step
    /// `step` of the generation from `seed`.
    pub fn attention(&self, prompt: &str, block: usize, step: usize, seed: u64) -> Result<AttentionMaps> {
        let uvit = self
            .model
            .uvit()
            .ok_or_else(|| EngineError::Invalid("attention maps need a U-ViT".into()))?;
        let cfg = uvit.config.clone();
        if block >= cfg.depth {
            return Err(EngineError::Invalid(format!("block {block} out of range for depth {}", cfg.depth)));
        }
        let n = self.meta.flow.time_grid_n;
        if step >= n {
            return Err(EngineError::Invalid(format!("step {step} out of range for {n} grid steps")));
        }
        let ids = self.prompt_ids(prompt)?;
        let vocab = self.vocabulary()?;
        let prompts = vec![ids.clone()];
        let x0 = self.noise(&[seed])?;
        let (x, t) = if step == 0 {
            (x0, 0.0)
        } else {
            let spec = SolverSpec::euler(n, Direction::Generate);
            let (_, traj) = flow::generate(&self.model, &x0, &prompts, &spec, &NoSteering)?;
            let (t, x) = traj.points[step].clone();
            (x, t)
        };
        let hooks = EditHooks {
            retain_attention: true,
            ..EditHooks::none()
        };
        let (_, maps) = self.model.velocity_with_attention(&x, &prompts, t as f32, &hooks)?;
        let m = &maps[block];
        let (heads, tokens) = (cfg.heads, cfg.num_tokens());
        let rows = cfg.image_rows();
        let d = m.data();
        let heatmaps = (0..cfg.prompt_length)
            .map(|j| {
                let values = rows
                    .clone()
                    .map(|r| {
                        let s: f64 = (0..heads).map(|h| d[(h * tokens + r) * tokens + 1 + j] as f64).sum();
                        (s / heads as f64) as f32
                    })
                    .collect();
                let token = match ids[j] {
                    crate::prompt::PAD => "<pad>".to_string(),
                    id => vocab.word(id).unwrap_or("<unk>").to_string(),
                };
                Heatmap {
                    position: j,
                    token,
                    values,
                }
            })
            .collect();
        let g = cfg.grid();
        Ok(AttentionMaps {
            block,
            step,
            t,
            grid: [g, g],
            heatmaps,
        })
    }
}
