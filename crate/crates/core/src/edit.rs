//! Semantic directions in u-space: collection from inversion trajectories,
//! time interpolation, gated injection during sampling, and PCA.

use indexmap::IndexMap;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{self, edit_window, FlowError, Steering};
use crate::model::Model;
use crate::ode::{Direction, SolverFamily, SolverSpec, Trajectory};
use crate::prompt::ReweightSpec;
use crate::tensor::{Tensor, TensorError};
use crate::uvit::AttentionReweight;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("unknown attribute '{0}'")]
    UnknownAttribute(String),
    #[error("attribute '{0}' listed twice")]
    DuplicateAttribute(String),
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("empty {0} set")]
    EmptySide(&'static str),
    #[error("t_edit {0} outside (0, 1]")]
    Gate(f64),
    #[error("time {0} outside [0, 1]")]
    Time(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("collection failed on image {index} after {completed} images: {source}")]
    Collection {
        index: usize,
        completed: usize,
        #[source]
        source: FlowError,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
}

pub type Result<T> = std::result::Result<T, EditError>;

/// `u` values of one image at grid times `j / N`, index `j` ascending.
pub type UTrajectory = Vec<Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Inverted real (dataset) images.
    Inversion,
    /// Generated samples labelled after the fact.
    Generated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionSet {
    /// `N + 1` directions at `t_j = j / N`.
    pub directions: Vec<Tensor>,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lookup {
    /// Linear in `t` between grid neighbours.
    #[default]
    Linear,
    /// Closest grid time, ties to the later one.
    Nearest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionBank {
    pub grid_n: usize,
    pub provenance: Provenance,
    pub latent_shape: Vec<usize>,
    pub attributes: IndexMap<String, DirectionSet>,
}

impl DirectionBank {
    pub fn new(grid_n: usize, provenance: Provenance, latent_shape: Vec<usize>) -> Self {
        Self {
            grid_n,
            provenance,
            latent_shape,
            attributes: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, set: DirectionSet) -> Result<()> {
        if set.directions.len() != self.grid_n + 1 {
            return Err(EditError::Grid(format!(
                "{} directions for grid {}",
                set.directions.len(),
                self.grid_n
            )));
        }
        if let Some(d) = set.directions.iter().find(|d| d.shape() != self.latent_shape) {
            return Err(EditError::Grid(format!(
                "direction shape {:?} != latent {:?}",
                d.shape(),
                self.latent_shape
            )));
        }
        self.attributes.insert(name.into(), set);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&DirectionSet> {
        self.attributes
            .get(name)
            .ok_or_else(|| EditError::UnknownAttribute(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.keys().map(String::as_str)
    }

    /// `s_k(t)` from the stored grid. Grid hits return the stored tensor.
    pub fn interpolate(&self, name: &str, t: f64, lookup: Lookup) -> Result<Tensor> {
        let set = self.get(name)?;
        if !(0.0..=1.0).contains(&t) {
            return Err(EditError::Time(t));
        }
        let n = self.grid_n;
        let x = t * n as f64;
        let nearest = x.round();
        if (x - nearest).abs() < 1e-9 || lookup == Lookup::Nearest {
            return Ok(set.directions[nearest as usize].clone());
        }
        let lo = (x.floor() as usize).min(n - 1);
        let frac = x - lo as f64;
        let (a, b) = (&set.directions[lo], &set.directions[lo + 1]);
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&a, &b)| a as f64 + (b as f64 - a as f64) * frac)
            .collect();
        Ok(Tensor::from_f64(a.shape().to_vec(), &data)?)
    }

    /// `sum_k w_k s_k(t)` in attribute-name order, accumulated at f64.
    /// `None` when every weight is zero.
    pub fn offset(&self, weights: &[(String, f64)], t: f64, lookup: Lookup) -> Result<Option<Tensor>> {
        let mut sorted: Vec<&(String, f64)> = weights.iter().filter(|(_, w)| *w != 0.0).collect();
        if sorted.is_empty() {
            return Ok(None);
        }
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        let mut acc = vec![0.0f64; self.latent_shape.iter().product()];
        for (name, w) in sorted {
            let s = self.interpolate(name, t, lookup)?;
            for (a, &v) in acc.iter_mut().zip(s.data()) {
                *a += w * v as f64;
            }
        }
        Ok(Some(Tensor::from_f64(self.latent_shape.clone(), &acc)?))
    }
}

/// Inverts each image with fixed-step euler on `n` steps and returns its
/// network-input latents at the `n + 1` grid times, in ascending time.
pub fn collect_u_trajectories(
    model: &Model,
    images: &[Tensor],
    prompts: &[Vec<u32>],
    n: usize,
    chunk: usize,
) -> Result<Vec<UTrajectory>> {
    let spec = SolverSpec::fixed(SolverFamily::Euler, n, Direction::Invert);
    let chunk = chunk.max(1);
    let mut out: Vec<UTrajectory> = Vec::with_capacity(images.len());
    for (c, batch) in images.chunks(chunk).enumerate() {
        let start = c * chunk;
        let x = Tensor::stack(batch)?;
        let p: Vec<Vec<u32>> = if prompts.len() == 1 {
            prompts.to_vec()
        } else {
            prompts.get(start..start + batch.len()).map(|s| s.to_vec()).unwrap_or_default()
        };
        let traj = flow::invert(model, &x, &p, &spec).map_err(|e| EditError::Collection {
            index: start,
            completed: out.len(),
            source: e,
        })?;
        out.extend(per_image(&traj.1, batch.len()));
    }
    Ok(out)
}

fn per_image(traj: &Trajectory<Tensor>, count: usize) -> Vec<UTrajectory> {
    let mut per: Vec<UTrajectory> = vec![Vec::with_capacity(traj.points.len()); count];
    for (_, state) in traj.points.iter().rev() {
        for (i, u) in state.unstack().into_iter().enumerate() {
            per[i].push(u);
        }
    }
    per
}

fn side_mean(side: &[UTrajectory], j: usize, shape: &[usize]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0f64; shape.iter().product()];
    for traj in side {
        for (a, &v) in acc.iter_mut().zip(traj[j].data()) {
            *a += v as f64;
        }
    }
    let k = side.len() as f64;
    Ok(acc.into_iter().map(|a| a / k).collect())
}

/// `s_j = mean(pos_j) - mean(neg_j)` for every grid index.
pub fn compute_direction(pos: &[UTrajectory], neg: &[UTrajectory]) -> Result<Vec<Tensor>> {
    let first = pos.first().ok_or(EditError::EmptySide("positive"))?;
    if neg.is_empty() {
        return Err(EditError::EmptySide("negative"));
    }
    let len = first.len();
    let shape = first.first().map(|u| u.shape().to_vec()).unwrap_or_default();
    for traj in pos.iter().chain(neg) {
        if traj.len() != len || traj.iter().any(|u| u.shape() != shape) {
            return Err(EditError::Grid(format!(
                "trajectory of {} points does not match {len} points of {shape:?}",
                traj.len()
            )));
        }
    }
    (0..len)
        .map(|j| {
            let p = side_mean(pos, j, &shape)?;
            let q = side_mean(neg, j, &shape)?;
            let d: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
            Ok(Tensor::from_f64(shape.clone(), &d)?)
        })
        .collect()
}

/// `u + w s`.
pub fn apply_guidance(u: &Tensor, s: &Tensor, w: f64) -> Result<Tensor> {
    if u.shape() != s.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "apply_guidance",
            lhs: u.shape().to_vec(),
            rhs: s.shape().to_vec(),
        }
        .into());
    }
    if w == 0.0 {
        return Ok(u.clone());
    }
    let data: Vec<f64> = u
        .data()
        .iter()
        .zip(s.data())
        .map(|(&a, &b)| a as f64 + w * b as f64)
        .collect();
    Ok(Tensor::from_f64(u.shape().to_vec(), &data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub attributes: Vec<(String, f64)>,
    pub t_edit: f64,
    pub solver: SolverSpec,
    pub seed: u64,
    #[serde(default)]
    pub reweights: Vec<ReweightSpec>,
    #[serde(default)]
    pub lookup: Lookup,
}

impl EditPlan {
    pub fn new(attributes: Vec<(String, f64)>, t_edit: f64, solver: SolverSpec, seed: u64) -> Self {
        Self {
            attributes,
            t_edit,
            solver,
            seed,
            reweights: Vec::new(),
            lookup: Lookup::Linear,
        }
    }

    pub fn validate(&self, bank: Option<&DirectionBank>) -> Result<()> {
        if !(self.t_edit > 0.0 && self.t_edit <= 1.0) {
            return Err(EditError::Gate(self.t_edit));
        }
        for (i, (name, _)) in self.attributes.iter().enumerate() {
            if self.attributes[..i].iter().any(|(n, _)| n == name) {
                return Err(EditError::DuplicateAttribute(name.clone()));
            }
            match bank {
                Some(b) => {
                    b.get(name)?;
                }
                None => return Err(EditError::UnknownAttribute(name.clone())),
            }
        }
        self.solver.validate().map_err(FlowError::from)?;
        Ok(())
    }
}

/// Gated u-space offsets and attention reweighting for one edit.
pub struct EditSteering<'a> {
    pub bank: Option<&'a DirectionBank>,
    pub attributes: &'a [(String, f64)],
    pub t_edit: f64,
    pub lookup: Lookup,
    pub reweights: &'a [ReweightSpec],
}

impl<'a> EditSteering<'a> {
    pub fn new(plan: &'a EditPlan, bank: Option<&'a DirectionBank>) -> Self {
        Self {
            bank,
            attributes: &plan.attributes,
            t_edit: plan.t_edit,
            lookup: plan.lookup,
            reweights: &plan.reweights,
        }
    }
}

impl Steering for EditSteering<'_> {
    fn offset(&self, t: f64) -> Option<Tensor> {
        if !edit_window(t, self.t_edit) {
            return None;
        }
        let bank = self.bank?;
        bank.offset(self.attributes, t, self.lookup)
            .expect("edit plan validated against bank")
    }

    fn reweight(&self, t: f64) -> Option<AttentionReweight> {
        let targets: Vec<_> = self
            .reweights
            .iter()
            .filter(|r| edit_window(t, r.t_edit))
            .map(ReweightSpec::target)
            .collect();
        let rw = AttentionReweight { targets };
        (!rw.is_empty()).then_some(rw)
    }
}

/// Generates from `x0` with the plan's offsets and reweighting applied at every
/// field evaluation with `0 < t < t_edit`.
pub fn edit_generate(
    model: &Model,
    x0: &Tensor,
    prompts: &[Vec<u32>],
    plan: &EditPlan,
    bank: Option<&DirectionBank>,
) -> Result<(Tensor, Trajectory<Tensor>)> {
    if !plan.attributes.is_empty() {
        plan.validate(bank)?;
    } else if !(plan.t_edit > 0.0 && plan.t_edit <= 1.0) {
        return Err(EditError::Gate(plan.t_edit));
    }
    let steering = EditSteering::new(plan, bank);
    Ok(flow::generate(model, x0, prompts, &plan.solver, &steering)?)
}

/// `||candidate - reference|| / ||reference||`.
pub fn relative_edit_error(candidate: &Tensor, reference: &Tensor) -> Result<f64> {
    let d = candidate.sub(reference)?;
    Ok(d.l2_norm() / reference.l2_norm())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Tensor,
    /// Unit-norm components, variance descending.
    pub components: Vec<Tensor>,
    pub explained_variance: Vec<f64>,
}

/// Leading principal components of the flattened samples.
pub fn pca_directions(samples: &[Tensor], n_components: usize) -> Result<Pca> {
    if samples.len() < n_components.max(2) {
        return Err(EditError::TooFewSamples {
            needed: n_components.max(2),
            got: samples.len(),
        });
    }
    let shape = samples[0].shape().to_vec();
    let d = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.shape() != shape) {
        return Err(TensorError::ShapeMismatch {
            op: "pca",
            lhs: shape,
            rhs: s.shape().to_vec(),
        }
        .into());
    }
    let n = samples.len();
    let mut mean = vec![0.0f64; d];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s.data()) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| samples[i].data()[j] as f64 - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10 + f64::MIN_POSITIVE;
    let mut components = Vec::new();
    let mut explained_variance = Vec::new();
    for &k in order.iter().take(n_components) {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / norm);
        components.push(Tensor::from_f64(shape.clone(), &v)?);
        explained_variance.push(lambda);
    }
    if components.len() < n_components {
        log::warn!(
            "covariance has rank {} < {n_components} requested components",
            components.len()
        );
    }
    Ok(Pca {
        mean: Tensor::from_f64(shape, &mean)?,
        components,
        explained_variance,
    })
}
