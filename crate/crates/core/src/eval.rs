//! Evaluation metrics: energy distance, cycle consistency, edit efficacy,
//! `t_edit` sweeps, reweighting trends and the interpolation-error table.

use serde::{Deserialize, Serialize};

use crate::data::{self, Attribute, ShapeSample};
use crate::edit::{self, DirectionBank, DirectionSet, EditError, EditPlan, Lookup, Provenance};
use crate::flow::{self, NoSteering};
use crate::model::Model;
use crate::ode::{Direction, SolverFamily, SolverSpec};
use crate::prompt::ReweightSpec;
use crate::rng;
use crate::tensor::Tensor;

type Result<T> = std::result::Result<T, EditError>;

fn rows(x: &Tensor) -> (usize, usize) {
    let n = x.shape().first().copied().unwrap_or(0);
    (n, if n == 0 { 0 } else { x.len() / n })
}

fn mean_pair_distance(a: &Tensor, b: &Tensor) -> f64 {
    let ((n, d), (m, _)) = (rows(a), rows(b));
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0;
    for i in 0..n {
        let x = &da[i * d..(i + 1) * d];
        for j in 0..m {
            let y = &db[j * d..(j + 1) * d];
            sum += x
                .iter()
                .zip(y)
                .map(|(&p, &q)| {
                    let e = p as f64 - q as f64;
                    e * e
                })
                .sum::<f64>()
                .sqrt();
        }
    }
    sum / (n * m) as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` over rows, averaging over all pairs
/// including self pairs, so the value is never negative.
pub fn energy_distance(a: &Tensor, b: &Tensor) -> f64 {
    2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b)
}

pub fn seed_noise(model: &Model, seeds: &[u64]) -> Result<Tensor> {
    let shape = model.latent_shape();
    Ok(Tensor::stack(
        &seeds.iter().map(|&s| rng::noise_for_seed(s, &shape)).collect::<Vec<_>>(),
    )?)
}

/// Mean over images of `||generate(invert(x)) - x|| / ||x||`.
pub fn cycle_error(model: &Model, images: &Tensor, prompts: &[Vec<u32>], tol: f64) -> Result<f64> {
    let (x0, _) = flow::invert(model, images, prompts, &SolverSpec::dopri5(tol, Direction::Invert))?;
    let (x1, _) = flow::generate(model, &x0, prompts, &SolverSpec::dopri5(tol, Direction::Generate), &NoSteering)?;
    Ok(flow::mean_relative_error(&x1, images))
}

/// Inverts `samples` under `prompt` on an `n`-step grid and stores, per label,
/// the mean difference between samples carrying the label and the rest.
pub fn collect_bank(
    model: &Model,
    samples: &[ShapeSample],
    prompt: &[u32],
    labels: &[&str],
    n: usize,
    chunk: usize,
) -> Result<DirectionBank> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let us = edit::collect_u_trajectories(model, &images, &[prompt.to_vec()], n, chunk)?;
    let mut bank = DirectionBank::new(n, Provenance::Inversion, model.latent_shape());
    for &label in labels {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (u, s) in us.iter().zip(samples) {
            match s.attrs.has_label(label) {
                Some(true) => pos.push(u.clone()),
                Some(false) => neg.push(u.clone()),
                None => return Err(EditError::UnknownAttribute(label.to_string())),
            }
        }
        let directions = edit::compute_direction(&pos, &neg)?;
        bank.insert(
            label,
            DirectionSet {
                directions,
                positives: pos.len(),
                negatives: neg.len(),
            },
        )?;
    }
    Ok(bank)
}

/// Oracle measuring the attribute a caption word refers to, and whether the
/// word means "more" of it.
pub fn oracle_for_label(label: &str) -> Option<(Attribute, f64)> {
    Some(match label {
        "large" => (Attribute::Size, 1.0),
        "small" => (Attribute::Size, -1.0),
        "bright" => (Attribute::Brightness, 1.0),
        "dim" => (Attribute::Brightness, -1.0),
        "square" => (Attribute::Shape, 1.0),
        "circle" => (Attribute::Shape, -1.0),
        "right" => (Attribute::Position, 1.0),
        "left" => (Attribute::Position, -1.0),
        _ => return None,
    })
}

pub fn measure(images: &Tensor, attribute: Attribute) -> Vec<Option<f64>> {
    images
        .unstack()
        .iter()
        .map(|x| data::attribute_oracle(x, attribute).ok())
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlipCount {
    pub increased: usize,
    pub decreased: usize,
    pub unchanged: usize,
    /// Pairs where either image was unmeasurable.
    pub undefined: usize,
    /// Edited images bit-identical to their baseline.
    pub identical: usize,
    pub total: usize,
}

impl FlipCount {
    pub fn between(edited: &Tensor, baseline: &Tensor, attribute: Attribute) -> Self {
        let (e, b) = (measure(edited, attribute), measure(baseline, attribute));
        let mut c = FlipCount {
            total: e.len(),
            ..Default::default()
        };
        for ((ei, bi), (xe, xb)) in e.iter().zip(&b).zip(edited.unstack().iter().zip(baseline.unstack().iter())) {
            if xe.to_le_bytes() == xb.to_le_bytes() {
                c.identical += 1;
            }
            match (ei, bi) {
                (Some(x), Some(y)) if x > y => c.increased += 1,
                (Some(x), Some(y)) if x < y => c.decreased += 1,
                (Some(_), Some(_)) => c.unchanged += 1,
                _ => c.undefined += 1,
            }
        }
        c
    }

    pub fn increase_rate(&self) -> f64 {
        self.increased as f64 / self.total.max(1) as f64
    }

    pub fn decrease_rate(&self) -> f64 {
        self.decreased as f64 / self.total.max(1) as f64
    }
}

/// Shared inputs of the editing experiments.
pub struct EditSetup<'a> {
    pub model: &'a Model,
    pub bank: &'a DirectionBank,
    pub prompt: Vec<u32>,
    pub solver: SolverSpec,
    pub x0: Tensor,
}

impl EditSetup<'_> {
    pub fn baseline(&self) -> Result<Tensor> {
        Ok(flow::generate(self.model, &self.x0, &[self.prompt.clone()], &self.solver, &NoSteering)?.0)
    }

    pub fn edit(&self, attributes: Vec<(String, f64)>, t_edit: f64, lookup: Lookup) -> Result<Tensor> {
        let mut plan = EditPlan::new(attributes, t_edit, self.solver, 0);
        plan.lookup = lookup;
        Ok(edit::edit_generate(self.model, &self.x0, &[self.prompt.clone()], &plan, Some(self.bank))?.0)
    }

    pub fn reweight(&self, positions: &[usize], scale: f32, t_edit: f64) -> Result<Tensor> {
        let mut plan = EditPlan::new(Vec::new(), t_edit, self.solver, 0);
        plan.reweights = vec![ReweightSpec::new(positions.to_vec(), scale, t_edit)];
        Ok(edit::edit_generate(self.model, &self.x0, &[self.prompt.clone()], &plan, None)?.0)
    }
}

/// Mean per-sample L2 distance between two batches.
pub fn mean_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (ra, rb) = (a.unstack(), b.unstack());
    let mut sum = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sum += x.sub(y)?.l2_norm();
    }
    Ok(sum / ra.len().max(1) as f64)
}

/// Mean edit distance from the baseline for each `t_edit`.
pub fn t_edit_sweep(setup: &EditSetup, attribute: &str, w: f64, t_edits: &[f64]) -> Result<Vec<(f64, f64)>> {
    let base = setup.baseline()?;
    t_edits
        .iter()
        .map(|&te| {
            let e = setup.edit(vec![(attribute.to_string(), w)], te, Lookup::Linear)?;
            Ok((te, mean_distance(&e, &base)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightTrend {
    pub scales: Vec<f32>,
    /// Mean oracle value per scale.
    pub means: Vec<f64>,
    pub non_decreasing: usize,
    pub non_increasing: usize,
    pub total: usize,
}

/// Oracle measurements for a sweep of reweight scales, counting seeds whose
/// measurements are monotone in the scale.
pub fn reweight_trend(
    setup: &EditSetup,
    positions: &[usize],
    scales: &[f32],
    t_edit: f64,
    attribute: Attribute,
) -> Result<ReweightTrend> {
    let per_scale: Vec<Vec<Option<f64>>> = scales
        .iter()
        .map(|&c| Ok(measure(&setup.reweight(positions, c, t_edit)?, attribute)))
        .collect::<Result<_>>()?;
    let total = per_scale.first().map_or(0, Vec::len);
    let (mut up, mut down) = (0, 0);
    for i in 0..total {
        let series: Option<Vec<f64>> = per_scale.iter().map(|s| s[i]).collect();
        if let Some(s) = series {
            up += s.windows(2).all(|w| w[1] >= w[0]) as usize;
            down += s.windows(2).all(|w| w[1] <= w[0]) as usize;
        }
    }
    let means = per_scale
        .iter()
        .map(|s| {
            let v: Vec<f64> = s.iter().flatten().copied().collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect();
    Ok(ReweightTrend {
        scales: scales.to_vec(),
        means,
        non_decreasing: up,
        non_increasing: down,
        total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub solver: SolverFamily,
    pub lookup: Lookup,
    /// Relative edit error for each bank grid, in the order of `grids`.
    pub errors: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTable {
    pub grids: Vec<usize>,
    pub reference_steps: usize,
    pub rows: Vec<InterpolationRow>,
}

impl InterpolationTable {
    pub fn row(&self, solver: SolverFamily, lookup: Lookup) -> Option<&InterpolationRow> {
        self.rows.iter().find(|r| r.solver == solver && r.lookup == lookup)
    }
}

/// Relative edit error of each adaptive solver against a fixed-step euler edit
/// on `reference_steps` steps that reads the finest bank at its grid points.
/// `banks` must be ordered by grid size with the reference grid last.
#[allow(clippy::too_many_arguments)]
pub fn interpolation_table(
    model: &Model,
    banks: &[DirectionBank],
    prompt: &[u32],
    x0: &Tensor,
    attribute: &str,
    w: f64,
    t_edit: f64,
    tol: f64,
) -> Result<InterpolationTable> {
    let finest = banks.last().ok_or(EditError::EmptySide("bank"))?;
    let reference_steps = finest.grid_n;
    let prompts = [prompt.to_vec()];
    let attrs = vec![(attribute.to_string(), w)];
    let ref_plan = EditPlan::new(attrs.clone(), t_edit, SolverSpec::euler(reference_steps, Direction::Generate), 0);
    let reference = edit::edit_generate(model, x0, &prompts, &ref_plan, Some(finest))?.0;
    let mut rows = Vec::new();
    for family in [SolverFamily::Dopri5, SolverFamily::Bosh3, SolverFamily::AdaptiveHeun] {
        for lookup in [Lookup::Linear, Lookup::Nearest] {
            let mut errors = Vec::with_capacity(banks.len());
            for bank in banks {
                let mut plan = EditPlan::new(attrs.clone(), t_edit, SolverSpec::adaptive(family, tol, tol, Direction::Generate), 0);
                plan.lookup = lookup;
                let out = edit::edit_generate(model, x0, &prompts, &plan, Some(bank))?.0;
                errors.push(edit::relative_edit_error(&out, &reference)?);
            }
            rows.push(InterpolationRow {
                solver: family,
                lookup,
                errors,
            });
        }
    }
    Ok(InterpolationTable {
        grids: banks.iter().map(|b| b.grid_n).collect(),
        reference_steps,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_distance_of_identical_sets_is_small_and_shifts_grow() {
        let a = data::two_moons(200, 0.05, 1);
        let b = data::two_moons(200, 0.05, 2);
        let shifted = a.map(|v| v + 1.0).unwrap();
        let same = energy_distance(&a, &b);
        let far = energy_distance(&a, &shifted);
        assert!(same.abs() < 0.05, "{same}");
        assert!(far > 10.0 * same.abs(), "{far} vs {same}");
    }

    #[test]
    fn label_oracles_cover_every_caption_word() {
        for l in data::LABELS {
            assert!(oracle_for_label(l).is_some(), "{l}");
        }
    }
}
