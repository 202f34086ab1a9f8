//! Explicit Runge-Kutta integration over `t` in `[0, 1]`.
//!
//! Generation integrates `0 -> 1`, inversion `1 -> 0`. Fixed-step families take
//! `N` macro-steps at `t_i = i/N`; adaptive families use an embedded error
//! estimate with a PI step-size controller.

pub mod tableau;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
pub use tableau::{solver_tableaus, Tableau, ADAPTIVE_HEUN, BOSH3, DOPRI5, EULER, RK4};

/// Smallest step size before the integration is declared divergent.
pub const MIN_STEP: f64 = 1e-12;
const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
const MAX_STEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum OdeError {
    #[error("step size underflow at t={t}: h={h:e}")]
    StepUnderflow { t: f64, h: f64 },
    #[error("numerical blow-up at t={t}: non-finite state")]
    BlowUp { t: f64 },
    #[error("exceeded {0} steps")]
    TooManySteps(usize),
    #[error("invalid solver spec: {0}")]
    InvalidSpec(String),
    #[error("field evaluation failed at t={t}: {source}")]
    Field {
        t: f64,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl OdeError {
    pub fn field(t: f64, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        OdeError::Field { t, source: Box::new(e) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverFamily {
    Euler,
    Rk4,
    Dopri5,
    Bosh3,
    AdaptiveHeun,
}

impl SolverFamily {
    pub fn tableau(self) -> &'static Tableau {
        match self {
            SolverFamily::Euler => &EULER,
            SolverFamily::Rk4 => &RK4,
            SolverFamily::Dopri5 => &DOPRI5,
            SolverFamily::Bosh3 => &BOSH3,
            SolverFamily::AdaptiveHeun => &ADAPTIVE_HEUN,
        }
    }

    pub fn is_adaptive(self) -> bool {
        self.tableau().is_adaptive()
    }

    pub fn name(self) -> &'static str {
        self.tableau().name
    }

    pub const ALL: [SolverFamily; 5] = [
        SolverFamily::Euler,
        SolverFamily::Rk4,
        SolverFamily::Dopri5,
        SolverFamily::Bosh3,
        SolverFamily::AdaptiveHeun,
    ];
}

impl std::str::FromStr for SolverFamily {
    type Err = OdeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SolverFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| OdeError::InvalidSpec(format!("unknown solver '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Prior noise at `t = 0` to data at `t = 1`.
    Generate,
    /// Data at `t = 1` back to noise at `t = 0`.
    Invert,
}

impl Direction {
    pub fn span(self) -> (f64, f64) {
        match self {
            Direction::Generate => (0.0, 1.0),
            Direction::Invert => (1.0, 0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSpec {
    pub family: SolverFamily,
    /// Macro-step count; fixed-step families only.
    pub steps: usize,
    pub atol: f64,
    pub rtol: f64,
    pub direction: Direction,
}

impl SolverSpec {
    pub fn fixed(family: SolverFamily, steps: usize, direction: Direction) -> Self {
        Self {
            family,
            steps,
            atol: 1e-5,
            rtol: 1e-5,
            direction,
        }
    }

    pub fn adaptive(family: SolverFamily, atol: f64, rtol: f64, direction: Direction) -> Self {
        Self {
            family,
            steps: 100,
            atol,
            rtol,
            direction,
        }
    }

    pub fn euler(steps: usize, direction: Direction) -> Self {
        Self::fixed(SolverFamily::Euler, steps, direction)
    }

    pub fn dopri5(tol: f64, direction: Direction) -> Self {
        Self::adaptive(SolverFamily::Dopri5, tol, tol, direction)
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn validate(&self) -> Result<(), OdeError> {
        if self.family.is_adaptive() {
            if !(self.atol > 0.0 && self.rtol > 0.0) {
                return Err(OdeError::InvalidSpec(format!(
                    "{} needs atol, rtol > 0 (got {}, {})",
                    self.family.name(),
                    self.atol,
                    self.rtol
                )));
            }
        } else if self.steps == 0 {
            return Err(OdeError::InvalidSpec(format!("{} needs steps >= 1", self.family.name())));
        }
        Ok(())
    }
}

/// Vector-space operations the integrators need from a state type.
pub trait OdeState: Clone {
    fn dim(&self) -> usize;
    fn get(&self, i: usize) -> f64;
    /// `self + h * sum(c_j * k_j)`.
    fn lincomb(&self, h: f64, terms: &[(f64, &Self)]) -> Option<Self>;

    fn all_finite(&self) -> bool {
        (0..self.dim()).all(|i| self.get(i).is_finite())
    }
}

impl OdeState for Tensor {
    fn dim(&self) -> usize {
        self.len()
    }

    fn get(&self, i: usize) -> f64 {
        self.data()[i] as f64
    }

    fn lincomb(&self, h: f64, terms: &[(f64, &Self)]) -> Option<Self> {
        let mut acc: Vec<f64> = vec![0.0; self.len()];
        for &(c, k) in terms {
            if c == 0.0 {
                continue;
            }
            assert_eq!(k.shape(), self.shape(), "stage shape differs from state");
            for (a, &v) in acc.iter_mut().zip(k.data()) {
                *a += c * v as f64;
            }
        }
        let data: Vec<f32> = self
            .data()
            .iter()
            .zip(&acc)
            .map(|(&y, &a)| (y as f64 + h * a) as f32)
            .collect();
        Tensor::new(self.shape().to_vec(), data).ok()
    }
}

impl OdeState for Vec<f64> {
    fn dim(&self) -> usize {
        self.len()
    }

    fn get(&self, i: usize) -> f64 {
        self[i]
    }

    fn lincomb(&self, h: f64, terms: &[(f64, &Self)]) -> Option<Self> {
        let mut out = self.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let s: f64 = terms.iter().filter(|(c, _)| *c != 0.0).map(|(c, k)| c * k[i]).sum();
            *o += h * s;
        }
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}

/// `sqrt(mean((v_i / (atol + rtol * scale_i))^2))` with
/// `scale_i = max(|a_i|, |b_i|)`.
fn weighted_rms<S: OdeState>(v: &S, a: &S, b: &S, h: f64, atol: f64, rtol: f64) -> f64 {
    let n = v.dim();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = (0..n)
        .map(|i| {
            let sc = atol + rtol * a.get(i).abs().max(b.get(i).abs());
            let e = h * v.get(i) / sc;
            e * e
        })
        .sum();
    (s / n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
    pub accepted: bool,
    /// Weighted RMS error estimate for adaptive steps.
    pub error: Option<f64>,
}

/// States visited by an integration, in integration order.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub points: Vec<(f64, S)>,
    pub steps: Vec<StepRecord>,
    pub evaluations: usize,
}

impl<S> Trajectory<S> {
    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|(t, _)| *t).collect()
    }

    pub fn accepted(&self) -> usize {
        self.steps.iter().filter(|s| s.accepted).count()
    }

    pub fn rejected(&self) -> usize {
        self.steps.len() - self.accepted()
    }
}

pub type Observer<'a, S> = &'a mut dyn FnMut(f64, &S);

/// Integrates `dx/dt = field(t, x)` over the span implied by `spec.direction`.
pub fn integrate<S, F>(
    field: F,
    x_init: &S,
    spec: &SolverSpec,
    observer: Option<Observer<'_, S>>,
) -> Result<(S, Trajectory<S>), OdeError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, OdeError>,
{
    spec.validate()?;
    let (t0, t1) = spec.direction.span();
    let tab = spec.family.tableau();
    if tab.is_adaptive() {
        integrate_adaptive(tab, field, x_init, t0, t1, spec.atol, spec.rtol, observer)
    } else {
        integrate_fixed(tab, field, x_init, t0, t1, spec.steps, observer)
    }
}

struct Counted<F> {
    f: F,
    n: usize,
}

impl<F> Counted<F> {
    fn call<S>(&mut self, t: f64, x: &S) -> Result<S, OdeError>
    where
        S: OdeState,
        F: FnMut(f64, &S) -> Result<S, OdeError>,
    {
        self.n += 1;
        let dx = (self.f)(t, x)?;
        if !dx.all_finite() {
            return Err(OdeError::BlowUp { t });
        }
        Ok(dx)
    }
}

/// Runs the stages of one step, returning them with the stage-0 slope.
fn stages<S, F>(
    tab: &Tableau,
    f: &mut Counted<F>,
    t: f64,
    h: f64,
    y: &S,
    k0: S,
) -> Result<Vec<S>, OdeError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, OdeError>,
{
    let mut ks: Vec<S> = Vec::with_capacity(tab.stages());
    ks.push(k0);
    for i in 1..tab.stages() {
        let terms: Vec<(f64, &S)> = tab.a[i].iter().copied().zip(ks.iter()).collect();
        let ts = t + tab.c[i] * h;
        let yi = y.lincomb(h, &terms).ok_or(OdeError::BlowUp { t: ts })?;
        let k = f.call(ts, &yi)?;
        ks.push(k);
    }
    Ok(ks)
}

/// `n` equal steps of `tab` from `t0` to `t1`, with `t_i = t0 + (t1 - t0) i/n`.
/// Works for any tableau, including embedded pairs used at a forced step.
pub fn integrate_fixed<S, F>(
    tab: &Tableau,
    field: F,
    x_init: &S,
    t0: f64,
    t1: f64,
    n: usize,
    mut observer: Option<Observer<'_, S>>,
) -> Result<(S, Trajectory<S>), OdeError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, OdeError>,
{
    if n == 0 {
        return Err(OdeError::InvalidSpec("steps must be >= 1".into()));
    }
    let mut f = Counted { f: field, n: 0 };
    let time = |i: usize| if i == n { t1 } else { t0 + (t1 - t0) * i as f64 / n as f64 };
    let mut y = x_init.clone();
    let mut traj = Trajectory {
        points: vec![(t0, y.clone())],
        steps: Vec::with_capacity(n),
        evaluations: 0,
    };
    for i in 0..n {
        let (t, tn) = (time(i), time(i + 1));
        let h = tn - t;
        let k0 = f.call(t, &y)?;
        let ks = stages(tab, &mut f, t, h, &y, k0)?;
        let terms: Vec<(f64, &S)> = tab.b.iter().copied().zip(ks.iter()).collect();
        y = y.lincomb(h, &terms).ok_or(OdeError::BlowUp { t: tn })?;
        traj.steps.push(StepRecord {
            t,
            h,
            accepted: true,
            error: None,
        });
        traj.points.push((tn, y.clone()));
        if let Some(obs) = observer.as_mut() {
            obs(tn, &y);
        }
    }
    traj.evaluations = f.n;
    Ok((y, traj))
}

fn initial_step<S, F>(
    f: &mut Counted<F>,
    t0: f64,
    y0: &S,
    f0: &S,
    dir: f64,
    order: u32,
    atol: f64,
    rtol: f64,
) -> Result<f64, OdeError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, OdeError>,
{
    let d0 = weighted_rms(y0, y0, y0, 1.0, atol, rtol);
    let d1 = weighted_rms(f0, y0, y0, 1.0, atol, rtol);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0.lincomb(dir * h0, &[(1.0, f0)]).ok_or(OdeError::BlowUp { t: t0 })?;
    let f1 = f.call(t0 + dir * h0, &y1)?;
    let diff = f1.lincomb(-1.0, &[(1.0, f0)]).ok_or(OdeError::BlowUp { t: t0 })?;
    let d2 = weighted_rms(&diff, y0, y0, 1.0, atol, rtol) / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dm).powf(1.0 / (order as f64 + 1.0))
    };
    Ok((100.0 * h0).min(h1))
}

#[allow(clippy::too_many_arguments)]
fn integrate_adaptive<S, F>(
    tab: &Tableau,
    field: F,
    x_init: &S,
    t0: f64,
    t1: f64,
    atol: f64,
    rtol: f64,
    mut observer: Option<Observer<'_, S>>,
) -> Result<(S, Trajectory<S>), OdeError>
where
    S: OdeState,
    F: FnMut(f64, &S) -> Result<S, OdeError>,
{
    let b_emb = tab.b_embedded.expect("adaptive tableau");
    let err_w: Vec<f64> = tab.b.iter().zip(b_emb).map(|(b, e)| b - e).collect();
    // PI controller exponents on the lower of the two orders
    let k = tab.embedded_order.min(tab.order) as f64 + 1.0;
    let (alpha, beta) = (0.7 / k, 0.4 / k);

    let mut f = Counted { f: field, n: 0 };
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = x_init.clone();
    let mut traj = Trajectory {
        points: vec![(t0, y.clone())],
        steps: Vec::new(),
        evaluations: 0,
    };
    let mut k0 = f.call(t, &y)?;
    let mut h_abs = initial_step(&mut f, t0, &y, &k0, dir, tab.order, atol, rtol)?.min(span);
    let mut err_prev: f64 = 1e-4;
    let mut last_rejected = false;

    while (t1 - t) * dir > 0.0 {
        if traj.steps.len() >= MAX_STEPS {
            return Err(OdeError::TooManySteps(MAX_STEPS));
        }
        let remaining = (t1 - t).abs();
        let last = h_abs >= remaining;
        if last {
            h_abs = remaining;
        }
        if h_abs < MIN_STEP {
            return Err(OdeError::StepUnderflow { t, h: h_abs });
        }
        let h = dir * h_abs;
        let ks = stages(tab, &mut f, t, h, &y, k0.clone())?;
        let terms: Vec<(f64, &S)> = tab.b.iter().copied().zip(ks.iter()).collect();
        let y_new = y.lincomb(h, &terms).ok_or(OdeError::BlowUp { t: t + h })?;
        let err_terms: Vec<(f64, &S)> = err_w.iter().copied().zip(ks.iter()).collect();
        let zero = y.lincomb(-1.0, &[(1.0, &y)]).ok_or(OdeError::BlowUp { t })?;
        let err_vec = zero.lincomb(1.0, &err_terms).ok_or(OdeError::BlowUp { t })?;
        let err = weighted_rms(&err_vec, &y, &y_new, h_abs, atol, rtol);
        if !err.is_finite() {
            return Err(OdeError::BlowUp { t });
        }

        if err <= 1.0 {
            let t_new = if last { t1 } else { t + h };
            traj.steps.push(StepRecord {
                t,
                h,
                accepted: true,
                error: Some(err),
            });
            k0 = if tab.fsal {
                ks.into_iter().last().unwrap()
            } else if (t1 - t_new) * dir > 0.0 {
                f.call(t_new, &y_new)?
            } else {
                k0
            };
            t = t_new;
            y = y_new;
            traj.points.push((t, y.clone()));
            if let Some(obs) = observer.as_mut() {
                obs(t, &y);
            }
            let e = err.max(1e-10);
            let mut fac = SAFETY * e.powf(-alpha) * err_prev.powf(beta);
            fac = fac.clamp(MIN_FACTOR, MAX_FACTOR);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h_abs *= fac;
            err_prev = e;
            last_rejected = false;
        } else {
            traj.steps.push(StepRecord {
                t,
                h,
                accepted: false,
                error: Some(err),
            });
            let fac = (SAFETY * err.powf(-1.0 / k)).max(MIN_FACTOR);
            h_abs *= fac;
            last_rejected = true;
        }
    }
    traj.evaluations = f.n;
    Ok((y, traj))
}
