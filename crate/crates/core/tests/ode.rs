use flowedit::ode::{Direction, OdeError, SolverFamily, SolverSpec, integrate, integrate_fixed};
use proptest::prelude::*;

fn decay(_t: f64, x: &Vec<f64>) -> Result<Vec<f64>, OdeError> {
    Ok(x.iter().map(|v| -v).collect())
}

fn fixed_error(family: SolverFamily, n: usize) -> f64 {
    let (x, _) = integrate_fixed(family.tableau(), decay, &vec![1.0], 0.0, 1.0, n, None).unwrap();
    (x[0] - (-1.0f64).exp()).abs()
}

/// Least-squares slope of log(error) against log(step size).
fn observed_order(family: SolverFamily, ns: &[usize]) -> f64 {
    let pts: Vec<(f64, f64)> = ns.iter().map(|&n| ((1.0 / n as f64).ln(), fixed_error(family, n).ln())).collect();
    let k = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / k, pts.iter().map(|p| p.1).sum::<f64>() / k);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn adaptive_solvers_hit_exponential_decay() {
    for family in [SolverFamily::Dopri5, SolverFamily::Bosh3, SolverFamily::AdaptiveHeun] {
        let spec = SolverSpec::adaptive(family, 1e-5, 1e-5, Direction::Generate);
        let (x, traj) = integrate(decay, &vec![1.0], &spec, None).unwrap();
        let err = (x[0] - (-1.0f64).exp()).abs();
        assert!(err < 1e-5, "{family:?}: {err:e}");
        assert_eq!(traj.points.last().unwrap().0, 1.0);
    }
}

#[test]
fn fixed_step_orders() {
    let ns = [4, 8, 16, 32];
    for (family, order) in [
        (SolverFamily::Euler, 1.0),
        (SolverFamily::AdaptiveHeun, 2.0),
        (SolverFamily::Bosh3, 3.0),
        (SolverFamily::Rk4, 4.0),
    ] {
        let p = observed_order(family, &ns);
        assert!((p - order).abs() < 0.3, "{family:?}: {p}");
    }
    assert!(observed_order(SolverFamily::Dopri5, &ns) >= 4.5);
}

#[test]
fn inversion_runs_backwards() {
    let spec = SolverSpec::fixed(SolverFamily::Rk4, 50, Direction::Invert);
    let (x, traj) = integrate(decay, &vec![(-1.0f64).exp()], &spec, None).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-7);
    assert_eq!(traj.times().first(), Some(&1.0));
    assert_eq!(traj.times().last(), Some(&0.0));
}

#[test]
fn tighter_tolerance_costs_more_evaluations() {
    let eval = |tol: f64| {
        let spec = SolverSpec::dopri5(tol, Direction::Generate);
        integrate(decay, &vec![1.0, -2.0], &spec, None).unwrap().1.evaluations
    };
    assert!(eval(1e-3) < eval(1e-8));
}

#[test]
fn field_errors_and_blow_up_are_reported() {
    let spec = SolverSpec::dopri5(1e-5, Direction::Generate);
    let explode = |_t: f64, x: &Vec<f64>| Ok(x.iter().map(|v| v * 1e300).collect::<Vec<f64>>());
    assert!(matches!(integrate(explode, &vec![1e10], &spec, None), Err(OdeError::BlowUp { .. })));
    let bad = SolverSpec::fixed(SolverFamily::Euler, 0, Direction::Generate);
    assert!(matches!(integrate(decay, &vec![1.0], &bad, None), Err(OdeError::InvalidSpec(_))));
    assert!("leapfrog".parse::<SolverFamily>().is_err());
}

#[test]
fn observer_sees_every_accepted_point() {
    let mut seen = vec![];
    let spec = SolverSpec::fixed(SolverFamily::Euler, 4, Direction::Generate);
    let mut obs = |t: f64, _x: &Vec<f64>| seen.push(t);
    integrate(decay, &vec![1.0], &spec, Some(&mut obs)).unwrap();
    assert_eq!(seen, vec![0.25, 0.5, 0.75, 1.0]);
}

proptest! {
    #[test]
    fn every_family_integrates_constant_fields_exactly(c in -5.0f64..5.0, x0 in -5.0f64..5.0, n in 1usize..20) {
        for family in SolverFamily::ALL {
            let spec = if family.is_adaptive() {
                SolverSpec::adaptive(family, 1e-6, 1e-6, Direction::Generate)
            } else {
                SolverSpec::fixed(family, n, Direction::Generate)
            };
            let (x, _) = integrate(|_t, _x: &Vec<f64>| Ok(vec![c]), &vec![x0], &spec, None).unwrap();
            prop_assert!((x[0] - (x0 + c)).abs() < 1e-9);
        }
    }

    #[test]
    fn rk4_is_exact_on_cubic_time_fields(a in -2.0f64..2.0, n in 1usize..10) {
        let spec = SolverSpec::fixed(SolverFamily::Rk4, n, Direction::Generate);
        let (x, _) = integrate(|t, _x: &Vec<f64>| Ok(vec![a * t * t * t]), &vec![0.0], &spec, None).unwrap();
        prop_assert!((x[0] - a / 4.0).abs() < 1e-12);
    }

    #[test]
    fn generate_then_invert_returns_to_start(x0 in -3.0f64..3.0, k in -2.0f64..2.0) {
        let field = |_t: f64, x: &Vec<f64>| Ok(vec![k * x[0]]);
        let fwd = SolverSpec::dopri5(1e-9, Direction::Generate);
        let (x1, _) = integrate(field, &vec![x0], &fwd, None).unwrap();
        let (back, _) = integrate(field, &x1, &fwd.with_direction(Direction::Invert), None).unwrap();
        prop_assert!((back[0] - x0).abs() < 1e-6 * (1.0 + x0.abs()));
    }
}
