//! Gradient-based attack solver: sequential quadratic programming over a
//! dense injection vector restricted to a specific meter set, with BFGS
//! curvature, an L1-penalty merit line search and Powell's penalty
//! update.
//!
//! The infinity-norm objective is smoothed with a log-sum-exp surrogate
//! for the descent; reported objectives and success tests always use the
//! exact maximum.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    AttackContext, AttackProblem, AttackResult, AttackVector, Scenario,
};
use crate::error::{Error, Result};
use crate::grid::admittance::AdmittanceMatrix;
use crate::grid::measurement::{eval_h, MeasurementModel};
use crate::grid::state::StateVector;
use crate::rng::derive_seed;
use crate::wls::estimate_wls;

/// Sharpness of the log-sum-exp softening of `max_i |delta_i|`.
const LSE_BETA: f64 = 200.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SqpConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub violation_tolerance: f64,
    pub initial_penalty: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SqpConfig {
    fn default() -> Self {
        SqpConfig {
            max_iterations: 100,
            step_tolerance: 1e-8,
            violation_tolerance: 1e-9,
            initial_penalty: 1.0,
            restarts: 5,
            seed: 0,
        }
    }
}

impl SqpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step_tolerance <= 0.0 || self.violation_tolerance <= 0.0 {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.max_iterations == 0 || self.restarts == 0 {
            return Err(Error::Config("iterations and restarts must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient of the stealth residual `J(x_hat(z_a))` with respect to the
/// measurements. At the WLS minimizer the inner sensitivity vanishes
/// (envelope property), so the gradient reduces to `2 W (z_a - h(x_hat))`.
pub fn constraint_gradient(
    z_a: &DVector<f64>,
    meas: &MeasurementModel,
    adm: &AdmittanceMatrix,
    start: &StateVector,
) -> Result<DVector<f64>> {
    let x_hat = estimate_wls(z_a, meas, adm, start)?;
    let h = eval_h(&x_hat, meas, adm);
    let mut grad = DVector::zeros(meas.n_meters());
    for i in 0..meas.n_meters() {
        grad[i] = 2.0 * meas.w[i] * (z_a[i] - h[i]);
    }
    Ok(grad)
}

/// Numerically stable log-sum-exp softening of `max_i |v_i|` with the
/// softmax weights used for its gradient.
fn soft_max_abs(values: &DVector<f64>) -> (f64, DVector<f64>) {
    let peak = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut weights = DVector::zeros(values.len());
    let mut total = 0.0;
    for (i, v) in values.iter().enumerate() {
        let w = (LSE_BETA * (v.abs() - peak)).exp();
        weights[i] = w;
        total += w;
    }
    let lse = peak + (total.ln()) / LSE_BETA;
    for (i, v) in values.iter().enumerate() {
        weights[i] = weights[i] / total * v.signum();
    }
    (lse, weights)
}

#[allow(dead_code)] // objective/violation/merit_trace are consumed by tests
pub(crate) struct SqpOutcome {
    pub x: DVector<f64>,
    pub objective: f64,
    pub violation: f64,
    pub iterations: usize,
    pub nfe: usize,
    /// (merit before, merit after, penalty) per accepted step
    pub merit_trace: Vec<(f64, f64, f64)>,
    pub curvature_ok: bool,
}

/// Box-constrained convex QP `min 1/2 d'Bd + g'd` by cyclic coordinate
/// descent; `B` must be positive definite.
fn solve_box_qp(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> DVector<f64> {
    let n = g.len();
    let mut d: DVector<f64> = DVector::zeros(n);
    for _sweep in 0..60 {
        let mut change = 0.0_f64;
        for i in 0..n {
            let mut slope: f64 = g[i];
            for j in 0..n {
                slope += b[(i, j)] * d[j];
            }
            let new: f64 = (d[i] - slope / b[(i, i)]).clamp(lb[i], ub[i]);
            change = change.max((new - d[i]).abs());
            d[i] = new;
        }
        if change < 1e-14 {
            break;
        }
    }
    d
}

/// QP step with one linearized inequality `grad_c' d + c0 <= 0`: solve the
/// box QP, and if the constraint is violated search the multiplier by
/// bisection (the constraint value is monotone in the multiplier).
/// Returns the step and the multiplier estimate.
fn solve_qp_subproblem(
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    grad_c: Option<&DVector<f64>>,
    c0: f64,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> (DVector<f64>, f64) {
    let unconstrained = solve_box_qp(b, g, lb, ub);
    let grad_c = match grad_c {
        Some(gc) => gc,
        None => return (unconstrained, 0.0),
    };
    let slack = grad_c.dot(&unconstrained) + c0;
    if slack <= 1e-12 {
        return (unconstrained, 0.0);
    }

    let mut lambda_hi = 1.0;
    let mut best = unconstrained;
    for _ in 0..60 {
        let shifted = g + grad_c * lambda_hi;
        let d = solve_box_qp(b, &shifted, lb, ub);
        let value = grad_c.dot(&d) + c0;
        best = d;
        if value <= 0.0 {
            break;
        }
        lambda_hi *= 4.0;
        if lambda_hi > 1e12 {
            // linearized constraint unreachable inside the box: return the
            // maximal-multiplier step, which minimizes the violation
            return (best, lambda_hi);
        }
    }

    let mut lo = 0.0;
    let mut hi = lambda_hi;
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        let shifted = g + grad_c * mid;
        let d = solve_box_qp(b, &shifted, lb, ub);
        if grad_c.dot(&d) + c0 <= 0.0 {
            hi = mid;
            best = d;
        } else {
            lo = mid;
        }
    }
    (best, hi)
}

/// Damped BFGS update keeping `B` positive definite.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let sbs = (b as &DMatrix<f64>) * s;
    let s_b_s = s.dot(&sbs);
    if s_b_s <= 0.0 {
        return false;
    }
    let s_y = s.dot(y);
    let y_eff = if s_y < 0.2 * s_b_s {
        let theta = 0.8 * s_b_s / (s_b_s - s_y);
        y * theta + &sbs * (1.0 - theta)
    } else {
        y.clone()
    };
    let s_y_eff = s.dot(&y_eff);
    if s_y_eff <= 1e-14 {
        return false;
    }
    *b -= &sbs * sbs.transpose() / s_b_s;
    *b += &y_eff * y_eff.transpose() / s_y_eff;
    b.clone().cholesky().is_some()
}

/// SQP core over closures; minimizes `objective` subject to
/// `constraint <= 0` and box bounds.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sqp_minimize(
    objective: &dyn Fn(&DVector<f64>) -> f64,
    objective_grad: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    constraint: &dyn Fn(&DVector<f64>) -> f64,
    constraint_grad: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    x0: DVector<f64>,
    config: &SqpConfig,
) -> SqpOutcome {
    let n = x0.len();
    let mut x = x0;
    let mut b = DMatrix::identity(n, n);
    let mut penalty = config.initial_penalty;
    let mut nfe = 0usize;
    let mut merit_trace = Vec::new();
    let mut curvature_ok = true;

    let mut f_value = {
        nfe += 1;
        objective(&x)
    };
    let mut c_value = constraint(&x);
    let mut grad = objective_grad(&x);
    let mut iterations = 0usize;
    let mut line_search_failures = 0usize;

    for _iter in 0..config.max_iterations {
        iterations += 1;

        let grad_c = constraint_grad(&x);
        let step_lb = DVector::from_fn(n, |i, _| lb[i] - x[i]);
        let step_ub = DVector::from_fn(n, |i, _| ub[i] - x[i]);
        let (direction, lambda) =
            solve_qp_subproblem(&b, &grad, grad_c.as_ref(), c_value, &step_lb, &step_ub);

        if direction.amax() <= config.step_tolerance
            && c_value.max(0.0) <= config.violation_tolerance
        {
            break;
        }

        // Powell's penalty update keeps the merit function exact
        penalty = (0.5 * (penalty + lambda.abs())).max(lambda.abs());
        let merit =
            |f: f64, c: f64, r: f64| -> f64 { f + (r * c).max(0.0) };
        let merit_here = merit(f_value, c_value, penalty);

        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..14 {
            let candidate = &x + &direction * alpha;
            nfe += 1;
            let f_new = objective(&candidate);
            let c_new = constraint(&candidate);
            let merit_new = merit(f_new, c_new, penalty);
            if merit_new.is_finite()
                && merit_new <= merit_here - 1e-4 * alpha * direction.norm_squared()
            {
                let grad_new = objective_grad(&candidate);
                let gc_new = constraint_grad(&candidate);
                let s = &candidate - &x;
                // Lagrangian gradient difference for the curvature update
                let lag_old = match (&grad_c, lambda) {
                    (Some(gc), l) if l > 0.0 => &grad + gc * l,
                    _ => grad.clone(),
                };
                let lag_new = match (&gc_new, lambda) {
                    (Some(gc), l) if l > 0.0 => &grad_new + gc * l,
                    _ => grad_new.clone(),
                };
                let y = lag_new - lag_old;
                if !bfgs_update(&mut b, &s, &y) {
                    b = DMatrix::identity(n, n);
                    curvature_ok = false;
                }
                merit_trace.push((merit_here, merit_new, penalty));
                x = candidate;
                f_value = f_new;
                c_value = c_new;
                grad = grad_new;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }

        if !accepted {
            line_search_failures += 1;
            // reset curvature and retry once from steepest descent scale
            b = DMatrix::identity(n, n);
            if line_search_failures >= 2 {
                break;
            }
        } else {
            line_search_failures = 0;
            if (alpha * direction.amax()) <= config.step_tolerance
                && c_value.max(0.0) <= config.violation_tolerance
            {
                break;
            }
        }
    }

    SqpOutcome {
        x,
        objective: f_value,
        violation: c_value.max(0.0),
        iterations,
        nfe,
        merit_trace,
        curvature_ok,
    }
}

/// Runs the SQP attack on a specific-k instance with multiple jittered
/// restarts; the best exactly-verified feasible result wins.
pub fn run_slsqp(ctx: &AttackContext<'_>, config: &SqpConfig) -> Result<AttackResult> {
    config.validate()?;
    let start = std::time::Instant::now();
    let meters: Vec<usize> = match &ctx.spec.scenario {
        Scenario::SpecificK(set) => set.clone(),
        Scenario::AnyK => {
            return Err(Error::Config(
                "the SQP attack requires a specific-k meter set".into(),
            ))
        }
    };
    let k = meters.len();
    let lb = DVector::from_fn(k, |i, _| ctx.spec.bound_lo[meters[i]]);
    let ub = DVector::from_fn(k, |i, _| ctx.spec.bound_hi[meters[i]]);

    let vector_of = |x: &DVector<f64>| -> AttackVector {
        AttackVector {
            entries: meters
                .iter()
                .zip(x.iter())
                .map(|(&meter, &amount)| (meter, ctx.spec.clamp_amount(meter, amount)))
                .collect(),
        }
    };

    let baseline_angles: Vec<f64> = ctx.baseline().va.clone();
    let n_free_angles = ctx.ann.n_buses - 1;

    // smoothed objective (negated for minimization) on the free meters
    let objective = |x: &DVector<f64>| -> f64 {
        let z_a = ctx.attacked_measurements(&vector_of(x));
        let est = ctx.ann.forward(&z_a).expect("dimensions fixed");
        let deltas = DVector::from_fn(ctx.ann.n_buses, |bus, _| {
            est.va[bus] - baseline_angles[bus]
        });
        let (lse, _) = soft_max_abs(&deltas);
        -lse
    };
    let objective_grad = |x: &DVector<f64>| -> DVector<f64> {
        let z_a = ctx.attacked_measurements(&vector_of(x));
        let full = ctx.ann.input_gradient(&z_a, |output| {
            // output layout: free angles then magnitudes
            let n_buses = ctx.ann.n_buses;
            let slack = ctx.ann.slack;
            let est = StateVector::from_free(output, n_buses, slack);
            let deltas = DVector::from_fn(n_buses, |bus, _| est.va[bus] - baseline_angles[bus]);
            let (_, weights) = soft_max_abs(&deltas);
            let mut grad_out = DVector::zeros(output.len());
            let mut col = 0;
            for bus in 0..n_buses {
                if bus != slack {
                    grad_out[col] = -weights[bus];
                    col += 1;
                }
            }
            debug_assert_eq!(col, n_free_angles);
            grad_out
        });
        DVector::from_fn(k, |i, _| full[meters[i]])
    };
    let constraint = |x: &DVector<f64>| -> f64 {
        let vector = vector_of(x);
        match ctx.residual(&vector) {
            Some(j) => j - ctx.spec.tau,
            None => f64::INFINITY,
        }
    };
    let constraint_grad_fn = |x: &DVector<f64>| -> Option<DVector<f64>> {
        let z_a = ctx.attacked_measurements(&vector_of(x));
        constraint_gradient(&z_a, ctx.meas, ctx.adm, ctx.warm_start())
            .ok()
            .map(|full| DVector::from_fn(k, |i, _| full[meters[i]]))
    };

    let mut best: Option<(AttackResult, bool)> = None;
    let mut total_nfe = 0usize;
    let mut total_iterations = 0usize;
    let mut first_success_nfe = None;

    for restart in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, restart as u64));
        let x0 = DVector::from_fn(k, |i, _| {
            let scale = if rng.gen::<bool>() { ub[i] } else { lb[i] };
            0.1 * scale * rng.gen::<f64>()
        });
        let outcome = sqp_minimize(
            &objective,
            &objective_grad,
            &constraint,
            &constraint_grad_fn,
            &lb,
            &ub,
            x0,
            config,
        );
        total_nfe += outcome.nfe;
        total_iterations += outcome.iterations;

        let vector = vector_of(&outcome.x);
        let eval = ctx.evaluate(&vector);
        let feasible = eval.violation == 0.0;
        if feasible && eval.success && first_success_nfe.is_none() {
            first_success_nfe = Some(total_nfe);
        }
        let result = AttackResult {
            vector,
            objective: eval.objective,
            residual: eval.residual,
            feasible,
            success: eval.success,
            nfe: 0,
            nfe_to_success: None,
            iterations: outcome.iterations,
            wall_time_s: 0.0,
        };
        let replace = match &best {
            None => true,
            Some((incumbent, _)) => match (feasible, incumbent.feasible) {
                (true, true) => result.objective > incumbent.objective,
                (true, false) => true,
                (false, true) => false,
                (false, false) => result.residual < incumbent.residual,
            },
        };
        if replace {
            best = Some((result, outcome.curvature_ok));
        }
    }

    let (mut result, _) = best.expect("at least one restart ran");
    result.nfe = total_nfe;
    result.nfe_to_success = first_success_nfe;
    result.iterations = total_iterations;
    result.wall_time_s = start.elapsed().as_secs_f64();
    Ok(result)
}
