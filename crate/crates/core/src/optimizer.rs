//! Allocation solver: minimize expected latency under utilization caps.
//!
//! The program is
//!
//! ```text
//! minimize    L(x) = (1/n) * sum_ij ell[i][j](x) * x[i][j]
//! subject to  rho_j(x) <= rho_cap          (every modality)
//!             sum_j x[i][j] = 1            (every order)
//!             0 <= x[i][j] <= 1
//! ```
//!
//! smooth but non-convex (latencies feed back through utilization). The
//! solver is a projected-gradient interior method:
//!
//! - the simplex constraints are handled exactly, by Euclidean projection
//!   of each row onto the unit simplex after every gradient step;
//! - the utilization caps are handled by a logarithmic barrier,
//!   `merit(x; w) = L(x) - w * sum_j ln(rho_cap - rho_j(x))`, with the
//!   weight `w` lowered geometrically so iterates approach the caps from
//!   strictly inside;
//! - steps are chosen by Armijo backtracking along the projection arc; a
//!   candidate that lands outside the caps has infinite merit and is
//!   simply backtracked past.
//!
//! Non-convexity means a stationary point, not a certified global
//! optimum; `multistart` in [`SolverConfig`] reruns from seeded random
//! interior points and keeps the best objective. Everything is
//! deterministic given the config.
//!
//! The cost-recovery constraint is deliberately not part of the program:
//! the base price is a free parameter, so after solving, revenue is
//! matched to operating cost in closed form by
//! [`crate::pricing::breakeven_base_price`].

use crate::matrix::Matrix;
use crate::model::{AllocationMatrix, Instance, LatencySnapshot, ModelError};
use crate::pricing::{breakeven_base_price, BasePrice, PriceMatrix, PricingError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Presolve declares feasibility up to this slack on the load ratio.
const PRESOLVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error("solver config: {field}: {detail}")]
    InvalidConfig { field: &'static str, detail: String },
    #[error("modality {id} is saturated: utilization {rho} >= 1")]
    SaturatedMode { id: String, rho: f64 },
    #[error(
        "infeasible: total demand {} orders/h exceeds capped capacity {} orders/h (load ratio {})",
        .certificate.total_demand, .certificate.capped_capacity, .certificate.load_ratio
    )]
    Infeasible { certificate: InfeasibilityCertificate },
    #[error(
        "no start reached stationarity {stationarity_tol} within {max_iters} iterations (best residual {achieved})"
    )]
    NonConvergence {
        max_iters: usize,
        stationarity_tol: f64,
        achieved: f64,
        /// Best feasible iterate found, fully priced, for inspection.
        best: Box<SolveResult>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

/// Backtracking line-search parameters. Trial steps come from a
/// Barzilai–Borwein estimate of the local curvature (clamped to
/// `[min_step, max_step]`), then shrink until the Armijo condition
/// holds; descent therefore stays monotone while the step length adapts
/// to the objective's scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmijoParams {
    /// Trial step length when no curvature estimate exists yet.
    pub initial_step: f64,
    /// Multiplier applied on each backtrack, in (0, 1).
    pub shrink: f64,
    /// Sufficient-decrease fraction, in (0, 1).
    pub sigma: f64,
    /// Give up on the step after this many shrinks.
    pub max_backtracks: u32,
    /// Clamp range for the curvature-derived trial step.
    pub min_step: f64,
    pub max_step: f64,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        ArmijoParams {
            initial_step: 1.0,
            shrink: 0.5,
            sigma: 1e-4,
            max_backtracks: 60,
            min_step: 1e-8,
            max_step: 1e8,
        }
    }
}

/// Geometric schedule for the barrier weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarrierSchedule {
    pub initial: f64,
    /// Multiplier between stages, in (0, 1).
    pub decay: f64,
    /// Final (smallest) weight; never reaches zero so the merit stays
    /// differentiable at the caps.
    pub min: f64,
}

impl Default for BarrierSchedule {
    fn default() -> Self {
        BarrierSchedule {
            initial: 1e-2,
            decay: 0.1,
            // The barrier's optimality bias is of order (modalities * min),
            // far below the solver tolerances, while smaller weights make
            // the final stages needlessly stiff.
            min: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Total accepted-step budget across all barrier stages.
    pub max_iters: usize,
    /// Projected-gradient norm below which a stage (and the solve) counts
    /// as converged.
    pub stationarity_tol: f64,
    /// Allowed overshoot of `rho_cap` at the returned point.
    pub feasibility_tol: f64,
    pub armijo: ArmijoParams,
    pub barrier: BarrierSchedule,
    /// Seeds the random starts beyond the first.
    pub seed: u64,
    /// Number of starts: the repaired equal split plus `multistart - 1`
    /// random interior points. Best objective wins.
    pub multistart: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 10_000,
            stationarity_tol: 1e-4,
            feasibility_tol: 1e-6,
            armijo: ArmijoParams::default(),
            barrier: BarrierSchedule::default(),
            seed: 0,
            multistart: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), OptimizerError> {
        let bad = |field: &'static str, detail: String| {
            Err(OptimizerError::InvalidConfig { field, detail })
        };
        if self.max_iters < 1 {
            return bad("max_iters", "must be at least 1".into());
        }
        for (field, v) in [
            ("stationarity_tol", self.stationarity_tol),
            ("feasibility_tol", self.feasibility_tol),
            ("armijo.initial_step", self.armijo.initial_step),
            ("armijo.min_step", self.armijo.min_step),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        if !(self.armijo.max_step >= self.armijo.min_step && self.armijo.max_step.is_finite()) {
            return bad(
                "armijo.max_step",
                format!(
                    "must be finite and at least min_step {}, got {}",
                    self.armijo.min_step, self.armijo.max_step
                ),
            );
        }
        for (field, v) in [
            ("armijo.shrink", self.armijo.shrink),
            ("armijo.sigma", self.armijo.sigma),
            ("barrier.decay", self.barrier.decay),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(field, format!("must lie in (0, 1), got {v}"));
            }
        }
        if self.armijo.max_backtracks < 1 {
            return bad("armijo.max_backtracks", "must be at least 1".into());
        }
        if !(self.barrier.min > 0.0 && self.barrier.initial >= self.barrier.min) {
            return bad(
                "barrier",
                format!(
                    "need initial >= min > 0, got initial {} min {}",
                    self.barrier.initial, self.barrier.min
                ),
            );
        }
        if self.multistart < 1 {
            return bad("multistart", "must be at least 1".into());
        }
        Ok(())
    }
}

/// Solver progress counters and exit-state residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Accepted steps taken by the winning start.
    pub iterations: usize,
    /// Projected-gradient norm of the final merit at the returned point.
    pub stationarity: f64,
    pub converged: bool,
    /// Number of starts actually run.
    pub starts: usize,
    /// Worst `|sum_j x[i][j] - 1|` at the returned point.
    pub max_row_sum_error: f64,
    /// Worst `max(0, rho_j - rho_cap)` at the returned point.
    pub max_utilization_excess: f64,
    /// Merit values of the winning start, one inner vector per barrier
    /// stage (stage-entry value first, then each accepted iterate).
    pub merit_history: Vec<Vec<f64>>,
}

/// A solved, priced allocation. Self-contained: embeds the instance it
/// was solved on, so downstream consumers (verification, reporting) need
/// no other input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub instance: Instance,
    pub x: AllocationMatrix,
    /// Expected latency at `x`, hours.
    pub objective: f64,
    pub snapshot: LatencySnapshot,
    /// Break-even base price backing `prices`.
    pub base_price: BasePrice,
    pub prices: PriceMatrix,
    pub diagnostics: Diagnostics,
}

/// Proof that no allocation satisfies the utilization caps: every unit of
/// demand must be routed somewhere, so the best possible worst-case load
/// ratio is total demand over total capped capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityCertificate {
    /// `sum_i r_i`, orders/h.
    pub total_demand: f64,
    /// `rho_cap * sum_j N_j * mu_j`, orders/h.
    pub capped_capacity: f64,
    /// `total_demand / capped_capacity`; > 1 proves infeasibility.
    pub load_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PresolveOutcome {
    /// A strictly balanced feasible point: every order split in
    /// proportion to fleet capacities, equalizing utilizations at
    /// `load_ratio * rho_cap`.
    Feasible {
        x: AllocationMatrix,
        load_ratio: f64,
    },
    Infeasible(InfeasibilityCertificate),
}

/// Minimizes `max_j rho_j / rho_cap` in closed form.
///
/// Only the column loads `t_j = sum_i r_i x[i][j]` matter, and they sum
/// to the total demand, so the minimax is attained by splitting loads in
/// proportion to capacities — giving every modality the same utilization,
/// which no reshuffling can lower.
pub fn feasibility_presolve(instance: &Instance) -> Result<PresolveOutcome, ModelError> {
    let m = instance.n_modalities();
    let capacities: Vec<f64> = (0..m)
        .map(|j| instance.capacity(j))
        .collect::<Result<_, _>>()?;
    let total_capacity: f64 = capacities.iter().sum();
    let total_demand: f64 = instance.orders.iter().map(|o| o.rate).sum();
    let capped_capacity = instance.rho_cap * total_capacity;
    let load_ratio = total_demand / capped_capacity;
    if load_ratio > 1.0 + PRESOLVE_TOL {
        return Ok(PresolveOutcome::Infeasible(InfeasibilityCertificate {
            total_demand,
            capped_capacity,
            load_ratio,
        }));
    }
    let x = Matrix::from_fn(instance.n_orders(), m, |_, j| capacities[j] / total_capacity);
    Ok(PresolveOutcome::Feasible {
        x: AllocationMatrix::new(x).expect("proportional split is row-stochastic"),
        load_ratio,
    })
}

/// Utilizations at an arbitrary (not necessarily row-stochastic) matrix.
fn rho_of(instance: &Instance, x: &Matrix) -> Result<Vec<f64>, ModelError> {
    (0..instance.n_modalities())
        .map(|j| {
            let load: f64 = instance
                .orders
                .iter()
                .enumerate()
                .map(|(i, o)| o.rate * x[(i, j)])
                .sum();
            Ok(load / instance.capacity(j)?)
        })
        .collect()
}

/// Expected latency at an arbitrary matrix, given its utilizations.
fn objective_of(instance: &Instance, x: &Matrix, rho: &[f64]) -> f64 {
    let (n, m) = (instance.n_orders(), instance.n_modalities());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let ell = instance.service_time[(i, j)]
                + instance.travel_time(i, j)
                + instance.pickup_time_at(i, j, rho[j]);
            total += ell * x[(i, j)];
        }
    }
    total / n as f64
}

/// Expected latency at an arbitrary non-negative matrix — the objective
/// without the simplex bookkeeping. Useful for external probes (finite
/// differences, grid scans) that step off the constraint set.
pub fn objective_value(instance: &Instance, x: &Matrix) -> Result<f64, OptimizerError> {
    let rho = rho_of(instance, x)?;
    for (j, &r) in rho.iter().enumerate() {
        if r >= 1.0 {
            return Err(OptimizerError::SaturatedMode {
                id: instance.modalities[j].id.clone(),
                rho: r,
            });
        }
    }
    Ok(objective_of(instance, x, &rho))
}

/// Objective value and its exact gradient at a feasible allocation.
///
/// Differentiating through the pickup terms: loading modality `b` raises
/// its utilization at rate `r_a / (N_b * mu_b)` per unit of `x[a][b]`,
/// which slows every order already on `b`. Hence
///
/// ```text
/// n * dL/dx[a][b] = ell[a][b]
///     + (r_a / (N_b * mu_b)) * sum_i x[i][b] * dp[i][b]/drho_b
/// dp/drho = k * beta * N / (1 + beta * N * (1 - rho))^2
/// ```
///
/// Requires `rho_j < 1` for every modality — beyond saturation the pickup
/// clamp makes the model non-differentiable.
pub fn objective_and_gradient(
    instance: &Instance,
    x: &AllocationMatrix,
) -> Result<(f64, Matrix), OptimizerError> {
    let raw = x.matrix();
    let rho = rho_of(instance, raw)?;
    for (j, &r) in rho.iter().enumerate() {
        if r >= 1.0 {
            return Err(OptimizerError::SaturatedMode {
                id: instance.modalities[j].id.clone(),
                rho: r,
            });
        }
    }
    let (n, m) = (instance.n_orders(), instance.n_modalities());
    let nf = n as f64;
    let objective = objective_of(instance, raw, &rho);

    // Congestion pressure per modality: sum_i x[i][j] * dp[i][j]/drho_j.
    let mut pressure = vec![0.0; m];
    for j in 0..m {
        let fleet = instance.modalities[j].fleet_size as f64;
        let k = instance.modalities[j].reach_horizon_h;
        let avail = 1.0 - rho[j];
        for i in 0..n {
            let beta_n = instance.beta[(i, j)] * fleet;
            let denom = 1.0 + beta_n * avail;
            pressure[j] += raw[(i, j)] * k * beta_n / (denom * denom);
        }
    }
    let capacities: Vec<f64> = (0..m)
        .map(|j| instance.capacity(j))
        .collect::<Result<_, _>>()?;
    let grad = Matrix::from_fn(n, m, |a, b| {
        let ell = instance.service_time[(a, b)]
            + instance.travel_time(a, b)
            + instance.pickup_time_at(a, b, rho[b]);
        (ell + instance.orders[a].rate / capacities[b] * pressure[b]) / nf
    });
    Ok((objective, grad))
}

/// Merit value at `x`: objective plus log barrier. Infinite outside the
/// caps, which is how the line search rejects cap-violating candidates.
fn merit_of(instance: &Instance, x: &Matrix, weight: f64) -> Result<(f64, f64), ModelError> {
    let rho = rho_of(instance, x)?;
    let mut barrier = 0.0;
    for &r in &rho {
        let slack = instance.rho_cap - r;
        if slack <= 0.0 {
            return Ok((f64::INFINITY, f64::INFINITY));
        }
        barrier -= slack.ln();
    }
    let objective = objective_of(instance, x, &rho);
    Ok((objective + weight * barrier, objective))
}

/// Gradient of the merit at a strictly interior point.
fn merit_gradient(
    instance: &Instance,
    x: &AllocationMatrix,
    weight: f64,
) -> Result<Matrix, OptimizerError> {
    let (_, mut grad) = objective_and_gradient(instance, x)?;
    let rho = rho_of(instance, x.matrix())?;
    let (n, m) = (instance.n_orders(), instance.n_modalities());
    for j in 0..m {
        let slack = instance.rho_cap - rho[j];
        let capacity = instance.capacity(j)?;
        for i in 0..n {
            grad[(i, j)] += weight * instance.orders[i].rate / (slack * capacity);
        }
    }
    Ok(grad)
}

/// Euclidean projection of one row onto the unit simplex
/// (sort-and-threshold).
fn project_row_to_simplex(row: &mut [f64]) {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut threshold = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            threshold = candidate;
        }
    }
    for v in row.iter_mut() {
        *v = (*v - threshold).max(0.0);
    }
}

/// `P(x - step * grad)`, row by row.
fn project_step(x: &Matrix, grad: &Matrix, step: f64) -> Matrix {
    let mut out = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - step * grad[(i, j)]);
    for i in 0..out.rows() {
        project_row_to_simplex(out.row_mut(i));
    }
    out
}

fn l2_distance(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn inner_product_of_difference(grad: &Matrix, from: &Matrix, to: &Matrix) -> f64 {
    grad.as_slice()
        .iter()
        .zip(from.as_slice().iter().zip(to.as_slice()))
        .map(|(g, (f, t))| g * (f - t))
        .sum()
}

/// Barzilai–Borwein trial step `<dx,dx>/<dx,dg>` from the last accepted
/// move, falling back to `initial_step` when no usable curvature is
/// available (first iterate, or non-positive denominator).
fn bb_step(
    previous: Option<&(Matrix, Matrix)>,
    x: &Matrix,
    grad: &Matrix,
    params: &ArmijoParams,
) -> f64 {
    let Some((prev_x, prev_grad)) = previous else {
        return params.initial_step;
    };
    let mut dx_dx = 0.0;
    let mut dx_dg = 0.0;
    for i in 0..x.as_slice().len() {
        let dx = x.as_slice()[i] - prev_x.as_slice()[i];
        let dg = grad.as_slice()[i] - prev_grad.as_slice()[i];
        dx_dx += dx * dx;
        dx_dg += dx * dg;
    }
    if dx_dg <= 0.0 || !dx_dg.is_finite() {
        return params.initial_step;
    }
    (dx_dx / dx_dg).clamp(params.min_step, params.max_step)
}

/// Blends `x` toward the balanced presolve point until every utilization
/// sits below `target` (utilization is linear in `x`, so the blend is
/// exact). Returns `x` unchanged when already inside.
fn repair_toward(
    instance: &Instance,
    x: &Matrix,
    balanced: &Matrix,
    target: f64,
) -> Result<Matrix, ModelError> {
    let rho_x = rho_of(instance, x)?;
    let rho_b = rho_of(instance, balanced)?;
    let mut theta = 0.0_f64;
    for j in 0..rho_x.len() {
        if rho_x[j] > target {
            let needed = if rho_b[j] < rho_x[j] {
                (rho_x[j] - target) / (rho_x[j] - rho_b[j])
            } else {
                1.0
            };
            theta = theta.max(needed.min(1.0));
        }
    }
    if theta == 0.0 {
        return Ok(x.clone());
    }
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        (1.0 - theta) * x[(i, j)] + theta * balanced[(i, j)]
    }))
}

#[derive(Clone)]
struct StartRun {
    x: Matrix,
    objective: f64,
    stationarity: f64,
    converged: bool,
    iterations: usize,
    merit_history: Vec<Vec<f64>>,
}

/// Barrier-stage projected-gradient descent from one start.
fn descend(
    instance: &Instance,
    config: &SolverConfig,
    start: Matrix,
) -> Result<StartRun, OptimizerError> {
    let mut x = start;
    let mut iterations = 0usize;
    let mut merit_history = Vec::new();
    let mut weight = config.barrier.initial;

    loop {
        let mut stage_merits = Vec::new();
        let (mut merit, _) = merit_of(instance, &x, weight)?;
        stage_merits.push(merit);
        // (x, gradient) at the last accepted iterate, for the BB step.
        let mut previous: Option<(Matrix, Matrix)> = None;

        while iterations < config.max_iters {
            let wrapped = AllocationMatrix::new(x.clone()).expect("iterates stay row-stochastic");
            let grad = merit_gradient(instance, &wrapped, weight)?;
            let unit_trial = project_step(&x, &grad, 1.0);
            if l2_distance(&x, &unit_trial) <= config.stationarity_tol {
                break;
            }

            let mut step = bb_step(previous.as_ref(), &x, &grad, &config.armijo);
            let mut accepted = None;
            for _ in 0..config.armijo.max_backtracks {
                let candidate = project_step(&x, &grad, step);
                let predicted = inner_product_of_difference(&grad, &x, &candidate);
                if predicted <= 0.0 {
                    break; // no descent left along the arc
                }
                let (candidate_merit, _) = merit_of(instance, &candidate, weight)?;
                if candidate_merit <= merit - config.armijo.sigma * predicted {
                    accepted = Some((candidate, candidate_merit));
                    break;
                }
                step *= config.armijo.shrink;
            }
            match accepted {
                Some((candidate, candidate_merit)) => {
                    previous = Some((x, grad));
                    x = candidate;
                    merit = candidate_merit;
                    iterations += 1;
                    stage_merits.push(merit);
                }
                None => break, // line search exhausted: numerically stationary
            }
        }
        merit_history.push(stage_merits);

        if weight <= config.barrier.min || iterations >= config.max_iters {
            break;
        }
        weight = (weight * config.barrier.decay).max(config.barrier.min);
    }

    // Exit stationarity, measured at the final barrier weight.
    let wrapped = AllocationMatrix::new(x.clone()).expect("iterates stay row-stochastic");
    let grad = merit_gradient(instance, &wrapped, weight)?;
    let stationarity = l2_distance(&x, &project_step(&x, &grad, 1.0));

    let rho = rho_of(instance, &x)?;
    let objective = objective_of(instance, &x, &rho);
    Ok(StartRun {
        x,
        objective,
        stationarity,
        converged: stationarity <= config.stationarity_tol,
        iterations,
        merit_history,
    })
}

/// Uniform random point on each order's simplex (Dirichlet(1)).
fn random_interior_rows(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Matrix {
    let mut x = Matrix::zeros(n, m);
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..m {
            let u: f64 = rng.random_range(1e-12..1.0);
            let e = -u.ln();
            x[(i, j)] = e;
            sum += e;
        }
        for j in 0..m {
            x[(i, j)] /= sum;
        }
    }
    x
}

/// Solves the allocation program and prices the result at the break-even
/// base.
pub fn optimize_allocation(
    instance: &Instance,
    config: &SolverConfig,
) -> Result<SolveResult, OptimizerError> {
    config.validate()?;
    let balanced = match feasibility_presolve(instance)? {
        PresolveOutcome::Feasible { x, .. } => Matrix::from(x),
        PresolveOutcome::Infeasible(certificate) => {
            return Err(OptimizerError::Infeasible { certificate })
        }
    };
    // Strictly interior start target; falls back to the balanced point
    // itself when the instance has almost no slack.
    let target = instance.rho_cap * (1.0 - 1e-3);

    let (n, m) = (instance.n_orders(), instance.n_modalities());
    let mut starts = Vec::with_capacity(config.multistart);
    let equal = Matrix::filled(n, m, 1.0 / m as f64);
    starts.push(repair_toward(instance, &equal, &balanced, target)?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for _ in 1..config.multistart {
        let random = random_interior_rows(&mut rng, n, m);
        starts.push(repair_toward(instance, &random, &balanced, target)?);
    }

    let mut best: Option<StartRun> = None;
    let mut best_converged: Option<StartRun> = None;
    for start in starts {
        let run = descend(instance, config, start)?;
        let better = |candidate: &StartRun, incumbent: &Option<StartRun>| {
            incumbent
                .as_ref()
                .is_none_or(|b| candidate.objective < b.objective)
        };
        if run.converged && better(&run, &best_converged) {
            best_converged = Some(run.clone());
        }
        if better(&run, &best) {
            best = Some(run);
        }
    }
    let starts_run = config.multistart;

    match best_converged {
        Some(run) => package(instance, run, starts_run, config),
        None => {
            let run = best.expect("at least one start ran");
            let achieved = run.stationarity;
            let best = package(instance, run, starts_run, config)?;
            Err(OptimizerError::NonConvergence {
                max_iters: config.max_iters,
                stationarity_tol: config.stationarity_tol,
                achieved,
                best: Box::new(best),
            })
        }
    }
}

/// Wraps a finished run into a fully priced [`SolveResult`].
fn package(
    instance: &Instance,
    run: StartRun,
    starts: usize,
    config: &SolverConfig,
) -> Result<SolveResult, OptimizerError> {
    let x = AllocationMatrix::new(run.x).expect("iterates stay row-stochastic");
    let snapshot = instance.latency_snapshot(&x)?;
    let base_price = breakeven_base_price(instance, &x, &snapshot)?;
    let prices = PriceMatrix::for_allocation(instance, &x, &snapshot, base_price.value)?;

    let max_row_sum_error = (0..x.n_orders())
        .map(|i| (x.row(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let max_utilization_excess = snapshot
        .rho
        .iter()
        .map(|r| (r - instance.rho_cap).max(0.0))
        .fold(0.0, f64::max);
    debug_assert!(max_utilization_excess <= config.feasibility_tol);

    Ok(SolveResult {
        instance: instance.clone(),
        x,
        objective: run.objective,
        snapshot,
        base_price,
        prices,
        diagnostics: Diagnostics {
            iterations: run.iterations,
            stationarity: run.stationarity,
            converged: run.converged,
            starts,
            max_row_sum_error,
            max_utilization_excess,
            merit_history: run.merit_history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CompletionRate, Modality, Order, Population, PopulationCurve};
    use approx::assert_relative_eq;

    fn modality(id: &str, speed: f64, fleet: u32, mu: f64, cost: f64) -> Modality {
        Modality {
            id: id.into(),
            speed_kmh: speed,
            fleet_size: fleet,
            completion_rate: CompletionRate::PerHour(mu),
            reach_horizon_h: 1.0 / 6.0,
            cost_per_order: cost,
            service_scale: 1.0,
        }
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Instance {
        let modalities: Vec<Modality> = (0..m)
            .map(|j| {
                modality(
                    &format!("m{j}"),
                    rng.random_range(5.0..40.0),
                    rng.random_range(20..80),
                    rng.random_range(1.0..4.0),
                    rng.random_range(1.0..12.0),
                )
            })
            .collect();
        let orders: Vec<Order> = (0..n)
            .map(|i| Order {
                id: format!("o{i}"),
                pickup: [rng.random_range(0.0..4500.0), rng.random_range(0.0..4500.0)].into(),
                dropoff: [rng.random_range(0.0..4500.0), rng.random_range(0.0..4500.0)].into(),
                rate: rng.random_range(0.2..3.0),
            })
            .collect();
        let cost = Matrix::from_fn(n, m, |_, j| modalities[j].cost_per_order);
        Instance {
            orders,
            modalities,
            population: Population::Shared(PopulationCurve::linear(100.0, 10.0)),
            service_time: Matrix::from_fn(n, m, |_, _| rng.random_range(0.01..0.2)),
            beta: Matrix::from_fn(n, m, |_, _| rng.random_range(0.05..1.0)),
            cost,
            rho_cap: 0.9,
        }
    }

    #[test]
    fn presolve_balances_utilizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let inst = random_instance(&mut rng, 6, 3);
        match feasibility_presolve(&inst).unwrap() {
            PresolveOutcome::Feasible { x, load_ratio } => {
                let rho = inst.utilizations(&x).unwrap();
                for r in &rho {
                    assert_relative_eq!(*r, load_ratio * inst.rho_cap, epsilon = 1e-12);
                }
            }
            PresolveOutcome::Infeasible(_) => panic!("generous fleets should be feasible"),
        }
    }

    #[test]
    fn presolve_certifies_overload() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let mut inst = random_instance(&mut rng, 4, 2);
        for o in &mut inst.orders {
            o.rate = 1000.0;
        }
        match feasibility_presolve(&inst).unwrap() {
            PresolveOutcome::Infeasible(cert) => {
                assert!(cert.load_ratio > 1.0);
                assert_relative_eq!(cert.total_demand, 4000.0);
                assert_relative_eq!(
                    cert.load_ratio,
                    cert.total_demand / cert.capped_capacity,
                    epsilon = 1e-12
                );
            }
            PresolveOutcome::Feasible { .. } => panic!("demand exceeds every fleet"),
        }
    }

    #[test]
    fn presolve_agrees_with_grid_feasibility_on_tiny_instances() {
        // Brute force: scan the 2x2 allocation square for any point
        // meeting the caps.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        for round in 0..20 {
            let mut inst = random_instance(&mut rng, 2, 2);
            // Spread demand so both feasible and infeasible cases occur.
            let scale = rng.random_range(0.5..3.0);
            let cap0 = inst.capacity(0).unwrap();
            let cap1 = inst.capacity(1).unwrap();
            let total = (cap0 + cap1) * inst.rho_cap * scale;
            inst.orders[0].rate = total * 0.6;
            inst.orders[1].rate = total * 0.4;

            let presolve_feasible = matches!(
                feasibility_presolve(&inst).unwrap(),
                PresolveOutcome::Feasible { .. }
            );
            let steps = 100;
            let mut grid_feasible = false;
            'outer: for s0 in 0..=steps {
                for s1 in 0..=steps {
                    let x = Matrix::from_rows(vec![
                        vec![s0 as f64 / steps as f64, 1.0 - s0 as f64 / steps as f64],
                        vec![s1 as f64 / steps as f64, 1.0 - s1 as f64 / steps as f64],
                    ])
                    .unwrap();
                    let rho = rho_of(&inst, &x).unwrap();
                    if rho.iter().all(|r| *r <= inst.rho_cap + 1e-12) {
                        grid_feasible = true;
                        break 'outer;
                    }
                }
            }
            assert_eq!(presolve_feasible, grid_feasible, "round {round}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let h = 1e-6;
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 3);
            let x = match feasibility_presolve(&inst).unwrap() {
                PresolveOutcome::Feasible { x, .. } => x,
                _ => continue,
            };
            let (_, grad) = objective_and_gradient(&inst, &x).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    let mut plus = x.matrix().clone();
                    plus[(a, b)] += h;
                    let mut minus = x.matrix().clone();
                    minus[(a, b)] -= h;
                    let rho_p = rho_of(&inst, &plus).unwrap();
                    let rho_m = rho_of(&inst, &minus).unwrap();
                    let fd = (objective_of(&inst, &plus, &rho_p)
                        - objective_of(&inst, &minus, &rho_m))
                        / (2.0 * h);
                    let g = grad[(a, b)];
                    assert!(
                        (g - fd).abs() <= 1e-5 * g.abs().max(1e-3),
                        "grad[({a},{b})] analytic {g} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn congestion_free_gradient_is_latency_over_n() {
        // With beta = 0 the pickup term never reacts to load, so the
        // gradient reduces to the latency matrix scaled by 1/n.
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let mut inst = random_instance(&mut rng, 4, 2);
        inst.beta = Matrix::zeros(4, 2);
        let x = AllocationMatrix::equal_split(4, 2);
        let (_, grad) = objective_and_gradient(&inst, &x).unwrap();
        let snap = inst.latency_snapshot(&x).unwrap();
        for a in 0..4 {
            for b in 0..2 {
                assert_relative_eq!(grad[(a, b)], snap.ell[(a, b)] / 4.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn single_cell_objective_and_positive_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let inst = random_instance(&mut rng, 1, 1);
        let x = AllocationMatrix::single_mode(1, 1, 0);
        if inst.utilization(&x, 0).unwrap() >= 1.0 {
            return; // saturated draw; other tests cover the error path
        }
        let (objective, grad) = objective_and_gradient(&inst, &x).unwrap();
        assert_relative_eq!(
            objective,
            inst.latency_snapshot(&x).unwrap().ell[(0, 0)],
            epsilon = 1e-15
        );
        assert!(grad[(0, 0)] > 0.0);
    }

    #[test]
    fn saturation_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(97);
        let mut inst = random_instance(&mut rng, 2, 2);
        inst.orders[0].rate = 1e6;
        let x = AllocationMatrix::equal_split(2, 2);
        assert!(matches!(
            objective_and_gradient(&inst, &x),
            Err(OptimizerError::SaturatedMode { .. })
        ));
    }

    #[test]
    fn simplex_projection_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..200 {
            let len = rng.random_range(1..6);
            let mut row: Vec<f64> = (0..len).map(|_| rng.random_range(-3.0..3.0)).collect();
            let original = row.clone();
            project_row_to_simplex(&mut row);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
            // Projection of a point already on the simplex is itself.
            let mut twice = row.clone();
            project_row_to_simplex(&mut twice);
            for (a, b) in row.iter().zip(&twice) {
                assert!((a - b).abs() < 1e-12);
            }
            // Minimality against random simplex points.
            let dist = |p: &[f64]| -> f64 {
                p.iter()
                    .zip(&original)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            };
            for _ in 0..20 {
                let mut alt: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..1.0)).collect();
                let s: f64 = alt.iter().sum();
                for v in &mut alt {
                    *v /= s;
                }
                assert!(dist(&row) <= dist(&alt) + 1e-12);
            }
        }
    }

    #[test]
    fn single_modality_solves_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let mut inst = random_instance(&mut rng, 5, 1);
        // Keep the lone fleet comfortably inside its cap.
        for o in &mut inst.orders {
            o.rate = 0.5;
        }
        let result = optimize_allocation(&inst, &SolverConfig::default()).unwrap();
        for i in 0..5 {
            assert_eq!(result.x[(i, 0)], 1.0);
        }
        let x = AllocationMatrix::single_mode(5, 1, 0);
        assert_relative_eq!(
            result.objective,
            inst.expected_latency(&x).unwrap(),
            epsilon = 1e-12
        );
        assert!(result.diagnostics.converged);
    }

    #[test]
    fn identical_orders_get_identical_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut inst = random_instance(&mut rng, 2, 2);
        inst.orders[1] = Order {
            id: "o1".into(),
            ..inst.orders[0].clone()
        };
        for matrix in [&mut inst.service_time, &mut inst.beta, &mut inst.cost] {
            let first = matrix.row(0).to_vec();
            matrix.row_mut(1).copy_from_slice(&first);
        }
        let result = optimize_allocation(&inst, &SolverConfig::default()).unwrap();
        for j in 0..2 {
            assert!(
                (result.x[(0, j)] - result.x[(1, j)]).abs() <= 1e-6,
                "asymmetric split {} vs {}",
                result.x[(0, j)],
                result.x[(1, j)]
            );
        }
    }

    /// Exhaustive objective scan over both orders' simplex coordinates.
    fn grid_best(inst: &Instance, steps: usize) -> f64 {
        let mut best = f64::INFINITY;
        for s0 in 0..=steps {
            for s1 in 0..=steps {
                let x = Matrix::from_rows(vec![
                    vec![s0 as f64 / steps as f64, 1.0 - s0 as f64 / steps as f64],
                    vec![s1 as f64 / steps as f64, 1.0 - s1 as f64 / steps as f64],
                ])
                .unwrap();
                let rho = rho_of(inst, &x).unwrap();
                if rho.iter().any(|r| *r > inst.rho_cap) {
                    continue;
                }
                best = best.min(objective_of(inst, &x, &rho));
            }
        }
        best
    }

    #[test]
    fn objective_matches_grid_search_on_two_by_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let config = SolverConfig {
            multistart: 4,
            ..SolverConfig::default()
        };
        let mut tested = 0;
        while tested < 5 {
            let inst = random_instance(&mut rng, 2, 2);
            if !matches!(
                feasibility_presolve(&inst).unwrap(),
                PresolveOutcome::Feasible { .. }
            ) {
                continue;
            }
            tested += 1;
            let result = optimize_allocation(&inst, &config).unwrap();
            let oracle = grid_best(&inst, 1000);
            assert!(
                (result.objective - oracle) / oracle <= 1e-3,
                "solver {} vs grid {}",
                result.objective,
                oracle
            );
        }
    }

    #[test]
    fn accepted_iterates_never_increase_the_merit() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let inst = random_instance(&mut rng, 5, 3);
        let result = optimize_allocation(&inst, &SolverConfig::default()).unwrap();
        for stage in &result.diagnostics.merit_history {
            for pair in stage.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "merit rose within a stage");
            }
        }
    }

    #[test]
    fn exit_point_is_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        for _ in 0..5 {
            let inst = random_instance(&mut rng, 6, 3);
            let result = optimize_allocation(&inst, &SolverConfig::default()).unwrap();
            assert!(result.diagnostics.max_row_sum_error <= 1e-9);
            assert!(result.diagnostics.max_utilization_excess <= 1e-6);
            for (i, r) in result.snapshot.rho.iter().enumerate() {
                assert!(*r <= inst.rho_cap + 1e-6, "rho[{i}] = {r}");
            }
        }
    }

    #[test]
    fn identical_seeds_reproduce_identical_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        let inst = random_instance(&mut rng, 4, 3);
        let config = SolverConfig {
            seed: 42,
            multistart: 3,
            ..SolverConfig::default()
        };
        let a = optimize_allocation(&inst, &config).unwrap();
        let b = optimize_allocation(&inst, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn returned_prices_recover_operating_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(137);
        let inst = random_instance(&mut rng, 5, 2);
        let result = optimize_allocation(&inst, &SolverConfig::default()).unwrap();
        let mut revenue = 0.0;
        for i in 0..5 {
            for j in 0..2 {
                revenue += inst.orders[i].rate * result.x[(i, j)] * result.prices.tau[(i, j)];
            }
        }
        let cost = inst.total_cost(&result.x);
        assert!((revenue - cost).abs() <= 1e-6 * cost.abs().max(1.0));
    }

    #[test]
    fn overloaded_instance_errors_with_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(139);
        let mut inst = random_instance(&mut rng, 3, 2);
        for o in &mut inst.orders {
            o.rate = 1e5;
        }
        match optimize_allocation(&inst, &SolverConfig::default()) {
            Err(OptimizerError::Infeasible { certificate }) => {
                assert!(certificate.load_ratio > 1.0);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn exhausted_budget_reports_best_iterate() {
        let mut rng = ChaCha8Rng::seed_from_u64(149);
        let inst = random_instance(&mut rng, 5, 3);
        let config = SolverConfig {
            max_iters: 1,
            stationarity_tol: 1e-14,
            ..SolverConfig::default()
        };
        match optimize_allocation(&inst, &config) {
            Err(OptimizerError::NonConvergence { best, achieved, .. }) => {
                assert!(achieved > 1e-14);
                assert!(best.diagnostics.max_row_sum_error <= 1e-9);
                assert!(!best.diagnostics.converged);
            }
            other => panic!("expected non-convergence, got {:?}", other.map(|r| r.objective)),
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let config = SolverConfig {
            stationarity_tol: 0.0,
            ..SolverConfig::default()
        };
        assert!(matches!(
            config.validate(),
            Err(OptimizerError::InvalidConfig {
                field: "stationarity_tol",
                ..
            })
        ));
        let config = SolverConfig {
            barrier: BarrierSchedule {
                min: 0.0,
                ..BarrierSchedule::default()
            },
            ..SolverConfig::default()
        };
        assert!(config.validate().is_err());
        let config = SolverConfig {
            multistart: 0,
            ..SolverConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
