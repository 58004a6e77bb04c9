//! Brute-force verification that priced allocations are stable.
//!
//! A user at population position `a` facing latency `ell` and price `tau`
//! experiences a combined cost of `ell + tau / v(a)` hours: money is
//! converted to time at the user's value of time. An allocation plus a
//! price matrix is *stable* (a Nash equilibrium) when no user can lower
//! that cost by switching modes.
//!
//! The canonical assignment routes users in latency order: with modes
//! sorted fastest first and breakpoints `a_0 = 0 <= a_1 <= ... <= a_J = 1`
//! at the cumulative flows, users in `[a_k, a_{k+1})` ride the mode of
//! rank `k` (the final point `a = 1` belongs to the last non-empty
//! interval). The most impatient users buy the fastest, most expensive
//! mode; the most patient ride the slowest, cheapest one.
//!
//! [`is_equilibrium`] checks the no-switch condition exhaustively over a
//! [`UserGrid`], sampling interval midpoints plus points just left and
//! right of every breakpoint, where violations concentrate: a mispriced
//! mode first loses exactly its most marginal users.
//! [`endpoint_inequality_check`] verifies the same conditions analytically
//! — each pairwise constraint is monotone in `a`, so checking it at the
//! binding interval endpoint covers the whole interval. The two routes are
//! independent and cross-validate each other (and the pricing module) in
//! the test suite.

use crate::model::{AllocationMatrix, Instance, LatencySnapshot, PopulationCurve};
use crate::pricing::{Breakpoints, ModeOrdering, PriceMatrix, PricingError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Offset used to sample just beside each breakpoint.
const BREAKPOINT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EquilibriumError {
    #[error("user grid must have at least 2 samples, got {got}")]
    GridTooSmall { got: usize },
    #[error("value of time v({a}) = {value}: must be positive")]
    NonPositiveValueOfTime { a: f64, value: f64 },
    #[error(transparent)]
    InvalidFlow(#[from] PricingError),
}

/// Evenly spaced sample users: `a_g = (g + 0.5) / G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGrid {
    resolution: usize,
}

impl UserGrid {
    pub fn new(resolution: usize) -> Result<Self, EquilibriumError> {
        if resolution < 2 {
            return Err(EquilibriumError::GridTooSmall { got: resolution });
        }
        Ok(UserGrid { resolution })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Midpoint samples, strictly increasing in `(0, 1)`.
    pub fn samples(&self) -> impl Iterator<Item = f64> + '_ {
        let g = self.resolution as f64;
        (0..self.resolution).map(move |i| (i as f64 + 0.5) / g)
    }
}

/// Outcome of a stability check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumVerdict {
    pub is_equilibrium: bool,
    /// Largest cost saving (hours) any sampled user could obtain by
    /// switching; 0 when no user benefits.
    pub worst_violation: f64,
    /// The user realizing `worst_violation`; present iff not an
    /// equilibrium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

/// A sampled user who prefers another mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub order: usize,
    /// Population position of the user.
    pub user: f64,
    /// Mode the canonical assignment gives this user.
    pub assigned: usize,
    /// Mode with strictly lower cost for this user.
    pub better: usize,
}

/// One mode's slice of the population under the canonical assignment:
/// users in `[lo, hi)` (the final point `a = 1` belongs to the last
/// non-empty interval). Zero-flow modes get an empty interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeInterval {
    pub mode: usize,
    pub lo: f64,
    pub hi: f64,
}

impl ModeInterval {
    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }
}

/// Combined cost, in hours, of option `(ell, tau)` for the user at
/// position `a`.
pub fn user_cost(
    ell: f64,
    tau: f64,
    a: f64,
    curve: &PopulationCurve,
) -> Result<f64, EquilibriumError> {
    let v = curve.value_of_time(a);
    if v <= 0.0 {
        return Err(EquilibriumError::NonPositiveValueOfTime { a, value: v });
    }
    Ok(ell + tau / v)
}

/// The user intervals each mode serves, in latency order.
pub fn canonical_assignment(
    flow_row: &[f64],
    ordering: &ModeOrdering,
) -> Result<Vec<ModeInterval>, EquilibriumError> {
    let breaks = Breakpoints::from_flow(flow_row, ordering)?;
    let a = breaks.a();
    Ok((0..ordering.len())
        .map(|k| ModeInterval {
            mode: ordering.mode_at(k),
            lo: a[k],
            hi: a[k + 1],
        })
        .collect())
}

/// Latency rank serving the user at `a`: the interval `[a_k, a_{k+1})`
/// containing `a`, or the last non-empty interval for `a = 1`.
fn rank_of_user(a_break: &[f64], a: f64) -> usize {
    let modes = a_break.len() - 1;
    for k in 0..modes {
        if a < a_break[k + 1] {
            return k;
        }
    }
    (0..modes).rev().find(|&k| a_break[k] < a).unwrap_or(0)
}

/// Cheapest mode for the user at `a`; ties go to the lowest index.
pub fn best_response(
    ell_row: &[f64],
    tau_row: &[f64],
    a: f64,
    curve: &PopulationCurve,
) -> Result<usize, EquilibriumError> {
    let mut best = 0;
    let mut best_cost = f64::INFINITY;
    for (j, (&ell, &tau)) in ell_row.iter().zip(tau_row).enumerate() {
        let cost = user_cost(ell, tau, a, curve)?;
        if cost < best_cost {
            best = j;
            best_cost = cost;
        }
    }
    Ok(best)
}

/// Checks, for every order and sampled user, that the canonically
/// assigned mode is within `tol` (hours) of the user's cheapest option.
///
/// Samples the grid midpoints plus both sides of every interior
/// breakpoint, since the marginal users at interval boundaries are the
/// first to defect under mispricing.
pub fn is_equilibrium(
    instance: &Instance,
    x: &AllocationMatrix,
    snapshot: &LatencySnapshot,
    prices: &PriceMatrix,
    grid: &UserGrid,
    tol: f64,
) -> Result<EquilibriumVerdict, EquilibriumError> {
    let mut worst = 0.0_f64;
    let mut witness = None;
    for i in 0..instance.n_orders() {
        let ell = snapshot.ell.row(i);
        let tau = prices.row(i);
        let curve = instance.population.curve(i);
        let ordering = ModeOrdering::by_latency(ell);
        let breaks = Breakpoints::from_flow(x.row(i), &ordering)?;
        let a_break = breaks.a();

        let mut samples: Vec<f64> = grid.samples().collect();
        for &ak in &a_break[1..a_break.len() - 1] {
            samples.push((ak - BREAKPOINT_EPS).clamp(0.0, 1.0));
            samples.push((ak + BREAKPOINT_EPS).clamp(0.0, 1.0));
        }

        for a in samples {
            let assigned = ordering.mode_at(rank_of_user(a_break, a));
            let assigned_cost = user_cost(ell[assigned], tau[assigned], a, curve)?;
            for alt in 0..ell.len() {
                if alt == assigned {
                    continue;
                }
                let saving = assigned_cost - user_cost(ell[alt], tau[alt], a, curve)?;
                if saving > worst {
                    worst = saving;
                    witness = Some(Witness {
                        order: i,
                        user: a,
                        assigned,
                        better: alt,
                    });
                }
            }
        }
    }
    let is_equilibrium = worst <= tol;
    Ok(EquilibriumVerdict {
        is_equilibrium,
        worst_violation: worst,
        witness: if is_equilibrium { None } else { witness },
    })
}

/// A pairwise stability condition that failed at an interval endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EndpointFailure {
    /// Adjacent modes must make their threshold user exactly indifferent:
    /// `tau_fast - tau_slow = (ell_slow - ell_fast) * v(a)` at the shared
    /// breakpoint. `residual` is the signed dollar error.
    AdjacentEquality {
        fast: usize,
        slow: usize,
        at: f64,
        residual: f64,
    },
    /// A user assigned to `user_mode` must not prefer `alt_mode` at the
    /// binding endpoint of their interval. `slack` is negative by the
    /// amount (dollars) the constraint is violated.
    PairwiseBound {
        user_mode: usize,
        alt_mode: usize,
        at: f64,
        slack: f64,
    },
}

/// Result of [`endpoint_inequality_check`]: empty means all conditions
/// hold.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EndpointReport {
    pub failures: Vec<EndpointFailure>,
}

impl EndpointReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Analytic counterpart of [`is_equilibrium`] for one order's row.
///
/// Each user-vs-alternative constraint `ell_u + tau_u / v(a) <= ell_alt +
/// tau_alt / v(a)` is monotone in `a` over the user's interval, so it
/// holds everywhere iff it holds at the binding endpoint: the right end
/// against slower modes (where the user is most patient) and the left end
/// against faster ones. Between adjacent modes both directions bind at
/// the shared breakpoint, forcing an equality. `tol` is in dollars.
pub fn endpoint_inequality_check(
    ell_row: &[f64],
    flow_row: &[f64],
    tau_row: &[f64],
    curve: &PopulationCurve,
    tol: f64,
) -> Result<EndpointReport, EquilibriumError> {
    let ordering = ModeOrdering::by_latency(ell_row);
    let breaks = Breakpoints::from_flow(flow_row, &ordering)?;
    let a = breaks.a();
    let modes = ordering.len();
    let value_at = |pos: f64| -> Result<f64, EquilibriumError> {
        let v = curve.value_of_time(pos);
        if v <= 0.0 {
            return Err(EquilibriumError::NonPositiveValueOfTime { a: pos, value: v });
        }
        Ok(v)
    };

    let mut failures = Vec::new();
    for k in 0..modes.saturating_sub(1) {
        let (fast, slow) = (ordering.mode_at(k), ordering.mode_at(k + 1));
        let v = value_at(a[k + 1])?;
        let residual = (tau_row[fast] - tau_row[slow]) - (ell_row[slow] - ell_row[fast]) * v;
        if residual.abs() > tol {
            failures.push(EndpointFailure::AdjacentEquality {
                fast,
                slow,
                at: a[k + 1],
                residual,
            });
        }
    }
    for p in 0..modes {
        let user_mode = ordering.mode_at(p);
        for q in 0..modes {
            if q == p {
                continue;
            }
            let alt_mode = ordering.mode_at(q);
            let (at, slack) = if q > p {
                // Slower alternative: hardest to resist for the user's
                // most patient member, at the right endpoint.
                let at = a[p + 1];
                let v = value_at(at)?;
                let slack = (ell_row[alt_mode] - ell_row[user_mode]) * v
                    - (tau_row[user_mode] - tau_row[alt_mode]);
                (at, slack)
            } else {
                // Faster alternative: most tempting for the most
                // impatient member, at the left endpoint.
                let at = a[p];
                let v = value_at(at)?;
                let slack = (tau_row[alt_mode] - tau_row[user_mode])
                    - (ell_row[user_mode] - ell_row[alt_mode]) * v;
                (at, slack)
            };
            if slack < -tol {
                failures.push(EndpointFailure::PairwiseBound {
                    user_mode,
                    alt_mode,
                    at,
                    slack,
                });
            }
        }
    }
    Ok(EndpointReport { failures })
}
