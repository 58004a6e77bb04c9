//! Closed-form prices that make a given allocation self-enforcing.
//!
//! Suppose order `i`'s demand is split across modalities with shares
//! `x[i][j]`, and users—sorted from most to least impatient along
//! `a in [0, 1]`—are assigned canonically: the most impatient interval
//! rides the fastest mode, the next interval the next fastest, and so on
//! (see [`crate::equilibrium`]). For no user to want to switch, each
//! *threshold* user sitting at a breakpoint `a_k` between two adjacent
//! modes must be exactly indifferent between them: the faster mode's price
//! premium has to equal the latency gap valued at that user's value of
//! time,
//!
//! ```text
//! tau[k] - tau[k+1] = (ell[k+1] - ell[k]) * v(a_k)      (latency order)
//! ```
//!
//! Stacking these indifference conditions from the slowest mode (whose
//! price is a free parameter, the *base price*) upward gives the unique
//! price vector supporting the allocation:
//!
//! ```text
//! tau[j] = base + sum over k in j..J-1 of (ell[k+1] - ell[k]) * v(a_k)
//! ```
//!
//! [`compute_prices`] evaluates that sum literally; a recursive
//! formulation ([`compute_prices_recursive`]) and a brute-force
//! best-response check ([`crate::equilibrium::is_equilibrium`]) serve as
//! independent cross-checks in the test suite.
//!
//! [`breakeven_base_price`] then picks the base so that total revenue
//! exactly covers the system's operating cost.

use crate::matrix::Matrix;
use crate::model::{
    AllocationMatrix, Instance, LatencySnapshot, PopulationCurve, ROW_SUM_TOL,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PricingError {
    #[error("latency row has {latencies} entries but flow row has {flows}")]
    LengthMismatch { latencies: usize, flows: usize },
    #[error("flow[{index}] = {value}: must be in [0, 1]")]
    FlowOutOfRange { index: usize, value: f64 },
    #[error("flow row sums to {sum}, expected 1 within {tol}")]
    NotASimplexRow { sum: f64, tol: f64 },
    #[error("value of time v({a}) = {value}: must be positive")]
    NonPositiveValueOfTime { a: f64, value: f64 },
}

/// Modality indices of one order sorted by non-decreasing latency, ties
/// broken by original index (stable).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeOrdering {
    perm: Vec<usize>,
}

impl ModeOrdering {
    pub fn by_latency(ell_row: &[f64]) -> Self {
        let mut perm: Vec<usize> = (0..ell_row.len()).collect();
        perm.sort_by(|&a, &b| ell_row[a].total_cmp(&ell_row[b]));
        ModeOrdering { perm }
    }

    /// Modality index at latency rank `k` (0 = fastest).
    pub fn mode_at(&self, k: usize) -> usize {
        self.perm[k]
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }
}

/// Population positions where one order's canonical assignment switches
/// modes: `a[0] = 0`, `a[k] = a[k-1] + flow of the k-th fastest mode`,
/// `a[J] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Breakpoints {
    a: Vec<f64>,
}

impl Breakpoints {
    /// Cumulative flow along the latency ordering. Rejects rows off the
    /// unit simplex (entries outside `[0, 1]`, or not summing to 1 within
    /// [`ROW_SUM_TOL`]).
    pub fn from_flow(flow_row: &[f64], ordering: &ModeOrdering) -> Result<Self, PricingError> {
        if flow_row.len() != ordering.len() {
            return Err(PricingError::LengthMismatch {
                latencies: ordering.len(),
                flows: flow_row.len(),
            });
        }
        let mut a = Vec::with_capacity(flow_row.len() + 1);
        let mut acc = 0.0;
        a.push(0.0);
        for (k, &mode) in ordering.perm().iter().enumerate() {
            let share = flow_row[mode];
            if !(-1e-12..=1.0 + 1e-12).contains(&share) {
                return Err(PricingError::FlowOutOfRange {
                    index: k,
                    value: share,
                });
            }
            acc += share.clamp(0.0, 1.0);
            a.push(acc.min(1.0));
        }
        if (acc - 1.0).abs() > ROW_SUM_TOL {
            return Err(PricingError::NotASimplexRow {
                sum: acc,
                tol: ROW_SUM_TOL,
            });
        }
        *a.last_mut().unwrap() = 1.0;
        Ok(Breakpoints { a })
    }

    /// The `J + 1` switch positions, non-decreasing from 0 to 1.
    pub fn a(&self) -> &[f64] {
        &self.a
    }
}

fn value_of_time_at(curve: &PopulationCurve, a: f64) -> Result<f64, PricingError> {
    let v = curve.value_of_time(a);
    if v <= 0.0 {
        return Err(PricingError::NonPositiveValueOfTime { a, value: v });
    }
    Ok(v)
}

/// Prices (dollars, in original modality order) making `flow_row` a stable
/// choice for every user, with the slowest mode priced at `base`.
///
/// Each price is the base plus the full sum of threshold-user indifference
/// increments between this mode and the slowest one.
pub fn compute_prices(
    ell_row: &[f64],
    flow_row: &[f64],
    curve: &PopulationCurve,
    base: f64,
) -> Result<Vec<f64>, PricingError> {
    let ordering = ModeOrdering::by_latency(ell_row);
    if ell_row.len() != flow_row.len() {
        return Err(PricingError::LengthMismatch {
            latencies: ell_row.len(),
            flows: flow_row.len(),
        });
    }
    let breaks = Breakpoints::from_flow(flow_row, &ordering)?;
    let a = breaks.a();
    let j_count = ordering.len();
    let mut tau = vec![0.0; j_count];
    for m in 0..j_count {
        let mut increments = 0.0;
        for k in m..j_count.saturating_sub(1) {
            let gap = ell_row[ordering.mode_at(k + 1)] - ell_row[ordering.mode_at(k)];
            increments += gap * value_of_time_at(curve, a[k + 1])?;
        }
        tau[ordering.mode_at(m)] = base + increments;
    }
    Ok(tau)
}

/// Same prices as [`compute_prices`], built back-to-front by the adjacent
/// indifference recursion `tau[k] = tau[k+1] + gap * v(a_k)` instead of
/// re-summing per mode. Kept as an independent route for cross-checking.
pub fn compute_prices_recursive(
    ell_row: &[f64],
    flow_row: &[f64],
    curve: &PopulationCurve,
    base: f64,
) -> Result<Vec<f64>, PricingError> {
    let ordering = ModeOrdering::by_latency(ell_row);
    if ell_row.len() != flow_row.len() {
        return Err(PricingError::LengthMismatch {
            latencies: ell_row.len(),
            flows: flow_row.len(),
        });
    }
    let breaks = Breakpoints::from_flow(flow_row, &ordering)?;
    let a = breaks.a();
    let j_count = ordering.len();
    let mut tau = vec![0.0; j_count];
    let mut acc = base;
    if j_count > 0 {
        tau[ordering.mode_at(j_count - 1)] = base;
    }
    for m in (0..j_count.saturating_sub(1)).rev() {
        let gap = ell_row[ordering.mode_at(m + 1)] - ell_row[ordering.mode_at(m)];
        acc += gap * value_of_time_at(curve, a[m + 1])?;
        tau[ordering.mode_at(m)] = acc;
    }
    Ok(tau)
}

/// Base-free part of the price row: `offset[j] = tau[j] - base`, i.e. the
/// premium of mode `j` over the slowest mode.
pub fn price_offsets(
    ell_row: &[f64],
    flow_row: &[f64],
    curve: &PopulationCurve,
) -> Result<Vec<f64>, PricingError> {
    compute_prices(ell_row, flow_row, curve, 0.0)
}

/// Prices for every order at a common base, dollars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceMatrix {
    /// `tau[i][j]`: price of modality `j` for order `i`.
    pub tau: Matrix,
    /// Price of each order's slowest mode.
    pub base: f64,
}

impl PriceMatrix {
    /// Prices each order's row against its latency row and population
    /// curve at the given base.
    pub fn for_allocation(
        instance: &Instance,
        x: &AllocationMatrix,
        snapshot: &LatencySnapshot,
        base: f64,
    ) -> Result<Self, PricingError> {
        let (n, m) = (instance.n_orders(), instance.n_modalities());
        let mut tau = Matrix::zeros(n, m);
        for i in 0..n {
            let row = compute_prices(
                snapshot.ell.row(i),
                x.row(i),
                instance.population.curve(i),
                base,
            )?;
            tau.row_mut(i).copy_from_slice(&row);
        }
        Ok(PriceMatrix { tau, base })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.tau.row(i)
    }
}

/// Premium of every mode over the slowest, per order (a [`PriceMatrix`] at
/// base 0).
pub fn price_offsets_matrix(
    instance: &Instance,
    x: &AllocationMatrix,
    snapshot: &LatencySnapshot,
) -> Result<Matrix, PricingError> {
    Ok(PriceMatrix::for_allocation(instance, x, snapshot, 0.0)?.tau)
}

/// Base price chosen so revenue covers operating cost; `subsidy` marks a
/// negative value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasePrice {
    /// Break-even base, dollars. May be negative: the mode premiums alone
    /// can out-earn the operating cost, in which case breaking even means
    /// paying users of the slowest mode.
    pub value: f64,
    /// True iff `value < 0`. Never clipped away — the caller decides how
    /// to present a subsidy.
    pub subsidy: bool,
}

/// The smallest base price at which total revenue covers total operating
/// cost.
///
/// Revenue at base `b` is `sum_i sum_j r_i * x[i][j] * (offset[i][j] + b)`,
/// which is linear in `b` with slope `sum_i r_i` (each order's shares sum
/// to 1), so the break-even point is exact:
///
/// ```text
/// base = (total_cost(x) - sum_ij r_i * x[i][j] * offset[i][j]) / sum_i r_i
/// ```
pub fn breakeven_base_price(
    instance: &Instance,
    x: &AllocationMatrix,
    snapshot: &LatencySnapshot,
) -> Result<BasePrice, PricingError> {
    let offsets = price_offsets_matrix(instance, x, snapshot)?;
    let mut offset_revenue = 0.0;
    let mut total_rate = 0.0;
    for (i, order) in instance.orders.iter().enumerate() {
        total_rate += order.rate;
        for j in 0..instance.n_modalities() {
            offset_revenue += order.rate * x[(i, j)] * offsets[(i, j)];
        }
    }
    let value = (instance.total_cost(x) - offset_revenue) / total_rate;
    Ok(BasePrice {
        value,
        subsidy: value < 0.0,
    })
}
