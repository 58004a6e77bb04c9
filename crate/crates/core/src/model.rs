//! Domain types and the deterministic latency/cost formulas.
//!
//! The model is a snapshot of a delivery system in steady state: a set of
//! orders, each a pickup/dropoff pair with a demand rate, and a set of
//! modalities (car, drone, robot, ...), each a fleet of identical couriers.
//! An [`AllocationMatrix`] says which fraction of each order's demand goes
//! to which modality; everything else here evaluates what that choice costs
//! in time and money.
//!
//! Click-to-door latency decomposes per order `i` and modality `j` as
//!
//! ```text
//! ell[i][j](x) = service[i][j] + travel[i][j] + pickup[i][j](x)
//! ```
//!
//! where only the pickup term depends on the allocation: the busier a fleet
//! is, the fewer couriers are idle near the restaurant. With utilization
//! `rho[j]` (offered load over fleet capacity) the expected pickup time is
//!
//! ```text
//! pickup[i][j] = k[j] / (1 + beta[i][j] * N[j] * (1 - rho[j]))
//! ```
//!
//! i.e. the reach horizon `k[j]` shrunk by the expected number of idle
//! couriers within reach. `beta[i][j] * N[j] * (1 - rho[j])` is that count;
//! the `1 / (n + 1)` shape is the expected minimum of `n` uniform draws.
//!
//! All functions here are pure in `(instance, x)` and reduce in a fixed
//! order, so results are bit-reproducible across runs.

use crate::matrix::Matrix;
use crate::units;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allocation rows must sum to 1 within this tolerance.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Allocation entries this far outside `[0, 1]` are clipped; farther is an error.
pub const CLIP_TOL: f64 = 1e-12;

/// Evaluation failed because the instance cannot supply a capacity.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("modality {id}: completion rate is \"estimate\" and has not been resolved")]
    UnresolvedCompletionRate { id: String },
    #[error("modality {id}: zero service capacity (fleet_size * completion_rate = 0)")]
    ZeroCapacity { id: String },
}

/// An instance or allocation violates a structural invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("{field}: {detail}")]
    Field { field: String, detail: String },
    #[error("matrix {name} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    Dimension {
        name: &'static str,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("{name}[{row}][{col}] = {value}: must be {requirement}")]
    Cell {
        name: &'static str,
        row: usize,
        col: usize,
        value: f64,
        requirement: &'static str,
    },
    #[error("allocation row {row} sums to {sum}, expected 1 within {tol}")]
    RowSum { row: usize, sum: f64, tol: f64 },
}

/// Planar coordinate in meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    /// Euclidean distance to `other`, in meters.
    pub fn distance_m(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> [f64; 2] {
        [p.x, p.y]
    }
}

/// A delivery order: where to pick up, where to drop off, and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub id: String,
    /// Pickup (restaurant) location, meters.
    pub pickup: Point,
    /// Dropoff (customer) location, meters.
    pub dropoff: Point,
    /// Demand rate in orders per hour; must be positive.
    pub rate: f64,
}

impl Order {
    /// Pickup-to-dropoff Euclidean distance in kilometers.
    pub fn distance_km(&self) -> f64 {
        units::meters_to_km(self.pickup.distance_m(self.dropoff))
    }
}

/// Per-courier completion rate: a concrete value in orders/hour, or the
/// marker `"estimate"` asking the loader to derive one from the instance
/// (see `queueing::estimate_completion_rate`). Evaluation requires a
/// concrete value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CompletionRateRepr", into = "CompletionRateRepr")]
pub enum CompletionRate {
    PerHour(f64),
    Estimate,
}

impl CompletionRate {
    pub fn per_hour(self) -> Option<f64> {
        match self {
            CompletionRate::PerHour(v) => Some(v),
            CompletionRate::Estimate => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CompletionRateRepr {
    PerHour(f64),
    Tag(String),
}

impl TryFrom<CompletionRateRepr> for CompletionRate {
    type Error = String;

    fn try_from(repr: CompletionRateRepr) -> Result<Self, String> {
        match repr {
            CompletionRateRepr::PerHour(v) => Ok(CompletionRate::PerHour(v)),
            CompletionRateRepr::Tag(s) if s == "estimate" => Ok(CompletionRate::Estimate),
            CompletionRateRepr::Tag(s) => Err(format!(
                "completion_rate must be a number or \"estimate\", got \"{s}\""
            )),
        }
    }
}

impl From<CompletionRate> for CompletionRateRepr {
    fn from(rate: CompletionRate) -> Self {
        match rate {
            CompletionRate::PerHour(v) => CompletionRateRepr::PerHour(v),
            CompletionRate::Estimate => CompletionRateRepr::Tag("estimate".to_owned()),
        }
    }
}

/// A transportation modality: a fleet of identical couriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modality {
    pub id: String,
    /// Travel speed, km/h; must be positive.
    pub speed_kmh: f64,
    /// Number of couriers in the fleet; at least 1.
    pub fleet_size: u32,
    /// Per-courier completion rate, orders/hour.
    pub completion_rate: CompletionRate,
    /// Worst-case pickup reach `k`, hours: expected pickup time when no
    /// courier is idle nearby.
    pub reach_horizon_h: f64,
    /// Default operating cost per delivered order, dollars.
    pub cost_per_order: f64,
    /// Multiplier the generator applies to baseline (car) service times.
    pub service_scale: f64,
}

/// Supported shapes for the value-of-time curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveShape {
    #[default]
    Linear,
}

/// Value of time across the user population.
///
/// Users are indexed by a position `a` in `[0, 1]`, sorted from most to
/// least time-sensitive: a user at position `a` values saved time at
/// `v(a) = v0 + (v1 - v0) * a` dollars per hour, with `v0 >= v1 > 0`. The
/// reciprocal `1 / v(a)` — hours of delay a user will absorb per dollar
/// saved — is non-decreasing in `a`, which is what pricing and equilibrium
/// arguments rely on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationCurve {
    /// Value of time at `a = 0` (most impatient user), dollars/hour.
    pub v0: f64,
    /// Value of time at `a = 1` (most patient user), dollars/hour.
    pub v1: f64,
    #[serde(default)]
    pub shape: CurveShape,
}

impl PopulationCurve {
    pub fn linear(v0: f64, v1: f64) -> Self {
        PopulationCurve {
            v0,
            v1,
            shape: CurveShape::Linear,
        }
    }

    /// `v(a)` in dollars/hour.
    pub fn value_of_time(&self, a: f64) -> f64 {
        self.v0 + (self.v1 - self.v0) * a
    }

    /// `1 / v(a)`: hours a user at position `a` trades per dollar.
    pub fn time_per_dollar(&self, a: f64) -> f64 {
        1.0 / self.value_of_time(a)
    }
}

/// Population curve(s) for an instance: either one shared curve or one per
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Population {
    Shared(PopulationCurve),
    PerOrder(Vec<PopulationCurve>),
}

impl Population {
    /// Curve applying to order `i`.
    pub fn curve(&self, i: usize) -> &PopulationCurve {
        match self {
            Population::Shared(c) => c,
            Population::PerOrder(v) => &v[i],
        }
    }
}

/// The full problem statement: orders, fleets, population, and the
/// per-order-per-modality data matrices. All matrices are
/// `|orders| x |modalities|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub orders: Vec<Order>,
    pub modalities: Vec<Modality>,
    pub population: Population,
    /// Service time `s[i][j]` in hours: handling at both endpoints.
    pub service_time: Matrix,
    /// Courier-proximity factor `beta[i][j]` in `(0, 1]`: the fraction of
    /// fleet `j` close enough to order `i`'s pickup to matter.
    pub beta: Matrix,
    /// Operating cost `c[i][j]` in dollars per delivered order.
    pub cost: Matrix,
    /// Utilization cap applied uniformly to every modality, in `(0, 1)`.
    pub rho_cap: f64,
}

/// Which fraction of each order is served by each modality.
///
/// Rows live on the unit simplex: entries in `[0, 1]`, each row summing to
/// 1 within [`ROW_SUM_TOL`]. Construction clips entries within [`CLIP_TOL`]
/// of the bounds and rejects anything farther out, so every value of this
/// type is valid by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct AllocationMatrix(Matrix);

impl AllocationMatrix {
    pub fn new(mut x: Matrix) -> Result<Self, ValidationError> {
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                let v = x[(i, j)];
                if !(-CLIP_TOL..=1.0 + CLIP_TOL).contains(&v) {
                    return Err(ValidationError::Cell {
                        name: "allocation",
                        row: i,
                        col: j,
                        value: v,
                        requirement: "in [0, 1]",
                    });
                }
                x[(i, j)] = v.clamp(0.0, 1.0);
            }
            let sum: f64 = x.row(i).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(ValidationError::RowSum {
                    row: i,
                    sum,
                    tol: ROW_SUM_TOL,
                });
            }
        }
        Ok(AllocationMatrix(x))
    }

    /// Every order split evenly across all modalities.
    pub fn equal_split(n_orders: usize, n_modalities: usize) -> Self {
        AllocationMatrix(Matrix::filled(
            n_orders,
            n_modalities,
            1.0 / n_modalities as f64,
        ))
    }

    /// Every order assigned entirely to modality `j`.
    pub fn single_mode(n_orders: usize, n_modalities: usize, j: usize) -> Self {
        AllocationMatrix(Matrix::from_fn(n_orders, n_modalities, |_, col| {
            if col == j {
                1.0
            } else {
                0.0
            }
        }))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn n_orders(&self) -> usize {
        self.0.rows()
    }

    pub fn n_modalities(&self) -> usize {
        self.0.cols()
    }
}

impl std::ops::Index<(usize, usize)> for AllocationMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

impl TryFrom<Matrix> for AllocationMatrix {
    type Error = ValidationError;

    fn try_from(m: Matrix) -> Result<Self, ValidationError> {
        AllocationMatrix::new(m)
    }
}

impl From<AllocationMatrix> for Matrix {
    fn from(x: AllocationMatrix) -> Matrix {
        x.0
    }
}

/// Latencies evaluated at a fixed allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySnapshot {
    /// Click-to-door latency `ell[i][j]`, hours.
    pub ell: Matrix,
    /// Utilization per modality.
    pub rho: Vec<f64>,
    /// Per-cell breakdown; when present, `ell` is the exact sum of the
    /// three parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<LatencyComponents>,
}

/// The three addends of the latency decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyComponents {
    pub service: Matrix,
    pub travel: Matrix,
    pub pickup: Matrix,
}

/// Pickup-to-dropoff travel time in hours; independent of the allocation.
pub fn travel_time(order: &Order, modality: &Modality) -> f64 {
    order.distance_km() / modality.speed_kmh
}

impl Instance {
    pub fn n_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn n_modalities(&self) -> usize {
        self.modalities.len()
    }

    /// Resolved completion rate of modality `j`, orders/hour.
    pub fn completion_rate(&self, j: usize) -> Result<f64, ModelError> {
        self.modalities[j]
            .completion_rate
            .per_hour()
            .ok_or_else(|| ModelError::UnresolvedCompletionRate {
                id: self.modalities[j].id.clone(),
            })
    }

    /// Fleet capacity of modality `j`: `N * mu`, orders/hour.
    pub fn capacity(&self, j: usize) -> Result<f64, ModelError> {
        let cap = self.modalities[j].fleet_size as f64 * self.completion_rate(j)?;
        if cap <= 0.0 {
            return Err(ModelError::ZeroCapacity {
                id: self.modalities[j].id.clone(),
            });
        }
        Ok(cap)
    }

    /// Travel time for order `i` on modality `j`, hours.
    pub fn travel_time(&self, i: usize, j: usize) -> f64 {
        travel_time(&self.orders[i], &self.modalities[j])
    }

    /// Utilization of modality `j` under allocation `x`: offered load
    /// (demand-rate-weighted flow) over fleet capacity.
    pub fn utilization(&self, x: &AllocationMatrix, j: usize) -> Result<f64, ModelError> {
        let load: f64 = self
            .orders
            .iter()
            .enumerate()
            .map(|(i, o)| o.rate * x[(i, j)])
            .sum();
        Ok(load / self.capacity(j)?)
    }

    /// Utilization of every modality under allocation `x`.
    pub fn utilizations(&self, x: &AllocationMatrix) -> Result<Vec<f64>, ModelError> {
        (0..self.n_modalities())
            .map(|j| self.utilization(x, j))
            .collect()
    }

    /// Pickup time for order `i` on modality `j` at a given utilization.
    ///
    /// At or beyond full utilization the availability term is clamped to
    /// zero and the reach horizon `k` is returned: optimizer iterates may
    /// transiently overload a fleet, and the formula must stay physical.
    pub fn pickup_time_at(&self, i: usize, j: usize, rho: f64) -> f64 {
        let m = &self.modalities[j];
        let idle = m.fleet_size as f64 * (1.0 - rho).max(0.0);
        m.reach_horizon_h / (1.0 + self.beta[(i, j)] * idle)
    }

    /// Pickup time for order `i` on modality `j` under allocation `x`.
    pub fn pickup_time(&self, x: &AllocationMatrix, i: usize, j: usize) -> Result<f64, ModelError> {
        let rho = self.utilization(x, j)?;
        Ok(self.pickup_time_at(i, j, rho))
    }

    /// Evaluates the full latency decomposition at allocation `x`.
    pub fn latency_snapshot(&self, x: &AllocationMatrix) -> Result<LatencySnapshot, ModelError> {
        let (n, m) = (self.n_orders(), self.n_modalities());
        let rho = self.utilizations(x)?;
        let service = self.service_time.clone();
        let travel = Matrix::from_fn(n, m, |i, j| self.travel_time(i, j));
        let pickup = Matrix::from_fn(n, m, |i, j| self.pickup_time_at(i, j, rho[j]));
        let ell = Matrix::from_fn(n, m, |i, j| {
            service[(i, j)] + travel[(i, j)] + pickup[(i, j)]
        });
        Ok(LatencySnapshot {
            ell,
            rho,
            components: Some(LatencyComponents {
                service,
                travel,
                pickup,
            }),
        })
    }

    /// Operating cost of running the system under `x`, dollars/hour.
    pub fn total_cost(&self, x: &AllocationMatrix) -> f64 {
        let mut total = 0.0;
        for (i, o) in self.orders.iter().enumerate() {
            for j in 0..self.n_modalities() {
                total += self.cost[(i, j)] * o.rate * x[(i, j)];
            }
        }
        total
    }

    /// Expected latency over all orders under `x`, hours: the optimization
    /// objective.
    pub fn expected_latency(&self, x: &AllocationMatrix) -> Result<f64, ModelError> {
        let snapshot = self.latency_snapshot(x)?;
        let mut total = 0.0;
        for i in 0..self.n_orders() {
            for j in 0..self.n_modalities() {
                total += snapshot.ell[(i, j)] * x[(i, j)];
            }
        }
        Ok(total / self.n_orders() as f64)
    }

    /// Checks every structural invariant, reporting the first violation by
    /// path.
    pub fn validate(&self) -> Result<(), ValidationError> {
        let field = |field: &str, detail: String| ValidationError::Field {
            field: field.to_owned(),
            detail,
        };
        if self.orders.is_empty() {
            return Err(field("orders", "at least one order required".into()));
        }
        if self.modalities.is_empty() {
            return Err(field("modalities", "at least one modality required".into()));
        }
        for (i, o) in self.orders.iter().enumerate() {
            if !(o.rate > 0.0 && o.rate.is_finite()) {
                return Err(field(
                    &format!("orders[{i}].rate"),
                    format!("must be positive and finite, got {}", o.rate),
                ));
            }
            for (name, p) in [("pickup", o.pickup), ("dropoff", o.dropoff)] {
                if !(p.x.is_finite() && p.y.is_finite()) {
                    return Err(field(
                        &format!("orders[{i}].{name}"),
                        "coordinates must be finite".into(),
                    ));
                }
            }
        }
        for (j, m) in self.modalities.iter().enumerate() {
            let path = |f: &str| format!("modalities[{j}].{f}");
            if !(m.speed_kmh > 0.0 && m.speed_kmh.is_finite()) {
                return Err(field(
                    &path("speed_kmh"),
                    format!("must be positive and finite, got {}", m.speed_kmh),
                ));
            }
            if m.fleet_size < 1 {
                return Err(field(&path("fleet_size"), "must be at least 1".into()));
            }
            if let CompletionRate::PerHour(mu) = m.completion_rate {
                if !(mu > 0.0 && mu.is_finite()) {
                    return Err(field(
                        &path("completion_rate"),
                        format!("must be positive and finite, got {mu}"),
                    ));
                }
            }
            if !(m.reach_horizon_h > 0.0 && m.reach_horizon_h.is_finite()) {
                return Err(field(
                    &path("reach_horizon_h"),
                    format!("must be positive and finite, got {}", m.reach_horizon_h),
                ));
            }
            if !(m.cost_per_order >= 0.0 && m.cost_per_order.is_finite()) {
                return Err(field(
                    &path("cost_per_order"),
                    format!("must be non-negative and finite, got {}", m.cost_per_order),
                ));
            }
            if !(m.service_scale >= 0.0 && m.service_scale.is_finite()) {
                return Err(field(
                    &path("service_scale"),
                    format!("must be non-negative and finite, got {}", m.service_scale),
                ));
            }
        }
        let curves: Vec<(String, &PopulationCurve)> = match &self.population {
            Population::Shared(c) => vec![("population".to_owned(), c)],
            Population::PerOrder(v) => {
                if v.len() != self.orders.len() {
                    return Err(field(
                        "population",
                        format!(
                            "per-order curves must match order count: got {}, expected {}",
                            v.len(),
                            self.orders.len()
                        ),
                    ));
                }
                v.iter()
                    .enumerate()
                    .map(|(i, c)| (format!("population[{i}]"), c))
                    .collect()
            }
        };
        for (path, c) in curves {
            if !(c.v1 > 0.0 && c.v0 >= c.v1 && c.v0.is_finite()) {
                return Err(field(
                    &path,
                    format!(
                        "value of time must satisfy v0 >= v1 > 0, got v0 = {}, v1 = {}",
                        c.v0, c.v1
                    ),
                ));
            }
        }
        let (n, m) = (self.orders.len(), self.modalities.len());
        for (name, mat) in [
            ("service_time", &self.service_time),
            ("beta", &self.beta),
            ("cost", &self.cost),
        ] {
            if mat.rows() != n || mat.cols() != m {
                return Err(ValidationError::Dimension {
                    name,
                    rows: mat.rows(),
                    cols: mat.cols(),
                    expected_rows: n,
                    expected_cols: m,
                });
            }
        }
        type CellRule<'a> = (&'static str, &'a Matrix, fn(f64) -> bool, &'static str);
        let cell_ok: [CellRule; 3] = [
            (
                "service_time",
                &self.service_time,
                |v| v >= 0.0 && v.is_finite(),
                "non-negative and finite",
            ),
            (
                "beta",
                &self.beta,
                |v| v > 0.0 && v <= 1.0,
                "in (0, 1]",
            ),
            (
                "cost",
                &self.cost,
                |v| v >= 0.0 && v.is_finite(),
                "non-negative and finite",
            ),
        ];
        for (name, mat, ok, requirement) in cell_ok {
            for i in 0..n {
                for j in 0..m {
                    let v = mat[(i, j)];
                    if !ok(v) {
                        return Err(ValidationError::Cell {
                            name,
                            row: i,
                            col: j,
                            value: v,
                            requirement,
                        });
                    }
                }
            }
        }
        if !(self.rho_cap > 0.0 && self.rho_cap < 1.0) {
            return Err(field(
                "rho_cap",
                format!("must lie strictly between 0 and 1, got {}", self.rho_cap),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn modality(id: &str, speed_kmh: f64, fleet_size: u32, mu: f64) -> Modality {
        Modality {
            id: id.to_owned(),
            speed_kmh,
            fleet_size,
            completion_rate: CompletionRate::PerHour(mu),
            reach_horizon_h: 1.0 / 6.0,
            cost_per_order: 10.0,
            service_scale: 1.0,
        }
    }

    fn order(id: &str, pickup: [f64; 2], dropoff: [f64; 2], rate: f64) -> Order {
        Order {
            id: id.to_owned(),
            pickup: pickup.into(),
            dropoff: dropoff.into(),
            rate,
        }
    }

    /// n identical orders across the given modalities, uniform matrices.
    fn uniform_instance(n: usize, modalities: Vec<Modality>, rate: f64) -> Instance {
        let m = modalities.len();
        let cost = Matrix::from_fn(n, m, |_, j| modalities[j].cost_per_order);
        Instance {
            orders: (0..n)
                .map(|i| order(&format!("o{i}"), [0.0, 0.0], [1920.0, 0.0], rate))
                .collect(),
            modalities,
            population: Population::Shared(PopulationCurve::linear(100.0, 10.0)),
            service_time: Matrix::filled(n, m, 0.05),
            beta: Matrix::filled(n, m, 0.5),
            cost,
            rho_cap: 0.9,
        }
    }

    /// Small random valid instance for property checks.
    fn random_instance(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Instance {
        let modalities = (0..m)
            .map(|j| Modality {
                id: format!("m{j}"),
                speed_kmh: rng.random_range(5.0..40.0),
                fleet_size: rng.random_range(5..60),
                completion_rate: CompletionRate::PerHour(rng.random_range(0.5..4.0)),
                reach_horizon_h: rng.random_range(0.05..0.3),
                cost_per_order: rng.random_range(1.0..12.0),
                service_scale: 1.0,
            })
            .collect();
        let orders = (0..n)
            .map(|i| {
                order(
                    &format!("o{i}"),
                    [rng.random_range(0.0..4500.0), rng.random_range(0.0..4500.0)],
                    [rng.random_range(0.0..4500.0), rng.random_range(0.0..4500.0)],
                    rng.random_range(0.1..2.0),
                )
            })
            .collect();
        Instance {
            orders,
            modalities,
            population: Population::Shared(PopulationCurve::linear(100.0, 10.0)),
            service_time: Matrix::from_fn(n, m, |_, _| rng.random_range(0.01..0.2)),
            beta: Matrix::from_fn(n, m, |_, _| rng.random_range(0.01..1.0)),
            cost: Matrix::from_fn(n, m, |_, _| rng.random_range(0.5..15.0)),
            rho_cap: 0.9,
        }
    }

    /// Random row-stochastic allocation.
    fn random_allocation(rng: &mut ChaCha8Rng, n: usize, m: usize) -> AllocationMatrix {
        let mut x = Matrix::zeros(n, m);
        for i in 0..n {
            let mut weights: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            x.row_mut(i).copy_from_slice(&weights);
        }
        AllocationMatrix::new(x).unwrap()
    }

    #[test]
    fn travel_time_examples() {
        let car = modality("car", 19.2, 50, 1.0);
        let drone = modality("drone", 38.4, 50, 1.0);
        let o = order("a", [0.0, 0.0], [1920.0, 0.0], 1.0);
        assert_relative_eq!(travel_time(&o, &car), 0.1, epsilon = 1e-15);
        assert_relative_eq!(travel_time(&o, &drone), 0.05, epsilon = 1e-15);
        let degenerate = order("b", [70.0, -3.0], [70.0, -3.0], 1.0);
        assert_eq!(travel_time(&degenerate, &car), 0.0);
    }

    #[test]
    fn utilization_examples() {
        // Two orders at 30/h each, 75% on the single mode: load 45 against
        // capacity 50 * 1.
        let mut inst = uniform_instance(2, vec![modality("car", 19.2, 50, 1.0)], 30.0);
        let x = AllocationMatrix::new(Matrix::filled(2, 1, 1.0)).unwrap();
        assert_relative_eq!(inst.utilization(&x, 0).unwrap(), 60.0 / 50.0);
        inst.orders[0].rate = 22.5;
        inst.orders[1].rate = 22.5;
        assert_relative_eq!(inst.utilization(&x, 0).unwrap(), 0.9, epsilon = 1e-15);

        let inst = uniform_instance(1, vec![modality("bot", 5.0, 35, 2.0)], 21.0);
        let x = AllocationMatrix::new(Matrix::filled(1, 1, 1.0)).unwrap();
        assert_relative_eq!(inst.utilization(&x, 0).unwrap(), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn utilization_zero_flow_is_zero() {
        let inst = uniform_instance(3, vec![modality("a", 10.0, 10, 1.0), modality("b", 10.0, 10, 1.0)], 1.0);
        let x = AllocationMatrix::single_mode(3, 2, 0);
        assert_eq!(inst.utilization(&x, 1).unwrap(), 0.0);
    }

    #[test]
    fn unresolved_completion_rate_is_an_error() {
        let mut inst = uniform_instance(1, vec![modality("car", 19.2, 50, 1.0)], 1.0);
        inst.modalities[0].completion_rate = CompletionRate::Estimate;
        let x = AllocationMatrix::single_mode(1, 1, 0);
        assert_eq!(
            inst.utilization(&x, 0).unwrap_err(),
            ModelError::UnresolvedCompletionRate { id: "car".into() }
        );
    }

    #[test]
    fn pickup_time_examples() {
        // k = 10 min, beta * N * (1 - rho) = 0.5 * 50 * 0.1 = 2.5.
        let inst = uniform_instance(1, vec![modality("car", 19.2, 50, 1.0)], 1.0);
        assert_relative_eq!(
            inst.pickup_time_at(0, 0, 0.9),
            (1.0 / 6.0) / 3.5,
            epsilon = 1e-15
        );
        // Saturated fleet: pickup degrades to the full reach horizon.
        assert_eq!(inst.pickup_time_at(0, 0, 1.0), 1.0 / 6.0);
        assert_eq!(inst.pickup_time_at(0, 0, 1.7), 1.0 / 6.0);
        // beta = 1, N = 9, idle fleet: expected minimum of 9 uniforms.
        let mut inst = uniform_instance(1, vec![modality("car", 19.2, 9, 1.0)], 1.0);
        inst.beta = Matrix::filled(1, 1, 1.0);
        assert_relative_eq!(
            inst.pickup_time_at(0, 0, 0.0),
            (1.0 / 6.0) / 10.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn snapshot_matches_hand_computation() {
        // Single order at 45/h filling a 50-courier fleet to rho = 0.9;
        // s = 0.05, travel = 1.92 km / 19.2 km/h = 0.1, pickup = (1/6)/3.5.
        let inst = uniform_instance(1, vec![modality("car", 19.2, 50, 1.0)], 45.0);
        let x = AllocationMatrix::single_mode(1, 1, 0);
        let snap = inst.latency_snapshot(&x).unwrap();
        assert_relative_eq!(snap.rho[0], 0.9, epsilon = 1e-15);
        assert_relative_eq!(
            snap.ell[(0, 0)],
            0.05 + 0.1 + (1.0 / 6.0) / 3.5,
            epsilon = 1e-15
        );
        let parts = snap.components.as_ref().unwrap();
        assert_eq!(parts.service[(0, 0)], 0.05);
        assert_relative_eq!(parts.travel[(0, 0)], 0.1, epsilon = 1e-15);
    }

    #[test]
    fn snapshot_decomposition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..5);
            let inst = random_instance(&mut rng, n, m);
            let x = random_allocation(&mut rng, n, m);
            let snap = inst.latency_snapshot(&x).unwrap();
            let parts = snap.components.as_ref().unwrap();
            for i in 0..n {
                for j in 0..m {
                    let sum = parts.service[(i, j)] + parts.travel[(i, j)] + parts.pickup[(i, j)];
                    assert_eq!(snap.ell[(i, j)], sum, "cell ({i}, {j})");
                    assert!(snap.ell[(i, j)] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn congestion_raises_pickup_times() {
        // Push more flow onto mode 0 and watch rho rise and pickup times
        // (weakly) rise with it.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..6);
            let inst = random_instance(&mut rng, n, 2);
            let share_lo = rng.random_range(0.0..0.5);
            let share_hi = rng.random_range(share_lo..1.0);
            let alloc = |share: f64| {
                AllocationMatrix::new(Matrix::from_fn(n, 2, |_, j| {
                    if j == 0 {
                        share
                    } else {
                        1.0 - share
                    }
                }))
                .unwrap()
            };
            let (x_lo, x_hi) = (alloc(share_lo), alloc(share_hi));
            let rho_lo = inst.utilization(&x_lo, 0).unwrap();
            let rho_hi = inst.utilization(&x_hi, 0).unwrap();
            if share_hi > share_lo {
                assert!(rho_hi > rho_lo);
            }
            if rho_hi < 1.0 {
                for i in 0..n {
                    assert!(
                        inst.pickup_time_at(i, 0, rho_hi) >= inst.pickup_time_at(i, 0, rho_lo)
                    );
                }
            }
        }
    }

    #[test]
    fn total_cost_fleet_scenario() {
        // 505 orders at 0.42/h, all on cars at $10/order.
        let inst = uniform_instance(505, vec![modality("car", 19.2, 100, 3.0)], 0.42);
        let x = AllocationMatrix::single_mode(505, 1, 0);
        assert_relative_eq!(inst.total_cost(&x), 2121.0, epsilon = 1e-9);
    }

    #[test]
    fn total_cost_split_order() {
        let mut inst = uniform_instance(
            1,
            vec![modality("car", 19.2, 50, 1.0), modality("drone", 38.4, 50, 1.0)],
            1.0,
        );
        inst.cost = Matrix::from_rows(vec![vec![10.0, 5.0]]).unwrap();
        let x = AllocationMatrix::new(Matrix::from_rows(vec![vec![0.5, 0.5]]).unwrap()).unwrap();
        assert_relative_eq!(inst.total_cost(&x), 7.5, epsilon = 1e-15);
    }

    #[test]
    fn total_cost_is_linear_in_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(2..5);
            let inst = random_instance(&mut rng, n, m);
            let x1 = random_allocation(&mut rng, n, m);
            let x2 = random_allocation(&mut rng, n, m);
            let lambda: f64 = rng.random_range(0.0..1.0);
            let blend = AllocationMatrix::new(Matrix::from_fn(n, m, |i, j| {
                lambda * x1[(i, j)] + (1.0 - lambda) * x2[(i, j)]
            }))
            .unwrap();
            assert_relative_eq!(
                inst.total_cost(&blend),
                lambda * inst.total_cost(&x1) + (1.0 - lambda) * inst.total_cost(&x2),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn expected_latency_single_cell_and_uniform() {
        let inst = uniform_instance(1, vec![modality("car", 19.2, 50, 1.0)], 45.0);
        let x = AllocationMatrix::single_mode(1, 1, 0);
        let snap = inst.latency_snapshot(&x).unwrap();
        assert_relative_eq!(
            inst.expected_latency(&x).unwrap(),
            snap.ell[(0, 0)],
            epsilon = 1e-15
        );
    }

    #[test]
    fn expected_latency_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..30 {
            let n = rng.random_range(1..6);
            let m = rng.random_range(1..5);
            let inst = random_instance(&mut rng, n, m);
            let x = random_allocation(&mut rng, n, m);
            let snap = inst.latency_snapshot(&x).unwrap();
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..m {
                    acc += snap.ell[(i, j)] * x[(i, j)];
                }
            }
            assert_relative_eq!(
                inst.expected_latency(&x).unwrap(),
                acc / n as f64,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn allocation_clips_tiny_bound_violations() {
        let x = Matrix::from_rows(vec![vec![-5e-13, 1.0 + 5e-13]]).unwrap();
        let a = AllocationMatrix::new(x).unwrap();
        assert_eq!(a[(0, 0)], 0.0);
        assert_eq!(a[(0, 1)], 1.0);
    }

    #[test]
    fn allocation_rejects_real_violations() {
        let bad_cell = Matrix::from_rows(vec![vec![-0.2, 1.2]]).unwrap();
        assert!(matches!(
            AllocationMatrix::new(bad_cell),
            Err(ValidationError::Cell { .. })
        ));
        let bad_sum = Matrix::from_rows(vec![vec![0.4, 0.4]]).unwrap();
        assert!(matches!(
            AllocationMatrix::new(bad_sum),
            Err(ValidationError::RowSum { row: 0, .. })
        ));
    }

    #[test]
    fn validate_accepts_good_and_flags_bad() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let inst = random_instance(&mut rng, 3, 2);
        inst.validate().unwrap();

        let mut bad = inst.clone();
        bad.beta[(1, 1)] = 0.0;
        let err = bad.validate().unwrap_err();
        assert_eq!(
            err.to_string(),
            "beta[1][1] = 0: must be in (0, 1]"
        );

        let mut bad = inst.clone();
        bad.rho_cap = 1.0;
        assert!(matches!(bad.validate(), Err(ValidationError::Field { .. })));

        let mut bad = inst.clone();
        bad.cost = Matrix::zeros(3, 3);
        assert!(matches!(
            bad.validate(),
            Err(ValidationError::Dimension { name: "cost", .. })
        ));

        let mut bad = inst.clone();
        bad.population = Population::Shared(PopulationCurve::linear(10.0, 100.0));
        assert!(bad.validate().is_err());

        let mut bad = inst;
        bad.population = Population::PerOrder(vec![PopulationCurve::linear(50.0, 5.0); 2]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn value_of_time_is_linear_and_positive() {
        let c = PopulationCurve::linear(100.0, 10.0);
        assert_eq!(c.value_of_time(0.0), 100.0);
        assert_eq!(c.value_of_time(1.0), 10.0);
        assert_relative_eq!(c.value_of_time(0.5), 55.0);
        assert_relative_eq!(c.time_per_dollar(0.5), 1.0 / 55.0);
    }

    #[test]
    fn completion_rate_serde() {
        let concrete: CompletionRate = serde_json::from_str("2.5").unwrap();
        assert_eq!(concrete, CompletionRate::PerHour(2.5));
        let marker: CompletionRate = serde_json::from_str("\"estimate\"").unwrap();
        assert_eq!(marker, CompletionRate::Estimate);
        assert!(serde_json::from_str::<CompletionRate>("\"auto\"").is_err());
        assert_eq!(serde_json::to_string(&marker).unwrap(), "\"estimate\"");
    }

    #[test]
    fn population_serde_shared_and_per_order() {
        let shared: Population =
            serde_json::from_str(r#"{"v0": 100.0, "v1": 10.0, "shape": "linear"}"#).unwrap();
        assert_eq!(
            shared,
            Population::Shared(PopulationCurve::linear(100.0, 10.0))
        );
        let per_order: Population =
            serde_json::from_str(r#"[{"v0": 100.0, "v1": 10.0}, {"v0": 50.0, "v1": 50.0}]"#)
                .unwrap();
        assert_eq!(per_order.curve(1).v0, 50.0);
    }
}
