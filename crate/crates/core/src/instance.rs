//! Instance files, CSV ingestion, and synthetic scenario generation.
//!
//! One validated JSON document (`"schema": 1`) holds everything a solve
//! needs: orders, modalities, the per-cell matrices, and the config
//! block. CSV adapters turn delivery-dataset exports (`orders.csv`,
//! `couriers.csv`) into the same representation, and the generator
//! synthesizes city-scale scenarios from a seed.

use crate::model::{
    CompletionRate, Instance, Modality, Order, Point, Population, PopulationCurve,
    ValidationError,
};
use crate::optimizer::SolveResult;
use crate::queueing::{estimate_completion_rate, QueueingError};
use crate::units::seconds_to_hours;
use crate::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Version tag written to (and required of) instance files.
pub const SCHEMA_VERSION: u32 = 1;

/// Synthetic city: orders are drawn uniformly from a square with this
/// side length, which puts mean trip distances near real-world
/// downtown-delivery scales.
const CITY_SIDE_M: f64 = 4500.0;
/// Synthetic baseline service times per endpoint, seconds.
const SERVICE_RANGE_S: (f64, f64) = (120.0, 360.0);

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("{path}: file has schema version {got}, this build reads version {expected}")]
    SchemaVersion { path: String, got: u32, expected: u32 },
    #[error("{path}: record {row}: {detail}")]
    Csv {
        path: String,
        row: usize,
        detail: String,
    },
    #[error("couriers reference modality {id:?}, which the generator spec does not define")]
    UnknownModality { id: String },
    #[error("generator spec: {detail}")]
    Spec { detail: String },
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Queueing(#[from] QueueingError),
}

/// One order as found in a raw dataset, before matrix assembly.
/// Coordinates are meters; service times are hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawOrderRecord {
    pub id: String,
    pub restaurant: Point,
    pub customer: Point,
    pub pickup_service_h: f64,
    pub dropoff_service_h: f64,
}

/// Positions of one modality's whole fleet (length = fleet size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourierSample {
    pub modality: String,
    pub coordinates: Vec<Point>,
}

/// Where a generated fleet idles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CourierPlacement {
    /// Positions drawn from the restaurant locations themselves.
    AtRestaurants,
    /// Uniform over the bounding rectangle of the restaurants.
    UniformBoundingBox,
    /// Uniform over a box centered at the mean restaurant location,
    /// with each side equal to that axis' standard deviation.
    CenteredStdBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub id: String,
    /// Fleet size; a zero-count modality is omitted from the instance.
    pub count: u32,
    pub speed_kmh: f64,
    pub service_scale: f64,
    pub cost_per_order: f64,
    pub placement: CourierPlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub modalities: Vec<ModalitySpec>,
    /// Pickup reach horizon k, hours.
    pub reach_horizon_h: f64,
    pub rho_cap: f64,
    pub population: PopulationCurve,
    /// Demand rate given to every order, orders/hour.
    pub order_rate: f64,
}

impl GeneratorSpec {
    /// The bundled car/drone/robot scenario family: 19.2 km/h cars at
    /// $10 with full-length service stops; 38.4 km/h drones and
    /// 5.76 km/h sidewalk robots at $5 with service stops scaled to
    /// 0.2 of the car baseline; 10-minute reach horizon; 0.9
    /// utilization cap; linear value-of-time from $100/h down to $10/h;
    /// 0.42 orders/hour per order.
    pub fn standard_mix(seed: u64, cars: u32, drones: u32, robots: u32) -> Self {
        GeneratorSpec {
            seed,
            modalities: vec![
                ModalitySpec {
                    id: "car".into(),
                    count: cars,
                    speed_kmh: 19.2,
                    service_scale: 1.0,
                    cost_per_order: 10.0,
                    placement: CourierPlacement::AtRestaurants,
                },
                ModalitySpec {
                    id: "drone".into(),
                    count: drones,
                    speed_kmh: 38.4,
                    service_scale: 0.2,
                    cost_per_order: 5.0,
                    placement: CourierPlacement::UniformBoundingBox,
                },
                ModalitySpec {
                    id: "robot".into(),
                    count: robots,
                    speed_kmh: 5.76,
                    service_scale: 0.2,
                    cost_per_order: 5.0,
                    placement: CourierPlacement::CenteredStdBox,
                },
            ],
            reach_horizon_h: 10.0 / 60.0,
            rho_cap: 0.9,
            population: PopulationCurve::linear(100.0, 10.0),
            order_rate: 0.42,
        }
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let spec_err = |detail: String| Err(InstanceError::Spec { detail });
        if self.modalities.is_empty() {
            return spec_err("no modalities defined".into());
        }
        if self.modalities.iter().all(|m| m.count == 0) {
            return spec_err("at least one modality needs count >= 1".into());
        }
        for m in &self.modalities {
            if m.id.is_empty() {
                return spec_err("modality id must be non-empty".into());
            }
            if !(m.speed_kmh > 0.0 && m.speed_kmh.is_finite()) {
                return spec_err(format!("modality {}: speed must be positive", m.id));
            }
            if !(m.service_scale >= 0.0 && m.service_scale.is_finite()) {
                return spec_err(format!("modality {}: service_scale must be >= 0", m.id));
            }
            if !(m.cost_per_order >= 0.0 && m.cost_per_order.is_finite()) {
                return spec_err(format!("modality {}: cost must be >= 0", m.id));
            }
        }
        let mut ids: Vec<&str> = self.modalities.iter().map(|m| m.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.modalities.len() {
            return spec_err("modality ids must be distinct".into());
        }
        if !(self.reach_horizon_h > 0.0 && self.reach_horizon_h.is_finite()) {
            return spec_err("reach horizon must be positive".into());
        }
        if !(self.rho_cap > 0.0 && self.rho_cap < 1.0) {
            return spec_err(format!("rho_cap must lie in (0, 1), got {}", self.rho_cap));
        }
        if !(self.population.v1 > 0.0 && self.population.v0 >= self.population.v1) {
            return spec_err("population curve needs v0 >= v1 > 0".into());
        }
        if !(self.order_rate > 0.0 && self.order_rate.is_finite()) {
            return spec_err("order rate must be positive".into());
        }
        Ok(())
    }
}

/// Orders fed to the generator: either a raw dataset or a synthetic
/// count drawn from the built-in city model.
#[derive(Debug, Clone)]
pub enum OrderSource {
    Synthetic { orders: usize },
    Records(Vec<RawOrderRecord>),
}

// ---------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct InstanceFile {
    schema: u32,
    #[serde(flatten)]
    instance: Instance,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

/// Parses, resolves `"estimate"` completion rates, and fully validates.
pub fn load_instance(path: &Path) -> Result<Instance, InstanceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path_str(path),
        source,
    })?;
    let parse_err = |e: serde_json::Error| InstanceError::Parse {
        path: path_str(path),
        detail: e.to_string(),
    };
    // Check the version tag before insisting on the full layout, so a
    // future-format file gets a version message rather than a field one.
    #[derive(Deserialize)]
    struct SchemaProbe {
        schema: u32,
    }
    let probe: SchemaProbe = serde_json::from_str(&text).map_err(parse_err)?;
    if probe.schema != SCHEMA_VERSION {
        return Err(InstanceError::SchemaVersion {
            path: path_str(path),
            got: probe.schema,
            expected: SCHEMA_VERSION,
        });
    }
    let file: InstanceFile = serde_json::from_str(&text).map_err(parse_err)?;
    let instance = resolve_completion_rates(file.instance)?;
    instance.validate()?;
    Ok(instance)
}

/// Writes the versioned JSON document (deterministic bytes).
pub fn save_instance(path: &Path, instance: &Instance) -> Result<(), InstanceError> {
    let file = InstanceFile {
        schema: SCHEMA_VERSION,
        instance: instance.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("instance serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| InstanceError::Io {
        path: path_str(path),
        source,
    })
}

/// Reads a solve result (with its embedded instance) back from disk.
pub fn load_result(path: &Path) -> Result<SolveResult, InstanceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path_str(path),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| InstanceError::Parse {
        path: path_str(path),
        detail: e.to_string(),
    })
}

pub fn save_result(path: &Path, result: &SolveResult) -> Result<(), InstanceError> {
    let mut text = serde_json::to_string_pretty(result).expect("result serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| InstanceError::Io {
        path: path_str(path),
        source,
    })
}

/// Replaces every `"estimate"` completion rate with the idle-fleet
/// service-rate estimate.
fn resolve_completion_rates(mut instance: Instance) -> Result<Instance, InstanceError> {
    for j in 0..instance.n_modalities() {
        if instance.modalities[j].completion_rate == CompletionRate::Estimate {
            let mu = estimate_completion_rate(&instance, j)?;
            instance.modalities[j].completion_rate = CompletionRate::PerHour(mu);
        }
    }
    Ok(instance)
}

// ---------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------

/// Fraction of the sampled fleet whose travel time to the order's
/// restaurant is at most the reach horizon, floored at half a courier
/// (`1/(2N)`) so the result stays in (0, 1] even when nobody is close.
pub fn compute_beta(
    order: &RawOrderRecord,
    sample: &CourierSample,
    speed_kmh: f64,
    reach_horizon_h: f64,
) -> f64 {
    let fleet = sample.coordinates.len();
    let within = sample
        .coordinates
        .iter()
        .filter(|c| c.distance_m(order.restaurant) / 1000.0 / speed_kmh <= reach_horizon_h)
        .count();
    let fraction = within as f64 / fleet as f64;
    fraction.max(1.0 / (2.0 * fleet as f64))
}

fn mean_and_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn uniform_or_point(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws idle positions for every non-empty fleet in the spec, using
/// each modality's placement rule over the given restaurant locations.
pub fn sample_couriers(
    spec: &GeneratorSpec,
    records: &[RawOrderRecord],
    rng: &mut ChaCha8Rng,
) -> Vec<CourierSample> {
    let restaurants: Vec<Point> = records.iter().map(|r| r.restaurant).collect();
    let xs = restaurants.iter().map(|p| p.x);
    let ys = restaurants.iter().map(|p| p.y);
    let (min_x, max_x) = (
        xs.clone().fold(f64::INFINITY, f64::min),
        xs.clone().fold(f64::NEG_INFINITY, f64::max),
    );
    let (min_y, max_y) = (
        ys.clone().fold(f64::INFINITY, f64::min),
        ys.clone().fold(f64::NEG_INFINITY, f64::max),
    );
    let (mean_x, std_x) = mean_and_std(xs);
    let (mean_y, std_y) = mean_and_std(ys);

    spec.modalities
        .iter()
        .filter(|m| m.count >= 1)
        .map(|m| {
            let coordinates = (0..m.count)
                .map(|_| match m.placement {
                    CourierPlacement::AtRestaurants => {
                        restaurants[rng.random_range(0..restaurants.len())]
                    }
                    CourierPlacement::UniformBoundingBox => Point {
                        x: uniform_or_point(rng, min_x, max_x),
                        y: uniform_or_point(rng, min_y, max_y),
                    },
                    CourierPlacement::CenteredStdBox => Point {
                        x: uniform_or_point(rng, mean_x - std_x / 2.0, mean_x + std_x / 2.0),
                        y: uniform_or_point(rng, mean_y - std_y / 2.0, mean_y + std_y / 2.0),
                    },
                })
                .collect();
            CourierSample {
                modality: m.id.clone(),
                coordinates,
            }
        })
        .collect()
}

fn synthesize_orders(rng: &mut ChaCha8Rng, count: usize) -> Vec<RawOrderRecord> {
    let width = count.to_string().len().max(3);
    (0..count)
        .map(|i| RawOrderRecord {
            id: format!("o{i:0width$}"),
            restaurant: Point {
                x: rng.random_range(0.0..CITY_SIDE_M),
                y: rng.random_range(0.0..CITY_SIDE_M),
            },
            customer: Point {
                x: rng.random_range(0.0..CITY_SIDE_M),
                y: rng.random_range(0.0..CITY_SIDE_M),
            },
            pickup_service_h: seconds_to_hours(rng.random_range(SERVICE_RANGE_S.0..SERVICE_RANGE_S.1)),
            dropoff_service_h: seconds_to_hours(
                rng.random_range(SERVICE_RANGE_S.0..SERVICE_RANGE_S.1),
            ),
        })
        .collect()
}

/// Builds a validated instance from explicit orders and courier
/// positions: service times scaled per modality, β from reach
/// counting, costs and rates broadcast, and any unspecified completion
/// rate estimated from the idle-fleet latencies.
pub fn assemble_instance(
    spec: &GeneratorSpec,
    records: &[RawOrderRecord],
    samples: &[CourierSample],
) -> Result<Instance, InstanceError> {
    spec.validate()?;
    if records.is_empty() {
        return Err(InstanceError::Spec {
            detail: "no orders given".into(),
        });
    }
    let active: Vec<&ModalitySpec> = spec
        .modalities
        .iter()
        .filter(|m| m.count >= 1 || samples.iter().any(|s| s.modality == m.id))
        .collect();
    let mut modalities = Vec::with_capacity(active.len());
    let mut fleet_samples = Vec::with_capacity(active.len());
    for m in &active {
        let sample = samples
            .iter()
            .find(|s| s.modality == m.id)
            .ok_or_else(|| InstanceError::Spec {
                detail: format!("no courier sample for modality {}", m.id),
            })?;
        modalities.push(Modality {
            id: m.id.clone(),
            speed_kmh: m.speed_kmh,
            fleet_size: sample.coordinates.len() as u32,
            completion_rate: CompletionRate::Estimate,
            reach_horizon_h: spec.reach_horizon_h,
            cost_per_order: m.cost_per_order,
            service_scale: m.service_scale,
        });
        fleet_samples.push(sample);
    }
    for sample in samples {
        if !active.iter().any(|m| m.id == sample.modality) {
            return Err(InstanceError::UnknownModality {
                id: sample.modality.clone(),
            });
        }
    }

    let (n, m) = (records.len(), modalities.len());
    let orders: Vec<Order> = records
        .iter()
        .map(|r| Order {
            id: r.id.clone(),
            pickup: r.restaurant,
            dropoff: r.customer,
            rate: spec.order_rate,
        })
        .collect();
    let service_time = Matrix::from_fn(n, m, |i, j| {
        (records[i].pickup_service_h + records[i].dropoff_service_h) * active[j].service_scale
    });
    let beta = Matrix::from_fn(n, m, |i, j| {
        compute_beta(
            &records[i],
            fleet_samples[j],
            active[j].speed_kmh,
            spec.reach_horizon_h,
        )
    });
    let cost = Matrix::from_fn(n, m, |_, j| active[j].cost_per_order);

    let instance = Instance {
        orders,
        modalities,
        population: Population::Shared(spec.population),
        service_time,
        beta,
        cost,
        rho_cap: spec.rho_cap,
    };
    let instance = resolve_completion_rates(instance)?;
    instance.validate()?;
    Ok(instance)
}

/// Generates a full instance from a seed: synthesizes or accepts the
/// orders, places the fleets, and assembles. Deterministic given the
/// spec.
pub fn generate_instance(
    spec: &GeneratorSpec,
    source: OrderSource,
) -> Result<Instance, InstanceError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let records = match source {
        OrderSource::Synthetic { orders } => {
            if orders == 0 {
                return Err(InstanceError::Spec {
                    detail: "synthetic order count must be >= 1".into(),
                });
            }
            synthesize_orders(&mut rng, orders)
        }
        OrderSource::Records(records) => records,
    };
    let samples = sample_couriers(spec, &records, &mut rng);
    assemble_instance(spec, &records, &samples)
}

// ---------------------------------------------------------------------
// CSV adapters
// ---------------------------------------------------------------------

#[derive(Deserialize)]
struct OrderRow {
    id: String,
    pickup_x_m: f64,
    pickup_y_m: f64,
    dropoff_x_m: f64,
    dropoff_y_m: f64,
    pickup_service_s: f64,
    dropoff_service_s: f64,
}

#[derive(Deserialize)]
struct CourierRow {
    modality: String,
    x_m: f64,
    y_m: f64,
}

fn csv_error(path: &Path, row: usize, e: csv::Error) -> InstanceError {
    InstanceError::Csv {
        path: path_str(path),
        row,
        detail: e.to_string(),
    }
}

/// Reads `orders.csv` (coordinates in meters, service times in
/// seconds); extra columns — placement metadata and the like — are
/// ignored.
pub fn read_orders_csv(path: &Path) -> Result<Vec<RawOrderRecord>, InstanceError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let mut records = Vec::new();
    for (idx, row) in reader.deserialize::<OrderRow>().enumerate() {
        let row = row.map_err(|e| csv_error(path, idx + 1, e))?;
        records.push(RawOrderRecord {
            id: row.id,
            restaurant: Point {
                x: row.pickup_x_m,
                y: row.pickup_y_m,
            },
            customer: Point {
                x: row.dropoff_x_m,
                y: row.dropoff_y_m,
            },
            pickup_service_h: seconds_to_hours(row.pickup_service_s),
            dropoff_service_h: seconds_to_hours(row.dropoff_service_s),
        });
    }
    Ok(records)
}

/// Reads `couriers.csv` and groups rows into one sample per modality,
/// in order of first appearance.
pub fn read_couriers_csv(path: &Path) -> Result<Vec<CourierSample>, InstanceError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, 0, e))?;
    let mut samples: Vec<CourierSample> = Vec::new();
    for (idx, row) in reader.deserialize::<CourierRow>().enumerate() {
        let row = row.map_err(|e| csv_error(path, idx + 1, e))?;
        let point = Point {
            x: row.x_m,
            y: row.y_m,
        };
        match samples.iter_mut().find(|s| s.modality == row.modality) {
            Some(sample) => sample.coordinates.push(point),
            None => samples.push(CourierSample {
                modality: row.modality,
                coordinates: vec![point],
            }),
        }
    }
    Ok(samples)
}

/// Builds an instance from dataset CSVs. Fleet sizes come from the
/// courier file; modality parameters come from the spec, which must
/// define every modality the courier file mentions.
pub fn convert_csv(
    spec: &GeneratorSpec,
    orders_csv: &Path,
    couriers_csv: &Path,
) -> Result<Instance, InstanceError> {
    let records = read_orders_csv(orders_csv)?;
    let samples = read_couriers_csv(couriers_csv)?;
    if records.is_empty() {
        return Err(InstanceError::Spec {
            detail: format!("{}: no order rows", path_str(orders_csv)),
        });
    }
    if samples.is_empty() {
        return Err(InstanceError::Spec {
            detail: format!("{}: no courier rows", path_str(couriers_csv)),
        });
    }
    // Only modalities present in the courier file become fleets.
    let mut narrowed = spec.clone();
    for m in &mut narrowed.modalities {
        m.count = samples
            .iter()
            .find(|s| s.modality == m.id)
            .map_or(0, |s| s.coordinates.len() as u32);
    }
    for s in &samples {
        if !narrowed.modalities.iter().any(|m| m.id == s.modality) {
            return Err(InstanceError::UnknownModality {
                id: s.modality.clone(),
            });
        }
    }
    assemble_instance(&narrowed, &records, &samples)
}
