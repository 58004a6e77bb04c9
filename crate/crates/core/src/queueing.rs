//! M/M/c waiting-time utilities.
//!
//! Each modality's fleet is approximately an M/M/c queue: orders arrive at
//! rate `lambda`, each of `c` couriers completes work at rate `mu`. These
//! helpers quantify how quickly queueing delay explodes as utilization
//! `rho = lambda / (c * mu)` approaches 1 — the justification for capping
//! `rho` in the optimizer instead of modeling time spent waiting for a
//! free courier: under a sensible cap the queue wait is negligible next to
//! service and travel.
//!
//! Also home to [`estimate_completion_rate`], which backs the
//! `"estimate"` marker on a modality's completion rate: `mu` is the
//! reciprocal of the mean click-to-door latency across orders, evaluated
//! with an idle fleet.

use crate::model::Instance;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueueingError {
    #[error("M/M/c parameters must be positive: servers {servers}, lambda {lambda}, mu {mu}")]
    InvalidParameters { servers: u32, lambda: f64, mu: f64 },
    #[error("utilization {rho} >= 1: waits are unbounded")]
    Unstable { rho: f64 },
    #[error("modality {id}: mean latency {mean} must be positive to estimate a completion rate")]
    DegenerateLatency { id: String, mean: f64 },
}

/// An M/M/c queue: `servers` identical servers, Poisson arrivals at
/// `arrival_rate`, exponential service at `service_rate` per server (both
/// per hour).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MMcSystem {
    pub servers: u32,
    pub arrival_rate: f64,
    pub service_rate: f64,
}

/// Expected waits, in hours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanWaits {
    /// Time spent queueing for a free server.
    pub queue_h: f64,
    /// Total time in the system (queue plus service).
    pub system_h: f64,
}

impl MMcSystem {
    pub fn new(servers: u32, arrival_rate: f64, service_rate: f64) -> Self {
        MMcSystem {
            servers,
            arrival_rate,
            service_rate,
        }
    }

    /// System with `service_rate` chosen to hit the given utilization.
    pub fn from_utilization(servers: u32, arrival_rate: f64, rho: f64) -> Self {
        MMcSystem {
            servers,
            arrival_rate,
            service_rate: arrival_rate / (servers as f64 * rho),
        }
    }

    /// Offered load `a = lambda / mu`, in servers' worth of work.
    pub fn offered_load(&self) -> f64 {
        self.arrival_rate / self.service_rate
    }

    /// `rho = lambda / (c * mu)`.
    pub fn utilization(&self) -> f64 {
        self.offered_load() / self.servers as f64
    }

    fn check(&self) -> Result<f64, QueueingError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if self.servers < 1 || !positive(self.arrival_rate) || !positive(self.service_rate) {
            return Err(QueueingError::InvalidParameters {
                servers: self.servers,
                lambda: self.arrival_rate,
                mu: self.service_rate,
            });
        }
        let rho = self.utilization();
        if rho >= 1.0 {
            return Err(QueueingError::Unstable { rho });
        }
        Ok(rho)
    }

    /// Erlang-C probability that an arriving order finds every server
    /// busy and must wait.
    ///
    /// Computed through the Erlang-B recurrence `B_n = a * B_{n-1} / (n +
    /// a * B_{n-1})` and the conversion `C = B / (1 - rho + rho * B)`,
    /// which stays in `(0, 1]` throughout — no factorials, no overflow
    /// even for hundreds of servers.
    pub fn erlang_c(&self) -> Result<f64, QueueingError> {
        let rho = self.check()?;
        let a = self.offered_load();
        let mut blocking = 1.0;
        for n in 1..=self.servers {
            blocking = a * blocking / (n as f64 + a * blocking);
        }
        Ok(blocking / (1.0 - rho + rho * blocking))
    }

    /// Expected time in queue and in system.
    pub fn mean_waits(&self) -> Result<MeanWaits, QueueingError> {
        self.check()?;
        let p_wait = self.erlang_c()?;
        let queue_h =
            p_wait / (self.servers as f64 * self.service_rate - self.arrival_rate);
        Ok(MeanWaits {
            queue_h,
            system_h: queue_h + 1.0 / self.service_rate,
        })
    }
}

/// Completion rate implied by an instance for modality `j`: the
/// reciprocal of the mean latency over orders, with pickup times evaluated
/// at utilization `rho`.
///
/// Exposed with an explicit `rho` because the estimate is inherently
/// circular (latency depends on utilization, which depends on the rate
/// being estimated); callers pick the convention instead of iterating to
/// a fixed point.
pub fn estimate_completion_rate_at(
    instance: &Instance,
    j: usize,
    rho: f64,
) -> Result<f64, QueueingError> {
    let n = instance.n_orders();
    let mut total = 0.0;
    for i in 0..n {
        total += instance.service_time[(i, j)]
            + instance.travel_time(i, j)
            + instance.pickup_time_at(i, j, rho);
    }
    let mean = total / n as f64;
    if mean.is_nan() || mean <= 0.0 {
        return Err(QueueingError::DegenerateLatency {
            id: instance.modalities[j].id.clone(),
            mean,
        });
    }
    Ok(1.0 / mean)
}

/// [`estimate_completion_rate_at`] with an idle fleet (`rho = 0`), the
/// default convention for resolving `"estimate"` markers.
pub fn estimate_completion_rate(instance: &Instance, j: usize) -> Result<f64, QueueingError> {
    estimate_completion_rate_at(instance, j, 0.0)
}
