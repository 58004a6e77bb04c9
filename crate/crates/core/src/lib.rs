//! Multi-modal delivery allocation and equilibrium pricing.
//!
//! Given a set of delivery orders, a fleet of transportation modalities
//! (e.g. cars, drones, sidewalk robots), and a population of users that
//! trade off price against delivery time, this crate
//!
//! - models click-to-door latency per order and modality, with a
//!   congestion-dependent pickup component driven by fleet utilization
//!   ([`model`]),
//! - solves for the allocation of orders across modalities that minimizes
//!   expected latency under per-modality utilization caps ([`optimizer`]),
//! - derives, in closed form, the per-order per-modality prices that make
//!   that allocation a stable choice for every user in the population
//!   ([`pricing`]), and
//! - verifies the stability claim by brute force over a user grid
//!   ([`equilibrium`]).
//!
//! Supporting modules: [`queueing`] (M/M/c waiting-time utilities that
//! justify the utilization cap), [`instance`] (file formats and synthetic
//! scenario generation), and [`report`] (per-modality summary tables).
//!
//! Conventions: all times are in hours, money in dollars, distances in
//! kilometers; coordinates in instance files are planar meters.

pub mod equilibrium;
pub mod instance;
pub mod matrix;
pub mod model;
pub mod optimizer;
pub mod pricing;
pub mod queueing;
pub mod report;
pub mod units;

pub use matrix::Matrix;
pub use model::{
    AllocationMatrix, Instance, LatencySnapshot, Modality, Order, Point, Population,
    PopulationCurve,
};
pub use optimizer::{optimize_allocation, SolveResult, SolverConfig};
pub use pricing::PriceMatrix;
