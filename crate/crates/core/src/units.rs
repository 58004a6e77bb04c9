//! Unit conversions.
//!
//! Internally everything is hours / kilometers / dollars; input files use
//! meters for coordinates and seconds for recorded service durations, and
//! reports print minutes. Funneling every conversion through here keeps the
//! factors out of the formulas.

pub const METERS_PER_KM: f64 = 1000.0;
pub const MINUTES_PER_HOUR: f64 = 60.0;
pub const SECONDS_PER_HOUR: f64 = 3600.0;

pub fn meters_to_km(m: f64) -> f64 {
    m / METERS_PER_KM
}

pub fn km_to_meters(km: f64) -> f64 {
    km * METERS_PER_KM
}

pub fn hours_to_minutes(h: f64) -> f64 {
    h * MINUTES_PER_HOUR
}

pub fn minutes_to_hours(min: f64) -> f64 {
    min / MINUTES_PER_HOUR
}

pub fn seconds_to_hours(s: f64) -> f64 {
    s / SECONDS_PER_HOUR
}

pub fn hours_to_seconds(h: f64) -> f64 {
    h * SECONDS_PER_HOUR
}
