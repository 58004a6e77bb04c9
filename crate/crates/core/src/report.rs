//! Summary tables for solved allocations.
//!
//! Condenses a [`SolveResult`] into the per-modality figures an operator
//! cares about — share of demand, operating cost, latency, price,
//! distance — plus a demand-weighted total column and the break-even
//! base price ("minimum order price"). Latency and price are
//! flow-weighted within each modality; the total column is
//! demand-weighted across everything.

use crate::model::Instance;
use crate::optimizer::SolveResult;
use crate::pricing::BasePrice;
use crate::units::hours_to_minutes;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("summary csv: record {row}: {detail}")]
    Csv { row: usize, detail: String },
    #[error("summary csv: missing {what} row")]
    Missing { what: &'static str },
    #[error("summary json: {detail}")]
    Json { detail: String },
    #[error("unknown report format {got:?}; expected table, csv, or json")]
    UnknownFormat { got: String },
}

/// One column of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: String,
    /// Percent of total demand-weighted flow served.
    pub order_share_pct: f64,
    /// Operating cost incurred on this modality, dollars/hour.
    pub cost_per_hour: f64,
    /// Flow-weighted mean click-to-door latency, minutes.
    pub mean_latency_min: f64,
    /// Flow-weighted mean price paid, dollars.
    pub mean_price: f64,
    /// Flow-weighted mean trip distance, km.
    pub mean_distance_km: f64,
}

impl ModalitySummary {
    fn zeroed(modality: &str) -> Self {
        ModalitySummary {
            modality: modality.into(),
            order_share_pct: 0.0,
            cost_per_hour: 0.0,
            mean_latency_min: 0.0,
            mean_price: 0.0,
            mean_distance_km: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveSummary {
    /// One column per modality, in instance order.
    pub modalities: Vec<ModalitySummary>,
    /// Demand-weighted aggregate across all modalities.
    pub total: ModalitySummary,
    pub base_price: BasePrice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Table,
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(ReportError::UnknownFormat { got: other.into() }),
        }
    }
}

/// Aggregates the result into per-modality and total columns.
pub fn summarize(instance: &Instance, result: &SolveResult) -> SolveSummary {
    let (n, m) = (instance.n_orders(), instance.n_modalities());
    let total_rate: f64 = instance.orders.iter().map(|o| o.rate).sum();

    let mut columns = Vec::with_capacity(m);
    for j in 0..m {
        let mut flow = 0.0;
        let mut cost = 0.0;
        let mut latency = 0.0;
        let mut price = 0.0;
        let mut distance = 0.0;
        for i in 0..n {
            let w = instance.orders[i].rate * result.x[(i, j)];
            flow += w;
            cost += instance.cost[(i, j)] * w;
            latency += result.snapshot.ell[(i, j)] * w;
            price += result.prices.tau[(i, j)] * w;
            distance += instance.orders[i].distance_km() * w;
        }
        let per_flow = |v: f64| if flow > 0.0 { v / flow } else { 0.0 };
        columns.push(ModalitySummary {
            modality: instance.modalities[j].id.clone(),
            order_share_pct: 100.0 * flow / total_rate,
            cost_per_hour: cost,
            mean_latency_min: hours_to_minutes(per_flow(latency)),
            mean_price: per_flow(price),
            mean_distance_km: per_flow(distance),
        });
    }

    let mut total = ModalitySummary::zeroed("total");
    for c in &columns {
        total.order_share_pct += c.order_share_pct;
        total.cost_per_hour += c.cost_per_hour;
        let flow = c.order_share_pct / 100.0 * total_rate;
        total.mean_latency_min += c.mean_latency_min * flow;
        total.mean_price += c.mean_price * flow;
        total.mean_distance_km += c.mean_distance_km * flow;
    }
    total.mean_latency_min /= total_rate;
    total.mean_price /= total_rate;
    total.mean_distance_km /= total_rate;

    SolveSummary {
        modalities: columns,
        total,
        base_price: result.base_price,
    }
}

pub fn emit(summary: &SolveSummary, format: Format) -> String {
    match format {
        Format::Table => emit_table(summary),
        Format::Csv => emit_csv(summary),
        Format::Json => {
            let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
            text.push('\n');
            text
        }
    }
}

const CSV_HEADER: &str = "modality,order_share_pct,cost_per_hour,mean_latency_min,mean_price,mean_distance_km";

fn emit_csv(summary: &SolveSummary) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    if summary.modalities.is_empty() {
        return out;
    }
    let row = |out: &mut String, s: &ModalitySummary| {
        writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.modality,
            s.order_share_pct,
            s.cost_per_hour,
            s.mean_latency_min,
            s.mean_price,
            s.mean_distance_km
        )
        .expect("string write");
    };
    for s in &summary.modalities {
        row(&mut out, s);
    }
    row(&mut out, &summary.total);
    // Subsidy is derivable (value < 0), so one cell carries the base.
    writeln!(out, "base_price,{:.9},,,,", summary.base_price.value).expect("string write");
    out
}

fn emit_table(summary: &SolveSummary) -> String {
    const LABEL_WIDTH: usize = 14;
    const COL_WIDTH: usize = 12;
    let mut out = String::new();
    let mut header = format!("{:<LABEL_WIDTH$}", "");
    for s in &summary.modalities {
        write!(header, "{:>COL_WIDTH$}", s.modality).expect("string write");
    }
    if !summary.modalities.is_empty() {
        write!(header, "{:>COL_WIDTH$}", "total").expect("string write");
    }
    out.push_str(header.trim_end());
    out.push('\n');
    if summary.modalities.is_empty() {
        return out;
    }
    type Metric = fn(&ModalitySummary) -> f64;
    let rows: [(&str, Metric); 5] = [
        ("orders (%)", |s| s.order_share_pct),
        ("cost ($/h)", |s| s.cost_per_hour),
        ("latency (min)", |s| s.mean_latency_min),
        ("price ($)", |s| s.mean_price),
        ("distance (km)", |s| s.mean_distance_km),
    ];
    for (label, pick) in rows {
        write!(out, "{label:<LABEL_WIDTH$}").expect("string write");
        for s in summary.modalities.iter().chain([&summary.total]) {
            write!(out, "{:>COL_WIDTH$.2}", pick(s)).expect("string write");
        }
        out.push('\n');
    }
    write!(out, "\nminimum order price: ${:.2}", summary.base_price.value).expect("string write");
    if summary.base_price.subsidy {
        out.push_str(" (subsidy: revenue target is below zero base)");
    }
    out.push('\n');
    out
}

/// Parses the CSV emitted by [`emit`] back into a summary (lossless to
/// the printed precision).
pub fn parse_summary_csv(text: &str) -> Result<SolveSummary, ReportError> {
    let mut modalities = Vec::new();
    let mut total = None;
    let mut base_price = None;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != CSV_HEADER {
                return Err(ReportError::Csv {
                    row: 0,
                    detail: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ReportError::Csv {
                row: idx,
                detail: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |k: usize| -> Result<f64, ReportError> {
            fields[k].parse().map_err(|e| ReportError::Csv {
                row: idx,
                detail: format!("field {k}: {e}"),
            })
        };
        if fields[0] == "base_price" {
            let value = num(1)?;
            base_price = Some(BasePrice {
                value,
                subsidy: value < 0.0,
            });
            continue;
        }
        let summary = ModalitySummary {
            modality: fields[0].into(),
            order_share_pct: num(1)?,
            cost_per_hour: num(2)?,
            mean_latency_min: num(3)?,
            mean_price: num(4)?,
            mean_distance_km: num(5)?,
        };
        if fields[0] == "total" {
            total = Some(summary);
        } else {
            modalities.push(summary);
        }
    }
    Ok(SolveSummary {
        modalities,
        total: total.ok_or(ReportError::Missing { what: "total" })?,
        base_price: base_price.ok_or(ReportError::Missing { what: "base_price" })?,
    })
}

pub fn parse_summary_json(text: &str) -> Result<SolveSummary, ReportError> {
    serde_json::from_str(text).map_err(|e| ReportError::Json {
        detail: e.to_string(),
    })
}
