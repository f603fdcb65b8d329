//! Plot-ready report files: CSV with a stable column order and pretty JSON
//! with the full metric structure. Metric values are written with four
//! decimal places; files contain no timestamps or environment details, so
//! identical runs emit identical bytes.

use std::fmt::Write as _;
use std::path::Path;

use fct_core::retrieval::RetrievalReport;
use fct_core::update::UpdateCostReport;
use fct_core::{Error, Result};

use crate::io::atomic_write;

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

/// One row per pairing: `case,cmc_top1,cmc_top5,map,cka`.
pub fn write_summary_csv(path: &Path, reports: &[RetrievalReport]) -> Result<()> {
    let mut out = String::from("case,cmc_top1,cmc_top5,map,cka\n");
    for r in reports {
        let top1 = r.cmc.get(&1).copied().ok_or_else(|| {
            Error::Data(format!("report {} lacks a top-1 value", r.case))
        })?;
        let top5 = r.cmc.get(&5).copied().ok_or_else(|| {
            Error::Data(format!("report {} lacks a top-5 value", r.case))
        })?;
        let cka = r.cka.map(f4).unwrap_or_default();
        writeln!(out, "{},{},{},{},{cka}", r.case, f4(top1), f4(top5), f4(r.map))
            .expect("writing to a string cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

/// One row per (pairing, class group): `case,group,query_count,cmc_top1,cmc_top5`.
pub fn write_groups_csv(path: &Path, reports: &[RetrievalReport]) -> Result<()> {
    let mut out = String::from("case,group,query_count,cmc_top1,cmc_top5\n");
    for r in reports {
        for g in &r.groups {
            let top1 = g.cmc.get(&1).copied().unwrap_or(0.0);
            let top5 = g.cmc.get(&5).copied().unwrap_or(0.0);
            writeln!(out, "{},{},{},{},{}", r.case, g.name, g.query_count, f4(top1), f4(top5))
                .expect("writing to a string cannot fail");
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_reports_json(path: &Path, reports: &[RetrievalReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(reports)
        .map_err(|e| Error::Data(format!("cannot serialize reports: {e}")))?;
    atomic_write(path, text.as_bytes())
}

/// One row per strategy with raw integer costs.
pub fn write_costs_csv(path: &Path, report: &UpdateCostReport) -> Result<()> {
    let mut out = String::from(
        "strategy,server_macs,device_macs,bytes_transferred_server_to_device,bytes_stored_per_record\n",
    );
    for row in &report.strategies {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.strategy.name(),
            row.server_macs,
            row.device_macs,
            row.bytes_transferred_server_to_device,
            row.bytes_stored_per_record
        )
        .expect("writing to a string cannot fail");
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_costs_json(path: &Path, report: &UpdateCostReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Data(format!("cannot serialize cost report: {e}")))?;
    atomic_write(path, text.as_bytes())
}

/// Per-epoch training losses: `epoch,loss`.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(out, "{epoch},{loss:.6}").expect("writing to a string cannot fail");
    }
    atomic_write(path, out.as_bytes())
}
