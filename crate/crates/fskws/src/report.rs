//! Multi-curve report emission: one diff-able CSV of curve points plus a
//! per-curve summary of the headline operating points.

use crate::error::{Error, Result};
use crate::protocol::EvalCurve;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub det_at_far_1pct: f64,
    pub det_at_far_5pct: f64,
    pub auroc: f64,
}

pub fn summary_path(report: &Path) -> PathBuf {
    let mut os = report.as_os_str().to_owned();
    os.push(".summary.csv");
    PathBuf::from(os)
}

/// Write `name,threshold,far,rate` rows for every curve (names sorted) and a
/// sibling `<out>.summary.csv` with rate at 1%/5% far and auroc per curve.
pub fn emit_report(curves: &[(String, EvalCurve)], out: &Path) -> Result<Vec<SummaryRow>> {
    if curves.is_empty() {
        return Err(Error::InvalidInput("report: no curves".into()));
    }
    let mut ordered: Vec<&(String, EvalCurve)> = curves.iter().collect();
    ordered.sort_by(|a, b| a.0.cmp(&b.0));

    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    writeln!(f, "name,threshold,far,rate")?;
    for (name, curve) in &ordered {
        for p in &curve.points {
            writeln!(f, "{},{:.9},{:.9},{:.9}", name, p.threshold, p.far, p.rate)?;
        }
    }
    drop(f);

    let rows: Vec<SummaryRow> = ordered
        .iter()
        .map(|(name, curve)| SummaryRow {
            name: name.clone(),
            det_at_far_1pct: curve.rate_at_far(0.01),
            det_at_far_5pct: curve.rate_at_far(0.05),
            auroc: curve.auroc,
        })
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(summary_path(out))?);
    writeln!(f, "name,det_at_far_0.01,det_at_far_0.05,auroc")?;
    for r in &rows {
        writeln!(
            f,
            "{},{:.9},{:.9},{:.9}",
            r.name, r.det_at_far_1pct, r.det_at_far_5pct, r.auroc
        )?;
    }
    Ok(rows)
}
