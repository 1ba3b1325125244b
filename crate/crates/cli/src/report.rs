use std::collections::BTreeMap;
use std::path::Path;

use m2ae_core::image::write_atomic;
use m2ae_core::ledger::{flop_report, FlopLedger, ReportEntry, Totals};
use m2ae_core::network::{ForwardOutput, Mode};
use m2ae_core::Result;
use serde::Serialize;

/// Report of one `run`.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    /// Selected pixels per stage.
    #[serde(rename = "Q_per_stage")]
    pub q_per_stage: BTreeMap<String, usize>,
    /// Pixels per stage.
    pub hw_per_stage: BTreeMap<String, usize>,
    pub flops: Totals,
    pub entries: Vec<ReportEntry>,
    pub wall_ms: f64,
}

impl RunReport {
    pub fn new(mode: Mode, out: &ForwardOutput, wall_ms: f64) -> Self {
        let mut q_per_stage = BTreeMap::new();
        let mut hw_per_stage = BTreeMap::new();
        for s in &out.stages {
            let (h, w) = s.mask.hw();
            q_per_stage.insert(s.stage.to_string(), s.mask.q());
            hw_per_stage.insert(s.stage.to_string(), h * w);
        }
        let r = flop_report(&out.ledger);
        Self { mode, q_per_stage, hw_per_stage, flops: r.totals, entries: r.entries, wall_ms }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsCase {
    pub mode: Mode,
    pub mask_ratio: Option<f64>,
    pub totals: Totals,
    pub modules: BTreeMap<String, Totals>,
    pub entries: Vec<ReportEntry>,
}

impl FlopsCase {
    pub fn new(mode: Mode, mask_ratio: Option<f64>, ledger: &FlopLedger) -> Self {
        let r = flop_report(ledger);
        Self { mode, mask_ratio, totals: r.totals, modules: r.modules, entries: r.entries }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub height: usize,
    pub width: usize,
    /// Dims actually costed: each side rounded up to a multiple of 16.
    pub padded: [usize; 2],
    /// Dense total in units of 10¹² MACs.
    pub dense_tmacs: f64,
    pub dense: FlopsCase,
    pub pruned: Option<FlopsCase>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub size: [usize; 2],
    pub mask_ratio: f64,
    pub repeat: usize,
    pub dense_ms: Vec<f64>,
    pub pruned_ms: Vec<f64>,
    pub dense_median_ms: f64,
    pub pruned_median_ms: f64,
    /// `dense_median_ms / pruned_median_ms`.
    pub speedup: f64,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    match s.len() {
        0 => 0.0,
        n if n % 2 == 1 => s[n / 2],
        n => 0.5 * (s[n / 2 - 1] + s[n / 2]),
    }
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

pub fn write_json<T: Serialize>(v: &T, path: &Path) -> Result<()> {
    let mut s = to_json(v);
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }
}
