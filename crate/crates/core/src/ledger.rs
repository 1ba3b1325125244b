//! Multiply-accumulate accounting.
//!
//! One MAC is one FLOP-unit. Bias adds, normalizations, gates and index
//! arithmetic for gather/unfold/scatter are not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// Evaluated at every pixel; `actual == dense`.
    Dense,
    /// Evaluated at the `kept` mask pixels only; `actual/dense == kept/total`.
    Pruned,
    /// Halo recomputation a pruned 3×3 needs around the mask; no dense
    /// counterpart (`dense == 0`).
    Overhead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub op: String,
    pub kind: EntryKind,
    pub dense_macs: u64,
    pub actual_macs: u64,
    /// `(kept, total)` pixel counts for pruned entries.
    pub pixels: Option<(u64, u64)>,
}

impl LedgerEntry {
    pub fn ratio(&self) -> f64 {
        ratio(self.actual_macs, self.dense_macs)
    }
}

fn ratio(actual: u64, dense: u64) -> f64 {
    if dense == 0 {
        0.0
    } else {
        actual as f64 / dense as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlopLedger {
    entries: Vec<LedgerEntry>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn dense(&mut self, op: impl Into<String>, macs: u64) {
        self.entries.push(LedgerEntry {
            op: op.into(),
            kind: EntryKind::Dense,
            dense_macs: macs,
            actual_macs: macs,
            pixels: None,
        });
    }

    /// Record an op whose dense cost is `per_pixel · total` and which ran
    /// at `kept` pixels.
    pub fn pruned(&mut self, op: impl Into<String>, per_pixel: u64, kept: u64, total: u64) {
        debug_assert!(kept <= total);
        self.entries.push(LedgerEntry {
            op: op.into(),
            kind: EntryKind::Pruned,
            dense_macs: per_pixel * total,
            actual_macs: per_pixel * kept,
            pixels: Some((kept, total)),
        });
    }

    pub fn overhead(&mut self, op: impl Into<String>, macs: u64) {
        self.entries.push(LedgerEntry {
            op: op.into(),
            kind: EntryKind::Overhead,
            dense_macs: 0,
            actual_macs: macs,
            pixels: None,
        });
    }

    pub fn merge(&mut self, other: FlopLedger) {
        self.entries.extend(other.entries);
    }

    pub fn total_dense(&self) -> u64 {
        self.entries.iter().map(|e| e.dense_macs).sum()
    }

    pub fn total_actual(&self) -> u64 {
        self.entries.iter().map(|e| e.actual_macs).sum()
    }

    /// Checks `actual ≤ dense` for pruned entries, `actual == dense` for
    /// dense ones, and the exact `kept/total` fraction.
    pub fn check_invariants(&self) -> Result<(), String> {
        for e in &self.entries {
            match e.kind {
                EntryKind::Dense if e.actual_macs != e.dense_macs => {
                    return Err(format!("{}: dense entry with actual != dense", e.op));
                }
                EntryKind::Pruned => {
                    let (kept, total) = e.pixels.ok_or_else(|| format!("{}: pruned entry without pixel counts", e.op))?;
                    if e.actual_macs > e.dense_macs {
                        return Err(format!("{}: actual exceeds dense", e.op));
                    }
                    if e.actual_macs as u128 * total as u128 != e.dense_macs as u128 * kept as u128 {
                        return Err(format!("{}: MAC ratio is not {kept}/{total}", e.op));
                    }
                }
                EntryKind::Overhead if e.dense_macs != 0 => {
                    return Err(format!("{}: overhead entry with a dense cost", e.op));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub op: String,
    pub kind: EntryKind,
    pub dense_macs: u64,
    pub actual_macs: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub dense: u64,
    pub actual: u64,
    pub ratio: f64,
}

impl Totals {
    fn new(dense: u64, actual: u64) -> Self {
        Self { dense, actual, ratio: ratio(actual, dense) }
    }
}

/// Serializable summary of a ledger. `ratio` is `actual/dense`, or 0 when
/// the dense cost is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub entries: Vec<ReportEntry>,
    /// Totals keyed by the op label's first dotted segment.
    pub modules: BTreeMap<String, Totals>,
    pub totals: Totals,
}

pub fn flop_report(ledger: &FlopLedger) -> FlopReport {
    let mut modules: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let entries = ledger
        .entries()
        .iter()
        .map(|e| {
            let module = e.op.split('.').next().unwrap_or("").to_string();
            let m = modules.entry(module).or_default();
            m.0 += e.dense_macs;
            m.1 += e.actual_macs;
            ReportEntry {
                op: e.op.clone(),
                kind: e.kind,
                dense_macs: e.dense_macs,
                actual_macs: e.actual_macs,
                ratio: e.ratio(),
            }
        })
        .collect();
    FlopReport {
        entries,
        modules: modules.into_iter().map(|(k, (d, a))| (k, Totals::new(d, a))).collect(),
        totals: Totals::new(ledger.total_dense(), ledger.total_actual()),
    }
}
