//! Parameter, sparsity and FLOPs comparison of a pruned network with its baseline.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{sparsity, FlopConvention, LayerKind, NetworkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub layer_id: String,
    pub kind: String,
    pub params_before: u64,
    pub params_after: u64,
    /// Fraction of this layer's parameters removed; 0 for parameter-free layers.
    pub local_sparsity: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub params_before: u64,
    pub params_after: u64,
    pub sparsity: f64,
    pub flops_before: u64,
    pub flops_after: u64,
}

/// Local sparsity of a named set of layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub name: String,
    pub layers: Vec<String>,
    pub params_before: u64,
    pub params_after: u64,
    pub local_sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub input_shape: [usize; 3],
    pub flop_convention: FlopConvention,
    pub rows: Vec<ReportRow>,
    pub totals: ReportTotals,
    pub groups: Vec<GroupRow>,
    pub notes: Vec<String>,
}

fn ratio(before: u64, after: u64) -> Result<f64> {
    if before == 0 {
        Ok(0.0)
    } else {
        sparsity(before, after)
    }
}

fn check_topology(baseline: &NetworkSpec, pruned: &NetworkSpec) -> Result<()> {
    if baseline.layers.len() != pruned.layers.len() {
        return Err(Error::Structural(format!(
            "baseline has {} layers, pruned network has {}",
            baseline.layers.len(),
            pruned.layers.len()
        )));
    }
    for (a, b) in baseline.layers.iter().zip(&pruned.layers) {
        if a.id != b.id || a.kind.name() != b.kind.name() {
            return Err(Error::Structural(format!(
                "topology mismatch: baseline layer {} ({}) vs pruned layer {} ({})",
                a.id,
                a.kind.name(),
                b.id,
                b.kind.name()
            )));
        }
    }
    Ok(())
}

/// Report with the default FLOPs convention and no layer groups.
pub fn report(baseline: &NetworkSpec, pruned: &NetworkSpec, input_shape: [usize; 3]) -> Result<PruneReport> {
    report_with(baseline, pruned, input_shape, FlopConvention::default(), &[])
}

pub fn report_with(
    baseline: &NetworkSpec,
    pruned: &NetworkSpec,
    input_shape: [usize; 3],
    convention: FlopConvention,
    groups: &[(String, Vec<String>)],
) -> Result<PruneReport> {
    check_topology(baseline, pruned)?;
    let fb = baseline.layer_flops(input_shape, convention)?;
    let fa = pruned.layer_flops(input_shape, convention)?;
    let mut rows = Vec::with_capacity(baseline.layers.len());
    let mut bn_sliced = Vec::new();
    for (i, (a, b)) in baseline.layers.iter().zip(&pruned.layers).enumerate() {
        let (before, after) = (a.param_count(), b.param_count());
        if after > before {
            return Err(Error::Structural(format!(
                "layer {} grew from {before} to {after} parameters",
                a.id
            )));
        }
        if let (LayerKind::BatchNorm(x), LayerKind::BatchNorm(y)) = (&a.kind, &b.kind) {
            if x.channels != y.channels {
                bn_sliced.push(a.id.clone());
            }
        }
        rows.push(ReportRow {
            layer_id: a.id.clone(),
            kind: a.kind.name().to_string(),
            params_before: before,
            params_after: after,
            local_sparsity: ratio(before, after)?,
            flops_before: fb[i],
            flops_after: fa[i],
        });
    }
    let params_before = rows.iter().map(|r| r.params_before).sum();
    let params_after = rows.iter().map(|r| r.params_after).sum();
    let totals = ReportTotals {
        params_before,
        params_after,
        sparsity: ratio(params_before, params_after)?,
        flops_before: fb.iter().sum(),
        flops_after: fa.iter().sum(),
    };

    let mut group_rows = Vec::with_capacity(groups.len());
    for (name, ids) in groups {
        let (mut before, mut after) = (0, 0);
        for id in ids {
            let row = rows
                .iter()
                .find(|r| &r.layer_id == id)
                .ok_or_else(|| Error::Structural(format!("group {name} names unknown layer {id}")))?;
            before += row.params_before;
            after += row.params_after;
        }
        group_rows.push(GroupRow {
            name: name.clone(),
            layers: ids.clone(),
            params_before: before,
            params_after: after,
            local_sparsity: ratio(before, after)?,
        });
    }

    let mut notes = Vec::new();
    if !bn_sliced.is_empty() {
        notes.push(format!(
            "batch-norm channels were sliced, running statistics not recomputed: {}",
            bn_sliced.join(", ")
        ));
    }
    Ok(PruneReport {
        input_shape,
        flop_convention: convention,
        rows,
        totals,
        groups: group_rows,
        notes,
    })
}

impl PruneReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

impl fmt::Display for PruneReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:<14} {:>12} {:>12} {:>9} {:>14} {:>14}",
            "layer", "kind", "params", "pruned", "local", "flops", "pruned flops"
        );
        for r in self.rows.iter().filter(|r| r.params_before > 0 || r.flops_before != r.flops_after) {
            let _ = writeln!(
                s,
                "{:<20} {:<14} {:>12} {:>12} {:>9} {:>14} {:>14}",
                r.layer_id,
                r.kind,
                r.params_before,
                r.params_after,
                pct(r.local_sparsity),
                r.flops_before,
                r.flops_after
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "{:<20} {:<14} {:>12} {:>12} {:>9} {:>14} {:>14}",
            "total",
            "",
            t.params_before,
            t.params_after,
            pct(t.sparsity),
            t.flops_before,
            t.flops_after
        );
        if !self.groups.is_empty() {
            let _ = writeln!(s, "\n{:<20} {:>12} {:>12} {:>9}", "group", "params", "pruned", "local");
            for g in &self.groups {
                let _ = writeln!(
                    s,
                    "{:<20} {:>12} {:>12} {:>9}",
                    g.name,
                    g.params_before,
                    g.params_after,
                    pct(g.local_sparsity)
                );
            }
        }
        let _ = writeln!(s, "\nflops counted as {:?}", self.flop_convention);
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        f.write_str(&s)
    }
}
