use super::CooccurrenceTable;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write;

/// A pair of interest, one per line in a pairs file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairReport {
    pub x: String,
    pub y: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub x: String,
    pub y: String,
    pub conditional: Option<f64>,
    pub interventional: Option<f64>,
    /// `interventional / conditional`; 1 when both are 0.
    pub ratio: Option<f64>,
    /// `conditional - interventional`.
    pub gap: Option<f64>,
    pub coverage: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Conditional and adjusted estimate for each pair, largest gap first.
/// Pairs whose estimates are undefined carry a note and sort last.
pub fn report(
    table: &CooccurrenceTable,
    pairs: &[PairReport],
    z_vocab: Option<&BTreeSet<String>>,
) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = pairs
        .iter()
        .map(|p| {
            let cond = table.conditional(&p.y, &p.x);
            let adj = table.interventional_within(&p.y, &p.x, z_vocab);
            match (cond, adj) {
                (Ok(c), Ok(a)) => ReportRow {
                    x: p.x.clone(),
                    y: p.y.clone(),
                    conditional: Some(c),
                    interventional: Some(a.value),
                    ratio: Some(if c == 0.0 {
                        if a.value == 0.0 {
                            1.0
                        } else {
                            f64::INFINITY
                        }
                    } else {
                        a.value / c
                    })
                    .filter(|r| r.is_finite()),
                    gap: Some(c - a.value),
                    coverage: Some(a.coverage),
                    note: None,
                },
                (c, a) => ReportRow {
                    x: p.x.clone(),
                    y: p.y.clone(),
                    conditional: c.as_ref().ok().copied(),
                    interventional: a.as_ref().ok().map(|a| a.value),
                    ratio: None,
                    gap: None,
                    coverage: a.as_ref().ok().map(|a| a.coverage),
                    note: Some(match (c, a) {
                        (Err(e), _) | (_, Err(e)) => e.to_string(),
                        _ => unreachable!(),
                    }),
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let ga = a.gap.unwrap_or(f64::NEG_INFINITY);
        let gb = b.gap.unwrap_or(f64::NEG_INFINITY);
        gb.total_cmp(&ga)
            .then_with(|| a.x.cmp(&b.x))
            .then_with(|| a.y.cmp(&b.y))
    });
    rows
}

/// Aligned-column text rendering of a report.
pub fn render_table(rows: &[ReportRow]) -> String {
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
    let header = ["x", "y", "P(y|x)", "P(y|do(x))", "ratio", "gap", "coverage"];
    let body: Vec<[String; 7]> = rows
        .iter()
        .map(|r| {
            [
                r.x.clone(),
                r.y.clone(),
                fmt(r.conditional),
                fmt(r.interventional),
                fmt(r.ratio),
                fmt(r.gap),
                fmt(r.coverage),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &header);
    for row in &body {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}
