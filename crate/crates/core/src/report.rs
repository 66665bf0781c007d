//! Text and CSV rendering of evaluation reports and training metrics.

use std::fmt::Write as _;

use crate::error::{config_err, Result};
use crate::eval::EvalReport;
use crate::train::EpochRecord;

/// One labelled row of a comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub per_class: Vec<Option<f64>>,
    pub gap: f64,
    pub average: f64,
    pub macro_average: f64,
}

impl ReportRow {
    pub fn new(method: impl Into<String>, r: &EvalReport) -> Self {
        Self {
            method: method.into(),
            per_class: r.per_class.clone(),
            gap: r.gap,
            average: r.average,
            macro_average: r.macro_average,
        }
    }

    fn numeric_cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = self.per_class.iter().map(|a| fmt_pct(*a)).collect();
        cells.push(fmt_pct(Some(self.gap)));
        cells.push(fmt_pct(Some(self.average)));
        cells.push(fmt_pct(Some(self.macro_average)));
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub text: String,
    pub csv: String,
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn header(class_names: &[String]) -> Vec<String> {
    let mut h = vec!["Method".to_string()];
    h.extend(class_names.iter().map(|c| format!("{c}%")));
    h.extend(["Best-Worst%", "Average%(micro)", "Macro%"].map(String::from));
    h
}

/// Renders rows sharing one class list. Absent classes show as blank cells.
pub fn render_report(class_names: &[String], rows: &[ReportRow]) -> Result<Rendered> {
    if rows.is_empty() {
        return Err(config_err!("nothing to render"));
    }
    if let Some(r) = rows.iter().find(|r| r.per_class.len() != class_names.len()) {
        return Err(config_err!("row {} has {} classes, expected {}", r.method, r.per_class.len(), class_names.len()));
    }
    let head = header(class_names);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.method.clone()];
            cells.extend(r.numeric_cells());
            cells
        })
        .collect();

    let widths: Vec<usize> = (0..head.len())
        .map(|c| body.iter().map(|r| r[c].len()).chain([head[c].len()]).max().unwrap_or(0))
        .collect();
    let mut text = String::new();
    let line = |cells: &[String], out: &mut String| {
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(&head, &mut text);
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    text.push_str(&"-".repeat(rule));
    text.push('\n');
    for r in &body {
        line(r, &mut text);
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| config_err!("csv: {e}");
    w.write_record(&head).map_err(csv_err)?;
    for r in &body {
        w.write_record(r).map_err(csv_err)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| config_err!("csv: {e}"))?)
        .map_err(|e| config_err!("csv: {e}"))?;
    Ok(Rendered { text, csv })
}

/// Parses CSV written by [`render_report`] back into class names and rows.
pub fn parse_report_csv(s: &str) -> Result<(Vec<String>, Vec<ReportRow>)> {
    let mut r = csv::Reader::from_reader(s.as_bytes());
    let head = r.headers().map_err(|e| config_err!("csv: {e}"))?.clone();
    if head.len() < 4 || &head[0] != "Method" {
        return Err(config_err!("not a report csv"));
    }
    let k = head.len() - 4;
    let class_names = (1..=k)
        .map(|i| head[i].strip_suffix('%').unwrap_or(&head[i]).to_string())
        .collect();
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| config_err!("bad number {s:?}"))
        }
    };
    let req = |s: &str| num(s)?.ok_or_else(|| config_err!("missing value"));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| config_err!("csv: {e}"))?;
        rows.push(ReportRow {
            method: rec[0].to_string(),
            per_class: (1..=k).map(|i| num(&rec[i])).collect::<Result<_>>()?,
            gap: req(&rec[k + 1])?,
            average: req(&rec[k + 2])?,
            macro_average: req(&rec[k + 3])?,
        });
    }
    Ok((class_names, rows))
}

/// Fixed-width view of a training run's metrics.
pub fn render_metrics(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    let k = records.first().map_or(0, |r| r.acc.len());
    let _ = write!(out, "{:>5} {:>10} {:>10} {:>10} {:>10}", "epoch", "l_c", "l_s", "l_at", "total");
    for i in 0..k {
        let _ = write!(out, " {:>7} {:>8} {:>6}", format!("acc_{i}"), format!("eps_{i}"), format!("beta_{i}"));
    }
    out.push_str("  seconds\n");
    for r in records {
        let _ = write!(
            out,
            "{:>5} {:>10.5} {:>10.5} {:>10.5} {:>10.5}",
            r.epoch, r.l_c, r.l_s, r.l_at, r.total
        );
        for i in 0..k {
            let _ = write!(out, " {:>7.4} {:>8.5} {:>6.4}", r.acc[i], r.eps[i], r.beta[i]);
        }
        let _ = writeln!(out, "  {:>7.1}", r.seconds);
    }
    out
}
