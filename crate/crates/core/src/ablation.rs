//! Three-variant ablation: backbone alone, backbone on decoupled features,
//! and the full adaptive adversarial method.
//!
//! Every variant of a seed trains on the same split with the same derived
//! seeds. Variants differ only in `use_decouplers` and `schedule.mode`.
//! The "+ICFDNet" variant keeps the robust term's weight but switches the
//! attack off, so its loss reduces to plain cross-entropy on the classifier.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use crate::adversary::ScheduleMode;
use crate::config::{DataKind, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, round2, EvalReport};
use crate::report::{render_report, ReportRow};
use crate::train::train_on;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Backbone,
    Decoupled,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Backbone, Variant::Decoupled, Variant::Full];

    pub fn suffix(self) -> &'static str {
        match self {
            Variant::Backbone => "",
            Variant::Decoupled => "+ICFDNet",
            Variant::Full => "+ICFDNet+AT",
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Variant::Backbone => "backbone",
            Variant::Decoupled => "decoupled",
            Variant::Full => "full",
        }
    }

    /// The variant's config derived from the full-method config.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Backbone => {
                c.use_decouplers = false;
                c.schedule.mode = ScheduleMode::Off;
            }
            Variant::Decoupled => {
                c.use_decouplers = true;
                c.schedule.mode = ScheduleMode::Off;
            }
            Variant::Full => {
                c.use_decouplers = true;
            }
        }
        c
    }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub config: RunConfig,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub results: Vec<VariantResult>,
}

impl SeedRun {
    pub fn get(&self, v: Variant) -> &EvalReport {
        &self.results.iter().find(|r| r.variant == v).expect("all variants run").report
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub backbone: String,
    pub class_names: Vec<String>,
    pub runs: Vec<SeedRun>,
}

/// Config for the `i`-th repetition: run seed and synthetic data seed both shift by `i`.
pub fn seed_config(base: &RunConfig, i: u64) -> RunConfig {
    let mut c = base.clone();
    c.seed = base.seed.wrapping_add(i);
    if c.data.kind == DataKind::Synthetic {
        c.data.synthetic.seed = base.data.synthetic.seed.wrapping_add(i);
    }
    c
}

/// Trains and evaluates the three variants for each of `seeds` repetitions.
pub fn run_ablation(base: &RunConfig, seeds: usize, backbone: Option<&str>) -> Result<AblationResult> {
    let mut base = base.clone();
    if let Some(b) = backbone {
        base.classifier.backbone = b.to_string();
    }
    base.validate()?;
    let mut runs = Vec::with_capacity(seeds);
    let mut class_names = Vec::new();
    for i in 0..seeds as u64 {
        let cfg = seed_config(&base, i);
        let split = cfg.load_data()?;
        class_names = split.test.class_names().to_vec();
        let mut results = Vec::with_capacity(3);
        for v in Variant::ALL {
            let mut vc = v.apply(&cfg);
            vc.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("seed{i}")).join(v.dir_name()));
            let out = train_on(&vc, &split)?;
            let report = evaluate(&out.models, &split.test)?;
            results.push(VariantResult {
                variant: v,
                config: vc,
                report,
            });
        }
        runs.push(SeedRun { seed: cfg.seed, results });
    }
    Ok(AblationResult {
        backbone: base.classifier.backbone.clone(),
        class_names,
        runs,
    })
}

fn mean_row(method: String, reports: &[&EvalReport]) -> ReportRow {
    let n = reports.len() as f64;
    let k = reports[0].per_class.len();
    let per_class = (0..k)
        .map(|i| {
            let v: Vec<f64> = reports.iter().filter_map(|r| r.per_class[i]).collect();
            (!v.is_empty()).then(|| round2(v.iter().sum::<f64>() / v.len() as f64))
        })
        .collect();
    ReportRow {
        method,
        per_class,
        gap: round2(reports.iter().map(|r| r.gap).sum::<f64>() / n),
        average: round2(reports.iter().map(|r| r.average).sum::<f64>() / n),
        macro_average: round2(reports.iter().map(|r| r.macro_average).sum::<f64>() / n),
    }
}

fn delta_line(out: &mut String, label: &str, from: &EvalReport, to: &EvalReport) {
    let arrow = |d: f64| if d > 0.0 { '↑' } else if d < 0.0 { '↓' } else { '=' };
    let da = to.average - from.average;
    let dg = to.gap - from.gap;
    let _ = writeln!(
        out,
        "  {label}: Average% {da:+.2} {} | Best-Worst% {dg:+.2} {}",
        arrow(da),
        arrow(dg)
    );
}

impl AblationResult {
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut rows = Vec::new();
        for run in &self.runs {
            for r in &run.results {
                rows.push(ReportRow::new(
                    format!("seed{}/{}{}", run.seed, self.backbone, r.variant.suffix()),
                    &r.report,
                ));
            }
        }
        rows.extend(self.aggregate());
        rows
    }

    /// Mean over seeds, one row per variant.
    pub fn aggregate(&self) -> Vec<ReportRow> {
        Variant::ALL
            .iter()
            .map(|&v| {
                let reps: Vec<&EvalReport> = self.runs.iter().map(|r| r.get(v)).collect();
                mean_row(format!("mean/{}{}", self.backbone, v.suffix()), &reps)
            })
            .collect()
    }

    /// Seeds where the full method's gap is at most the decoupled variant's.
    pub fn gap_wins(&self) -> usize {
        self.runs
            .iter()
            .filter(|r| r.get(Variant::Full).gap <= r.get(Variant::Decoupled).gap)
            .count()
    }

    pub fn render_text(&self) -> Result<String> {
        let mut out = String::new();
        for run in &self.runs {
            let rows: Vec<ReportRow> = run
                .results
                .iter()
                .map(|r| ReportRow::new(format!("{}{}", self.backbone, r.variant.suffix()), &r.report))
                .collect();
            let _ = writeln!(out, "seed {}", run.seed);
            out.push_str(&render_report(&self.class_names, &rows)?.text);
            delta_line(&mut out, "+ICFDNet vs backbone", run.get(Variant::Backbone), run.get(Variant::Decoupled));
            delta_line(&mut out, "+AT vs +ICFDNet", run.get(Variant::Decoupled), run.get(Variant::Full));
            out.push('\n');
        }
        let _ = writeln!(out, "aggregate over {} seed(s)", self.runs.len());
        out.push_str(&render_report(&self.class_names, &self.aggregate())?.text);
        let _ = writeln!(
            out,
            "  full-method gap <= +ICFDNet gap in {} of {} seed(s)",
            self.gap_wins(),
            self.runs.len()
        );
        Ok(out)
    }

    /// Writes `report.txt` and `report.csv` into `dir`.
    pub fn write(&self, dir: &std::path::Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        let csv = dir.join("report.csv");
        fs::write(&txt, self.render_text()?).map_err(|e| Error::io(&txt, e))?;
        fs::write(&csv, render_report(&self.class_names, &self.rows())?.csv).map_err(|e| Error::io(&csv, e))?;
        Ok((txt, csv))
    }
}
