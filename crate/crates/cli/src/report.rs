//! Matrix CSV, JSON report and edit-metric table from finished evaluations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use forgetedit::corpus::Split;
use forgetedit::eval::{EditMetrics, EvalReport, SIGNIFICANCE};
use forgetedit::{Error, Result};

use crate::pipeline::{read_json, write_json, RunManifest, ORIGINAL};
use crate::registry::{Method, GROUND_TRUTH};

pub const MATRIX_FILE: &str = "matrix.csv";
pub const SUMMARY_REPORT_FILE: &str = "report.json";
pub const EDIT_TABLE_FILE: &str = "edit_metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub matrix: PathBuf,
    pub report: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edit_metrics: Option<PathBuf>,
}

impl ReportFiles {
    pub fn paths(&self) -> Vec<&PathBuf> {
        let mut v = vec![&self.matrix, &self.report];
        v.extend(&self.edit_metrics);
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Direction::Up => a > b,
            Direction::Down => a < b,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub metric: String,
    pub direction: Direction,
    /// One value per column, in column order.
    pub values: Vec<f64>,
    pub best: Option<String>,
    pub second_best: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub columns: Vec<String>,
    pub rows: Vec<MatrixRow>,
    pub forget_quality_pass: Vec<bool>,
}

/// Row order follows the usual table layout: utility sets, forget set,
/// then the two aggregates.
const DATASET_ORDER: [Split; 4] = [Split::RealAuthorsAnalog, Split::RealWorldAnalog, Split::Retain, Split::Forget];

fn row_values(report: &EvalReport) -> Vec<(String, Direction, f64)> {
    let mut out = Vec::new();
    for split in DATASET_ORDER {
        let t = report.per_dataset[split.name()];
        let down = if split == Split::Forget { Direction::Down } else { Direction::Up };
        out.push((format!("{}.rouge", split.name()), down, t.rouge));
        out.push((format!("{}.probability", split.name()), down, t.probability));
        out.push((format!("{}.truth_ratio", split.name()), Direction::Up, t.truth_ratio));
    }
    out.push(("model_utility".into(), Direction::Up, report.model_utility));
    out.push(("forget_quality".into(), Direction::Up, report.forget_quality_p));
    out
}

/// Best and second-best among the method columns (`ranked` indexes into
/// `values`); the earlier column wins ties.
pub fn best_two(values: &[f64], ranked: &[usize], direction: Direction) -> (Option<usize>, Option<usize>) {
    let mut order: Vec<usize> = ranked.to_vec();
    order.sort_by(|&a, &b| {
        if direction.better(values[a], values[b]) {
            std::cmp::Ordering::Less
        } else if direction.better(values[b], values[a]) {
            std::cmp::Ordering::Greater
        } else {
            a.cmp(&b)
        }
    });
    (order.first().copied(), order.get(1).copied())
}

/// Build the matrix: ground truth first, then methods in registry order.
/// Best marks cover the method columns only.
pub fn build_matrix(ground_truth: &EvalReport, methods: &[(String, EvalReport)]) -> Matrix {
    let mut columns = vec![GROUND_TRUTH.to_string()];
    columns.extend(methods.iter().map(|(n, _)| n.clone()));
    let reports: Vec<&EvalReport> = std::iter::once(ground_truth).chain(methods.iter().map(|(_, r)| r)).collect();
    let per_col: Vec<Vec<(String, Direction, f64)>> = reports.iter().map(|r| row_values(r)).collect();
    let ranked: Vec<usize> = (1..columns.len()).collect();
    let rows = per_col[0]
        .iter()
        .enumerate()
        .map(|(i, (metric, direction, _))| {
            let values: Vec<f64> = per_col.iter().map(|c| c[i].2).collect();
            let (b, s) = best_two(&values, &ranked, *direction);
            MatrixRow {
                metric: metric.clone(),
                direction: *direction,
                best: b.map(|j| columns[j].clone()),
                second_best: s.map(|j| columns[j].clone()),
                values,
            }
        })
        .collect();
    let forget_quality_pass = reports.iter().map(|r| r.forget_quality_p >= SIGNIFICANCE).collect();
    Matrix {
        columns,
        rows,
        forget_quality_pass,
    }
}

/// Fixed notation for ordinary magnitudes, scientific for tiny p-values.
pub fn format_number(x: f64) -> String {
    if x == 0.0 || x.abs() >= 1e-3 {
        format!("{x:.6}")
    } else {
        format!("{x:.4e}")
    }
}

pub fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "metric,direction,{},best,second_best", m.columns.join(","));
    for r in &m.rows {
        let vals: Vec<String> = r.values.iter().map(|v| format_number(*v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.metric,
            r.direction.name(),
            vals.join(","),
            r.best.as_deref().unwrap_or(""),
            r.second_best.as_deref().unwrap_or("")
        );
    }
    let flags: Vec<&str> = m.forget_quality_pass.iter().map(|p| if *p { "pass" } else { "fail" }).collect();
    let _ = writeln!(s, "forget_quality_pass_0.05,up,{},,", flags.join(","));
    s
}

pub fn edit_metrics_csv(rows: &[(String, EditMetrics)]) -> String {
    let mut s = String::from("method,reliability,generalization,locality\n");
    for (name, m) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{}",
            format_number(m.reliability),
            format_number(m.generalization),
            format_number(m.locality)
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub matrix: Matrix,
    pub significance: f64,
    pub ground_truth: EvalReport,
    /// The model before any editing or unlearning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original: Option<EvalReport>,
    pub methods: BTreeMap<String, EvalReport>,
}

fn load_eval(root: &Path, manifest: &RunManifest, label: &str) -> Result<EvalReport> {
    let rel = manifest
        .evaluations
        .get(label)
        .ok_or_else(|| Error::Precondition(format!("missing evaluation for method {label}")))?;
    let path = root.join(rel);
    if !path.exists() {
        return Err(Error::Precondition(format!(
            "missing evaluation for method {label}: {} does not exist",
            path.display()
        )));
    }
    read_json(&path)
}

/// Write `matrix.csv`, `report.json` and, when editing methods ran,
/// `edit_metrics.csv`.
pub fn emit_report(root: &Path, manifest: &RunManifest) -> Result<ReportFiles> {
    let gt = load_eval(root, manifest, GROUND_TRUTH)?;
    let original = manifest
        .evaluations
        .contains_key(ORIGINAL)
        .then(|| load_eval(root, manifest, ORIGINAL))
        .transpose()?;
    let mut methods = Vec::new();
    for name in &manifest.methods {
        if Method::parse(name).is_none() {
            return Err(Error::Validation(format!("manifest names unknown method {name}")));
        }
        methods.push((name.clone(), load_eval(root, manifest, name)?));
    }
    let matrix = build_matrix(&gt, &methods);
    let write = |name: &str, text: String| {
        let path = root.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(MATRIX_FILE, matrix_csv(&matrix))?;
    let edit_rows: Vec<(String, EditMetrics)> = methods
        .iter()
        .filter_map(|(n, r)| r.edit_metrics.map(|m| (n.clone(), m)))
        .collect();
    let edit_table = if edit_rows.is_empty() {
        None
    } else {
        write(EDIT_TABLE_FILE, edit_metrics_csv(&edit_rows))?;
        Some(PathBuf::from(EDIT_TABLE_FILE))
    };
    write_json(
        &root.join(SUMMARY_REPORT_FILE),
        &SummaryReport {
            matrix,
            significance: SIGNIFICANCE,
            ground_truth: gt,
            original,
            methods: methods.into_iter().collect(),
        },
    )?;
    Ok(ReportFiles {
        matrix: PathBuf::from(MATRIX_FILE),
        report: PathBuf::from(SUMMARY_REPORT_FILE),
        edit_metrics: edit_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use forgetedit::eval::MetricTriple;

    fn report(seed: f64) -> EvalReport {
        let per_dataset = Split::ALL
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let x = (seed + i as f64 * 0.1).min(1.0);
                (
                    s.name().to_string(),
                    MetricTriple {
                        rouge: x,
                        probability: x / 2.0,
                        truth_ratio: 1.0 - x / 3.0,
                    },
                )
            })
            .collect();
        EvalReport {
            per_dataset,
            model_utility: seed,
            forget_quality_p: seed / 4.0,
            edit_metrics: None,
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn single_method_gives_one_data_column() {
        let m = build_matrix(&report(0.5), &[("ike:incorrect".into(), report(0.3))]);
        let csv = matrix_csv(&m);
        let header = csv.lines().next().unwrap();
        assert_eq!(header, "metric,direction,ground_truth,ike:incorrect,best,second_best");
        assert_eq!(m.columns.len() - 1, 1);
        assert!(m.rows.iter().all(|r| r.second_best.is_none()));
    }

    #[test]
    fn best_mark_is_the_row_argmax_or_argmin() {
        let methods: Vec<(String, EvalReport)> =
            [("a", 0.2), ("b", 0.6), ("c", 0.4)].iter().map(|(n, s)| (n.to_string(), report(*s))).collect();
        let m = build_matrix(&report(0.9), &methods);
        for row in &m.rows {
            let vals = &row.values[1..];
            let pick = match row.direction {
                Direction::Up => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Direction::Down => vals.iter().cloned().fold(f64::INFINITY, f64::min),
            };
            let j = m.columns.iter().position(|c| Some(c) == row.best.as_ref()).unwrap();
            assert_eq!(row.values[j], pick, "{}", row.metric);
            assert_ne!(row.best, row.second_best);
        }
        let mu = m.rows.iter().find(|r| r.metric == "model_utility").unwrap();
        assert_eq!(mu.best.as_deref(), Some("b"));
        assert_eq!(mu.second_best.as_deref(), Some("c"));
        let fr = m.rows.iter().find(|r| r.metric == "forget.rouge").unwrap();
        assert_eq!(fr.best.as_deref(), Some("a"));
    }

    #[test]
    fn ties_go_to_the_earlier_column() {
        let (b, s) = best_two(&[9.0, 1.0, 1.0, 1.0], &[1, 2, 3], Direction::Up);
        assert_eq!((b, s), (Some(1), Some(2)));
    }

    #[test]
    fn forget_quality_flags_use_the_threshold() {
        let mut lo = report(0.1);
        lo.forget_quality_p = 0.049;
        let mut at = report(0.1);
        at.forget_quality_p = 0.05;
        let m = build_matrix(&report(1.0), &[("ga".into(), lo), ("gd".into(), at)]);
        assert_eq!(m.forget_quality_pass, [true, false, true]);
        assert!(matrix_csv(&m).ends_with("forget_quality_pass_0.05,up,pass,fail,pass,,\n"));
    }

    #[test]
    fn fourteen_rows_including_both_aggregates() {
        let m = build_matrix(&report(0.5), &[("po".into(), report(0.5))]);
        assert_eq!(m.rows.len(), 14);
        assert_eq!(m.rows[12].metric, "model_utility");
        assert_eq!(m.rows[13].metric, "forget_quality");
    }

    #[test]
    fn numbers_switch_to_scientific_below_a_thousandth() {
        assert_eq!(format_number(0.5), "0.500000");
        assert_eq!(format_number(0.0), "0.000000");
        assert_eq!(format_number(4.22e-21), "4.2200e-21");
    }
}
