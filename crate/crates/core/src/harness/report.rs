use serde::{Deserialize, Serialize};

use crate::gvid::same_distance;

use super::eval::{mean_std, EvalReport};
use super::task::Aggregation;

pub const CURVE_HEADER: &str = "method,bg_method,distance_m,leak_class,accuracy_mean,accuracy_std";

fn distance_cell(d: Option<f64>) -> String {
    d.map_or_else(|| "all".into(), |d| format!("{d:.1}"))
}

/// One row per report, in input order. Pooled distances or classes are
/// written as `all`.
pub fn emit_curves(reports: &[EvalReport]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.task.method.number(),
            r.bg_method,
            distance_cell(r.task.distance_m),
            r.task.positive_class.map_or_else(|| "all".into(), |c| c.to_string()),
            r.accuracy_mean,
            r.accuracy_std
        ));
    }
    s
}

/// Accuracy of the three aggregation methods at one distance (`None` is
/// the all-distance row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub distance_m: Option<f64>,
    pub method1: Option<f64>,
    pub method2: Option<f64>,
    pub method3: Option<f64>,
}

fn mean_of<'a>(it: impl Iterator<Item = &'a EvalReport>) -> Option<f64> {
    let xs: Vec<f64> = it.map(|r| r.accuracy_mean).collect();
    (!xs.is_empty()).then(|| mean_std(&xs).0)
}

/// Per-distance method comparison plus an all-distance row. Method 1 is
/// averaged over classes (and over distances in the last row), method 2
/// over distances in the last row; method 3 reads its own per-distance
/// and pooled reports.
pub fn table4(reports: &[EvalReport], distances: &[f64]) -> Vec<Table4Row> {
    let of = |m: Aggregation| reports.iter().filter(move |r| r.task.method == m);
    let at = |d: f64| move |r: &&EvalReport| r.task.distance_m.is_some_and(|x| same_distance(x, d));
    let mut rows: Vec<Table4Row> = distances
        .iter()
        .map(|&d| Table4Row {
            distance_m: Some(d),
            method1: mean_of(of(Aggregation::Method1).filter(at(d))),
            method2: mean_of(of(Aggregation::Method2).filter(at(d))),
            method3: mean_of(of(Aggregation::Method3).filter(at(d))),
        })
        .collect();
    rows.push(Table4Row {
        distance_m: None,
        method1: mean_of(of(Aggregation::Method1)),
        method2: mean_of(of(Aggregation::Method2)),
        method3: mean_of(of(Aggregation::Method3).filter(|r| r.task.distance_m.is_none())),
    });
    rows
}

pub fn table4_csv(rows: &[Table4Row]) -> String {
    let cell = |x: Option<f64>| x.map_or_else(String::new, |v| format!("{v:.6}"));
    let mut s = String::from("distance_m,method1,method2,method3\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            distance_cell(r.distance_m),
            cell(r.method1),
            cell(r.method2),
            cell(r.method3)
        ));
    }
    s
}
