//! Grounding accuracy at IoU thresholds, with unique/multiple breakdowns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenegen::{iou, Box3D, SubsetTag};

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];
pub const METRICS_HEADER: &str = "subset,thresh,accuracy,n";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted: Box3D,
    pub ground_truth: Box3D,
    pub subset_tag: SubsetTag,
}

/// Percentage of records whose IoU strictly exceeds `threshold`.
pub fn acc_at_iou(records: &[EvalRecord], threshold: f64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let hits = records.iter().filter(|r| iou(&r.predicted, &r.ground_truth) > threshold).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Percentage of positions where the predicted index equals the target index.
pub fn match_rate(predicted: &[usize], target: &[usize]) -> Result<f64> {
    assert_eq!(predicted.len(), target.len(), "length mismatch");
    if predicted.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let hits = predicted.iter().zip(target).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / predicted.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subset: String,
    pub thresh: f64,
    pub accuracy: f64,
    pub n: usize,
}

/// `{unique, multiple, overall} × thresholds`; subsets with no records are left out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub rows: Vec<MetricRow>,
}

impl Breakdown {
    pub fn get(&self, subset: &str, thresh: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.subset == subset && r.thresh == thresh).map(|r| r.accuracy)
    }

    pub fn overall(&self, thresh: f64) -> f64 {
        self.get("overall", thresh).expect("overall row present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{}", r.subset, r.thresh, r.accuracy, r.n).expect("write to string");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad = |line: usize, message: String| Error::Parse { path: "metrics".into(), line: line + 1, message };
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_HEADER => {}
            _ => return Err(bad(0, format!("expected header `{METRICS_HEADER}`"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(i, e.to_string()));
            rows.push(MetricRow {
                subset: f[0].to_string(),
                thresh: num(f[1])?,
                accuracy: num(f[2])?,
                n: f[3].trim().parse().map_err(|e: std::num::ParseIntError| bad(i, e.to_string()))?,
            });
        }
        if rows.is_empty() {
            return Err(bad(1, "no data rows".into()));
        }
        Ok(Self { rows })
    }
}

pub fn breakdown(records: &[EvalRecord]) -> Result<Breakdown> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    let mut rows = Vec::new();
    let subsets: [(&str, Option<SubsetTag>); 3] =
        [("unique", Some(SubsetTag::Unique)), ("multiple", Some(SubsetTag::Multiple)), ("overall", None)];
    for (name, tag) in subsets {
        let part: Vec<EvalRecord> = records.iter().filter(|r| tag.is_none_or(|t| r.subset_tag == t)).copied().collect();
        if part.is_empty() {
            continue;
        }
        for t in THRESHOLDS {
            rows.push(MetricRow { subset: name.into(), thresh: t, accuracy: acc_at_iou(&part, t)?, n: part.len() });
        }
    }
    Ok(Breakdown { rows })
}
