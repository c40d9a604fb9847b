//! Separation metrics over LCR scores and the experiment report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{detection_stats, DetectError, DetectorCalibration, LabelRow};
use crate::forge::SampleKind;

pub const REPORT_SCHEMA: &str = "ggt-report/1";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} scores are empty")]
    EmptyScores(&'static str),
    #[error("report has no rows")]
    EmptyReport,
    #[error("unsupported report schema {0:?}")]
    Schema(String),
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Detect(#[from] DetectError),
}

/// Probability that a random adversarial score exceeds a random normal one,
/// ties counting one half. Computed from midranks of the pooled scores.
pub fn auroc(normal: &[f64], adversarial: &[f64]) -> Result<f64, MetricsError> {
    if normal.is_empty() {
        return Err(MetricsError::EmptyScores("normal"));
    }
    if adversarial.is_empty() {
        return Err(MetricsError::EmptyScores("adversarial"));
    }
    let mut pooled: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the adversarial rank sum keeps midranks integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let adv_in_tie = pooled[i..j].iter().filter(|p| p.1).count() as u128;
        // ranks i+1..=j, midrank (i + 1 + j) / 2
        rank_sum2 += adv_in_tie * (i + 1 + j) as u128;
        i = j;
    }
    let (n, m) = (normal.len() as u128, adversarial.len() as u128);
    // U = R - m(m+1)/2; doubled.
    let u2 = rank_sum2 - m * (m + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

/// Ratio of mean adversarial LCR to mean normal LCR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Separation {
    Ratio(f64),
    /// Every normal sample had LCR 0 while some adversarial sample did not.
    Unbounded,
}

impl Serialize for Separation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Separation::Ratio(v) => s.serialize_f64(*v),
            Separation::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Separation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Separation::Ratio(v)),
            Raw::Text(t) if t == "unbounded" => Ok(Separation::Unbounded),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("bad separation {t:?}"))),
        }
    }
}

impl Separation {
    pub fn exceeds(&self, bound: f64) -> bool {
        match self {
            Separation::Ratio(v) => *v > bound,
            Separation::Unbounded => true,
        }
    }
}

/// DSD = mean(adversarial) / mean(normal). When both means are 0 the
/// distributions coincide and the ratio is taken as 1.
pub fn dsd(normal: &[f64], adversarial: &[f64]) -> Result<Separation, MetricsError> {
    let mean = |v: &[f64], name| {
        if v.is_empty() {
            Err(MetricsError::EmptyScores(name))
        } else {
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let (ln, la) = (mean(normal, "normal")?, mean(adversarial, "adversarial")?);
    Ok(match (ln == 0.0, la == 0.0) {
        (true, true) => Separation::Ratio(1.0),
        (true, false) => Separation::Unbounded,
        _ => Separation::Ratio(la / ln),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `normal`, `WL` or `FGSM`.
    pub attack: String,
    pub count: usize,
    pub detection_accuracy: f64,
    pub mean_models_used: f64,
    pub mean_lcr: f64,
    /// Against the normal row; absent on the normal row itself.
    pub auroc: Option<f64>,
    pub dsd: Option<Separation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub nodes: usize,
    pub degree: usize,
    pub aspl_bin: String,
    pub ensemble_size: usize,
    /// Name and SHA-256 of each accepted model's graph, in query order.
    pub graphs: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema: String,
    pub ensemble: EnsembleMeta,
    pub seeds: BTreeMap<String, u64>,
    pub calibration: DetectorCalibration,
    pub rows: Vec<ReportRow>,
}

/// One row per sample kind present in `rows` (normal first). Adversarial
/// rows are compared against the normal row's LCRs.
pub fn report_rows<'a>(
    rows: impl IntoIterator<Item = &'a LabelRow>,
    cal: &DetectorCalibration,
) -> Result<Vec<ReportRow>, MetricsError> {
    let mut by_kind: BTreeMap<SampleKind, Vec<&LabelRow>> = BTreeMap::new();
    for r in rows {
        by_kind.entry(r.kind).or_default().push(r);
    }
    let normal_lcr = match by_kind.get(&SampleKind::Normal) {
        Some(rows) => Some(row_lcrs(rows)?),
        None => None,
    };
    by_kind
        .iter()
        .map(|(kind, rows)| {
            let reference = normal_lcr.as_deref().filter(|_| kind.is_adversarial());
            report_row(kind.to_string(), rows, reference, cal)
        })
        .collect()
}

/// A single report row. With `normal_lcr`, AUROC and DSD of these rows'
/// LCRs against it are filled in.
pub fn report_row(
    attack: String,
    rows: &[&LabelRow],
    normal_lcr: Option<&[f64]>,
    cal: &DetectorCalibration,
) -> Result<ReportRow, MetricsError> {
    let stats = detection_stats(rows.iter().copied(), cal)?;
    let (auroc_v, dsd_v) = match normal_lcr {
        Some(normal) if !rows.is_empty() => {
            let adv = row_lcrs(rows)?;
            (Some(auroc(normal, &adv)?), Some(dsd(normal, &adv)?))
        }
        _ => (None, None),
    };
    Ok(ReportRow {
        attack,
        count: stats.count,
        detection_accuracy: stats.detection_accuracy,
        mean_models_used: stats.mean_models_used,
        mean_lcr: stats.mean_lcr,
        auroc: auroc_v,
        dsd: dsd_v,
    })
}

pub fn row_lcrs(rows: &[&LabelRow]) -> Result<Vec<f64>, MetricsError> {
    Ok(rows.iter().map(|r| r.lcr()).collect::<Result<_, _>>()?)
}

impl EvaluationReport {
    pub fn new(
        ensemble: EnsembleMeta,
        seeds: BTreeMap<String, u64>,
        calibration: DetectorCalibration,
        rows: Vec<ReportRow>,
    ) -> Result<Self, MetricsError> {
        let report = Self {
            schema: REPORT_SCHEMA.to_owned(),
            ensemble,
            seeds,
            calibration,
            rows,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.schema != REPORT_SCHEMA {
            return Err(MetricsError::Schema(self.schema.clone()));
        }
        if self.rows.is_empty() {
            return Err(MetricsError::EmptyReport);
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        for r in &self.rows {
            if !unit(r.detection_accuracy) || !unit(r.mean_lcr) || !r.auroc.is_none_or(unit) {
                return Err(MetricsError::Invalid(format!("row {} has a rate outside [0, 1]", r.attack)));
            }
            if r.mean_models_used > self.calibration.max_models as f64 {
                return Err(MetricsError::Invalid(format!(
                    "row {} uses more than {} models",
                    r.attack, self.calibration.max_models
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, attack: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.attack == attack)
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        self.validate()?;
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let report: Self = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// Aligned table with six significant digits.
    pub fn render_text(&self) -> Result<String, MetricsError> {
        self.validate()?;
        let e = &self.ensemble;
        let c = &self.calibration;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "ensemble: N={} k={} bin={} size={}",
            e.nodes, e.degree, e.aspl_bin, e.ensemble_size
        );
        let _ = writeln!(
            out,
            "detector: eta={} sigma={} alpha={} beta={} m={}",
            sig6(c.threshold),
            sig6(c.sigma),
            sig6(c.alpha),
            sig6(c.beta),
            c.max_models
        );
        let header = ["attack", "count", "accuracy", "models_used", "mean_lcr", "auroc", "dsd"];
        let mut table: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
        for r in &self.rows {
            table.push(vec![
                r.attack.clone(),
                r.count.to_string(),
                sig6(r.detection_accuracy),
                sig6(r.mean_models_used),
                sig6(r.mean_lcr),
                r.auroc.map_or("-".into(), sig6),
                match r.dsd {
                    None => "-".into(),
                    Some(Separation::Unbounded) => "unbounded".into(),
                    Some(Separation::Ratio(v)) => sig6(v),
                },
            ]);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|col| table.iter().map(|row| row[col].len()).max().unwrap_or(0))
            .collect();
        for row in &table {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (cell, &w))| {
                    if i == 0 {
                        format!("{cell:<w$}")
                    } else {
                        format!("{cell:>w$}")
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        Ok(out)
    }
}

/// `v` rounded to six significant digits, without exponent.
pub fn sig6(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).max(0) as usize;
    let s = format!("{v:.decimals$}");
    // Rounding can carry into a new digit (9.999995 -> 10.00000).
    if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 6 && decimals > 0 {
        let d = decimals - 1;
        return format!("{v:.d$}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(normal: &[f64], adversarial: &[f64]) -> f64 {
        let mut wins2 = 0u64;
        for &a in adversarial {
            for &n in normal {
                wins2 += if a > n { 2 } else if a == n { 1 } else { 0 };
            }
        }
        wins2 as f64 / (2 * normal.len() * adversarial.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 0.1], &[0.2, 0.3]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1], &[0.1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.4], &[0.2, 0.3]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.3, 0.4], &[0.1]).unwrap(), 0.0);
        assert!(auroc(&[], &[0.1]).is_err());
    }

    #[test]
    fn auroc_with_ties_matches_pairs() {
        let n = [0.0, 0.0, 0.1, 0.2, 0.2];
        let a = [0.0, 0.2, 0.2, 0.5];
        assert_eq!(auroc(&n, &a).unwrap(), pairwise(&n, &a));
    }

    #[test]
    fn dsd_examples() {
        assert_eq!(dsd(&[0.05, 0.05], &[0.5]).unwrap(), Separation::Ratio(10.0));
        assert_eq!(dsd(&[0.2, 0.4], &[0.4, 0.2]).unwrap(), Separation::Ratio(1.0));
        assert_eq!(dsd(&[0.0, 0.0], &[0.3]).unwrap(), Separation::Unbounded);
        assert_eq!(dsd(&[0.0], &[0.0]).unwrap(), Separation::Ratio(1.0));
        assert!(Separation::Unbounded.exceeds(2.0));
        assert_eq!(serde_json::to_string(&Separation::Unbounded).unwrap(), "\"unbounded\"");
        let back: Separation = serde_json::from_str("2.5").unwrap();
        assert_eq!(back, Separation::Ratio(2.5));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(12.3456789), "12.3457");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(9.999996), "10.0000");
        assert_eq!(sig6(0.0), "0");
    }

    fn sample_report(rows: Vec<ReportRow>) -> Result<EvaluationReport, MetricsError> {
        EvaluationReport::new(
            EnsembleMeta {
                nodes: 64,
                degree: 3,
                aspl_bin: "3-5".into(),
                ensemble_size: 16,
                graphs: vec![("g0".into(), "ab".into())],
            },
            BTreeMap::from([("master".to_string(), 7)]),
            DetectorCalibration::new(0.2, &Default::default()).unwrap(),
            rows,
        )
    }

    #[test]
    fn report_round_trip_and_text() {
        let row = ReportRow {
            attack: "FGSM".into(),
            count: 40,
            detection_accuracy: 0.912345678,
            mean_models_used: 17.123456,
            mean_lcr: 0.4,
            auroc: Some(0.987654321),
            dsd: Some(Separation::Ratio(5.5)),
        };
        let report = sample_report(vec![row.clone()]).unwrap();
        let json = report.to_json().unwrap();
        assert_eq!(EvaluationReport::from_json(&json).unwrap(), report);
        let text = report.render_text().unwrap();
        let line = text.lines().find(|l| l.starts_with("FGSM")).unwrap();
        let cells: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cells[2], sig6(row.detection_accuracy));
        assert_eq!(cells[2], "0.912346");
        assert_eq!(cells[5], "0.987654");
        assert!(matches!(sample_report(vec![]), Err(MetricsError::EmptyReport)));
    }

    #[test]
    fn report_rejects_bad_rates() {
        let row = ReportRow {
            attack: "normal".into(),
            count: 1,
            detection_accuracy: 1.5,
            mean_models_used: 1.0,
            mean_lcr: 0.0,
            auroc: None,
            dsd: None,
        };
        assert!(matches!(sample_report(vec![row]), Err(MetricsError::Invalid(_))));
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn scores(tie_heavy: bool) -> impl Strategy<Value = Vec<f64>> {
            let value = if tie_heavy {
                (0u32..4).prop_map(|v| v as f64 / 4.0).boxed()
            } else {
                (0.0f64..1.0).boxed()
            };
            prop::collection::vec(value, 1..=100)
        }

        proptest! {
            #[test]
            fn matches_pairwise_oracle(n in scores(false), a in scores(false)) {
                prop_assert_eq!(auroc(&n, &a).unwrap(), pairwise(&n, &a));
            }

            #[test]
            fn matches_pairwise_oracle_with_ties(n in scores(true), a in scores(true)) {
                prop_assert_eq!(auroc(&n, &a).unwrap(), pairwise(&n, &a));
            }

            #[test]
            fn swapping_complements(n in scores(false), a in scores(false)) {
                let tie_free = n.iter().all(|x| !a.contains(x));
                prop_assume!(tie_free);
                let sum = auroc(&n, &a).unwrap() + auroc(&a, &n).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }

            #[test]
            fn monotone_transform_invariant(n in scores(true), a in scores(false)) {
                let f = |v: &f64| (3.0 * v).exp() - 7.0;
                let n2: Vec<f64> = n.iter().map(f).collect();
                let a2: Vec<f64> = a.iter().map(f).collect();
                prop_assert_eq!(auroc(&n, &a).unwrap(), auroc(&n2, &a2).unwrap());
            }
        }
    }
}
