//! Label-change statistics over a pruned ensemble and the sequential test
//! that turns them into a per-input verdict.
//!
//! For an input `x`, each pruned model either agrees with the original
//! model's label or not. With `z` disagreements among `n` models and
//! `p1 = η - σ`, `p0 = η + σ`, the log probability ratio is
//!
//! ```text
//! log pr = z ln(p1 / p0) + (n - z) ln((1 - p1) / (1 - p0))
//! ```
//!
//! Disagreements push it down and agreements push it up. The test stops
//! with "adversarial" once `log pr <= ln(β / (1 - α))` and with "normal"
//! once `log pr >= ln((1 - β) / α)`. If the model budget runs out first,
//! the empirical rate `z / n` is compared to `η`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{LabeledSample, Role, SampleKind};
use crate::net::{MaskedModel, NetError};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_BETA: f64 = 0.05;
pub const DEFAULT_SIGMA_FRACTION: f64 = 0.1;
pub const DEFAULT_MAX_MODELS: usize = 100;
pub const DEFAULT_QUANTILE: f64 = 0.95;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("calibration needs {0}")]
    MissingSamples(&'static str),
    #[error("degenerate calibration: {0}")]
    DegenerateCalibration(String),
    #[error("invalid detector parameters: {0}")]
    InvalidParams(String),
    #[error("label cache invalid: {0}")]
    InvalidCache(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Label change rate: the fraction of `labels` differing from `original`.
pub fn lcr(original: usize, labels: &[usize]) -> Result<f64, DetectError> {
    if labels.is_empty() {
        return Err(DetectError::EmptyEnsemble);
    }
    let changed = labels.iter().filter(|&&l| l != original).count();
    Ok(changed as f64 / labels.len() as f64)
}

/// Label change rate of `x` across `ensemble`, relative to `original`.
pub fn lcr_of(
    original: &MaskedModel,
    ensemble: &[MaskedModel],
    x: &[f32],
) -> Result<f64, DetectError> {
    if ensemble.is_empty() {
        return Err(DetectError::EmptyEnsemble);
    }
    let reference = original.predict_label(x)?;
    let labels = ensemble
        .iter()
        .map(|m| m.predict_label(x))
        .collect::<Result<Vec<_>, _>>()?;
    lcr(reference, &labels)
}

/// Error rates, relax rule and model budget of the sequential test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SprtParams {
    pub alpha: f64,
    pub beta: f64,
    /// `σ = sigma_fraction · η`.
    pub sigma_fraction: f64,
    pub max_models: usize,
}

impl Default for SprtParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            max_models: DEFAULT_MAX_MODELS,
        }
    }
}

impl SprtParams {
    pub fn validate(&self) -> Result<(), DetectError> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.alpha) || !unit(self.beta) || self.alpha + self.beta >= 1.0 {
            return Err(DetectError::InvalidParams(format!(
                "need 0 < alpha, beta and alpha + beta < 1 (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        if !(self.sigma_fraction > 0.0 && self.sigma_fraction.is_finite()) {
            return Err(DetectError::InvalidParams("sigma_fraction must be positive".into()));
        }
        if self.max_models == 0 {
            return Err(DetectError::InvalidParams("max_models must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    /// LCR threshold η.
    pub threshold: f64,
    /// Relax scale σ; neither hypothesis is rejected inside `(η - σ, η + σ)`.
    pub sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_models: usize,
    /// σ was shrunk to keep `η ± σ` inside `(0, 1)`.
    pub sigma_clamped: bool,
}

impl DetectorCalibration {
    /// Calibration for threshold `η` with `σ = sigma_fraction · η`, shrunk to
    /// half the distance to 0 or 1 when `η ± σ` would leave `(0, 1)`.
    pub fn new(threshold: f64, params: &SprtParams) -> Result<Self, DetectError> {
        params.validate()?;
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(DetectError::DegenerateCalibration(format!(
                "threshold {threshold} outside (0, 1)"
            )));
        }
        let mut sigma = params.sigma_fraction * threshold;
        let mut clamped = false;
        if threshold - sigma <= 0.0 {
            sigma = threshold / 2.0;
            clamped = true;
        }
        if threshold + sigma >= 1.0 {
            sigma = (1.0 - threshold) / 2.0;
            clamped = true;
        }
        if clamped {
            log::warn!("relax scale clamped to {sigma} for threshold {threshold}");
        }
        let cal = Self {
            threshold,
            sigma,
            alpha: params.alpha,
            beta: params.beta,
            max_models: params.max_models,
            sigma_clamped: clamped,
        };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        SprtParams {
            alpha: self.alpha,
            beta: self.beta,
            sigma_fraction: 1.0,
            max_models: self.max_models,
        }
        .validate()?;
        if !(self.p1() > 0.0 && self.p0() < 1.0 && self.sigma > 0.0) {
            return Err(DetectError::InvalidParams(format!(
                "need 0 < η - σ and η + σ < 1 (η={}, σ={})",
                self.threshold, self.sigma
            )));
        }
        Ok(())
    }

    /// Disagreement rate under the adversarial hypothesis, `η + σ`.
    pub fn p0(&self) -> f64 {
        self.threshold + self.sigma
    }

    /// Disagreement rate under the normal hypothesis, `η - σ`.
    pub fn p1(&self) -> f64 {
        self.threshold - self.sigma
    }

    /// Deny bound `ln(β / (1 - α))`.
    pub fn deny_bound(&self) -> f64 {
        (self.beta / (1.0 - self.alpha)).ln()
    }

    /// Accept bound `ln((1 - β) / α)`.
    pub fn accept_bound(&self) -> f64 {
        ((1.0 - self.beta) / self.alpha).ln()
    }

    /// Log probability ratio after `n` models with `z` disagreements.
    pub fn log_ratio(&self, n: usize, z: usize) -> f64 {
        let (p0, p1) = (self.p0(), self.p1());
        z as f64 * (p1 / p0).ln() + (n - z) as f64 * ((1.0 - p1) / (1.0 - p0)).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CalibrationMode {
    /// Maximize true-positive minus false-positive rate over observed LCRs.
    Youden,
    /// Use this quantile of the normal samples' LCRs.
    Quantile(f64),
}

/// Chooses η from LCR scores.
///
/// Youden mode scans each distinct observed LCR `t` as the rule
/// "adversarial iff LCR ≥ t", keeps the first `t` maximizing TPR − FPR, and
/// returns the midpoint between `t` and the next lower observed value.
/// Quantile mode interpolates linearly between order statistics of the
/// normal scores.
pub fn calibrate_from_scores(
    normal: &[f64],
    adversarial: &[f64],
    mode: CalibrationMode,
    params: &SprtParams,
) -> Result<DetectorCalibration, DetectError> {
    if normal.is_empty() {
        return Err(DetectError::MissingSamples("normal samples"));
    }
    let threshold = match mode {
        CalibrationMode::Youden => {
            if adversarial.is_empty() {
                return Err(DetectError::MissingSamples("adversarial samples in youden mode"));
            }
            youden_threshold(normal, adversarial)?
        }
        CalibrationMode::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(DetectError::InvalidParams(format!("quantile {q} outside [0, 1]")));
            }
            if normal.iter().all(|&v| v == normal[0]) {
                return Err(DetectError::DegenerateCalibration(format!(
                    "all normal LCRs equal {}",
                    normal[0]
                )));
            }
            quantile(normal, q)
        }
    };
    DetectorCalibration::new(threshold, params)
}

fn youden_threshold(normal: &[f64], adversarial: &[f64]) -> Result<f64, DetectError> {
    let mut values: Vec<f64> = normal.iter().chain(adversarial).copied().collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    if values.len() < 2 {
        return Err(DetectError::DegenerateCalibration(format!(
            "all LCRs equal {}",
            values[0]
        )));
    }
    let rate = |scores: &[f64], t: f64| {
        scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64
    };
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, &t) in values.iter().enumerate() {
        let j = rate(adversarial, t) - rate(normal, t);
        if j > best.0 {
            best = (j, i);
        }
    }
    let (j, i) = best;
    if i == 0 || j <= 0.0 {
        return Err(DetectError::DegenerateCalibration(
            "no threshold separates adversarial from normal scores".into(),
        ));
    }
    Ok((values[i - 1] + values[i]) / 2.0)
}

fn quantile(scores: &[f64], q: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Computes LCRs of both sample sets and calibrates from them.
pub fn calibrate(
    original: &MaskedModel,
    ensemble: &[MaskedModel],
    normal: &[LabeledSample],
    adversarial: &[LabeledSample],
    mode: CalibrationMode,
    params: &SprtParams,
) -> Result<DetectorCalibration, DetectError> {
    let scores = |set: &[LabeledSample]| {
        set.par_iter()
            .map(|s| lcr_of(original, ensemble, &s.x))
            .collect::<Result<Vec<_>, _>>()
    };
    calibrate_from_scores(&scores(normal)?, &scores(adversarial)?, mode, params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Adversarial,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    /// The budget ran out before either bound was crossed; `decision` then
    /// comes from comparing `z / n` with η.
    pub fallback: bool,
    pub models_used: usize,
    pub label_changes: usize,
    pub log_ratio: f64,
}

/// Incremental sequential test over a stream of agree/disagree outcomes.
#[derive(Debug, Clone)]
pub struct Sprt {
    cal: DetectorCalibration,
    n: usize,
    z: usize,
}

impl Sprt {
    pub fn new(cal: DetectorCalibration) -> Self {
        Self { cal, n: 0, z: 0 }
    }

    /// Records one model's outcome; returns a verdict once a bound is
    /// crossed or the budget is spent.
    pub fn observe(&mut self, disagrees: bool) -> Option<Verdict> {
        self.n += 1;
        self.z += usize::from(disagrees);
        let lr = self.cal.log_ratio(self.n, self.z);
        let decided = if lr <= self.cal.deny_bound() {
            Some(Decision::Adversarial)
        } else if lr >= self.cal.accept_bound() {
            Some(Decision::Normal)
        } else {
            None
        };
        match decided {
            Some(decision) => Some(self.verdict(decision, false, lr)),
            None if self.n >= self.cal.max_models => Some(self.fallback()),
            None => None,
        }
    }

    /// Verdict from the empirical rate, for when the stream ends early.
    pub fn fallback(&self) -> Verdict {
        let rate = self.z as f64 / self.n as f64;
        let decision = if rate >= self.cal.threshold {
            Decision::Adversarial
        } else {
            Decision::Normal
        };
        self.verdict(decision, true, self.cal.log_ratio(self.n, self.z))
    }

    fn verdict(&self, decision: Decision, fallback: bool, log_ratio: f64) -> Verdict {
        Verdict {
            decision,
            fallback,
            models_used: self.n,
            label_changes: self.z,
            log_ratio,
        }
    }
}

/// Runs the test over `disagreements`, in order, consuming at most
/// `cal.max_models` of them.
pub fn sprt_decide<I>(cal: &DetectorCalibration, disagreements: I) -> Result<Verdict, DetectError>
where
    I: IntoIterator<Item = Result<bool, DetectError>>,
{
    let mut test = Sprt::new(*cal);
    for d in disagreements {
        if let Some(v) = test.observe(d?) {
            return Ok(v);
        }
    }
    if test.n == 0 {
        return Err(DetectError::EmptyEnsemble);
    }
    Ok(test.fallback())
}

/// Queries pruned models one at a time, stopping as soon as the test
/// decides.
pub fn sprt_detect(
    original: &MaskedModel,
    ensemble: &[MaskedModel],
    x: &[f32],
    cal: &DetectorCalibration,
) -> Result<Verdict, DetectError> {
    let reference = original.predict_label(x)?;
    sprt_decide(
        cal,
        ensemble
            .iter()
            .map(|m| Ok(m.predict_label(x)? != reference)),
    )
}

/// Every ensemble member's label for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub role: Role,
    pub kind: SampleKind,
    /// Position of the sample within its role's list.
    pub position: usize,
    pub y_true: usize,
    pub original_label: usize,
    pub labels: Vec<usize>,
}

impl LabelRow {
    pub fn sample_id(&self) -> String {
        let role = match self.role {
            Role::Calibration => "cal",
            Role::Evaluation => "eval",
        };
        format!("{role}:{}:{}", self.kind, self.position)
    }

    fn parse_id(id: &str) -> Option<(Role, SampleKind, usize)> {
        let mut parts = id.split(':');
        let role = match parts.next()? {
            "cal" => Role::Calibration,
            "eval" => Role::Evaluation,
            _ => return None,
        };
        let kind = match parts.next()? {
            "normal" => SampleKind::Normal,
            "WL" => SampleKind::Wl,
            "FGSM" => SampleKind::Fgsm,
            _ => return None,
        };
        let position = parts.next()?.parse().ok()?;
        parts.next().is_none().then_some((role, kind, position))
    }

    pub fn lcr(&self) -> Result<f64, DetectError> {
        lcr(self.original_label, &self.labels)
    }

    pub fn verdict(&self, cal: &DetectorCalibration) -> Result<Verdict, DetectError> {
        sprt_decide(cal, self.labels.iter().map(|&l| Ok(l != self.original_label)))
    }
}

/// Cached labels of every sample under the original model and each pruned
/// model, so detection can be rerun without inference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelMatrix {
    pub model_count: usize,
    pub rows: Vec<LabelRow>,
}

impl LabelMatrix {
    pub fn compute<'a>(
        original: &MaskedModel,
        ensemble: &[MaskedModel],
        samples: impl IntoIterator<Item = (Role, usize, &'a LabeledSample)>,
    ) -> Result<Self, DetectError> {
        if ensemble.is_empty() {
            return Err(DetectError::EmptyEnsemble);
        }
        let samples: Vec<_> = samples.into_iter().collect();
        let rows = samples
            .par_iter()
            .map(|&(role, position, s)| {
                Ok(LabelRow {
                    role,
                    kind: s.kind,
                    position,
                    y_true: s.y_true,
                    original_label: original.predict_label(&s.x)?,
                    labels: ensemble
                        .iter()
                        .map(|m| m.predict_label(&s.x))
                        .collect::<Result<_, _>>()?,
                })
            })
            .collect::<Result<Vec<_>, DetectError>>()?;
        Ok(Self {
            model_count: ensemble.len(),
            rows,
        })
    }

    /// CSV with header `sample_id,y_true,original_label,m0,m1,...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DetectError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["sample_id".to_owned(), "y_true".into(), "original_label".into()];
        header.extend((0..self.model_count).map(|i| format!("m{i}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.sample_id(),
                row.y_true.to_string(),
                row.original_label.to_string(),
            ];
            rec.extend(row.labels.iter().map(usize::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, DetectError> {
        let mut r = csv::Reader::from_reader(input);
        let width = r.headers()?.len();
        if width < 4 {
            return Err(DetectError::InvalidCache("no model columns".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || DetectError::InvalidCache(format!("row {i}"));
            let (role, kind, position) = LabelRow::parse_id(&rec[0]).ok_or_else(bad)?;
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
            rows.push(LabelRow {
                role,
                kind,
                position,
                y_true: num(&rec[1])?,
                original_label: num(&rec[2])?,
                labels: rec.iter().skip(3).map(num).collect::<Result<_, _>>()?,
            });
        }
        Ok(Self {
            model_count: width - 3,
            rows,
        })
    }

    pub fn rows_for(&self, role: Role) -> impl Iterator<Item = &LabelRow> {
        self.rows.iter().filter(move |r| r.role == role)
    }
}

/// Aggregate detection outcome for one group of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub count: usize,
    /// Adversarial kinds count as correct when flagged adversarial, normal
    /// samples when flagged normal.
    pub detection_accuracy: f64,
    pub mean_models_used: f64,
    pub mean_lcr: f64,
    pub fallback_rate: f64,
}

pub fn detection_stats<'a>(
    rows: impl IntoIterator<Item = &'a LabelRow>,
    cal: &DetectorCalibration,
) -> Result<DetectionStats, DetectError> {
    let (mut count, mut correct, mut used, mut lcr_sum, mut fallbacks) = (0usize, 0usize, 0usize, 0.0, 0usize);
    for row in rows {
        let v = row.verdict(cal)?;
        let want = if row.kind.is_adversarial() {
            Decision::Adversarial
        } else {
            Decision::Normal
        };
        count += 1;
        correct += usize::from(v.decision == want);
        used += v.models_used;
        lcr_sum += row.lcr()?;
        fallbacks += usize::from(v.fallback);
    }
    let per = |v: f64| if count == 0 { 0.0 } else { v / count as f64 };
    Ok(DetectionStats {
        count,
        detection_accuracy: per(correct as f64),
        mean_models_used: per(used as f64),
        mean_lcr: per(lcr_sum),
        fallback_rate: per(fallbacks as f64),
    })
}

/// Per-kind detection results over `samples`, in kind order
/// (normal, WL, FGSM); kinds without samples are omitted.
pub fn evaluate_detection(
    original: &MaskedModel,
    ensemble: &[MaskedModel],
    samples: &[LabeledSample],
    cal: &DetectorCalibration,
) -> Result<Vec<(SampleKind, DetectionStats)>, DetectError> {
    let matrix = LabelMatrix::compute(
        original,
        ensemble,
        samples.iter().enumerate().map(|(i, s)| (Role::Evaluation, i, s)),
    )?;
    let mut out = Vec::new();
    for kind in [SampleKind::Normal, SampleKind::Wl, SampleKind::Fgsm] {
        let rows: Vec<_> = matrix.rows.iter().filter(|r| r.kind == kind).collect();
        if !rows.is_empty() {
            out.push((kind, detection_stats(rows, cal)?));
        }
    }
    Ok(out)
}
