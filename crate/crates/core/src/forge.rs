//! Evaluation corpus: a procedural labeled dataset plus the adversarial
//! inputs derived from it (FGSM and wrongly-labeled samples).

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{argmax, MaskedModel, NetError, Shape};
use crate::rng;

pub const DEFAULT_EPSILON: f64 = 0.03;
pub const DEFAULT_CONFIDENCE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("dataset needs at least 2 classes and 10 samples per class (got {classes}, {per_class})")]
    DatasetTooSmall { classes: usize, per_class: usize },
    #[error("invalid dataset parameter: {0}")]
    InvalidParam(String),
    #[error("perturbation scale must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("source sample is misclassified by the original model")]
    Misclassified,
    #[error("confidence threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("corpus file invalid: {0}")]
    InvalidCorpus(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub classes: usize,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub shape: Shape,
    /// Scale of each class prototype around mid-grey; larger separates
    /// classes further.
    pub contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.classes < 2 || self.per_class < 10 {
            return Err(ForgeError::DatasetTooSmall {
                classes: self.classes,
                per_class: self.per_class,
            });
        }
        if self.shape.contains(&0) {
            return Err(ForgeError::InvalidParam("shape has a zero dimension".into()));
        }
        if !(self.contrast.is_finite() && self.contrast > 0.0) {
            return Err(ForgeError::InvalidParam("contrast must be positive".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(ForgeError::InvalidParam("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Class-conditional patterns with additive Gaussian noise, clipped to
/// `[0, 1]`. Each class has a smoothed random prototype; a sample is
/// `0.5 + contrast * (prototype - 0.5) + noise`. Every class is split
/// 70/15/15 into train/validation/test, and each split is shuffled.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Dataset, ForgeError> {
    cfg.validate()?;
    let mut r = rng::seeded(cfg.seed);
    let len = crate::net::shape_len(&cfg.shape);
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| prototype(&cfg.shape, &mut r))
        .collect();
    let noise = Normal::new(0.0, cfg.noise).expect("noise validated");

    let n_train = cfg.per_class * 70 / 100;
    let n_val = cfg.per_class * 15 / 100;
    let mut ds = Dataset {
        shape: cfg.shape,
        classes: cfg.classes,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (label, proto) in prototypes.iter().enumerate() {
        for i in 0..cfg.per_class {
            let x: Vec<f32> = (0..len)
                .map(|p| {
                    let v = 0.5 + cfg.contrast * (proto[p] - 0.5) + noise.sample(&mut r);
                    v.clamp(0.0, 1.0) as f32
                })
                .collect();
            let ex = Example { x, label };
            match i {
                i if i < n_train => ds.train.push(ex),
                i if i < n_train + n_val => ds.validation.push(ex),
                _ => ds.test.push(ex),
            }
        }
    }
    ds.train.shuffle(&mut r);
    ds.validation.shuffle(&mut r);
    ds.test.shuffle(&mut r);
    Ok(ds)
}

/// Uniform noise smoothed with a 3x3 box filter per channel, then
/// stretched to span `[0, 1]`.
fn prototype(shape: &Shape, r: &mut rng::Rng) -> Vec<f64> {
    let [c, h, w] = *shape;
    let raw: Vec<f64> = (0..c * h * w).map(|_| r.random_range(0.0..1.0)).collect();
    let mut smooth = vec![0.0; raw.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (mut sum, mut cnt) = (0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        sum += raw[(ch * h + yy) * w + xx];
                        cnt += 1.0;
                    }
                }
                smooth[(ch * h + y) * w + x] = sum / cnt;
            }
        }
    }
    let lo = smooth.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    smooth.into_iter().map(|v| (v - lo) / span).collect()
}

/// Reads labeled tensors from CSV: one row per sample, the label first and
/// then `input_len` values. No header row.
pub fn load_csv_examples(path: &Path, input_len: usize) -> Result<Vec<Example>, ForgeError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != input_len + 1 {
            return Err(ForgeError::InvalidParam(format!(
                "row {row}: {} fields, expected {}",
                record.len(),
                input_len + 1
            )));
        }
        let bad = |what: &str| ForgeError::InvalidParam(format!("row {row}: bad {what}"));
        let label = record[0].trim().parse().map_err(|_| bad("label"))?;
        let x = record
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f32>().map_err(|_| bad("value")))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Example { x, label });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SampleKind {
    #[serde(rename = "normal")]
    Normal,
    #[serde(rename = "WL")]
    Wl,
    #[serde(rename = "FGSM")]
    Fgsm,
}

impl SampleKind {
    pub fn is_adversarial(self) -> bool {
        !matches!(self, SampleKind::Normal)
    }
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleKind::Normal => "normal",
            SampleKind::Wl => "WL",
            SampleKind::Fgsm => "FGSM",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x: Vec<f32>,
    pub y_true: usize,
    pub kind: SampleKind,
    /// The original model's label for `x`.
    pub predicted: usize,
    /// The original model's probability for `predicted`.
    pub confidence: f64,
    /// Index of the clean example this sample came from.
    pub source_index: usize,
}

fn to_sample(
    original: &MaskedModel,
    x: Vec<f32>,
    y_true: usize,
    kind: SampleKind,
    source_index: usize,
) -> Result<LabeledSample, NetError> {
    let probs = original.forward(&x)?;
    let predicted = argmax(&probs);
    Ok(LabeledSample {
        x,
        y_true,
        kind,
        predicted,
        confidence: f64::from(probs[predicted]),
        source_index,
    })
}

/// Test examples the original model classifies correctly, as normal samples.
pub fn normal_samples(
    original: &MaskedModel,
    examples: &[Example],
) -> Result<Vec<LabeledSample>, ForgeError> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let s = to_sample(original, ex.x.clone(), ex.label, SampleKind::Normal, i)?;
        if s.predicted == s.y_true {
            out.push(s);
        }
    }
    Ok(out)
}

/// Test examples the original model gets wrong, unperturbed.
pub fn harvest_wl(
    original: &MaskedModel,
    examples: &[Example],
) -> Result<Vec<LabeledSample>, ForgeError> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let s = to_sample(original, ex.x.clone(), ex.label, SampleKind::Wl, i)?;
        if s.predicted != s.y_true {
            out.push(s);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FgsmOutcome {
    Adversarial(LabeledSample),
    NotFooled,
}

/// Single-step fast gradient sign attack:
/// `x' = clip(x + eps * sign(grad_x loss(x, y)), 0, 1)`.
pub fn fgsm(
    original: &MaskedModel,
    example: &Example,
    source_index: usize,
    epsilon: f64,
) -> Result<FgsmOutcome, ForgeError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(ForgeError::InvalidEpsilon(epsilon));
    }
    if original.predict_label(&example.x)? != example.label {
        return Err(ForgeError::Misclassified);
    }
    let grad = original.grad_input(&example.x, example.label)?;
    let eps = epsilon as f32;
    let x: Vec<f32> = example
        .x
        .iter()
        .zip(&grad)
        .map(|(&v, &g)| {
            let step = if g > 0.0 {
                eps
            } else if g < 0.0 {
                -eps
            } else {
                0.0
            };
            (v + step).clamp(0.0, 1.0)
        })
        .collect();
    let sample = to_sample(original, x, example.label, SampleKind::Fgsm, source_index)?;
    Ok(if sample.predicted != sample.y_true {
        FgsmOutcome::Adversarial(sample)
    } else {
        FgsmOutcome::NotFooled
    })
}

/// Attacks every correctly classified example, keeping the successes.
pub fn fgsm_batch(
    original: &MaskedModel,
    examples: &[Example],
    epsilon: f64,
) -> Result<Vec<LabeledSample>, ForgeError> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        match fgsm(original, ex, i, epsilon) {
            Ok(FgsmOutcome::Adversarial(s)) => out.push(s),
            Ok(FgsmOutcome::NotFooled) | Err(ForgeError::Misclassified) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub samples: Vec<LabeledSample>,
    pub requested: usize,
    /// Fewer than `requested` samples qualified.
    pub insufficient: bool,
}

/// Adversarial samples whose original-model confidence exceeds `threshold`,
/// truncated to `count`.
pub fn high_confidence_subset(
    samples: &[LabeledSample],
    threshold: f64,
    count: usize,
) -> Result<Subset, ForgeError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ForgeError::InvalidThreshold(threshold));
    }
    let chosen: Vec<_> = samples
        .iter()
        .filter(|s| s.kind.is_adversarial() && s.confidence > threshold)
        .take(count)
        .cloned()
        .collect();
    Ok(Subset {
        insufficient: chosen.len() < count,
        samples: chosen,
        requested: count,
    })
}

/// Which part of an experiment a corpus sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Calibration,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub calibration: Vec<LabeledSample>,
    pub evaluation: Vec<LabeledSample>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    role: Role,
    kind: SampleKind,
    y_true: usize,
    predicted: usize,
    confidence: f64,
    source_index: usize,
    len: usize,
}

const CORPUS_MAGIC: &[u8; 4] = b"GGTS";
const CORPUS_VERSION: u32 = 1;

impl Corpus {
    /// `b"GGTS" | version u32 | index_len u32 | JSON index | f32 tensors`,
    /// little-endian, tensors in index order.
    pub fn encode(&self) -> Result<Vec<u8>, ForgeError> {
        let entries: Vec<_> = self.iter().map(|(role, s)| IndexEntry {
            role,
            kind: s.kind,
            y_true: s.y_true,
            predicted: s.predicted,
            confidence: s.confidence,
            source_index: s.source_index,
            len: s.x.len(),
        })
        .collect();
        let index = serde_json::to_vec(&entries)?;
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(index.len() as u32).to_le_bytes());
        out.extend_from_slice(&index);
        for (_, s) in self.iter() {
            for v in &s.x {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ForgeError> {
        let bad = |m: &str| ForgeError::InvalidCorpus(m.into());
        if bytes.len() < 12 || &bytes[..4] != CORPUS_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CORPUS_VERSION {
            return Err(bad("unsupported version"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let index = bytes.get(12..12 + len).ok_or_else(|| bad("truncated index"))?;
        let entries: Vec<IndexEntry> = serde_json::from_slice(index)?;
        let mut rest = &bytes[12 + len..];
        let mut corpus = Corpus::default();
        for e in entries {
            let raw = rest.get(..4 * e.len).ok_or_else(|| bad("truncated tensors"))?;
            rest = &rest[4 * e.len..];
            let sample = LabeledSample {
                x: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                y_true: e.y_true,
                kind: e.kind,
                predicted: e.predicted,
                confidence: e.confidence,
                source_index: e.source_index,
            };
            match e.role {
                Role::Calibration => corpus.calibration.push(sample),
                Role::Evaluation => corpus.evaluation.push(sample),
            }
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(corpus)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Role, &LabeledSample)> {
        self.calibration
            .iter()
            .map(|s| (Role::Calibration, s))
            .chain(self.evaluation.iter().map(|s| (Role::Evaluation, s)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{train, ModelSpec, TrainHyper};

    fn cfg(seed: u64) -> DatasetConfig {
        DatasetConfig {
            classes: 4,
            per_class: 200,
            shape: [1, 8, 8],
            contrast: 0.8,
            noise: 0.1,
            seed,
        }
    }

    #[test]
    fn dataset_is_deterministic_and_split() {
        let a = make_dataset(&cfg(1)).unwrap();
        let b = make_dataset(&cfg(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 4 * 140);
        assert_eq!(a.validation.len(), 4 * 30);
        assert_eq!(a.test.len(), 4 * 30);
        assert!(a.train.iter().all(|e| e.x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_ne!(a, make_dataset(&cfg(2)).unwrap());
    }

    #[test]
    fn small_dataset_rejected() {
        let mut c = cfg(1);
        c.per_class = 5;
        assert!(matches!(
            make_dataset(&c),
            Err(ForgeError::DatasetTooSmall { .. })
        ));
        c.per_class = 50;
        c.classes = 1;
        assert!(make_dataset(&c).is_err());
    }

    #[test]
    fn nearest_centroid_separates_high_contrast_data() {
        let mut c = cfg(3);
        c.contrast = 1.0;
        c.noise = 0.05;
        let ds = make_dataset(&c).unwrap();
        let dim = ds.train[0].x.len();
        let mut centroids = vec![vec![0.0f64; dim]; ds.classes];
        let mut counts = vec![0usize; ds.classes];
        for ex in &ds.train {
            counts[ex.label] += 1;
            for (c, &v) in centroids[ex.label].iter_mut().zip(&ex.x) {
                *c += f64::from(v);
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let correct = ds
            .test
            .iter()
            .filter(|ex| {
                let dist = |c: &Vec<f64>| {
                    c.iter()
                        .zip(&ex.x)
                        .map(|(a, &b)| (a - f64::from(b)).powi(2))
                        .sum::<f64>()
                };
                let best = (0..ds.classes)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == ex.label
            })
            .count();
        assert!(correct as f64 / ds.test.len() as f64 >= 0.95);
    }

    fn trained() -> (MaskedModel, Dataset) {
        let ds = make_dataset(&cfg(4)).unwrap();
        let spec = ModelSpec::with_widths([1, 8, 8], 4, 8, 8);
        let m = MaskedModel::new(spec, 1).unwrap();
        let hyper = TrainHyper {
            epochs: 5,
            seed: 2,
            ..TrainHyper::default()
        };
        (train(m, &ds.train, &ds.validation, &hyper).unwrap(), ds)
    }

    #[test]
    fn fgsm_properties() {
        let (model, ds) = trained();
        let eps = 0.05;
        let mut fooled = 0;
        for (i, ex) in ds.test.iter().enumerate() {
            match fgsm(&model, ex, i, eps) {
                Ok(FgsmOutcome::Adversarial(s)) => {
                    fooled += 1;
                    assert_ne!(s.predicted, s.y_true);
                    assert_eq!(model.predict_label(&s.x).unwrap(), s.predicted);
                    let linf = s
                        .x
                        .iter()
                        .zip(&ex.x)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f32, f32::max);
                    assert!(linf <= eps as f32 + 1e-7);
                    assert!(s.x.iter().all(|v| (0.0..=1.0).contains(v)));
                }
                Ok(FgsmOutcome::NotFooled) => {}
                Err(ForgeError::Misclassified) => {
                    assert_ne!(model.predict_label(&ex.x).unwrap(), ex.label)
                }
                Err(e) => panic!("{e}"),
            }
            if let Ok(o) = fgsm(&model, ex, i, 0.0) {
                assert_eq!(o, FgsmOutcome::NotFooled);
            }
        }
        assert!(fooled > 0);
        assert!(matches!(
            fgsm(&model, &ds.test[0], 0, -1.0),
            Err(ForgeError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn wl_and_normal_partition_test_set() {
        let (model, ds) = trained();
        let wl = harvest_wl(&model, &ds.test).unwrap();
        let normal = normal_samples(&model, &ds.test).unwrap();
        assert_eq!(wl.len() + normal.len(), ds.test.len());
        assert!(wl.iter().all(|s| s.predicted != s.y_true && s.kind == SampleKind::Wl));
        let acc = crate::net::accuracy(&model, &ds.test).unwrap();
        assert_eq!(wl.len(), ds.test.len() - (acc * ds.test.len() as f64).round() as usize);
    }

    #[test]
    fn perfect_model_has_no_wl() {
        let (model, ds) = trained();
        let right: Vec<Example> = ds
            .test
            .iter()
            .filter(|e| model.predict_label(&e.x).unwrap() == e.label)
            .cloned()
            .collect();
        assert!(harvest_wl(&model, &right).unwrap().is_empty());
    }

    fn sample(conf: f64, kind: SampleKind) -> LabeledSample {
        LabeledSample {
            x: vec![0.0],
            y_true: 0,
            kind,
            predicted: 1,
            confidence: conf,
            source_index: 0,
        }
    }

    #[test]
    fn high_confidence_filter() {
        let s = vec![
            sample(0.95, SampleKind::Fgsm),
            sample(0.5, SampleKind::Fgsm),
            sample(0.99, SampleKind::Normal),
            sample(0.91, SampleKind::Wl),
        ];
        let hc = high_confidence_subset(&s, 0.9, 5).unwrap();
        assert_eq!(hc.samples.len(), 2);
        assert!(hc.insufficient);
        let all = high_confidence_subset(&s, 0.0, 3).unwrap();
        assert_eq!(all.samples.len(), 3);
        assert!(!all.insufficient);
        assert!(high_confidence_subset(&s, 1.0, 1).unwrap().samples.is_empty());
        assert!(high_confidence_subset(&s, 1.5, 1).is_err());
    }

    #[test]
    fn corpus_round_trip() {
        let corpus = Corpus {
            calibration: vec![sample(0.5, SampleKind::Normal)],
            evaluation: vec![sample(0.7, SampleKind::Fgsm), sample(0.2, SampleKind::Wl)],
        };
        let bytes = corpus.encode().unwrap();
        assert_eq!(Corpus::decode(&bytes).unwrap(), corpus);
        assert!(Corpus::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "1,0.5,0.25\n0,1,0\n").unwrap();
        let ex = load_csv_examples(&path, 2).unwrap();
        assert_eq!(ex[0], Example { x: vec![0.5, 0.25], label: 1 });
        assert!(load_csv_examples(&path, 3).is_err());
    }
}
