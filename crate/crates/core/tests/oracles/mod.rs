//! Slow, obviously-correct reference implementations shared by the
//! property suites and the acceptance run.
#![allow(dead_code)]

use ggt_core::detector::{Decision, DetectorCalibration};
use ggt_core::net::{LayerSpec, MaskedModel, ModelSpec};

/// ASPL by Floyd–Warshall over an edge list; `None` when disconnected.
pub fn floyd_warshall_aspl(n: usize, edges: &[(usize, usize)]) -> Option<f64> {
    const INF: u64 = u64::MAX / 4;
    let mut d = vec![INF; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for &(a, b) in edges {
        d[a * n + b] = 1;
        d[b * n + a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    let mut sum = 0u64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                if d[i * n + j] >= INF {
                    return None;
                }
                sum += d[i * n + j];
            }
        }
    }
    Some(sum as f64 / (n * (n - 1)) as f64)
}

pub fn petersen_edges() -> Vec<(usize, usize)> {
    (0..5)
        .flat_map(|i| [(i, (i + 1) % 5), (i, i + 5), (5 + i, 5 + (i + 2) % 5)])
        .collect()
}

pub fn cycle_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i, (i + 1) % n)).collect()
}

/// AUROC as the fraction of (normal, adversarial) pairs ordered correctly,
/// ties counting one half.
pub fn pairwise_auroc(normal: &[f64], adversarial: &[f64]) -> f64 {
    let mut wins2 = 0u64;
    for &a in adversarial {
        for &n in normal {
            wins2 += match a.partial_cmp(&n).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    wins2 as f64 / (2 * normal.len() * adversarial.len()) as f64
}

/// Outcome of running the sequential test over one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stop {
    pub decision: Decision,
    pub models_used: usize,
    pub fallback: bool,
}

/// Sequential test evaluated in probability space: every prefix's
/// likelihood ratio is a fresh product, compared with the untransformed
/// boundaries `beta / (1 - alpha)` and `(1 - beta) / alpha`.
pub fn sprt_by_prefixes(cal: &DetectorCalibration, disagreements: &[bool]) -> Option<Stop> {
    let (p0, p1) = (cal.threshold + cal.sigma, cal.threshold - cal.sigma);
    let deny = cal.beta / (1.0 - cal.alpha);
    let accept = (1.0 - cal.beta) / cal.alpha;
    let limit = disagreements.len().min(cal.max_models);
    for n in 1..=limit {
        let prefix = &disagreements[..n];
        let ratio: f64 = prefix
            .iter()
            .map(|&d| if d { p1 / p0 } else { (1.0 - p1) / (1.0 - p0) })
            .product();
        let decision = if ratio <= deny {
            Some(Decision::Adversarial)
        } else if ratio >= accept {
            Some(Decision::Normal)
        } else {
            None
        };
        if let Some(decision) = decision {
            return Some(Stop {
                decision,
                models_used: n,
                fallback: false,
            });
        }
    }
    if limit == 0 {
        return None;
    }
    let z = disagreements[..limit].iter().filter(|&&d| d).count();
    let decision = if z as f64 / limit as f64 >= cal.threshold {
        Decision::Adversarial
    } else {
        Decision::Normal
    };
    Some(Stop {
        decision,
        models_used: limit,
        fallback: true,
    })
}

/// All `2^n` disagreement patterns of length `n`.
pub fn all_trajectories(n: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << n).map(move |bits| (0..n).map(|i| bits >> i & 1 == 1).collect())
}

/// Central-difference derivative of `f` at `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with a floor so that near-zero derivatives compare on an
/// absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// The same network with every masked weight multiplied out to zero and no
/// plan attached, so it runs the plain dense kernels.
pub fn multiplied_out(model: &MaskedModel<f64>) -> MaskedModel<f64> {
    let mut params = model.params.clone();
    for (layer, p) in params.iter_mut().enumerate() {
        if let Some(mask) = model.mask(layer) {
            for (w, &keep) in p.weight.iter_mut().zip(mask.bits()) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    MaskedModel::from_params(model.spec().clone(), params).expect("same spec")
}

/// A small conv → pool → dense → dense stack whose maskable layers have
/// `channels` channels.
pub fn tiny_spec(in_channels: usize, side: usize, channels: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        input_shape: [in_channels, side, side],
        layers: vec![
            LayerSpec::Conv {
                out_channels: channels,
                kernel: 3,
                padding: 1,
                maskable: false,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: channels,
                kernel: 3,
                padding: 1,
                maskable: true,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2 },
            LayerSpec::Dense {
                units: channels,
                maskable: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                units: classes,
                maskable: false,
            },
        ],
        class_count: classes,
    }
}
