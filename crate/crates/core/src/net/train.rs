use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{LayerParams, MaskedModel, NetError, Real};
use crate::forge::Example;
use crate::graph::RelationalGraph;
use crate::mapping::{self, MappingError};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("only {survivors} pruned models reached the accuracy bar; {required} required")]
    EnsembleTooSmall { survivors: usize, required: usize },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidHyper("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidHyper("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Fraction of `data` the model labels correctly; 0 for an empty set.
pub fn accuracy<T: Real>(model: &MaskedModel<T>, data: &[Example]) -> Result<f64, NetError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for ex in data {
        let x: Vec<T> = ex.x.iter().map(|&v| T::of(f64::from(v))).collect();
        correct += usize::from(model.predict_label(&x)? == ex.label);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minibatch SGD on softmax cross-entropy. Masked weights are re-zeroed
/// after every update. Deterministic for a given `hyper.seed`.
pub fn train<T: Real>(
    mut model: MaskedModel<T>,
    train_set: &[Example],
    validation: &[Example],
    hyper: &TrainHyper,
) -> Result<MaskedModel<T>, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    hyper.validate()?;
    for ex in train_set {
        if ex.label >= model.class_count() {
            return Err(NetError::BadLabel {
                label: ex.label,
                classes: model.class_count(),
            }
            .into());
        }
    }
    let inputs: Vec<Vec<T>> = train_set
        .iter()
        .map(|ex| ex.x.iter().map(|&v| T::of(f64::from(v))).collect())
        .collect();
    let mut rng = rng::seeded(hyper.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grads = model.zero_grads();
            let mut batch_loss = T::zero();
            for &i in batch {
                let loss = match model.accumulate(&inputs[i], train_set[i].label, &mut grads) {
                    Ok(l) => l,
                    Err(NetError::NonFinite { .. }) => {
                        return Err(TrainError::DivergenceDetected { epoch })
                    }
                    Err(e) => return Err(e.into()),
                };
                batch_loss = batch_loss + loss;
            }
            if !batch_loss.is_finite() {
                return Err(TrainError::DivergenceDetected { epoch });
            }
            epoch_loss += batch_loss.as_f64();
            let step = T::of(hyper.learning_rate / batch.len() as f64);
            apply_step(&mut model.params, &grads, step);
            model.enforce_masks();
        }
        final_loss = epoch_loss / train_set.len() as f64;
        debug_assert!(model.masks_respected());
    }

    model.meta.epochs += hyper.epochs;
    model.meta.seed = hyper.seed;
    model.meta.final_loss = final_loss;
    model.meta.train_accuracy = accuracy(&model, train_set)?;
    model.meta.validation_accuracy = accuracy(&model, validation)?;
    Ok(model)
}

fn apply_step<T: Real>(params: &mut [LayerParams<T>], grads: &[LayerParams<T>], step: T) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &gw) in p.weight.iter_mut().zip(&g.weight) {
            *w = *w - step * gw;
        }
        for (b, &gb) in p.bias.iter_mut().zip(&g.bias) {
            *b = *b - step * gb;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    /// Pruned models need validation accuracy ≥ `accept_ratio` × the
    /// original's.
    pub accept_ratio: f64,
    pub min_size: usize,
    /// Stop once this many models are accepted, drawing further graphs only
    /// to replace rejects. `None` trains one model per graph.
    pub target_size: Option<usize>,
    /// Start each pruned model from the original's weights rather than a
    /// fresh initialization.
    pub warm_start: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            accept_ratio: 0.9,
            min_size: 1,
            target_size: None,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub index: usize,
    pub graph_name: String,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub models: Vec<MaskedModel>,
    /// Graph names of the accepted models, parallel to `models`.
    pub graph_names: Vec<String>,
    pub rejected: Vec<Rejection>,
    pub accuracy_bar: f64,
}

/// One pruned model per graph: mask the original, retrain, keep those
/// clearing the accuracy bar. Graphs are consumed in order, in parallel
/// rounds sized to the remaining shortfall; model `i` trains with seed
/// `derive_seed(hyper.seed, i)`.
pub fn build_pruned_ensemble(
    original: &MaskedModel,
    graphs: &[(String, RelationalGraph)],
    train_set: &[Example],
    validation: &[Example],
    hyper: &TrainHyper,
    options: &EnsembleOptions,
) -> Result<Ensemble, TrainError> {
    if options.accept_ratio.is_nan() || options.accept_ratio <= 0.0 {
        return Err(TrainError::InvalidHyper("accept_ratio must be positive".into()));
    }
    hyper.validate()?;
    let bar = options.accept_ratio * original.meta.validation_accuracy;
    let target = options.target_size.unwrap_or(graphs.len());
    let mut ensemble = Ensemble {
        models: Vec::new(),
        graph_names: Vec::new(),
        rejected: Vec::new(),
        accuracy_bar: bar,
    };
    let mut next = 0;
    while ensemble.models.len() < target && next < graphs.len() {
        let round = (target - ensemble.models.len()).min(graphs.len() - next);
        let trained: Vec<MaskedModel> = (next..next + round)
            .into_par_iter()
            .map(|index| {
                let (name, g) = &graphs[index];
                let plan = Arc::new(mapping::plan_for_model(original.spec(), g, name)?);
                let seed = rng::derive_seed(hyper.seed, index as u64);
                let start = if options.warm_start {
                    original.pruned(plan)?
                } else {
                    MaskedModel::new(original.spec().clone(), rng::derive_seed(seed, 1))?.pruned(plan)?
                };
                train(start, train_set, validation, &TrainHyper { seed, ..*hyper })
            })
            .collect::<Result<_, _>>()?;
        for (offset, model) in trained.into_iter().enumerate() {
            let index = next + offset;
            let name = &graphs[index].0;
            if model.meta.validation_accuracy >= bar {
                ensemble.models.push(model);
                ensemble.graph_names.push(name.clone());
            } else {
                log::info!(
                    "rejecting pruned model {index} ({name}): validation accuracy {:.4} < {bar:.4}",
                    model.meta.validation_accuracy
                );
                ensemble.rejected.push(Rejection {
                    index,
                    graph_name: name.clone(),
                    validation_accuracy: model.meta.validation_accuracy,
                });
            }
        }
        next += round;
    }
    if ensemble.models.len() < options.min_size.max(1) {
        return Err(TrainError::EnsembleTooSmall {
            survivors: ensemble.models.len(),
            required: options.min_size.max(1),
        });
    }
    Ok(ensemble)
}
