use std::fmt::Debug;
use std::sync::Arc;

use num_traits::Float;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::spec::{shape_len, GeomKind, LayerGeometry, ModelSpec, SpecError};
use crate::mapping::{Mask, MaskPlan};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input has {got} values, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value at layer {layer}")]
    NonFinite { layer: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("mask plan does not fit the model: {0}")]
    PlanMismatch(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Scalar type the network is generic over. Models are stored and trained
/// in `f32`; `f64` instances exist for gradient checking.
pub trait Real: Float + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Weights and biases of one layer; empty for parameter-free layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub final_loss: f64,
}

/// A classifier whose maskable layers are gated elementwise by a
/// [`MaskPlan`]. Masked weight slots are kept at exactly zero, and forward
/// passes ignore whatever is stored there.
#[derive(Debug, Clone)]
pub struct MaskedModel<T: Real = f32> {
    spec: ModelSpec,
    geometry: Vec<LayerGeometry>,
    pub params: Vec<LayerParams<T>>,
    masks: Vec<Option<Mask>>,
    plan: Option<Arc<MaskPlan>>,
    pub meta: TrainingMeta,
}

/// Per-layer activations recorded by a forward pass.
struct Trace<T> {
    /// `acts[l]` is the input to layer `l`; the last entry holds the logits.
    acts: Vec<Vec<T>>,
    /// For pooling layers, the flat input index chosen for each output.
    argmax: Vec<Vec<usize>>,
}

impl<T: Real> MaskedModel<T> {
    /// Fresh unmasked model with uniform fan-in scaled weights,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NetError> {
        let geometry = spec.geometry()?;
        let mut rng = rng::seeded(seed);
        let params = geometry
            .iter()
            .map(|g| {
                let limit = if g.fan_in() > 0 {
                    (6.0 / g.fan_in() as f64).sqrt()
                } else {
                    0.0
                };
                LayerParams {
                    weight: (0..g.weight_len())
                        .map(|_| T::of(rng.random_range(-limit..=limit)))
                        .collect(),
                    bias: vec![T::zero(); g.bias_len()],
                }
            })
            .collect();
        let masks = vec![None; geometry.len()];
        Ok(Self {
            spec,
            geometry,
            params,
            masks,
            plan: None,
            meta: TrainingMeta {
                seed,
                ..TrainingMeta::default()
            },
        })
    }

    /// Assembles a model from explicit parameters.
    pub fn from_params(spec: ModelSpec, params: Vec<LayerParams<T>>) -> Result<Self, NetError> {
        let geometry = spec.geometry()?;
        if params.len() != geometry.len() {
            return Err(NetError::PlanMismatch(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                geometry.len()
            )));
        }
        for (l, (p, g)) in params.iter().zip(&geometry).enumerate() {
            if p.weight.len() != g.weight_len() || p.bias.len() != g.bias_len() {
                return Err(NetError::PlanMismatch(format!("layer {l} parameter sizes")));
            }
        }
        let masks = vec![None; geometry.len()];
        Ok(Self {
            spec,
            geometry,
            params,
            masks,
            plan: None,
            meta: TrainingMeta::default(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }

    pub fn plan(&self) -> Option<&MaskPlan> {
        self.plan.as_deref()
    }

    pub fn mask(&self, layer: usize) -> Option<&Mask> {
        self.masks[layer].as_ref()
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    /// Copy of this model gated by `plan`; masked slots are zeroed.
    pub fn pruned(&self, plan: Arc<MaskPlan>) -> Result<Self, NetError> {
        let mut out = self.clone();
        out.attach_plan(plan)?;
        Ok(out)
    }

    pub fn attach_plan(&mut self, plan: Arc<MaskPlan>) -> Result<(), NetError> {
        let mut masks = vec![None; self.geometry.len()];
        for lm in &plan.layers {
            let Some(geom) = self.geometry.get(lm.layer) else {
                return Err(NetError::PlanMismatch(format!("no layer {}", lm.layer)));
            };
            if !self.spec.layers[lm.layer].is_maskable() {
                return Err(NetError::PlanMismatch(format!("layer {} is not maskable", lm.layer)));
            }
            let shape = [lm.mask.out_channels, lm.mask.in_channels, lm.mask.taps];
            if geom.weight_shape() != Some(shape) {
                return Err(NetError::PlanMismatch(format!(
                    "layer {} weights {:?}, mask {shape:?}",
                    lm.layer,
                    geom.weight_shape()
                )));
            }
            masks[lm.layer] = Some(lm.mask.clone());
        }
        self.masks = masks;
        self.plan = Some(plan);
        self.enforce_masks();
        Ok(())
    }

    /// Writes zero into every masked weight slot.
    pub fn enforce_masks(&mut self) {
        for (p, m) in self.params.iter_mut().zip(&self.masks) {
            if let Some(m) = m {
                for (w, &keep) in p.weight.iter_mut().zip(m.bits()) {
                    if !keep {
                        *w = T::zero();
                    }
                }
            }
        }
    }

    /// True iff every masked weight slot holds exactly zero.
    pub fn masks_respected(&self) -> bool {
        self.params.iter().zip(&self.masks).all(|(p, m)| match m {
            Some(m) => p
                .weight
                .iter()
                .zip(m.bits())
                .all(|(&w, &keep)| keep || w == T::zero()),
            None => true,
        })
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, NetError> {
        let trace = self.trace(x)?;
        Ok(softmax(trace.acts.last().expect("logits")))
    }

    /// Index of the most probable class; ties go to the lowest index.
    pub fn predict_label(&self, x: &[T]) -> Result<usize, NetError> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Gradient of the cross-entropy loss at `label` with respect to `x`.
    pub fn grad_input(&self, x: &[T], label: usize) -> Result<Vec<T>, NetError> {
        self.check_label(label)?;
        let trace = self.trace(x)?;
        let dlogits = loss_grad(trace.acts.last().expect("logits"), label).1;
        Ok(self.backward(&trace, dlogits, None))
    }

    /// Cross-entropy loss at `label` and its gradient with respect to every
    /// parameter. Masked slots get zero gradient.
    pub fn loss_and_param_grads(
        &self,
        x: &[T],
        label: usize,
    ) -> Result<(T, Vec<LayerParams<T>>), NetError> {
        self.check_label(label)?;
        let mut grads = self.zero_grads();
        let loss = self.accumulate(x, label, &mut grads)?;
        Ok((loss, grads))
    }

    /// Cross-entropy loss at `label`.
    pub fn loss(&self, x: &[T], label: usize) -> Result<T, NetError> {
        self.check_label(label)?;
        let trace = self.trace(x)?;
        Ok(loss_grad(trace.acts.last().expect("logits"), label).0)
    }

    pub(crate) fn zero_grads(&self) -> Vec<LayerParams<T>> {
        self.params
            .iter()
            .map(|p| LayerParams {
                weight: vec![T::zero(); p.weight.len()],
                bias: vec![T::zero(); p.bias.len()],
            })
            .collect()
    }

    /// Runs forward and backward for one sample, adding parameter gradients
    /// into `grads`. Masked slots receive no gradient. Returns the loss.
    pub(crate) fn accumulate(
        &self,
        x: &[T],
        label: usize,
        grads: &mut [LayerParams<T>],
    ) -> Result<T, NetError> {
        let trace = self.trace(x)?;
        let (loss, dlogits) = loss_grad(trace.acts.last().expect("logits"), label);
        self.backward(&trace, dlogits, Some(grads));
        Ok(loss)
    }

    fn check_label(&self, label: usize) -> Result<(), NetError> {
        if label >= self.spec.class_count {
            return Err(NetError::BadLabel {
                label,
                classes: self.spec.class_count,
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[T]) -> Result<Trace<T>, NetError> {
        let expected = self.spec.input_len();
        if x.len() != expected {
            return Err(NetError::ShapeMismatch {
                expected,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite { layer: 0 });
        }
        let mut acts = Vec::with_capacity(self.geometry.len() + 1);
        let mut argmax = vec![Vec::new(); self.geometry.len()];
        acts.push(x.to_vec());
        for (l, geom) in self.geometry.iter().enumerate() {
            let input = acts.last().expect("input");
            let out = match geom.kind {
                GeomKind::Conv { kernel, padding } => {
                    conv_forward(geom, kernel, padding, &self.params[l], self.masks[l].as_ref(), input)
                }
                GeomKind::Dense => dense_forward(geom, &self.params[l], self.masks[l].as_ref(), input),
                GeomKind::MaxPool { size } => {
                    let (out, idx) = pool_forward(geom, size, input);
                    argmax[l] = idx;
                    out
                }
                GeomKind::Relu => input.iter().map(|&v| v.max(T::zero())).collect(),
            };
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite { layer: l });
            }
            acts.push(out);
        }
        Ok(Trace { acts, argmax })
    }

    /// Backpropagates `dlogits`. With `grads` (training), the gradient with
    /// respect to the input is not needed and comes back empty.
    fn backward(
        &self,
        trace: &Trace<T>,
        dlogits: Vec<T>,
        mut grads: Option<&mut [LayerParams<T>]>,
    ) -> Vec<T> {
        let mut delta = dlogits;
        for (l, geom) in self.geometry.iter().enumerate().rev() {
            let input = &trace.acts[l];
            let need_input = l > 0 || grads.is_none();
            let mask = self.masks[l].as_ref();
            delta = match geom.kind {
                GeomKind::Conv { kernel, padding } => {
                    let g = grads.as_deref_mut().map(|g| &mut g[l]);
                    let conv = Conv { geom, kernel, padding, mask };
                    conv.backward(&self.params[l].weight, input, &delta, g, need_input)
                }
                GeomKind::Dense => {
                    let g = grads.as_deref_mut().map(|g| &mut g[l]);
                    dense_backward(geom, &self.params[l].weight, mask, input, &delta, g, need_input)
                }
                GeomKind::MaxPool { .. } => {
                    let mut d = vec![T::zero(); input.len()];
                    for (&src, &dv) in trace.argmax[l].iter().zip(&delta) {
                        d[src] = d[src] + dv;
                    }
                    d
                }
                GeomKind::Relu => input
                    .iter()
                    .zip(&delta)
                    .map(|(&v, &dv)| if v > T::zero() { dv } else { T::zero() })
                    .collect(),
            };
        }
        delta
    }

    /// Retained and total multiply-accumulates for one forward pass.
    pub fn mac_counts(&self) -> (u64, u64) {
        self.geometry
            .iter()
            .zip(&self.masks)
            .map(|(g, m)| crate::mapping::layer_macs(g, m.as_ref()))
            .fold((0, 0), |(a, b), (c, d)| (a + c, b + d))
    }

    /// Same model with every tensor converted to another scalar type.
    pub fn cast<U: Real>(&self) -> MaskedModel<U> {
        MaskedModel {
            spec: self.spec.clone(),
            geometry: self.geometry.clone(),
            params: self
                .params
                .iter()
                .map(|p| LayerParams {
                    weight: p.weight.iter().map(|&w| U::of(w.as_f64())).collect(),
                    bias: p.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
                })
                .collect(),
            masks: self.masks.clone(),
            plan: self.plan.clone(),
            meta: self.meta.clone(),
        }
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy loss and its gradient with respect to the logits.
fn loss_grad<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = logits
        .iter()
        .map(|&z| (z - max).exp())
        .fold(T::zero(), |a, b| a + b);
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&z| (z - log_z).exp()).collect();
    grad[label] = grad[label] - T::one();
    (loss, grad)
}

/// Input channels feeding output channel `o`; all of them when unmasked.
fn kept_inputs(mask: Option<&Mask>, o: usize, ic: usize) -> impl Iterator<Item = usize> + '_ {
    (0..ic).filter(move |&i| mask.is_none_or(|m| m.block(o, i)))
}

/// Output positions `y` for which `y + k - padding` lies inside the input.
fn valid_range(k: usize, padding: usize, in_len: usize, out_len: usize) -> std::ops::Range<usize> {
    let lo = padding.saturating_sub(k);
    let hi = (in_len + padding).saturating_sub(k).min(out_len);
    lo..hi.max(lo)
}

fn conv_forward<T: Real>(
    geom: &LayerGeometry,
    kernel: usize,
    padding: usize,
    params: &LayerParams<T>,
    mask: Option<&Mask>,
    input: &[T],
) -> Vec<T> {
    let [ic, ih, iw] = geom.input;
    let [oc, oh, ow] = geom.output;
    let kk = kernel * kernel;
    let mut out = vec![T::zero(); shape_len(&geom.output)];
    for o in 0..oc {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.fill(params.bias[o]);
        for i in kept_inputs(mask, o, ic) {
            let w = &params.weight[(o * ic + i) * kk..(o * ic + i + 1) * kk];
            let src = &input[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..kernel {
                let ys = valid_range(ky, padding, ih, oh);
                for kx in 0..kernel {
                    let xs = valid_range(kx, padding, iw, ow);
                    let wv = w[ky * kernel + kx];
                    for y in ys.clone() {
                        let sy = y + ky - padding;
                        let s0 = sy * iw + xs.start + kx - padding;
                        let src_row = &src[s0..s0 + xs.len()];
                        let out_row = &mut plane[y * ow + xs.start..y * ow + xs.end];
                        for (p, &v) in out_row.iter_mut().zip(src_row) {
                            *p = *p + wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

struct Conv<'a> {
    geom: &'a LayerGeometry,
    kernel: usize,
    padding: usize,
    mask: Option<&'a Mask>,
}

impl Conv<'_> {
    fn backward<T: Real>(
        &self,
        weight: &[T],
        input: &[T],
        delta: &[T],
        mut grads: Option<&mut LayerParams<T>>,
        need_input: bool,
    ) -> Vec<T> {
        let (kernel, padding) = (self.kernel, self.padding);
        let [ic, ih, iw] = self.geom.input;
        let [oc, oh, ow] = self.geom.output;
        let kk = kernel * kernel;
        let mut d_in = if need_input { vec![T::zero(); input.len()] } else { Vec::new() };
        for o in 0..oc {
            let d_plane = &delta[o * oh * ow..(o + 1) * oh * ow];
            if let Some(g) = grads.as_deref_mut() {
                g.bias[o] = g.bias[o] + d_plane.iter().copied().fold(T::zero(), |a, b| a + b);
            }
            for i in kept_inputs(self.mask, o, ic) {
                let base = (o * ic + i) * kk;
                let src = &input[i * ih * iw..(i + 1) * ih * iw];
                for ky in 0..kernel {
                    let ys = valid_range(ky, padding, ih, oh);
                    for kx in 0..kernel {
                        let xs = valid_range(kx, padding, iw, ow);
                        let wv = weight[base + ky * kernel + kx];
                        let mut gw = T::zero();
                        for y in ys.clone() {
                            let sy = y + ky - padding;
                            let s0 = sy * iw + xs.start + kx - padding;
                            let d_row = &d_plane[y * ow + xs.start..y * ow + xs.end];
                            let src_row = &src[s0..s0 + xs.len()];
                            gw = d_row.iter().zip(src_row).fold(gw, |a, (&d, &v)| a + d * v);
                            if need_input {
                                let at = i * ih * iw + s0;
                                for (di, &d) in d_in[at..at + xs.len()].iter_mut().zip(d_row) {
                                    *di = *di + wv * d;
                                }
                            }
                        }
                        if let Some(g) = grads.as_deref_mut() {
                            let slot = &mut g.weight[base + ky * kernel + kx];
                            *slot = *slot + gw;
                        }
                    }
                }
            }
        }
        d_in
    }
}

/// Dense layers see their input as `c` channels of `features / c` taps, so
/// a mask removes whole channel blocks from each output row.
fn dense_forward<T: Real>(
    geom: &LayerGeometry,
    params: &LayerParams<T>,
    mask: Option<&Mask>,
    input: &[T],
) -> Vec<T> {
    let features = input.len();
    let ic = geom.input[0];
    let taps = features / ic;
    (0..geom.output[0])
        .map(|o| {
            let row = &params.weight[o * features..(o + 1) * features];
            kept_inputs(mask, o, ic).fold(params.bias[o], |acc, i| {
                let span = i * taps..(i + 1) * taps;
                row[span.clone()]
                    .iter()
                    .zip(&input[span])
                    .fold(acc, |acc, (&w, &x)| acc + w * x)
            })
        })
        .collect()
}

fn dense_backward<T: Real>(
    geom: &LayerGeometry,
    weight: &[T],
    mask: Option<&Mask>,
    input: &[T],
    delta: &[T],
    mut grads: Option<&mut LayerParams<T>>,
    need_input: bool,
) -> Vec<T> {
    let features = input.len();
    let ic = geom.input[0];
    let taps = features / ic;
    let mut d_in = if need_input { vec![T::zero(); features] } else { Vec::new() };
    for (o, &dv) in delta.iter().enumerate() {
        let row = o * features;
        if let Some(g) = grads.as_deref_mut() {
            g.bias[o] = g.bias[o] + dv;
        }
        for i in kept_inputs(mask, o, ic) {
            let span = i * taps..(i + 1) * taps;
            if need_input {
                for (di, &w) in d_in[span.clone()].iter_mut().zip(&weight[row + span.start..row + span.end]) {
                    *di = *di + w * dv;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                for (gw, &x) in g.weight[row + span.start..row + span.end].iter_mut().zip(&input[span]) {
                    *gw = *gw + dv * x;
                }
            }
        }
    }
    d_in
}

fn pool_forward<T: Real>(geom: &LayerGeometry, size: usize, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [c, ih, iw] = geom.input;
    let [_, oh, ow] = geom.output;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = ch * ih * iw + (y * size) * iw + x * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let at = ch * ih * iw + (y * size + dy) * iw + (x * size + dx);
                        if input[at] > input[best] {
                            best = at;
                        }
                    }
                }
                out.push(input[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
