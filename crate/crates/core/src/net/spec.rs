use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpecError {
    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },
    #[error("model spec invalid: {0}")]
    Invalid(String),
}

/// One layer of a [`ModelSpec`]. Input channel counts are implied by the
/// preceding layer's output shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Stride-1 square convolution with zero padding.
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        maskable: bool,
    },
    /// Fully connected layer over the flattened input. Its input channels
    /// are those of the incoming `[c, h, w]` tensor, each with `h * w` taps.
    Dense {
        units: usize,
        #[serde(default)]
        maskable: bool,
    },
    /// Non-overlapping max pooling with a square window.
    MaxPool { size: usize },
    Relu,
}

impl LayerSpec {
    pub fn is_maskable(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { maskable: true, .. } | LayerSpec::Dense { maskable: true, .. }
        )
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Relu => "relu",
        }
    }
}

/// `[channels, height, width]`.
pub type Shape = [usize; 3];

pub fn shape_len(s: &Shape) -> usize {
    s[0] * s[1] * s[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeomKind {
    Conv { kernel: usize, padding: usize },
    Dense,
    MaxPool { size: usize },
    Relu,
}

/// A layer with its resolved input and output shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kind: GeomKind,
    pub input: Shape,
    pub output: Shape,
}

impl LayerGeometry {
    /// Weight tensor shape as `[out_channels, in_channels, taps]`.
    pub fn weight_shape(&self) -> Option<[usize; 3]> {
        match self.kind {
            GeomKind::Conv { kernel, .. } => {
                Some([self.output[0], self.input[0], kernel * kernel])
            }
            GeomKind::Dense => Some([self.output[0], self.input[0], self.input[1] * self.input[2]]),
            _ => None,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().map_or(0, |[o, i, t]| o * i * t)
    }

    pub fn bias_len(&self) -> usize {
        if self.weight_shape().is_some() {
            self.output[0]
        } else {
            0
        }
    }

    /// Number of output positions each weight is applied at.
    pub fn output_positions(&self) -> usize {
        self.output[1] * self.output[2]
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape().map_or(0, |[_, i, t]| i * t)
    }
}

/// Architecture of a classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl ModelSpec {
    /// conv(64, 3x3, same) → relu → maxpool(2) → dense(64, masked) → relu →
    /// dense(64, masked) → relu → dense(classes).
    pub fn desk_default(input_shape: Shape, class_count: usize) -> Self {
        Self::with_widths(input_shape, class_count, 64, 64)
    }

    pub fn with_widths(input_shape: Shape, class_count: usize, conv: usize, hidden: usize) -> Self {
        Self {
            input_shape,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: conv,
                    kernel: 3,
                    padding: 1,
                    maskable: false,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Dense {
                    units: hidden,
                    maskable: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: hidden,
                    maskable: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    units: class_count,
                    maskable: false,
                },
            ],
            class_count,
        }
    }

    pub fn input_len(&self) -> usize {
        shape_len(&self.input_shape)
    }

    /// Resolves every layer's shapes and checks the structural rules: shapes
    /// chain, at least one maskable layer, the first parametric layer and
    /// the classifier are unmasked, and the classifier emits `class_count`
    /// logits.
    pub fn geometry(&self) -> Result<Vec<LayerGeometry>, SpecError> {
        if self.class_count < 2 {
            return Err(SpecError::Invalid("class_count must be at least 2".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(SpecError::Invalid("input shape has a zero dimension".into()));
        }
        let mut shape = self.input_shape;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, spec) in self.layers.iter().enumerate() {
            let err = |msg: String| SpecError::Layer { layer, msg };
            let (kind, next) = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                    ..
                } => {
                    if out_channels == 0 || kernel == 0 {
                        return Err(err("conv needs positive channels and kernel".into()));
                    }
                    let h = (shape[1] + 2 * padding).checked_sub(kernel - 1);
                    let w = (shape[2] + 2 * padding).checked_sub(kernel - 1);
                    match (h, w) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => {
                            (GeomKind::Conv { kernel, padding }, [out_channels, h, w])
                        }
                        _ => return Err(err(format!("kernel {kernel} larger than input {shape:?}"))),
                    }
                }
                LayerSpec::Dense { units, .. } => {
                    if units == 0 {
                        return Err(err("dense needs at least one unit".into()));
                    }
                    (GeomKind::Dense, [units, 1, 1])
                }
                LayerSpec::MaxPool { size } => {
                    if size == 0 || shape[1] < size || shape[2] < size {
                        return Err(err(format!("pool {size} does not fit input {shape:?}")));
                    }
                    (GeomKind::MaxPool { size }, [shape[0], shape[1] / size, shape[2] / size])
                }
                LayerSpec::Relu => (GeomKind::Relu, shape),
            };
            out.push(LayerGeometry {
                kind,
                input: shape,
                output: next,
            });
            shape = next;
        }

        let parametric: Vec<usize> = (0..self.layers.len())
            .filter(|&i| self.layers[i].has_params())
            .collect();
        let Some(&last) = parametric.last() else {
            return Err(SpecError::Invalid("no parametric layers".into()));
        };
        if last != self.layers.len() - 1 || !matches!(self.layers[last], LayerSpec::Dense { .. }) {
            return Err(SpecError::Invalid("the last layer must be the dense classifier".into()));
        }
        if shape != [self.class_count, 1, 1] {
            return Err(SpecError::Invalid(format!(
                "classifier emits {} logits, expected {}",
                shape[0], self.class_count
            )));
        }
        if self.layers[parametric[0]].is_maskable() || self.layers[last].is_maskable() {
            return Err(SpecError::Invalid(
                "input and classifier layers cannot be masked".into(),
            ));
        }
        if !self.layers.iter().any(LayerSpec::is_maskable) {
            return Err(SpecError::Invalid("no maskable layer".into()));
        }
        Ok(out)
    }
}
