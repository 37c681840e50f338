//! Minimal dense+conv classifier substrate: parameter storage with a
//! per-layer coordinate index, forward/backward passes for softmax
//! cross-entropy, an SGD-with-momentum step, and finite-difference
//! oracles for gradients and diagonal curvature.
//!
//! All arithmetic is f64 and deterministic for fixed inputs and seeds.

mod fd;
mod forward;
mod sgd;

pub use fd::{fd_diag_hessian, fd_diag_hessian_fn, fd_gradient, fd_gradient_fn};
pub use forward::{backward, forward};
pub use sgd::sgd_step;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Shape of one sample as it flows through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl FeatureShape {
    pub fn size(&self) -> usize {
        match *self {
            FeatureShape::Flat(n) => n,
            FeatureShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        activation: Activation,
    },
    Flatten,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => in_dim * out_dim,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * out_channels * kernel_h * kernel_w,
            LayerSpec::Flatten => 0,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerSpec::Dense { out_dim, .. } => out_dim,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            LayerSpec::Flatten => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }

    pub fn is_parameterized(&self) -> bool {
        !matches!(self, LayerSpec::Flatten)
    }
}

/// Network topology: an input shape and an ordered layer list whose
/// final output is the logit vector fed to softmax cross-entropy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: FeatureShape,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(input: FeatureShape, layers: Vec<LayerSpec>) -> Result<Self> {
        let arch = Architecture { input, layers };
        arch.validate()?;
        Ok(arch)
    }

    /// Checks layer-to-layer shape compatibility. Conv blocks must be
    /// joined to dense blocks by exactly one `Flatten` (implied by shape
    /// chaining), and the final output must be a flat logit vector.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("architecture must have at least one layer"));
        }
        let shapes = self.feature_shapes()?;
        match shapes.last().copied().unwrap() {
            FeatureShape::Flat(n) if n >= 2 => Ok(()),
            FeatureShape::Flat(n) => Err(Error::config(format!(
                "final layer produces {n} logits; need at least 2 classes"
            ))),
            FeatureShape::Image { .. } => Err(Error::config(
                "final layer must produce a flat logit vector (missing flatten?)",
            )),
        }
    }

    /// Output shape after each layer, with shape checks along the way.
    pub fn feature_shapes(&self) -> Result<Vec<FeatureShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = self.input;
        for (li, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense { in_dim, out_dim, .. } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(Error::config(format!("layer {li}: zero-size dense layer")));
                    }
                    match cur {
                        FeatureShape::Flat(n) if n == in_dim => FeatureShape::Flat(out_dim),
                        FeatureShape::Flat(n) => {
                            return Err(Error::config(format!(
                                "layer {li}: dense expects {in_dim} inputs, got {n}"
                            )))
                        }
                        FeatureShape::Image { .. } => {
                            return Err(Error::config(format!(
                                "layer {li}: dense layer fed an image; insert a flatten"
                            )))
                        }
                    }
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    ..
                } => {
                    if stride == 0 {
                        return Err(Error::config(format!("layer {li}: stride must be >= 1")));
                    }
                    if kernel_h == 0 || kernel_w == 0 || kernel_h > 5 || kernel_w > 5 {
                        return Err(Error::config(format!(
                            "layer {li}: kernel must be between 1x1 and 5x5"
                        )));
                    }
                    if in_channels == 0 || out_channels == 0 || in_channels > 16 || out_channels > 16
                    {
                        return Err(Error::config(format!(
                            "layer {li}: channel counts must be between 1 and 16"
                        )));
                    }
                    match cur {
                        FeatureShape::Image {
                            channels,
                            height,
                            width,
                        } if channels == in_channels && height >= kernel_h && width >= kernel_w => {
                            FeatureShape::Image {
                                channels: out_channels,
                                height: (height - kernel_h) / stride + 1,
                                width: (width - kernel_w) / stride + 1,
                            }
                        }
                        other => {
                            return Err(Error::config(format!(
                                "layer {li}: conv2d incompatible with input shape {other:?}"
                            )))
                        }
                    }
                }
                LayerSpec::Flatten => match cur {
                    FeatureShape::Image { .. } => FeatureShape::Flat(cur.size()),
                    FeatureShape::Flat(_) => {
                        return Err(Error::config(format!(
                            "layer {li}: flatten applied to already-flat features"
                        )))
                    }
                },
            };
            shapes.push(cur);
        }
        Ok(shapes)
    }

    /// Number of logits the network produces.
    pub fn output_dim(&self) -> Result<usize> {
        match self.feature_shapes()?.last().copied().unwrap() {
            FeatureShape::Flat(n) => Ok(n),
            FeatureShape::Image { .. } => Err(Error::config(
                "final layer must produce a flat logit vector",
            )),
        }
    }

    /// Coordinate ranges of each layer's weights and biases in the flat
    /// parameter vector. Layout per layer: weights, then biases.
    /// Dense weights are row-major `[out][in]`; conv weights are
    /// `[out_c][in_c][kh][kw]`.
    pub fn param_index(&self) -> ParamIndex {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            let w = layer.weight_count();
            let b = layer.bias_count();
            layers.push(LayerRanges {
                weights: off..off + w,
                biases: off + w..off + w + b,
            });
            off += w + b;
        }
        ParamIndex { layers, total: off }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

/// Per-layer coordinate ranges into the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub weights: Range<usize>,
    pub biases: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamIndex {
    pub layers: Vec<LayerRanges>,
    pub total: usize,
}

/// Flat global parameter vector plus its layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub index: ParamIndex,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let index = arch.param_index();
        ModelParams {
            values: vec![0.0; index.total],
            index,
        }
    }

    /// Replaces the values, keeping the index. Lengths must agree.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.index.total {
            return Err(Error::shape(format!(
                "expected {} parameter values, got {}",
                self.index.total,
                values.len()
            )));
        }
        Ok(ModelParams {
            values,
            index: self.index.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.index.total
    }
}

/// Seeded Glorot-uniform weight init; biases start at zero.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(arch);
    let mut rng = rng_from(seed);
    for (layer, ranges) in arch.layers.iter().zip(&params.index.layers) {
        let (fan_in, fan_out) = match *layer {
            LayerSpec::Dense { in_dim, out_dim, .. } => (in_dim, out_dim),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => (in_channels * kernel_h * kernel_w, out_channels * kernel_h * kernel_w),
            LayerSpec::Flatten => continue,
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for i in ranges.weights.clone() {
            params.values[i] = rng.random_range(-bound..bound);
        }
    }
    params
}

/// A mini-batch of samples with integer class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub shape: FeatureShape,
    pub labels: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, arch: &Architecture, num_logits: usize) -> Result<()> {
        if self.is_empty() {
            return Err(Error::shape("batch is empty"));
        }
        if self.shape != arch.input {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match architecture input {:?}",
                self.shape, arch.input
            )));
        }
        if self.inputs.len() != self.len() * self.shape.size() {
            return Err(Error::shape(format!(
                "batch holds {} values for {} samples of size {}",
                self.inputs.len(),
                self.len(),
                self.shape.size()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= num_logits) {
            return Err(Error::shape(format!(
                "label {bad} outside class range [0, {num_logits})"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn mlp(dims: &[usize], activation: Activation) -> Architecture {
        let mut layers = Vec::new();
        for w in dims.windows(2) {
            layers.push(LayerSpec::Dense {
                in_dim: w[0],
                out_dim: w[1],
                activation,
            });
        }
        Architecture::new(FeatureShape::Flat(dims[0]), layers).unwrap()
    }

    #[test]
    fn param_index_covers_all_coordinates() {
        let arch = mlp(&[4, 3, 2], Activation::Relu);
        let idx = arch.param_index();
        assert_eq!(idx.total, 4 * 3 + 3 + 3 * 2 + 2);
        assert_eq!(idx.layers[0].weights, 0..12);
        assert_eq!(idx.layers[0].biases, 12..15);
        assert_eq!(idx.layers[1].weights, 15..21);
        assert_eq!(idx.layers[1].biases, 21..23);
    }

    #[test]
    fn validate_rejects_dimension_mismatch() {
        let bad = Architecture {
            input: FeatureShape::Flat(4),
            layers: vec![
                LayerSpec::Dense {
                    in_dim: 4,
                    out_dim: 3,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_dim: 5,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn validate_requires_flatten_between_conv_and_dense() {
        let bad = Architecture {
            input: FeatureShape::Image {
                channels: 1,
                height: 4,
                width: 4,
            },
            layers: vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::Dense {
                    in_dim: 8,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conv_shape_propagation() {
        let arch = Architecture::new(
            FeatureShape::Image {
                channels: 1,
                height: 5,
                width: 5,
            },
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    out_channels: 2,
                    kernel_h: 3,
                    kernel_w: 3,
                    stride: 1,
                    activation: Activation::Relu,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 2 * 3 * 3,
                    out_dim: 2,
                    activation: Activation::Identity,
                },
            ],
        )
        .unwrap();
        assert_eq!(arch.output_dim().unwrap(), 2);
        assert_eq!(arch.param_count(), 2 * 9 + 2 + 18 * 2 + 2);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = mlp(&[6, 4, 3], Activation::Relu);
        let a = init_params(&arch, 11);
        let b = init_params(&arch, 11);
        let c = init_params(&arch, 12);
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
        let bound = (6.0 / 10.0f64).sqrt();
        for i in a.index.layers[0].weights.clone() {
            assert!(a.values[i].abs() <= bound);
        }
        for i in a.index.layers[0].biases.clone() {
            assert_eq!(a.values[i], 0.0);
        }
    }
}
