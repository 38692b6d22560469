use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    BatchNorm {
        features: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    AvgPool {
        size: usize,
    },
    /// Adds the output of layer `from` to this layer's input.
    ResidualAdd {
        from: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Dense {
            in_features,
            out_features,
        }
    }

    pub fn conv2d(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn batch_norm(features: usize) -> Self {
        LayerSpec::BatchNorm { features }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec::Dropout { rate }
    }

    pub fn avg_pool(size: usize) -> Self {
        LayerSpec::AvgPool { size }
    }

    pub fn residual_add(from: usize) -> Self {
        LayerSpec::ResidualAdd { from }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::AvgPool { .. } => "avg_pool",
            LayerSpec::ResidualAdd { .. } => "residual_add",
        }
    }
}

/// Input shape (per example, no batch dimension) plus the layer sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        ArchSpec {
            input_shape,
            layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamRole {
    pub fn name(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::BnScale => "bn_scale",
            ParamRole::BnShift => "bn_shift",
        }
    }
}

/// One trainable tensor of a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub layer: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of filters: output units for weights, zero for everything else.
    pub fn filter_count(&self) -> usize {
        match self.role {
            ParamRole::Weight => self.shape[0],
            _ => 0,
        }
    }

    pub fn filter_len(&self) -> usize {
        self.shape[1..].iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
}

impl ParamLayout {
    pub fn total_len(&self) -> usize {
        self.slots.iter().map(ParamSlot::len).sum()
    }

    pub fn weight_slots(&self) -> impl Iterator<Item = (usize, &ParamSlot)> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == ParamRole::Weight)
    }
}

/// A validated architecture: per-layer output shapes and the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    spec: ArchSpec,
    /// Output shape of each layer, per example.
    shapes: Vec<Vec<usize>>,
    layout: Arc<ParamLayout>,
    /// Index of the first parameter slot owned by each layer.
    first_slot: Vec<Option<usize>>,
    classes: usize,
}

fn layer_err(index: usize, detail: String) -> Error {
    if index == 0 {
        Error::InvalidLayer { index, detail }
    } else {
        Error::LayerShape {
            first: index - 1,
            second: index,
            detail,
        }
    }
}

impl Architecture {
    pub fn new(spec: ArchSpec) -> Result<Self> {
        if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
            return Err(Error::InvalidLayer {
                index: 0,
                detail: format!("input shape {:?} must be non-empty and positive", spec.input_shape),
            });
        }
        if spec.layers.is_empty() {
            return Err(Error::InvalidLayer {
                index: 0,
                detail: "architecture has no layers".into(),
            });
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
        let mut slots = Vec::new();
        let mut first_slot = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = if i == 0 {
                &spec.input_shape
            } else {
                &shapes[i - 1]
            };
            let out = match *layer {
                LayerSpec::Dense {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: "dense layer sizes must be positive".into(),
                        });
                    }
                    if input.as_slice() != [in_features] {
                        return Err(layer_err(
                            i,
                            format!("dense layer expects input [{in_features}], previous output is {input:?}"),
                        ));
                    }
                    first_slot.push(Some(slots.len()));
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Weight,
                        shape: vec![out_features, in_features],
                    });
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Bias,
                        shape: vec![out_features],
                    });
                    vec![out_features]
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: "conv2d sizes and stride must be positive".into(),
                        });
                    }
                    if input.len() != 3 || input[0] != in_channels {
                        return Err(layer_err(
                            i,
                            format!("conv2d expects [{in_channels}, h, w], previous output is {input:?}"),
                        ));
                    }
                    let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                    if h < kernel || w < kernel {
                        return Err(layer_err(
                            i,
                            format!("kernel {kernel} larger than padded input {h}x{w}"),
                        ));
                    }
                    first_slot.push(Some(slots.len()));
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Weight,
                        shape: vec![out_channels, in_channels, kernel, kernel],
                    });
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::Bias,
                        shape: vec![out_channels],
                    });
                    vec![
                        out_channels,
                        (h - kernel) / stride + 1,
                        (w - kernel) / stride + 1,
                    ]
                }
                LayerSpec::BatchNorm { features } => {
                    if input[0] != features {
                        return Err(layer_err(
                            i,
                            format!("batch_norm over {features} features, previous output is {input:?}"),
                        ));
                    }
                    first_slot.push(Some(slots.len()));
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::BnScale,
                        shape: vec![features],
                    });
                    slots.push(ParamSlot {
                        layer: i,
                        role: ParamRole::BnShift,
                        shape: vec![features],
                    });
                    input.clone()
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: format!("dropout rate {rate} outside [0, 1)"),
                        });
                    }
                    first_slot.push(None);
                    input.clone()
                }
                LayerSpec::Relu => {
                    first_slot.push(None);
                    input.clone()
                }
                LayerSpec::Flatten => {
                    first_slot.push(None);
                    vec![input.iter().product()]
                }
                LayerSpec::AvgPool { size } => {
                    if size == 0 {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: "pool size must be positive".into(),
                        });
                    }
                    if input.len() != 3 || input[1] < size || input[2] < size {
                        return Err(layer_err(
                            i,
                            format!("avg_pool({size}) needs [c, h, w] with h, w >= {size}, got {input:?}"),
                        ));
                    }
                    first_slot.push(None);
                    vec![input[0], input[1] / size, input[2] / size]
                }
                LayerSpec::ResidualAdd { from } => {
                    if from >= i {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: format!("residual source {from} is not an earlier layer"),
                        });
                    }
                    if &shapes[from] != input {
                        return Err(Error::InvalidLayer {
                            index: i,
                            detail: format!(
                                "residual source {from} has shape {:?}, input is {input:?}",
                                shapes[from]
                            ),
                        });
                    }
                    first_slot.push(None);
                    input.clone()
                }
            };
            shapes.push(out);
        }
        let last = shapes.last().expect("at least one layer");
        if last.len() != 1 {
            return Err(Error::InvalidLayer {
                index: spec.layers.len() - 1,
                detail: format!("network must end in a flat logit vector, got {last:?}"),
            });
        }
        let classes = last[0];
        Ok(Architecture {
            spec,
            shapes,
            layout: Arc::new(ParamLayout { slots }),
            first_slot,
            classes,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.spec.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    pub fn input_shape_of(&self, layer: usize) -> &[usize] {
        if layer == 0 {
            &self.spec.input_shape
        } else {
            &self.shapes[layer - 1]
        }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub(crate) fn first_slot(&self, layer: usize) -> Option<usize> {
        self.first_slot[layer]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn param_count(&self) -> usize {
        self.layout.total_len()
    }
}
