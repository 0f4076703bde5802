//! Network descriptions, parameters and the tape-recorded forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freeze::LayerWeights;
use crate::kernels::ConvGeometry;
use crate::ops::{ChannelStats, RowMask};
use crate::quant::{fake_quant_var, QuantParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "yes")]
        quantize: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "yes")]
        quantize: bool,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn is_quantized(&self) -> bool {
        matches!(
            self,
            Self::Linear { quantize: true, .. } | Self::Conv { quantize: true, .. }
        )
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Self::Linear { out_features, .. } => Some(*out_features),
            Self::Conv { out_channels, .. } => Some(*out_channels),
            _ => None,
        }
    }
}

/// Shape of a weighted layer as the cost model needs it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightedLayer {
    Linear {
        c_in: usize,
        c_out: usize,
    },
    Conv {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        h_out: usize,
        w_out: usize,
    },
}

impl WeightedLayer {
    pub fn c_out(&self) -> usize {
        match *self {
            Self::Linear { c_out, .. } | Self::Conv { c_out, .. } => c_out,
        }
    }

    pub fn params(&self) -> usize {
        match *self {
            Self::Linear { c_in, c_out } => c_in * c_out,
            Self::Conv {
                c_in, c_out, kernel, ..
            } => c_in * c_out * kernel * kernel,
        }
    }
}

/// Ordered layer stack plus the weight and activation bit widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Per-sample input shape, `[C, H, W]` or `[D]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default = "default_bits_w")]
    pub bits_w: u32,
    #[serde(default = "default_bits_a")]
    pub bits_a: u32,
}

fn default_bits_w() -> u32 {
    4
}

fn default_bits_a() -> u32 {
    8
}

impl NetSpec {
    /// Two conv + two linear layers for `[1, 12, 12]` inputs.
    pub fn reference_cnn(classes: usize) -> Self {
        Self::reference_cnn_for([1, 12, 12], classes).expect("12 is a multiple of 4")
    }

    /// The reference CNN for `[C, H, W]` inputs; `H` and `W` must be
    /// positive multiples of 4 so both pools divide evenly.
    pub fn reference_cnn_for(input: [usize; 3], classes: usize) -> Result<Self> {
        let [c, h, w] = input;
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 || classes == 0 {
            return Err(Error::Config(format!(
                "reference CNN needs a [C, H, W] input with H and W multiples of 4 and at least one class, got {input:?} with {classes} classes"
            )));
        }
        Ok(Self {
            input: vec![c, h, w],
            layers: vec![
                LayerSpec::Conv {
                    in_channels: c,
                    out_channels: 32,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    quantize: true,
                },
                LayerSpec::BatchNorm { channels: 32 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Conv {
                    in_channels: 32,
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    quantize: true,
                },
                LayerSpec::BatchNorm { channels: 64 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear {
                    in_features: 64 * (h / 4) * (w / 4),
                    out_features: 64,
                    quantize: true,
                },
                LayerSpec::Relu,
                LayerSpec::Linear {
                    in_features: 64,
                    out_features: classes,
                    quantize: true,
                },
            ],
            bits_w: 4,
            bits_a: 8,
        })
    }

    /// Fully connected network `inputs → hidden… → classes` with ReLUs.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = inputs;
        for &h in hidden {
            layers.push(LayerSpec::Linear {
                in_features: prev,
                out_features: h,
                quantize: true,
            });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Linear {
            in_features: prev,
            out_features: classes,
            quantize: true,
        });
        Self {
            input: vec![inputs],
            layers,
            bits_w: 4,
            bits_a: 8,
        }
    }

    /// Per-sample shapes: entry `i` is the input of layer `i`, the last entry
    /// the network output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input)));
        }
        for (name, bits) in [("bits_w", self.bits_w), ("bits_a", self.bits_a)] {
            if !(2..=16).contains(&bits) {
                return Err(Error::Config(format!("{name} = {bits} outside 2..=16")));
            }
        }
        let mut shapes = vec![self.input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().expect("nonempty");
            let bad = |what: String| Error::Config(format!("layer {i} ({layer:?}): {what}"));
            let next = match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => {
                    if cur.as_slice() != [in_features] {
                        return Err(bad(format!("expects [{in_features}], receives {cur:?}")));
                    }
                    if out_features == 0 {
                        return Err(bad("zero output features".into()));
                    }
                    vec![out_features]
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(format!("expects [{in_channels}, H, W], receives {cur:?}")));
                    }
                    if out_channels == 0 {
                        return Err(bad("zero output channels".into()));
                    }
                    let g =
                        ConvGeometry::new(in_channels, out_channels, kernel, stride, padding, cur[1], cur[2])
                            .ok_or_else(|| bad("empty output".into()))?;
                    vec![out_channels, g.h_out, g.w_out]
                }
                LayerSpec::Relu => cur.clone(),
                LayerSpec::MaxPool { size } => {
                    if cur.len() != 3 || size == 0 || cur[1] < size || cur[2] < size {
                        return Err(bad(format!("cannot pool {cur:?}")));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::BatchNorm { channels } => {
                    if cur[0] != channels {
                        return Err(bad(format!("expects {channels} channels, receives {cur:?}")));
                    }
                    cur.clone()
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        if shapes.last().map(Vec::len) != Some(1) {
            return Err(Error::Config(
                "network output must be a class-score vector".into(),
            ));
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().expect("nonempty")[0])
    }

    pub fn quantized_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_quantized())
            .collect()
    }

    /// Geometry of every linear/conv layer, keyed by layer index.
    pub fn weighted_layers(&self) -> Result<BTreeMap<usize, WeightedLayer>> {
        let shapes = self.shapes()?;
        Ok(self
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, layer)| match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => Some((
                    i,
                    WeightedLayer::Linear {
                        c_in: in_features,
                        c_out: out_features,
                    },
                )),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => Some((
                    i,
                    WeightedLayer::Conv {
                        c_in: in_channels,
                        c_out: out_channels,
                        kernel,
                        h_out: shapes[i + 1][1],
                        w_out: shapes[i + 1][2],
                    },
                )),
                _ => None,
            })
            .collect())
    }
}

/// Trainable state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Affine {
        weight: Tensor,
        bias: Tensor,
    },
    Norm {
        gamma: Tensor,
        beta: Tensor,
        running: ChannelStats,
    },
}

pub const NORM_EPS: f32 = 1e-5;
pub const NORM_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetSpec,
    pub params: Vec<LayerParams>,
}

impl Model {
    /// He-normal weights, zero biases, unit normalization scales.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut affine = |shape: Vec<usize>, fan_in: usize| {
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let bias = Tensor::zeros(&[shape[0]]);
            LayerParams::Affine {
                weight: Tensor::new(shape, data).expect("positive extents"),
                bias,
            }
        };
        let params = spec
            .layers
            .iter()
            .map(|layer| match *layer {
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                } => affine(vec![out_features, in_features], in_features),
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => affine(
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                ),
                LayerSpec::BatchNorm { channels } => LayerParams::Norm {
                    gamma: Tensor::full(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    running: ChannelStats {
                        mean: vec![0.0; channels],
                        var: vec![1.0; channels],
                    },
                },
                _ => LayerParams::None,
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        match &self.params[layer] {
            LayerParams::Affine { weight, .. } => Some(weight),
            _ => None,
        }
    }

    /// Weights of the quantized layers, the subjects of freezing.
    pub fn freezable_weights(&self) -> Vec<LayerWeights<'_>> {
        self.spec
            .quantized_layers()
            .into_iter()
            .map(|i| {
                let w = self.weight(i).expect("quantized layers carry weights");
                LayerWeights::new(i, w.shape()[0], w.data()).expect("weight rows are uniform")
            })
            .collect()
    }

    /// Parameter count of all quantized-layer weights.
    pub fn freezable_params(&self) -> usize {
        self.freezable_weights().iter().map(|l| l.data.len()).sum()
    }
}

/// Quantization parameters of one quantized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    /// Per-output-channel symmetric weight parameters.
    pub weight: QuantParams,
    /// Per-tensor asymmetric parameters of the layer input.
    pub input: QuantParams,
}

pub type QuantState = BTreeMap<usize, LayerQuant>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Normalization uses batch statistics.
    Train,
    /// Normalization uses running statistics.
    Eval,
}

/// Tape handles for everything the trainer reads back after a forward pass.
#[derive(Debug, Default)]
pub struct ForwardVars {
    pub logits: Option<Var>,
    pub weights: BTreeMap<usize, Var>,
    pub biases: BTreeMap<usize, Var>,
    pub gammas: BTreeMap<usize, Var>,
    pub betas: BTreeMap<usize, Var>,
    pub weight_scales: BTreeMap<usize, Var>,
    pub input_scales: BTreeMap<usize, Var>,
    pub input_zero_points: BTreeMap<usize, Var>,
    /// Full-precision input of each weighted layer.
    pub layer_inputs: BTreeMap<usize, Var>,
    pub batch_stats: BTreeMap<usize, ChannelStats>,
}

impl ForwardVars {
    pub fn logits(&self) -> Var {
        self.logits.expect("forward recorded logits")
    }
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub phase: Phase,
    /// Record parameters as gradient-receiving leaves.
    pub trainable: bool,
    pub quant: Option<&'a QuantState>,
    /// Row masks for weight gradients, looked up by layer.
    pub masks: Option<&'a [RowMask]>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval(quant: Option<&'a QuantState>) -> Self {
        Self {
            phase: Phase::Eval,
            trainable: false,
            quant,
            masks: None,
        }
    }
}

/// Records the forward pass of `model` on a batch `x` of shape `[N, input…]`.
pub fn forward(tape: &mut Tape, model: &Model, x: Tensor, opts: ForwardOptions<'_>) -> Result<ForwardVars> {
    let expect: Vec<usize> = std::iter::once(x.shape()[0])
        .chain(model.spec.input.iter().copied())
        .collect();
    if x.shape() != expect.as_slice() {
        return Err(Error::Dimension {
            op: "forward input",
            lhs: x.shape().to_vec(),
            rhs: expect,
        });
    }
    let mut vars = ForwardVars::default();
    let leaf = |tape: &mut Tape, t: &Tensor| tape.leaf(t.clone(), opts.trainable);
    let mut h = tape.constant(x);
    for (i, (layer, params)) in model.spec.layers.iter().zip(&model.params).enumerate() {
        h = match (layer, params) {
            (LayerSpec::Linear { .. } | LayerSpec::Conv { .. }, LayerParams::Affine { weight, bias }) => {
                vars.layer_inputs.insert(i, h);
                let mut w = leaf(tape, weight);
                let b = leaf(tape, bias);
                vars.weights.insert(i, w);
                vars.biases.insert(i, b);
                let mut input = h;
                if let Some(lq) = opts.quant.and_then(|q| q.get(&i)) {
                    let a_s = leaf(tape, &Tensor::new(vec![1], lq.input.scale.clone())?);
                    let a_z = leaf(tape, &Tensor::new(vec![1], lq.input.zero_point.clone())?);
                    input = fake_quant_var(tape, h, a_s, Some(a_z), &lq.input)?;
                    let w_s = leaf(
                        tape,
                        &Tensor::new(vec![lq.weight.channels()], lq.weight.scale.clone())?,
                    );
                    w = fake_quant_var(tape, w, w_s, None, &lq.weight)?;
                    vars.input_scales.insert(i, a_s);
                    vars.input_zero_points.insert(i, a_z);
                    vars.weight_scales.insert(i, w_s);
                }
                let mask = opts
                    .masks
                    .and_then(|ms| ms.iter().find(|m| m.layer == i))
                    .cloned();
                match *layer {
                    LayerSpec::Conv { stride, padding, .. } => {
                        tape.conv2d(input, w, Some(b), stride, padding, mask, Some(i))?
                    }
                    _ => tape.linear(input, w, Some(b), mask, Some(i))?,
                }
            }
            (LayerSpec::BatchNorm { .. }, LayerParams::Norm { gamma, beta, running }) => {
                let g = leaf(tape, gamma);
                let b = leaf(tape, beta);
                vars.gammas.insert(i, g);
                vars.betas.insert(i, b);
                match opts.phase {
                    Phase::Train => {
                        let (y, stats) = tape.batch_norm(h, g, b, NORM_EPS)?;
                        vars.batch_stats.insert(i, stats);
                        y
                    }
                    Phase::Eval => tape.batch_norm_fixed(h, g, b, running, NORM_EPS)?,
                }
            }
            (LayerSpec::Relu, _) => tape.relu(h),
            (LayerSpec::MaxPool { size }, _) => tape.max_pool2d(h, *size)?,
            (LayerSpec::Flatten, _) => tape.flatten(h)?,
            (spec, _) => {
                return Err(Error::Config(format!(
                    "layer {i} ({spec:?}) has mismatched parameters"
                )))
            }
        };
    }
    vars.logits = Some(h);
    Ok(vars)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_cnn_shapes() {
        let spec = NetSpec::reference_cnn(10);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], vec![32, 12, 12]);
        assert_eq!(shapes[5], vec![64, 6, 6]);
        assert_eq!(shapes.last().unwrap(), &vec![10]);
        assert_eq!(spec.quantized_layers(), vec![0, 4, 9, 11]);
        let w = spec.weighted_layers().unwrap();
        assert_eq!(
            w[&4],
            WeightedLayer::Conv {
                c_in: 32,
                c_out: 64,
                kernel: 3,
                h_out: 6,
                w_out: 6
            }
        );
    }

    #[test]
    fn reference_cnn_for_other_inputs() {
        let spec = NetSpec::reference_cnn_for([3, 28, 20], 5).unwrap();
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[9], vec![64 * 7 * 5]);
        assert_eq!(shapes.last().unwrap(), &vec![5]);
        assert!(NetSpec::reference_cnn_for([1, 10, 12], 10).is_err());
        assert!(NetSpec::reference_cnn_for([1, 12, 12], 0).is_err());
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut spec = NetSpec::mlp(4, &[8], 3);
        spec.layers[2] = LayerSpec::Linear {
            in_features: 7,
            out_features: 3,
            quantize: true,
        };
        let err = spec.shapes().unwrap_err().to_string();
        assert!(err.contains("layer 2"), "{err}");
    }

    #[test]
    fn unquantized_layers_are_not_freezable() {
        let mut spec = NetSpec::mlp(4, &[8], 3);
        if let LayerSpec::Linear { quantize, .. } = &mut spec.layers[0] {
            *quantize = false;
        }
        let model = Model::init(spec, 0).unwrap();
        let layers: Vec<usize> = model.freezable_weights().iter().map(|l| l.layer).collect();
        assert_eq!(layers, vec![2]);
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::init(NetSpec::mlp(4, &[8], 3), 3).unwrap();
        let b = Model::init(NetSpec::mlp(4, &[8], 3), 3).unwrap();
        let c = Model::init(NetSpec::mlp(4, &[8], 3), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_parses_with_defaults_and_rejects_unknown_keys() {
        let json = r#"{"input":[4],"layers":[{"kind":"linear","in_features":4,"out_features":2}]}"#;
        let spec: NetSpec = serde_json::from_str(json).unwrap();
        assert_eq!((spec.bits_w, spec.bits_a), (4, 8));
        assert!(spec.layers[0].is_quantized());
        let bad = r#"{"input":[4],"layers":[{"kind":"linear","in_features":4,"out_features":2,"bogus":1}]}"#;
        assert!(serde_json::from_str::<NetSpec>(bad).is_err());
    }
}
