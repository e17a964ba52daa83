//! Small feed-forward classifiers over the unit box `[0,1]^d`.

mod head;
mod train;

pub use head::{gumbel_softmax, gumbel_softmax_with_noise, Head};
pub(crate) use head::gumbel_noise;
pub use train::{accuracy, train, TrainConfig};

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, ConvGeometry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Tolerance used when checking that an input lies in the unit box.
pub const DOMAIN_TOL: f64 = 1e-9;

const CHECKPOINT_FORMAT: &str = "certattack-model";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    /// `y = x·W + b` with `W` stored row-major as `[inputs, outputs]`.
    Linear {
        inputs: usize,
        outputs: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    /// Valid convolution; `weight` is `[out_channels, in_channels·k·k]`.
    Conv2d {
        geom: ConvGeometry,
        weight: Vec<f64>,
        bias: Vec<f64>,
    },
    Relu,
    /// Marks the conv → dense transition; activations are already flat.
    Flatten,
}

impl Layer {
    fn output_len(&self, input_len: usize) -> Result<usize> {
        match self {
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                if *inputs != input_len || weight.len() != inputs * outputs || bias.len() != *outputs {
                    return Err(Error::ShapeMismatch {
                        op: "linear layer",
                        lhs: vec![input_len],
                        rhs: vec![*inputs, *outputs],
                    });
                }
                Ok(*outputs)
            }
            Layer::Conv2d { geom, weight, bias } => {
                if !geom.is_valid()
                    || geom.in_len() != input_len
                    || weight.len() != geom.weight_len()
                    || bias.len() != geom.out_channels
                {
                    return Err(Error::ShapeMismatch {
                        op: "conv layer",
                        lhs: vec![input_len],
                        rhs: vec![geom.in_channels, geom.in_h, geom.in_w],
                    });
                }
                Ok(geom.out_len())
            }
            Layer::Relu | Layer::Flatten => Ok(input_len),
        }
    }

    fn params_mut(&mut self) -> Option<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Linear { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }
}

/// A sequential classifier `f: [0,1]^d → R^K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<Layer>,
}

/// Parameters of a [`Classifier`] recorded on a tape.
pub struct BoundParams {
    vars: Vec<Option<(Var, Var)>>,
}

impl BoundParams {
    /// `(weight, bias)` tape variables per parameterised layer, in order.
    pub fn trainable(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|(w, b)| (i, w, b)))
    }
}

impl Classifier {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let mut len: usize = input_shape.iter().product();
        if len == 0 {
            return Err(Error::invalid("empty input shape"));
        }
        for layer in &layers {
            len = layer.output_len(len)?;
        }
        if len != num_classes {
            return Err(Error::ShapeMismatch {
                op: "classifier output",
                lhs: vec![len],
                rhs: vec![num_classes],
            });
        }
        for layer in &layers {
            if let Layer::Linear { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } = layer {
                if weight.iter().chain(bias).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("classifier parameters"));
                }
            }
        }
        Ok(Self {
            input_shape,
            num_classes,
            layers,
        })
    }

    /// Fully connected ReLU network `d → hidden… → K` with He-uniform weights.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[0x6d6c70]);
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(init_linear(&mut rng, width, h));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(init_linear(&mut rng, width, num_classes));
        Self::new(vec![input_dim], num_classes, layers)
    }

    /// The desk-scale MLP `d → 64 → 64 → K`.
    pub fn default_mlp(input_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        Self::mlp(input_dim, &[64, 64], num_classes, seed)
    }

    /// Two 3×3 stride-2 convolutions (16 and 32 channels) followed by two
    /// linear layers (128 hidden units), ReLU throughout.
    pub fn small_cnn(channels: usize, height: usize, width: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, &[0x636e6e]);
        let g1 = ConvGeometry {
            in_channels: channels,
            in_h: height,
            in_w: width,
            out_channels: 16,
            kernel: 3,
            stride: 2,
        };
        let g2 = ConvGeometry {
            in_channels: 16,
            in_h: g1.out_h(),
            in_w: g1.out_w(),
            out_channels: 32,
            kernel: 3,
            stride: 2,
        };
        let flat = g2.out_len();
        let layers = vec![
            init_conv(&mut rng, g1),
            Layer::Relu,
            init_conv(&mut rng, g2),
            Layer::Relu,
            Layer::Flatten,
            init_linear(&mut rng, flat, 128),
            Layer::Relu,
            init_linear(&mut rng, 128, num_classes),
        ];
        Self::new(vec![channels, height, width], num_classes, layers)
    }

    /// Single affine layer `x·W + b`, `weight` as `[d, K]` row-major.
    pub fn linear(input_dim: usize, num_classes: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![input_dim],
            num_classes,
            vec![Layer::Linear {
                inputs: input_dim,
                outputs: num_classes,
                weight,
                bias,
            }],
        )
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Linear { weight, bias, .. } | Layer::Conv2d { weight, bias, .. } => weight.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Checks `x ∈ [0,1]^d` up to [`DOMAIN_TOL`].
    pub fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "classifier input",
                lhs: vec![x.len()],
                rhs: self.input_shape.clone(),
            });
        }
        check_unit_box(x)
    }

    /// Logits for a batch of `n` flattened inputs (no domain check; noisy
    /// inputs legitimately leave the box).
    pub fn forward_batch(&self, xs: &[f64], n: usize) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if xs.len() != n * d {
            return Err(Error::ShapeMismatch {
                op: "forward_batch",
                lhs: vec![xs.len()],
                rhs: vec![n, d],
            });
        }
        let mut act = xs.to_vec();
        for layer in &self.layers {
            act = match layer {
                Layer::Linear {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => {
                    let mut out = Vec::with_capacity(n * outputs);
                    for _ in 0..n {
                        out.extend_from_slice(bias);
                    }
                    kernels::matmul_acc(&act, weight, &mut out, n, *inputs, *outputs);
                    out
                }
                Layer::Conv2d { geom, weight, bias } => kernels::conv2d_forward(geom, &act, weight, bias, n),
                Layer::Relu => {
                    act.iter_mut().for_each(|v| *v = v.max(0.0));
                    act
                }
                Layer::Flatten => act,
            };
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier forward"));
        }
        Ok(act)
    }

    /// Logits `f(x)` for one input in the unit box.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_domain(x.data())?;
        Tensor::from_vec(self.forward_batch(x.data(), 1)?)
    }

    /// Hard prediction `argmax f(x)`, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(x)?.data()))
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pair = match layer {
                Layer::Linear {
                    inputs,
                    outputs,
                    weight,
                    bias,
                } => Some((
                    Tensor::new(vec![*inputs, *outputs], weight.clone())?,
                    Tensor::new(vec![*outputs], bias.clone())?,
                )),
                Layer::Conv2d { geom, weight, bias } => Some((
                    Tensor::new(vec![geom.out_channels, geom.patch_len()], weight.clone())?,
                    Tensor::new(vec![geom.out_channels], bias.clone())?,
                )),
                _ => None,
            };
            vars.push(pair.map(|(w, b)| {
                if trainable {
                    (tape.leaf(w), tape.leaf(b))
                } else {
                    (tape.constant(w), tape.constant(b))
                }
            }));
        }
        Ok(BoundParams { vars })
    }

    /// Differentiable forward of an `[n, d]` batch, giving `[n, K]` logits.
    pub fn forward_on(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let mut act = x;
        for (layer, vars) in self.layers.iter().zip(&params.vars) {
            act = match (layer, vars) {
                (Layer::Linear { .. }, Some((w, b))) => {
                    let z = tape.matmul(act, *w)?;
                    tape.add_row(z, *b)?
                }
                (Layer::Conv2d { geom, .. }, Some((w, b))) => tape.conv2d(act, *w, Some(*b), *geom)?,
                (Layer::Relu, _) => tape.relu(act)?,
                (Layer::Flatten, _) => act,
                _ => unreachable!("parameter binding out of sync with layers"),
            };
        }
        Ok(act)
    }

    /// Differentiable logits of a single input variable of length `d`.
    pub fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_domain(tape.try_value(x)?.data())?;
        let params = self.bind(tape, false)?;
        let rows = tape.reshape(x, vec![1, self.input_dim()])?;
        let out = self.forward_on(tape, &params, rows)?;
        tape.reshape(out, vec![self.num_classes])
    }

    /// Writes a versioned JSON checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text).map_err(|e| match e {
            Error::Serde(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let m = ck.model;
        Self::new(m.input_shape, m.num_classes, m.layers)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Classifier,
}

fn init_linear(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Layer {
    let bound = (6.0 / inputs as f64).sqrt();
    Layer::Linear {
        inputs,
        outputs,
        weight: (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect(),
        bias: vec![0.0; outputs],
    }
}

fn init_conv(rng: &mut impl Rng, geom: ConvGeometry) -> Layer {
    let bound = (6.0 / geom.patch_len() as f64).sqrt();
    Layer::Conv2d {
        geom,
        weight: (0..geom.weight_len()).map(|_| rng.random_range(-bound..bound)).collect(),
        bias: vec![0.0; geom.out_channels],
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn check_unit_box(x: &[f64]) -> Result<()> {
    for (index, &value) in x.iter().enumerate() {
        if !(-DOMAIN_TOL..=1.0 + DOMAIN_TOL).contains(&value) {
            return Err(Error::DomainViolation { index, value });
        }
    }
    Ok(())
}
