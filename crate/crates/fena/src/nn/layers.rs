use crate::error::{Error, Result};
use crate::nn::activation::Activation;
use crate::nn::params::{Bound, ParamId, ParamSet};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Whether a forward pass is part of training. Dropout only fires in
/// `Train`; in `Infer` it is the identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Uniform Glorot draw: U(−a, a) with a = √(6/(fan_in+fan_out)).
/// Fill order is row-major, which pins the RNG stream layout.
pub fn glorot_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot shape/product")
}

/// Fully connected layer computing `act(x·W + b)` for row-stacked inputs.
#[derive(Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub act: Activation,
    pub act_scalar: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
    name: String,
}

impl Dense {
    pub fn init(
        params: &mut ParamSet,
        name: &str,
        in_width: usize,
        out_width: usize,
        act: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Dense {
        let w = params.add(
            format!("{}.w", name),
            glorot_uniform(rng, &[in_width, out_width], in_width, out_width),
        );
        let b = params.add(format!("{}.b", name), Tensor::zeros(&[out_width]));
        let act_scalar = act.register_scalar(params, name);
        Dense {
            w,
            b,
            act,
            act_scalar,
            in_width,
            out_width,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let z = tape.matmul(x, bound.var(self.w))?;
        let z = tape.add_bias_row(z, bound.var(self.b))?;
        self.act
            .apply(tape, z, self.act_scalar.map(|id| (bound, id)), &self.name)
    }
}

/// Stack of dense layers; widths and activations are parallel lists.
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Mlp {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        in_width: usize,
        widths: &[usize],
        acts: &[Activation],
        rng: &mut ChaCha8Rng,
    ) -> Result<Mlp> {
        if widths.len() != acts.len() {
            return Err(Error::Config(format!(
                "{}: {} widths but {} activations",
                name,
                widths.len(),
                acts.len()
            )));
        }
        if widths.is_empty() {
            return Err(Error::Config(format!("{}: empty layer list", name)));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_width;
        for (i, (&wd, &act)) in widths.iter().zip(acts).enumerate() {
            layers.push(Dense::init(
                params,
                &format!("{}.{}", name, i),
                prev,
                wd,
                act,
                rng,
            ));
            prev = wd;
        }
        Ok(Mlp {
            layers,
            in_width,
            out_width: prev,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(tape, bound, x)?;
        }
        Ok(x)
    }
}

/// One entry of a 1-D convolutional feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ConvLayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    MaxPool {
        width: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
}

/// The fixed four-stage conv/pool/dropout pyramid used by the beam
/// surrogates: 8×k3s1, 16×k3s1, 16×k5s1, 16×k5s2, each followed by a
/// width-2 stride-2 max pool and 20% dropout. A 101-long input flattens
/// to 16 features.
pub fn standard_conv_stack() -> Vec<ConvLayerSpec> {
    use ConvLayerSpec::*;
    vec![
        Conv { out_channels: 8, kernel: 3, stride: 1 },
        MaxPool { width: 2, stride: 2 },
        Dropout { rate: 0.2 },
        Conv { out_channels: 16, kernel: 3, stride: 1 },
        MaxPool { width: 2, stride: 2 },
        Dropout { rate: 0.2 },
        Conv { out_channels: 16, kernel: 5, stride: 1 },
        MaxPool { width: 2, stride: 2 },
        Dropout { rate: 0.2 },
        Conv { out_channels: 16, kernel: 5, stride: 2 },
        MaxPool { width: 2, stride: 2 },
        Dropout { rate: 0.2 },
    ]
}

#[derive(Clone)]
enum ConvStep {
    Conv {
        w: ParamId,
        b: ParamId,
        kernel: usize,
        stride: usize,
        out_channels: usize,
    },
    MaxPool {
        width: usize,
        stride: usize,
    },
    Dropout {
        rate: f64,
    },
}

/// 1-D conv feature extractor ending in a flatten. Convolutions are linear;
/// the pooling stages supply the nonlinearity, matching the reference stack.
#[derive(Clone)]
pub struct ConvNet {
    steps: Vec<ConvStep>,
    pub in_channels: usize,
    name: String,
}

impl ConvNet {
    pub fn build(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        spec: &[ConvLayerSpec],
        rng: &mut ChaCha8Rng,
    ) -> Result<ConvNet> {
        if spec.is_empty() {
            return Err(Error::Config(format!("{}: empty conv stack", name)));
        }
        let mut steps = Vec::with_capacity(spec.len());
        let mut chans = in_channels;
        for (i, layer) in spec.iter().enumerate() {
            match *layer {
                ConvLayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if kernel == 0 || stride == 0 || out_channels == 0 {
                        return Err(Error::Config(format!(
                            "{}.{}: conv kernel/stride/channels must be positive",
                            name, i
                        )));
                    }
                    let w = params.add(
                        format!("{}.{}.w", name, i),
                        glorot_uniform(
                            rng,
                            &[out_channels, chans, kernel],
                            chans * kernel,
                            out_channels * kernel,
                        ),
                    );
                    let b = params.add(format!("{}.{}.b", name, i), Tensor::zeros(&[out_channels]));
                    steps.push(ConvStep::Conv {
                        w,
                        b,
                        kernel,
                        stride,
                        out_channels,
                    });
                    chans = out_channels;
                }
                ConvLayerSpec::MaxPool { width, stride } => {
                    if width == 0 || stride == 0 {
                        return Err(Error::Config(format!(
                            "{}.{}: pool width/stride must be positive",
                            name, i
                        )));
                    }
                    steps.push(ConvStep::MaxPool { width, stride });
                }
                ConvLayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Config(format!(
                            "{}.{}: dropout rate {} outside [0, 1)",
                            name, i, rate
                        )));
                    }
                    steps.push(ConvStep::Dropout { rate });
                }
            }
        }
        Ok(ConvNet {
            steps,
            in_channels,
            name: name.to_string(),
        })
    }

    /// Layer-by-layer shape trace: flattened feature count for an input of
    /// `in_len` positions. Errors when any stage would underflow.
    pub fn out_features(&self, in_len: usize) -> Result<usize> {
        let mut len = in_len;
        let mut chans = self.in_channels;
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                ConvStep::Conv {
                    kernel,
                    stride,
                    out_channels,
                    ..
                } => {
                    if len < *kernel {
                        return Err(Error::Config(format!(
                            "{}: stage {} needs length ≥ {}, has {}",
                            self.name, i, kernel, len
                        )));
                    }
                    len = (len - kernel) / stride + 1;
                    chans = *out_channels;
                }
                ConvStep::MaxPool { width, stride } => {
                    if len < *width {
                        return Err(Error::Config(format!(
                            "{}: stage {} needs length ≥ {}, has {}",
                            self.name, i, width, len
                        )));
                    }
                    len = (len - width) / stride + 1;
                }
                ConvStep::Dropout { .. } => {}
            }
        }
        Ok(len * chans)
    }

    /// Runs the stack on a B×C×L input and flattens to B×features.
    /// Training-phase dropout draws its masks from `rng` in stack order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        mut x: Var,
        phase: Phase,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        for step in &self.steps {
            match step {
                ConvStep::Conv { w, b, stride, .. } => {
                    x = tape.conv1d(x, bound.var(*w), *stride)?;
                    x = tape.add_chan_bias(x, bound.var(*b))?;
                }
                ConvStep::MaxPool { width, stride } => {
                    x = tape.max_pool1d(x, *width, *stride)?;
                }
                ConvStep::Dropout { rate } => {
                    if phase == Phase::Train && *rate > 0.0 {
                        let rng = rng.as_deref_mut().ok_or_else(|| {
                            Error::Config(format!("{}: training dropout needs an RNG", self.name))
                        })?;
                        x = apply_dropout(tape, x, *rate, rng)?;
                    }
                }
            }
        }
        let shape = tape.value(x).shape().to_vec();
        let (b, c, l) = match shape.as_slice() {
            [b, c, l] => (*b, *c, *l),
            other => {
                return Err(Error::ShapeMismatch {
                    op: "ConvNet::forward",
                    detail: format!("expected 3-D activation, got {:?}", other),
                })
            }
        };
        tape.reshape(x, vec![b, c * l])
    }
}

/// Inverted dropout: each kept entry is scaled by 1/(1−rate) at train time,
/// so inference needs no compensation.
pub fn apply_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    let keep = 1.0 - rate;
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = tape.constant(Tensor::new(shape, data)?);
    tape.mul(x, mask)
}
