use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gelu, matmul_kernel, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Layer widths of a fully connected network. The output layer is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("MLP widths must be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// One affine map; `weight` is `[fan_in, fan_out]`, `bias` is `[fan_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Tape handles of an [`Mlp`]'s parameters, in [`Mlp::params`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects parameter gradients in [`Mlp::params`] order.
    pub fn grads(&self, g: &Gradients) -> Result<Vec<Tensor>> {
        self.vars.iter().map(|&v| g.wrt(v)).collect()
    }
}

impl Mlp {
    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "mlp-init");
        Self::init_with(spec, &mut rng)
    }

    pub fn init_with(spec: MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::matrix(fan_in, fan_out, data),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    /// Builds a network from explicit layers; shapes are checked against `spec`.
    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        if layers.len() + 1 != widths.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                widths.len() - 1,
                layers.len()
            )));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::Shape {
                    op: "mlp layer",
                    lhs: l.weight.shape().to_vec(),
                    rhs: vec![w[0], w[1]],
                });
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Evaluates the network without recording anything.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(Error::Shape {
                op: "mlp forward",
                lhs: x.shape().to_vec(),
                rhs: vec![self.spec.input_dim],
            });
        }
        let rows = x.rows();
        let mut h = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
            let mut out = matmul_kernel(&h, layer.weight.data(), rows, fan_in, fan_out);
            let b = layer.bias.data();
            for row in out.chunks_mut(fan_out) {
                for (o, bb) in row.iter_mut().zip(b) {
                    *o += bb;
                }
            }
            if i < last {
                match self.spec.activation {
                    Activation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Gelu => out.iter_mut().for_each(|v| *v = gelu(*v)),
                }
            }
            h = out;
        }
        Ok(Tensor::matrix(rows, self.spec.output_dim, h))
    }

    /// Places the parameters on `tape`, as differentiable leaves if
    /// `trainable`, otherwise as constants.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        MlpVars { vars }
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let rows = tape.value(x).shape()[0];
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.vars.chunks(2).enumerate() {
            let z = tape.matmul(h, pair[0])?;
            let b = tape.broadcast(pair[1], rows)?;
            let z = tape.add(z, b)?;
            h = if i < last {
                match self.spec.activation {
                    Activation::Relu => tape.relu(z),
                    Activation::Gelu => tape.gelu(z),
                }
            } else {
                z
            };
        }
        Ok(h)
    }
}
