use serde::{Deserialize, Serialize};

use super::euler::StepPlan;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::{Activation, FourierEmbed, Mlp, MlpSpec, MlpVars};
use crate::rng::{self, Rng};

/// `[rows, 0]` state matrix for tasks whose environment state is fixed.
pub fn empty_states(rows: usize) -> Tensor {
    Tensor::matrix(rows, 0, Vec::new())
}

/// Vector field `v(x, τ, s)` over actions plus its Euler integrator.
///
/// The network input is `[x, fourier(τ), s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowPolicy {
    net: Mlp,
    embed: FourierEmbed,
    action_dim: usize,
    state_dim: usize,
    n_steps: usize,
}

impl FlowPolicy {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        action_dim: usize,
        state_dim: usize,
        hidden: &[usize],
        activation: Activation,
        embed: FourierEmbed,
        n_steps: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::new(action_dim + embed.dim() + state_dim, hidden, action_dim, activation);
        let net = Mlp::init_with(spec, rng)?;
        Self::from_net(net, embed, action_dim, state_dim, n_steps)
    }

    pub fn from_net(
        net: Mlp,
        embed: FourierEmbed,
        action_dim: usize,
        state_dim: usize,
        n_steps: usize,
    ) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("flow policy needs n_steps >= 1".into()));
        }
        let spec = net.spec();
        if spec.input_dim != action_dim + embed.dim() + state_dim || spec.output_dim != action_dim {
            return Err(Error::Config(format!(
                "vector field network {spec:?} does not fit action_dim={action_dim}, \
                 embed={}, state_dim={state_dim}",
                embed.dim()
            )));
        }
        Ok(Self {
            net,
            embed,
            action_dim,
            state_dim,
            n_steps,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn embed(&self) -> FourierEmbed {
        self.embed
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn set_n_steps(&mut self, n_steps: usize) -> Result<()> {
        if n_steps == 0 {
            return Err(Error::Config("flow policy needs n_steps >= 1".into()));
        }
        self.n_steps = n_steps;
        Ok(())
    }

    fn check_inputs(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.action_dim {
            return Err(Error::Shape {
                op: "flow input x",
                lhs: x.shape().to_vec(),
                rhs: vec![self.action_dim],
            });
        }
        if s.shape() != [x.rows(), self.state_dim] {
            return Err(Error::Shape {
                op: "flow input s",
                lhs: s.shape().to_vec(),
                rhs: vec![x.rows(), self.state_dim],
            });
        }
        if taus.len() != x.rows() {
            return Err(Error::contract(format!(
                "{} flow times for {} rows",
                taus.len(),
                x.rows()
            )));
        }
        Ok(())
    }

    /// Detached velocity for a batch with per-row flow times.
    pub fn velocity(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<Tensor> {
        self.check_inputs(x, taus, s)?;
        let emb = self.embed.embed_rows(taus)?;
        let input = Tensor::concat_cols(&[x, &emb, s])?;
        self.net.forward(&input)
    }

    /// Recorded velocity; `x` may depend on parameters or earlier steps.
    pub fn velocity_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        taus: &[f64],
        s: &Tensor,
    ) -> Result<Var> {
        self.check_inputs(tape.value(x), taus, s)?;
        let emb = tape.constant(self.embed.embed_rows(taus)?);
        let input = if self.state_dim > 0 {
            let sv = tape.constant(s.clone());
            tape.concat(&[x, emb, sv])?
        } else {
            tape.concat(&[x, emb])?
        };
        self.net.forward_tape(tape, vars, input)
    }

    fn plans(&self, from: &[f64], to: &[f64]) -> Result<Vec<StepPlan>> {
        from.iter()
            .zip(to)
            .map(|(&a, &b)| StepPlan::new(a, b, self.n_steps))
            .collect()
    }

    /// Detached Euler integration, row `i` from `from[i]` to `to[i]`.
    pub fn integrate(&self, x: &Tensor, from: &[f64], to: &[f64], s: &Tensor) -> Result<Tensor> {
        if from.len() != x.rows() || to.len() != x.rows() {
            return Err(Error::contract("one interval per row required"));
        }
        let plans = self.plans(from, to)?;
        let kmax = plans.iter().map(StepPlan::steps).max().unwrap_or(0);
        let d = self.action_dim;
        let mut x = x.clone();
        for k in 0..kmax {
            let active: Vec<usize> = (0..plans.len()).filter(|&i| k < plans[i].steps()).collect();
            let taus: Vec<f64> = active.iter().map(|&i| plans[i].time(k)).collect();
            let v = if active.len() == x.rows() {
                self.velocity(&x, &taus, s)?
            } else {
                self.velocity(&x.gather_rows(&active), &taus, &s.gather_rows(&active))?
            };
            let xd = x.data_mut();
            for (j, &i) in active.iter().enumerate() {
                let h = plans[i].step_size();
                for c in 0..d {
                    xd[i * d + c] += h * v.data()[j * d + c];
                }
            }
            if !x.all_finite() {
                return Err(Error::Integration { step: k });
            }
        }
        Ok(x)
    }

    /// Euler integration recorded on `tape` for backpropagation through time.
    pub fn integrate_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        from: &[f64],
        to: &[f64],
        s: &Tensor,
    ) -> Result<Var> {
        let rows = tape.value(x).rows();
        if from.len() != rows || to.len() != rows {
            return Err(Error::contract("one interval per row required"));
        }
        let plans = self.plans(from, to)?;
        let kmax = plans.iter().map(StepPlan::steps).max().unwrap_or(0);
        let uniform = plans.windows(2).all(|w| w[0] == w[1]);
        let d = self.action_dim;
        let mut x = x;
        for k in 0..kmax {
            let taus: Vec<f64> = plans
                .iter()
                .map(|p| p.time(k.min(p.steps().saturating_sub(1))))
                .collect();
            let v = self.velocity_tape(tape, vars, x, &taus, s)?;
            let dx = if uniform {
                tape.scale(v, plans[0].step_size())
            } else {
                // rows that already reached their end time get a zero step
                let mut h = Vec::with_capacity(rows * d);
                for p in &plans {
                    let hi = if k < p.steps() { p.step_size() } else { 0.0 };
                    h.extend(std::iter::repeat_n(hi, d));
                }
                let hv = tape.constant(Tensor::matrix(rows, d, h));
                tape.mul(v, hv)?
            };
            x = tape.add(x, dx)?;
            if !tape.value(x).all_finite() {
                return Err(Error::Integration { step: k });
            }
        }
        Ok(x)
    }

    /// Flow map `Ψ_{1,τ}`: integrates every row from `tau_start` to 1.
    pub fn flow_map(&self, x: &Tensor, tau_start: f64, s: &Tensor) -> Result<Tensor> {
        let n = x.rows();
        self.integrate(x, &vec![tau_start; n], &vec![1.0; n], s)
    }

    /// Flow map with a per-row start time.
    pub fn flow_map_rows(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<Tensor> {
        self.integrate(x, taus, &vec![1.0; taus.len()], s)
    }

    pub fn flow_map_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        x: Var,
        tau_start: f64,
        s: &Tensor,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        self.integrate_tape(tape, vars, x, &vec![tau_start; n], &vec![1.0; n], s)
    }

    /// One action per row of `s`: `x0 ~ N(0, I)` pushed through the flow map.
    pub fn sample_actions(&self, s: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let x0 = rng::normal_matrix(rng, s.rows(), self.action_dim);
        self.flow_map(&x0, 0.0, s)
    }
}
