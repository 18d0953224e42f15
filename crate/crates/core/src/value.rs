//! Outer critic ensemble `Q_φ` (with Polyak targets) and the flow-consistent
//! intermediate value network `V_ω`.
//!
//! The inner flow MDP has no running reward and no discounting, so the value
//! of an intermediate latent is the target critic evaluated at the end of the
//! policy's flow from that latent. Nothing here accumulates inner-step
//! rewards.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::Aggregation;
use crate::error::{Error, Result};
use crate::flow::{CfmDraw, FlowPolicy};
use crate::nets::{polyak_update, Activation, FourierEmbed, Mlp, MlpSpec, MlpVars};
use crate::rng::Rng;

/// Transition batch. 2D tasks use empty states and terminal transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub s: Tensor,
    pub a: Tensor,
    pub r: Vec<f64>,
    pub s_next: Tensor,
    pub terminal: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Reduces per-member predictions (`values[m][i]`) row by row.
pub fn aggregate(values: &[Vec<f64>], agg: Aggregation) -> Vec<f64> {
    let n = values.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| match agg {
            Aggregation::Mean => values.iter().map(|v| v[i]).sum::<f64>() / values.len() as f64,
            Aggregation::Min => values.iter().map(|v| v[i]).fold(f64::INFINITY, f64::min),
        })
        .collect()
}

/// Recorded aggregation of member outputs (`[B, 1]` each). For `min` the
/// selection mask is taken from the forward values, which gives the usual
/// subgradient of the minimum.
fn aggregate_tape(tape: &mut Tape, outs: &[Var], agg: Aggregation) -> Result<Var> {
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    match agg {
        Aggregation::Mean => {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            Ok(tape.scale(acc, 1.0 / outs.len() as f64))
        }
        Aggregation::Min => {
            let rows = tape.value(outs[0]).rows();
            let vals: Vec<Vec<f64>> = outs.iter().map(|&o| tape.value(o).data().to_vec()).collect();
            let mut winner = vec![0usize; rows];
            for (i, w) in winner.iter_mut().enumerate() {
                for m in 1..vals.len() {
                    if vals[m][i] < vals[*w][i] {
                        *w = m;
                    }
                }
            }
            let mut acc: Option<Var> = None;
            for (m, &o) in outs.iter().enumerate() {
                let mask: Vec<f64> = winner.iter().map(|&w| (w == m) as u8 as f64).collect();
                let mv = tape.constant(Tensor::matrix(rows, 1, mask));
                let term = tape.mul(o, mv)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            Ok(acc.expect("non-empty ensemble"))
        }
    }
}

fn check_rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `Q_φ(s, a)` ensemble with matching Polyak-averaged targets `Q_φ̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticEnsemble {
    members: Vec<Mlp>,
    targets: Vec<Mlp>,
    pub aggregation: Aggregation,
    pub gamma: f64,
    state_dim: usize,
    action_dim: usize,
}

impl CriticEnsemble {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        size: usize,
        aggregation: Aggregation,
        gamma: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::new(state_dim + action_dim, hidden, 1, activation);
        let members = (0..size)
            .map(|_| Mlp::init_with(spec.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, aggregation, gamma, state_dim, action_dim)
    }

    /// Targets start as exact copies of the members.
    pub fn from_members(
        members: Vec<Mlp>,
        aggregation: Aggregation,
        gamma: f64,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("critic ensemble needs at least one member".into()));
        }
        for m in &members {
            if m.spec() != members[0].spec()
                || m.spec().input_dim != state_dim + action_dim
                || m.spec().output_dim != 1
            {
                return Err(Error::Config(format!("critic member {:?} does not fit", m.spec())));
            }
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Config(format!("gamma {gamma} outside [0, 1)")));
        }
        Ok(Self {
            targets: members.clone(),
            members,
            aggregation,
            gamma,
            state_dim,
            action_dim,
        })
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    pub fn targets(&self) -> &[Mlp] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    fn input(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        check_rows("critic input", s, a)?;
        Tensor::concat_cols(&[s, a])
    }

    /// Per-member predictions, `out[m][i]`.
    pub fn member_values(&self, s: &Tensor, a: &Tensor, use_target: bool) -> Result<Vec<Vec<f64>>> {
        let x = self.input(s, a)?;
        let nets = if use_target { &self.targets } else { &self.members };
        nets.iter()
            .map(|n| n.forward(&x).map(Tensor::into_data))
            .collect()
    }

    /// Aggregated `Q(s, a)` per row.
    pub fn q_value(&self, s: &Tensor, a: &Tensor, use_target: bool) -> Result<Vec<f64>> {
        Ok(aggregate(&self.member_values(s, a, use_target)?, self.aggregation))
    }

    /// `r + γ (1 − done) Q_φ̄(s', a')`. `next_actions` may be `None` only
    /// when no transition bootstraps.
    pub fn bellman_target(&self, batch: &Batch, next_actions: Option<&Tensor>) -> Result<Vec<f64>> {
        if !self.needs_bootstrap(batch) {
            return Ok(batch.r.clone());
        }
        let a_next = next_actions
            .ok_or_else(|| Error::contract("bootstrapped target needs next actions"))?;
        let q_next = self.q_value(&batch.s_next, a_next, true)?;
        Ok(batch
            .r
            .iter()
            .zip(&batch.terminal)
            .zip(q_next)
            .map(|((&r, &done), q)| if done { r } else { r + self.gamma * q })
            .collect())
    }

    /// Whether any transition in `batch` uses `Q_φ̄(s', a')`.
    pub fn needs_bootstrap(&self, batch: &Batch) -> bool {
        self.gamma > 0.0 && batch.terminal.iter().any(|&d| !d)
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<MlpVars> {
        self.members.iter().map(|m| m.on_tape(tape, trainable)).collect()
    }

    /// Sum over members of the mean squared error against the shared target `y`.
    pub fn critic_loss(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        s: &Tensor,
        a: &Tensor,
        y: &[f64],
    ) -> Result<Var> {
        if y.len() != a.rows() {
            return Err(Error::contract("one target per row required"));
        }
        let x = tape.constant(self.input(s, a)?);
        let yv = tape.constant(Tensor::matrix(y.len(), 1, y.to_vec()));
        let mut total: Option<Var> = None;
        for (m, v) in self.members.iter().zip(vars) {
            let q = m.forward_tape(tape, v, x)?;
            let d = tape.sub(q, yv)?;
            let sq = tape.square(d);
            let l = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty ensemble"))
    }

    /// Aggregated online `Q(s, a)` recorded on `tape` as `[B, 1]`; `a` may
    /// depend on policy parameters. Critic parameters enter as constants.
    pub fn q_tape(&self, tape: &mut Tape, s: &Tensor, a: Var) -> Result<Var> {
        check_rows("critic input", s, tape.value(a))?;
        let input = if self.state_dim > 0 {
            let sv = tape.constant(s.clone());
            tape.concat(&[sv, a])?
        } else {
            a
        };
        let mut outs = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let vars = m.on_tape(tape, false);
            outs.push(m.forward_tape(tape, &vars, input)?);
        }
        aggregate_tape(tape, &outs, self.aggregation)
    }

    /// `∇_a Q(s, a)` of the aggregated online critic, row by row.
    pub fn action_gradient(&self, s: &Tensor, a: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone());
        let q = self.q_tape(&mut tape, s, av)?;
        let total = tape.sum(q);
        tape.backward(total)?.wrt(av)
    }

    pub fn update_targets(&mut self, eta: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            polyak_update(t, m, eta)?;
        }
        Ok(())
    }
}

/// Flow-consistent intermediate value `V_ω(s, x_τ, τ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterValueNet {
    members: Vec<Mlp>,
    embed: FourierEmbed,
    pub aggregation: Aggregation,
    state_dim: usize,
    action_dim: usize,
}

/// Regression targets used by one intermediate value update.
#[derive(Clone, Debug, PartialEq)]
pub struct InterValueTargets {
    /// Terminal latent `x̂1 = Ψ_{1,τ}(x_τ, s)`.
    pub x1_hat: Tensor,
    /// `Q_φ̄(s, x̂1)`.
    pub target: Vec<f64>,
}

impl InterValueNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        embed: FourierEmbed,
        size: usize,
        aggregation: Aggregation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = MlpSpec::new(action_dim + embed.dim() + state_dim, hidden, 1, activation);
        let members = (0..size)
            .map(|_| Mlp::init_with(spec.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(members, embed, aggregation, state_dim, action_dim)
    }

    pub fn from_members(
        members: Vec<Mlp>,
        embed: FourierEmbed,
        aggregation: Aggregation,
        state_dim: usize,
        action_dim: usize,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("value ensemble needs at least one member".into()));
        }
        for m in &members {
            if m.spec().input_dim != action_dim + embed.dim() + state_dim || m.spec().output_dim != 1 {
                return Err(Error::Config(format!("value member {:?} does not fit", m.spec())));
            }
        }
        Ok(Self {
            members,
            embed,
            aggregation,
            state_dim,
            action_dim,
        })
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    fn input(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<Tensor> {
        check_rows("value input", x, s)?;
        if x.cols() != self.action_dim || s.cols() != self.state_dim || taus.len() != x.rows() {
            return Err(Error::Shape {
                op: "value input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.action_dim, self.state_dim, taus.len()],
            });
        }
        let emb = self.embed.embed_rows(taus)?;
        Tensor::concat_cols(&[x, &emb, s])
    }

    /// Aggregated value per row.
    pub fn value(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<Vec<f64>> {
        let input = self.input(x, taus, s)?;
        let vals = self
            .members
            .iter()
            .map(|m| m.forward(&input).map(Tensor::into_data))
            .collect::<Result<Vec<_>>>()?;
        Ok(aggregate(&vals, self.aggregation))
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Vec<MlpVars> {
        self.members.iter().map(|m| m.on_tape(tape, trainable)).collect()
    }

    /// Per-member `[B, 1]` outputs recorded on `tape`.
    fn member_outputs(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        x: Var,
        taus: &[f64],
        s: &Tensor,
    ) -> Result<Vec<Var>> {
        let xv = tape.value(x);
        check_rows("value input", xv, s)?;
        if taus.len() != xv.rows() {
            return Err(Error::contract("one flow time per row required"));
        }
        let emb = tape.constant(self.embed.embed_rows(taus)?);
        let input = if self.state_dim > 0 {
            let sv = tape.constant(s.clone());
            tape.concat(&[x, emb, sv])?
        } else {
            tape.concat(&[x, emb])?
        };
        self.members
            .iter()
            .zip(vars)
            .map(|(m, v)| m.forward_tape(tape, v, input))
            .collect()
    }

    /// Aggregated value recorded on `tape` as `[B, 1]`.
    pub fn value_tape(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        x: Var,
        taus: &[f64],
        s: &Tensor,
    ) -> Result<Var> {
        let outs = self.member_outputs(tape, vars, x, taus, s)?;
        aggregate_tape(tape, &outs, self.aggregation)
    }

    /// `∇_x V(s, x, τ)` row by row, parameters held fixed.
    pub fn grad_wrt_x(&self, x: &Tensor, taus: &[f64], s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.on_tape(&mut tape, false);
        let xv = tape.leaf(x.clone());
        let v = self.value_tape(&mut tape, &vars, xv, taus, s)?;
        let total = tape.sum(v);
        tape.backward(total)?.wrt(xv)
    }

    /// Targets `Q_φ̄(s, Ψ_{1,τ}(x_τ, s))`, computed fully detached.
    pub fn targets(
        critic: &CriticEnsemble,
        policy: &FlowPolicy,
        s: &Tensor,
        x_tau: &Tensor,
        taus: &[f64],
    ) -> Result<InterValueTargets> {
        let x1_hat = policy.flow_map_rows(x_tau, taus, s)?;
        let target = critic.q_value(s, &x1_hat, true)?;
        Ok(InterValueTargets { x1_hat, target })
    }

    /// Sum over members of `mean (V_m(s, x_τ, τ) − target)²`.
    pub fn regression_loss(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        s: &Tensor,
        x_tau: &Tensor,
        taus: &[f64],
        target: &[f64],
    ) -> Result<Var> {
        let x = tape.constant(x_tau.clone());
        let outs = self.member_outputs(tape, vars, x, taus, s)?;
        let yv = tape.constant(Tensor::matrix(target.len(), 1, target.to_vec()));
        let mut total: Option<Var> = None;
        for o in outs {
            let d = tape.sub(o, yv)?;
            let sq = tape.square(d);
            let l = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("non-empty ensemble"))
    }

    /// Intermediate value loss on the path points of a shared draw.
    #[allow(clippy::too_many_arguments)]
    pub fn inter_value_loss(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        critic: &CriticEnsemble,
        policy: &FlowPolicy,
        s: &Tensor,
        draw: &CfmDraw,
    ) -> Result<(Var, InterValueTargets)> {
        let t = Self::targets(critic, policy, s, &draw.x_tau, &draw.tau)?;
        let loss = self.regression_loss(tape, vars, s, &draw.x_tau, &draw.tau, &t.target)?;
        Ok((loss, t))
    }

    /// Same as [`Self::inter_value_loss`] with a fresh `τ ~ U(0,1)`, `x0 ~ N(0, I)`.
    #[allow(clippy::too_many_arguments)]
    pub fn inter_value_loss_sampled(
        &self,
        tape: &mut Tape,
        vars: &[MlpVars],
        critic: &CriticEnsemble,
        policy: &FlowPolicy,
        s: &Tensor,
        x1: &Tensor,
        rng: &mut Rng,
    ) -> Result<(Var, InterValueTargets, CfmDraw)> {
        let draw = CfmDraw::sample(x1, rng)?;
        let (loss, t) = self.inter_value_loss(tape, vars, critic, policy, s, &draw)?;
        Ok((loss, t, draw))
    }
}
