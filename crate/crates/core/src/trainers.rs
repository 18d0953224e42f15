//! Training steps for Q-Flow and the comparison methods.
//!
//! Every method shares one critic update ([`critic_update`]) and one Polyak
//! step; they differ only in how the actor is trained. A step is split into
//! public sub-updates so tests can recompose them by hand.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::flow::{matching_loss, CfmDraw, FlowPolicy};
use crate::nets::{global_norm, AdamConfig, AdamState, FourierEmbed, Mlp, MlpSpec};
use crate::rng::{self, Rng};
use crate::value::{Batch, CriticEnsemble, InterValueNet};

/// Per-step scalars streamed to the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_critic: f64,
    /// `None` for methods without an intermediate value network.
    pub loss_inter_value: Option<f64>,
    pub loss_policy: f64,
    /// Global L2 norm of the actor gradient, before any clipping.
    pub grad_norm_policy: f64,
    pub ms_per_step: f64,
}

/// Sub-updates in the order they ran; recorded only when tracing is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Update {
    Critic,
    InterValue,
    Policy,
    OneStep,
    Targets,
}

/// Independent random streams used by the training loop.
#[derive(Clone, Debug)]
pub struct Streams {
    /// Minibatch indices.
    pub batch: Rng,
    /// Shared `(x0, τ)` draws.
    pub draws: Rng,
    /// Next-state actions for bootstrapped critic targets.
    pub next_actions: Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self {
            batch: rng::stream(seed, "train/batch"),
            draws: rng::stream(seed, "train/draws"),
            next_actions: rng::stream(seed, "train/next-actions"),
        }
    }
}

/// `batch_size` indices drawn uniformly with replacement from `0..n`.
pub fn sample_indices(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// All networks and optimizer moments of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub method: Method,
    pub policy: FlowPolicy,
    pub policy_opt: AdamState,
    pub critic: CriticEnsemble,
    pub critic_opt: Vec<AdamState>,
    pub inter_value: Option<InterValueNet>,
    pub value_opt: Vec<AdamState>,
    /// One-step actor `μ_ψ(x0, s)` of the FQL-style baseline.
    pub one_step: Option<Mlp>,
    pub one_step_opt: Option<AdamState>,
    pub step: u64,
    #[serde(skip)]
    pub trace: Option<Vec<Update>>,
}

impl TrainState {
    /// Fresh networks. Each network draws from its own init stream, so the
    /// critic starts identical for every method under the same seed.
    pub fn new(cfg: &TrainConfig, state_dim: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let net = &cfg.network;
        let adam = AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        };
        let embed = FourierEmbed::new(net.time_embed_dim)?;
        let policy = FlowPolicy::new(
            action_dim,
            state_dim,
            &net.policy_hidden,
            net.activation,
            embed,
            net.flow_steps,
            &mut rng::stream(cfg.seed, "init/policy"),
        )?;
        let critic = CriticEnsemble::new(
            state_dim,
            action_dim,
            &net.value_hidden,
            net.activation,
            net.ensemble_size,
            net.aggregation,
            cfg.train.gamma,
            &mut rng::stream(cfg.seed, "init/critic"),
        )?;
        let inter_value = if cfg.method.uses_inter_value() {
            Some(InterValueNet::new(
                state_dim,
                action_dim,
                &net.value_hidden,
                net.activation,
                embed,
                net.inter_value_ensemble,
                net.aggregation,
                &mut rng::stream(cfg.seed, "init/inter-value"),
            )?)
        } else {
            None
        };
        let one_step = if cfg.method == Method::Fql {
            let spec = MlpSpec::new(action_dim + state_dim, &net.policy_hidden, action_dim, net.activation);
            Some(Mlp::init_with(spec, &mut rng::stream(cfg.seed, "init/one-step"))?)
        } else {
            None
        };
        Ok(Self {
            method: cfg.method,
            policy_opt: AdamState::new(policy.net(), adam),
            critic_opt: critic.members().iter().map(|m| AdamState::new(m, adam)).collect(),
            value_opt: inter_value
                .iter()
                .flat_map(|v| v.members().iter().map(|m| AdamState::new(m, adam)))
                .collect(),
            one_step_opt: one_step.as_ref().map(|m| AdamState::new(m, adam)),
            policy,
            critic,
            inter_value,
            one_step,
            step: 0,
            trace: None,
        })
    }

    /// Continues this run under `cfg.method`: the flow, critic, their optimizer
    /// moments and the step counter carry over; networks the new method needs
    /// but this state lacks come from their usual init streams.
    pub fn switch_method(self, cfg: &TrainConfig) -> Result<Self> {
        let mut next = TrainState::new(cfg, self.policy.state_dim(), self.policy.action_dim())?;
        if next.inter_value.is_some() && self.inter_value.is_some() {
            next.inter_value = self.inter_value;
            next.value_opt = self.value_opt;
        }
        if next.one_step.is_some() && self.one_step.is_some() {
            next.one_step = self.one_step;
            next.one_step_opt = self.one_step_opt;
        }
        next.policy = self.policy;
        next.policy_opt = self.policy_opt;
        next.critic = self.critic;
        next.critic_opt = self.critic_opt;
        next.step = self.step;
        next.trace = self.trace;
        Ok(next)
    }

    fn record(&mut self, u: Update) {
        if let Some(t) = self.trace.as_mut() {
            t.push(u);
        }
    }

    fn inter_value(&self) -> Result<&InterValueNet> {
        self.inter_value
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no intermediate value network", self.method)))
    }

    fn one_step_net(&self) -> Result<&Mlp> {
        self.one_step
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} has no one-step actor", self.method)))
    }

    /// Detached one-step actions `μ_ψ(x0, s)`.
    pub fn one_step_actions(&self, x0: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.one_step_net()?.forward(&Tensor::concat_cols(&[x0, s])?)
    }

    /// Actions used for bootstrapping and evaluation.
    pub fn act(&self, s: &Tensor, candidates: usize, rng: &mut Rng) -> Result<Tensor> {
        match self.method {
            Method::Fql => {
                let x0 = rng::normal_matrix(rng, s.rows(), self.policy.action_dim());
                self.one_step_actions(&x0, s)
            }
            Method::Rejection => rejection_policy(self, s, candidates, rng),
            _ => self.policy.sample_actions(s, rng),
        }
    }
}

fn check_loss(value: f64, step: u64, loss: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { step, loss })
    }
}

fn clip(grads: &mut [Tensor], max_norm: Option<f64>) {
    if let Some(max) = max_norm {
        let n = global_norm(grads);
        if n > max && n > 0.0 {
            let k = max / n;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
    }
}

/// Bellman regression of every critic member. Shared by all methods.
pub fn critic_update(st: &mut TrainState, batch: &Batch, rng: &mut Rng) -> Result<f64> {
    let next = if st.critic.needs_bootstrap(batch) {
        // FQL bootstraps with its one-step actor, everything else with the flow
        let a = match st.method {
            Method::Fql => {
                let x0 = rng::normal_matrix(rng, batch.len(), st.policy.action_dim());
                st.one_step_actions(&x0, &batch.s_next)?
            }
            _ => st.policy.sample_actions(&batch.s_next, rng)?,
        };
        Some(a)
    } else {
        None
    };
    let y = st.critic.bellman_target(batch, next.as_ref())?;
    let mut tape = Tape::new();
    let vars = st.critic.on_tape(&mut tape, true);
    let loss = st.critic.critic_loss(&mut tape, &vars, &batch.s, &batch.a, &y)?;
    let value = check_loss(tape.value(loss).item(), st.step, "critic")?;
    let grads = tape.backward(loss)?;
    for i in 0..vars.len() {
        let g = vars[i].grads(&grads)?;
        st.critic_opt[i].step(&mut st.critic.members_mut()[i], &g, "critic")?;
    }
    st.record(Update::Critic);
    Ok(value)
}

/// Regresses `V_ω(s, x_τ, τ)` onto `Q_φ̄(s, Ψ_{1,τ}(x_τ))` at the draw.
pub fn inter_value_update(st: &mut TrainState, s: &Tensor, draw: &CfmDraw) -> Result<f64> {
    let v = st.inter_value()?;
    let mut tape = Tape::new();
    let vars = v.on_tape(&mut tape, true);
    let (loss, _) = v.inter_value_loss(&mut tape, &vars, &st.critic, &st.policy, s, draw)?;
    let value = check_loss(tape.value(loss).item(), st.step, "inter_value")?;
    let grads = tape.backward(loss)?;
    let v = st.inter_value.as_mut().expect("checked above");
    for i in 0..vars.len() {
        let g = vars[i].grads(&grads)?;
        st.value_opt[i].step(&mut v.members_mut()[i], &g, "inter_value")?;
    }
    st.record(Update::InterValue);
    Ok(value)
}

/// `(x1 − x0) + (1/λ) ∇_{x_τ} V_ω(s, x_τ, τ)`, detached.
pub fn qflow_target(st: &TrainState, s: &Tensor, draw: &CfmDraw, inv_lambda: f64) -> Result<Tensor> {
    if inv_lambda == 0.0 {
        return Ok(draw.u.clone());
    }
    let g = st.inter_value()?.grad_wrt_x(&draw.x_tau, &draw.tau, s)?;
    draw.u.zip_map(&g, |u, g| u + inv_lambda * g)
}

/// `(x1 − x0) + (1/λ) ∇_x Q_φ(s, x)|_{x = x_τ}`, detached.
pub fn outer_guidance_target(
    st: &TrainState,
    s: &Tensor,
    draw: &CfmDraw,
    inv_lambda: f64,
) -> Result<Tensor> {
    if inv_lambda == 0.0 {
        return Ok(draw.u.clone());
    }
    let g = st.critic.action_gradient(s, &draw.x_tau)?;
    draw.u.zip_map(&g, |u, g| u + inv_lambda * g)
}

/// Recorded `mean_i w_i ||v_θ(x_τ) − target_i||²` for the current policy.
pub fn policy_matching_loss(
    st: &TrainState,
    tape: &mut Tape,
    s: &Tensor,
    draw: &CfmDraw,
    target: &Tensor,
    weights: Option<&[f64]>,
) -> Result<(Var, crate::nets::MlpVars)> {
    let vars = st.policy.net().on_tape(tape, true);
    let loss = matching_loss(&st.policy, tape, &vars, &draw.x_tau, &draw.tau, s, target, weights)?;
    Ok((loss, vars))
}

fn apply_policy_grads(
    st: &mut TrainState,
    tape: &mut Tape,
    vars: &crate::nets::MlpVars,
    loss: Var,
    clip_norm: Option<f64>,
    name: &'static str,
) -> Result<(f64, f64)> {
    let value = check_loss(tape.value(loss).item(), st.step, name)?;
    let mut grads = vars.grads(&tape.backward(loss)?)?;
    let norm = global_norm(&grads);
    clip(&mut grads, clip_norm);
    st.policy_opt.step(st.policy.net_mut(), &grads, name)?;
    st.record(Update::Policy);
    Ok((value, norm))
}

/// Gradient step on the (optionally weighted) matching loss; returns `(loss, grad norm)`.
pub fn matching_update(
    st: &mut TrainState,
    s: &Tensor,
    draw: &CfmDraw,
    target: &Tensor,
    weights: Option<&[f64]>,
    clip_norm: Option<f64>,
) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let (loss, vars) = policy_matching_loss(st, &mut tape, s, draw, target, weights)?;
    apply_policy_grads(st, &mut tape, &vars, loss, clip_norm, "policy")
}

/// `−w_q · mean Q_φ(s, Ψ_{0→1}(x0))` through every Euler step plus
/// `w_bc · CFM` at the same draw.
pub fn fbrac_loss(
    st: &TrainState,
    tape: &mut Tape,
    s: &Tensor,
    draw: &CfmDraw,
    weights: (f64, f64),
) -> Result<(Var, crate::nets::MlpVars)> {
    let (wq, wbc) = weights;
    let (cfm, vars) = policy_matching_loss(st, tape, s, draw, &draw.u, None)?;
    let mut total = if wbc == 1.0 { cfm } else { tape.scale(cfm, wbc) };
    if wq != 0.0 {
        let x0 = tape.constant(draw.x0.clone());
        let a = st.policy.flow_map_tape(tape, &vars, x0, 0.0, s)?;
        let q = st.critic.q_tape(tape, s, a)?;
        let q = tape.mean(q);
        let q = tape.scale(q, -wq);
        total = tape.add(total, q)?;
    }
    Ok((total, vars))
}

/// `−mean V_ω(s, Ψ_{0→τ}(x0), τ)` through the partial rollout plus `α · CFM`.
pub fn ivm_bptt_loss(
    st: &TrainState,
    tape: &mut Tape,
    s: &Tensor,
    draw: &CfmDraw,
    weights: (f64, f64),
) -> Result<(Var, crate::nets::MlpVars)> {
    let (wv, wbc) = weights;
    let (cfm, vars) = policy_matching_loss(st, tape, s, draw, &draw.u, None)?;
    let mut total = if wbc == 1.0 { cfm } else { tape.scale(cfm, wbc) };
    if wv != 0.0 {
        let v = st.inter_value()?;
        let x0 = tape.constant(draw.x0.clone());
        let zeros = vec![0.0; draw.tau.len()];
        let x = st.policy.integrate_tape(tape, &vars, x0, &zeros, &draw.tau, s)?;
        let vv = v.on_tape(tape, false);
        let val = v.value_tape(tape, &vv, x, &draw.tau, s)?;
        let val = tape.mean(val);
        let val = tape.scale(val, -wv);
        total = tape.add(total, val)?;
    }
    Ok((total, vars))
}

/// Advantage weights `clip(exp(β (Q_φ̄(s, a) − mean_batch)), 0, 100)`.
pub fn fawac_weights(critic: &CriticEnsemble, s: &Tensor, a: &Tensor, beta: f64) -> Result<Vec<f64>> {
    let q = critic.q_value(s, a, true)?;
    let mean = q.iter().sum::<f64>() / q.len().max(1) as f64;
    Ok(q.iter()
        .map(|&qi| (beta * (qi - mean)).exp().clamp(0.0, 100.0))
        .collect())
}

/// `w_q · (−mean Q_φ(s, μ)) + w_d · mean ||μ − Ψ(x0)||²` on the one-step actor.
pub fn one_step_update(
    st: &mut TrainState,
    s: &Tensor,
    x0: &Tensor,
    weights: (f64, f64),
    clip_norm: Option<f64>,
) -> Result<(f64, f64)> {
    let (wq, wd) = weights;
    let target = st.policy.flow_map(x0, 0.0, s)?;
    let mu_net = st.one_step_net()?;
    let mut tape = Tape::new();
    let vars = mu_net.on_tape(&mut tape, true);
    let input = tape.constant(Tensor::concat_cols(&[x0, s])?);
    let mu = mu_net.forward_tape(&mut tape, &vars, input)?;
    let t = tape.constant(target);
    let d = tape.sub(mu, t)?;
    let sq = tape.square(d);
    let rows = tape.sum_rows(sq)?;
    let distill = tape.mean(rows);
    let mut total = if wd == 1.0 { distill } else { tape.scale(distill, wd) };
    if wq != 0.0 {
        let q = st.critic.q_tape(&mut tape, s, mu)?;
        let q = tape.mean(q);
        let q = tape.scale(q, -wq);
        total = tape.add(total, q)?;
    }
    let value = check_loss(tape.value(total).item(), st.step, "one_step")?;
    let mut grads = vars.grads(&tape.backward(total)?)?;
    let norm = global_norm(&grads);
    clip(&mut grads, clip_norm);
    let net = st.one_step.as_mut().expect("checked above");
    st.one_step_opt
        .as_mut()
        .expect("paired with one_step")
        .step(net, &grads, "one_step")?;
    st.record(Update::OneStep);
    Ok((value, norm))
}

pub fn target_update(st: &mut TrainState, eta: f64) -> Result<()> {
    st.critic.update_targets(eta)?;
    st.record(Update::Targets);
    Ok(())
}

/// Best of `n` flow samples per state under the online critic; ties go to
/// the first candidate.
pub fn rejection_policy(st: &TrainState, s: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::contract("rejection sampling needs at least one candidate"));
    }
    let d = st.policy.action_dim();
    let mut out = Vec::with_capacity(s.rows() * d);
    // bounded chunks keep the candidate matrix small; draws stay in order
    let chunk = (4096 / n).max(1);
    let mut start = 0;
    while start < s.rows() {
        let end = (start + chunk).min(s.rows());
        let idx: Vec<usize> = (start..end).flat_map(|i| std::iter::repeat_n(i, n)).collect();
        let s_rep = s.gather_rows(&idx);
        let cands = st.policy.sample_actions(&s_rep, rng)?;
        let q = st.critic.q_value(&s_rep, &cands, false)?;
        for i in 0..end - start {
            let mut best = i * n;
            for j in i * n + 1..(i + 1) * n {
                if q[j] > q[best] {
                    best = j;
                }
            }
            out.extend_from_slice(cands.row(best));
        }
        start = end;
    }
    Ok(Tensor::matrix(s.rows(), d, out))
}

fn finish(st: &mut TrainState, started: Instant, mut m: StepMetrics) -> StepMetrics {
    m.ms_per_step = started.elapsed().as_secs_f64() * 1e3;
    st.step += 1;
    m
}

/// Behavior-cloning step shared by every method: critic regression, the
/// intermediate value (if any), plain CFM on the flow, distillation of the
/// one-step actor (FQL only) and the Polyak update.
pub fn bc_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let loss_inter_value = if st.inter_value.is_some() {
        Some(inter_value_update(st, &batch.s, &draw)?)
    } else {
        None
    };
    let (loss_policy, grad_norm_policy) =
        matching_update(st, &batch.s, &draw, &draw.u, None, cfg.train.grad_clip)?;
    if st.one_step.is_some() {
        one_step_update(st, &batch.s, &draw.x0, (0.0, 1.0), cfg.train.grad_clip)?;
    }
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Q-Flow: critic, then `V_ω`, then gradient matching against the
/// post-update `V_ω`, then Polyak, all at one shared `(x0, x1, τ)` draw.
pub fn qflow_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let loss_iv = inter_value_update(st, &batch.s, &draw)?;
    let target = qflow_target(st, &batch.s, &draw, cfg.inv_lambda())?;
    let (loss_policy, grad_norm_policy) =
        matching_update(st, &batch.s, &draw, &target, None, cfg.train.grad_clip)?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: Some(loss_iv),
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Outer-critic guidance ablation: Q-Flow with `∇Q_φ(s, x_τ)` in place of `∇V_ω`.
pub fn outer_guidance_step(
    st: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    rngs: &mut Streams,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let target = outer_guidance_target(st, &batch.s, &draw, cfg.inv_lambda())?;
    let (loss_policy, grad_norm_policy) =
        matching_update(st, &batch.s, &draw, &target, None, cfg.train.grad_clip)?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: None,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Reparameterized objective backpropagated through the full Euler rollout.
pub fn fbrac_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let mut tape = Tape::new();
    let (loss, vars) = fbrac_loss(st, &mut tape, &batch.s, &draw, cfg.value_and_bc_weights())?;
    let (loss_policy, grad_norm_policy) =
        apply_policy_grads(st, &mut tape, &vars, loss, cfg.train.grad_clip, "policy")?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: None,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Intermediate value maximization through a partial rollout `0 → τ`.
pub fn ivm_bptt_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let loss_iv = inter_value_update(st, &batch.s, &draw)?;
    let mut tape = Tape::new();
    let (loss, vars) = ivm_bptt_loss(st, &mut tape, &batch.s, &draw, cfg.value_and_bc_weights())?;
    let (loss_policy, grad_norm_policy) =
        apply_policy_grads(st, &mut tape, &vars, loss, cfg.train.grad_clip, "policy")?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: Some(loss_iv),
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// FQL-style: the flow learns by CFM only; the one-step actor maximizes
/// `Q_φ` while being distilled toward the flow map.
pub fn fql_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    matching_update(st, &batch.s, &draw, &draw.u, None, cfg.train.grad_clip)?;
    let (loss_policy, grad_norm_policy) =
        one_step_update(st, &batch.s, &draw.x0, cfg.value_and_bc_weights(), cfg.train.grad_clip)?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: None,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Advantage-weighted CFM.
pub fn fawac_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let w = fawac_weights(&st.critic, &batch.s, &batch.a, cfg.train.beta)?;
    let (loss_policy, grad_norm_policy) =
        matching_update(st, &batch.s, &draw, &draw.u, Some(&w), cfg.train.grad_clip)?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: None,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// Rejection sampling keeps training the BC flow; selection happens at act time.
pub fn rejection_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    let started = Instant::now();
    let loss_critic = critic_update(st, batch, &mut rngs.next_actions)?;
    let draw = CfmDraw::sample(&batch.a, &mut rngs.draws)?;
    let (loss_policy, grad_norm_policy) =
        matching_update(st, &batch.s, &draw, &draw.u, None, cfg.train.grad_clip)?;
    target_update(st, cfg.train.eta)?;
    Ok(finish(
        st,
        started,
        StepMetrics {
            step: st.step,
            loss_critic,
            loss_inter_value: None,
            loss_policy,
            grad_norm_policy,
            ms_per_step: 0.0,
        },
    ))
}

/// RL-phase step for `st.method`.
pub fn rl_step(st: &mut TrainState, batch: &Batch, cfg: &TrainConfig, rngs: &mut Streams) -> Result<StepMetrics> {
    if st.method != cfg.method {
        return Err(Error::contract(format!(
            "state built for {} but config asks for {}",
            st.method, cfg.method
        )));
    }
    match cfg.method {
        Method::Qflow => qflow_step(st, batch, cfg, rngs),
        Method::Fbrac => fbrac_step(st, batch, cfg, rngs),
        Method::Fql => fql_step(st, batch, cfg, rngs),
        Method::Fawac => fawac_step(st, batch, cfg, rngs),
        Method::Rejection => rejection_step(st, batch, cfg, rngs),
        Method::IvmBptt => ivm_bptt_step(st, batch, cfg, rngs),
        Method::OuterGuidance => outer_guidance_step(st, batch, cfg, rngs),
    }
}
