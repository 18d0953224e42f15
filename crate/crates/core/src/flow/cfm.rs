use super::policy::FlowPolicy;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nets::MlpVars;
use crate::rng::{self, Rng};

/// Straight conditional path `ψ_τ(x0 | x1) = τ x1 + (1 − τ) x0` and its
/// velocity `x1 − x0`.
pub fn interp_path(x0: &[f64], x1: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    // written as x0 + τ(x1 − x0) so that degenerate paths and both endpoints are exact
    let point = x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| if tau == 1.0 { b } else { a + tau * (b - a) })
        .collect();
    let vel = x0.iter().zip(x1).map(|(&a, &b)| b - a).collect();
    (point, vel)
}

/// Row-wise [`interp_path`] for a batch with one τ per row.
pub fn interp_batch(x0: &Tensor, x1: &Tensor, taus: &[f64]) -> Result<(Tensor, Tensor)> {
    if x0.shape() != x1.shape() || taus.len() != x0.rows() {
        return Err(Error::Shape {
            op: "interp",
            lhs: x0.shape().to_vec(),
            rhs: x1.shape().to_vec(),
        });
    }
    let d = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    let mut u = Vec::with_capacity(x0.len());
    for (r, &tau) in taus.iter().enumerate() {
        let (p, v) = interp_path(x0.row(r), x1.row(r), tau);
        xt.extend(p);
        u.extend(v);
    }
    let n = taus.len();
    Ok((Tensor::matrix(n, d, xt), Tensor::matrix(n, d, u)))
}

/// One shared draw of noise and flow times for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmDraw {
    pub x0: Tensor,
    pub tau: Vec<f64>,
    pub x_tau: Tensor,
    /// Conditional target velocity `x1 − x0`.
    pub u: Tensor,
}

impl CfmDraw {
    /// `τ ~ U(0, 1)`, `x0 ~ N(0, I)`.
    pub fn sample(x1: &Tensor, rng: &mut Rng) -> Result<Self> {
        let x0 = rng::normal_matrix(rng, x1.rows(), x1.cols());
        let tau = rng::uniform_vec(rng, x1.rows());
        Self::from_parts(x0, x1, tau)
    }

    pub fn from_parts(x0: Tensor, x1: &Tensor, tau: Vec<f64>) -> Result<Self> {
        let (x_tau, u) = interp_batch(&x0, x1, &tau)?;
        Ok(Self { x0, tau, x_tau, u })
    }
}

/// `mean_i w_i ||v_θ(x_τ, τ, s)_i − target_i||²`, with unit weights when `weights` is `None`.
#[allow(clippy::too_many_arguments)]
pub fn matching_loss(
    policy: &FlowPolicy,
    tape: &mut Tape,
    vars: &MlpVars,
    x_tau: &Tensor,
    taus: &[f64],
    s: &Tensor,
    target: &Tensor,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let x = tape.constant(x_tau.clone());
    let v = policy.velocity_tape(tape, vars, x, taus, s)?;
    let t = tape.constant(target.clone());
    let diff = tape.sub(v, t)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_rows(sq)?;
    let per_row = match weights {
        Some(w) => {
            if w.len() != x_tau.rows() {
                return Err(Error::contract("one weight per row required"));
            }
            let wv = tape.constant(Tensor::matrix(w.len(), 1, w.to_vec()));
            tape.mul(per_row, wv)?
        }
        None => per_row,
    };
    Ok(tape.mean(per_row))
}

/// Conditional flow matching loss on a freshly drawn `(x0, τ)`.
pub fn cfm_loss(
    policy: &FlowPolicy,
    tape: &mut Tape,
    vars: &MlpVars,
    s: &Tensor,
    x1: &Tensor,
    rng: &mut Rng,
) -> Result<(Var, CfmDraw)> {
    if x1.rows() == 0 {
        return Err(Error::contract("CFM loss on an empty batch"));
    }
    let draw = CfmDraw::sample(x1, rng)?;
    let loss = matching_loss(policy, tape, vars, &draw.x_tau, &draw.tau, s, &draw.u, None)?;
    Ok((loss, draw))
}
