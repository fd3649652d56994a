//! Rewards, the actor objective, critic targets and the Bellman loss.
//!
//! The diffusion network is the actor: its noise prediction at step `t` is the
//! action. The value network is the critic, scoring `(x_t, eps, x0)` triples.

use crate::error::{ensure_same_len, Error, Result};
use crate::metric::MetricSpec;
use crate::nets::{DiffusionNet, ParamSet, Tape, Tensor, ValueNet};
use crate::signals::LatentState;

/// One reverse step viewed as an RL transition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x_t: LatentState,
    pub action: Vec<f64>,
    pub x_prev: LatentState,
    pub reward: f64,
}

impl Transition {
    pub fn new(x_t: LatentState, action: Vec<f64>, x_prev: LatentState, reward: f64) -> Result<Self> {
        if x_t.t == 0 || x_prev.t + 1 != x_t.t {
            return Err(Error::Data(format!("transition from step {} to {}", x_t.t, x_prev.t)));
        }
        ensure_same_len("transition action", x_t.x.len(), action.len())?;
        ensure_same_len("transition next state", x_t.x.len(), x_prev.x.len())?;
        if !reward.is_finite() {
            return Err(Error::Numeric(format!("reward {reward} at step {}", x_t.t)));
        }
        Ok(Transition {
            x_t,
            action,
            x_prev,
            reward,
        })
    }

    pub fn step(&self) -> usize {
        self.x_t.t
    }
}

/// `m(x_{t-1}, x0) - m(x_t, x0)`: positive when the step moved toward the
/// reference under the metric.
pub fn reward(x_prev: &LatentState, x_cur: &LatentState, x0: &[f64], metric: &MetricSpec) -> Result<f64> {
    if x_cur.t == 0 || x_prev.t + 1 != x_cur.t {
        return Err(Error::Data(format!("reward across steps {} -> {}", x_cur.t, x_prev.t)));
    }
    ensure_same_len("reward states", x_prev.x.len(), x_cur.x.len())?;
    Ok(metric.evaluate(&x_prev.x, x0)? - metric.evaluate(&x_cur.x, x0)?)
}

/// Values and `theta_d` gradient of `L = L1 + alpha * L2` for one element.
#[derive(Clone, Debug)]
pub struct ActorOutput {
    pub eps_hat: Vec<f64>,
    pub l1: f64,
    /// `-V(x_t, eps_hat, x0)`.
    pub l2: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Inputs shared by the actor and critic passes for one sampled step.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    pub x_t: &'a LatentState,
    pub y: &'a [f64],
    pub x0: &'a [f64],
    /// Regression target for the noise prediction.
    pub target: &'a [f64],
}

/// Plain ELBO objective: the L1 distance from `D`'s prediction to the target.
pub fn elbo_objective(d: &DiffusionNet, theta_d: &ParamSet, s: StepInputs<'_>) -> Result<ActorOutput> {
    actor_pass(d, theta_d, None, s, 0.0)
}

/// The joint actor objective. `V` is recorded with constant parameters, so
/// the critic term only reaches `theta_d` through `V`'s action input.
pub fn actor_loss(
    d: &DiffusionNet,
    theta_d: &ParamSet,
    v: &ValueNet,
    theta_v: &ParamSet,
    s: StepInputs<'_>,
    alpha: f64,
) -> Result<ActorOutput> {
    actor_pass(d, theta_d, Some((v, theta_v)), s, alpha)
}

fn actor_pass(
    d: &DiffusionNet,
    theta_d: &ParamSet,
    critic: Option<(&ValueNet, &ParamSet)>,
    s: StepInputs<'_>,
    alpha: f64,
) -> Result<ActorOutput> {
    let mut tape = Tape::new();
    let pd = theta_d.load(&mut tape, true);
    let x = tape.constant(Tensor::row(s.x_t.x.clone()));
    let y = tape.constant(Tensor::row(s.y.to_vec()));
    let eps = d.forward(&mut tape, &pd, x, y, s.x_t.t as f64)?;
    let l1 = tape.l1_mean(eps, s.target)?;
    let (root, l2) = match critic {
        Some((v, theta_v)) => {
            let pv = theta_v.load(&mut tape, false);
            let x0 = tape.constant(Tensor::row(s.x0.to_vec()));
            let score = v.forward(&mut tape, &pv, x, eps, x0, s.x_t.t as f64)?;
            let l2 = tape.scale(score, -1.0);
            let weighted = tape.scale(l2, alpha);
            (tape.add(l1, weighted)?, Some(l2))
        }
        None => (l1, None),
    };
    let grads = tape.backward(root);
    Ok(ActorOutput {
        eps_hat: tape.value(eps).data.clone(),
        l1: tape.scalar(l1),
        l2: l2.map_or(0.0, |v| tape.scalar(v)),
        loss: tape.scalar(root),
        grad: theta_d.flat_gradient(&grads, &pd),
    })
}

/// Bootstrapped target `r + gamma * V(x_{t-1}, D(x_{t-1}, y, t-1), x0)`.
///
/// There is no action at step 0, so the bootstrap is dropped there.
#[allow(clippy::too_many_arguments)]
pub fn critic_target(
    reward: f64,
    gamma: f64,
    v: &ValueNet,
    theta_v: &ParamSet,
    d: &DiffusionNet,
    theta_d: &ParamSet,
    x_prev: &LatentState,
    y: &[f64],
    x0: &[f64],
) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::Config(format!("discount {gamma} outside [0, 1)")));
    }
    if x_prev.t == 0 || gamma == 0.0 {
        return Ok(reward);
    }
    let t = x_prev.t as f64;
    let action = d.predict(theta_d, &x_prev.x, y, t)?;
    Ok(reward + gamma * v.score(theta_v, &x_prev.x, &action, x0, t)?)
}

#[derive(Clone, Debug)]
pub struct CriticOutput {
    pub value: f64,
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// `L3 = (target - V(x_t, eps_t, x0))^2` with the gradient into `theta_v` only.
pub fn bellman_loss(
    v: &ValueNet,
    theta_v: &ParamSet,
    x_t: &LatentState,
    eps_t: &[f64],
    x0: &[f64],
    target: f64,
) -> Result<CriticOutput> {
    let mut tape = Tape::new();
    let pv = theta_v.load(&mut tape, true);
    let x = tape.constant(Tensor::row(x_t.x.clone()));
    let e = tape.constant(Tensor::row(eps_t.to_vec()));
    let r = tape.constant(Tensor::row(x0.to_vec()));
    let value = v.forward(&mut tape, &pv, x, e, r, x_t.t as f64)?;
    let loss = tape.squared_error(value, target);
    let grads = tape.backward(loss);
    Ok(CriticOutput {
        value: tape.scalar(value),
        loss: tape.scalar(loss),
        grad: theta_v.flat_gradient(&grads, &pv),
    })
}
