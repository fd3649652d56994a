//! Forward sampling, noise targets, reverse steps and fast sampling for the
//! conditional diffusion chain.
//!
//! The marginal at step `t` is
//! `x_t = (1 - w_t) sqrt(abar_t) x0 + w_t sqrt(abar_t) y + sqrt(delta_t) eps`.
//! Because `(1 - w) x0 + w y = x0 + w (y - x0)`, the combined noise target
//! `C_t` satisfies `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) C_t`, which is the
//! identity used to eliminate `x0` from the reverse mean.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_same_len, Error, Result};
use crate::nets::{DiffusionNet, ParamSet};
use crate::schedule::{NoiseSchedule, WeightRule};
use crate::signals::{LatentState, SignalPair};

/// Coefficients of one reverse step:
/// `x_{t-1} = c_xt x_t + c_yt y - c_eps eps_hat + sqrt(variance) z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoefficients {
    pub c_xt: f64,
    pub c_yt: f64,
    pub c_eps: f64,
    pub variance: f64,
}

fn check_step(t: usize, sched: &NoiseSchedule) -> Result<()> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Data(format!("step {t} outside 1..={}", sched.steps())));
    }
    Ok(())
}

/// Draws `x_t` from the conditional marginal given standard normal `eps`.
pub fn forward_sample(pair: &SignalPair, t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<LatentState> {
    check_step(t, sched)?;
    ensure_same_len("forward_sample", pair.x0.len(), pair.y.len())?;
    ensure_same_len("forward_sample noise", pair.x0.len(), eps.len())?;
    let sqrt_ab = sched.alpha_bar(t).sqrt();
    let w = sched.w(t);
    let a = (1.0 - w) * sqrt_ab;
    let b = w * sqrt_ab;
    let s = sched.delta(t).sqrt();
    let mut x: Vec<f64> = pair.x0.iter().zip(eps).map(|(x0, e)| a * x0 + s * e).collect();
    if b != 0.0 {
        x.iter_mut().zip(&pair.y).for_each(|(v, y)| *v += b * y);
    }
    Ok(LatentState::new(x, t))
}

/// Marginal of the plain Gaussian chain: `sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn forward_sample_unconditional(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_step(t, sched)?;
    ensure_same_len("forward_sample_unconditional", x0.len(), eps.len())?;
    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// Combined noise target
/// `C_t = w sqrt(abar) / sqrt(1 - abar) (y - x0) + sqrt(delta) / sqrt(1 - abar) eps`.
pub fn target_noise(pair: &SignalPair, eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_step(t, sched)?;
    ensure_same_len("target_noise", pair.x0.len(), eps.len())?;
    ensure_same_len("target_noise", pair.x0.len(), pair.y.len())?;
    let ab = sched.alpha_bar(t);
    let denom = (1.0 - ab).sqrt();
    let c_res = sched.w(t) * ab.sqrt() / denom;
    let c_eps = sched.delta(t).sqrt() / denom;
    let mut c: Vec<f64> = eps.iter().map(|e| c_eps * e).collect();
    if c_res != 0.0 {
        for ((v, y), x0) in c.iter_mut().zip(&pair.y).zip(&pair.x0) {
            *v += c_res * (y - x0);
        }
    }
    Ok(c)
}

/// The target consistent with a given state: `(x_t - sqrt(abar) x0) / sqrt(1 - abar)`.
pub fn implied_target(x_t: &[f64], x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_step(t, sched)?;
    ensure_same_len("implied_target", x_t.len(), x0.len())?;
    let a = sched.alpha_bar(t).sqrt();
    let s = (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(x_t.iter().zip(x0).map(|(x, r)| (x - a * r) / s).collect())
}

/// Length-normalised L1 distance between predicted and target noise.
pub fn elbo_loss(eps_hat: &[f64], target: &[f64]) -> Result<f64> {
    ensure_same_len("elbo_loss", eps_hat.len(), target.len())?;
    if eps_hat.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = eps_hat.iter().zip(target).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / eps_hat.len() as f64)
}

/// Subgradient of [`elbo_loss`] with respect to `eps_hat`.
pub fn elbo_loss_grad(eps_hat: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    ensure_same_len("elbo_loss_grad", eps_hat.len(), target.len())?;
    let n = eps_hat.len() as f64;
    Ok(eps_hat
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect())
}

/// Reverse-step coefficients. Unconditional steps use the closed forms of the
/// plain chain; all others come from [`conjugate_coefficients`].
pub fn reverse_coefficients(t: usize, sched: &NoiseSchedule) -> Result<ReverseCoefficients> {
    check_step(t, sched)?;
    if sched.is_unconditional_step(t) {
        let sqrt_alpha = sched.alpha(t).sqrt();
        return Ok(ReverseCoefficients {
            c_xt: 1.0 / sqrt_alpha,
            c_yt: 0.0,
            c_eps: sched.beta(t) / (sqrt_alpha * (1.0 - sched.alpha_bar(t)).sqrt()),
            variance: sched.delta_tilde(t),
        });
    }
    conjugate_coefficients(t, sched)
}

/// Posterior `q(x_{t-1} | x_t, x0, y)` expressed in the `(x_t, y, eps_hat)` basis.
///
/// With the transition `x_t = k x_{t-1} + c y + N(0, s2)` and the prior
/// `x_{t-1} ~ N(a' x0 + b' y, delta_{t-1})`, the posterior mean is
/// `(s2 / delta_t)(a' x0 + b' y) + (k delta_{t-1} / delta_t)(x_t - c y)` with
/// variance `delta_{t-1} s2 / delta_t`. Substituting
/// `x0 = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)` gives the three
/// coefficients.
pub fn conjugate_coefficients(t: usize, sched: &NoiseSchedule) -> Result<ReverseCoefficients> {
    check_step(t, sched)?;
    let delta = sched.delta(t);
    if !(delta > 0.0) {
        return Err(Error::Numeric(format!("degenerate delta at t={t}")));
    }
    let delta_prev = sched.delta(t - 1);
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let w_prev = sched.w(t - 1);
    let a_prev = (1.0 - w_prev) * ab_prev.sqrt();
    let b_prev = w_prev * ab_prev.sqrt();
    let tr = sched.transition(t);
    let keep = tr.s2 / delta;
    let carry = tr.k * delta_prev / delta;
    Ok(ReverseCoefficients {
        c_xt: keep * a_prev / ab.sqrt() + carry,
        c_yt: keep * b_prev - carry * tr.c,
        c_eps: keep * a_prev * (1.0 - ab).sqrt() / ab.sqrt(),
        variance: delta_prev * tr.s2 / delta,
    })
}

/// One reverse step from `state.t` to `state.t - 1`. `z` is ignored at `t = 1`.
pub fn reverse_step(
    state: &LatentState,
    y: &[f64],
    eps_hat: &[f64],
    z: Option<&[f64]>,
    sched: &NoiseSchedule,
) -> Result<LatentState> {
    let t = state.t;
    check_step(t, sched)?;
    let n = state.x.len();
    ensure_same_len("reverse_step condition", n, y.len())?;
    ensure_same_len("reverse_step noise estimate", n, eps_hat.len())?;
    let z = if t == 1 { None } else { z };
    if let Some(z) = z {
        ensure_same_len("reverse_step z", n, z.len())?;
    }
    let mut x = if sched.is_unconditional_step(t) {
        unconditional_mean(&state.x, eps_hat, t, sched)
    } else {
        let c = conjugate_coefficients(t, sched)?;
        state
            .x
            .iter()
            .zip(y)
            .zip(eps_hat)
            .map(|((x, y), e)| c.c_xt * x + c.c_yt * y - c.c_eps * e)
            .collect()
    };
    if let Some(z) = z {
        let sigma = sched.delta_tilde(t).sqrt();
        x.iter_mut().zip(z).for_each(|(v, z)| *v += sigma * z);
    }
    Ok(LatentState::new(x, t - 1))
}

/// Mean of the plain reverse step `(x_t - beta / sqrt(1 - abar) eps) / sqrt(alpha)`.
fn unconditional_mean(x_t: &[f64], eps_hat: &[f64], t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let k = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let sqrt_alpha = sched.alpha(t).sqrt();
    x_t.iter().zip(eps_hat).map(|(x, e)| (x - k * e) / sqrt_alpha).collect()
}

/// Reverse step of the plain Gaussian chain with variance `beta_tilde`.
pub fn reverse_step_unconditional(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    z: Option<&[f64]>,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_step(t, sched)?;
    ensure_same_len("reverse_step_unconditional", x_t.len(), eps_hat.len())?;
    let mut x = unconditional_mean(x_t, eps_hat, t, sched);
    if let (Some(z), true) = (z, t > 1) {
        ensure_same_len("reverse_step_unconditional z", x_t.len(), z.len())?;
        let sigma = sched.beta_tilde(t).sqrt();
        x.iter_mut().zip(z).for_each(|(v, z)| *v += sigma * z);
    }
    Ok(x)
}

/// The inference chain used by a sampler: its own schedule plus the
/// (possibly fractional) training step fed to the network at each level.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub schedule: NoiseSchedule,
    /// `net_steps[s - 1]` is the network step for inference level `s`.
    pub net_steps: Vec<f64>,
}

/// Inference betas commonly used for six-step sampling of a 50-step chain.
pub const DEFAULT_FAST_BETAS: [f64; 6] = [1e-4, 1e-3, 0.01, 0.05, 0.2, 0.35];

impl SamplingPlan {
    /// Every training step, in order.
    pub fn full(train: &NoiseSchedule) -> Self {
        SamplingPlan {
            schedule: train.clone(),
            net_steps: (1..=train.steps()).map(|t| t as f64).collect(),
        }
    }

    /// Aligns each inference level to a fractional training step by matching
    /// `sqrt(abar)` between neighbouring training steps.
    pub fn fast(infer_betas: &[f64], train: &NoiseSchedule) -> Result<Self> {
        if infer_betas.len() > train.steps() {
            return Err(Error::Config(format!(
                "{} inference steps exceed {} training steps",
                infer_betas.len(),
                train.steps()
            )));
        }
        let schedule = NoiseSchedule::from_betas(infer_betas, WeightRule::Conditional)?;
        let steps = train.steps();
        let mut net_steps = Vec::with_capacity(infer_betas.len());
        for s in 1..=schedule.steps() {
            let target = schedule.alpha_bar(s);
            let found = (1..steps).find(|&t| train.alpha_bar(t + 1) <= target && target <= train.alpha_bar(t));
            let Some(t) = found else {
                return Err(Error::Config(format!(
                    "inference level {s} (alpha_bar {target}) lies outside the training range [{}, {}]",
                    train.alpha_bar(steps),
                    train.alpha_bar(1)
                )));
            };
            let hi = train.alpha_bar(t).sqrt();
            let lo = train.alpha_bar(t + 1).sqrt();
            net_steps.push(t as f64 + (hi - target.sqrt()) / (hi - lo));
        }
        Ok(SamplingPlan { schedule, net_steps })
    }

    pub fn steps(&self) -> usize {
        self.net_steps.len()
    }
}

/// States `x_S, ..., x_0` of one reverse run and the noise predicted at each
/// level (`eps_hats[i]` was used to leave `states[i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<LatentState>,
    pub eps_hats: Vec<Vec<f64>>,
}

impl Rollout {
    pub fn output(&self) -> &[f64] {
        &self.states.last().expect("rollout has states").x
    }

    /// Writes every state as consecutive little-endian `f32` samples.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .states
            .iter()
            .flat_map(|s| s.x.iter().flat_map(|v| (*v as f32).to_le_bytes()))
            .collect();
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Runs the reverse chain of `plan` from its last level down to 0.
///
/// With `rng = None` the run is deterministic: it starts at the marginal mean
/// `sqrt(abar_S) y` and adds no noise. Otherwise the start and each step
/// (except the last) draw standard normal noise from `rng`.
pub fn reverse_rollout(
    net: &DiffusionNet,
    params: &ParamSet,
    y: &[f64],
    plan: &SamplingPlan,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<Rollout> {
    let sched = &plan.schedule;
    let top = plan.steps();
    if top == 0 {
        return Err(Error::Config("empty sampling plan".into()));
    }
    let mean = sched.alpha_bar(top).sqrt();
    let mut x: Vec<f64> = y.iter().map(|v| mean * v).collect();
    if let Some(rng) = rng.as_deref_mut() {
        let sd = sched.delta(top).sqrt();
        x.iter_mut()
            .for_each(|v| *v += sd * rng.sample::<f64, _>(StandardNormal));
    }
    let mut state = LatentState::new(x, top);
    let mut states = Vec::with_capacity(top + 1);
    let mut eps_hats = Vec::with_capacity(top);
    while state.t > 0 {
        let eps_hat = net.predict(params, &state.x, y, plan.net_steps[state.t - 1])?;
        let z: Option<Vec<f64>> = match rng.as_deref_mut() {
            Some(rng) if state.t > 1 => Some((0..y.len()).map(|_| rng.sample(StandardNormal)).collect()),
            _ => None,
        };
        let next = reverse_step(&state, y, &eps_hat, z.as_deref(), sched)?;
        states.push(std::mem::replace(&mut state, next));
        eps_hats.push(eps_hat);
    }
    states.push(state);
    if states.last().is_some_and(|s| s.x.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("reverse process produced non-finite samples".into()));
    }
    Ok(Rollout { states, eps_hats })
}

/// Enhances `y` with the sampler described by `plan`.
pub fn fast_sample(
    net: &DiffusionNet,
    params: &ParamSet,
    y: &[f64],
    plan: &SamplingPlan,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<f64>> {
    Ok(reverse_rollout(net, params, y, plan, rng)?
        .states
        .pop()
        .expect("final state")
        .x)
}
