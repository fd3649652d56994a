//! Per-step constants of the conditional diffusion chain.
//!
//! Every array is indexed by the step `t` with `t = 0` holding the clean end of
//! the chain (`alpha_bar = 1`, `w = 0`, `delta = 0`), so the accessors take the
//! step directly and `t - 1` is always addressable for `t >= 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the interpolation weight `w[t]` is assigned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightRule {
    /// `w[t] = min(1, sqrt((1 - abar) / sqrt(abar)))`, with `w[T]` pinned to 1.
    Conditional,
    /// `w[t] = 0` everywhere: the plain Gaussian diffusion chain.
    Unconditional,
}

/// Interpolation weight for a cumulative signal level `alpha_bar`.
///
/// Returns `min(1, sqrt((1 - alpha_bar) / sqrt(alpha_bar)))`, or NaN when
/// `alpha_bar` is not a finite value in `(0, 1]`.
pub fn interpolation_weight(alpha_bar: f64) -> f64 {
    if !alpha_bar.is_finite() || alpha_bar <= 0.0 || alpha_bar > 1.0 {
        return f64::NAN;
    }
    ((1.0 - alpha_bar) / alpha_bar.sqrt()).sqrt().min(1.0)
}

/// One-step transition `x_t = k * x_{t-1} + c * y + N(0, s2)` consistent with
/// the marginals at `t - 1` and `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub k: f64,
    pub c: f64,
    pub s2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    w: Vec<f64>,
    delta: Vec<f64>,
    delta_tilde: Vec<f64>,
    beta_tilde: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` to `beta_max` over `steps` steps,
    /// with conditional interpolation weights.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::linear_with_rule(steps, beta_min, beta_max, WeightRule::Conditional)
    }

    pub fn linear_with_rule(steps: usize, beta_min: f64, beta_max: f64, rule: WeightRule) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !beta_min.is_finite() || !beta_max.is_finite() {
            return Err(Error::Schedule("beta range must be finite".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Schedule(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let last = (steps - 1) as f64;
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = i as f64 / last;
                beta_min * (1.0 - f) + beta_max * f
            })
            .collect();
        Self::from_betas(&betas, rule)
    }

    /// Builds a schedule from explicit betas (`betas[0]` is step 1).
    pub fn from_betas(betas: &[f64], rule: WeightRule) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Schedule("empty beta list".into()));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !b.is_finite() || b <= 0.0 || b >= 1.0 {
                return Err(Error::Schedule(format!("beta[{}] = {b} outside (0, 1)", i + 1)));
            }
        }
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        alpha.push(1.0);
        alpha_bar.push(1.0);
        let mut running = 1.0;
        for &b in betas {
            let a = 1.0 - b;
            running *= a;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(running);
        }
        let w = match rule {
            WeightRule::Unconditional => vec![0.0; steps + 1],
            WeightRule::Conditional => {
                let mut w: Vec<f64> = alpha_bar.iter().map(|&ab| interpolation_weight(ab)).collect();
                w[steps] = 1.0;
                w
            }
        };
        Self::from_parts(beta, alpha, alpha_bar, w)
    }

    /// Replaces the weights of an existing schedule and re-derives the
    /// dependent arrays. `weights[0]` is step 1.
    pub fn with_weights(&self, weights: &[f64]) -> Result<Self> {
        if weights.len() != self.steps() {
            return Err(Error::Schedule(format!(
                "{} weights for a {}-step schedule",
                weights.len(),
                self.steps()
            )));
        }
        let mut w = Vec::with_capacity(weights.len() + 1);
        w.push(0.0);
        w.extend_from_slice(weights);
        Self::from_parts(self.beta.clone(), self.alpha.clone(), self.alpha_bar.clone(), w)
    }

    fn from_parts(beta: Vec<f64>, alpha: Vec<f64>, alpha_bar: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let steps = beta.len() - 1;
        for t in 1..=steps {
            if !(alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(Error::Schedule(format!("alpha_bar not strictly decreasing at t={t}")));
            }
            if !(0.0..=1.0).contains(&w[t]) {
                return Err(Error::Schedule(format!("w[{t}] = {} outside [0, 1]", w[t])));
            }
            if w[t] < w[t - 1] {
                return Err(Error::Schedule(format!("w decreases at t={t}")));
            }
        }

        let mut delta = Vec::with_capacity(steps + 1);
        delta.push(0.0);
        for t in 1..=steps {
            let d = (1.0 - alpha_bar[t]) - w[t] * w[t] * alpha_bar[t];
            if !(d > 0.0) {
                return Err(Error::Schedule(format!(
                    "delta[{t}] = {d:e} is not positive (w = {}, alpha_bar = {})",
                    w[t], alpha_bar[t]
                )));
            }
            delta.push(d);
        }

        let mut beta_tilde = Vec::with_capacity(steps + 1);
        beta_tilde.push(0.0);
        beta_tilde.push(beta[1]);
        for t in 2..=steps {
            beta_tilde.push((1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t]);
        }

        let mut schedule = NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            w,
            delta,
            delta_tilde: Vec::new(),
            beta_tilde,
        };
        let mut delta_tilde = Vec::with_capacity(steps + 1);
        delta_tilde.push(0.0);
        for t in 1..=steps {
            let tr = schedule.transition(t);
            if tr.s2 < 0.0 {
                return Err(Error::Schedule(format!(
                    "transition variance at t={t} is negative ({:e})",
                    tr.s2
                )));
            }
            let dt = if t >= 2 && schedule.is_unconditional_step(t) {
                schedule.beta_tilde[t]
            } else {
                schedule.delta[t - 1] * tr.s2 / schedule.delta[t]
            };
            delta_tilde.push(dt);
        }
        schedule.delta_tilde = delta_tilde;
        Ok(schedule)
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn w(&self, t: usize) -> f64 {
        self.w[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn delta_tilde(&self, t: usize) -> f64 {
        self.delta_tilde[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        self.beta_tilde[t]
    }

    /// Betas for steps `1..=T`.
    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    /// Cumulative signal levels for steps `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// True when step `t` and its predecessor both carry zero weight, so the
    /// step is an ordinary Gaussian diffusion step.
    pub fn is_unconditional_step(&self, t: usize) -> bool {
        self.w[t] == 0.0 && self.w[t - 1] == 0.0
    }

    /// The one-step transition from `t - 1` to `t`, for `t >= 1`.
    ///
    /// The clean-signal coefficient `(1 - w) * sqrt(abar)` must scale by `k`
    /// between the two marginals. Once the weight has saturated at 1 the
    /// marginals carry no clean component and `k` falls back to `sqrt(alpha)`.
    pub fn transition(&self, t: usize) -> Transition {
        let w_prev = self.w[t - 1];
        let w_cur = self.w[t];
        let sqrt_alpha = self.alpha[t].sqrt();
        let k = if w_prev >= 1.0 {
            sqrt_alpha
        } else {
            (1.0 - w_cur) / (1.0 - w_prev) * sqrt_alpha
        };
        let c = w_cur * self.alpha_bar[t].sqrt() - k * w_prev * self.alpha_bar[t - 1].sqrt();
        let s2 = self.delta[t] - k * k * self.delta[t - 1];
        Transition { k, c, s2 }
    }

    /// Plain-text table, one row per step: every stored array, in full
    /// round-trip precision.
    pub fn to_table(&self) -> String {
        let mut out = String::from("t\tbeta\talpha\talpha_bar\tw\tdelta\tdelta_tilde\tbeta_tilde\n");
        for t in 1..=self.steps() {
            let _ = writeln!(
                out,
                "{t}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.beta[t],
                self.alpha[t],
                self.alpha_bar[t],
                self.w[t],
                self.delta[t],
                self.delta_tilde[t],
                self.beta_tilde[t]
            );
        }
        out
    }

    /// Parses a table written by [`NoiseSchedule::to_table`].
    pub fn from_table(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Schedule("empty table".into()))?;
        if !header.starts_with("t\tbeta") {
            return Err(Error::Schedule(format!("unexpected header `{header}`")));
        }
        let mut cols: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0]);
        cols[1][0] = 1.0; // alpha
        cols[2][0] = 1.0; // alpha_bar
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(Error::Schedule(format!("row {}: expected 8 columns", row + 1)));
            }
            let t: usize = fields[0]
                .parse()
                .map_err(|_| Error::Schedule(format!("row {}: bad step `{}`", row + 1, fields[0])))?;
            if t != row + 1 {
                return Err(Error::Schedule(format!("row {}: step {t} out of order", row + 1)));
            }
            for (col, field) in cols.iter_mut().zip(&fields[1..]) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Schedule(format!("row {}: bad number `{field}`", row + 1)))?;
                col.push(v);
            }
        }
        let [beta, alpha, alpha_bar, w, delta, delta_tilde, beta_tilde] = cols;
        if beta.len() < 2 {
            return Err(Error::Schedule("table has no rows".into()));
        }
        let rebuilt = Self::from_parts(beta, alpha, alpha_bar, w)?;
        if rebuilt.delta != delta || rebuilt.delta_tilde != delta_tilde || rebuilt.beta_tilde != beta_tilde {
            return Err(Error::Schedule("derived columns disagree with the stored ones".into()));
        }
        Ok(rebuilt)
    }
}
