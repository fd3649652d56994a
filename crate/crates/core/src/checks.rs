//! Independent oracles for the numerical core, grouped the way `selfcheck`
//! reports them.
//!
//! Each check recomputes its expectation from first principles (extended
//! precision products, closed-form marginals, finite differences, replays)
//! rather than calling back into the code under test for the answer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{forward_sample, reverse_rollout, reverse_step, target_noise, SamplingPlan};
use crate::error::{Error, Result};
use crate::metric::MetricSpec;
use crate::nets::params::snap;
use crate::nets::{DiffusionNet, DiffusionNetConfig, ParamSet, ValueNet, ValueNetConfig};
use crate::rl::{actor_loss, bellman_loss, elbo_objective, reward, StepInputs};
use crate::schedule::NoiseSchedule;
use crate::signals::{synth_corpus, CorpusParams, LatentState, SignalPair, Split};
use crate::trainer::{TrainConfig, Trainer};

/// Result of one property group.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub group: String,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(group: &str, cases: usize, failures: Vec<String>, ok_detail: String) -> Self {
        CheckOutcome {
            group: group.into(),
            cases,
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                ok_detail
            } else {
                failures.join("; ")
            },
        }
    }
}

fn gauss(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `(hi, lo)` double-double product of all `factors`.
pub fn dd_product(factors: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (mut hi, mut lo) = (1.0f64, 0.0f64);
    for f in factors {
        let p = hi * f;
        let e = hi.mul_add(f, -p) + lo * f;
        let s = p + e;
        lo = e - (s - p);
        hi = s;
    }
    (hi, lo)
}

/// Cumulative products against a double-double oracle, plus the structural
/// invariants of a conditional schedule.
pub fn schedule_check(steps: usize, beta_min: f64, beta_max: f64, tol: f64) -> Result<CheckOutcome> {
    let s = NoiseSchedule::linear(steps, beta_min, beta_max)?;
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for t in 1..=steps {
        // Betas recomputed from the endpoints, independently of the schedule.
        let (hi, lo) = dd_product((1..=t).map(|j| {
            let f = (j - 1) as f64 / (steps - 1) as f64;
            1.0 - (beta_min + (beta_max - beta_min) * f)
        }));
        let err = ((s.alpha_bar(t) - hi) - lo).abs();
        worst = worst.max(err);
        if err > tol {
            fails.push(format!("alpha_bar[{t}] off by {err:e}"));
        }
        if s.alpha_bar(t) >= s.alpha_bar(t - 1) {
            fails.push(format!("alpha_bar not decreasing at {t}"));
        }
        let w = s.w(t);
        if !(0.0..=1.0).contains(&w) || w < s.w(t - 1) {
            fails.push(format!("w[{t}] = {w} breaks monotone [0, 1]"));
        }
        let delta = (1.0 - s.alpha_bar(t)) - w * w * s.alpha_bar(t);
        if (s.delta(t) - delta).abs() > 1e-15 || s.delta(t) <= 0.0 {
            fails.push(format!("delta[{t}] = {}", s.delta(t)));
        }
        let dt = s.delta_tilde(t);
        if !(dt >= 0.0 && dt <= s.delta(t - 1) + 1e-15) {
            fails.push(format!("delta_tilde[{t}] = {dt} outside [0, delta[{}]]", t - 1));
        }
        if !(s.beta_tilde(t) >= 0.0 && s.beta_tilde(t) <= s.beta(t)) {
            fails.push(format!("beta_tilde[{t}] exceeds beta"));
        }
    }
    if s.w(steps) != 1.0 {
        fails.push(format!("w[T] = {}", s.w(steps)));
    }
    Ok(CheckOutcome::new(
        "schedule",
        steps,
        fails,
        format!("max |alpha_bar - oracle| = {worst:.1e}"),
    ))
}

/// With every weight zero, forward samples, targets and reverse steps must be
/// bit-identical to the plain Gaussian chain written out directly.
pub fn reduction_check(cases: usize, seed: u64) -> Result<CheckOutcome> {
    let base = NoiseSchedule::linear(50, 1e-4, 0.035)?;
    let s = base.with_weights(&vec![0.0; 50])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = Vec::new();
    for case in 0..cases {
        let n = rng.random_range(1..40);
        let t = rng.random_range(1..=50);
        let x0 = gauss(&mut rng, n);
        let y = gauss(&mut rng, n);
        let eps = gauss(&mut rng, n);
        let eps_hat = gauss(&mut rng, n);
        let z = gauss(&mut rng, n);
        let pair = SignalPair::new("case", x0.clone(), y.clone(), 16_000)?;
        let ab = s.alpha_bar(t);
        let xt: Vec<f64> = x0
            .iter()
            .zip(&eps)
            .map(|(a, e)| ab.sqrt() * a + (1.0 - ab).sqrt() * e)
            .collect();
        let got = forward_sample(&pair, t, &eps, &s)?;
        if !bit_eq(&got.x, &xt) {
            fails.push(format!("case {case}: forward sample at t={t}"));
        }
        if !bit_eq(&target_noise(&pair, &eps, t, &s)?, &eps) {
            fails.push(format!("case {case}: target at t={t}"));
        }
        let sigma = if t > 1 {
            ((1.0 - s.alpha_bar(t - 1)) / (1.0 - ab) * s.beta(t)).sqrt()
        } else {
            0.0
        };
        let expected: Vec<f64> = xt
            .iter()
            .zip(&eps_hat)
            .zip(&z)
            .map(|((x, e), z)| {
                let m = (x - s.beta(t) / (1.0 - ab).sqrt() * e) / s.alpha(t).sqrt();
                if t > 1 {
                    m + sigma * z
                } else {
                    m
                }
            })
            .collect();
        let state = LatentState::new(xt, t);
        let stepped = reverse_step(&state, &y, &eps_hat, Some(&z), &s)?;
        if !bit_eq(&stepped.x, &expected) {
            let diff = max_abs_diff(&stepped.x, &expected);
            fails.push(format!("case {case}: reverse step at t={t} differs by {diff:e}"));
        }
    }
    Ok(CheckOutcome::new("reduction", cases, fails, "bit-identical".into()))
}

fn bit_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Sample mean and variance of a reverse step fed the exact noise target,
/// compared with the closed-form marginal one step earlier.
pub fn marginal_check(steps_to_test: &[usize], draws: usize, seed: u64) -> Result<CheckOutcome> {
    let s = NoiseSchedule::linear(50, 1e-4, 0.035)?;
    let (x0, y) = (0.6, -0.35);
    let pair = SignalPair::new("mc", vec![x0], vec![y], 16_000)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = Vec::new();
    let mut details = Vec::new();
    for &t in steps_to_test {
        let (ab, w, delta) = (s.alpha_bar(t), s.w(t), s.delta(t));
        let c_res = w * ab.sqrt() / (1.0 - ab).sqrt() * (y - x0);
        let c_eps = delta.sqrt() / (1.0 - ab).sqrt();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..draws {
            let eps: f64 = rng.sample(StandardNormal);
            let z: f64 = rng.sample(StandardNormal);
            let x_t = forward_sample(&pair, t, &[eps], &s)?;
            let target = c_res + c_eps * eps;
            let prev = reverse_step(&x_t, &[y], &[target], Some(&[z]), &s)?.x[0];
            sum += prev;
            sum_sq += prev * prev;
        }
        let n = draws as f64;
        let m = sum / n;
        let var = (sum_sq - n * m * m) / (n - 1.0);
        let (abp, wp) = (s.alpha_bar(t - 1), s.w(t - 1));
        let mean_ref = (1.0 - wp) * abp.sqrt() * x0 + wp * abp.sqrt() * y;
        let var_ref = (1.0 - abp) - wp * wp * abp;
        let z_mean = (m - mean_ref) / (var_ref / n).sqrt();
        let z_var = (var - var_ref) / (var_ref * (2.0 / (n - 1.0)).sqrt());
        if z_mean.abs() > 4.0 || z_var.abs() > 4.0 {
            fails.push(format!("t={t}: mean z {z_mean:.2}, variance z {z_var:.2}"));
        }
        details.push(format!("t={t} z=({z_mean:.2},{z_var:.2})"));
    }
    Ok(CheckOutcome::new(
        "marginal",
        steps_to_test.len() * draws,
        fails,
        details.join(" "),
    ))
}

/// Fills every zero-initialised parameter with small noise so each block has
/// a live gradient.
pub fn randomize_zeros(p: &mut ParamSet, rng: &mut impl Rng, scale: f64) {
    for v in p.values.iter_mut().filter(|v| **v == 0.0) {
        *v = snap(rng.random_range(-scale..scale));
    }
}

/// Summary of one finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub path: &'static str,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
}

/// Central differences of `f` at `want` random coordinates of `params`
/// against `analytic`.
///
/// Along one coordinate every objective here is piecewise linear or
/// quadratic, so central differences are exact between kinks and `h` can be
/// large enough to keep rounding noise far below the tolerance. Coordinates
/// whose one-sided slopes disagree straddle a ReLU or absolute-value kink and
/// are skipped, as are coordinates with a negligible slope.
fn finite_difference(
    path: &'static str,
    params: &ParamSet,
    analytic: &[f64],
    want: usize,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&ParamSet) -> Result<f64>,
) -> Result<GradientCheck> {
    let h = 1e-4;
    let base = f(params)?;
    let mut p = params.clone();
    let mut out = GradientCheck {
        path,
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
    };
    let mut tries = 0;
    while out.checked < want {
        tries += 1;
        if tries > want * 50 {
            return Err(Error::Check(format!("{path}: too few smooth coordinates")));
        }
        let i = rng.random_range(0..p.len());
        let orig = p.values[i];
        p.values[i] = orig + h;
        let up = f(&p)?;
        p.values[i] = orig - h;
        let down = f(&p)?;
        p.values[i] = orig;
        let fwd = (up - base) / h;
        let bwd = (base - down) / h;
        let scale = fwd.abs().max(bwd.abs());
        if scale < 1e-6 {
            continue;
        }
        if (fwd - bwd).abs() > 1e-5 * scale {
            out.skipped_kinks += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs());
        out.max_rel_err = out.max_rel_err.max(rel);
        out.checked += 1;
    }
    Ok(out)
}

/// Finite-difference checks of the three differentiable paths: L1 into the
/// diffusion net, the critic term through `V`'s action input into the
/// diffusion net, and the Bellman error into the value net.
pub fn gradient_checks(coords: usize, seed: u64) -> Result<Vec<GradientCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::linear(50, 1e-4, 0.035)?;
    let d = DiffusionNet::new(DiffusionNetConfig::default());
    let v = ValueNet::new(ValueNetConfig::default());
    let mut theta_d = d.init(&mut rng);
    let mut theta_v = v.init(&mut rng);
    randomize_zeros(&mut theta_d, &mut rng, 0.2);
    randomize_zeros(&mut theta_v, &mut rng, 0.2);
    let len = 32;
    let pair = synth_corpus(seed, &CorpusParams::new(Split::Train, 1, len, &[5.0]))?.remove(0);
    let eps = gauss(&mut rng, len);
    let x_t = forward_sample(&pair, 17, &eps, &sched)?;
    let target = target_noise(&pair, &eps, 17, &sched)?;
    let s = StepInputs {
        x_t: &x_t,
        y: &pair.y,
        x0: &pair.x0,
        target: &target,
    };

    let elbo = elbo_objective(&d, &theta_d, s)?;
    let l1 = finite_difference("l1 -> diffusion", &theta_d, &elbo.grad, coords, &mut rng, |p| {
        Ok(elbo_objective(&d, p, s)?.l1)
    })?;

    let joint = actor_loss(&d, &theta_d, &v, &theta_v, s, 1.0)?;
    let l2_grad: Vec<f64> = joint.grad.iter().zip(&elbo.grad).map(|(a, b)| a - b).collect();
    let l2 = finite_difference(
        "l2 -> diffusion via critic",
        &theta_d,
        &l2_grad,
        coords,
        &mut rng,
        |p| Ok(actor_loss(&d, p, &v, &theta_v, s, 1.0)?.l2),
    )?;

    let bellman_target = 0.37;
    let crit = bellman_loss(&v, &theta_v, &x_t, &elbo.eps_hat, &pair.x0, bellman_target)?;
    let l3 = finite_difference("l3 -> value", &theta_v, &crit.grad, coords, &mut rng, |p| {
        Ok(bellman_loss(&v, p, &x_t, &elbo.eps_hat, &pair.x0, bellman_target)?.loss)
    })?;
    Ok(vec![l1, l2, l3])
}

pub fn gradient_check(coords: usize, tol: f64, seed: u64) -> Result<CheckOutcome> {
    let checks = gradient_checks(coords, seed)?;
    let fails = checks
        .iter()
        .filter(|c| !(c.max_rel_err <= tol))
        .map(|c| format!("{}: max relative error {:.2e}", c.path, c.max_rel_err))
        .collect();
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.path, c.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(CheckOutcome::new(
        "gradients",
        checks.iter().map(|c| c.checked).sum(),
        fails,
        detail,
    ))
}

/// Sum of per-step rewards over deterministic rollouts against the direct
/// end-to-end metric difference.
pub fn telescoping_check(rollouts: usize, tol: f64, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::linear(50, 1e-4, 0.035)?;
    let d = DiffusionNet::new(DiffusionNetConfig {
        channels: 8,
        blocks: 2,
        ..DiffusionNetConfig::default()
    });
    let plan = SamplingPlan::full(&sched);
    let corpus = synth_corpus(
        seed,
        &CorpusParams::new(Split::Test, rollouts, 64, &[2.5, 7.5, 12.5, 17.5]),
    )?;
    let metric = MetricSpec::si_snr();
    let mut fails = Vec::new();
    let mut worst: f64 = 0.0;
    for p in &corpus {
        let mut theta = d.init(&mut rng);
        randomize_zeros(&mut theta, &mut rng, 0.05);
        let r = reverse_rollout(&d, &theta, &p.y, &plan, None)?;
        let mut total = 0.0;
        for w in r.states.windows(2) {
            total += reward(&w[1], &w[0], &p.x0, &metric)?;
        }
        let direct = metric.evaluate(r.output(), &p.x0)? - metric.evaluate(&r.states[0].x, &p.x0)?;
        let err = (total - direct).abs();
        worst = worst.max(err);
        if err > tol {
            fails.push(format!("{}: {total} vs {direct}", p.id));
        }
    }
    Ok(CheckOutcome::new(
        "telescoping",
        rollouts,
        fails,
        format!("max error {worst:.1e}"),
    ))
}

fn tiny_config(n_total: usize, n_th: usize) -> TrainConfig {
    TrainConfig {
        n_total,
        n_th,
        batch: 2,
        seed: 17,
        channels: 8,
        blocks: 2,
        lr_d_phase1: 1e-3,
        lr_d_phase2: 5e-4,
        lr_v: 1e-3,
        ..TrainConfig::default()
    }
}

fn tiny_corpus() -> Result<Vec<SignalPair>> {
    synth_corpus(23, &CorpusParams::new(Split::Train, 8, 64, &[0.0, 5.0, 10.0, 15.0]))
}

/// The critic is untouched before the switch-over, and a zero critic weight
/// reproduces ELBO-only actor updates bit for bit.
pub fn phase_check(iterations: usize) -> Result<CheckOutcome> {
    let n_th = iterations / 2;
    let corpus = tiny_corpus()?;
    let mut fails = Vec::new();
    let mut t = Trainer::new(tiny_config(iterations, n_th), corpus.clone())?;
    let v0 = t.theta_v().fingerprint();
    while t.iter() < n_th {
        t.step()?;
        if t.theta_v().fingerprint() != v0 {
            fails.push(format!("critic changed at iteration {}", t.iter() - 1));
        }
    }
    t.run()?;
    if t.theta_v().fingerprint() == v0 {
        fails.push("critic never trained in the joint phase".into());
    }
    let zero = TrainConfig {
        alpha: 0.0,
        ..tiny_config(iterations, n_th)
    };
    let elbo = TrainConfig {
        elbo_only: true,
        ..zero.clone()
    };
    let mut a = Trainer::new(zero, corpus.clone())?;
    let mut b = Trainer::new(elbo, corpus)?;
    for i in 0..iterations {
        a.step()?;
        b.step()?;
        if a.theta_d().fingerprint() != b.theta_d().fingerprint() {
            fails.push(format!("alpha = 0 diverged from ELBO-only at iteration {i}"));
            break;
        }
    }
    Ok(CheckOutcome::new(
        "phases",
        iterations,
        fails,
        format!("{iterations} iterations, switch at {n_th}"),
    ))
}

/// Replays and an interrupted-then-resumed run all match bit for bit.
pub fn determinism_check(iterations: usize, scratch: &std::path::Path) -> Result<CheckOutcome> {
    let cfg = tiny_config(iterations, iterations / 2);
    let corpus = tiny_corpus()?;
    let snapshot = |t: &Trainer| {
        (
            t.telemetry().to_vec(),
            t.theta_d().fingerprint(),
            t.theta_v().fingerprint(),
        )
    };
    let mut a = Trainer::new(cfg.clone(), corpus.clone())?;
    a.run()?;
    let mut b = Trainer::new(cfg.clone(), corpus.clone())?;
    b.run()?;
    let mut fails = Vec::new();
    if snapshot(&a) != snapshot(&b) {
        fails.push("replay differs".into());
    }
    let mut c = Trainer::new(cfg.clone(), corpus.clone())?;
    c.run_to(iterations * 2 / 5)?;
    c.save(scratch)?;
    drop(c);
    let mut c = Trainer::resume(scratch, corpus, Some(&cfg))?;
    c.run()?;
    if snapshot(&a) != snapshot(&c) {
        fails.push("resumed run differs".into());
    }
    Ok(CheckOutcome::new(
        "determinism",
        3,
        fails,
        format!("{iterations} iterations"),
    ))
}

/// Every group with its default sizes. `scratch` receives checkpoint files.
pub fn run_all(scratch: &std::path::Path) -> Vec<CheckOutcome> {
    type Group<'a> = (&'static str, Box<dyn Fn() -> Result<CheckOutcome> + 'a>);
    let groups: Vec<Group> = vec![
        ("schedule", Box::new(|| schedule_check(50, 1e-4, 0.035, 1e-12))),
        ("reduction", Box::new(|| reduction_check(100, 1))),
        ("marginal", Box::new(|| marginal_check(&[2, 10, 25, 49], 100_000, 2))),
        ("gradients", Box::new(|| gradient_check(100, 1e-4, 3))),
        ("telescoping", Box::new(|| telescoping_check(100, 1e-9, 4))),
        ("phases", Box::new(|| phase_check(50))),
        ("determinism", Box::new(|| determinism_check(30, scratch))),
    ];
    groups
        .into_iter()
        .map(|(name, f)| {
            f().unwrap_or_else(|e| CheckOutcome {
                group: name.into(),
                cases: 0,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn double_double_beats_plain_product() {
        let factors: Vec<f64> = (0..1000).map(|i| 1.0 - 1e-3 * (1.0 + (i % 7) as f64)).collect();
        let (hi, lo) = dd_product(factors.iter().copied());
        let plain: f64 = factors.iter().product();
        assert!((plain - hi).abs() < 1e-13);
        assert!(lo.abs() < hi * 1e-15);
    }

    #[test]
    fn quick_groups_pass() {
        for c in [
            schedule_check(50, 1e-4, 0.035, 1e-12).unwrap(),
            reduction_check(20, 9).unwrap(),
            marginal_check(&[2, 25], 20_000, 5).unwrap(),
            telescoping_check(5, 1e-9, 6).unwrap(),
            gradient_check(20, 1e-4, 7).unwrap(),
        ] {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn wrong_variance_is_caught() {
        // Sampling from the prior variance instead of the posterior one
        // must blow the variance test.
        let s = NoiseSchedule::linear(50, 1e-4, 0.035).unwrap();
        let t = 25;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| s.delta(t).sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let var = samples.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let z = (var - s.delta(t - 1)) / (s.delta(t - 1) * (2.0 / n as f64).sqrt());
        assert!(z.abs() > 4.0, "{z}");
    }
}
