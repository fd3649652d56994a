//! The two-phase training loop and the experiments built on trained models.
//!
//! Iterations `0..n_th` regress `D` on L1 only. From `n_th` on, each
//! iteration updates `D` on `L1 + alpha * L2` with `V` frozen, then takes a
//! deterministic reverse step with the pre-update prediction, rewards it, and
//! updates `V` on the Bellman error.
//!
//! Iteration `i` draws everything random from its own ChaCha stream of the
//! configured seed, so a run is a pure function of seed, config, corpus and
//! iteration index, and resuming needs no saved RNG state.

mod checkpoint;
mod config;
mod eval;

pub use checkpoint::{corpus_hash, CheckpointManifest, CHECKPOINT_FORMAT, MANIFEST_FILE};
pub use config::TrainConfig;
pub use eval::{
    evaluate, mismatch_experiment, write_csv, MismatchReport, MismatchRow, Model, Report, ReportRow, Sampler, System,
    UtteranceScore, UNPROCESSED,
};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, reverse_step, target_noise};
use crate::error::{Error, Result};
use crate::metric::MetricSpec;
use crate::nets::{Adam, DiffusionNet, ParamSet, ValueNet};
use crate::rl::{actor_loss, bellman_loss, critic_target, elbo_objective, reward, ActorOutput, StepInputs};
use crate::schedule::NoiseSchedule;
use crate::signals::{LatentState, SignalPair};

/// One telemetry line per iteration. Critic columns are empty while the
/// critic is idle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub iter: usize,
    pub phase: u8,
    pub l1: f64,
    pub l2: Option<f64>,
    pub l3: Option<f64>,
    pub reward_mean: Option<f64>,
    pub target_mean: Option<f64>,
}

pub const TELEMETRY_HEADER: [&str; 7] = ["iter", "phase", "l1", "l2", "l3", "reward_mean", "target_mean"];

/// Divergence guard: the mean L1 of the first `window` iterations becomes the
/// baseline, and any later batch L1 above `factor` times it aborts the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Guard {
    pub factor: f64,
    pub window: usize,
    pub sum: f64,
    pub count: usize,
    pub baseline: Option<f64>,
}

impl Guard {
    pub fn new(factor: f64, window: usize) -> Self {
        Guard {
            factor,
            window,
            sum: 0.0,
            count: 0,
            baseline: None,
        }
    }

    pub fn observe(&mut self, iter: usize, l1: f64) -> Result<()> {
        if !l1.is_finite() {
            return Err(Error::Diverged {
                iter,
                loss: l1,
                limit: self.baseline.map_or(f64::INFINITY, |b| b * self.factor),
            });
        }
        match self.baseline {
            Some(b) if l1 > self.factor * b => Err(Error::Diverged {
                iter,
                loss: l1,
                limit: self.factor * b,
            }),
            Some(_) => Ok(()),
            None => {
                self.sum += l1;
                self.count += 1;
                if self.count == self.window {
                    self.baseline = Some(self.sum / self.count as f64);
                }
                Ok(())
            }
        }
    }
}

/// A sampled training step for one batch element.
struct Draw {
    utterance: usize,
    t: usize,
    eps: Vec<f64>,
}

struct Element<'a> {
    pair: &'a SignalPair,
    x_t: LatentState,
    target: Vec<f64>,
}

impl Element<'_> {
    fn inputs(&self) -> StepInputs<'_> {
        StepInputs {
            x_t: &self.x_t,
            y: &self.pair.y,
            x0: &self.pair.x0,
            target: &self.target,
        }
    }
}

struct CriticStats {
    l3: f64,
    reward: f64,
    target: f64,
}

pub struct Trainer {
    cfg: TrainConfig,
    sched: NoiseSchedule,
    metric: MetricSpec,
    d: DiffusionNet,
    v: ValueNet,
    corpus: Arc<[SignalPair]>,
    iter: usize,
    theta_d: ParamSet,
    theta_v: ParamSet,
    opt_d: Adam,
    opt_v: Adam,
    guard: Guard,
    telemetry: Vec<TelemetryRow>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpus: Vec<SignalPair>) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        for p in &corpus {
            p.validate()?;
        }
        let d = DiffusionNet::new(cfg.diffusion_net());
        let v = ValueNet::new(cfg.value_net());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let theta_d = d.init(&mut rng);
        let theta_v = v.init(&mut rng);
        Ok(Trainer {
            sched: cfg.schedule()?,
            metric: cfg.metric_spec()?,
            opt_d: Adam::new(theta_d.len()),
            opt_v: Adam::new(theta_v.len()),
            guard: Guard::new(cfg.guard_factor, cfg.guard_window),
            telemetry: Vec::new(),
            iter: 0,
            cfg,
            d,
            v,
            corpus: corpus.into(),
            theta_d,
            theta_v,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.n_total
    }

    pub fn diffusion_net(&self) -> &DiffusionNet {
        &self.d
    }

    pub fn value_net(&self) -> &ValueNet {
        &self.v
    }

    pub fn theta_d(&self) -> &ParamSet {
        &self.theta_d
    }

    pub fn theta_v(&self) -> &ParamSet {
        &self.theta_v
    }

    pub fn telemetry(&self) -> &[TelemetryRow] {
        &self.telemetry
    }

    pub fn guard(&self) -> &Guard {
        &self.guard
    }

    pub fn corpus(&self) -> &[SignalPair] {
        &self.corpus
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_to(self.cfg.n_total)
    }

    /// Runs until `iter` iterations are complete (capped at `n_total`).
    pub fn run_to(&mut self, iter: usize) -> Result<()> {
        while self.iter < iter.min(self.cfg.n_total) {
            self.step()?;
        }
        Ok(())
    }

    /// The actions the critic is trained on: the actor's predictions, plus
    /// Gaussian exploration noise when `explore_std > 0`. Exploration uses its
    /// own stream so the actor's draws are the same either way.
    fn explore(&self, iter: usize, eps: &[&[f64]]) -> Vec<Vec<f64>> {
        let sd = self.cfg.explore_std;
        if sd == 0.0 {
            return eps.iter().map(|e| e.to_vec()).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream((1 << 40) + iter as u64);
        eps.iter()
            .map(|e| {
                e.iter()
                    .map(|v| v + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    fn draws(&self, iter: usize) -> Vec<Draw> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(iter as u64 + 1);
        (0..self.cfg.batch)
            .map(|_| {
                let utterance = rng.random_range(0..self.corpus.len());
                let t = rng.random_range(1..=self.sched.steps());
                let eps = (0..self.corpus[utterance].len())
                    .map(|_| rng.sample(StandardNormal))
                    .collect();
                Draw { utterance, t, eps }
            })
            .collect()
    }

    /// Runs one iteration and returns its telemetry.
    pub fn step(&mut self) -> Result<TelemetryRow> {
        let i = self.iter;
        if self.is_done() {
            return Err(Error::Config(format!(
                "run already finished {} iterations",
                self.cfg.n_total
            )));
        }
        let draws = self.draws(i);
        let corpus = Arc::clone(&self.corpus);
        let elems: Vec<Element> = draws
            .into_par_iter()
            .map(|dr| {
                let pair = &corpus[dr.utterance];
                Ok(Element {
                    pair,
                    x_t: forward_sample(pair, dr.t, &dr.eps, &self.sched)?,
                    target: target_noise(pair, &dr.eps, dr.t, &self.sched)?,
                })
            })
            .collect::<Result<_>>()?;
        let phase = self.cfg.phase(i);
        let row = if phase == 1 || self.cfg.elbo_only {
            let lr = if phase == 1 {
                self.cfg.lr_d_phase1
            } else {
                self.cfg.lr_d_phase2
            };
            let out = self.actor_pass(&elems, false)?;
            let l1 = mean_of(&out, |o| o.l1);
            self.guard.observe(i, l1)?;
            self.apply_actor(&out, lr)?;
            TelemetryRow {
                iter: i,
                phase,
                l1,
                l2: None,
                l3: None,
                reward_mean: None,
                target_mean: None,
            }
        } else if self.cfg.d_before_v {
            let out = self.actor_pass(&elems, true)?;
            let l1 = mean_of(&out, |o| o.l1);
            self.guard.observe(i, l1)?;
            self.apply_actor(&out, self.cfg.lr_d_phase2)?;
            let eps: Vec<&[f64]> = out.iter().map(|o| o.eps_hat.as_slice()).collect();
            let critic = self.critic_pass(&elems, &eps)?;
            self.joint_row(i, l1, mean_of(&out, |o| o.l2), critic)
        } else {
            let eps: Vec<Vec<f64>> = elems
                .par_iter()
                .map(|e| self.d.predict(&self.theta_d, &e.x_t.x, &e.pair.y, e.x_t.t as f64))
                .collect::<Result<_>>()?;
            let eps_refs: Vec<&[f64]> = eps.iter().map(Vec::as_slice).collect();
            let critic = self.critic_pass(&elems, &eps_refs)?;
            let out = self.actor_pass(&elems, true)?;
            let l1 = mean_of(&out, |o| o.l1);
            self.guard.observe(i, l1)?;
            self.apply_actor(&out, self.cfg.lr_d_phase2)?;
            self.joint_row(i, l1, mean_of(&out, |o| o.l2), critic)
        };
        self.iter += 1;
        self.telemetry.push(row.clone());
        Ok(row)
    }

    fn joint_row(&self, iter: usize, l1: f64, l2: f64, c: CriticStats) -> TelemetryRow {
        TelemetryRow {
            iter,
            phase: 2,
            l1,
            l2: Some(l2),
            l3: Some(c.l3),
            reward_mean: Some(c.reward),
            target_mean: Some(c.target),
        }
    }

    fn actor_pass(&self, elems: &[Element], with_critic: bool) -> Result<Vec<ActorOutput>> {
        elems
            .par_iter()
            .map(|e| {
                if with_critic {
                    actor_loss(
                        &self.d,
                        &self.theta_d,
                        &self.v,
                        &self.theta_v,
                        e.inputs(),
                        self.cfg.alpha,
                    )
                } else {
                    elbo_objective(&self.d, &self.theta_d, e.inputs())
                }
            })
            .collect()
    }

    fn apply_actor(&mut self, out: &[ActorOutput], lr: f64) -> Result<()> {
        let scale = 1.0 / out.len() as f64;
        for o in out {
            self.theta_d.add_grad(&o.grad, scale);
        }
        self.opt_d.step(&mut self.theta_d, lr)
    }

    /// Rewards the mean reverse step taken with `eps`, bootstraps through the
    /// current `D` and `V`, and updates `V`.
    fn critic_pass(&mut self, elems: &[Element], eps: &[&[f64]]) -> Result<CriticStats> {
        let actions = self.explore(self.iter, eps);
        let results: Vec<(f64, f64, crate::rl::CriticOutput)> = elems
            .par_iter()
            .zip(actions.par_iter())
            .map(|(e, eps)| {
                let next = reverse_step(&e.x_t, &e.pair.y, eps, None, &self.sched)?;
                let r = reward(&next, &e.x_t, &e.pair.x0, &self.metric)?;
                let target = critic_target(
                    r,
                    self.cfg.gamma,
                    &self.v,
                    &self.theta_v,
                    &self.d,
                    &self.theta_d,
                    &next,
                    &e.pair.y,
                    &e.pair.x0,
                )?;
                let c = bellman_loss(&self.v, &self.theta_v, &e.x_t, eps, &e.pair.x0, target)?;
                Ok((r, target, c))
            })
            .collect::<Result<_>>()?;
        let n = results.len() as f64;
        for (_, _, c) in &results {
            self.theta_v.add_grad(&c.grad, 1.0 / n);
        }
        self.opt_v.step(&mut self.theta_v, self.cfg.lr_v)?;
        Ok(CriticStats {
            l3: results.iter().map(|r| r.2.loss).sum::<f64>() / n,
            reward: results.iter().map(|r| r.0).sum::<f64>() / n,
            target: results.iter().map(|r| r.1).sum::<f64>() / n,
        })
    }

    pub fn write_telemetry(&self, path: &std::path::Path) -> Result<()> {
        write_telemetry(path, &self.telemetry)
    }
}

fn mean_of(out: &[ActorOutput], f: impl Fn(&ActorOutput) -> f64) -> f64 {
    out.iter().map(f).sum::<f64>() / out.len() as f64
}

pub fn write_telemetry(path: &std::path::Path, rows: &[TelemetryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(TELEMETRY_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_telemetry(path: &std::path::Path) -> Result<Vec<TelemetryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Trains to completion from a fresh start.
pub fn train(cfg: TrainConfig, corpus: Vec<SignalPair>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg, corpus)?;
    t.run()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::{synth_corpus, CorpusParams, Split};

    fn corpus() -> Vec<SignalPair> {
        synth_corpus(3, &CorpusParams::new(Split::Train, 6, 64, &[0.0, 5.0, 10.0])).unwrap()
    }

    fn tiny(n_total: usize, n_th: usize) -> TrainConfig {
        TrainConfig {
            n_total,
            n_th,
            batch: 3,
            seed: 9,
            lr_d_phase1: 1e-3,
            lr_d_phase2: 1e-3,
            lr_v: 1e-3,
            channels: 8,
            blocks: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn critic_idle_during_warm_up() {
        let mut t = Trainer::new(tiny(12, 8), corpus()).unwrap();
        let v0 = t.theta_v().fingerprint();
        for _ in 0..8 {
            let d0 = t.theta_d().fingerprint();
            let row = t.step().unwrap();
            assert_eq!(row.phase, 1);
            assert!(row.l3.is_none());
            assert_eq!(t.theta_v().fingerprint(), v0);
            assert_ne!(t.theta_d().fingerprint(), d0);
        }
        let row = t.step().unwrap();
        assert_eq!(row.phase, 2);
        assert!(row.l3.is_some());
        assert_ne!(t.theta_v().fingerprint(), v0);
        t.run().unwrap();
        assert_eq!(t.telemetry().len(), 12);
        assert!(t.step().is_err());
    }

    #[test]
    fn zero_alpha_matches_elbo_only() {
        let cfg = TrainConfig {
            alpha: 0.0,
            ..tiny(10, 4)
        };
        let elbo = TrainConfig {
            elbo_only: true,
            ..cfg.clone()
        };
        let mut a = Trainer::new(cfg, corpus()).unwrap();
        let mut b = Trainer::new(elbo, corpus()).unwrap();
        for _ in 0..10 {
            a.step().unwrap();
            b.step().unwrap();
            assert_eq!(a.theta_d().fingerprint(), b.theta_d().fingerprint());
        }
    }

    #[test]
    fn replays_are_identical() {
        let run = || {
            let mut t = Trainer::new(tiny(10, 5), corpus()).unwrap();
            t.run().unwrap();
            (
                t.telemetry().to_vec(),
                t.theta_d().fingerprint(),
                t.theta_v().fingerprint(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn critic_first_order_runs() {
        let cfg = TrainConfig {
            d_before_v: false,
            ..tiny(6, 3)
        };
        let mut t = Trainer::new(cfg, corpus()).unwrap();
        t.run().unwrap();
        assert!(t.telemetry()[5].reward_mean.is_some());
    }

    #[test]
    fn guard_trips_on_blow_up() {
        let mut g = Guard::new(10.0, 3);
        for l in [1.0, 2.0, 3.0] {
            g.observe(0, l).unwrap();
        }
        assert_eq!(g.baseline, Some(2.0));
        g.observe(4, 19.0).unwrap();
        assert!(matches!(g.observe(5, 21.0), Err(Error::Diverged { iter: 5, .. })));
        assert!(g.observe(6, f64::NAN).is_err());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let cfg = TrainConfig {
            lr_d_phase1: 5.0,
            guard_window: 2,
            ..tiny(60, 60)
        };
        let mut t = Trainer::new(cfg, corpus()).unwrap();
        let err = t.run().unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::Numeric(_)), "{err}");
    }

    #[test]
    fn telemetry_csv_round_trip() {
        let mut t = Trainer::new(tiny(6, 3), corpus()).unwrap();
        t.run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("telemetry.csv");
        t.write_telemetry(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iter,phase,l1,l2,l3,reward_mean,target_mean\n"));
        assert_eq!(read_telemetry(&path).unwrap(), t.telemetry());
    }
}
