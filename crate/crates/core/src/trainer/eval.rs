//! Evaluation reports and the training-objective/metric mismatch experiment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{CheckpointManifest, TrainConfig, Trainer};
use crate::diffusion::{elbo_loss, forward_sample, reverse_rollout, target_noise, SamplingPlan};
use crate::error::{Error, Result};
use crate::metric::MetricSpec;
use crate::nets::{DiffusionNet, ParamSet};
use crate::schedule::NoiseSchedule;
use crate::signals::SignalPair;
use crate::stats::{mean, pearson, std_dev};

/// A trained diffusion network with the chain it was trained on.
pub struct Model {
    pub config: TrainConfig,
    pub net: DiffusionNet,
    pub params: ParamSet,
    pub schedule: NoiseSchedule,
}

/// Which reverse chain to run at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum Sampler {
    Full,
    Fast(Vec<f64>),
}

impl Model {
    pub fn load(dir: &Path) -> Result<Self> {
        let m = CheckpointManifest::read(dir)?;
        let (net, params) = m.load_diffusion(dir)?;
        Ok(Model {
            schedule: m.config.schedule()?,
            config: m.config,
            net,
            params,
        })
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Model {
            config: t.config().clone(),
            net: crate::nets::DiffusionNet::new(t.config().diffusion_net()),
            params: t.theta_d().clone(),
            schedule: t.schedule().clone(),
        }
    }

    pub fn plan(&self, sampler: &Sampler) -> Result<SamplingPlan> {
        match sampler {
            Sampler::Full => Ok(SamplingPlan::full(&self.schedule)),
            Sampler::Fast(betas) => SamplingPlan::fast(betas, &self.schedule),
        }
    }

    /// Deterministic enhancement: starts at the marginal mean and adds no
    /// noise along the way.
    pub fn enhance(&self, y: &[f64], plan: &SamplingPlan) -> Result<Vec<f64>> {
        let r = reverse_rollout(&self.net, &self.params, y, plan, None)?;
        Ok(r.output().to_vec())
    }
}

/// A named model entered into an evaluation.
pub struct System<'a> {
    pub name: String,
    pub alpha: Option<f64>,
    pub model: &'a Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub system: String,
    pub alpha: Option<f64>,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub system: String,
    pub id: String,
    pub snr_db: Option<f64>,
    pub metric: String,
    pub score: f64,
}

/// One row per (system, metric), the unprocessed input first.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub utterances: Vec<UtteranceScore>,
}

impl Report {
    pub fn row(&self, system: &str, metric: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.system == system && r.metric == metric)
    }
}

pub const UNPROCESSED: &str = "unprocessed";

pub fn evaluate(
    systems: &[System<'_>],
    corpus: &[SignalPair],
    metrics: &[MetricSpec],
    sampler: &Sampler,
) -> Result<Report> {
    if corpus.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let mut outputs: Vec<(String, Option<f64>, Vec<Vec<f64>>)> =
        vec![(UNPROCESSED.into(), None, corpus.iter().map(|p| p.y.clone()).collect())];
    for s in systems {
        let plan = s.model.plan(sampler)?;
        let enhanced = corpus
            .par_iter()
            .map(|p| s.model.enhance(&p.y, &plan))
            .collect::<Result<Vec<_>>>()?;
        outputs.push((s.name.clone(), s.alpha, enhanced));
    }
    let mut report = Report {
        rows: Vec::new(),
        utterances: Vec::new(),
    };
    for (system, alpha, signals) in outputs {
        for m in metrics {
            let scores = signals
                .par_iter()
                .zip(corpus)
                .map(|(s, p)| m.evaluate(s, &p.x0))
                .collect::<Result<Vec<_>>>()?;
            report.rows.push(ReportRow {
                system: system.clone(),
                alpha,
                metric: m.name.clone(),
                mean: mean(&scores),
                std: if scores.len() > 1 { std_dev(&scores) } else { 0.0 },
                n: scores.len(),
            });
            for (p, score) in corpus.iter().zip(scores) {
                report.utterances.push(UtteranceScore {
                    system: system.clone(),
                    id: p.id.clone(),
                    snr_db: p.snr_db,
                    metric: m.name.clone(),
                    score,
                });
            }
        }
    }
    Ok(report)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MismatchRow {
    pub id: String,
    pub snr_db: Option<f64>,
    /// L1 of the ELBO-trained model summed over every step of the chain.
    pub sum_l1: f64,
    /// Cumulative reward of the metric-trained model's deterministic rollout.
    pub reward: f64,
    /// Report metric of the enhanced output minus that of the noisy input.
    pub delta_metric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MismatchReport {
    pub reward_metric: String,
    pub report_metric: String,
    pub rows: Vec<MismatchRow>,
    pub corr_l1: f64,
    pub corr_reward: f64,
}

#[derive(Serialize)]
struct MismatchSummary<'a> {
    reward_metric: &'a str,
    report_metric: &'a str,
    n: usize,
    corr_l1_delta: f64,
    corr_reward_delta: f64,
}

impl MismatchReport {
    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            &[MismatchSummary {
                reward_metric: &self.reward_metric,
                report_metric: &self.report_metric,
                n: self.rows.len(),
                corr_l1_delta: self.corr_l1,
                corr_reward_delta: self.corr_reward,
            }],
        )
    }
}

/// Relates each utterance's summed L1 (ELBO model, seeded forward samples at
/// every step) and cumulative reward (metric-trained model, deterministic
/// full rollout) to the report-metric gain of that rollout.
pub fn mismatch_experiment(
    elbo: &Model,
    trained: &Model,
    utterances: &[SignalPair],
    reward_metric: &MetricSpec,
    report_metric: &MetricSpec,
    seed: u64,
) -> Result<MismatchReport> {
    if utterances.len() < 3 {
        return Err(Error::Data(format!(
            "{} utterances are too few for a correlation",
            utterances.len()
        )));
    }
    let plan = SamplingPlan::full(&trained.schedule);
    let rows = utterances
        .par_iter()
        .enumerate()
        .map(|(u, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(u as u64);
            let mut sum_l1 = 0.0;
            for t in 1..=elbo.schedule.steps() {
                let eps: Vec<f64> = (0..p.len()).map(|_| rng.sample(StandardNormal)).collect();
                let x_t = forward_sample(p, t, &eps, &elbo.schedule)?;
                let pred = elbo.net.predict(&elbo.params, &x_t.x, &p.y, t as f64)?;
                sum_l1 += elbo_loss(&pred, &target_noise(p, &eps, t, &elbo.schedule)?)?;
            }
            let rollout = reverse_rollout(&trained.net, &trained.params, &p.y, &plan, None)?;
            let mut reward = 0.0;
            for pair in rollout.states.windows(2) {
                reward += crate::rl::reward(&pair[1], &pair[0], &p.x0, reward_metric)?;
            }
            let delta_metric =
                report_metric.evaluate(rollout.output(), &p.x0)? - report_metric.evaluate(&p.y, &p.x0)?;
            Ok(MismatchRow {
                id: p.id.clone(),
                snr_db: p.snr_db,
                sum_l1,
                reward,
                delta_metric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let l1: Vec<f64> = rows.iter().map(|r| r.sum_l1).collect();
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let delta: Vec<f64> = rows.iter().map(|r| r.delta_metric).collect();
    Ok(MismatchReport {
        reward_metric: reward_metric.name.clone(),
        report_metric: report_metric.name.clone(),
        corr_l1: pearson(&l1, &delta),
        corr_reward: pearson(&rewards, &delta),
        rows,
    })
}
