use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mose_core::checks::run_all;
use mose_core::diffusion::DEFAULT_FAST_BETAS;
use mose_core::metric::MetricSpec;
use mose_core::nets::checkpoint::sha256_hex;
use mose_core::signals::{
    read_corpus, synth_corpus, wav_read, wav_write, write_corpus, CorpusParams, SignalPair, Split, CORPUS_INDEX,
};
use mose_core::trainer::{
    corpus_hash, evaluate, mismatch_experiment, write_csv, Model, Sampler, System, TrainConfig, Trainer, MANIFEST_FILE,
};
use mose_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

/// Run manifest written into every output directory.
const RUN_FILE: &str = "run.toml";

#[derive(Parser)]
#[command(
    name = "mose",
    version,
    about = "Conditional diffusion enhancement with metric-oriented training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of clean/noisy WAV pairs.
    Synth(SynthArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Enhance WAV files with a trained model.
    Enhance(EnhanceArgs),
    /// Score models on a corpus and write a report.
    Eval(EvalArgs),
    /// Correlate summed training loss and cumulative reward with metric gains.
    Mismatch(MismatchArgs),
    /// Run the invariant and oracle suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct Output {
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 64)]
    utterances: usize,
    /// Samples per utterance.
    #[arg(long, default_value_t = 1024)]
    len: usize,
    /// SNR levels in dB. Defaults to 0,5,10,15 for train and 2.5,7.5,12.5,17.5 for test.
    #[arg(long, value_delimiter = ',')]
    snrs: Option<Vec<f64>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    output: Output,
    /// Corpus index file or the directory holding it.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of diffusion steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Reward metric.
    #[arg(long)]
    metric: Option<String>,
    /// Continue the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop and checkpoint after this many iterations.
    #[arg(long)]
    stop_at: Option<usize>,
}

#[derive(Args)]
struct EnhanceArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    model: PathBuf,
    /// Inference betas, or `full` for the training chain.
    #[arg(long)]
    fast_schedule: Option<String>,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    corpus: PathBuf,
    /// Model directories, one system each.
    #[arg(long = "model", required = true)]
    models: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "si_snr,seg_snr,neg_mse")]
    metric: Vec<String>,
    #[arg(long)]
    fast_schedule: Option<String>,
}

#[derive(Args)]
struct MismatchArgs {
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    corpus: PathBuf,
    /// Model trained on the ELBO loss only.
    #[arg(long)]
    elbo: PathBuf,
    /// Metric-trained model whose rollouts are scored.
    #[arg(long)]
    model: PathBuf,
    /// Reward metric.
    #[arg(long, default_value = "si_snr")]
    metric: String,
    #[arg(long, default_value = "seg_snr")]
    report_metric: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Also write the results and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    version: String,
    binary_sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    corpus: Option<CorpusParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        let binary_sha256 = std::env::current_exe()
            .and_then(std::fs::read)
            .map(|b| sha256_hex(&b))
            .unwrap_or_default();
        RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            binary_sha256,
            seed: None,
            corpus_hash: None,
            corpus: None,
            config: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(format!("manifest: {e}")))?;
        std::fs::write(dir.join(RUN_FILE), text)?;
        Ok(())
    }
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let occupied = std::fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !force {
        return Err(Error::Config(format!(
            "{} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Vec<SignalPair>> {
    if !path.exists() {
        return Err(Error::Data(format!("corpus {} does not exist", path.display())));
    }
    if path.is_dir() {
        read_corpus(&path.join(CORPUS_INDEX))
    } else {
        read_corpus(path)
    }
}

fn parse_sampler(arg: Option<&str>) -> Result<Sampler> {
    match arg {
        None => Ok(Sampler::Fast(DEFAULT_FAST_BETAS.to_vec())),
        Some("full") => Ok(Sampler::Full),
        Some(list) => list
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad fast-schedule value `{v}`")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Sampler::Fast),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    prepare_out(&a.output.out, a.output.force)?;
    let split: Split = a.split.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    let snrs = a.snrs.unwrap_or_else(|| match split {
        Split::Train => vec![0.0, 5.0, 10.0, 15.0],
        Split::Test => vec![2.5, 7.5, 12.5, 17.5],
    });
    let params = CorpusParams::new(split, a.utterances, a.len, &snrs);
    let pairs = synth_corpus(a.seed, &params)?;
    let index = write_corpus(&a.output.out, &pairs)?;
    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    // Hash what later commands will read: the 16-bit files, not the floats.
    m.corpus_hash = Some(corpus_hash(&read_corpus(&index)?));
    m.corpus = Some(params);
    m.write(&a.output.out)?;
    println!("wrote {} pairs, index {}", pairs.len(), index.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let out = &a.output.out;
    let corpus = load_corpus(&a.corpus)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = &a.metric {
        cfg.metric = v.clone();
    }
    cfg.validate()?;
    let mut trainer = if a.resume {
        if !out.join(MANIFEST_FILE).exists() {
            return Err(Error::Config(format!("no checkpoint to resume in {}", out.display())));
        }
        Trainer::resume(out, corpus, Some(&cfg))?
    } else {
        prepare_out(out, a.output.force)?;
        Trainer::new(cfg.clone(), corpus)?
    };
    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.corpus_hash = Some(corpus_hash(trainer.corpus()));
    m.config = Some(cfg.clone());
    m.write(out)?;
    let stop = a.stop_at.unwrap_or(cfg.n_total).min(cfg.n_total);
    let outcome = trainer.run_to(stop);
    // A diverged run still leaves its state behind for inspection.
    trainer.save(out)?;
    outcome?;
    let last = trainer.telemetry().last();
    println!(
        "iteration {}/{}, final L1 {}",
        trainer.iter(),
        cfg.n_total,
        last.map_or("-".into(), |r| format!("{:.5}", r.l1))
    );
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<()> {
    prepare_out(&a.output.out, a.output.force)?;
    let model = Model::load(&a.model)?;
    let sampler = parse_sampler(a.fast_schedule.as_deref())?;
    let plan = model.plan(&sampler)?;
    let mut names = std::collections::HashSet::new();
    for p in &a.inputs {
        if !names.insert(p.file_name()) {
            return Err(Error::Config(format!("duplicate input name {}", p.display())));
        }
    }
    a.inputs
        .par_iter()
        .map(|input| {
            let signal = wav_read(input)?;
            let enhanced = model.enhance(&signal.samples, &plan)?;
            let name = input
                .file_name()
                .ok_or_else(|| Error::Data(format!("{} has no file name", input.display())))?;
            wav_write(&a.output.out.join(name), &enhanced, signal.sample_rate)
        })
        .collect::<Result<Vec<()>>>()?;
    let mut m = RunManifest::new("enhance");
    m.config = Some(model.config.clone());
    m.write(&a.output.out)?;
    println!("enhanced {} files with {} reverse steps", a.inputs.len(), plan.steps());
    Ok(())
}

fn system_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn eval(a: EvalArgs) -> Result<()> {
    prepare_out(&a.output.out, a.output.force)?;
    let corpus = load_corpus(&a.corpus)?;
    let metrics = a
        .metric
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<MetricSpec>>>()?;
    let sampler = parse_sampler(a.fast_schedule.as_deref())?;
    let models = a.models.iter().map(|d| Model::load(d)).collect::<Result<Vec<_>>>()?;
    let systems: Vec<System> = a
        .models
        .iter()
        .zip(&models)
        .map(|(dir, m)| System {
            name: system_name(dir),
            alpha: (!m.config.elbo_only).then_some(m.config.alpha),
            model: m,
        })
        .collect();
    let report = evaluate(&systems, &corpus, &metrics, &sampler)?;
    write_csv(&a.output.out.join("report.csv"), &report.rows)?;
    write_csv(&a.output.out.join("utterances.csv"), &report.utterances)?;
    let mut m = RunManifest::new("eval");
    m.corpus_hash = Some(corpus_hash(&corpus));
    m.write(&a.output.out)?;

    print!("{:<3} {:<16} {:>6}", "ID", "system", "alpha");
    for spec in &metrics {
        print!(" {:>12}", spec.name);
    }
    println!();
    let mut order: Vec<(&str, Option<f64>)> = vec![(mose_core::trainer::UNPROCESSED, None)];
    order.extend(systems.iter().map(|s| (s.name.as_str(), s.alpha)));
    for (i, (name, alpha)) in order.iter().enumerate() {
        print!(
            "{:<3} {:<16} {:>6}",
            i + 1,
            name,
            alpha.map_or("-".into(), |v| v.to_string())
        );
        for spec in &metrics {
            let row = report
                .row(name, &spec.name)
                .expect("every system is scored on every metric");
            print!(" {:>12.3}", row.mean);
        }
        println!();
    }
    Ok(())
}

fn mismatch(a: MismatchArgs) -> Result<()> {
    prepare_out(&a.output.out, a.output.force)?;
    let corpus = load_corpus(&a.corpus)?;
    let elbo = Model::load(&a.elbo)?;
    let trained = Model::load(&a.model)?;
    let reward: MetricSpec = a.metric.parse()?;
    let report: MetricSpec = a.report_metric.parse()?;
    let rep = mismatch_experiment(&elbo, &trained, &corpus, &reward, &report, a.seed)?;
    write_csv(&a.output.out.join("mismatch.csv"), &rep.rows)?;
    rep.write_summary(&a.output.out.join("mismatch_summary.csv"))?;
    let mut m = RunManifest::new("mismatch");
    m.seed = Some(a.seed);
    m.corpus_hash = Some(corpus_hash(&corpus));
    m.write(&a.output.out)?;
    println!(
        "{} utterances: corr(sum L1, delta {}) = {:.3}, corr(reward, delta {}) = {:.3}",
        rep.rows.len(),
        rep.report_metric,
        rep.corr_l1,
        rep.report_metric,
        rep.corr_reward
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckRow<'a> {
    group: &'a str,
    cases: usize,
    passed: bool,
    detail: &'a str,
}

fn selfcheck(a: SelfcheckArgs) -> Result<()> {
    if let Some(out) = &a.out {
        prepare_out(out, a.force)?;
    }
    let scratch = std::env::temp_dir().join(format!("mose-selfcheck-{}", std::process::id()));
    std::fs::create_dir_all(&scratch)?;
    let outcomes = run_all(&scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    for o in &outcomes {
        println!(
            "{:<12} {} {:>7} cases  {}",
            o.group,
            if o.passed { "ok  " } else { "FAIL" },
            o.cases,
            o.detail
        );
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} property groups passed", outcomes.len());
    if let Some(out) = &a.out {
        let rows: Vec<CheckRow> = outcomes
            .iter()
            .map(|o| CheckRow {
                group: &o.group,
                cases: o.cases,
                passed: o.passed,
                detail: &o.detail,
            })
            .collect();
        write_csv(&out.join("selfcheck.csv"), &rows)?;
        RunManifest::new("selfcheck").write(out)?;
    }
    if passed == outcomes.len() {
        Ok(())
    } else {
        let failed: Vec<&str> = outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| o.group.as_str())
            .collect();
        Err(Error::Check(failed.join(", ")))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Schedule(_) => 2,
        Error::Numeric(_) | Error::Diverged { .. } => 4,
        Error::Check(_) => 5,
        _ => 3,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MOSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MOSE_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Eval(a) => eval(a),
        Command::Mismatch(a) => mismatch(a),
        Command::Selfcheck(a) => selfcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
