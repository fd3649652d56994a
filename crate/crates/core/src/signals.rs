//! Signal containers, the synthetic corpus, WAV I/O and SNR mixing.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_len, Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// A clean reference and its noisy observation.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalPair {
    pub id: String,
    pub x0: Vec<f64>,
    pub y: Vec<f64>,
    pub sample_rate: u32,
    /// Mixing SNR label, when known.
    pub snr_db: Option<f64>,
    pub split: Split,
}

impl SignalPair {
    pub fn new(id: impl Into<String>, x0: Vec<f64>, y: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let pair = SignalPair {
            id: id.into(),
            x0,
            y,
            sample_rate,
            snr_db: None,
            split: Split::Train,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_same_len(&format!("pair {}", self.id), self.x0.len(), self.y.len())?;
        if self.x0.is_empty() {
            return Err(Error::Data(format!("pair {} is empty", self.id)));
        }
        if self.sample_rate == 0 {
            return Err(Error::Data(format!("pair {} has zero sample rate", self.id)));
        }
        if !self.x0.iter().chain(&self.y).all(|v| v.is_finite()) {
            return Err(Error::Data(format!("pair {} has non-finite samples", self.id)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// A point on the diffusion chain: the latent signal at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub x: Vec<f64>,
    pub t: usize,
}

impl LatentState {
    pub fn new(x: Vec<f64>, t: usize) -> Self {
        LatentState { x, t }
    }
}

pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_clean / P_(noisy - clean))` over the whole utterance.
pub fn snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let residual: Vec<f64> = noisy.iter().zip(clean).map(|(n, c)| n - c).collect();
    10.0 * (power(clean) / power(&residual)).log10()
}

/// Mixes `noise` into `clean` at `snr_db`. Pass `f64::INFINITY` for a
/// noiseless pair. Power is measured over the full utterance.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<SignalPair> {
    ensure_same_len("mix_at_snr", clean.len(), noise.len())?;
    let p_clean = power(clean);
    if !(p_clean > 0.0) {
        return Err(Error::Data("clean signal has zero power".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::Data("SNR is NaN".into()));
    }
    let y = if snr_db == f64::INFINITY {
        clean.to_vec()
    } else {
        let p_noise = power(noise);
        if !(p_noise > 0.0) {
            return Err(Error::Data(format!("cannot reach {snr_db} dB with zero-power noise")));
        }
        let gain = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
        clean.iter().zip(noise).map(|(c, n)| c + gain * n).collect()
    };
    let mut pair = SignalPair::new("mix", clean.to_vec(), y, DEFAULT_SAMPLE_RATE)?;
    pair.snr_db = Some(snr_db);
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub utterances: usize,
    pub len: usize,
    pub sample_rate: u32,
    pub snr_levels: Vec<f64>,
    pub split: Split,
    /// RMS of every clean utterance.
    pub clean_rms: f64,
}

impl CorpusParams {
    pub fn new(split: Split, utterances: usize, len: usize, snr_levels: &[f64]) -> Self {
        CorpusParams {
            utterances,
            len,
            sample_rate: DEFAULT_SAMPLE_RATE,
            snr_levels: snr_levels.to_vec(),
            split,
            clean_rms: 0.25,
        }
    }
}

/// Synthetic corpus: harmonic "speech" under an amplitude envelope mixed with
/// tilted coloured noise. Utterance `i` draws from its own stream of the seed,
/// so the corpus is a pure function of `(seed, params)` and the split.
pub fn synth_corpus(seed: u64, params: &CorpusParams) -> Result<Vec<SignalPair>> {
    if params.utterances == 0 {
        return Err(Error::Data("corpus needs at least one utterance".into()));
    }
    if params.len < 2 {
        return Err(Error::Data("utterances need at least two samples".into()));
    }
    if params.snr_levels.is_empty() {
        return Err(Error::Data("no SNR levels given".into()));
    }
    let stream_base = match params.split {
        Split::Train => 0u64,
        Split::Test => 1u64 << 40,
    };
    (0..params.utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + i as u64);
            let clean = synth_speech(&mut rng, params.len, params.sample_rate, params.clean_rms);
            let noise = synth_noise(&mut rng, params.len);
            let snr = params.snr_levels[i % params.snr_levels.len()];
            let mut pair = mix_at_snr(&clean, &noise, snr)?;
            pair.id = format!("{}_{i:05}", params.split);
            pair.sample_rate = params.sample_rate;
            pair.split = params.split;
            Ok(pair)
        })
        .collect()
}

fn synth_speech(rng: &mut impl Rng, len: usize, sample_rate: u32, rms: f64) -> Vec<f64> {
    let sr = sample_rate as f64;
    let f0 = rng.random_range(150.0..400.0);
    let harmonics = rng.random_range(3..=8);
    let partials: Vec<(f64, f64, f64)> = (1..=harmonics)
        .map(|h| {
            let amp = rng.random_range(0.3..1.0) / h as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            (h as f64 * f0, amp, phase)
        })
        .collect();
    let env_rate = rng.random_range(20.0..80.0);
    let env_phase = rng.random_range(0.0..PI);
    let mut x: Vec<f64> = (0..len)
        .map(|n| {
            let time = n as f64 / sr;
            let env = 0.3 + 0.7 * (PI * env_rate * time + env_phase).sin().powi(2);
            let tone: f64 = partials
                .iter()
                .map(|&(f, a, p)| a * (2.0 * PI * f * time + p).sin())
                .sum();
            env * tone
        })
        .collect();
    normalize_rms(&mut x, rms);
    x
}

fn synth_noise(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let tilt: f64 = rng.random_range(-0.8..0.9);
    let mut prev = 0.0;
    let mut n: Vec<f64> = (0..len)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            prev = e + tilt * prev;
            prev
        })
        .collect();
    normalize_rms(&mut n, 1.0);
    n
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = power(x).sqrt();
    if rms > 0.0 {
        let g = target / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
}

/// A mono signal read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Reads a 16-bit PCM mono WAV file into samples in `[-1, 1)`.
pub fn wav_read(path: &Path) -> Result<Signal> {
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(wav_err(format!(
            "unsupported encoding: {} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_err(e.to_string()))?;
    if samples.is_empty() {
        return Err(wav_err("no samples".into()));
    }
    Ok(Signal {
        samples,
        sample_rate: spec.sample_rate,
    })
}

/// Writes samples as 16-bit PCM mono, clipping to the representable range.
pub fn wav_write(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let wav_err = |reason: String| Error::Wav {
        path: path.to_path_buf(),
        reason,
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(wav_err("non-finite samples".into()));
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(e.to_string()))?;
    for &v in samples {
        let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_err(e.to_string()))?;
    }
    writer.finalize().map_err(|e| wav_err(e.to_string()))
}

/// One row of a corpus index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path_clean: PathBuf,
    pub path_noisy: PathBuf,
    pub snr_db: f64,
    pub split: Split,
}

pub const CORPUS_INDEX: &str = "corpus.tsv";

/// Writes each pair as two WAV files under `dir` plus a tab-separated index.
/// Paths in the index are relative to `dir`.
pub fn write_corpus(dir: &Path, pairs: &[SignalPair]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("clean"))?;
    std::fs::create_dir_all(dir.join("noisy"))?;
    let index = dir.join(CORPUS_INDEX);
    let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_path(&index)?;
    for pair in pairs {
        let entry = ManifestEntry {
            id: pair.id.clone(),
            path_clean: PathBuf::from("clean").join(format!("{}.wav", pair.id)),
            path_noisy: PathBuf::from("noisy").join(format!("{}.wav", pair.id)),
            snr_db: pair.snr_db.unwrap_or(f64::NAN),
            split: pair.split,
        };
        wav_write(&dir.join(&entry.path_clean), &pair.x0, pair.sample_rate)?;
        wav_write(&dir.join(&entry.path_noisy), &pair.y, pair.sample_rate)?;
        out.serialize(&entry)?;
    }
    out.flush()?;
    Ok(index)
}

/// Loads every pair listed in a corpus index.
pub fn read_corpus(index: &Path) -> Result<Vec<SignalPair>> {
    let base = index.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::ReaderBuilder::new().delimiter(b'\t').from_path(index)?;
    let mut pairs = Vec::new();
    for row in rdr.deserialize::<ManifestEntry>() {
        let entry = row.map_err(|e| Error::Data(format!("{}: {e}", index.display())))?;
        let clean = wav_read(&base.join(&entry.path_clean))?;
        let noisy = wav_read(&base.join(&entry.path_noisy))?;
        if clean.sample_rate != noisy.sample_rate {
            return Err(Error::Data(format!("{}: sample rates differ", entry.id)));
        }
        let mut pair = SignalPair::new(entry.id, clean.samples, noisy.samples, clean.sample_rate)?;
        pair.snr_db = entry.snr_db.is_finite().then_some(entry.snr_db);
        pair.split = entry.split;
        pairs.push(pair);
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} lists no utterances", index.display())));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_power(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        normalize_rms(&mut v, 1.0);
        v
    }

    #[test]
    fn zero_db_balances_powers() {
        let clean = unit_power(1, 512);
        let noise: Vec<f64> = unit_power(2, 512).iter().map(|v| 3.0 * v).collect();
        let pair = mix_at_snr(&clean, &noise, 0.0).unwrap();
        let scaled: Vec<f64> = pair.y.iter().zip(&clean).map(|(y, c)| y - c).collect();
        let rel = (power(&clean) - power(&scaled)).abs() / power(&clean);
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn infinite_snr_is_passthrough() {
        let clean = unit_power(3, 64);
        let pair = mix_at_snr(&clean, &unit_power(4, 64), f64::INFINITY).unwrap();
        assert_eq!(pair.y, clean);
    }

    #[test]
    fn ten_db_gain_from_recomputed_snr() {
        let clean = unit_power(5, 1024);
        let noise = unit_power(6, 1024);
        let pair = mix_at_snr(&clean, &noise, 10.0).unwrap();
        assert!((snr_db(&pair.x0, &pair.y) - 10.0).abs() < 1e-9);
        let gain = (pair.y[7] - clean[7]) / noise[7];
        assert!((gain - 10f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn mixing_errors() {
        let clean = unit_power(7, 16);
        assert!(mix_at_snr(&clean, &[0.0; 16], 5.0).is_err());
        assert!(mix_at_snr(&[0.0; 16], &clean, 5.0).is_err());
        assert!(mix_at_snr(&clean, &clean[..8], 5.0).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_labelled() {
        let params = CorpusParams::new(Split::Train, 12, 256, &[0.0, 5.0, 10.0, 15.0]);
        let a = synth_corpus(42, &params).unwrap();
        let b = synth_corpus(42, &params).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_corpus(43, &params).unwrap());
        for pair in &a {
            let label = pair.snr_db.unwrap();
            assert!((snr_db(&pair.x0, &pair.y) - label).abs() < 0.01);
        }
        let unseen = CorpusParams::new(Split::Test, 10, 256, &[-6.0, -3.0, 0.0, 3.0, 6.0]);
        for pair in synth_corpus(42, &unseen).unwrap() {
            assert!((snr_db(&pair.x0, &pair.y) - pair.snr_db.unwrap()).abs() < 0.01);
            assert_eq!(pair.split, Split::Test);
        }
    }

    #[test]
    fn wav_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sine.wav");
        let sine: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * PI * 440.0 * n as f64 / 16_000.0).sin())
            .collect();
        wav_write(&path, &sine, 16_000).unwrap();
        let back = wav_read(&path).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        let err = sine
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1.0 / 32768.0, "{err}");
    }

    #[test]
    fn wav_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        wav_write(&empty, &[], 16_000).unwrap();
        assert!(matches!(wav_read(&empty), Err(Error::Wav { .. })));

        let full = dir.path().join("full.wav");
        wav_write(&full, &[0.5; 100], 16_000).unwrap();
        let bytes = std::fs::read(&full).unwrap();
        let truncated = dir.path().join("truncated.wav");
        std::fs::write(&truncated, &bytes[..bytes.len() - 51]).unwrap();
        assert!(wav_read(&truncated).is_err());

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        for _ in 0..8 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(wav_read(&stereo).is_err());

        assert!(wav_read(&dir.path().join("missing.wav")).is_err());
    }

    #[test]
    fn corpus_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = synth_corpus(1, &CorpusParams::new(Split::Test, 3, 128, &[2.5])).unwrap();
        let index = write_corpus(dir.path(), &pairs).unwrap();
        let back = read_corpus(&index).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(b.snr_db, Some(2.5));
            assert_eq!(b.split, Split::Test);
            assert!(a.x0.iter().zip(&b.x0).all(|(u, v)| (u - v).abs() <= 1.0 / 32768.0));
        }
    }

    proptest! {
        #[test]
        fn mixing_is_scale_equivariant(seed in 0u64..1000, snr in -10.0f64..30.0, c in 0.01f64..100.0) {
            let clean = unit_power(seed, 64);
            let noise = unit_power(seed + 1, 64);
            let base = mix_at_snr(&clean, &noise, snr).unwrap();
            let sc: Vec<f64> = clean.iter().map(|v| c * v).collect();
            let sn: Vec<f64> = noise.iter().map(|v| c * v).collect();
            let scaled = mix_at_snr(&sc, &sn, snr).unwrap();
            for (a, b) in base.y.iter().zip(&scaled.y) {
                prop_assert!((c * a - b).abs() <= 1e-12 * c.max(1.0) * (1.0 + a.abs()));
            }
        }
    }
}
