//! Black-box evaluation metrics `m(candidate, reference)`, higher is better.
//!
//! None of these is differentiated: training only ever sees score
//! differences through the reward.

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::str::FromStr;

use crate::error::{ensure_same_len, Error, Result};
use crate::signals::{wav_write, DEFAULT_SAMPLE_RATE};

pub const SI_SNR_RANGE: (f64, f64) = (-40.0, 60.0);
pub const SEG_SNR_RANGE: (f64, f64) = (-10.0, 35.0);
pub const DEFAULT_SEG_FRAME: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub enum MetricKind {
    SiSnr,
    SegSnr {
        frame: usize,
    },
    NegMse,
    /// An external scorer. The command template is split on whitespace;
    /// `{candidate}` and `{reference}` are replaced with WAV paths.
    External {
        command: String,
        sample_rate: u32,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSpec {
    pub name: String,
    pub kind: MetricKind,
    pub higher_is_better: bool,
    pub bounded_range: Option<(f64, f64)>,
}

impl MetricSpec {
    pub fn si_snr() -> Self {
        MetricSpec {
            name: "si_snr".into(),
            kind: MetricKind::SiSnr,
            higher_is_better: true,
            bounded_range: Some(SI_SNR_RANGE),
        }
    }

    pub fn seg_snr(frame: usize) -> Self {
        MetricSpec {
            name: if frame == DEFAULT_SEG_FRAME {
                "seg_snr".into()
            } else {
                format!("seg_snr:{frame}")
            },
            kind: MetricKind::SegSnr { frame },
            higher_is_better: true,
            bounded_range: Some(SEG_SNR_RANGE),
        }
    }

    pub fn neg_mse() -> Self {
        MetricSpec {
            name: "neg_mse".into(),
            kind: MetricKind::NegMse,
            higher_is_better: true,
            bounded_range: None,
        }
    }

    pub fn external(command: impl Into<String>) -> Self {
        let command = command.into();
        MetricSpec {
            name: format!("external:{command}"),
            kind: MetricKind::External {
                command,
                sample_rate: DEFAULT_SAMPLE_RATE,
            },
            higher_is_better: true,
            bounded_range: None,
        }
    }

    pub fn evaluate(&self, candidate: &[f64], reference: &[f64]) -> Result<f64> {
        let fail = |reason: String| Error::Metric {
            name: self.name.clone(),
            reason,
        };
        ensure_same_len(&self.name, candidate.len(), reference.len())?;
        if candidate.iter().chain(reference).any(|v| !v.is_finite()) {
            return Err(fail("non-finite input".into()));
        }
        match &self.kind {
            MetricKind::SiSnr => si_snr(candidate, reference),
            MetricKind::SegSnr { frame } => seg_snr(candidate, reference, *frame),
            MetricKind::NegMse => Ok(neg_mse(candidate, reference)),
            MetricKind::External { command, sample_rate } => run_external(command, *sample_rate, candidate, reference)
                .map_err(|e| match e {
                    Error::Metric { reason, .. } => fail(reason),
                    other => fail(other.to_string()),
                }),
        }
    }
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    /// Accepts `si_snr`, `seg_snr`, `seg_snr:<frame>`, `neg_mse` and
    /// `external:<command template>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "si_snr" => return Ok(MetricSpec::si_snr()),
            "seg_snr" => return Ok(MetricSpec::seg_snr(DEFAULT_SEG_FRAME)),
            "neg_mse" => return Ok(MetricSpec::neg_mse()),
            _ => {}
        }
        if let Some(frame) = s.strip_prefix("seg_snr:") {
            let frame: usize = frame
                .parse()
                .map_err(|_| Error::Config(format!("bad seg_snr frame `{frame}`")))?;
            if frame == 0 {
                return Err(Error::Config("seg_snr frame must be positive".into()));
            }
            return Ok(MetricSpec::seg_snr(frame));
        }
        if let Some(cmd) = s.strip_prefix("external:") {
            if cmd.trim().is_empty() {
                return Err(Error::Config("external metric needs a command".into()));
            }
            return Ok(MetricSpec::external(cmd));
        }
        Err(Error::Config(format!("unknown metric `{s}`")))
    }
}

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clip_db(ratio_num: f64, ratio_den: f64, (lo, hi): (f64, f64)) -> f64 {
    if ratio_den == 0.0 {
        return hi;
    }
    if ratio_num == 0.0 {
        return lo;
    }
    (10.0 * (ratio_num / ratio_den).log10()).clamp(lo, hi)
}

/// Scale-invariant SNR of zero-mean signals, clipped to [-40, 60] dB.
pub fn si_snr(candidate: &[f64], reference: &[f64]) -> Result<f64> {
    ensure_same_len("si_snr", candidate.len(), reference.len())?;
    if candidate.is_empty() {
        return Err(Error::Metric {
            name: "si_snr".into(),
            reason: "empty input".into(),
        });
    }
    let r = zero_mean(reference);
    let c = zero_mean(candidate);
    let rr = dot(&r, &r);
    if rr == 0.0 {
        return Err(Error::Metric {
            name: "si_snr".into(),
            reason: "reference has no energy".into(),
        });
    }
    let scale = dot(&c, &r) / rr;
    let mut signal = 0.0;
    let mut noise = 0.0;
    for (ci, ri) in c.iter().zip(&r) {
        let s = scale * ri;
        signal += s * s;
        noise += (ci - s) * (ci - s);
    }
    Ok(clip_db(signal, noise, SI_SNR_RANGE))
}

/// Mean over non-overlapping frames of the per-frame SNR, each clipped to
/// [-10, 35] dB. A trailing partial frame counts as a frame.
pub fn seg_snr(candidate: &[f64], reference: &[f64], frame: usize) -> Result<f64> {
    ensure_same_len("seg_snr", candidate.len(), reference.len())?;
    if frame == 0 || frame > reference.len() {
        return Err(Error::Metric {
            name: "seg_snr".into(),
            reason: format!("frame {frame} does not fit a signal of {}", reference.len()),
        });
    }
    let scores: Vec<f64> = reference
        .chunks(frame)
        .zip(candidate.chunks(frame))
        .map(|(r, c)| {
            let sig = dot(r, r);
            let err: f64 = r.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            clip_db(sig, err, SEG_SNR_RANGE)
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn neg_mse(candidate: &[f64], reference: &[f64]) -> f64 {
    let n = reference.len().max(1) as f64;
    -candidate
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

fn run_external(command: &str, sample_rate: u32, candidate: &[f64], reference: &[f64]) -> Result<f64> {
    let dir = std::env::temp_dir().join(format!(
        "mose-metric-{}-{}",
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed)
    ));
    std::fs::create_dir_all(&dir)?;
    let result = score_with(command, sample_rate, candidate, reference, &dir);
    let _ = std::fs::remove_dir_all(&dir);
    result
}

static TEMP_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

fn score_with(command: &str, sample_rate: u32, candidate: &[f64], reference: &[f64], dir: &Path) -> Result<f64> {
    let fail = |reason: String| Error::Metric {
        name: "external".into(),
        reason,
    };
    let cand_path = dir.join("candidate.wav");
    let ref_path = dir.join("reference.wav");
    wav_write(&cand_path, candidate, sample_rate)?;
    wav_write(&ref_path, reference, sample_rate)?;
    let mut parts = command.split_whitespace().map(|p| {
        p.replace("{candidate}", &cand_path.to_string_lossy())
            .replace("{reference}", &ref_path.to_string_lossy())
    });
    let program = parts.next().ok_or_else(|| fail("empty command".into()))?;
    let output = Command::new(&program)
        .args(parts)
        .output()
        .map_err(|e| fail(format!("cannot run `{program}`: {e}")))?;
    if !output.status.success() {
        return Err(fail(format!("`{program}` exited with {}", output.status)));
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let value: f64 = stdout
        .trim()
        .parse()
        .map_err(|_| fail(format!("expected one number on stdout, got `{}`", stdout.trim())))?;
    if !value.is_finite() {
        return Err(fail(format!("scorer returned {value}")));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn si_snr_examples() {
        let r = noise(1, 256);
        assert_eq!(si_snr(&r, &r).unwrap(), 60.0);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&doubled, &r).unwrap(), si_snr(&r, &r).unwrap());
        assert!(si_snr(&r, &[0.0; 256]).is_err());
    }

    #[test]
    fn si_snr_floor_for_orthogonal_candidate() {
        let r = zero_mean(&noise(2, 128));
        let raw = zero_mean(&noise(3, 128));
        // Gram-Schmidt against the reference, then re-centre (the projection
        // of a zero-mean vector onto a zero-mean vector stays zero-mean).
        let k = dot(&raw, &r) / dot(&r, &r);
        let orth: Vec<f64> = raw.iter().zip(&r).map(|(a, b)| a - k * b).collect();
        assert!(dot(&orth, &r).abs() < 1e-10);
        assert_eq!(si_snr(&orth, &r).unwrap(), -40.0);
    }

    #[test]
    fn neg_mse_examples() {
        let x = noise(4, 50);
        assert_eq!(neg_mse(&x, &x), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.3).collect();
        assert!((neg_mse(&x, &shifted) + 0.09).abs() < 1e-12);
    }

    #[test]
    fn snr_metrics_fall_as_noise_grows() {
        let r: Vec<f64> = (0..512).map(|n| (n as f64 * 0.05).sin()).collect();
        let e = noise(5, 512);
        let mut last = (f64::INFINITY, f64::INFINITY);
        for gain in [0.1, 0.3, 1.0] {
            let c: Vec<f64> = r.iter().zip(&e).map(|(a, b)| a + gain * b).collect();
            let scores = (si_snr(&c, &r).unwrap(), seg_snr(&c, &r, 64).unwrap());
            assert!(scores.0 < last.0 && scores.1 < last.1, "gain {gain}: {scores:?}");
            last = scores;
        }
    }

    #[test]
    fn seg_snr_frame_checks() {
        let r = noise(6, 100);
        assert!(seg_snr(&r, &r, 101).is_err());
        assert!(seg_snr(&r, &r, 0).is_err());
        assert_eq!(seg_snr(&r, &r, 30).unwrap(), 35.0);
    }

    #[test]
    fn whole_signal_frame_is_global_snr() {
        let r = noise(7, 300);
        let c: Vec<f64> = r.iter().zip(noise(8, 300)).map(|(a, b)| a + 0.2 * b).collect();
        let direct = 10.0 * (dot(&r, &r) / r.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).log10();
        assert!((seg_snr(&c, &r, 300).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn parse_names() {
        assert_eq!("si_snr".parse::<MetricSpec>().unwrap(), MetricSpec::si_snr());
        assert_eq!(
            "seg_snr:32".parse::<MetricSpec>().unwrap().kind,
            MetricKind::SegSnr { frame: 32 }
        );
        assert_eq!("neg_mse".parse::<MetricSpec>().unwrap().name, "neg_mse");
        assert!("pesq".parse::<MetricSpec>().is_err());
        assert!("seg_snr:0".parse::<MetricSpec>().is_err());
        assert!("external: ".parse::<MetricSpec>().is_err());
    }

    #[cfg(unix)]
    #[test]
    fn external_scorer_contract() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let script = dir.path().join("score.sh");
        std::fs::write(&script, "#!/bin/sh\ntest -s \"$1\" && test -s \"$2\" && echo 2.5\n").unwrap();
        std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755)).unwrap();
        let m = MetricSpec::external(format!("{} {{candidate}} {{reference}}", script.display()));
        let x = noise(9, 64).iter().map(|v| 0.1 * v).collect::<Vec<_>>();
        assert_eq!(m.evaluate(&x, &x).unwrap(), 2.5);

        let bad = dir.path().join("bad.sh");
        std::fs::write(&bad, "#!/bin/sh\necho nope\n").unwrap();
        std::fs::set_permissions(&bad, std::fs::Permissions::from_mode(0o755)).unwrap();
        assert!(MetricSpec::external(bad.display().to_string())
            .evaluate(&x, &x)
            .is_err());

        let failing = dir.path().join("fail.sh");
        std::fs::write(&failing, "#!/bin/sh\necho 1.0\nexit 3\n").unwrap();
        std::fs::set_permissions(&failing, std::fs::Permissions::from_mode(0o755)).unwrap();
        assert!(MetricSpec::external(failing.display().to_string())
            .evaluate(&x, &x)
            .is_err());
    }

    proptest! {
        #[test]
        fn identity_is_a_local_maximum(seed in 0u64..500, scale in 1e-3f64..0.1) {
            let x: Vec<f64> = (0..128).map(|n| (n as f64 * 0.2).sin() + 0.3 * (n as f64 * 0.05).cos()).collect();
            let d: Vec<f64> = noise(seed, 128).iter().map(|v| scale * v).collect();
            let perturbed: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
            for m in [MetricSpec::si_snr(), MetricSpec::seg_snr(32), MetricSpec::neg_mse()] {
                let at = m.evaluate(&x, &x).unwrap();
                let near = m.evaluate(&perturbed, &x).unwrap();
                prop_assert!(at >= near, "{}: {} < {}", m.name, at, near);
            }
        }
    }
}
