use std::path::Path;
use std::process::{Command, Output};

/// Runs the binary in `dir` with whitespace-separated `args`.
fn mose(dir: &Path, args: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mose"))
        .current_dir(dir)
        .args(args.split_whitespace())
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &str) -> String {
    let out = mose(dir, args);
    assert!(
        out.status.success(),
        "`{args}` failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY: &str = "n_total = 30\nn_th = 15\nbatch = 2\nchannels = 8\nblocks = 2\nlr_d_phase1 = 1e-3\nlr_v = 1e-3\n";

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    ok(dir.path(), "synth --out train --utterances 6 --len 96 --seed 1");
    ok(
        dir.path(),
        "synth --out test --split test --utterances 10 --len 96 --seed 2",
    );
    dir
}

#[test]
fn selfcheck_passes_and_reports_groups() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), "selfcheck --out sc");
    assert!(stdout.contains("7/7 property groups passed"), "{stdout}");
    assert!(dir.path().join("sc/selfcheck.csv").exists());
    assert!(dir.path().join("sc/run.toml").exists());
}

#[test]
fn train_eval_pipeline_emits_alpha_table() {
    let ws = workspace();
    let d = ws.path();
    for (alpha, out) in [("0", "m0"), ("1", "m1")] {
        ok(
            d,
            &format!("train --corpus train --config tiny.toml --alpha {alpha} --seed 3 --out {out}"),
        );
        let manifest = std::fs::read_to_string(d.join(out).join("run.toml")).unwrap();
        assert!(
            manifest.contains("seed = 3") && manifest.contains("binary_sha256"),
            "{manifest}"
        );
    }
    let stdout = ok(d, "eval --corpus test --model m0 --model m1 --out ev");
    assert!(stdout.contains("unprocessed") && stdout.contains("m1"), "{stdout}");
    let report = std::fs::read_to_string(d.join("ev/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "system,alpha,metric,mean,std,n");
    assert_eq!(lines.len(), 1 + 3 * 3);
    assert!(lines.iter().any(|l| l.starts_with("m0,0.0,si_snr,")), "{report}");
    assert!(lines.iter().any(|l| l.starts_with("m1,1.0,si_snr,")), "{report}");

    let stdout = ok(d, "mismatch --corpus test --elbo m0 --model m1 --out mm");
    assert!(stdout.contains("10 utterances"), "{stdout}");
    assert_eq!(
        std::fs::read_to_string(d.join("mm/mismatch.csv"))
            .unwrap()
            .lines()
            .count(),
        11
    );
}

#[test]
fn enhance_full_and_fast_keep_length() {
    let ws = workspace();
    let d = ws.path();
    ok(d, "train --corpus train --config tiny.toml --out m");
    let input = "test/noisy/test_00000.wav";
    ok(d, &format!("enhance --model m --fast-schedule full --out full {input}"));
    ok(
        d,
        &format!("enhance --model m --fast-schedule 1e-4,1e-3,0.01,0.05,0.2,0.35 --out fast {input}"),
    );
    let read = |p: &str| {
        hound::WavReader::open(d.join(p))
            .unwrap()
            .into_samples::<i16>()
            .collect::<Result<Vec<_>, _>>()
            .unwrap()
    };
    let n = read(input).len();
    assert_eq!(read("full/test_00000.wav").len(), n);
    assert_eq!(read("fast/test_00000.wav").len(), n);
    assert_ne!(read("full/test_00000.wav"), read("fast/test_00000.wav"));
}

#[test]
fn interrupted_training_resumes_to_identical_files() {
    let ws = workspace();
    let d = ws.path();
    ok(d, "train --corpus train --config tiny.toml --out whole");
    ok(d, "train --corpus train --config tiny.toml --out split --stop-at 20");
    ok(d, "train --corpus train --config tiny.toml --out split --resume");
    for f in [
        "diffusion.f32",
        "value.f32",
        "adam_d.f64",
        "adam_v.f64",
        "telemetry.csv",
        "checkpoint.toml",
    ] {
        assert_eq!(
            std::fs::read(d.join("whole").join(f)).unwrap(),
            std::fs::read(d.join("split").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn exit_codes_by_failure_class() {
    let ws = workspace();
    let d = ws.path();
    // Existing output without --force.
    assert_eq!(code(&mose(d, "synth --out train")), 2);
    assert_eq!(code(&mose(d, "train --corpus train --metric pesq --out x")), 2);
    assert_eq!(code(&mose(d, "train --corpus missing --out x")), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_mose"))
        .current_dir(d)
        .env("MOSE_THREADS", "zero")
        .arg("selfcheck")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    std::fs::write(
        d.join("wild.toml"),
        format!("{TINY}lr_d_phase1 = 50.0\nguard_window = 2\n").replace("lr_d_phase1 = 1e-3\n", ""),
    )
    .unwrap();
    assert_eq!(code(&mose(d, "train --corpus train --config wild.toml --out w")), 4);
    assert!(d.join("w/checkpoint.toml").exists());

    assert_eq!(code(&mose(d, "synth --out train --force --utterances 2 --len 96")), 0);
}
