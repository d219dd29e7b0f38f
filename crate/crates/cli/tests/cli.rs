use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[corpus]
phones = 3
speakers = 3
emotions = 2
utts_per_pair = 3
min_frames = 60
max_frames = 80

[cascade]
ling_hidden = 32
spk_bottleneck = 32
spk_td_width = 40
emo_td_width = 40

[[stages]]
name = "ling"
epochs = 2
frames_per_epoch = 1000

[[stages]]
name = "spk-idf"
epochs = 1
frames_per_epoch = 300

[[stages]]
name = "spk-cdf"
epochs = 1
frames_per_epoch = 300

[[stages]]
name = "emo-baseline"
epochs = 1
frames_per_epoch = 500

[[stages]]
name = "emo-ling-spk"
epochs = 1
frames_per_epoch = 500

[[stages]]
name = "recon"
epochs = 1
frames_per_epoch = 500

[eval]
enroll_seconds = 1.0
test_frames = [20]

[recon]
hidden = 16
layers = 2
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn cdf(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdf"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env("CDF_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], config: &Path) -> String {
    let out = cdf(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn conditioned_stage_before_its_prerequisite_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = cdf(&["train", "spk-cdf"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ling"), "{err}");
}

#[test]
fn evaluating_untrained_systems_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    for cmd in [&["eval-sid"][..], &["eval-aer"], &["reconstruct", "spk00_emo0_000"], &["extract", "ling"]] {
        let out = cdf(cmd, &cfg);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_input_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = cdf(&["train", "spk-xyz"], &cfg);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown stage"));

    let bad = write_config(dir.path(), "[corpus]\nspeekers = 2\n");
    let out = cdf(&["gen-corpus"], &bad);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("speekers"));

    let out = cdf(&["gen-corpus"], &dir.path().join("missing.toml"));
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(env!("CARGO_BIN_EXE_cdf")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corpus_generation_is_idempotent_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    ok(&["gen-corpus"], &cfg);
    let first = read_tree(&dir.path().join("corpus"));
    assert!(first.iter().any(|(p, _)| p.ends_with("manifest.tsv")));
    ok(&["gen-corpus"], &cfg);
    assert_eq!(first, read_tree(&dir.path().join("corpus")));

    let other = dir.path().join("other");
    let out = Command::new(env!("CARGO_BIN_EXE_cdf"))
        .args(["gen-corpus", "--seed", "6", "--out"])
        .arg(&other)
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_ne!(first, read_tree(&other.join("corpus")));
}

#[test]
fn featurize_writes_fbank_and_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let wavs = dir.path().join("wavs");
    std::fs::create_dir_all(&wavs).unwrap();
    let samples: Vec<f64> = (0..4000).map(|n| 0.3 * (n as f64 * 0.05).sin()).collect();
    let audio = cdf_core::dsp::AudioBuffer::new(samples, 8000).unwrap();
    cdf_core::dsp::write_wav(&wavs.join("tone.wav"), &audio).unwrap();
    ok(&["featurize", wavs.to_str().unwrap()], &cfg);
    let fbank = cdf_core::io::load_features(&dir.path().join("features/tone.fbank.cdfm")).unwrap();
    let spec = cdf_core::io::load_features(&dir.path().join("features/tone.spec.cdfm")).unwrap();
    assert_eq!(fbank.dim(), 40);
    assert_eq!(spec.dim(), 129);
    assert_eq!(fbank.frames(), 1 + (4000 - 200) / 80);

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_eq!(cdf(&["featurize", empty.to_str().unwrap()], &cfg).status.code(), Some(2));
}

#[test]
fn every_command_runs_on_a_tiny_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    ok(&["gen-corpus"], &cfg);
    for stage in ["ling", "spk-idf", "spk-cdf", "emo-baseline", "emo-ling-spk"] {
        ok(&["train", stage], &cfg);
        ok(&["extract", stage], &cfg);
    }
    ok(&["train", "recon"], &cfg);
    let results = dir.path().join("results");

    let sid = ok(&["eval-sid"], &cfg);
    assert!(sid.contains("spk-cdf C(1-20f)"), "{sid}");
    let report = std::fs::read_to_string(results.join("sid_report.csv")).unwrap();
    assert!(report.contains("metric,value\n"));
    assert!(report.contains("spk-idf/C(1-20f)/idr,"));

    ok(&["eval-aer"], &cfg);
    let report = std::fs::read_to_string(results.join("aer_report.csv")).unwrap();
    for row in ["emo-baseline/frame_acc,", "emo-ling-spk/utt_map,"] {
        assert!(report.contains(row), "{report}");
    }
    assert!(!report.contains("emo-ling/"));

    ok(&["reconstruct", "spk01_emo1_002"], &cfg);
    for panel in ["original", "reconstructed", "linguistic", "speaker", "emotion"] {
        let bytes = std::fs::read(results.join(format!("recon/spk01_emo1_002_{panel}.pgm"))).unwrap();
        assert!(bytes.starts_with(b"P5\n"));
    }
    let report = std::fs::read_to_string(results.join("recon/spk01_emo1_002_report.csv")).unwrap();
    assert!(report.contains("additivity_max_abs_error,0\n"), "{report}");
    assert_eq!(cdf(&["reconstruct", "nobody"], &cfg).status.code(), Some(2));

    for stage in ["ling", "spk-cdf", "emo-baseline"] {
        ok(&["project", stage], &cfg);
        let csv = std::fs::read_to_string(results.join(format!("project_{stage}.csv"))).unwrap();
        assert!(csv.starts_with("id,label,x,y\n"));
        assert!(csv.lines().count() > 3);
    }
    assert_eq!(cdf(&["project", "recon"], &cfg).status.code(), Some(2));
}
