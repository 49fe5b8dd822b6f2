//! End-to-end tests driving the compiled `maxnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maxnet::checkpoint;
use maxnet::data::{write_idx_images, write_idx_labels};
use maxnet::network::{MaxoutNetwork, NetworkConfig};
use maxnet::seeding::{stream_rng, STREAM_DATA, STREAM_INIT};
use maxnet::tensor::Matrix;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_maxnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary should launch")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("process should not be signalled")
}

/// Pull `key=value` out of a machine-readable summary line.
fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")[..]))
        .unwrap_or_else(|| panic!("no field {key} in: {line}"))
}

fn machine_line<'a>(text: &'a str, prefix: &str) -> &'a str {
    text.lines()
        .find(|l| l.starts_with(prefix))
        .unwrap_or_else(|| panic!("no {prefix} line in:\n{text}"))
}

fn xor_config(out_dir: &Path) -> String {
    format!(
        r#"
seed = 7
out_dir = "{}"
precision = "f64"
log_wall_time = false

[data]
source = "xor"
toy_n = 8

[model]
input_width = 2
hidden_widths = [8]
pool_size = 2
output_classes = 2

[dropout]
input_keep = 1.0
hidden_keep = 1.0

[optimizer]
batch_size = 4
base_lr = 0.5
lr_decay = 1.0
momentum_start = 0.5
momentum_end = 0.9
momentum_ramp_epochs = 10
max_norm = 0.0

[protocol]
patience = 30
max_epochs_phase1 = 300
max_epochs_phase2 = 300
"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Runs an XOR training job and returns its run directory.
fn train_xor(tmp: &Path) -> PathBuf {
    let cfg = write_config(tmp, "xor.toml", &xor_config(&tmp.join("runs")));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let line = machine_line(&stdout(&out), "RESULT ").to_owned();
    PathBuf::from(field(&line, "run_dir"))
}

#[test]
fn train_xor_solves_and_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "xor.toml", &xor_config(&tmp.path().join("runs")));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));

    let text = stdout(&out);
    let line = machine_line(&text, "RESULT ");
    assert_eq!(field(line, "phase2"), "crossed");
    assert_eq!(field(line, "test_errors"), "0");
    let run_dir = PathBuf::from(field(line, "run_dir"));
    for name in [
        "config.toml",
        "metrics.csv",
        "report.txt",
        "phase1-best.ckpt",
        "final.ckpt",
        "toy-test-images.idx3",
        "toy-test-labels.idx1",
    ] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("phase,epoch,train_mean_ll,"));
    assert!(metrics.lines().count() > 2);
}

#[test]
fn rerun_from_effective_config_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let first = train_xor(tmp.path());
    let saved = first.join("config.toml");
    let out = run(&["train", "--config", saved.to_str().unwrap(), "--quiet"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let second = PathBuf::from(field(machine_line(&stdout(&out), "RESULT "), "run_dir"));
    assert_ne!(first, second);
    for name in ["metrics.csv", "final.ckpt", "phase1-best.ckpt"] {
        let a = fs::read(first.join(name)).unwrap();
        let b = fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn eval_round_trips_the_emitted_test_set() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_xor(tmp.path());
    let report = fs::read_to_string(run_dir.join("report.txt")).unwrap();
    assert!(report.contains("test: 0 errors"));

    let out = run(&[
        "eval",
        "--checkpoint",
        run_dir.join("final.ckpt").to_str().unwrap(),
        "--images",
        run_dir.join("toy-test-images.idx3").to_str().unwrap(),
        "--labels",
        run_dir.join("toy-test-labels.idx1").to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let line = machine_line(&text, "EVAL ");
    assert_eq!(field(line, "errors"), "0");
    assert_eq!(field(line, "n"), "4");
}

#[test]
fn invalid_config_fails_with_exit_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "seed = 1\n[model]\ninput_width = 0\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("input_width"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo.toml", "seed = 1\nlerning_rate = 0.1\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("lerning_rate"), "stderr: {}", stderr(&out));
}

#[test]
fn missing_seed_fails_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "noseed.toml", "[data]\nsource = \"xor\"\n");
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("seed"), "stderr: {}", stderr(&out));
}

#[test]
fn truncated_checkpoint_fails_with_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = train_xor(tmp.path());
    let bytes = fs::read(run_dir.join("final.ckpt")).unwrap();
    let trunc = tmp.path().join("trunc.ckpt");
    fs::write(&trunc, &bytes[..bytes.len() / 2]).unwrap();
    let out = run(&[
        "eval",
        "--checkpoint",
        trunc.to_str().unwrap(),
        "--images",
        run_dir.join("toy-test-images.idx3").to_str().unwrap(),
        "--labels",
        run_dir.join("toy-test-labels.idx1").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("length error"), "stderr: {}", stderr(&out));
}

#[test]
fn make_fixtures_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = run(&["make-fixtures", "--out", dir.to_str().unwrap()]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?} differs between invocations"
        );
    }
}

#[test]
fn gradcheck_passes_from_a_minimal_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gc.toml", "seed = 11\n");
    let out = run(&["gradcheck", "--config", cfg.to_str().unwrap(), "--quiet"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let line = machine_line(&text, "GRADCHECK ");
    assert_eq!(field(line, "status"), "pass");
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "xor.toml", &xor_config(&tmp.path().join("runs")));
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--seed", "9", "--quiet"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let run_dir = field(machine_line(&stdout(&out), "RESULT "), "run_dir").to_owned();
    assert!(run_dir.ends_with("seed9") || run_dir.contains("seed9-"), "{run_dir}");
    let saved = fs::read_to_string(Path::new(&run_dir).join("config.toml")).unwrap();
    assert!(saved.contains("seed = 9"));
}

/// A freshly initialized 10-class network knows nothing, so on a label
/// distribution that is exactly uniform its error rate must sit near 90%.
#[test]
fn untrained_network_scores_at_chance_on_uniform_labels() {
    use rand::Rng;

    let tmp = tempfile::tempdir().unwrap();
    let mut net = MaxoutNetwork::<f32>::new(NetworkConfig::mnist_default()).unwrap();
    let mut rng = stream_rng(40, STREAM_INIT);
    net.init_params(&mut rng);
    let ckpt = tmp.path().join("random.ckpt");
    checkpoint::save(&net, &ckpt).unwrap();

    let n = 4500usize;
    let mut data_rng = stream_rng(40, STREAM_DATA);
    let images = Matrix::<f32>::from_fn(n, 784, |_, _| data_rng.gen::<f32>());
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let images_path = tmp.path().join("images.idx3");
    let labels_path = tmp.path().join("labels.idx1");
    write_idx_images(&images_path, &images, 28, 28).unwrap();
    write_idx_labels(&labels_path, &labels).unwrap();

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--images",
        images_path.to_str().unwrap(),
        "--labels",
        labels_path.to_str().unwrap(),
        "--quiet",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let rate: f64 = field(machine_line(&text, "EVAL "), "error_rate")
        .parse()
        .unwrap();
    assert!((0.87..=0.93).contains(&rate), "error rate {rate}");
}
