use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn simlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn simlab")
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> String {
    repo().join("configs/mnist-desk.toml").display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(simlab(&["--help"]).status.code(), Some(0));
    assert_eq!(simlab(&[]).status.code(), Some(1));
    assert_eq!(simlab(&["frobnicate", "x.toml"]).status.code(), Some(1));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let out = simlab(&["plan", "/nonexistent/simlab.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn bad_configs_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write(dir.path(), "unknown.toml", "seeds = [0]\nlearning_rate = 3\n");
    assert_eq!(simlab(&["plan", &unknown]).status.code(), Some(1));

    let missing_data = write(
        dir.path(),
        "missing.toml",
        "[dataset]\nimages = \"nope-images.gz\"\nlabels = \"nope-labels.gz\"\n",
    );
    let out = simlab(&["plan", &missing_data]);
    assert_eq!(out.status.code(), Some(1));

    let bad_range = write(dir.path(), "range.toml", "[train]\nlearning_rate = -1.0\n");
    assert_eq!(simlab(&["base", &bad_range]).status.code(), Some(1));
}

#[test]
fn plan_prints_every_seed() {
    let out = simlab(&["plan", &desk_config(), "--seeds", "1,2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("seed 1\nbase ["));
    assert!(text.contains("\nseed 2\nbase ["));
    // the desk config limits the schedule to three sessions
    assert_eq!(text.matches("session ").count(), 6);
    assert!(text.contains("session 3 class "));
    assert!(!text.contains("session 4 class "));
}

#[test]
fn report_on_empty_output_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let out = simlab(&["report", &desk_config(), "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sessions.csv")).unwrap();
    assert_eq!(
        csv,
        "strategy,loss,dataset,seed,session,classes_seen,alpha_base,alpha_new,alpha_all\n"
    );
    assert!(out_dir.join("omega.csv").exists());
    assert!(out_dir.join("base_map.svg").exists());
}
