use std::path::Path;
use std::process::{Command, Output};

fn dreamforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dreamforge"))
        .args(args)
        .env_remove("DREAMFORGE_LLM_URL")
        .env_remove("DREAMFORGE_LAYOUT2IMAGE_URL")
        .env_remove("DREAMFORGE_MASKGEN_URL")
        .env_remove("DREAMFORGE_SCORER_URL")
        .env_remove("DREAMFORGE_EMBED_URL")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: serde_json::Value) -> String {
    let mut config = serde_json::json!({
        "seed": 5,
        "workdir": "work",
        "train_classes": ["dog", "cat", "car", "chair"],
        "layouts": {"count": 12},
        "training": {"steps": 6, "stub_real_images": 20}
    });
    for (k, v) in extra.as_object().unwrap() {
        config[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_validate_train_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));

    let out = dreamforge(&["synth", "--config", &config, "--stop-after", "images"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("stopped after stage images"));

    let out = dreamforge(&["synth", "--config", &config, "--resume"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("dataset written to"));

    let dataset = dir.path().join("work/dataset");
    let out = dreamforge(&["validate", "--dataset", dataset.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).starts_with("valid: "));

    let out = dreamforge(&["train-sim", "--config", &config, "--lambda", "0.4", "--steps", "4"]);
    assert!(out.status.success(), "{out:?}");
    assert!(stdout(&out).contains("4 steps at lambda 0.4"));

    let manifest = dir.path().join("work/manifest.json");
    let out = dreamforge(&["report", "--manifest", manifest.to_str().unwrap()]);
    assert!(out.status.success(), "{out:?}");
    let md = stdout(&out);
    assert!(md.contains("## Gates") && md.contains("## Training simulation"));
    assert!(dir.path().join("work/reports/loss_curve.csv").exists());
}

#[test]
fn seed_override_changes_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    assert!(dreamforge(&["synth", "--config", &config]).status.success());
    let a = std::fs::read(dir.path().join("work/dataset/checksums.json")).unwrap();
    assert!(dreamforge(&["synth", "--config", &config, "--seed", "6"]).status.success());
    let b = std::fs::read(dir.path().join("work/dataset/checksums.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), serde_json::json!({"vocabulary": {"tau_dedup": 1.5}}));
    assert_eq!(dreamforge(&["synth", "--config", &bad]).status.code(), Some(2));
    let unknown = write_config(dir.path(), serde_json::json!({"colour": "blue"}));
    assert_eq!(dreamforge(&["synth", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(dreamforge(&["synth", "--config", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn unreachable_provider_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = write_config(
        dir.path(),
        serde_json::json!({
            "providers": {
                "endpoints": {"llm": {"base_url": format!("http://127.0.0.1:{port}"), "timeout_secs": 2}},
                "retry": {"retries": 0, "base_delay_ms": 0, "max_delay_ms": 0}
            }
        }),
    );
    let out = dreamforge(&["synth", "--config", &config]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn train_without_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    let out = dreamforge(&["train-sim", "--config", &config]);
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}

#[test]
fn tampered_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    assert!(dreamforge(&["synth", "--config", &config]).status.success());
    let index = std::fs::read_dir(dir.path().join("work/dataset"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap() != "checksums.json")
        .unwrap();
    let mut bytes = std::fs::read(&index).unwrap();
    bytes.push(b'\n');
    std::fs::write(&index, bytes).unwrap();
    let out = dreamforge(&["validate", "--dataset", dir.path().join("work/dataset").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{out:?}");
}

#[test]
fn report_needs_a_manifest_file() {
    assert_eq!(dreamforge(&["report", "--manifest", "/nonexistent/manifest.json"]).status.code(), Some(2));
}
