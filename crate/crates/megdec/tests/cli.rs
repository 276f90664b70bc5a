//! End-to-end checks of the command-line surface.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_megdec")
}

fn synth(dir: &Path, sessions: u32, events: u32, snr: &str, seed: u64) {
    let status = Command::new(bin())
        .args([
            "synth",
            "--sessions",
            &sessions.to_string(),
            "--events-per-class",
            &events.to_string(),
            "--snr",
            snr,
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn synth_writes_manifest_vocab_and_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    synth(&out, 3, 4, "4", 1);
    // N train + 2 validation sessions referenced by the manifest
    let manifest = megdec::data::DatasetManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.sessions.len(), 5);
    let trains = manifest
        .sessions
        .iter()
        .filter(|s| s.role == megdec::data::SessionRole::Train)
        .count();
    assert_eq!(trains, 3);
    for s in &manifest.sessions {
        assert!(s.path.exists(), "{} missing", s.path.display());
    }
    let vocab = megdec::data::PhonemeVocab::load(&manifest.vocab).unwrap();
    assert_eq!(vocab.labels().len(), 39);
}

#[test]
fn synth_is_byte_deterministic_and_snr_scales_noise() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, 1, 2, "2", 9);
    synth(&b, 1, 2, "2", 9);
    let fa = std::fs::read(a.join("train_00.megb")).unwrap();
    let fb = std::fs::read(b.join("train_00.megb")).unwrap();
    assert_eq!(fa, fb, "same seed must produce identical bytes");

    // lower SNR → more noise → higher total signal power
    let noisy_dir = dir.path().join("noisy");
    let clean_dir = dir.path().join("clean");
    synth(&noisy_dir, 1, 2, "0.5", 9);
    synth(&clean_dir, 1, 2, "4", 9);
    let power = |p: &Path| -> f64 {
        let rec = megdec::data::megb_read(p).unwrap();
        rec.signal.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / rec.signal.len() as f64
    };
    let p_noisy = power(&noisy_dir.join("train_00.megb"));
    let p_clean = power(&clean_dir.join("train_00.megb"));
    assert!(
        p_noisy > 4.0 * p_clean,
        "snr 0.5 power {p_noisy:.4e} should dwarf snr 4 power {p_clean:.4e}"
    );
}

#[test]
fn train_smoke_completes_quickly_with_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 4, "4", 2);
    let out = dir.path().join("out");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "model": {{ "d": 16, "n_multiscale_blocks": 2, "n_bm_blocks": 1 }},
  "train": {{ "epochs": 2, "batch_size": 16, "samples_per_epoch": 64, "seed": 1 }},
  "manifest": "{}",
  "out_dir": "{}"
}}"#,
            data.join("manifest.json").display(),
            out.display()
        ),
    )
    .unwrap();
    let t0 = Instant::now();
    let output = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(t0.elapsed().as_secs() < 60, "tiny training took {:?}", t0.elapsed());
    for f in ["checkpoint.mebm", "history.csv", "report.json", "discarded_classes.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_f1_macro,val_top3,val_top5\n"));
    assert_eq!(history.lines().count(), 3); // header + 2 epochs
}

#[test]
fn train_missing_manifest_exits_2_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{ "manifest": "/nonexistent/manifest.json", "out_dir": "out" }"#,
    )
    .unwrap();
    let output = Command::new(bin())
        .args(["train", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("/nonexistent/manifest.json"),
        "stderr must name the path: {stderr}"
    );
}

#[test]
fn ablate_produces_five_row_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2, 4, "4", 4);
    let out = dir.path().join("out");
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        format!(
            r#"{{
  "model": {{ "d": 12, "n_multiscale_blocks": 2, "n_bm_blocks": 1 }},
  "train": {{ "epochs": 1, "batch_size": 16, "samples_per_epoch": 32 }},
  "manifest": "{}",
  "out_dir": "{}"
}}"#,
            data.join("manifest.json").display(),
            out.display()
        ),
    )
    .unwrap();
    let output = Command::new(bin())
        .args(["ablate", "--config"])
        .arg(&config)
        .args(["--seeds", "0..1"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let table = String::from_utf8_lossy(&output.stdout);
    for row in [
        "Full Model",
        "w/o Weighted Loss",
        "w/o Multi-scale Conv",
        "w/o BM Encoder",
        "w/o Conv. Attention",
    ] {
        assert!(table.contains(row), "missing row '{row}' in:\n{table}");
    }
    // cells are percent mean±std with two decimals
    let plus_minus = table.matches('±').count();
    assert!(plus_minus >= 15, "expected 5×3 ± cells, got {plus_minus}");
    assert!(out.join("ablation.txt").exists());
    assert!(out.join("ablation.json").exists());
}

#[test]
fn gradcheck_command_passes_on_fresh_build() {
    let output = Command::new(bin()).arg("gradcheck").output().unwrap();
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    // report lists per-op max relative errors
    assert!(stdout.contains("max rel err"));
    assert!(stdout.contains("conv1d"));
    assert!(stdout.contains("model_params_train"));
    assert!(stdout.contains("all") && stdout.contains("passed"));
}
