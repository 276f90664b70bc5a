//! Cross-module behavior on synthetic data: averaging physics, training
//! progress, and the corrupted-gradient negative control.

use megdec::cli::full_gradcheck_report;
use megdec::data::{
    class_template, extract_window, synth_generate, PhonemeVocab, SynthSpec, N_CHANNELS,
    WINDOW_LEN,
};
use megdec::model::ModelConfig;
use megdec::train::{fit_sessions, TrainConfig};

/// Averaging k event windows of one class suppresses noise ~√k.
#[test]
fn averaging_raises_snr_like_sqrt_k() {
    let seed = 71;
    let rec = &synth_generate(&SynthSpec {
        n_sessions: 1,
        events_per_class_per_session: 64,
        snr: 1.0,
        seed,
        ..Default::default()
    })
    .unwrap()[0];

    let class = 0usize;
    let events: Vec<usize> = rec
        .events
        .iter()
        .filter(|e| e.phoneme_id == class)
        .map(|e| e.onset)
        .collect();
    assert!(events.len() >= 64);
    let (spatial, temporal) = class_template(seed, class);
    let clean: Vec<f64> = (0..N_CHANNELS * WINDOW_LEN)
        .map(|i| spatial[i / WINDOW_LEN] * temporal[i % WINDOW_LEN])
        .collect();
    let clean_rms =
        (clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64).sqrt();

    let snr_of_mean = |k: usize| -> f64 {
        let mut acc = vec![0.0f64; N_CHANNELS * WINDOW_LEN];
        for &onset in &events[..k] {
            let w = extract_window(rec, onset).unwrap();
            for (a, &v) in acc.iter_mut().zip(&w) {
                *a += v as f64;
            }
        }
        let inv = 1.0 / k as f64;
        let noise_ms = acc
            .iter()
            .zip(&clean)
            .map(|(a, c)| {
                let n = a * inv - c;
                n * n
            })
            .sum::<f64>()
            / acc.len() as f64;
        clean_rms / noise_ms.sqrt()
    };

    let snr1 = snr_of_mean(1);
    for k in [4usize, 16, 64] {
        let ratio = snr_of_mean(k) / snr1;
        let expected = (k as f64).sqrt();
        assert!(
            (ratio - expected).abs() / expected <= 0.25,
            "k={k}: ratio {ratio:.2} vs √k {expected:.2}"
        );
    }
}

/// Loss falls over the first epochs on learnable synthetic data.
#[test]
fn training_loss_decreases_on_synthetic_data() {
    let train = synth_generate(&SynthSpec {
        n_sessions: 2,
        events_per_class_per_session: 4,
        snr: 4.0,
        seed: 72,
        ..Default::default()
    })
    .unwrap();
    let val = synth_generate(&SynthSpec {
        n_sessions: 1,
        first_session_index: 2,
        events_per_class_per_session: 8,
        snr: 4.0,
        seed: 72,
        ..Default::default()
    })
    .unwrap();
    let vocab = PhonemeVocab::arpabet39();
    let model_cfg = ModelConfig {
        d: 16,
        n_multiscale_blocks: 2,
        n_bm_blocks: 1,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 5,
        batch_size: 32,
        samples_per_epoch: 128,
        seed: 3,
        ..Default::default()
    };
    let result =
        fit_sessions::<f32>(train, val, &vocab, model_cfg, train_cfg, |_| {}).unwrap();
    assert_eq!(result.history.len(), 5);
    let first = result.history[0].train_loss;
    let fifth = result.history[4].train_loss;
    assert!(
        fifth < first,
        "epoch 5 loss {fifth:.4} not below epoch 1 loss {first:.4}"
    );
}

/// The verification machinery itself must catch a broken backward pass.
#[test]
fn corrupted_backward_is_reported_by_name() {
    let report = full_gradcheck_report(123, Some("conv1d"));
    assert!(!report.all_passed());
    let failures = report.failures();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].name, "conv1d");
    assert!(report.to_table().contains("FAIL"));
}
