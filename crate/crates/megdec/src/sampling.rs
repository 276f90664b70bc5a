//! Session-aware sample averaging.
//!
//! Validation uses a deterministic per-class count n' (capped at 100, n as-is
//! in [50, 100), 1.5n below 50); training adds controlled randomness (±5
//! jitter in the middle band, 2n below 50). Counts derive from n, the mean
//! number of events per session for the class. Averaged windows are z-scored
//! again per channel before use.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    extract_window, extract_window_jittered, DataError, PhonemeVocab, SessionRecording,
    N_CHANNELS, N_CLASSES, WINDOW_LEN,
};
use crate::rng::RngStream;

#[derive(Error, Debug)]
pub enum SamplingError {
    #[error("n must be non-negative, got {0}")]
    NegativeN(f64),
    #[error("no sessions provided")]
    EmptySessions,
    #[error("class {class} ('{label}') has no events in the training sessions")]
    ClassMissing { class: usize, label: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingOptions {
    /// Maximum onset jitter (±samples) for training windows.
    pub jitter_max: i64,
    /// Averaged samples built per class for validation.
    pub val_iterations: usize,
    /// Classes with fewer events than this are discarded from validation.
    pub val_min_events: usize,
    /// Restrict each training draw to a single session instead of pooling
    /// events across all training sessions.
    pub per_session_training_draws: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions {
            jitter_max: 3,
            val_iterations: 8,
            val_min_events: 8,
            per_session_training_draws: false,
        }
    }
}

// ── Per-class statistics ─────────────────────────────────────────────

/// Event counts per class over a session set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    pub total_events: Vec<usize>,
    pub n_sessions: usize,
}

impl ClassStats {
    pub fn compute(sessions: &[SessionRecording]) -> Self {
        let mut total_events = vec![0usize; N_CLASSES];
        for s in sessions {
            for ev in &s.events {
                total_events[ev.phoneme_id] += 1;
            }
        }
        ClassStats {
            total_events,
            n_sessions: sessions.len(),
        }
    }

    /// Mean number of events per session (real-valued).
    pub fn mean_per_session(&self, class: usize) -> f64 {
        self.total_events[class] as f64 / self.n_sessions as f64
    }
}

/// (session index, event index) pairs per class.
#[derive(Clone, Debug, Default)]
pub struct EventIndex {
    pub per_class: Vec<Vec<(usize, usize)>>,
}

impl EventIndex {
    pub fn build(sessions: &[SessionRecording]) -> Self {
        let mut per_class = vec![Vec::new(); N_CLASSES];
        for (si, s) in sessions.iter().enumerate() {
            for (ei, ev) in s.events.iter().enumerate() {
                per_class[ev.phoneme_id].push((si, ei));
            }
        }
        EventIndex { per_class }
    }
}

// ── Sampling rules ───────────────────────────────────────────────────

fn round_even(x: f64) -> i64 {
    x.round_ties_even() as i64
}

/// Deterministic validation count: 100 above 100, round(n) in [50, 100),
/// round(1.5·n) below 50; n = 100 closes to 100; at least 1. Rounding is
/// half-to-even.
pub fn n_prime_val(n: f64) -> Result<usize, SamplingError> {
    if n < 0.0 || !n.is_finite() {
        return Err(SamplingError::NegativeN(n));
    }
    let k = if n >= 100.0 {
        100
    } else if n >= 50.0 {
        round_even(n)
    } else {
        round_even(1.5 * n)
    };
    Ok(k.max(1) as usize)
}

/// Stochastic training count: 100 above 100, uniform in
/// [round(n)−5, min(round(n)+5, 100)] in [50, 100), round(2·n) below 50;
/// n = 100 closes to 100; at least 1.
pub fn n_prime_train(n: f64, rng: &mut RngStream) -> Result<usize, SamplingError> {
    if n < 0.0 || !n.is_finite() {
        return Err(SamplingError::NegativeN(n));
    }
    let k = if n >= 100.0 {
        100
    } else if n >= 50.0 {
        let r = round_even(n);
        rng.range_inclusive(r - 5, (r + 5).min(100))
    } else {
        round_even(2.0 * n)
    };
    Ok(k.max(1) as usize)
}

// ── Averaged samples ─────────────────────────────────────────────────

/// Mean of n' single-event windows of one phoneme class, re-normalized per
/// channel.
#[derive(Clone, Debug)]
pub struct AveragedSample {
    /// `306 × 125`, z-scored per channel.
    pub features: Vec<f32>,
    pub phoneme_id: usize,
    pub n_averaged: usize,
    /// Distinct session ids the drawn events came from.
    pub source_sessions: Vec<String>,
}

/// Average `k` windows drawn uniformly with replacement from the class's
/// events, then re-normalize. Jitter applies when `jitter_max > 0`.
pub(crate) fn build_averaged(
    sessions: &[SessionRecording],
    events: &[(usize, usize)],
    class: usize,
    k: usize,
    jitter_max: i64,
    rng: &mut RngStream,
) -> Result<AveragedSample, SamplingError> {
    debug_assert!(!events.is_empty());
    let mut acc = vec![0.0f64; N_CHANNELS * WINDOW_LEN];
    let mut session_seen = vec![false; sessions.len()];
    for _ in 0..k {
        let (si, ei) = events[rng.below(events.len() as u64) as usize];
        session_seen[si] = true;
        let rec = &sessions[si];
        let onset = rec.events[ei].onset;
        let w = if jitter_max > 0 {
            extract_window_jittered(rec, onset, jitter_max, rng)?
        } else {
            extract_window(rec, onset)?
        };
        for (a, &v) in acc.iter_mut().zip(&w) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / k as f64;
    let mut features: Vec<f32> = acc.into_iter().map(|v| (v * inv) as f32).collect();
    crate::data::window_normalize(&mut features);
    let source_sessions = session_seen
        .iter()
        .enumerate()
        .filter(|(_, &seen)| seen)
        .map(|(si, _)| sessions[si].session_id.clone())
        .collect();
    Ok(AveragedSample {
        features,
        phoneme_id: class,
        n_averaged: k,
        source_sessions,
    })
}

/// Classes dropped from validation, with the reason.
#[derive(Clone, Debug, Default)]
pub struct DiscardReport {
    pub entries: Vec<DiscardEntry>,
}

#[derive(Clone, Debug)]
pub struct DiscardEntry {
    pub class: usize,
    pub label: String,
    pub events: usize,
    pub reason: String,
}

impl std::fmt::Display for DiscardReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.entries.is_empty() {
            return writeln!(f, "no classes discarded");
        }
        writeln!(f, "{:<6} {:<8} {:>7}  reason", "class", "label", "events")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<6} {:<8} {:>7}  {}",
                e.class, e.label, e.events, e.reason
            )?;
        }
        Ok(())
    }
}

/// Deterministic validation set: for every class with at least
/// `val_min_events` events, `val_iterations` averaged samples, each the mean
/// of `n_prime_val(n)` jitter-free windows drawn with replacement from the
/// validation sessions. Classes below the floor land in the discard report.
pub fn build_validation_set(
    sessions: &[SessionRecording],
    vocab: &PhonemeVocab,
    seed: u64,
    opts: &SamplingOptions,
) -> Result<(Vec<AveragedSample>, DiscardReport), SamplingError> {
    if sessions.is_empty() {
        return Err(SamplingError::EmptySessions);
    }
    let stats = ClassStats::compute(sessions);
    let index = EventIndex::build(sessions);
    let mut samples = Vec::new();
    let mut report = DiscardReport::default();
    for class in 0..N_CLASSES {
        let events = &index.per_class[class];
        if events.len() < opts.val_min_events {
            report.entries.push(DiscardEntry {
                class,
                label: vocab.label(class).to_string(),
                events: events.len(),
                reason: format!("fewer than {} events", opts.val_min_events),
            });
            continue;
        }
        let k = n_prime_val(stats.mean_per_session(class))?;
        for iter in 0..opts.val_iterations {
            let mut rng =
                RngStream::substream(seed, "val.sample", &[class as u64, iter as u64]);
            samples.push(build_averaged(sessions, events, class, k, 0, &mut rng)?);
        }
    }
    Ok((samples, report))
}

/// Uniform class draw for one training sample.
pub fn draw_class(rng: &mut RngStream) -> usize {
    rng.below(N_CLASSES as u64) as usize
}

/// One freshly synthesized training sample: a uniformly drawn class,
/// `n_prime_train(n)` jittered windows drawn with replacement (pooled across
/// the training sessions unless per-session draws are configured), averaged
/// and re-normalized.
pub fn make_training_sample(
    sessions: &[SessionRecording],
    index: &EventIndex,
    stats: &ClassStats,
    vocab: &PhonemeVocab,
    opts: &SamplingOptions,
    rng: &mut RngStream,
) -> Result<AveragedSample, SamplingError> {
    if sessions.is_empty() {
        return Err(SamplingError::EmptySessions);
    }
    let class = draw_class(rng);
    let pooled = &index.per_class[class];
    if pooled.is_empty() {
        return Err(SamplingError::ClassMissing {
            class,
            label: vocab.label(class).to_string(),
        });
    }
    let k = n_prime_train(stats.mean_per_session(class), rng)?;
    if opts.per_session_training_draws {
        let mut with_class: Vec<usize> = pooled.iter().map(|&(si, _)| si).collect();
        with_class.dedup();
        let si = with_class[rng.below(with_class.len() as u64) as usize];
        let local: Vec<(usize, usize)> = pooled
            .iter()
            .copied()
            .filter(|&(s, _)| s == si)
            .collect();
        build_averaged(sessions, &local, class, k, opts.jitter_max, rng)
    } else {
        build_averaged(sessions, pooled, class, k, opts.jitter_max, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    #[test]
    fn validation_rule_paper_cases() {
        assert_eq!(n_prime_val(120.0).unwrap(), 100);
        assert_eq!(n_prime_val(60.0).unwrap(), 60);
        assert_eq!(n_prime_val(30.0).unwrap(), 45);
        assert_eq!(n_prime_val(100.0).unwrap(), 100);
        assert!(n_prime_val(-1.0).is_err());
    }

    #[test]
    fn training_rule_paper_cases() {
        let mut rng = RngStream::new(0, "nprime");
        assert_eq!(n_prime_train(30.0, &mut rng).unwrap(), 60);
        assert_eq!(n_prime_train(120.0, &mut rng).unwrap(), 100);
        assert_eq!(n_prime_train(100.0, &mut rng).unwrap(), 100);
        for _ in 0..200 {
            let v = n_prime_train(98.0, &mut rng).unwrap();
            assert!((93..=100).contains(&v), "{v}");
            let w = n_prime_train(60.0, &mut rng).unwrap();
            assert!((55..=65).contains(&w), "{w}");
        }
        assert!(n_prime_train(-0.5, &mut rng).is_err());
    }

    #[test]
    fn rules_match_piecewise_oracle_on_sweep() {
        // n ∈ {0.5, 1.0, …, 150.0}
        let mut rng = RngStream::new(5, "sweep");
        for i in 1..=300u32 {
            let n = i as f64 * 0.5;
            let val = n_prime_val(n).unwrap();
            let oracle_val = if n >= 100.0 {
                100
            } else if n >= 50.0 {
                (n.round_ties_even() as i64).max(1) as usize
            } else {
                ((1.5 * n).round_ties_even() as i64).max(1) as usize
            };
            assert_eq!(val, oracle_val, "n={n}");
            assert!(val <= 100);

            let train = n_prime_train(n, &mut rng).unwrap();
            assert!(train <= 100, "n={n} gave {train}");
            assert!(train >= 1);
            if n >= 100.0 {
                assert_eq!(train, 100);
            } else if n >= 50.0 {
                let r = n.round_ties_even() as i64;
                assert!((r - 5..=(r + 5).min(100)).contains(&(train as i64)), "n={n}");
            } else {
                assert_eq!(train, ((2.0 * n).round_ties_even() as i64).max(1) as usize);
            }
        }
    }

    #[test]
    fn rounding_is_half_to_even() {
        // 1.5·1 = 1.5 → 2, 1.5·3 = 4.5 → 4, 1.5·5 = 7.5 → 8
        assert_eq!(n_prime_val(1.0).unwrap(), 2);
        assert_eq!(n_prime_val(3.0).unwrap(), 4);
        assert_eq!(n_prime_val(5.0).unwrap(), 8);
        // middle band: 50.5 → 50, 51.5 → 52
        assert_eq!(n_prime_val(50.5).unwrap(), 50);
        assert_eq!(n_prime_val(51.5).unwrap(), 52);
    }

    #[test]
    fn training_band_covers_all_eleven_values() {
        let mut counts = [0usize; 11];
        let draws = 10_000;
        for i in 0..draws {
            let mut rng = RngStream::substream(3, "band-cover", &[i as u64]);
            let v = n_prime_train(60.0, &mut rng).unwrap();
            counts[v - 55] += 1;
        }
        let p = 1.0 / 11.0;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sigma,
                "value {} count {} vs {:.0}±{:.0}",
                55 + i,
                c,
                mean,
                sigma
            );
        }
    }

    #[test]
    fn class_draw_marginal_is_uniform() {
        let mut counts = [0usize; N_CLASSES];
        let draws = 100_000;
        for i in 0..draws {
            let mut rng = RngStream::substream(7, "train.sample", &[0, i as u64]);
            counts[draw_class(&mut rng)] += 1;
        }
        let p = 1.0 / N_CLASSES as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (c, &n) in counts.iter().enumerate() {
            assert!(
                (n as f64 - mean).abs() <= 3.0 * sigma,
                "class {c} count {n} vs {mean:.0}±{sigma:.0}"
            );
        }
    }

    fn small_synth(seed: u64, events_per_class: usize) -> Vec<SessionRecording> {
        synth_generate(&SynthSpec {
            n_sessions: 2,
            events_per_class_per_session: events_per_class,
            snr: 2.0,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn validation_set_has_eight_per_class_and_is_deterministic() {
        let sessions = small_synth(21, 5); // 10 events per class over 2 sessions
        let vocab = PhonemeVocab::arpabet39();
        let opts = SamplingOptions::default();
        let (samples, report) = build_validation_set(&sessions, &vocab, 9, &opts).unwrap();
        assert_eq!(samples.len(), 8 * N_CLASSES);
        assert!(report.entries.is_empty());
        let mut per_class = [0usize; N_CLASSES];
        for s in &samples {
            per_class[s.phoneme_id] += 1;
            // n = 5 → k = round(1.5·5) = 8 (half-to-even)
            assert_eq!(s.n_averaged, 8);
            assert_eq!(s.features.len(), N_CHANNELS * WINDOW_LEN);
        }
        assert!(per_class.iter().all(|&c| c == 8));

        let (again, _) = build_validation_set(&sessions, &vocab, 9, &opts).unwrap();
        for (a, b) in samples.iter().zip(&again) {
            assert_eq!(a.phoneme_id, b.phoneme_id);
            assert_eq!(a.source_sessions, b.source_sessions);
            assert!(a
                .features
                .iter()
                .zip(&b.features)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        // different seed draws differently
        let (other, _) = build_validation_set(&sessions, &vocab, 10, &opts).unwrap();
        assert!(samples
            .iter()
            .zip(&other)
            .any(|(a, b)| a.features != b.features));
    }

    #[test]
    fn sparse_class_is_discarded_and_reported() {
        let mut sessions = small_synth(22, 5);
        // strip class 0 down to 3 events total
        let mut kept = 0;
        for s in &mut sessions {
            s.events.retain(|e| {
                if e.phoneme_id == 0 {
                    kept += 1;
                    kept <= 3
                } else {
                    true
                }
            });
        }
        let vocab = PhonemeVocab::arpabet39();
        let (samples, report) =
            build_validation_set(&sessions, &vocab, 4, &SamplingOptions::default()).unwrap();
        assert_eq!(samples.len(), 8 * (N_CLASSES - 1));
        assert!(samples.iter().all(|s| s.phoneme_id != 0));
        assert_eq!(report.entries.len(), 1);
        assert_eq!(report.entries[0].class, 0);
        assert_eq!(report.entries[0].events, 3);
        let rendered = report.to_string();
        assert!(rendered.contains("aa"), "{rendered}");
    }

    #[test]
    fn averaging_identical_draws_equals_single_normalized_window() {
        let sessions = small_synth(23, 2);
        // single-event list forces every draw onto the same event
        let ev = (0usize, 0usize);
        let class = sessions[0].events[0].phoneme_id;
        let mut rng = RngStream::new(1, "avg-ident");
        let s = build_averaged(&sessions, &[ev], class, 12, 0, &mut rng).unwrap();
        let mut single = extract_window(&sessions[0], sessions[0].events[0].onset).unwrap();
        crate::data::window_normalize(&mut single);
        for (a, b) in s.features.iter().zip(&single) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert_eq!(s.n_averaged, 12);
        assert_eq!(s.source_sessions, vec!["synthetic-00".to_string()]);
    }

    #[test]
    fn training_sample_contracts() {
        let sessions = small_synth(24, 3); // n = 3 → k = 6
        let vocab = PhonemeVocab::arpabet39();
        let stats = ClassStats::compute(&sessions);
        let index = EventIndex::build(&sessions);
        let opts = SamplingOptions::default();
        let mut rng = RngStream::substream(11, "train.sample", &[0, 0]);
        let s =
            make_training_sample(&sessions, &index, &stats, &vocab, &opts, &mut rng).unwrap();
        assert_eq!(s.n_averaged, 6);
        // re-normalization: per-channel mean ≈ 0, std ≈ 1
        for ch in 0..N_CHANNELS {
            let row = &s.features[ch * WINDOW_LEN..(ch + 1) * WINDOW_LEN];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / WINDOW_LEN as f64;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                / WINDOW_LEN as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var.sqrt() - 1.0).abs() < 1e-5);
        }
        // per-session restriction keeps draws inside one session
        let restricted = SamplingOptions {
            per_session_training_draws: true,
            ..Default::default()
        };
        let mut rng = RngStream::substream(11, "train.sample", &[0, 1]);
        let s2 =
            make_training_sample(&sessions, &index, &stats, &vocab, &restricted, &mut rng)
                .unwrap();
        assert_eq!(s2.source_sessions.len(), 1);
    }

    #[test]
    fn missing_class_is_an_error() {
        let mut sessions = small_synth(25, 2);
        for s in &mut sessions {
            s.events.retain(|e| e.phoneme_id != 5);
        }
        let vocab = PhonemeVocab::arpabet39();
        let stats = ClassStats::compute(&sessions);
        let index = EventIndex::build(&sessions);
        let opts = SamplingOptions::default();
        // some draw eventually lands on class 5 and errors
        let mut hit = false;
        for i in 0..500 {
            let mut rng = RngStream::substream(2, "train.sample", &[0, i]);
            match make_training_sample(&sessions, &index, &stats, &vocab, &opts, &mut rng) {
                Err(SamplingError::ClassMissing { class: 5, .. }) => {
                    hit = true;
                    break;
                }
                Err(e) => panic!("unexpected error {e}"),
                Ok(_) => {}
            }
        }
        assert!(hit);
    }
}
