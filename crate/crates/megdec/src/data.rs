//! Recordings, file formats, normalization, window extraction and the
//! synthetic MEG-like generator.
//!
//! A [`SessionRecording`] is one continuous 306-channel signal plus an event
//! table of (onset sample, phoneme id) pairs. Recordings serialize to the
//! MEGB binary format; datasets are described by a JSON manifest naming
//! session files and their train/validation role, plus a newline-delimited
//! phoneme vocabulary.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

pub const N_CHANNELS: usize = 306;
pub const N_CLASSES: usize = 39;
pub const WINDOW_LEN: usize = 125;
pub const SAMPLE_RATE_HZ: f64 = 250.0;
/// Maximum onset jitter in samples (±); window bounds are validated against
/// this value.
pub const JITTER_MAX: i64 = 3;

pub const MEGB_MAGIC: &[u8; 4] = b"MEGB";
pub const MEGB_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("megb file has bad magic bytes")]
    BadMagic,
    #[error("megb version {0} unsupported")]
    BadVersion(u32),
    #[error("file truncated or malformed")]
    Truncated,
    #[error("sample rate {0} Hz unsupported (this format version is fixed at 250 Hz)")]
    BadRate(f64),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("event onset {onset} out of range for {n_samples} samples (needs {margin} margin)")]
    EventOutOfRange {
        onset: usize,
        n_samples: usize,
        margin: usize,
    },
    #[error("window [{start}, {end}) out of bounds for {n_samples} samples")]
    WindowOutOfBounds {
        start: i64,
        end: i64,
        n_samples: usize,
    },
    #[error("invalid vocabulary: {0}")]
    BadVocab(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid synthesis spec: {0}")]
    BadSynthSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub onset: usize,
    pub phoneme_id: usize,
}

/// One continuous multichannel recording plus its event table. The signal is
/// stored row-major, `channels × n_samples`, in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionRecording {
    pub session_id: String,
    pub sample_rate_hz: f64,
    pub channels: usize,
    pub n_samples: usize,
    pub signal: Vec<f32>,
    pub events: Vec<Event>,
}

impl SessionRecording {
    /// Every onset must leave room for a full window under maximal jitter:
    /// `onset ≥ 3` and `onset + 3 + 125 ≤ n_samples`.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(DataError::BadRate(self.sample_rate_hz));
        }
        if self.channels != N_CHANNELS {
            return Err(DataError::InvalidRecording(format!(
                "expected {N_CHANNELS} channels, got {}",
                self.channels
            )));
        }
        if self.signal.len() != self.channels * self.n_samples {
            return Err(DataError::InvalidRecording(format!(
                "signal length {} does not match {}×{}",
                self.signal.len(),
                self.channels,
                self.n_samples
            )));
        }
        let margin = JITTER_MAX as usize + WINDOW_LEN;
        let mut prev: Option<usize> = None;
        for ev in &self.events {
            if ev.phoneme_id >= N_CLASSES {
                return Err(DataError::InvalidRecording(format!(
                    "phoneme id {} out of range",
                    ev.phoneme_id
                )));
            }
            if ev.onset < JITTER_MAX as usize || ev.onset + margin > self.n_samples {
                return Err(DataError::EventOutOfRange {
                    onset: ev.onset,
                    n_samples: self.n_samples,
                    margin,
                });
            }
            if let Some(p) = prev {
                if ev.onset <= p {
                    return Err(DataError::InvalidRecording(
                        "event onsets must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(ev.onset);
        }
        Ok(())
    }

    #[inline]
    pub fn channel(&self, ch: usize) -> &[f32] {
        &self.signal[ch * self.n_samples..(ch + 1) * self.n_samples]
    }
}

// ── MEGB binary format ───────────────────────────────────────────────
//
// magic "MEGB" | version u32 | channels u32 | samples u64 | sample_rate f64
// | event_count u64 | events (onset u64, phoneme u16)* | signal f32*
// (row-major, channels × samples). All integers and floats little-endian.

pub fn megb_write(path: &Path, rec: &SessionRecording) -> Result<(), DataError> {
    rec.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MEGB_MAGIC)?;
    w.write_u32::<LittleEndian>(MEGB_VERSION)?;
    w.write_u32::<LittleEndian>(rec.channels as u32)?;
    w.write_u64::<LittleEndian>(rec.n_samples as u64)?;
    w.write_f64::<LittleEndian>(rec.sample_rate_hz)?;
    w.write_u64::<LittleEndian>(rec.events.len() as u64)?;
    for ev in &rec.events {
        w.write_u64::<LittleEndian>(ev.onset as u64)?;
        w.write_u16::<LittleEndian>(ev.phoneme_id as u16)?;
    }
    let mut bytes = Vec::with_capacity(4 << 20);
    for chunk in rec.signal.chunks(1 << 20) {
        bytes.clear();
        for &v in chunk {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn megb_read(path: &Path) -> Result<SessionRecording, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| DataError::Truncated)?;
    if &magic != MEGB_MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != MEGB_VERSION {
        return Err(DataError::BadVersion(version));
    }
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let n_samples = r.read_u64::<LittleEndian>()? as usize;
    let sample_rate_hz = r.read_f64::<LittleEndian>()?;
    let n_events = r.read_u64::<LittleEndian>()? as usize;
    let mut events = Vec::with_capacity(n_events.min(1 << 20));
    for _ in 0..n_events {
        let onset = r.read_u64::<LittleEndian>()? as usize;
        let phoneme_id = r.read_u16::<LittleEndian>()? as usize;
        events.push(Event { onset, phoneme_id });
    }
    let total = channels
        .checked_mul(n_samples)
        .ok_or(DataError::Truncated)?;
    let mut signal = Vec::with_capacity(total);
    let mut chunk = vec![0u8; 4 << 20];
    let mut remaining = total * 4;
    while remaining > 0 {
        let take = remaining.min(chunk.len());
        r.read_exact(&mut chunk[..take])
            .map_err(|_| DataError::Truncated)?;
        for b in chunk[..take].chunks_exact(4) {
            signal.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        remaining -= take;
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(DataError::Truncated);
    }
    let rec = SessionRecording {
        session_id: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        sample_rate_hz,
        channels,
        n_samples,
        signal,
        events,
    };
    rec.validate()?;
    Ok(rec)
}

// ── Normalization and window extraction ──────────────────────────────

/// Z-score every channel over the session's full time axis (population
/// standard deviation, epsilon 1e-8). Events are unchanged.
pub fn session_normalize(rec: &mut SessionRecording) {
    let n = rec.n_samples;
    for ch in 0..rec.channels {
        let row = &mut rec.signal[ch * n..(ch + 1) * n];
        let mut sum = 0.0f64;
        for &v in row.iter() {
            sum += v as f64;
        }
        let mean = sum / n as f64;
        let mut ss = 0.0f64;
        for &v in row.iter() {
            let d = v as f64 - mean;
            ss += d * d;
        }
        let std = (ss / n as f64).sqrt();
        let inv = 1.0 / (std + 1e-8);
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Z-score each channel of one extracted/averaged window (population std,
/// epsilon 1e-8), in f64 accumulation.
pub fn window_normalize(features: &mut [f32]) {
    debug_assert_eq!(features.len(), N_CHANNELS * WINDOW_LEN);
    for ch in 0..N_CHANNELS {
        let row = &mut features[ch * WINDOW_LEN..(ch + 1) * WINDOW_LEN];
        let mut sum = 0.0f64;
        for &v in row.iter() {
            sum += v as f64;
        }
        let mean = sum / WINDOW_LEN as f64;
        let mut ss = 0.0f64;
        for &v in row.iter() {
            let d = v as f64 - mean;
            ss += d * d;
        }
        let inv = 1.0 / ((ss / WINDOW_LEN as f64).sqrt() + 1e-8);
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
    }
}

/// Copy the 125-sample window of all channels starting at `start`.
fn copy_window(rec: &SessionRecording, start: i64) -> Result<Vec<f32>, DataError> {
    let end = start + WINDOW_LEN as i64;
    if start < 0 || end > rec.n_samples as i64 {
        return Err(DataError::WindowOutOfBounds {
            start,
            end,
            n_samples: rec.n_samples,
        });
    }
    let (start, n) = (start as usize, rec.n_samples);
    let mut out = Vec::with_capacity(rec.channels * WINDOW_LEN);
    for ch in 0..rec.channels {
        out.extend_from_slice(&rec.signal[ch * n + start..ch * n + start + WINDOW_LEN]);
    }
    Ok(out)
}

/// Jitter-free window at the event onset.
pub fn extract_window(rec: &SessionRecording, onset: usize) -> Result<Vec<f32>, DataError> {
    copy_window(rec, onset as i64)
}

/// Window whose start is `onset + δ` with δ uniform over the integers
/// `[-jitter_max, +jitter_max]`.
pub fn extract_window_jittered(
    rec: &SessionRecording,
    onset: usize,
    jitter_max: i64,
    rng: &mut RngStream,
) -> Result<Vec<f32>, DataError> {
    let delta = rng.range_inclusive(-jitter_max, jitter_max);
    copy_window(rec, onset as i64 + delta)
}

// ── Vocabulary ───────────────────────────────────────────────────────

/// Ordered 39-phoneme inventory with a label→id map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

/// The 39-label ARPAbet-style inventory (lowercase, no stress marks).
pub const ARPABET39: [&str; 39] = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er", "ey", "f", "g", "hh",
    "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow", "oy", "p", "r", "s", "sh", "t", "th", "uh",
    "uw", "v", "w", "y", "z", "zh",
];

impl PhonemeVocab {
    pub fn arpabet39() -> Self {
        Self::from_labels(ARPABET39.iter().map(|s| s.to_string()).collect()).expect("canonical")
    }

    pub fn from_labels(labels: Vec<String>) -> Result<Self, DataError> {
        if labels.len() != N_CLASSES {
            return Err(DataError::BadVocab(format!(
                "expected {N_CLASSES} labels, got {}",
                labels.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(DataError::BadVocab(format!("duplicate label '{l}'")));
            }
        }
        Ok(PhonemeVocab { labels, index })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let labels: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::from_labels(labels)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        for l in &self.labels {
            writeln!(f, "{l}")?;
        }
        Ok(())
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

// ── Manifest ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionRole {
    Train,
    Validation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub path: PathBuf,
    pub role: SessionRole,
}

/// JSON document listing session files and their roles. Relative paths are
/// resolved against the manifest's own directory on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub vocab: PathBuf,
    pub sessions: Vec<SessionEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        if m.format_version != 1 {
            return Err(DataError::BadVersion(m.format_version));
        }
        if let Some(dir) = path.parent() {
            if m.vocab.is_relative() {
                m.vocab = dir.join(&m.vocab);
            }
            for s in &mut m.sessions {
                if s.path.is_relative() {
                    s.path = dir.join(&s.path);
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn paths_with_role(&self, role: SessionRole) -> Vec<&PathBuf> {
        self.sessions
            .iter()
            .filter(|s| s.role == role)
            .map(|s| &s.path)
            .collect()
    }
}

// ── Synthetic generator ──────────────────────────────────────────────

/// Synthesis parameters. `snr` is the window-level amplitude SNR; infinite
/// SNR means zero noise. Session indices continue from
/// `first_session_index`, so several calls with one seed share the class
/// templates while producing distinct sessions.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_sessions: usize,
    pub first_session_index: usize,
    pub events_per_class_per_session: usize,
    pub snr: f64,
    pub seed: u64,
    pub sample_rate_hz: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_sessions: 1,
            first_session_index: 0,
            events_per_class_per_session: 10,
            snr: 4.0,
            seed: 0,
            sample_rate_hz: SAMPLE_RATE_HZ,
        }
    }
}

/// Fixed per-class signature: unit-norm spatial pattern over the 306
/// channels and a Gabor burst template over the 125-sample window
/// (class-specific frequency 4–40 Hz, ~200 ms Gaussian envelope centered
/// 150 ms post-onset). Depends only on `(seed, class)`.
pub fn class_template(seed: u64, class: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = RngStream::substream(seed, "synth.templates", &[class as u64]);
    let mut spatial: Vec<f64> = (0..N_CHANNELS).map(|_| rng.normal()).collect();
    let norm = spatial.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut spatial {
        *v /= norm;
    }
    let freq = 4.0 + 36.0 * class as f64 / (N_CLASSES - 1) as f64;
    let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
    let center = 0.150;
    let sigma = 0.050;
    let temporal: Vec<f64> = (0..WINDOW_LEN)
        .map(|tau| {
            let t = tau as f64 / SAMPLE_RATE_HZ;
            let env = (-(t - center) * (t - center) / (2.0 * sigma * sigma)).exp();
            env * (2.0 * std::f64::consts::PI * freq * (t - center) + phase).cos()
        })
        .collect();
    (spatial, temporal)
}

/// Window-level rms of one class template over the full channel grid.
fn template_rms(spatial: &[f64], temporal: &[f64]) -> f64 {
    let ms_s = spatial.iter().map(|v| v * v).sum::<f64>() / spatial.len() as f64;
    let ms_t = temporal.iter().map(|v| v * v).sum::<f64>() / temporal.len() as f64;
    (ms_s * ms_t).sqrt()
}

pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<SessionRecording>, DataError> {
    if spec.n_sessions == 0 || spec.events_per_class_per_session == 0 {
        return Err(DataError::BadSynthSpec(
            "session and event counts must be positive".into(),
        ));
    }
    if spec.sample_rate_hz != SAMPLE_RATE_HZ {
        return Err(DataError::BadRate(spec.sample_rate_hz));
    }
    if !(spec.snr > 0.0) {
        // snr = ∞ is the zero-noise encoding; snr ≤ 0 has no noise scale
        return Err(DataError::BadSynthSpec(format!(
            "snr must be positive (or inf for noiseless), got {}",
            spec.snr
        )));
    }

    let templates: Vec<(Vec<f64>, Vec<f64>)> = (0..N_CLASSES)
        .map(|c| class_template(spec.seed, c))
        .collect();
    let mean_rms =
        templates.iter().map(|(s, t)| template_rms(s, t)).sum::<f64>() / N_CLASSES as f64;
    let noise_sigma = if spec.snr.is_infinite() {
        0.0
    } else {
        mean_rms / spec.snr
    };

    let mut sessions = Vec::with_capacity(spec.n_sessions);
    for si in 0..spec.n_sessions {
        let index = spec.first_session_index + si;
        sessions.push(synth_session(spec, index, &templates, noise_sigma)?);
    }
    Ok(sessions)
}

fn synth_session(
    spec: &SynthSpec,
    index: usize,
    templates: &[(Vec<f64>, Vec<f64>)],
    noise_sigma: f64,
) -> Result<SessionRecording, DataError> {
    let m = spec.events_per_class_per_session;
    let mut ev_rng = RngStream::substream(spec.seed, "synth.session.events", &[index as u64]);

    // shuffled class sequence, m of each
    let mut classes: Vec<usize> = (0..N_CLASSES).flat_map(|c| std::iter::repeat_n(c, m)).collect();
    for i in (1..classes.len()).rev() {
        let j = ev_rng.below(i as u64 + 1) as usize;
        classes.swap(i, j);
    }
    // onsets spaced ≥ 150 samples so windows never overlap
    let mut events = Vec::with_capacity(classes.len());
    let mut onset = 10usize;
    for &c in &classes {
        events.push(Event {
            onset,
            phoneme_id: c,
        });
        onset += 150 + ev_rng.below(11) as usize;
    }
    let n_samples = events.last().unwrap().onset + 160;

    let mut signal = vec![0.0f32; N_CHANNELS * n_samples];
    if noise_sigma > 0.0 {
        use rayon::prelude::*;
        signal
            .par_chunks_mut(n_samples)
            .enumerate()
            .for_each(|(ch, row)| {
                let mut rng = RngStream::substream(
                    spec.seed,
                    "synth.session.noise",
                    &[index as u64, ch as u64],
                );
                for v in row.iter_mut() {
                    *v = (noise_sigma * rng.normal()) as f32;
                }
            });
    }
    for ev in &events {
        let (spatial, temporal) = &templates[ev.phoneme_id];
        for (ch, &s) in spatial.iter().enumerate() {
            let row = &mut signal[ch * n_samples + ev.onset..ch * n_samples + ev.onset + WINDOW_LEN];
            for (v, &g) in row.iter_mut().zip(temporal) {
                *v += (s * g) as f32;
            }
        }
    }

    let rec = SessionRecording {
        session_id: format!("synthetic-{index:02}"),
        sample_rate_hz: spec.sample_rate_hz,
        channels: N_CHANNELS,
        n_samples,
        signal,
        events,
    };
    rec.validate()?;
    Ok(rec)
}
