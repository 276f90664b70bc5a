//! Training: weighted cross-entropy, AdamW with decoupled weight decay, and
//! the epoch loop over freshly synthesized averaged samples.
//!
//! Every batch is built from per-sample RNG streams keyed by
//! (seed, epoch, sample index), so parallel batch construction equals
//! sequential construction exactly and two runs with one seed produce
//! bitwise-identical histories.

use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    session_normalize, DataError, DatasetManifest, PhonemeVocab, SessionRecording, SessionRole,
    N_CHANNELS, N_CLASSES, WINDOW_LEN,
};
use crate::metrics::{MetricsError, MetricsReport};
use crate::model::{AblationFlags, Model, ModelConfig, ModelError};
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::sampling::{
    build_validation_set, make_training_sample, AveragedSample, ClassStats, DiscardReport,
    EventIndex, SamplingError, SamplingOptions,
};
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tape, Tensor, TensorError};

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("class '{0}' has no events in the training sessions")]
    MissingClass(String),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("empty evaluation input")]
    EmptyEvaluation,
}

// ── Loss weights ─────────────────────────────────────────────────────

/// Per-class cross-entropy weights keyed by phoneme label.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    weights: Vec<f64>,
}

/// The ten specially weighted phonemes; every other class weighs 1.0.
pub const DEFAULT_WEIGHTED_PHONEMES: [(&str, f64); 10] = [
    ("ey", 0.05),
    ("ay", 3.00),
    ("uh", 10.00),
    ("uw", 3.00),
    ("s", 0.80),
    ("sh", 3.00),
    ("m", 3.00),
    ("ae", 3.00),
    ("jh", 1.50),
    ("ah", 2.00),
];

impl LossWeights {
    /// Default weight table aligned to `vocab`.
    pub fn default_for(vocab: &PhonemeVocab) -> Self {
        let mut weights = vec![1.0f64; N_CLASSES];
        for (label, w) in DEFAULT_WEIGHTED_PHONEMES {
            let id = vocab
                .id(label)
                .unwrap_or_else(|| panic!("vocabulary lacks weighted phoneme '{label}'"));
            weights[id] = w;
        }
        LossWeights { weights }
    }

    pub fn uniform() -> Self {
        LossWeights {
            weights: vec![1.0; N_CLASSES],
        }
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

// ── Config ───────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub samples_per_epoch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ablation: AblationFlags,
    pub sampling: SamplingOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 80,
            lr: 1e-3,
            batch_size: 256,
            samples_per_epoch: 40_000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            ablation: AblationFlags::default(),
            sampling: SamplingOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.samples_per_epoch < self.batch_size {
            return Err(TrainError::BadConfig(
                "epochs, batch_size positive and samples_per_epoch ≥ batch_size".into(),
            ));
        }
        if self.lr <= 0.0 || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::BadConfig("bad optimizer hyperparameters".into()));
        }
        Ok(())
    }

    /// Full batches per epoch; the fractional remainder is dropped (the
    /// default 40,000/256 gives 156 batches = 39,936 samples).
    pub fn batches_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }
}

// ── AdamW ────────────────────────────────────────────────────────────

/// First/second moment estimates per parameter plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar> {
    m: IndexMap<String, Vec<S>>,
    v: IndexMap<String, Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), vec![S::zero(); t.numel()]);
            v.insert(name.clone(), vec![S::zero(); t.numel()]);
        }
        OptimizerState { m, v, step: 0 }
    }
}

/// One AdamW update: decoupled decay `θ ← θ − lr·wd·θ` applied separately
/// from the bias-corrected adaptive step. Gradients must be finite.
pub fn adamw_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[(&str, &[S])],
    state: &mut OptimizerState<S>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        if !crate::tensor::Tensor::new(vec![g.len()], g.to_vec())
            .map(|t| t.is_finite())
            .unwrap_or(false)
        {
            return Err(TrainError::NonFiniteGrad(name.to_string()));
        }
    }
    let t = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let lr = S::from_f64(cfg.lr);
    let wd_factor = S::from_f64(1.0 - cfg.lr * cfg.weight_decay);
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let inv_bc1 = S::from_f64(1.0 / bc1);
    let inv_bc2 = S::from_f64(1.0 / bc2);
    let eps = S::from_f64(cfg.adam_eps);

    for (name, g) in grads {
        let theta = params
            .get_mut(name)
            .map_err(|_| TrainError::NonFiniteGrad(format!("unknown parameter {name}")))?;
        let m = state.m.get_mut(*name).expect("state matches params");
        let v = state.v.get_mut(*name).expect("state matches params");
        for ((th, (mi, vi)), &gi) in theta
            .data_mut()
            .iter_mut()
            .zip(m.iter_mut().zip(v.iter_mut()))
            .zip(*g)
        {
            *th = *th * wd_factor;
            *mi = b1 * *mi + one_m_b1 * gi;
            *vi = b2 * *vi + one_m_b2 * gi * gi;
            let m_hat = *mi * inv_bc1;
            let v_hat = *vi * inv_bc2;
            *th = *th - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

// ── Batch assembly ───────────────────────────────────────────────────

/// Stack averaged samples into a `[B, 306, 125]` tensor plus target ids.
pub fn batch_from_samples<S: Scalar>(samples: &[AveragedSample]) -> (Tensor<S>, Vec<usize>) {
    let b = samples.len();
    let mut data = Vec::with_capacity(b * N_CHANNELS * WINDOW_LEN);
    let mut targets = Vec::with_capacity(b);
    for s in samples {
        data.extend(s.features.iter().map(|&v| S::from_f32(v)));
        targets.push(s.phoneme_id);
    }
    (
        Tensor::new(vec![b, N_CHANNELS, WINDOW_LEN], data).expect("consistent sample shapes"),
        targets,
    )
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Eval-mode forward over all samples, metrics per the macro conventions.
pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    samples: &[AveragedSample],
) -> Result<MetricsReport, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let n_classes = model.cfg.n_classes;
    let mut truth = Vec::with_capacity(samples.len());
    let mut probs = Vec::with_capacity(samples.len() * n_classes);
    for chunk in samples.chunks(128) {
        let (x, targets) = batch_from_samples::<S>(chunk);
        let p = model.predict(&x)?;
        probs.extend(p.data().iter().map(|v| v.as_f64()));
        truth.extend(targets);
    }
    Ok(MetricsReport::from_probs(&truth, &probs, n_classes)?)
}

// ── Fit loop ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1_macro: f64,
    pub val_top3: f64,
    pub val_top5: f64,
}

#[derive(Debug)]
pub struct FitResult<S: Scalar> {
    /// Model state after the final epoch.
    pub final_model: Model<S>,
    /// Checkpoint with the best validation macro F1.
    pub best_model: Model<S>,
    pub best_epoch: usize,
    pub best_report: MetricsReport,
    pub history: Vec<EpochStats>,
    pub discard: DiscardReport,
}

/// Load sessions from a manifest, normalize, and train.
pub fn fit<S: Scalar>(
    manifest: &DatasetManifest,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    progress: impl FnMut(&EpochStats),
) -> Result<FitResult<S>, TrainError> {
    let vocab = PhonemeVocab::load(&manifest.vocab)?;
    let mut train_sessions = Vec::new();
    let mut val_sessions = Vec::new();
    for entry in &manifest.sessions {
        let rec = crate::data::megb_read(&entry.path)?;
        match entry.role {
            SessionRole::Train => train_sessions.push(rec),
            SessionRole::Validation => val_sessions.push(rec),
        }
    }
    fit_sessions(train_sessions, val_sessions, &vocab, model_cfg, train_cfg, progress)
}

/// Train on in-memory sessions (normalization happens here).
pub fn fit_sessions<S: Scalar>(
    mut train_sessions: Vec<SessionRecording>,
    mut val_sessions: Vec<SessionRecording>,
    vocab: &PhonemeVocab,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mut progress: impl FnMut(&EpochStats),
) -> Result<FitResult<S>, TrainError> {
    train_cfg.validate()?;
    if train_sessions.is_empty() || val_sessions.is_empty() {
        return Err(TrainError::BadConfig(
            "need at least one train and one validation session".into(),
        ));
    }
    for s in train_sessions.iter_mut().chain(val_sessions.iter_mut()) {
        session_normalize(s);
    }

    let stats = ClassStats::compute(&train_sessions);
    for c in 0..N_CLASSES {
        if stats.total_events[c] == 0 {
            return Err(TrainError::MissingClass(vocab.label(c).to_string()));
        }
    }
    let index = EventIndex::build(&train_sessions);
    let seed = train_cfg.seed;

    let (val_samples, discard) =
        build_validation_set(&val_sessions, vocab, seed, &train_cfg.sampling)?;
    if val_samples.is_empty() {
        return Err(TrainError::BadConfig(
            "validation sessions yielded no averaged samples".into(),
        ));
    }

    let weights_table = if train_cfg.ablation.use_weighted_loss {
        LossWeights::default_for(vocab)
    } else {
        LossWeights::uniform()
    };

    let mut model = Model::<S>::build(model_cfg, train_cfg.ablation, seed)?;
    let mut opt = OptimizerState::new(&model.params);
    let batches = train_cfg.batches_per_epoch();

    let mut history = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(usize, f64, Model<S>, MetricsReport)> = None;

    for epoch in 0..train_cfg.epochs {
        let mut loss_sum = 0.0f64;
        for batch in 0..batches {
            let base = batch * train_cfg.batch_size;
            let samples: Vec<AveragedSample> = (0..train_cfg.batch_size)
                .into_par_iter()
                .map(|i| {
                    let mut rng = RngStream::substream(
                        seed,
                        "train.sample",
                        &[epoch as u64, (base + i) as u64],
                    );
                    make_training_sample(
                        &train_sessions,
                        &index,
                        &stats,
                        vocab,
                        &train_cfg.sampling,
                        &mut rng,
                    )
                })
                .collect::<Result<_, _>>()?;
            let (x, targets) = batch_from_samples::<S>(&samples);
            let sample_weights: Vec<f64> =
                targets.iter().map(|&y| weights_table.get(y)).collect();

            let mut tape = Tape::new();
            let (vars, bindings) = model.forward_on(&mut tape, &x, Mode::Train, opt.step)?;
            let loss = tape.weighted_ce_logits(vars.logits, &targets, &sample_weights)?;
            tape.backward(loss)?;
            loss_sum += tape.data(loss)[0].as_f64();

            let param_names: Vec<String> =
                model.params.iter().map(|(n, _)| n.clone()).collect();
            let mut grads: Vec<(String, Vec<S>)> = Vec::with_capacity(param_names.len());
            for name in param_names {
                let var = bindings[name.as_str()];
                let g = tape
                    .grad(var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![S::zero(); tape.value(var).numel()]);
                grads.push((name, g));
            }
            let grad_refs: Vec<(&str, &[S])> =
                grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())).collect();
            adamw_step(&mut model.params, &grad_refs, &mut opt, &train_cfg)?;
        }

        let report = evaluate(&model, &val_samples)?;
        let stats_row = EpochStats {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_f1_macro: report.f1_macro,
            val_top3: report.top3_acc_macro,
            val_top5: report.top5_acc_macro,
        };
        progress(&stats_row);
        let is_better = best.as_ref().map_or(true, |(_, f1, _, _)| report.f1_macro > *f1);
        if is_better {
            best = Some((epoch, report.f1_macro, model.clone(), report));
        }
        history.push(stats_row);
    }

    let (best_epoch, _, best_model, best_report) = best.expect("at least one epoch");
    Ok(FitResult {
        final_model: model,
        best_model,
        best_epoch,
        best_report,
        history,
        discard,
    })
}

/// History CSV: `epoch,train_loss,val_f1_macro,val_top3,val_top5`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
    let mut s = String::from("epoch,train_loss,val_f1_macro,val_top3,val_top5\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.train_loss, h.val_f1_macro, h.val_top3, h.val_top5
        ));
    }
    std::fs::write(path, s)
}
