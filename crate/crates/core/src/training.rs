//! Cross-entropy training: teacher-forced epochs followed by free-running
//! refinement, AdamW with global-norm clipping, plateau annealing, duration
//! budgeted batching, and input augmentation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{round_to_f32, Archive};
use crate::codec::Codec;
use crate::decoding::decode_greedy;
use crate::error::{Error, Result};
use crate::model::{load_params, push_params, Logits, Model};
use crate::nn::{AdamW, Graph, ParamStore, Var};
use crate::tensor::{log_softmax, Tensor};
use crate::tokens::{ensure_aligned, Manifest, TokenSequence, WaveformBuffer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Final epochs trained with self-fed predictor input.
    pub refinement_epochs: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub lr_anneal_factor: f64,
    pub grad_clip_norm: f64,
    pub batch_budget_s: f64,
    pub aug_prob: f64,
    pub seed: u64,
    /// Round parameters to `f32` after every update.
    pub mixed_precision: bool,
    /// Log `wall_s = 0` so reruns produce byte-identical logs.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            refinement_epochs: 5,
            lr_init: 5e-4,
            weight_decay: 1e-2,
            lr_anneal_factor: 0.9,
            grad_clip_norm: 5.0,
            batch_budget_s: 90.0,
            aug_prob: 0.75,
            seed: 0,
            mixed_precision: false,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refinement_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "refinement_epochs {} exceeds max_epochs {}",
                self.refinement_epochs, self.max_epochs
            )));
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_anneal_factor", self.lr_anneal_factor),
            ("grad_clip_norm", self.grad_clip_norm),
            ("batch_budget_s", self.batch_budget_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.aug_prob) {
            return Err(Error::Config("aug_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Mode of 1-based `epoch`; the last `refinement_epochs` run free.
    pub fn mode_for_epoch(&self, epoch: usize) -> TrainMode {
        if epoch > self.max_epochs - self.refinement_epochs {
            TrainMode::FreeRunning
        } else {
            TrainMode::TeacherForced
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TeacherForced,
    FreeRunning,
}

/// One aligned training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub noisy: TokenSequence,
    pub clean: TokenSequence,
    /// Source audio, when available, so augmentation can act on the signal
    /// and re-tokenize.
    pub noisy_wave: Option<WaveformBuffer>,
}

impl Example {
    pub fn new(id: impl Into<String>, noisy: TokenSequence, clean: TokenSequence) -> Result<Self> {
        ensure_aligned(&noisy, &clean)?;
        Ok(Self {
            id: id.into(),
            noisy,
            clean,
            noisy_wave: None,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.clean.duration_s()
    }
}

/// Mean over `K·T` positions of the negative log-softmax at the targets.
pub fn cross_entropy_multicodebook(logits: &Logits, targets: &TokenSequence) -> Result<f64> {
    if logits.num_codebooks() != targets.num_codebooks() || logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits are {}×{}, targets {}×{}",
            logits.num_codebooks(),
            logits.len(),
            targets.num_codebooks(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross-entropy over zero frames".into()));
    }
    let mut total = 0.0;
    for (k, l) in logits.per_codebook.iter().enumerate() {
        if l.cols != targets.spec().codebook_size {
            return Err(Error::ShapeMismatch(format!("logits have {} classes", l.cols)));
        }
        for t in 0..targets.len() {
            total -= log_softmax(l.row(t))[targets.get(k, t) as usize];
        }
    }
    Ok(total / (targets.len() * targets.num_codebooks()) as f64)
}

/// Plateau schedule with patience 1: anneal whenever the newest loss fails
/// to beat every earlier one.
pub fn lr_on_plateau(history: &[f64], current_lr: f64, factor: f64) -> f64 {
    match history.split_last() {
        Some((last, earlier)) if !earlier.is_empty() => {
            let best = earlier.iter().copied().fold(f64::INFINITY, f64::min);
            if *last < best {
                current_lr
            } else {
                current_lr * factor
            }
        }
        _ => current_lr,
    }
}

/// Shuffles, then fills batches greedily in order without exceeding the
/// duration budget. Returns index lists.
pub fn pack_durations<R: Rng + ?Sized>(
    ids: &[&str],
    durations: &[f64],
    budget_s: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if let Some(i) = durations.iter().position(|&d| d > budget_s) {
        return Err(Error::UtteranceTooLong {
            id: ids.get(i).map_or_else(|| i.to_string(), |s| s.to_string()),
            duration_s: durations[i],
            budget_s,
        });
    }
    let mut order: Vec<usize> = (0..durations.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0.0;
    for i in order {
        if !current.is_empty() && used + durations[i] > budget_s {
            batches.push(std::mem::take(&mut current));
            used = 0.0;
        }
        current.push(i);
        used += durations[i];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

pub fn pack_batches<R: Rng + ?Sized>(manifest: &Manifest, budget_s: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    let durations: Vec<f64> = manifest.entries.iter().map(|e| e.duration_s).collect();
    pack_durations(&ids, &durations, budget_s, rng)
}

/// What an augmentation call did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augmentation {
    pub band_dropped: bool,
    pub chunk_dropped: bool,
}

impl Augmentation {
    pub fn applied(&self) -> bool {
        self.band_dropped || self.chunk_dropped
    }
}

/// With probability `prob`, notches out a random frequency band, zeroes a
/// random chunk of at most 10% of the signal, or both. Length is preserved.
pub fn augment<R: Rng + ?Sized>(wave: &WaveformBuffer, prob: f64, rng: &mut R) -> WaveformBuffer {
    augment_traced(wave, prob, rng).0
}

pub fn augment_traced<R: Rng + ?Sized>(wave: &WaveformBuffer, prob: f64, rng: &mut R) -> (WaveformBuffer, Augmentation) {
    let mut aug = Augmentation {
        band_dropped: false,
        chunk_dropped: false,
    };
    if !(rng.random::<f64>() < prob) || wave.is_empty() {
        return (wave.clone(), aug);
    }
    match rng.random_range(0..3) {
        0 => aug.band_dropped = true,
        1 => aug.chunk_dropped = true,
        _ => {
            aug.band_dropped = true;
            aug.chunk_dropped = true;
        }
    }
    let mut samples = wave.samples.clone();
    if aug.band_dropped {
        notch(&mut samples, wave.sample_rate_hz, rng);
    }
    if aug.chunk_dropped {
        let n = samples.len();
        let max_len = ((n as f64) * 0.1).floor().max(1.0) as usize;
        let len = rng.random_range(1..=max_len);
        let start = rng.random_range(0..=n - len);
        samples[start..start + len].iter_mut().for_each(|s| *s = 0.0);
    }
    (
        WaveformBuffer {
            samples,
            sample_rate_hz: wave.sample_rate_hz,
        },
        aug,
    )
}

fn notch<R: Rng + ?Sized>(samples: &mut [f64], sample_rate_hz: u32, rng: &mut R) {
    let n = samples.len();
    let nyquist = sample_rate_hz as f64 / 2.0;
    let center = rng.random_range(0.0..nyquist);
    let width = rng.random_range(nyquist / 20.0..nyquist / 4.0);
    let (lo, hi) = ((center - width / 2.0).max(0.0), (center + width / 2.0).min(nyquist));
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (i, b) in buf.iter_mut().enumerate() {
        let bin = if i <= n / 2 { i } else { n - i };
        let f = bin as f64 * sample_rate_hz as f64 / n as f64;
        if f >= lo && f <= hi {
            *b = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    for (s, b) in samples.iter_mut().zip(&buf) {
        *s = (b.re / n as f64).clamp(-1.0, 1.0);
    }
}

/// Token-domain stand-in for chunk dropping: with probability `prob`, a
/// random span of at most 10% of the frames (at least one) is overwritten
/// with uniformly drawn ids in every codebook.
pub fn augment_tokens<R: Rng + ?Sized>(noisy: &TokenSequence, prob: f64, rng: &mut R) -> TokenSequence {
    if noisy.is_empty() || !(rng.random::<f64>() < prob) {
        return noisy.clone();
    }
    let t = noisy.len();
    let c = noisy.spec().codebook_size as u32;
    let max_len = (t / 10).max(1);
    let len = rng.random_range(1..=max_len);
    let start = rng.random_range(0..=t - len);
    let rows = noisy
        .rows()
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r[start..start + len].iter_mut().for_each(|v| *v = rng.random_range(0..c));
            r
        })
        .collect();
    TokenSequence::new(noisy.spec().clone(), rows).expect("drawn ids are in range")
}

/// Independent stream seed for `(seed, epoch, item)`.
pub fn stream_seed(seed: u64, epoch: u64, item: u64) -> u64 {
    crate::seed::derive_seed(seed, epoch, item)
}

/// Predictor input for `mode`: the shifted ground truth, or the model's own
/// greedy decode shifted (no gradient flows through the choice).
fn predictor_input(model: &Model, ex_noisy: &TokenSequence, clean: &TokenSequence, mode: TrainMode) -> Result<Option<Vec<Vec<usize>>>> {
    match model {
        Model::Nar(_) => Ok(None),
        Model::Set(m) => Ok(Some(match mode {
            TrainMode::TeacherForced => clean.shifted_with_start(),
            TrainMode::FreeRunning => decode_greedy(m, ex_noisy)?.shifted_with_start(),
        })),
    }
}

/// Summed negative log-likelihood over all `K·T` positions.
fn nll_graph<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    noisy: &TokenSequence,
    clean: &TokenSequence,
    history: Option<&[Vec<usize>]>,
    rng: &mut R,
) -> Var {
    let ids = noisy.index_rows();
    let vars = match model {
        Model::Nar(m) => m.forward_graph(g, &ids, rng),
        Model::Set(m) => m.forward_graph(g, &ids, history.expect("SET needs predictor input"), rng),
    };
    let losses: Vec<Var> = vars
        .iter()
        .zip(clean.index_rows())
        .map(|(&v, tgt)| g.softmax_cross_entropy(v, &tgt))
        .collect();
    g.sum_scalars(&losses)
}

/// Mean per-token NLL with dropout off.
pub fn evaluate_loss(model: &Model, data: &[Example], mode: TrainMode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for ex in data.iter().filter(|e| !e.clean.is_empty()) {
        let history = predictor_input(model, &ex.noisy, &ex.clean, mode)?;
        let mut g = Graph::new(model.store());
        let loss = nll_graph(model, &mut g, &ex.noisy, &ex.clean, history.as_deref(), &mut rng);
        total += g.value(loss).data[0];
        count += ex.clean.len() * ex.clean.num_codebooks();
    }
    if count == 0 {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Mean per-token training NLL.
    pub loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm_mean: f64,
    /// Largest global gradient norm actually applied.
    pub max_applied_norm: f64,
    pub num_updates: usize,
}

/// Augments the noisy side of an example for one epoch.
fn augmented_input(ex: &Example, prob: f64, codec: Option<&dyn Codec>, rng: &mut ChaCha8Rng) -> Result<TokenSequence> {
    if prob <= 0.0 {
        return Ok(ex.noisy.clone());
    }
    match (&ex.noisy_wave, codec) {
        (Some(wave), Some(codec)) => {
            let (w, aug) = augment_traced(wave, prob, rng);
            if !aug.applied() {
                return Ok(ex.noisy.clone());
            }
            let toks = codec.tokenize(&w)?;
            // tokenization of an equal-length signal keeps the frame count
            ensure_aligned(&toks, &ex.clean)?;
            Ok(toks)
        }
        _ => Ok(augment_tokens(&ex.noisy, prob, rng)),
    }
}

/// One pass over `batches`; updates parameters after each batch.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    opt: &mut AdamW,
    data: &[Example],
    batches: &[Vec<usize>],
    config: &TrainConfig,
    mode: TrainMode,
    epoch: usize,
    codec: Option<&dyn Codec>,
) -> Result<EpochStats> {
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch as u64, u64::MAX));
    let mut grads = model.store().zeros_like();
    let mut total_loss = 0.0;
    let mut total_tokens = 0usize;
    let mut norm_sum = 0.0;
    let mut max_applied: f64 = 0.0;
    let mut updates = 0usize;
    for batch in batches {
        grads.zero();
        let mut prepared = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &data[i];
            if ex.clean.is_empty() {
                continue;
            }
            let mut aug_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch as u64, i as u64));
            let noisy = augmented_input(ex, config.aug_prob, codec, &mut aug_rng)?;
            let history = predictor_input(model, &noisy, &ex.clean, mode)?;
            prepared.push((noisy, &ex.clean, history));
        }
        let tokens: usize = prepared.iter().map(|(_, c, _)| c.len() * c.num_codebooks()).sum();
        if tokens == 0 {
            continue;
        }
        let mut batch_loss = 0.0;
        for (noisy, clean, history) in &prepared {
            let mut g = Graph::training(model.store());
            let loss = nll_graph(model, &mut g, noisy, clean, history.as_deref(), &mut dropout_rng);
            batch_loss += g.value(loss).data[0];
            g.backward(loss, 1.0 / tokens as f64, &mut grads);
        }
        if !batch_loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("non-finite loss or gradient (batch loss {batch_loss})"),
            });
        }
        let norm = grads.clip_global_norm(config.grad_clip_norm);
        norm_sum += norm;
        max_applied = max_applied.max(grads.global_norm());
        opt.update(model.store_mut(), &grads);
        if config.mixed_precision {
            for p in model.store_mut().iter_mut() {
                round_to_f32(&mut p.value);
            }
        }
        total_loss += batch_loss;
        total_tokens += tokens;
        updates += 1;
    }
    if total_tokens == 0 {
        return Err(Error::Empty("training set has no frames".into()));
    }
    Ok(EpochStats {
        loss: total_loss / total_tokens as f64,
        grad_norm_mean: norm_sum / updates as f64,
        max_applied_norm: max_applied,
        num_updates: updates,
    })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: TrainMode,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
    pub grad_norm_mean: f64,
    pub wall_s: f64,
}

/// Everything needed to resume training and to pick evaluation weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epochs_done: usize,
    pub lr: f64,
    pub opt: AdamW,
    pub log: Vec<EpochRecord>,
    /// Validation losses of the current phase, for the plateau rule.
    pub phase_history: Vec<f64>,
    pub best_valid: f64,
    pub best_params: Vec<Tensor>,
    /// Best teacher-forced weights, kept once refinement starts.
    pub tf_best_params: Option<Vec<Tensor>>,
    /// Weights at the end of the last completed epoch.
    pub current_params: Vec<Tensor>,
    /// `(teacher-forced, free-running)` validation loss on the frozen weights
    /// at the phase switch.
    pub switch_losses: Option<(f64, f64)>,
}

fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn restore(store: &mut ParamStore, values: &[Tensor]) {
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v.clone();
    }
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let params = snapshot(model.store());
        Self {
            epochs_done: 0,
            lr: config.lr_init,
            opt: AdamW::new(model.store(), config.lr_init, config.weight_decay),
            log: Vec::new(),
            phase_history: Vec::new(),
            best_valid: f64::INFINITY,
            best_params: params.clone(),
            tf_best_params: None,
            current_params: params,
            switch_losses: None,
        }
    }

    /// True once at least one free-running epoch has completed.
    pub fn refined(&self) -> bool {
        self.log.iter().any(|r| r.mode == TrainMode::FreeRunning)
    }
}

/// Trains until `max_epochs` (continuing from `state.epochs_done`).
///
/// On return the model holds the best-validation weights of the final phase,
/// and `state.current_params` the weights after the last epoch. On
/// divergence the model is rolled back to the last completed epoch and the
/// error is returned.
pub fn fit(
    model: &mut Model,
    state: &mut TrainState,
    train: &[Example],
    valid: &[Example],
    config: &TrainConfig,
    codec: Option<&dyn Codec>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<()> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("training and validation sets must be non-empty".into()));
    }
    for ex in train.iter().chain(valid) {
        model.spec().ensure_compatible(ex.noisy.spec())?;
    }
    let is_set = model.as_set().is_some();
    restore(model.store_mut(), &state.current_params);
    let ids: Vec<&str> = train.iter().map(|e| e.id.as_str()).collect();
    let durations: Vec<f64> = train.iter().map(Example::duration_s).collect();

    for epoch in state.epochs_done + 1..=config.max_epochs {
        let mode = if is_set {
            config.mode_for_epoch(epoch)
        } else {
            TrainMode::TeacherForced
        };
        let switching = mode == TrainMode::FreeRunning && !state.refined();
        if switching {
            let tf = evaluate_loss(model, valid, TrainMode::TeacherForced)?;
            let fr = evaluate_loss(model, valid, TrainMode::FreeRunning)?;
            state.switch_losses = Some((tf, fr));
            state.tf_best_params = Some(state.best_params.clone());
            state.best_valid = f64::INFINITY;
            state.phase_history.clear();
        }
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, epoch as u64, u64::MAX - 1));
        let batches = pack_durations(&ids, &durations, config.batch_budget_s, &mut shuffle_rng)?;
        state.opt.lr = state.lr;
        let stats = match train_epoch(model, &mut state.opt, train, &batches, config, mode, epoch, codec) {
            Ok(s) => s,
            Err(e) => {
                restore(model.store_mut(), &state.current_params);
                return Err(e);
            }
        };
        let valid_loss = evaluate_loss(model, valid, mode)?;
        if !valid_loss.is_finite() || !model.store().all_finite() {
            restore(model.store_mut(), &state.current_params);
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation loss {valid_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            mode,
            train_loss: stats.loss,
            valid_loss,
            lr: state.lr,
            grad_norm_mean: stats.grad_norm_mean,
            wall_s: if config.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        };
        on_epoch(&record);
        state.log.push(record);
        if valid_loss < state.best_valid {
            state.best_valid = valid_loss;
            state.best_params = snapshot(model.store());
        }
        state.phase_history.push(valid_loss);
        state.lr = lr_on_plateau(&state.phase_history, state.lr, config.lr_anneal_factor);
        state.current_params = snapshot(model.store());
        state.epochs_done = epoch;
    }
    restore(model.store_mut(), &state.best_params);
    Ok(())
}

/// A trained model with its training state, serialized as one archive.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub state: TrainState,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    epochs_done: usize,
    lr: f64,
    opt: AdamW,
    log: Vec<EpochRecord>,
    phase_history: Vec<f64>,
    best_valid: Option<f64>,
    switch_losses: Option<(f64, f64)>,
    has_tf_best: bool,
    refined: bool,
}

impl Checkpoint {
    /// Weights used by teacher-forced and plain beam-search evaluation:
    /// the best teacher-forced weights when refinement has run, otherwise
    /// the best weights.
    pub fn teacher_forced_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(p) = &self.state.tf_best_params {
            restore(m.store_mut(), p);
        } else {
            restore(m.store_mut(), &self.state.best_params);
        }
        m
    }

    /// Best weights of the refinement phase, if it ran.
    pub fn refined_model(&self) -> Option<Model> {
        self.state.refined().then(|| {
            let mut m = self.model.clone();
            restore(m.store_mut(), &self.state.best_params);
            m
        })
    }

    pub fn to_archive(&self) -> Archive {
        let meta = StateMeta {
            epochs_done: self.state.epochs_done,
            lr: self.state.lr,
            opt: self.state.opt.clone(),
            log: self.state.log.clone(),
            phase_history: self.state.phase_history.clone(),
            best_valid: self.state.best_valid.is_finite().then_some(self.state.best_valid),
            switch_losses: self.state.switch_losses,
            has_tf_best: self.state.tf_best_params.is_some(),
            refined: self.state.refined(),
        };
        let mut a = Archive::new(
            "checkpoint",
            json!({
                "model": self.model.meta_json(),
                "train": self.config,
                "state": meta,
            }),
        );
        let mut store = self.model.store().clone();
        restore(&mut store, &self.state.best_params);
        push_params(&mut a, &store, "param");
        restore(&mut store, &self.state.current_params);
        push_params(&mut a, &store, "current");
        if let Some(p) = &self.state.tf_best_params {
            restore(&mut store, p);
            push_params(&mut a, &store, "tf_best");
        }
        restore(&mut store, &self.state.opt.m);
        push_params(&mut a, &store, "adam_m");
        restore(&mut store, &self.state.opt.v);
        push_params(&mut a, &store, "adam_v");
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        if archive.kind != "checkpoint" {
            return Err(Error::Malformed(format!("expected a checkpoint, found `{}`", archive.kind)));
        }
        let mut model = Model::from_meta(&archive.meta["model"])?;
        let config: TrainConfig = serde_json::from_value(archive.meta["train"].clone())?;
        let meta: StateMeta = serde_json::from_value(archive.meta["state"].clone())?;
        let load = |prefix: &str, model: &mut Model| -> Result<Vec<Tensor>> {
            load_params(archive, model.store_mut(), prefix)?;
            Ok(snapshot(model.store()))
        };
        let m = load("adam_m", &mut model)?;
        let v = load("adam_v", &mut model)?;
        let current = load("current", &mut model)?;
        let tf_best = if meta.has_tf_best {
            Some(load("tf_best", &mut model)?)
        } else {
            None
        };
        let best = load("param", &mut model)?;
        let mut opt = meta.opt;
        opt.m = m;
        opt.v = v;
        Ok(Self {
            model,
            config,
            state: TrainState {
                epochs_done: meta.epochs_done,
                lr: meta.lr,
                opt,
                log: meta.log,
                phase_history: meta.phase_history,
                best_valid: meta.best_valid.unwrap_or(f64::INFINITY),
                best_params: best,
                tf_best_params: tf_best,
                current_params: current,
                switch_losses: meta.switch_losses,
            },
        })
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// The training log as JSON lines.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{CodecSpec, ManifestEntry};

    #[test]
    fn uniform_logits_cost_ln_c() {
        let spec = CodecSpec::new(2, 7, 50.0, 16_000).unwrap();
        let logits = Logits {
            per_codebook: vec![Tensor::zeros(3, 7); 2],
        };
        let targets = TokenSequence::new(spec, vec![vec![0, 3, 6], vec![1, 1, 2]]).unwrap();
        let ce = cross_entropy_multicodebook(&logits, &targets).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let spec = CodecSpec::new(1, 4, 50.0, 16_000).unwrap();
        let targets = TokenSequence::new(spec, vec![vec![2, 0]]).unwrap();
        let mut l = Tensor::zeros(2, 4);
        l.set(0, 2, 100.0);
        l.set(1, 0, 100.0);
        let ce = cross_entropy_multicodebook(&Logits { per_codebook: vec![l] }, &targets).unwrap();
        assert!((0.0..1e-6).contains(&ce));
    }

    #[test]
    fn plateau_rule() {
        assert_eq!(lr_on_plateau(&[2.0, 1.9], 1.0, 0.9), 1.0);
        assert_eq!(lr_on_plateau(&[2.0, 2.1], 1.0, 0.9), 0.9);
        assert_eq!(lr_on_plateau(&[2.0], 1.0, 0.9), 1.0);
        let mut lr = 1.0;
        let mut hist = vec![1.0];
        for i in 0..4 {
            hist.push(1.5 + i as f64);
            lr = lr_on_plateau(&hist, lr, 0.9);
        }
        assert!((lr - 0.9f64.powi(4)).abs() < 1e-15);
    }

    #[test]
    fn batches_respect_budget() {
        let entries = (0..7)
            .map(|i| ManifestEntry {
                id: format!("u{i}"),
                noisy: String::new(),
                clean: String::new(),
                duration_s: 30.0,
            })
            .collect();
        let m = Manifest::new(entries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = pack_batches(&m, 90.0, &mut rng).unwrap();
        assert!(b.iter().all(|x| x.len() <= 3));
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert!(matches!(
            pack_durations(&["long"], &[91.0], 90.0, &mut rng),
            Err(Error::UtteranceTooLong { .. })
        ));
    }

    #[test]
    fn augmentation_preserves_length_and_is_identity_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WaveformBuffer::new((0..800).map(|i| (i as f64 * 0.05).sin() * 0.5).collect(), 16_000).unwrap();
        assert_eq!(augment(&w, 0.0, &mut rng), w);
        for _ in 0..50 {
            assert_eq!(augment(&w, 1.0, &mut rng).len(), w.len());
        }
        let spec = CodecSpec::new(2, 5, 50.0, 16_000).unwrap();
        let toks = TokenSequence::new(spec, vec![vec![1; 30], vec![2; 30]]).unwrap();
        assert_eq!(augment_tokens(&toks, 0.0, &mut rng), toks);
        assert_eq!(augment_tokens(&toks, 1.0, &mut rng).len(), 30);
    }

    #[test]
    fn refinement_schedule() {
        let cfg = TrainConfig {
            max_epochs: 10,
            refinement_epochs: 5,
            ..TrainConfig::default()
        };
        let modes: Vec<TrainMode> = (1..=10).map(|e| cfg.mode_for_epoch(e)).collect();
        assert!(modes[..5].iter().all(|m| *m == TrainMode::TeacherForced));
        assert!(modes[5..].iter().all(|m| *m == TrainMode::FreeRunning));
        let bad = TrainConfig {
            max_epochs: 3,
            refinement_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
