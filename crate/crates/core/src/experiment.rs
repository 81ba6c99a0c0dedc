//! Config-driven experiment commands: dataset synthesis, training,
//! evaluation, sweeps, and enhancement. Every command reads one
//! [`ExperimentConfig`] and writes its artifacts under `output_dir`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::channel_lab::{corrupt, sample_clean, ChannelSpec, MarkovChain};
use crate::codec::{
    read_wav, synthetic_signal, training_corpus, write_wav, AnyCodec, Codec, DequantizerConfig, KMeansCodec,
    SyntheticCodec,
};
use crate::codec::synthetic::{CORPUS_DURATION_S, CORPUS_SIZE, DEFAULT_BANDS};
use crate::decoding::{decode_beam, decode_nar, decode_teacher_forced, BeamConfig};
use crate::error::{Error, Result};
use crate::metrics::{csv_field, DecodeMode, EvalReport, MetricSuite, MockDnsmos};
use crate::model::{Model, ModelConfig, ModelKind};
use crate::seed::derive_seed;
use crate::tokens::{read_manifest, write_manifest, CodecSpec, Manifest, ManifestEntry, TokenSequence, WaveformBuffer};
use crate::training::{fit, log_to_jsonl, Checkpoint, EpochRecord, Example, TrainConfig, TrainState};

const SYNTH_STREAM: u64 = 0x5_1A7A;
const NOISE_STREAM: u64 = 0x0_015E;
const INIT_STREAM: u64 = 0x1_417;

fn default_frame_rate() -> f64 {
    50.0
}

fn default_sample_rate() -> u32 {
    16_000
}

fn default_bands() -> usize {
    DEFAULT_BANDS
}

fn default_transition_p() -> f64 {
    0.9
}

fn default_duration() -> f64 {
    1.0
}

fn default_train_count() -> usize {
    1000
}

fn default_eval_count() -> usize {
    100
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    /// Residual vector quantizer over filterbank features.
    Synthetic,
    /// Single k-means codebook with an optional learned dequantizer.
    Kmeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub num_codebooks: usize,
    pub codebook_size: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
    #[serde(default = "default_bands")]
    pub num_bands: usize,
    #[serde(default)]
    pub seed: u64,
    /// k-means only: train a dequantizer with these settings.
    #[serde(default)]
    pub dequantizer: Option<DequantizerConfig>,
}

impl CodecConfig {
    pub fn spec(&self) -> Result<CodecSpec> {
        CodecSpec::new(self.num_codebooks, self.codebook_size, self.frame_rate_hz, self.sample_rate_hz)
    }

    fn validate(&self) -> Result<()> {
        self.spec()?;
        if self.num_bands == 0 {
            return Err(Error::Config("codec.num_bands must be positive".into()));
        }
        match self.kind {
            CodecKind::Kmeans if self.num_codebooks != 1 => {
                Err(Error::Config("k-means codecs have exactly one codebook".into()))
            }
            CodecKind::Synthetic if self.dequantizer.is_some() => {
                Err(Error::Config("codec.dequantizer applies to k-means codecs only".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Advance to the next id with probability `transition_p`.
    #[default]
    Cycle,
    /// Repeat the current id with probability `transition_p`.
    Sticky,
    /// Independent uniform ids.
    Uniform,
}

/// Synthetic token data drawn from a Markov source through a noisy channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate_hz: f64,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub source: SourceKind,
    #[serde(default = "default_transition_p")]
    pub transition_p: f64,
    pub snr_db: f64,
    /// Replaces the SNR-derived substitution rate when set.
    #[serde(default)]
    pub substitution_rate: Option<f64>,
    /// Frames per utterance.
    pub frames: usize,
}

impl ChannelConfig {
    pub fn codec_spec(&self) -> Result<CodecSpec> {
        CodecSpec::new(self.num_codebooks, self.codebook_size, self.frame_rate_hz, self.sample_rate_hz)
    }

    pub fn channel_spec(&self, seed: u64) -> Result<ChannelSpec> {
        let c = self.codebook_size;
        let chain = match self.source {
            SourceKind::Cycle => MarkovChain::cycle(c, self.transition_p),
            SourceKind::Sticky => MarkovChain::sticky(c, self.transition_p),
            SourceKind::Uniform => MarkovChain::uniform(c),
        };
        let spec = ChannelSpec::factored(self.codec_spec()?, chain, self.snr_db, seed)?;
        match self.substitution_rate {
            Some(r) => spec.with_substitution_rate(r),
            None => Ok(spec),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.transition_p) {
            return Err(Error::Config(format!("transition_p {} is outside [0, 1]", self.transition_p)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be positive".into()));
        }
        self.channel_spec(0).map(|_| ())
    }
}

/// Synthetic voiced signals mixed with white noise, stored as WAV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioConfig {
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    pub snr_db: f64,
}

/// Pre-existing manifests, one per split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
}

/// Where the data comes from: exactly one of `channel`, `audio`, or
/// `manifests`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub channel: Option<ChannelConfig>,
    #[serde(default)]
    pub audio: Option<AudioConfig>,
    #[serde(default)]
    pub manifests: Option<ManifestPaths>,
    #[serde(default = "default_train_count")]
    pub train_count: usize,
    #[serde(default = "default_eval_count")]
    pub valid_count: usize,
    #[serde(default = "default_eval_count")]
    pub test_count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl DataConfig {
    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Valid => self.valid_count,
            Split::Test => self.test_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Modes evaluated when none are given on the command line; by default
    /// every mode the checkpoint supports.
    #[serde(default)]
    pub modes: Option<Vec<DecodeMode>>,
    #[serde(default)]
    pub metric_seed: u64,
    /// Fixed DNSMOS score, standing in for an external backend.
    #[serde(default)]
    pub dnsmos_mock: Option<f64>,
}

/// One experiment, as read from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub codec: Option<CodecConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub decode: BeamConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses and validates a TOML document; unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are resolved against
    /// the file's directory, and referenced manifests must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(m) = &mut cfg.data.manifests {
            for p in [&mut m.train, &mut m.valid, &mut m.test] {
                *p = base.join(&*p);
                if !p.is_file() {
                    return Err(Error::Config(format!("manifest {} does not exist", p.display())));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if let Some(c) = &self.codec {
            c.validate()?;
        }
        let d = &self.data;
        let sources = [d.channel.is_some(), d.audio.is_some(), d.manifests.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(Error::Config(
                "data needs exactly one of [data.channel], [data.audio], [data.manifests]".into(),
            ));
        }
        if d.manifests.is_none() && Split::ALL.iter().any(|&s| d.count(s) == 0) {
            return Err(Error::Config("split counts must be positive".into()));
        }
        if let Some(ch) = &d.channel {
            ch.validate()?;
            if let Some(c) = &self.codec {
                ch.codec_spec()?.ensure_compatible(&c.spec()?)?;
            }
        }
        if let Some(a) = &d.audio {
            if self.codec.is_none() {
                return Err(Error::Config("[data.audio] needs a [codec] section".into()));
            }
            if !(a.duration_s > 0.0) || !a.snr_db.is_finite() {
                return Err(Error::Config("audio duration must be positive and snr_db finite".into()));
            }
        }
        if let Some(v) = self.eval.dnsmos_mock {
            if !v.is_finite() {
                return Err(Error::Config("eval.dnsmos_mock must be finite".into()));
            }
        }
        Ok(())
    }

    /// Uses `seed` for the data, codec and training streams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        if let Some(c) = &mut self.codec {
            c.seed = seed;
        }
        self
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.output_dir)
    }

    fn manifest_path(&self, split: Split) -> PathBuf {
        match &self.data.manifests {
            Some(m) => match split {
                Split::Train => m.train.clone(),
                Split::Valid => m.valid.clone(),
                Split::Test => m.test.clone(),
            },
            None => self.layout().manifest(split),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// File locations under an experiment's output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn manifest(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.json", split.name()))
    }

    pub fn channel_sidecar(&self) -> PathBuf {
        self.data_dir().join("channel.json")
    }

    pub fn audio_sidecar(&self) -> PathBuf {
        self.data_dir().join("audio.json")
    }

    pub fn codec(&self) -> PathBuf {
        self.root.join("codec.tkarch")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.tkarch")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn enhanced_dir(&self) -> PathBuf {
        self.root.join("enhanced")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Maps `f` over `items` on all available cores, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// What `synth_data` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub manifests: Vec<PathBuf>,
    pub counts: Vec<usize>,
    pub sidecar: PathBuf,
}

#[derive(Debug, Serialize)]
struct AudioSidecar<'a> {
    audio: &'a AudioConfig,
    sample_rate_hz: u32,
    seed: u64,
}

/// Writes the train/valid/test splits: a manifest per split plus token
/// containers (channel data) or WAV files (audio data), and a JSON sidecar
/// recording how they were generated.
pub fn synth_data(cfg: &ExperimentConfig) -> Result<SynthSummary> {
    let layout = cfg.layout();
    let data = &cfg.data;
    let mut manifests = Vec::new();
    let mut counts = Vec::new();
    let sidecar = if let Some(ch) = &data.channel {
        let spec = ch.channel_spec(data.seed)?;
        for split in Split::ALL {
            let n = data.count(split);
            let dir = layout.data_dir().join(split.name());
            create_dir(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(data.seed, SYNTH_STREAM, split.index()));
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let id = format!("{}_{i:05}", split.name());
                let clean = sample_clean(&spec, ch.frames, &mut rng);
                let noisy = corrupt(&clean, &spec, &mut rng)?;
                let noisy_rel = format!("{}/{id}.noisy.tok", split.name());
                let clean_rel = format!("{}/{id}.clean.tok", split.name());
                noisy.write(&layout.data_dir().join(&noisy_rel))?;
                clean.write(&layout.data_dir().join(&clean_rel))?;
                entries.push(ManifestEntry {
                    id,
                    noisy: noisy_rel,
                    clean: clean_rel,
                    duration_s: clean.duration_s(),
                });
            }
            let path = layout.manifest(split);
            write_manifest(&Manifest::new(entries)?, &path)?;
            manifests.push(path);
            counts.push(n);
        }
        let path = layout.channel_sidecar();
        write_text(&path, &serde_json::to_string_pretty(&spec)?)?;
        path
    } else if let Some(audio) = &data.audio {
        let codec = cfg.codec.as_ref().ok_or_else(|| Error::Config("[data.audio] needs a [codec] section".into()))?;
        let sr = codec.sample_rate_hz;
        for split in Split::ALL {
            let n = data.count(split);
            let dir = layout.data_dir().join(split.name());
            create_dir(&dir)?;
            let mut entries = Vec::with_capacity(n);
            for i in 0..n {
                let id = format!("{}_{i:05}", split.name());
                let seed = derive_seed(data.seed, SYNTH_STREAM, split.index() << 32 | i as u64);
                let (clean, noisy) = noisy_pair(seed, audio, sr)?;
                let noisy_rel = format!("{}/{id}.noisy.wav", split.name());
                let clean_rel = format!("{}/{id}.clean.wav", split.name());
                write_wav(&layout.data_dir().join(&noisy_rel), &noisy)?;
                write_wav(&layout.data_dir().join(&clean_rel), &clean)?;
                entries.push(ManifestEntry {
                    id,
                    noisy: noisy_rel,
                    clean: clean_rel,
                    duration_s: clean.duration_s(),
                });
            }
            let path = layout.manifest(split);
            write_manifest(&Manifest::new(entries)?, &path)?;
            manifests.push(path);
            counts.push(n);
        }
        let path = layout.audio_sidecar();
        let meta = AudioSidecar {
            audio,
            sample_rate_hz: sr,
            seed: data.seed,
        };
        write_text(&path, &serde_json::to_string_pretty(&meta)?)?;
        path
    } else {
        return Err(Error::Config("data comes from existing manifests; nothing to synthesize".into()));
    };
    Ok(SynthSummary {
        manifests,
        counts,
        sidecar,
    })
}

/// A synthetic clean signal and its mixture with white noise at `snr_db`,
/// jointly rescaled so neither clips.
fn noisy_pair(seed: u64, audio: &AudioConfig, sr: u32) -> Result<(WaveformBuffer, WaveformBuffer)> {
    let clean = synthetic_signal(seed, audio.duration_s, sr);
    let power = clean.samples.iter().map(|x| x * x).sum::<f64>() / clean.len().max(1) as f64;
    let sigma = (power / 10f64.powf(audio.snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, NOISE_STREAM, 0));
    let mut noisy: Vec<f64> = clean
        .samples
        .iter()
        .map(|x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + sigma * z
        })
        .collect();
    let mut clean = clean.samples;
    let peak = noisy.iter().chain(&clean).fold(0.0f64, |m, x| m.max(x.abs()));
    if peak > 0.99 {
        let g = 0.99 / peak;
        noisy.iter_mut().chain(clean.iter_mut()).for_each(|x| *x *= g);
    }
    Ok((WaveformBuffer::new(clean, sr)?, WaveformBuffer::new(noisy, sr)?))
}

fn is_wav(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"))
}

/// Tokens for one manifest file; WAV files are tokenized with `codec`.
fn load_signal(path: &Path, codec: Option<&AnyCodec>) -> Result<(TokenSequence, Option<WaveformBuffer>)> {
    if is_wav(path) {
        let codec = codec.ok_or_else(|| Error::Config(format!("{} is audio; a [codec] section is required", path.display())))?;
        let wave = read_wav(path)?;
        Ok((codec.tokenize(&wave)?, Some(wave)))
    } else {
        Ok((TokenSequence::read(path)?, None))
    }
}

/// Reads every pair listed in the manifest at `path`; entry paths are
/// relative to the manifest's directory.
pub fn load_examples(path: &Path, codec: Option<&AnyCodec>) -> Result<Vec<Example>> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest
        .entries
        .iter()
        .map(|e| {
            let (noisy, wave) = load_signal(&base.join(&e.noisy), codec)?;
            let (clean, _) = load_signal(&base.join(&e.clean), codec)?;
            let mut ex = Example::new(e.id.clone(), noisy, clean)?;
            ex.noisy_wave = wave;
            Ok(ex)
        })
        .collect()
}

/// Clean training waveforms when the train split is audio.
fn clean_train_waves(cfg: &ExperimentConfig) -> Result<Option<Vec<WaveformBuffer>>> {
    let path = cfg.manifest_path(Split::Train);
    if !path.is_file() {
        return Ok(None);
    }
    let manifest = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    if !manifest.entries.iter().all(|e| is_wav(Path::new(&e.clean))) {
        return Ok(None);
    }
    manifest
        .entries
        .iter()
        .map(|e| read_wav(&base.join(&e.clean)))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Loads the experiment's codec archive, training and saving it first if
/// it does not exist yet. `None` when the config has no codec section.
pub fn prepare_codec(cfg: &ExperimentConfig) -> Result<Option<AnyCodec>> {
    let Some(cc) = &cfg.codec else {
        return Ok(None);
    };
    let spec = cc.spec()?;
    let path = cfg.layout().codec();
    if path.is_file() {
        let codec = AnyCodec::read(&path)?;
        if codec.spec() != &spec {
            return Err(Error::SpecMismatch(format!(
                "{} was trained for a different codec spec; remove it to retrain",
                path.display()
            )));
        }
        return Ok(Some(codec));
    }
    let corpus = match clean_train_waves(cfg)? {
        Some(waves) => waves,
        None => training_corpus(cc.seed, CORPUS_SIZE, CORPUS_DURATION_S, cc.sample_rate_hz),
    };
    let codec = match cc.kind {
        CodecKind::Synthetic => AnyCodec::Synthetic(SyntheticCodec::train_on(&spec, &corpus, cc.num_bands, cc.seed)?),
        CodecKind::Kmeans => AnyCodec::KMeans(KMeansCodec::train(
            &spec,
            &corpus,
            cc.num_bands,
            cc.seed,
            cc.dequantizer.as_ref(),
        )?),
    };
    create_dir(&cfg.output_dir)?;
    codec.write(&path)?;
    Ok(Some(codec))
}

/// What `train` wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_done: usize,
    pub best_valid: f64,
}

/// Trains the configured model on the train/valid splits and writes the
/// checkpoint and JSON-lines log. With `resume`, training continues from
/// the existing checkpoint up to `train.max_epochs`. On divergence the
/// last completed epoch is saved before the error is returned.
pub fn train(cfg: &ExperimentConfig, resume: bool, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    let layout = cfg.layout();
    create_dir(&layout.root)?;
    let codec = prepare_codec(cfg)?;
    let train_set = load_examples(&cfg.manifest_path(Split::Train), codec.as_ref())?;
    let valid_set = load_examples(&cfg.manifest_path(Split::Valid), codec.as_ref())?;
    let spec = train_set
        .first()
        .ok_or_else(|| Error::Empty("training split".into()))?
        .noisy
        .spec()
        .clone();
    let (mut model, mut state) = if resume {
        let ckpt = Checkpoint::read(&layout.checkpoint())?;
        if ckpt.model.config() != &cfg.model {
            return Err(Error::Config("checkpoint was trained with a different [model] section".into()));
        }
        ckpt.model.spec().ensure_compatible(&spec)?;
        (ckpt.model, ckpt.state)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, INIT_STREAM, 0));
        let model = Model::new(spec, cfg.model.clone(), &mut rng)?;
        let state = TrainState::new(&model, &cfg.train);
        (model, state)
    };
    let result = fit(
        &mut model,
        &mut state,
        &train_set,
        &valid_set,
        &cfg.train,
        codec.as_ref().map(|c| c as &dyn Codec),
        on_epoch,
    );
    let checkpoint = Checkpoint {
        model,
        config: cfg.train.clone(),
        state,
    };
    checkpoint.write(&layout.checkpoint())?;
    write_text(&layout.train_log(), &log_to_jsonl(&checkpoint.state.log))?;
    result?;
    Ok(TrainOutcome {
        checkpoint: layout.checkpoint(),
        log: layout.train_log(),
        epochs_done: checkpoint.state.epochs_done,
        best_valid: checkpoint.state.best_valid,
    })
}

/// Modes a checkpoint supports: TF and BS (plus BSR once refined) for a
/// transducer, NAR for the non-autoregressive model.
pub fn supported_modes(ckpt: &Checkpoint) -> Vec<DecodeMode> {
    match ckpt.model.kind() {
        ModelKind::Nar => vec![DecodeMode::NonAutoregressive],
        ModelKind::Set => {
            let mut m = vec![DecodeMode::TeacherForced, DecodeMode::BeamSearch];
            if ckpt.state.refined() {
                m.push(DecodeMode::BeamSearchRefined);
            }
            m
        }
    }
}

/// The weights `mode` decodes with, or a mode-mismatch error.
pub fn model_for_mode(ckpt: &Checkpoint, mode: DecodeMode) -> Result<Model> {
    let mismatch = |reason: &str| Error::ModeMismatch {
        mode: mode.to_string(),
        reason: reason.to_owned(),
    };
    match (ckpt.model.kind(), mode) {
        (ModelKind::Nar, DecodeMode::NonAutoregressive) => Ok(ckpt.model.clone()),
        (ModelKind::Nar, _) => Err(mismatch("a non-autoregressive checkpoint has no predictor")),
        (ModelKind::Set, DecodeMode::NonAutoregressive) => {
            Err(mismatch("a transducer checkpoint cannot decode frame-independently"))
        }
        (ModelKind::Set, DecodeMode::BeamSearchRefined) => ckpt
            .refined_model()
            .ok_or_else(|| mismatch("the checkpoint has no refinement epochs")),
        (ModelKind::Set, _) => Ok(ckpt.teacher_forced_model()),
    }
}

/// Enhanced tokens for one noisy input. Teacher forcing needs `clean`.
pub fn decode_with(
    model: &Model,
    mode: DecodeMode,
    noisy: &TokenSequence,
    clean: Option<&TokenSequence>,
    beam: &BeamConfig,
) -> Result<TokenSequence> {
    let set = || {
        model.as_set().ok_or_else(|| Error::ModeMismatch {
            mode: mode.to_string(),
            reason: "needs a transducer model".into(),
        })
    };
    match mode {
        DecodeMode::TeacherForced => {
            let clean = clean.ok_or_else(|| Error::ModeMismatch {
                mode: mode.to_string(),
                reason: "teacher forcing needs clean targets".into(),
            })?;
            Ok(decode_teacher_forced(set()?, noisy, clean)?.0)
        }
        DecodeMode::BeamSearch | DecodeMode::BeamSearchRefined => Ok(decode_beam(set()?, noisy, beam)?.tokens),
        DecodeMode::NonAutoregressive => {
            let nar = model.as_nar().ok_or_else(|| Error::ModeMismatch {
                mode: mode.to_string(),
                reason: "needs a non-autoregressive model".into(),
            })?;
            decode_nar(nar, noisy)
        }
    }
}

fn resolve_modes(cfg: &ExperimentConfig, ckpt: &Checkpoint, modes: Option<&[DecodeMode]>) -> Vec<DecodeMode> {
    let mut m = match (modes, &cfg.eval.modes) {
        (Some(m), _) => m.to_vec(),
        (None, Some(m)) => m.clone(),
        (None, None) => supported_modes(ckpt),
    };
    m.sort();
    m.dedup();
    m
}

/// Decodes the test split in each requested mode (all supported modes by
/// default), scores it, and writes `report.json` and `report.csv`.
pub fn evaluate(cfg: &ExperimentConfig, modes: Option<&[DecodeMode]>) -> Result<EvalReport> {
    let layout = cfg.layout();
    let ckpt = Checkpoint::read(&layout.checkpoint())?;
    let modes = resolve_modes(cfg, &ckpt, modes);
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no decode modes requested".into()));
    }
    let models = modes
        .iter()
        .map(|&m| model_for_mode(&ckpt, m))
        .collect::<Result<Vec<_>>>()?;
    let codec = prepare_codec(cfg)?;
    let test = load_examples(&cfg.manifest_path(Split::Test), codec.as_ref())?;
    let mut suite = MetricSuite::proxy(ckpt.model.spec(), cfg.eval.metric_seed)?;
    if let Some(v) = cfg.eval.dnsmos_mock {
        suite = suite.with_dnsmos(Box::new(MockDnsmos(v)));
    }
    let mut items = Vec::with_capacity(modes.len() * test.len());
    for (&mode, model) in modes.iter().zip(&models) {
        let decoded = par_map(&test, |ex| decode_with(model, mode, &ex.noisy, Some(&ex.clean), &cfg.decode));
        for (ex, enhanced) in test.iter().zip(decoded) {
            items.push((ex.id.clone(), mode, enhanced?, ex.clean.clone()));
        }
    }
    let report = EvalReport::new(suite.evaluate_batch(&items)?);
    write_text(&layout.report_json(), &report.to_json()?)?;
    write_text(&layout.report_csv(), &report.to_csv())?;
    Ok(report)
}

/// The mode `enhance` and `sweep` use: refined beam search when available,
/// plain beam search otherwise, NAR for NAR checkpoints.
pub fn default_mode(ckpt: &Checkpoint) -> DecodeMode {
    match ckpt.model.kind() {
        ModelKind::Nar => DecodeMode::NonAutoregressive,
        ModelKind::Set if ckpt.state.refined() => DecodeMode::BeamSearchRefined,
        ModelKind::Set => DecodeMode::BeamSearch,
    }
}

/// What `enhance` wrote, and the items that failed.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnhanceOutcome {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(String, String)>,
}

/// Enhances every noisy entry of `input` (the test manifest by default)
/// into `enhanced/<id>.tok`, plus `enhanced/<id>.wav` when a codec is
/// configured. A failing item is recorded and the rest still run.
pub fn enhance(cfg: &ExperimentConfig, input: Option<&Path>) -> Result<EnhanceOutcome> {
    let layout = cfg.layout();
    let ckpt = Checkpoint::read(&layout.checkpoint())?;
    let mode = default_mode(&ckpt);
    let model = model_for_mode(&ckpt, mode)?;
    let codec = prepare_codec(cfg)?;
    let manifest_path = input.map_or_else(|| cfg.manifest_path(Split::Test), Path::to_path_buf);
    let manifest = read_manifest(&manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let out_dir = layout.enhanced_dir();
    create_dir(&out_dir)?;
    let results = par_map(&manifest.entries, |e| -> Result<Vec<PathBuf>> {
        let (noisy, _) = load_signal(&base.join(&e.noisy), codec.as_ref())?;
        let enhanced = decode_with(&model, mode, &noisy, None, &cfg.decode)?;
        let tok = out_dir.join(format!("{}.tok", e.id));
        enhanced.write(&tok)?;
        let mut written = vec![tok];
        if let Some(codec) = &codec {
            let wav = out_dir.join(format!("{}.wav", e.id));
            write_wav(&wav, &codec.detokenize(&enhanced)?)?;
            written.push(wav);
        }
        Ok(written)
    });
    let mut outcome = EnhanceOutcome::default();
    for (e, r) in manifest.entries.iter().zip(results) {
        match r {
            Ok(paths) => outcome.written.extend(paths),
            Err(err) => outcome.failures.push((e.id.clone(), err.to_string())),
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Number of codebooks `K`.
    Bitrate,
    /// Channel or mixture SNR in dB.
    Snr,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Bitrate => "bitrate",
            SweepAxis::Snr => "snr",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bitrate" => Ok(SweepAxis::Bitrate),
            "snr" => Ok(SweepAxis::Snr),
            other => Err(Error::InvalidArgument(format!("unknown sweep axis {other:?} (bitrate, snr)"))),
        }
    }
}

/// One model's result at one sweep point. Metrics are `NaN` when the point
/// failed, and `error` says why.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis_value: f64,
    pub model_kind: ModelKind,
    pub mode: Option<DecodeMode>,
    pub token_acc: f64,
    pub sequence_acc: f64,
    pub dwer: f64,
    pub cossim: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub charts: Vec<PathBuf>,
}

/// The config for one model kind at one sweep point, in its own directory.
pub fn sweep_point_config(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
    kind: ModelKind,
) -> Result<ExperimentConfig> {
    let mut pc = cfg.clone();
    pc.output_dir = cfg.layout().sweep_dir().join(format!("{axis}_{value}")).join(kind.to_string());
    pc.model.kind = kind;
    match axis {
        SweepAxis::Snr => match (&mut pc.data.channel, &mut pc.data.audio) {
            (Some(ch), _) => {
                if ch.substitution_rate.is_some() {
                    return Err(Error::Config("an snr sweep cannot use a fixed substitution_rate".into()));
                }
                ch.snr_db = value;
            }
            (None, Some(a)) => a.snr_db = value,
            (None, None) => return Err(Error::Config("an snr sweep needs synthesized data".into())),
        },
        SweepAxis::Bitrate => {
            let k = value as usize;
            match (&mut pc.data.channel, &mut pc.codec) {
                (Some(ch), codec) => {
                    ch.num_codebooks = k;
                    if let Some(c) = codec {
                        c.num_codebooks = k;
                    }
                }
                (None, Some(c)) if pc.data.audio.is_some() => c.num_codebooks = k,
                _ => return Err(Error::Config("a bitrate sweep needs synthesized data".into())),
            }
        }
    }
    pc.validate()?;
    Ok(pc)
}

fn validate_axis(axis: SweepAxis, values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    for &v in values {
        let ok = match axis {
            SweepAxis::Snr => v.is_finite(),
            SweepAxis::Bitrate => v.is_finite() && v >= 1.0 && v.fract() == 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("invalid {axis} value {v}")));
        }
    }
    Ok(())
}

fn run_point(pc: &ExperimentConfig) -> Result<(DecodeMode, EvalReport)> {
    synth_data(pc)?;
    train(pc, false, |_| {})?;
    let ckpt = Checkpoint::read(&pc.layout().checkpoint())?;
    let mode = default_mode(&ckpt);
    Ok((mode, evaluate(pc, Some(&[mode]))?))
}

/// Trains and evaluates both model kinds at every axis value, then writes
/// `sweep/<axis>.csv` and one line chart per metric. A failing point is
/// recorded in its row and the sweep moves on.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepOutcome> {
    validate_axis(axis, values)?;
    let mut rows = Vec::new();
    for &value in values {
        for kind in [ModelKind::Nar, ModelKind::Set] {
            let result = sweep_point_config(cfg, axis, value, kind).and_then(|pc| run_point(&pc));
            let row = match result {
                Ok((mode, report)) => {
                    let agg = report
                        .aggregate(mode)
                        .ok_or_else(|| Error::Empty("sweep point produced no records".into()))?;
                    SweepRow {
                        axis_value: value,
                        model_kind: kind,
                        mode: Some(mode),
                        token_acc: agg.token_acc,
                        sequence_acc: agg.sequence_acc,
                        dwer: agg.dwer,
                        cossim: agg.cossim,
                        error: None,
                    }
                }
                Err(e) => SweepRow {
                    axis_value: value,
                    model_kind: kind,
                    mode: None,
                    token_acc: f64::NAN,
                    sequence_acc: f64::NAN,
                    dwer: f64::NAN,
                    cossim: f64::NAN,
                    error: Some(e.to_string()),
                },
            };
            on_row(&row);
            rows.push(row);
        }
    }
    let dir = cfg.layout().sweep_dir();
    let csv = dir.join(format!("{axis}.csv"));
    write_text(&csv, &sweep_csv(&rows))?;
    let mut charts = Vec::new();
    for (name, metric) in [
        ("token_acc", (|r: &SweepRow| r.token_acc) as fn(&SweepRow) -> f64),
        ("dwer", |r: &SweepRow| r.dwer),
    ] {
        let path = dir.join(format!("{axis}_{name}.svg"));
        if render_chart(&path, axis, name, &rows, metric)? {
            charts.push(path);
        }
    }
    Ok(SweepOutcome { rows, csv, charts })
}

fn csv_number(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

/// Sweep rows as CSV: `axis_value,model_kind,mode,token_acc,sequence_acc,dwer,cossim,error`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis_value,model_kind,mode,token_acc,sequence_acc,dwer,cossim,error\n");
    for r in rows {
        let fields = [
            r.axis_value.to_string(),
            r.model_kind.to_string(),
            r.mode.map_or_else(String::new, |m| m.to_string()),
            csv_number(r.token_acc),
            csv_number(r.sequence_acc),
            csv_number(r.dwer),
            csv_number(r.cossim),
            csv_field(r.error.as_deref().unwrap_or("")),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Line chart of `metric` against the axis, one series per model kind.
/// Returns false (and writes nothing) when no point succeeded.
fn render_chart(
    path: &Path,
    axis: SweepAxis,
    metric_name: &str,
    rows: &[SweepRow],
    metric: fn(&SweepRow) -> f64,
) -> Result<bool> {
    use plotters::prelude::*;

    let series: Vec<(ModelKind, Vec<(f64, f64)>)> = [ModelKind::Nar, ModelKind::Set]
        .into_iter()
        .map(|kind| {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.model_kind == kind && r.error.is_none() && metric(r).is_finite())
                .map(|r| (r.axis_value, metric(r)))
                .collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (kind, pts)
        })
        .filter(|(_, pts)| !pts.is_empty())
        .collect();
    let all: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if all.is_empty() {
        return Ok(false);
    }
    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let pad = ((hi - lo) * 0.05).max(1e-3);
        (lo - pad)..(hi + pad)
    };
    let xs = span(&mut all.iter().map(|p| p.0));
    let ys = span(&mut all.iter().map(|p| p.1));
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let render = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("{metric_name} vs {axis}"), ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(52)
            .build_cartesian_2d(xs.clone(), ys.clone())?;
        chart.configure_mesh().x_desc(axis.to_string()).y_desc(metric_name).draw()?;
        for (i, (kind, pts)) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
                .label(kind.to_string())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
        root.present()?;
        Ok(())
    };
    render().map_err(|e| Error::Render(format!("{}: {e}", path.display())))?;
    Ok(true)
}
