//! Residual vector quantizer over filterbank features, plus a seeded corpus
//! of synthetic voiced signals to learn its codebooks from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::filterbank::Filterbank;
use super::kmeans::{nearest_center, train_kmeans};
use super::Codec;
use crate::archive::{round_to_f32, Archive};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::tokens::{CodecSpec, TokenSequence, WaveformBuffer};

pub const DEFAULT_BANDS: usize = 24;
/// Utterances in the codebook-training corpus.
pub const CORPUS_SIZE: usize = 160;
pub const CORPUS_DURATION_S: f64 = 1.0;

/// A linear chirp from `f0` to `f1` Hz at amplitude 0.5.
pub fn sine_sweep(f0: f64, f1: f64, duration_s: f64, sample_rate_hz: u32) -> WaveformBuffer {
    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * (f1 - f0) / duration_s * t * t);
            0.5 * phase.sin()
        })
        .collect();
    WaveformBuffer::new(samples, sample_rate_hz).expect("finite chirp")
}

/// A voiced, syllable-modulated harmonic signal with a gliding pitch and a
/// little breath noise. Fully determined by `seed`.
pub fn synthetic_signal(seed: u64, duration_s: f64, sample_rate_hz: u32) -> WaveformBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate_hz as f64;
    let n = (duration_s * sr).round() as usize;
    let f_start = rng.random_range(90.0..260.0);
    let f_end = f_start * rng.random_range(0.7..1.4);
    let syllable_hz = rng.random_range(2.5..6.0);
    let harmonics = rng.random_range(3..9usize);
    let tilt = rng.random_range(0.5..1.2);
    let formant = rng.random_range(400.0..2500.0);
    let noise = rng.random_range(0.002..0.02);
    let mut phase = 0.0;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / sr;
        let f0 = f_start + (f_end - f_start) * t / duration_s.max(1e-9);
        phase += 2.0 * std::f64::consts::PI * f0 / sr;
        let env = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * syllable_hz * t).cos();
        let mut s = 0.0;
        for h in 1..=harmonics {
            let fh = f0 * h as f64;
            if fh >= sr / 2.0 {
                break;
            }
            let resonance = (-((fh - formant) / 800.0).powi(2)).exp();
            s += (h as f64).powf(-tilt) * (0.3 + resonance) * (phase * h as f64).sin();
        }
        let breath: f64 = rng.random_range(-1.0..1.0);
        samples.push(0.3 * env * s + noise * breath);
    }
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-9);
    WaveformBuffer::new(samples.iter().map(|s| 0.8 * s / peak).collect(), sample_rate_hz)
        .expect("finite signal")
}

/// The codebook-training corpus for `seed`: mostly voiced signals, with
/// every fourth item a chirp between random frequencies.
pub fn training_corpus(seed: u64, count: usize, duration_s: f64, sample_rate_hz: u32) -> Vec<WaveformBuffer> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    (0..count)
        .map(|i| {
            let item_seed = derive_seed(seed, 0xC0, i as u64);
            if i % 4 == 3 {
                let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
                let f0 = rng.random_range(50.0..0.45 * nyquist);
                let f1 = rng.random_range(50.0..0.9 * nyquist);
                sine_sweep(f0, f1, duration_s, sample_rate_hz)
            } else {
                synthetic_signal(item_seed, duration_s, sample_rate_hz)
            }
        })
        .collect()
}

/// `‖reference − approx‖_F / ‖reference‖_F`.
pub fn relative_feature_error(reference: &Tensor, approx: &Tensor) -> Result<f64> {
    if !reference.same_shape(approx) {
        return Err(Error::ShapeMismatch(format!(
            "{}×{} vs {}×{}",
            reference.rows, reference.cols, approx.rows, approx.cols
        )));
    }
    let num: f64 = reference.data.iter().zip(&approx.data).map(|(a, b)| (a - b) * (a - b)).sum();
    let den = reference.sum_sq();
    if den == 0.0 {
        return Ok(if num == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok((num / den).sqrt())
}

/// K residual stages of C codewords each. Codeword 0 of every stage is the
/// zero vector, so adding a stage can never move a frame further from its
/// target: reconstruction error is non-increasing in the number of stages.
#[derive(Debug, Clone)]
pub struct SyntheticCodec {
    spec: CodecSpec,
    filterbank: Filterbank,
    /// Global feature mean removed before the first stage.
    mean: Vec<f64>,
    /// `C × num_bands` per stage.
    stage_codebooks: Vec<Tensor>,
    seed: u64,
}

impl SyntheticCodec {
    /// Learns the codebooks from the default seeded corpus.
    pub fn train(spec: &CodecSpec, seed: u64) -> Result<Self> {
        let corpus = training_corpus(seed, CORPUS_SIZE, CORPUS_DURATION_S, spec.sample_rate_hz);
        Self::train_on(spec, &corpus, DEFAULT_BANDS, seed)
    }

    pub fn train_on(spec: &CodecSpec, corpus: &[WaveformBuffer], num_bands: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if corpus.is_empty() {
            return Err(Error::Empty("codec training corpus".into()));
        }
        let filterbank = Filterbank::new(spec.sample_rate_hz, spec.frame_rate_hz, num_bands)?;
        let mut frames = Vec::new();
        for w in corpus {
            let f = filterbank.analyze(w)?;
            frames.extend((0..f.rows).map(|r| f.row(r).to_vec()));
        }
        let mut residual = Tensor::from_rows(&frames);
        let mean: Vec<f64> = (0..num_bands)
            .map(|b| (0..residual.rows).map(|r| residual.get(r, b)).sum::<f64>() / residual.rows as f64)
            .map(|m: f64| m as f32 as f64)
            .collect();
        for r in 0..residual.rows {
            for (x, m) in residual.row_mut(r).iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        let c = spec.codebook_size;
        let mut stage_codebooks = Vec::with_capacity(spec.num_codebooks);
        for k in 0..spec.num_codebooks {
            let mut book = Tensor::zeros(c, num_bands);
            let learned = if c > 2 {
                train_kmeans(&residual, c - 1, derive_seed(seed, 0x57A6E, k as u64))?.quantizer.centers
            } else {
                let centroid: Vec<f64> = (0..num_bands)
                    .map(|b| (0..residual.rows).map(|r| residual.get(r, b)).sum::<f64>() / residual.rows as f64)
                    .collect();
                Tensor::from_rows(&[centroid])
            };
            for j in 0..learned.rows {
                book.row_mut(j + 1).copy_from_slice(learned.row(j));
            }
            // stored as f32, so quantize with exactly what a checkpoint holds
            round_to_f32(&mut book);
            for r in 0..residual.rows {
                let (id, _) = nearest_center(&book, residual.row(r));
                for (x, q) in residual.row_mut(r).iter_mut().zip(book.row(id)) {
                    *x -= q;
                }
            }
            stage_codebooks.push(book);
        }
        Ok(Self {
            spec: spec.clone(),
            filterbank,
            mean,
            stage_codebooks,
            seed,
        })
    }

    /// The same codec restricted to its first `k` stages.
    pub fn with_stages(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.stage_codebooks.len() {
            return Err(Error::InvalidArgument(format!(
                "stage count {k} outside 1..={}",
                self.stage_codebooks.len()
            )));
        }
        let mut spec = self.spec.clone();
        spec.num_codebooks = k;
        Ok(Self {
            spec,
            filterbank: self.filterbank.clone(),
            mean: self.mean.clone(),
            stage_codebooks: self.stage_codebooks[..k].to_vec(),
            seed: self.seed,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_bands(&self) -> usize {
        self.filterbank.num_bands
    }

    pub fn stage_codebooks(&self) -> &[Tensor] {
        &self.stage_codebooks
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn filterbank(&self) -> &Filterbank {
        &self.filterbank
    }

    pub fn features(&self, wave: &WaveformBuffer) -> Result<Tensor> {
        if wave.is_empty() {
            return Err(Error::Empty("waveform".into()));
        }
        self.filterbank.analyze(wave)
    }

    pub fn encode_features(&self, features: &Tensor) -> Result<TokenSequence> {
        if features.cols != self.num_bands() {
            return Err(Error::ShapeMismatch(format!(
                "features have {} bands, codec expects {}",
                features.cols,
                self.num_bands()
            )));
        }
        let mut tokens = vec![Vec::with_capacity(features.rows); self.stage_codebooks.len()];
        let mut residual = vec![0.0; self.num_bands()];
        for t in 0..features.rows {
            for ((r, x), m) in residual.iter_mut().zip(features.row(t)).zip(&self.mean) {
                *r = x - m;
            }
            for (k, book) in self.stage_codebooks.iter().enumerate() {
                let (id, _) = nearest_center(book, &residual);
                for (r, q) in residual.iter_mut().zip(book.row(id)) {
                    *r -= q;
                }
                tokens[k].push(id as u32);
            }
        }
        TokenSequence::new(self.spec.clone(), tokens)
    }

    pub fn decode_features(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.spec.ensure_compatible(seq.spec())?;
        let mut out = Tensor::zeros(seq.len(), self.num_bands());
        for t in 0..seq.len() {
            let row = out.row_mut(t);
            row.copy_from_slice(&self.mean);
            for (k, book) in self.stage_codebooks.iter().enumerate() {
                let id = seq.get(k, t) as usize;
                for (o, q) in row.iter_mut().zip(book.row(id)) {
                    *o += q;
                }
            }
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            "codec",
            json!({
                "codec": "synthetic",
                "spec": self.spec,
                "seed": self.seed,
                "num_bands": self.num_bands(),
                "shapes": self.stage_codebooks.iter().map(|b| [b.rows, b.cols]).collect::<Vec<_>>(),
            }),
        );
        a.push("mean", Tensor::from_vec(1, self.mean.len(), self.mean.clone()));
        for (k, book) in self.stage_codebooks.iter().enumerate() {
            a.push(format!("stage.{k}"), book.clone());
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let spec: CodecSpec = serde_json::from_value(a.meta["spec"].clone())?;
        spec.validate()?;
        let seed = a.meta["seed"].as_u64().ok_or_else(|| Error::Malformed("codec seed".into()))?;
        let num_bands = a.meta["num_bands"]
            .as_u64()
            .ok_or_else(|| Error::Malformed("codec num_bands".into()))? as usize;
        let filterbank = Filterbank::new(spec.sample_rate_hz, spec.frame_rate_hz, num_bands)?;
        let mean = a.get("mean")?.data.clone();
        let stage_codebooks = (0..spec.num_codebooks)
            .map(|k| a.get(&format!("stage.{k}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        if mean.len() != num_bands
            || stage_codebooks
                .iter()
                .any(|b| b.rows != spec.codebook_size || b.cols != num_bands)
        {
            return Err(Error::Malformed("codec array shapes disagree with metadata".into()));
        }
        Ok(Self {
            spec,
            filterbank,
            mean,
            stage_codebooks,
            seed,
        })
    }
}

impl Codec for SyntheticCodec {
    fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    fn tokenize(&self, wave: &WaveformBuffer) -> Result<TokenSequence> {
        let f = self.features(wave)?;
        self.encode_features(&f)
    }

    fn detokenize(&self, seq: &TokenSequence) -> Result<WaveformBuffer> {
        let f = self.decode_features(seq)?;
        self.filterbank.synthesize(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(k: usize, c: usize) -> CodecSpec {
        CodecSpec::new(k, c, 50.0, 16_000).unwrap()
    }

    fn codec(k: usize) -> SyntheticCodec {
        let spec = small_spec(k, 16);
        let corpus = training_corpus(7, 6, 0.5, 16_000);
        SyntheticCodec::train_on(&spec, &corpus, 12, 7).unwrap()
    }

    #[test]
    fn frame_count_and_length_bookkeeping() {
        let c = codec(2);
        let w = synthetic_signal(1, 1.0, 16_000);
        let seq = c.tokenize(&w).unwrap();
        assert_eq!(seq.len(), 50);
        let y = c.detokenize(&seq).unwrap();
        assert!((y.len() as i64 - w.len() as i64).unsigned_abs() as usize <= c.filterbank().hop);
        let empty = TokenSequence::empty(c.spec().clone());
        assert_eq!(c.detokenize(&empty).unwrap().len(), 0);
    }

    #[test]
    fn codeword_zero_is_pinned() {
        let c = codec(3);
        for book in c.stage_codebooks() {
            assert!(book.row(0).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn archive_round_trip_preserves_tokens() {
        let c = codec(2);
        let back = SyntheticCodec::from_archive(&Archive::from_bytes(&c.to_archive().to_bytes()).unwrap()).unwrap();
        let w = synthetic_signal(3, 0.3, 16_000);
        assert_eq!(c.tokenize(&w).unwrap(), back.tokenize(&w).unwrap());
    }

    #[test]
    fn rejects_empty_and_mismatched_waves() {
        let c = codec(1);
        assert!(matches!(
            c.tokenize(&WaveformBuffer::new(vec![], 16_000).unwrap()),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            c.tokenize(&synthetic_signal(1, 0.2, 8_000)),
            Err(Error::SampleRateMismatch { .. })
        ));
    }
}
