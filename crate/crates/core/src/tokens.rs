//! Shared domain types: codec descriptors, token grids, waveforms, manifests.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Codebook layout and timing of a tokenizer.
///
/// Token ids live in `[0, codebook_size)`. The id `codebook_size` is the
/// start-of-sequence token, valid only at predictor input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub frame_rate_hz: f64,
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub name: String,
}

impl CodecSpec {
    pub fn new(num_codebooks: usize, codebook_size: usize, frame_rate_hz: f64, sample_rate_hz: u32) -> Result<Self> {
        let spec = Self {
            num_codebooks,
            codebook_size,
            frame_rate_hz,
            sample_rate_hz,
            name: String::new(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks == 0 {
            return Err(Error::InvalidArgument("num_codebooks must be ≥ 1".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::InvalidArgument("codebook_size must be ≥ 2".into()));
        }
        if !(self.frame_rate_hz.is_finite() && self.frame_rate_hz > 0.0) {
            return Err(Error::InvalidArgument("frame_rate_hz must be positive".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample_rate_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn start_token(&self) -> u32 {
        self.codebook_size as u32
    }

    /// Bits per second carried by the token stream.
    pub fn bitrate_bps(&self) -> f64 {
        self.num_codebooks as f64 * (self.codebook_size as f64).log2() * self.frame_rate_hz
    }

    /// Layout equality, ignoring the label.
    pub fn compatible(&self, other: &CodecSpec) -> bool {
        self.num_codebooks == other.num_codebooks
            && self.codebook_size == other.codebook_size
            && self.frame_rate_hz == other.frame_rate_hz
            && self.sample_rate_hz == other.sample_rate_hz
    }

    pub fn ensure_compatible(&self, other: &CodecSpec) -> Result<()> {
        if self.compatible(other) {
            Ok(())
        } else {
            Err(Error::SpecMismatch(format!(
                "K={} C={} @ {} Hz vs K={} C={} @ {} Hz",
                self.num_codebooks,
                self.codebook_size,
                self.frame_rate_hz,
                other.num_codebooks,
                other.codebook_size,
                other.frame_rate_hz
            )))
        }
    }
}

/// A `K × T` grid of token ids, stored codebook-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    spec: CodecSpec,
    tokens: Vec<Vec<u32>>,
}

impl TokenSequence {
    /// Builds and validates a grid; one row per codebook.
    pub fn new(spec: CodecSpec, tokens: Vec<Vec<u32>>) -> Result<Self> {
        let seq = Self { spec, tokens };
        validate_token_sequence(&seq)?;
        Ok(seq)
    }

    pub fn empty(spec: CodecSpec) -> Self {
        let tokens = vec![Vec::new(); spec.num_codebooks];
        Self { spec, tokens }
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    pub fn num_codebooks(&self) -> usize {
        self.tokens.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn codebook(&self, k: usize) -> &[u32] {
        &self.tokens[k]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.tokens
    }

    pub fn get(&self, k: usize, t: usize) -> u32 {
        self.tokens[k][t]
    }

    /// Tokens of frame `t`, one per codebook.
    pub fn frame(&self, t: usize) -> Vec<u32> {
        self.tokens.iter().map(|row| row[t]).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.spec.frame_rate_hz
    }

    pub fn into_rows(self) -> Vec<Vec<u32>> {
        self.tokens
    }

    /// Rows widened to `usize` for embedding lookups.
    pub fn index_rows(&self) -> Vec<Vec<usize>> {
        self.tokens
            .iter()
            .map(|r| r.iter().map(|&v| v as usize).collect())
            .collect()
    }

    /// Predictor input: the start token followed by all but the last frame.
    pub fn shifted_with_start(&self) -> Vec<Vec<usize>> {
        let start = self.spec.codebook_size;
        self.tokens
            .iter()
            .map(|row| {
                let mut r = Vec::with_capacity(row.len());
                if !row.is_empty() {
                    r.push(start);
                    r.extend(row[..row.len() - 1].iter().map(|&v| v as usize));
                }
                r
            })
            .collect()
    }

    pub fn slice(&self, start: usize, end: usize) -> TokenSequence {
        TokenSequence {
            spec: self.spec.clone(),
            tokens: self.tokens.iter().map(|r| r[start..end].to_vec()).collect(),
        }
    }
}

/// Checks ids against `[0, C)` and that all codebooks share one length.
pub fn validate_token_sequence(seq: &TokenSequence) -> Result<&TokenSequence> {
    let spec = &seq.spec;
    spec.validate()?;
    if seq.tokens.len() != spec.num_codebooks {
        return Err(Error::SpecMismatch(format!(
            "grid has {} codebooks, spec declares {}",
            seq.tokens.len(),
            spec.num_codebooks
        )));
    }
    let expected = seq.tokens[0].len();
    for (k, row) in seq.tokens.iter().enumerate() {
        if row.len() != expected {
            return Err(Error::RaggedGrid {
                codebook: k,
                len: row.len(),
                expected,
            });
        }
        if let Some((t, &token)) = row
            .iter()
            .enumerate()
            .find(|(_, &v)| v as usize >= spec.codebook_size)
        {
            return Err(Error::TokenOutOfRange {
                codebook: k,
                frame: t,
                token,
                size: spec.codebook_size,
            });
        }
    }
    Ok(seq)
}

/// Appends `b` after `a` along time.
pub fn concat_time(a: &TokenSequence, b: &TokenSequence) -> Result<TokenSequence> {
    if a.spec != b.spec {
        return Err(Error::SpecMismatch(format!(
            "cannot concatenate K={} C={} with K={} C={}",
            a.spec.num_codebooks, a.spec.codebook_size, b.spec.num_codebooks, b.spec.codebook_size
        )));
    }
    let tokens = a
        .tokens
        .iter()
        .zip(&b.tokens)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect();
    Ok(TokenSequence {
        spec: a.spec.clone(),
        tokens,
    })
}

/// Noisy and clean grids of one utterance must line up frame for frame.
pub fn ensure_aligned(noisy: &TokenSequence, clean: &TokenSequence) -> Result<()> {
    noisy.spec.ensure_compatible(&clean.spec)?;
    if noisy.len() != clean.len() {
        return Err(Error::LengthMismatch(format!(
            "noisy has {} frames, clean has {}",
            noisy.len(),
            clean.len()
        )));
    }
    Ok(())
}

const TOKSEQ_MAGIC: &[u8; 8] = b"TOKSEQ\0\0";
const TOKSEQ_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TokSeqHeader {
    k: usize,
    c: usize,
    t: usize,
    frame_rate_hz: f64,
    #[serde(default = "default_sample_rate")]
    sample_rate_hz: u32,
    #[serde(default)]
    name: String,
}

fn default_sample_rate() -> u32 {
    16_000
}

impl TokenSequence {
    /// Binary container: 8-byte magic, version byte, 3 reserved bytes, u32 LE
    /// header length, JSON header, then `K·T` u32 LE ids row by row.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = TokSeqHeader {
            k: self.spec.num_codebooks,
            c: self.spec.codebook_size,
            t: self.len(),
            frame_rate_hz: self.spec.frame_rate_hz,
            sample_rate_hz: self.spec.sample_rate_hz,
            name: self.spec.name.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.len() * self.num_codebooks());
        out.extend_from_slice(TOKSEQ_MAGIC);
        out.push(TOKSEQ_VERSION);
        out.extend_from_slice(&[0, 0, 0]);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for row in &self.tokens {
            for v in row {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != TOKSEQ_MAGIC {
            return Err(Error::Malformed("missing TOKSEQ magic".into()));
        }
        if bytes[8] != TOKSEQ_VERSION {
            return Err(Error::Malformed(format!("unsupported TOKSEQ version {}", bytes[8])));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Malformed("truncated TOKSEQ header".into()))?;
        let header: TokSeqHeader = serde_json::from_slice(body)?;
        let data = &bytes[16 + hlen..];
        if data.len() != 4 * header.k * header.t {
            return Err(Error::Malformed(format!(
                "expected {} payload bytes, found {}",
                4 * header.k * header.t,
                data.len()
            )));
        }
        let mut ids = data
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")));
        let tokens = (0..header.k)
            .map(|_| ids.by_ref().take(header.t).collect())
            .collect();
        let spec = CodecSpec {
            num_codebooks: header.k,
            codebook_size: header.c,
            frame_rate_hz: header.frame_rate_hz,
            sample_rate_hz: header.sample_rate_hz,
            name: header.name,
        };
        TokenSequence::new(spec, tokens)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A partial decoding result.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// The first `t ≤ T` frames of a decode.
    pub tokens: TokenSequence,
    /// Sum of per-step, per-codebook log-probabilities.
    pub log_score: f64,
}

impl Hypothesis {
    pub fn empty(spec: CodecSpec) -> Self {
        Self {
            tokens: TokenSequence::empty(spec),
            log_score: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Mono audio in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSamples);
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: String,
    pub clean: String,
    pub duration_s: f64,
}

/// Utterance list: ids unique, durations positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::DuplicateId(e.id.clone()));
            }
            if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                return Err(Error::Malformed(format!(
                    "utterance `{}` has non-positive duration {}",
                    e.id, e.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.entries.iter().map(|e| e.duration_s).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(text)?;
        Manifest::new(entries)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::from_json(&text)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    write_file(path, manifest.to_json().as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
