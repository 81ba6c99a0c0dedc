//! Enhancement metrics: differential WER, speaker-embedding cosine
//! similarity, token accuracy, and a pluggable DNSMOS slot.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokens::{ensure_aligned, CodecSpec, TokenSequence, WaveformBuffer};

/// What a metric backend is asked to score.
#[derive(Debug, Clone, Copy)]
pub enum Signal<'a> {
    Tokens(&'a TokenSequence),
    Waveform(&'a WaveformBuffer),
}

/// Substitution, deletion and insertion counts of a minimum-edit alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment of `hypothesis` against `reference`.
/// Among equal-cost alignments the backtrace prefers substitutions, then
/// deletions, then insertions.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// `(S + D + I) / |reference|`.
pub fn word_error_rate<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Empty("WER reference".into()));
    }
    Ok(edit_counts(reference, hypothesis).total() as f64 / reference.len() as f64)
}

/// Case-sensitive whitespace tokenization.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

pub trait Transcriber: Send + Sync {
    fn transcribe(&self, signal: Signal<'_>) -> Result<Vec<String>>;
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, signal: Signal<'_>) -> Result<Vec<f64>>;
}

pub trait DnsmosBackend: Send + Sync {
    fn score(&self, signal: Signal<'_>) -> Result<f64>;
}

fn resolve_tokens<'a>(
    signal: Signal<'a>,
    codec: Option<&Arc<dyn Codec>>,
    owned: &'a mut Option<TokenSequence>,
) -> Result<&'a TokenSequence> {
    match signal {
        Signal::Tokens(t) => Ok(t),
        Signal::Waveform(w) => {
            let codec = codec.ok_or_else(|| Error::NotConfigured("proxy metrics need a codec to score waveforms".into()))?;
            Ok(owned.insert(codec.tokenize(w)?))
        }
    }
}

/// Renders codebook-0 token ids as words.
#[derive(Clone, Default)]
pub struct ProxyTranscriber {
    codec: Option<Arc<dyn Codec>>,
}

impl fmt::Debug for ProxyTranscriber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProxyTranscriber").field("has_codec", &self.codec.is_some()).finish()
    }
}

impl ProxyTranscriber {
    pub fn new() -> Self {
        Self::default()
    }

    /// Waveforms are tokenized with `codec` before transcription.
    pub fn with_codec(codec: Arc<dyn Codec>) -> Self {
        Self { codec: Some(codec) }
    }
}

impl Transcriber for ProxyTranscriber {
    fn transcribe(&self, signal: Signal<'_>) -> Result<Vec<String>> {
        let mut owned = None;
        let seq = resolve_tokens(signal, self.codec.as_ref(), &mut owned)?;
        if seq.num_codebooks() == 0 {
            return Ok(Vec::new());
        }
        Ok(seq.codebook(0).iter().map(|id| id.to_string()).collect())
    }
}

/// L2-normalized mean over frames of the summed per-codebook embeddings,
/// drawn once from a seeded standard normal.
#[derive(Clone)]
pub struct ProxyEmbedder {
    spec: CodecSpec,
    tables: Vec<Tensor>,
    codec: Option<Arc<dyn Codec>>,
}

impl fmt::Debug for ProxyEmbedder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProxyEmbedder")
            .field("spec", &self.spec)
            .field("dim", &self.dim())
            .finish()
    }
}

pub const PROXY_EMBED_DIM: usize = 64;

impl ProxyEmbedder {
    pub fn new(spec: &CodecSpec, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables = (0..spec.num_codebooks)
            .map(|_| Tensor::normal(spec.codebook_size, dim, 1.0, &mut rng))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            tables,
            codec: None,
        })
    }

    pub fn with_codec(mut self, codec: Arc<dyn Codec>) -> Self {
        self.codec = Some(codec);
        self
    }
}

impl Embedder for ProxyEmbedder {
    fn dim(&self) -> usize {
        self.tables.first().map_or(0, |t| t.cols)
    }

    fn embed(&self, signal: Signal<'_>) -> Result<Vec<f64>> {
        let mut owned = None;
        let seq = resolve_tokens(signal, self.codec.as_ref(), &mut owned)?;
        self.spec.ensure_compatible(seq.spec())?;
        if seq.is_empty() {
            return Err(Error::Empty("cannot embed an empty token sequence".into()));
        }
        let mut v = vec![0.0; self.dim()];
        for t in 0..seq.len() {
            for (k, table) in self.tables.iter().enumerate() {
                for (acc, e) in v.iter_mut().zip(table.row(seq.get(k, t) as usize)) {
                    *acc += e;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("embedding collapsed to zero".into()));
        }
        // the 1/T of the mean cancels under normalization
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Always reports that no DNSMOS backend is configured.
pub fn dnsmos_stub(_wave: &WaveformBuffer) -> Result<f64> {
    Err(Error::NotConfigured("external DNSMOS backend not configured".into()))
}

/// Returns a fixed score; stands in for a real DNSMOS backend in tests.
#[derive(Debug, Clone, Copy)]
pub struct MockDnsmos(pub f64);

impl DnsmosBackend for MockDnsmos {
    fn score(&self, _signal: Signal<'_>) -> Result<f64> {
        Ok(self.0)
    }
}

/// WER of the enhanced transcription against the clean transcription.
pub fn dwer(enhanced: Signal<'_>, clean: Signal<'_>, transcriber: &dyn Transcriber) -> Result<f64> {
    let reference = transcriber.transcribe(clean)?;
    let hypothesis = transcriber.transcribe(enhanced)?;
    word_error_rate(&reference, &hypothesis)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAccuracy {
    pub per_codebook: Vec<f64>,
    pub pooled: f64,
}

pub fn token_accuracy(pred: &TokenSequence, target: &TokenSequence) -> Result<TokenAccuracy> {
    ensure_aligned(pred, target)?;
    if target.is_empty() {
        return Err(Error::Empty("token accuracy of empty sequences".into()));
    }
    let mut hits_total = 0usize;
    let per_codebook = (0..target.num_codebooks())
        .map(|k| {
            let hits = pred.codebook(k).iter().zip(target.codebook(k)).filter(|(a, b)| a == b).count();
            hits_total += hits;
            hits as f64 / target.len() as f64
        })
        .collect();
    Ok(TokenAccuracy {
        per_codebook,
        pooled: hits_total as f64 / (target.len() * target.num_codebooks()) as f64,
    })
}

/// How an enhanced sequence was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Teacher-forced argmax: every frame conditioned on the clean history.
    #[serde(rename = "TF")]
    TeacherForced,
    /// Beam search with the teacher-forced-only weights.
    #[serde(rename = "BS")]
    BeamSearch,
    /// Beam search after free-running refinement.
    #[serde(rename = "BSR")]
    BeamSearchRefined,
    /// Frame-independent argmax of the non-autoregressive model.
    #[serde(rename = "NAR")]
    NonAutoregressive,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 4] = [
        DecodeMode::TeacherForced,
        DecodeMode::BeamSearch,
        DecodeMode::BeamSearchRefined,
        DecodeMode::NonAutoregressive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::TeacherForced => "TF",
            DecodeMode::BeamSearch => "BS",
            DecodeMode::BeamSearchRefined => "BSR",
            DecodeMode::NonAutoregressive => "NAR",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "TF" => Ok(DecodeMode::TeacherForced),
            "BS" => Ok(DecodeMode::BeamSearch),
            "BSR" => Ok(DecodeMode::BeamSearchRefined),
            "NAR" => Ok(DecodeMode::NonAutoregressive),
            other => Err(Error::InvalidArgument(format!("unknown decode mode {other:?} (TF, BS, BSR, NAR)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub mode: DecodeMode,
    pub dwer: f64,
    pub cossim: f64,
    pub token_acc: f64,
    pub exact_match: bool,
    pub dnsmos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub mode: DecodeMode,
    pub count: usize,
    pub dwer: f64,
    pub cossim: f64,
    pub token_acc: f64,
    /// Fraction of utterances decoded without a single token error.
    pub sequence_acc: f64,
    /// Mean over the records that carry a score; `None` if none do.
    pub dnsmos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregates: Vec<ModeAggregate>,
}

impl EvalReport {
    /// Aggregates are per mode, in [`DecodeMode`] order.
    pub fn new(records: Vec<EvalRecord>) -> Self {
        let mut modes: Vec<DecodeMode> = records.iter().map(|r| r.mode).collect();
        modes.sort();
        modes.dedup();
        let aggregates = modes
            .into_iter()
            .map(|mode| {
                let rs: Vec<&EvalRecord> = records.iter().filter(|r| r.mode == mode).collect();
                let n = rs.len() as f64;
                let mean = |f: &dyn Fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                let scored: Vec<f64> = rs.iter().filter_map(|r| r.dnsmos).collect();
                ModeAggregate {
                    mode,
                    count: rs.len(),
                    dwer: mean(&|r| r.dwer),
                    cossim: mean(&|r| r.cossim),
                    token_acc: mean(&|r| r.token_acc),
                    sequence_acc: mean(&|r| f64::from(u8::from(r.exact_match))),
                    dnsmos: (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64),
                }
            })
            .collect();
        Self { records, aggregates }
    }

    pub fn aggregate(&self, mode: DecodeMode) -> Option<&ModeAggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per utterance-mode pair; an unscored DNSMOS cell is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,mode,dwer,cossim,token_acc,exact_match,dnsmos\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.id),
                r.mode,
                r.dwer,
                r.cossim,
                r.token_acc,
                r.exact_match,
                r.dnsmos.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_owned()
    }
}

/// The backends used to score one enhanced/clean pair.
pub struct MetricSuite {
    pub transcriber: Box<dyn Transcriber>,
    pub embedder: Box<dyn Embedder>,
    pub dnsmos: Option<Box<dyn DnsmosBackend>>,
}

impl fmt::Debug for MetricSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricSuite")
            .field("embed_dim", &self.embedder.dim())
            .field("dnsmos", &self.dnsmos.is_some())
            .finish()
    }
}

impl MetricSuite {
    /// Proxy transcriber and embedder for `spec`; no DNSMOS.
    pub fn proxy(spec: &CodecSpec, seed: u64) -> Result<Self> {
        Ok(Self {
            transcriber: Box::new(ProxyTranscriber::new()),
            embedder: Box::new(ProxyEmbedder::new(spec, PROXY_EMBED_DIM, seed)?),
            dnsmos: None,
        })
    }

    pub fn with_dnsmos(mut self, backend: Box<dyn DnsmosBackend>) -> Self {
        self.dnsmos = Some(backend);
        self
    }

    pub fn evaluate(
        &self,
        id: &str,
        mode: DecodeMode,
        enhanced: &TokenSequence,
        clean: &TokenSequence,
    ) -> Result<EvalRecord> {
        let acc = token_accuracy(enhanced, clean)?;
        let e = self.embedder.embed(Signal::Tokens(enhanced))?;
        let c = self.embedder.embed(Signal::Tokens(clean))?;
        let dnsmos = match &self.dnsmos {
            Some(backend) => Some(backend.score(Signal::Tokens(enhanced))?),
            None => None,
        };
        Ok(EvalRecord {
            id: id.to_owned(),
            mode,
            dwer: dwer(Signal::Tokens(enhanced), Signal::Tokens(clean), self.transcriber.as_ref())?,
            cossim: cosine_similarity(&e, &c)?,
            token_acc: acc.pooled,
            exact_match: enhanced == clean,
            dnsmos,
        })
    }

    /// Scores every `(id, mode, enhanced, clean)` item, spreading the work
    /// over the available cores; output order follows input order.
    pub fn evaluate_batch(&self, items: &[(String, DecodeMode, TokenSequence, TokenSequence)]) -> Result<Vec<EvalRecord>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
        if workers <= 1 {
            return items.iter().map(|(id, m, e, c)| self.evaluate(id, *m, e, c)).collect();
        }
        let chunk = items.len().div_ceil(workers);
        let parts: Vec<Result<Vec<EvalRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|(id, m, e, c)| self.evaluate(id, *m, e, c)).collect()))
                .collect();
            handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(items.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}
