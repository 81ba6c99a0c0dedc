//! Tokenizers and detokenizers: waveform ↔ token grid.

pub mod dequantizer;
pub mod filterbank;
pub mod kmeans;
pub mod synthetic;
pub mod wav;

use std::path::Path;

use serde_json::json;

pub use dequantizer::{train_dequantizer, Dequantizer, DequantizerConfig, DequantizerFit};
pub use filterbank::Filterbank;
pub use kmeans::{train_kmeans, train_kmeans_with, KMeansFit, KMeansQuantizer};
pub use synthetic::{relative_feature_error, sine_sweep, synthetic_signal, training_corpus, SyntheticCodec};
pub use wav::{read_wav, write_wav};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::model::{load_params, push_params};
use crate::tensor::Tensor;
use crate::tokens::{CodecSpec, TokenSequence, WaveformBuffer};

/// A trained, immutable tokenizer/detokenizer pair.
pub trait Codec: Send + Sync {
    fn spec(&self) -> &CodecSpec;
    fn tokenize(&self, wave: &WaveformBuffer) -> Result<TokenSequence>;
    fn detokenize(&self, seq: &TokenSequence) -> Result<WaveformBuffer>;
}

/// Semantic-style tokens: a single k-means codebook over filterbank
/// features, detokenized through a learned dequantizer.
#[derive(Debug, Clone)]
pub struct KMeansCodec {
    spec: CodecSpec,
    filterbank: Filterbank,
    quantizer: KMeansQuantizer,
    dequantizer: Option<Dequantizer>,
}

impl KMeansCodec {
    /// Fits the quantizer on `corpus` (C clusters) and, when
    /// `dequantizer` is given, trains a dequantizer on the resulting pairs.
    pub fn train(
        spec: &CodecSpec,
        corpus: &[WaveformBuffer],
        num_bands: usize,
        seed: u64,
        dequantizer: Option<&DequantizerConfig>,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.num_codebooks != 1 {
            return Err(Error::SpecMismatch("k-means tokens use a single codebook".into()));
        }
        let filterbank = Filterbank::new(spec.sample_rate_hz, spec.frame_rate_hz, num_bands)?;
        let feats = corpus.iter().map(|w| filterbank.analyze(w)).collect::<Result<Vec<_>>>()?;
        let rows: Vec<Vec<f64>> = feats
            .iter()
            .flat_map(|f| (0..f.rows).map(move |r| f.row(r).to_vec()))
            .collect();
        if rows.is_empty() {
            return Err(Error::Empty("k-means training corpus".into()));
        }
        let mut centers = train_kmeans(&Tensor::from_rows(&rows), spec.codebook_size, seed)?
            .quantizer
            .centers;
        crate::archive::round_to_f32(&mut centers);
        let quantizer = KMeansQuantizer::new(centers)?;
        let dequantizer = match dequantizer {
            None => None,
            Some(cfg) => {
                let pairs = feats
                    .into_iter()
                    .map(|f| Ok((quantizer.quantize(&f, spec)?, f)))
                    .collect::<Result<Vec<_>>>()?;
                let mut d = train_dequantizer(&pairs, cfg)?.dequantizer;
                // stored as f32, so round now to make reloads bit-identical
                for p in d.store.iter_mut() {
                    crate::archive::round_to_f32(&mut p.value);
                }
                Some(d)
            }
        };
        Ok(Self {
            spec: spec.clone(),
            filterbank,
            quantizer,
            dequantizer,
        })
    }

    pub fn quantizer(&self) -> &KMeansQuantizer {
        &self.quantizer
    }

    pub fn features(&self, wave: &WaveformBuffer) -> Result<Tensor> {
        if wave.is_empty() {
            return Err(Error::Empty("waveform".into()));
        }
        self.filterbank.analyze(wave)
    }

    /// Continuous features for `seq`: the dequantizer when trained, the
    /// centre lookup otherwise.
    pub fn decode_features(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.spec.ensure_compatible(seq.spec())?;
        match &self.dequantizer {
            Some(d) => d.apply(seq),
            None => self.quantizer.dequantize_lookup(seq),
        }
    }

    pub fn dequantizer(&self) -> Option<&Dequantizer> {
        self.dequantizer.as_ref()
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new(
            "codec",
            json!({
                "codec": "kmeans",
                "spec": self.spec,
                "num_bands": self.filterbank.num_bands,
                "shapes": [[self.quantizer.centers.rows, self.quantizer.centers.cols]],
            }),
        );
        a.push("centers", self.quantizer.centers.clone());
        if let Some(d) = &self.dequantizer {
            a.meta["dequantizer"] = json!({ "config": d.config, "feature_dim": d.feature_dim });
            push_params(&mut a, &d.store, "dequantizer");
        }
        a
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let spec: CodecSpec = serde_json::from_value(a.meta["spec"].clone())?;
        spec.validate()?;
        let num_bands = a.meta["num_bands"]
            .as_u64()
            .ok_or_else(|| Error::Malformed("codec num_bands".into()))? as usize;
        let centers = a.get("centers")?.clone();
        if centers.rows != spec.codebook_size || centers.cols != num_bands {
            return Err(Error::Malformed("centers disagree with metadata".into()));
        }
        let dequantizer = match a.meta.get("dequantizer") {
            None => None,
            Some(meta) => {
                let config: DequantizerConfig = serde_json::from_value(meta["config"].clone())?;
                let dim = meta["feature_dim"]
                    .as_u64()
                    .ok_or_else(|| Error::Malformed("dequantizer feature_dim".into()))? as usize;
                let mut d = Dequantizer::new(&spec, dim, &config)?;
                load_params(a, &mut d.store, "dequantizer")?;
                Some(d)
            }
        };
        Ok(Self {
            filterbank: Filterbank::new(spec.sample_rate_hz, spec.frame_rate_hz, num_bands)?,
            quantizer: KMeansQuantizer::new(centers)?,
            spec,
            dequantizer,
        })
    }
}

impl Codec for KMeansCodec {
    fn spec(&self) -> &CodecSpec {
        &self.spec
    }

    fn tokenize(&self, wave: &WaveformBuffer) -> Result<TokenSequence> {
        let f = self.features(wave)?;
        self.quantizer.quantize(&f, &self.spec)
    }

    fn detokenize(&self, seq: &TokenSequence) -> Result<WaveformBuffer> {
        let f = self.decode_features(seq)?;
        self.filterbank.synthesize(&f)
    }
}

/// Either codec, as loaded from a checkpoint.
#[derive(Debug, Clone)]
pub enum AnyCodec {
    Synthetic(SyntheticCodec),
    KMeans(KMeansCodec),
}

impl AnyCodec {
    pub fn to_archive(&self) -> Archive {
        match self {
            AnyCodec::Synthetic(c) => c.to_archive(),
            AnyCodec::KMeans(c) => c.to_archive(),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        if a.kind != "codec" {
            return Err(Error::Malformed(format!("expected a codec archive, found {:?}", a.kind)));
        }
        match a.meta["codec"].as_str() {
            Some("synthetic") => Ok(AnyCodec::Synthetic(SyntheticCodec::from_archive(a)?)),
            Some("kmeans") => Ok(AnyCodec::KMeans(KMeansCodec::from_archive(a)?)),
            other => Err(Error::Malformed(format!("unknown codec kind {other:?}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }

    fn inner(&self) -> &dyn Codec {
        match self {
            AnyCodec::Synthetic(c) => c,
            AnyCodec::KMeans(c) => c,
        }
    }
}

impl Codec for AnyCodec {
    fn spec(&self) -> &CodecSpec {
        self.inner().spec()
    }

    fn tokenize(&self, wave: &WaveformBuffer) -> Result<TokenSequence> {
        self.inner().tokenize(wave)
    }

    fn detokenize(&self, seq: &TokenSequence) -> Result<WaveformBuffer> {
        self.inner().detokenize(seq)
    }
}
