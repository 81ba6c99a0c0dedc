//! The two token language models: a non-autoregressive Conformer (NAR) and
//! the Speech Enhancement Transducer (SET).
//!
//! NAR maps noisy tokens to per-frame distributions in one pass, so its
//! predictions are conditionally independent given the input. SET factorizes
//! `p(y | x) = Π_t p(y_t | x, y_{<t})`: a non-causal encoder reads the noisy
//! tokens, a causal predictor reads the previously emitted clean tokens
//! (shifted right behind a start token), and a joiner combines them frame by
//! frame. Alignment is the identity, so there is no blank symbol.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::nn::{CodebookEmbeddings, Conformer, ConformerConfig, Graph, Linear, ParamStore, Var};
use crate::tensor::{log_softmax, Tensor};
use crate::tokens::{CodecSpec, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Nar,
    Set,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Nar => "nar",
            ModelKind::Set => "set",
        })
    }
}

fn default_joiner_dim() -> usize {
    120
}

fn default_max_rel_pos() -> usize {
    64
}

/// Architecture hyperparameters shared by both model kinds.
///
/// `num_layers` is the NAR depth. SET spends one of those layers on its
/// predictor, so its encoder has `num_layers − 1` layers unless
/// `set_encoder_layers` says otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub conv_kernel: usize,
    #[serde(default = "default_max_rel_pos")]
    pub max_rel_pos: usize,
    #[serde(default = "default_joiner_dim")]
    pub joiner_dim: usize,
    /// Give the predictor branch its own joiner projection.
    #[serde(default)]
    pub separate_joiner_projections: bool,
    #[serde(default)]
    pub set_encoder_layers: Option<usize>,
}

impl ModelConfig {
    /// Full-size dimensions: 6 layers, 4 heads, width 256, FFN 2048.
    pub fn full_size(kind: ModelKind) -> Self {
        Self {
            kind,
            num_layers: 6,
            num_heads: 4,
            model_dim: 256,
            ffn_dim: 2048,
            dropout_p: 0.1,
            conv_kernel: 31,
            max_rel_pos: 64,
            joiner_dim: 120,
            separate_joiner_projections: false,
            set_encoder_layers: None,
        }
    }

    pub fn encoder_layers(&self) -> usize {
        match self.kind {
            ModelKind::Nar => self.num_layers,
            ModelKind::Set => self
                .set_encoder_layers
                .unwrap_or(self.num_layers.saturating_sub(1)),
        }
    }

    fn conformer(&self, num_layers: usize, causal: bool) -> ConformerConfig {
        ConformerConfig {
            num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            dropout_p: self.dropout_p,
            causal,
            conv_kernel: self.conv_kernel,
            max_rel_pos: self.max_rel_pos,
        }
    }

    pub fn encoder_config(&self) -> ConformerConfig {
        self.conformer(self.encoder_layers(), false)
    }

    pub fn predictor_config(&self) -> ConformerConfig {
        self.conformer(1, true)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        if self.kind == ModelKind::Nar && self.num_layers == 0 {
            return Err(Error::Config("NAR model needs at least one layer".into()));
        }
        if self.joiner_dim == 0 {
            return Err(Error::Config("joiner_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Per-codebook logits: `K` tensors of shape `T × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub per_codebook: Vec<Tensor>,
}

impl Logits {
    pub fn num_codebooks(&self) -> usize {
        self.per_codebook.len()
    }

    pub fn len(&self) -> usize {
        self.per_codebook.first().map_or(0, |t| t.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_probs(&self, k: usize, t: usize) -> Vec<f64> {
        log_softmax(self.per_codebook[k].row(t))
    }

    /// Row-wise argmax, ties to the lowest id.
    pub fn argmax(&self, spec: &CodecSpec) -> TokenSequence {
        let rows = self
            .per_codebook
            .iter()
            .map(|l| (0..l.rows).map(|t| l.argmax_row(t) as u32).collect())
            .collect();
        TokenSequence::new(spec.clone(), rows).expect("argmax ids are in range")
    }
}

/// Non-autoregressive Conformer: K summed embeddings → encoder → K heads.
#[derive(Debug, Clone)]
pub struct NarModel {
    pub spec: CodecSpec,
    pub config: ModelConfig,
    pub store: ParamStore,
    embed: CodebookEmbeddings,
    encoder: Conformer,
    heads: Vec<Linear>,
}

impl NarModel {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, config: ModelConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if config.kind != ModelKind::Nar {
            return Err(Error::Config("NarModel needs kind = nar".into()));
        }
        let (k, c, d) = (spec.num_codebooks, spec.codebook_size, config.model_dim);
        let mut store = ParamStore::new();
        let embed = CodebookEmbeddings::new(&mut store, "embed", k, c, d, rng);
        let encoder = Conformer::new(&mut store, "encoder", &config.encoder_config(), rng);
        let heads = (0..k)
            .map(|i| Linear::new(&mut store, &format!("head.{i}"), d, c, rng))
            .collect();
        Ok(Self {
            spec,
            config,
            store,
            embed,
            encoder,
            heads,
        })
    }

    /// Records the forward pass; returns one `T × C` logit node per codebook.
    pub fn forward_graph<R: Rng + ?Sized>(&self, g: &mut Graph, noisy: &[Vec<usize>], rng: &mut R) -> Vec<Var> {
        let x = self.embed.forward(g, noisy);
        let h = self.encoder.forward(g, x, rng);
        self.heads.iter().map(|head| head.forward(g, h)).collect()
    }
}

/// Speech Enhancement Transducer.
#[derive(Debug, Clone)]
pub struct SetModel {
    pub spec: CodecSpec,
    pub config: ModelConfig,
    pub store: ParamStore,
    enc_embed: CodebookEmbeddings,
    encoder: Conformer,
    pred_embed: CodebookEmbeddings,
    predictor: Conformer,
    joiner_proj: Linear,
    joiner_proj_pred: Option<Linear>,
    heads: Vec<Linear>,
}

impl SetModel {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, config: ModelConfig, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        config.validate()?;
        if config.kind != ModelKind::Set {
            return Err(Error::Config("SetModel needs kind = set".into()));
        }
        let (k, c, d, j) = (spec.num_codebooks, spec.codebook_size, config.model_dim, config.joiner_dim);
        let mut store = ParamStore::new();
        let enc_embed = CodebookEmbeddings::new(&mut store, "encoder_embed", k, c, d, rng);
        let encoder = Conformer::new(&mut store, "encoder", &config.encoder_config(), rng);
        let pred_embed = CodebookEmbeddings::new(&mut store, "predictor_embed", k, c + 1, d, rng);
        let predictor = Conformer::new(&mut store, "predictor", &config.predictor_config(), rng);
        let joiner_proj = Linear::new(&mut store, "joiner.proj", d, j, rng);
        let joiner_proj_pred = config
            .separate_joiner_projections
            .then(|| Linear::new(&mut store, "joiner.proj_pred", d, j, rng));
        let heads = (0..k)
            .map(|i| Linear::new(&mut store, &format!("joiner.head.{i}"), j, c, rng))
            .collect();
        Ok(Self {
            spec,
            config,
            store,
            enc_embed,
            encoder,
            pred_embed,
            predictor,
            joiner_proj,
            joiner_proj_pred,
            heads,
        })
    }

    pub fn start_token(&self) -> usize {
        self.spec.codebook_size
    }

    /// Encoder states projected into the joiner space (`T × joiner_dim`).
    pub fn encode_graph<R: Rng + ?Sized>(&self, g: &mut Graph, noisy: &[Vec<usize>], rng: &mut R) -> Var {
        let x = self.enc_embed.forward(g, noisy);
        let h = self.encoder.forward(g, x, rng);
        self.joiner_proj.forward(g, h)
    }

    /// Predictor states projected into the joiner space.
    pub fn predict_graph<R: Rng + ?Sized>(&self, g: &mut Graph, history: &[Vec<usize>], rng: &mut R) -> Var {
        let x = self.pred_embed.forward(g, history);
        let h = self.predictor.forward(g, x, rng);
        self.joiner_proj_pred.as_ref().unwrap_or(&self.joiner_proj).forward(g, h)
    }

    /// `heads(tanh(enc + pred))`, one node per codebook.
    pub fn join_graph(&self, g: &mut Graph, enc: Var, pred: Var) -> Vec<Var> {
        let s = g.add(enc, pred);
        let z = g.tanh(s);
        self.heads.iter().map(|head| head.forward(g, z)).collect()
    }

    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        noisy: &[Vec<usize>],
        history: &[Vec<usize>],
        rng: &mut R,
    ) -> Vec<Var> {
        let enc = self.encode_graph(g, noisy, rng);
        let pred = self.predict_graph(g, history, rng);
        self.join_graph(g, enc, pred)
    }

    /// Projected encoder states for a whole utterance, computed once per
    /// decode.
    pub fn encode(&self, noisy: &TokenSequence) -> Result<Tensor> {
        self.spec.ensure_compatible(noisy.spec())?;
        if noisy.is_empty() {
            return Ok(Tensor::zeros(0, self.config.joiner_dim));
        }
        let mut g = Graph::new(&self.store);
        let mut rng = inference_rng();
        let enc = self.encode_graph(&mut g, &noisy.index_rows(), &mut rng);
        Ok(g.value(enc).clone())
    }

    /// Log-probabilities for frame `t = history_len − 1`, given the projected
    /// encoder states and the predictor input `[<s>, y_0, …, y_{t−1}]`.
    pub fn step_log_probs(&self, enc: &Tensor, history: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let t = history[0].len() - 1;
        let mut g = Graph::new(&self.store);
        let mut rng = inference_rng();
        let pred = self.predict_graph(&mut g, history, &mut rng);
        let pred_row = g.value(pred).rows_range(t, t + 1);
        let enc_row = enc.rows_range(t, t + 1);
        let mut g = Graph::new(&self.store);
        let e = g.input(enc_row);
        let p = g.input(pred_row);
        self.join_graph(&mut g, e, p)
            .into_iter()
            .map(|v| log_softmax(g.value(v).row(0)))
            .collect()
    }
}

/// Dropout is inert at inference; this stream is never drawn from.
fn inference_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

fn collect_logits(g: &Graph, vars: Vec<Var>) -> Logits {
    Logits {
        per_codebook: vars.into_iter().map(|v| g.value(v).clone()).collect(),
    }
}

fn empty_logits(spec: &CodecSpec) -> Logits {
    Logits {
        per_codebook: vec![Tensor::zeros(0, spec.codebook_size); spec.num_codebooks],
    }
}

/// One inference pass of the NAR model.
pub fn nar_forward(model: &NarModel, noisy: &TokenSequence) -> Result<Logits> {
    model.spec.ensure_compatible(noisy.spec())?;
    if noisy.is_empty() {
        return Ok(empty_logits(&model.spec));
    }
    let mut g = Graph::new(&model.store);
    let vars = model.forward_graph(&mut g, &noisy.index_rows(), &mut inference_rng());
    Ok(collect_logits(&g, vars))
}

/// Checks a predictor input grid: `K` rows, the noisy length, start token
/// first, ids in `[0, C]`.
pub fn validate_history(spec: &CodecSpec, noisy_len: usize, history: &[Vec<usize>]) -> Result<()> {
    if history.len() != spec.num_codebooks {
        return Err(Error::SpecMismatch(format!(
            "predictor input has {} codebooks, expected {}",
            history.len(),
            spec.num_codebooks
        )));
    }
    for (k, row) in history.iter().enumerate() {
        if row.len() != noisy_len {
            return Err(Error::LengthMismatch(format!(
                "predictor input codebook {k} has {} frames, noisy has {noisy_len}",
                row.len()
            )));
        }
        if let Some(&first) = row.first() {
            if first != spec.codebook_size {
                return Err(Error::InvalidArgument(format!(
                    "predictor input codebook {k} must begin with the start token {}",
                    spec.codebook_size
                )));
            }
        }
        if let Some((t, &v)) = row.iter().enumerate().find(|(_, &v)| v > spec.codebook_size) {
            return Err(Error::TokenOutOfRange {
                codebook: k,
                frame: t,
                token: v as u32,
                size: spec.codebook_size + 1,
            });
        }
    }
    Ok(())
}

/// One inference pass of SET with an explicit predictor input (the clean
/// tokens shifted right behind the start token).
pub fn set_forward(model: &SetModel, noisy: &TokenSequence, history: &[Vec<usize>]) -> Result<Logits> {
    model.spec.ensure_compatible(noisy.spec())?;
    validate_history(&model.spec, noisy.len(), history)?;
    if noisy.is_empty() {
        return Ok(empty_logits(&model.spec));
    }
    let mut g = Graph::new(&model.store);
    let vars = model.forward_graph(&mut g, &noisy.index_rows(), history, &mut inference_rng());
    Ok(collect_logits(&g, vars))
}

/// Either model kind.
#[derive(Debug, Clone)]
pub enum Model {
    Nar(NarModel),
    Set(SetModel),
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: CodecSpec, config: ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(match config.kind {
            ModelKind::Nar => Model::Nar(NarModel::new(spec, config, rng)?),
            ModelKind::Set => Model::Set(SetModel::new(spec, config, rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind
    }

    pub fn spec(&self) -> &CodecSpec {
        match self {
            Model::Nar(m) => &m.spec,
            Model::Set(m) => &m.spec,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Nar(m) => &m.config,
            Model::Set(m) => &m.config,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Nar(m) => &m.store,
            Model::Set(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Nar(m) => &mut m.store,
            Model::Set(m) => &mut m.store,
        }
    }

    pub fn as_set(&self) -> Option<&SetModel> {
        match self {
            Model::Set(m) => Some(m),
            Model::Nar(_) => None,
        }
    }

    pub fn as_nar(&self) -> Option<&NarModel> {
        match self {
            Model::Nar(m) => Some(m),
            Model::Set(_) => None,
        }
    }
}

/// Exact number of scalar parameters.
pub fn count_parameters(model: &Model) -> usize {
    model.store().num_scalars()
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
    codec: CodecSpec,
}

/// Stores every parameter under `prefix/<name>`.
pub fn push_params(archive: &mut Archive, store: &ParamStore, prefix: &str) {
    for (_, p) in store.iter() {
        archive.push(format!("{prefix}/{}", p.name), p.value.clone());
    }
}

/// Overwrites every parameter from `prefix/<name>`, checking shapes.
pub fn load_params(archive: &Archive, store: &mut ParamStore, prefix: &str) -> Result<()> {
    for p in store.iter_mut() {
        let src = archive.get(&format!("{prefix}/{}", p.name))?;
        if !src.same_shape(&p.value) {
            return Err(Error::ShapeMismatch(format!(
                "parameter {} is {}×{} in the archive, {}×{} in the model",
                p.name, src.rows, src.cols, p.value.rows, p.value.cols
            )));
        }
        p.value = src.clone();
    }
    Ok(())
}

impl Model {
    pub fn meta_json(&self) -> serde_json::Value {
        serde_json::to_value(ModelMeta {
            model: self.config().clone(),
            codec: self.spec().clone(),
        })
        .expect("model metadata serializes")
    }

    /// Rebuilds the architecture described by `meta` (with `model` and
    /// `codec` keys) with a throwaway initialization, ready for `load_params`.
    pub fn from_meta(meta: &serde_json::Value) -> Result<Self> {
        let m: ModelMeta = serde_json::from_value(meta.clone())?;
        Model::new(m.codec, m.model, &mut ChaCha8Rng::seed_from_u64(0))
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new("model", self.meta_json());
        push_params(&mut a, self.store(), "param");
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut model = Model::from_meta(&archive.meta)?;
        load_params(archive, model.store_mut(), "param")?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(kind: ModelKind) -> ModelConfig {
        ModelConfig {
            kind,
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 12,
            dropout_p: 0.0,
            conv_kernel: 3,
            max_rel_pos: 4,
            joiner_dim: 6,
            separate_joiner_projections: false,
            set_encoder_layers: None,
        }
    }

    fn spec(k: usize, c: usize) -> CodecSpec {
        CodecSpec::new(k, c, 50.0, 16_000).unwrap()
    }

    fn seq(spec: &CodecSpec, t: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
        let rows = (0..spec.num_codebooks)
            .map(|_| (0..t).map(|_| rng.random_range(0..spec.codebook_size as u32)).collect())
            .collect();
        TokenSequence::new(spec.clone(), rows).unwrap()
    }

    #[test]
    fn nar_logits_shape_and_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = spec(3, 7);
        let m = NarModel::new(s.clone(), tiny(ModelKind::Nar), &mut rng).unwrap();
        let x = seq(&s, 9, &mut rng);
        let l = nar_forward(&m, &x).unwrap();
        assert_eq!((l.num_codebooks(), l.len(), l.per_codebook[0].cols), (3, 9, 7));
        for k in 0..3 {
            for t in 0..9 {
                let p: f64 = l.log_probs(k, t).iter().map(|v| v.exp()).sum();
                assert!((p - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(nar_forward(&m, &TokenSequence::empty(s)).unwrap().len(), 0);
    }

    #[test]
    fn set_rejects_bad_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spec(2, 5);
        let m = SetModel::new(s.clone(), tiny(ModelKind::Set), &mut rng).unwrap();
        let x = seq(&s, 4, &mut rng);
        let good = x.shifted_with_start();
        assert!(set_forward(&m, &x, &good).is_ok());
        let mut no_start = good.clone();
        no_start[1][0] = 0;
        assert!(matches!(set_forward(&m, &x, &no_start), Err(Error::InvalidArgument(_))));
        let short: Vec<Vec<usize>> = good.iter().map(|r| r[..3].to_vec()).collect();
        assert!(matches!(set_forward(&m, &x, &short), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn step_log_probs_match_full_forward_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = spec(2, 5);
        let m = SetModel::new(s.clone(), tiny(ModelKind::Set), &mut rng).unwrap();
        let x = seq(&s, 6, &mut rng);
        let y = seq(&s, 6, &mut rng);
        let hist = y.shifted_with_start();
        let full = set_forward(&m, &x, &hist).unwrap();
        let enc = m.encode(&x).unwrap();
        for t in 0..6 {
            let prefix: Vec<Vec<usize>> = hist.iter().map(|r| r[..=t].to_vec()).collect();
            let step = m.step_log_probs(&enc, &prefix);
            for k in 0..2 {
                assert_eq!(step[k], full.log_probs(k, t));
            }
        }
    }

    #[test]
    fn archive_round_trip_restores_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(2, 5);
        let mut model = Model::new(s.clone(), tiny(ModelKind::Nar), &mut rng).unwrap();
        for p in model.store_mut().iter_mut() {
            crate::archive::round_to_f32(&mut p.value);
        }
        let back = Model::from_archive(&Archive::from_bytes(&model.to_archive().to_bytes()).unwrap()).unwrap();
        let x = seq(&s, 5, &mut rng);
        assert_eq!(
            nar_forward(model.as_nar().unwrap(), &x).unwrap(),
            nar_forward(back.as_nar().unwrap(), &x).unwrap()
        );
    }

    #[test]
    fn separate_projection_flag_adds_one_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = spec(2, 5);
        let shared = Model::new(s.clone(), tiny(ModelKind::Set), &mut rng).unwrap();
        let mut cfg = tiny(ModelKind::Set);
        cfg.separate_joiner_projections = true;
        let split = Model::new(s, cfg, &mut rng).unwrap();
        assert_eq!(count_parameters(&split) - count_parameters(&shared), 8 * 6 + 6);
    }
}
