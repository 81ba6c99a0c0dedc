//! Token-to-feature regressor trained with an L2 loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, CodebookEmbeddings, Graph, Linear, ParamId, ParamStore, Var};
use crate::tensor::Tensor;
use crate::tokens::{CodecSpec, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DequantizerConfig {
    pub hidden_dim: usize,
    pub conv_kernel: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DequantizerConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            conv_kernel: 3,
            epochs: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Summed codebook embeddings, one residual depthwise-conv block, and a
/// linear read-out to the feature dimension.
#[derive(Debug, Clone)]
pub struct Dequantizer {
    pub spec: CodecSpec,
    pub feature_dim: usize,
    pub config: DequantizerConfig,
    pub store: ParamStore,
    embed: CodebookEmbeddings,
    conv_w: ParamId,
    conv_b: ParamId,
    mix: Linear,
    out: Linear,
}

/// Output of [`train_dequantizer`].
#[derive(Debug, Clone)]
pub struct DequantizerFit {
    pub dequantizer: Dequantizer,
    /// Mean squared error per element after every full-batch step.
    pub loss_history: Vec<f64>,
    /// Per-element variance of the training targets.
    pub target_variance: f64,
}

impl Dequantizer {
    pub fn new(spec: &CodecSpec, feature_dim: usize, config: &DequantizerConfig) -> Result<Self> {
        if feature_dim == 0 || config.hidden_dim == 0 || config.conv_kernel == 0 {
            return Err(Error::InvalidArgument("dequantizer dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let h = config.hidden_dim;
        let mut store = ParamStore::new();
        let embed = CodebookEmbeddings::new(
            &mut store,
            "embed",
            spec.num_codebooks,
            spec.codebook_size,
            h,
            &mut rng,
        );
        let bound = 1.0 / (config.conv_kernel as f64).sqrt();
        let conv_w = store.add("conv.weight", Tensor::uniform(h, config.conv_kernel, bound, &mut rng));
        let conv_b = store.add("conv.bias", Tensor::zeros(1, h));
        let mix = Linear::new(&mut store, "mix", h, h, &mut rng);
        let out = Linear::new(&mut store, "out", h, feature_dim, &mut rng);
        Ok(Self {
            spec: spec.clone(),
            feature_dim,
            config: config.clone(),
            store,
            embed,
            conv_w,
            conv_b,
            mix,
            out,
        })
    }

    fn forward_graph(&self, g: &mut Graph, seq: &TokenSequence) -> Var {
        let x = self.embed.forward(g, &seq.index_rows());
        let h = g.depthwise_conv(x, Var::Param(self.conv_w), Var::Param(self.conv_b), false);
        let h = g.silu(h);
        let h = self.mix.forward(g, h);
        let x = g.add(x, h);
        self.out.forward(g, x)
    }

    /// `T × feature_dim` continuous features for `seq`.
    pub fn apply(&self, seq: &TokenSequence) -> Result<Tensor> {
        self.spec.ensure_compatible(seq.spec())?;
        if seq.is_empty() {
            return Ok(Tensor::zeros(0, self.feature_dim));
        }
        let mut g = Graph::new(&self.store);
        let y = self.forward_graph(&mut g, seq);
        Ok(g.value(y).clone())
    }
}

/// Full-batch AdamW on the summed squared error over all pairs.
pub fn train_dequantizer(
    pairs: &[(TokenSequence, Tensor)],
    config: &DequantizerConfig,
) -> Result<DequantizerFit> {
    let first = pairs.first().ok_or_else(|| Error::Empty("dequantizer training pairs".into()))?;
    let spec = first.0.spec().clone();
    let dim = first.1.cols;
    let mut count = 0usize;
    let mut sum = vec![0.0; dim];
    for (seq, feats) in pairs {
        spec.ensure_compatible(seq.spec())?;
        if feats.rows != seq.len() || feats.cols != dim {
            return Err(Error::LengthMismatch(format!(
                "{} frames of tokens vs {}×{} features",
                seq.len(),
                feats.rows,
                feats.cols
            )));
        }
        if !feats.all_finite() {
            return Err(Error::NonFinite("dequantizer targets".into()));
        }
        count += feats.rows;
        for r in 0..feats.rows {
            for (s, v) in sum.iter_mut().zip(feats.row(r)) {
                *s += v;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("dequantizer training frames".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut ss = 0.0;
    for (_, feats) in pairs {
        for r in 0..feats.rows {
            ss += feats.row(r).iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
        }
    }
    let elements = (count * dim) as f64;
    let target_variance = ss / elements;

    let mut model = Dequantizer::new(&spec, dim, config)?;
    // start the read-out at the target mean so training begins at the
    // constant-predictor baseline
    *model.store.get_mut(model.out.bias) = Tensor::from_vec(1, dim, mean);
    let mut opt = AdamW::new(&model.store, config.lr, 0.0);
    let mut loss_history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut grads = model.store.zeros_like();
        let mut total = 0.0;
        {
            let mut g = Graph::training(&model.store);
            let mut losses = Vec::new();
            for (seq, feats) in pairs.iter().filter(|(s, _)| !s.is_empty()) {
                let y = model.forward_graph(&mut g, seq);
                losses.push(g.squared_error(y, feats));
            }
            let root = g.sum_scalars(&losses);
            total += g.value(root).data[0];
            g.backward(root, 1.0 / elements, &mut grads);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("dequantizer loss".into()));
        }
        loss_history.push(total / elements);
        opt.update(&mut model.store, &grads);
    }
    let mut final_loss = 0.0;
    for (seq, feats) in pairs {
        let y = model.apply(seq)?;
        final_loss += y.data.iter().zip(&feats.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    loss_history.push(final_loss / elements);
    Ok(DequantizerFit {
        dequantizer: model,
        loss_history,
        target_variance,
    })
}
