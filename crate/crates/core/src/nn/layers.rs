use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(input, output, bound, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::uniform(1, output, bound, rng),
        );
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = g.matmul(x, Var::Param(self.weight));
        g.add_row(h, Var::Param(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm(x, Var::Param(self.gamma), Var::Param(self.beta), LN_EPS)
    }
}

/// One embedding table per codebook; lookups are summed over codebooks.
#[derive(Debug, Clone)]
pub struct CodebookEmbeddings {
    pub tables: Vec<ParamId>,
    pub vocab: usize,
}

impl CodebookEmbeddings {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        codebooks: usize,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let tables = (0..codebooks)
            .map(|k| store.add(format!("{name}.{k}"), Tensor::normal(vocab, dim, 1.0, rng)))
            .collect();
        Self { tables, vocab }
    }

    /// `out[t] = Σ_k table_k[ids[k][t]]`. All rows of `ids` must share a length.
    pub fn forward(&self, g: &mut Graph, ids: &[Vec<usize>]) -> Var {
        assert_eq!(ids.len(), self.tables.len(), "codebook count");
        let mut acc: Option<Var> = None;
        for (table, row) in self.tables.iter().zip(ids) {
            let e = g.gather(Var::Param(*table), row);
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e),
            });
        }
        acc.expect("at least one codebook")
    }
}
