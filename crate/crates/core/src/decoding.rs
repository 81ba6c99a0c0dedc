//! Token generation: teacher-forced scoring, greedy self-feeding, joint
//! multi-codebook beam search, and single-pass NAR decoding.
//!
//! SET decoders run exactly `T` steps. The encoder is evaluated once per
//! utterance; at step `t` the causal predictor is evaluated on the emitted
//! prefix, which reproduces the corresponding rows of a full teacher-forced
//! pass bit for bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{nar_forward, set_forward, NarModel, SetModel};
use crate::tensor::Tensor;
use crate::tokens::{ensure_aligned, Hypothesis, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Candidates kept per codebook before forming the joint product;
    /// defaults to `beam_size`.
    #[serde(default)]
    pub per_codebook_topk: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            per_codebook_topk: None,
        }
    }
}

impl BeamConfig {
    pub fn new(beam_size: usize, per_codebook_topk: usize) -> Self {
        Self {
            beam_size,
            per_codebook_topk: Some(per_codebook_topk),
        }
    }

    pub fn topk(&self) -> usize {
        self.per_codebook_topk.unwrap_or(self.beam_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.topk() == 0 {
            return Err(Error::Config("beam_size and per_codebook_topk must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Teacher-forced decode: the predictor sees the true clean history; each
/// frame's output is the per-codebook argmax. Also returns the
/// log-probability of every chosen id (`K × T`).
pub fn decode_teacher_forced(
    model: &SetModel,
    noisy: &TokenSequence,
    clean: &TokenSequence,
) -> Result<(TokenSequence, Vec<Vec<f64>>)> {
    ensure_aligned(noisy, clean)?;
    let logits = set_forward(model, noisy, &clean.shifted_with_start())?;
    let out = logits.argmax(&model.spec);
    let log_probs = (0..out.num_codebooks())
        .map(|k| {
            (0..out.len())
                .map(|t| logits.log_probs(k, t)[out.get(k, t) as usize])
                .collect()
        })
        .collect();
    Ok((out, log_probs))
}

/// Sequential self-feeding with per-codebook argmax.
pub fn decode_greedy(model: &SetModel, noisy: &TokenSequence) -> Result<TokenSequence> {
    Ok(greedy_hypothesis(model, noisy)?.tokens)
}

/// Greedy decode together with its score.
pub fn greedy_hypothesis(model: &SetModel, noisy: &TokenSequence) -> Result<Hypothesis> {
    let enc = model.encode(noisy)?;
    let k = model.spec.num_codebooks;
    let mut history = vec![vec![model.start_token()]; k];
    let mut rows = vec![Vec::with_capacity(noisy.len()); k];
    let mut score = 0.0;
    for _ in 0..noisy.len() {
        let lp = model.step_log_probs(&enc, &history);
        for (ki, row_lp) in lp.iter().enumerate() {
            let best = crate::tensor::argmax(row_lp);
            score += row_lp[best];
            rows[ki].push(best as u32);
            history[ki].push(best);
        }
    }
    Ok(Hypothesis {
        tokens: TokenSequence::new(model.spec.clone(), rows)?,
        log_score: score,
    })
}

struct Beam {
    /// Emitted frames, time-major (`t × K`).
    frames: Vec<Vec<u32>>,
    score: f64,
}

struct Candidate {
    parent: usize,
    frame: Vec<u32>,
    score: f64,
}

/// Indices of the `m` largest entries, ties to the lowest index.
fn top_m(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m.min(values.len()));
    idx
}

/// Joint beam search. Every live hypothesis expands over the Cartesian
/// product of each codebook's top-`m` ids; the best `beam_size` extensions
/// survive. Equal scores are ordered by the lexicographically smaller
/// time-major token sequence.
pub fn decode_beam(model: &SetModel, noisy: &TokenSequence, config: &BeamConfig) -> Result<Hypothesis> {
    config.validate()?;
    let enc = model.encode(noisy)?;
    let k = model.spec.num_codebooks;
    let m = config.topk();
    let mut beams = vec![Beam {
        frames: Vec::with_capacity(noisy.len()),
        score: 0.0,
    }];
    for _ in 0..noisy.len() {
        let mut cands = Vec::new();
        for (bi, beam) in beams.iter().enumerate() {
            let history: Vec<Vec<usize>> = (0..k)
                .map(|ki| {
                    std::iter::once(model.start_token())
                        .chain(beam.frames.iter().map(|f| f[ki] as usize))
                        .collect()
                })
                .collect();
            let lp = model.step_log_probs(&enc, &history);
            expand(bi, beam.score, &lp, m, &mut cands);
        }
        let order = |a: &Candidate, b: &Candidate| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| lexicographic(&beams[a.parent], &a.frame, &beams[b.parent], &b.frame))
        };
        if cands.len() > config.beam_size {
            cands.select_nth_unstable_by(config.beam_size - 1, order);
            cands.truncate(config.beam_size);
        }
        cands.sort_by(order);
        beams = cands
            .into_iter()
            .map(|c| {
                let mut frames = beams[c.parent].frames.clone();
                frames.push(c.frame);
                Beam { frames, score: c.score }
            })
            .collect();
    }
    let best = beams.into_iter().next().expect("beam is never empty");
    let rows = (0..k)
        .map(|ki| best.frames.iter().map(|f| f[ki]).collect())
        .collect();
    Ok(Hypothesis {
        tokens: TokenSequence::new(model.spec.clone(), rows)?,
        log_score: best.score,
    })
}

fn expand(parent: usize, base: f64, lp: &[Vec<f64>], m: usize, out: &mut Vec<Candidate>) {
    let choices: Vec<Vec<usize>> = lp.iter().map(|row| top_m(row, m)).collect();
    let mut odometer = vec![0usize; choices.len()];
    loop {
        let frame: Vec<u32> = odometer
            .iter()
            .zip(&choices)
            .map(|(&i, c)| c[i] as u32)
            .collect();
        // sum in codebook order so equal paths score identically
        let score = frame
            .iter()
            .zip(lp)
            .fold(base, |acc, (&id, row)| acc + row[id as usize]);
        out.push(Candidate { parent, frame, score });
        let mut pos = choices.len();
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            odometer[pos] += 1;
            if odometer[pos] < choices[pos].len() {
                break;
            }
            odometer[pos] = 0;
        }
    }
}

fn lexicographic(pa: &Beam, fa: &[u32], pb: &Beam, fb: &[u32]) -> Ordering {
    pa.frames
        .iter()
        .flatten()
        .chain(fa)
        .cmp(pb.frames.iter().flatten().chain(fb))
}

/// `Σ_t Σ_k log p(y_{k,t} | x, y_{<t})` under teacher forcing.
pub fn score_sequence(model: &SetModel, noisy: &TokenSequence, clean: &TokenSequence) -> Result<f64> {
    ensure_aligned(noisy, clean)?;
    let logits = set_forward(model, noisy, &clean.shifted_with_start())?;
    let mut s = 0.0;
    for t in 0..clean.len() {
        for k in 0..clean.num_codebooks() {
            s += logits.log_probs(k, t)[clean.get(k, t) as usize];
        }
    }
    Ok(s)
}

/// Per-frame, per-codebook argmax of one NAR pass.
pub fn decode_nar(model: &NarModel, noisy: &TokenSequence) -> Result<TokenSequence> {
    Ok(nar_forward(model, noisy)?.argmax(&model.spec))
}

/// Per-codebook posteriors of one NAR pass, useful for calibration checks.
pub fn nar_probabilities(model: &NarModel, noisy: &TokenSequence) -> Result<Vec<Tensor>> {
    let logits = nar_forward(model, noisy)?;
    Ok(logits
        .per_codebook
        .iter()
        .map(|l| {
            let rows: Vec<Vec<f64>> = (0..l.rows).map(|t| crate::tensor::softmax(l.row(t))).collect();
            if rows.is_empty() {
                Tensor::zeros(0, l.cols)
            } else {
                Tensor::from_rows(&rows)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelKind};
    use crate::tokens::CodecSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Set,
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

    fn setup(seed: u64, k: usize, c: usize, t: usize) -> (SetModel, TokenSequence) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = CodecSpec::new(k, c, 50.0, 16_000).unwrap();
        let model = SetModel::new(spec.clone(), tiny(), &mut rng).unwrap();
        let rows = (0..k)
            .map(|_| (0..t).map(|_| rng.random_range(0..c as u32)).collect())
            .collect();
        (model, TokenSequence::new(spec, rows).unwrap())
    }

    #[test]
    fn greedy_equals_unit_beam() {
        for seed in 0..5 {
            let (m, x) = setup(seed, 2, 5, 7);
            let g = greedy_hypothesis(&m, &x).unwrap();
            let b = decode_beam(&m, &x, &BeamConfig::new(1, 1)).unwrap();
            assert_eq!(g.tokens, b.tokens);
            assert_eq!(g.log_score, b.log_score);
        }
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let (m, x) = setup(0, 2, 5, 0);
        assert!(decode_greedy(&m, &x).unwrap().is_empty());
        assert!(decode_beam(&m, &x, &BeamConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn single_step_beam_is_row_argmax() {
        let (m, x) = setup(1, 1, 3, 1);
        let out = decode_beam(&m, &x, &BeamConfig::new(5, 3)).unwrap();
        let enc = m.encode(&x).unwrap();
        let lp = m.step_log_probs(&enc, &[vec![3]]);
        assert_eq!(out.tokens.get(0, 0) as usize, crate::tensor::argmax(&lp[0]));
    }

    #[test]
    fn beam_scores_are_consistent_and_dominate_greedy() {
        for seed in 0..4 {
            let (m, x) = setup(seed, 2, 4, 6);
            let g = greedy_hypothesis(&m, &x).unwrap();
            let b = decode_beam(&m, &x, &BeamConfig::default()).unwrap();
            assert!(b.log_score >= g.log_score);
            assert!(b.log_score <= 0.0);
            let rescored = score_sequence(&m, &x, &b.tokens).unwrap();
            assert!((rescored - b.log_score).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_forced_log_probs_match_forward() {
        let (m, x) = setup(2, 2, 4, 5);
        let (_, y) = setup(3, 2, 4, 5);
        let (out, lp) = decode_teacher_forced(&m, &x, &y).unwrap();
        let logits = set_forward(&m, &x, &y.shifted_with_start()).unwrap();
        for k in 0..2 {
            for t in 0..5 {
                let row = crate::tensor::log_softmax(logits.per_codebook[k].row(t));
                assert_eq!(lp[k][t], row[out.get(k, t) as usize]);
            }
        }
        let short = y.slice(0, 4);
        assert!(decode_teacher_forced(&m, &x, &short).is_err());
    }

    #[test]
    fn top_m_breaks_ties_low() {
        assert_eq!(top_m(&[0.5, 1.0, 1.0, 0.1], 2), vec![1, 2]);
        assert_eq!(top_m(&[0.0, 0.0], 5), vec![0, 1]);
    }
}
