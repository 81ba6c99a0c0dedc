//! Beam search against exhaustive enumeration on tiny random models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tokenhance::decoding::{decode_beam, score_sequence, BeamConfig};
use tokenhance::model::{ModelConfig, ModelKind, SetModel};
use tokenhance::tokens::{CodecSpec, TokenSequence};

fn tiny_set() -> ModelConfig {
    ModelConfig {
        kind: ModelKind::Set,
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        ffn_dim: 16,
        dropout_p: 0.0,
        conv_kernel: 3,
        max_rel_pos: 4,
        joiner_dim: 8,
        separate_joiner_projections: false,
        set_encoder_layers: None,
    }
}

/// Depth-first enumeration of every output sequence; returns the best score
/// and the lexicographically smallest time-major sequence attaining it.
fn exhaustive(model: &SetModel, noisy: &TokenSequence) -> (f64, Vec<Vec<u32>>) {
    let enc = model.encode(noisy).unwrap();
    let k = model.spec.num_codebooks;
    let c = model.spec.codebook_size;
    let t_len = noisy.len();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut stack: Vec<(Vec<Vec<u32>>, f64)> = vec![(Vec::new(), 0.0)];
    let mut visited = 0usize;
    while let Some((frames, score)) = stack.pop() {
        if frames.len() == t_len {
            visited += 1;
            if score > best.0 || (score == best.0 && frames < best.1) {
                best = (score, frames);
            }
            continue;
        }
        let history: Vec<Vec<usize>> = (0..k)
            .map(|ki| std::iter::once(c).chain(frames.iter().map(|f| f[ki] as usize)).collect())
            .collect();
        let lp = model.step_log_probs(&enc, &history);
        for joint in 0..c.pow(k as u32) {
            let frame: Vec<u32> = (0..k).map(|ki| ((joint / c.pow(ki as u32)) % c) as u32).collect();
            let s = frame.iter().zip(&lp).fold(score, |acc, (&id, row)| acc + row[id as usize]);
            let mut next = frames.clone();
            next.push(frame);
            stack.push((next, s));
        }
    }
    assert_eq!(visited, (c.pow(k as u32)).pow(t_len as u32));
    best
}

fn instance(seed: u64) -> (SetModel, TokenSequence) {
    instance_of_len(seed, 4)
}

fn instance_of_len(seed: u64, t: usize) -> (SetModel, TokenSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = CodecSpec::new(2, 4, 50.0, 16_000).unwrap();
    let model = SetModel::new(spec.clone(), tiny_set(), &mut rng).unwrap();
    let rows = (0..2).map(|_| (0..t).map(|_| rng.random_range(0..4)).collect()).collect();
    (model, TokenSequence::new(spec, rows).unwrap())
}

/// With every prefix of length `T − 1` kept alive, the final step scores
/// all `(C^K)^T` sequences, so the result must be the exhaustive optimum.
#[test]
fn unpruned_beam_finds_the_exhaustive_optimum() {
    for seed in 0..20 {
        let (model, noisy) = instance(seed);
        let (best_score, best_frames) = exhaustive(&model, &noisy);
        let hyp = decode_beam(&model, &noisy, &BeamConfig::new(16usize.pow(3), 4)).unwrap();
        let frames: Vec<Vec<u32>> = (0..4).map(|t| hyp.tokens.frame(t)).collect();
        assert_eq!(frames, best_frames, "seed {seed}");
        assert_eq!(hyp.log_score, best_score, "seed {seed}");
        let rescored = score_sequence(&model, &noisy, &hyp.tokens).unwrap();
        assert!((rescored - best_score).abs() < 1e-9);
    }
}

#[test]
fn best_beam_score_grows_with_width() {
    for seed in 100..106 {
        let (model, noisy) = instance(seed);
        let mut prev = f64::NEG_INFINITY;
        for beam in [1, 2, 4, 8, 16, 64] {
            let s = decode_beam(&model, &noisy, &BeamConfig::new(beam, 4)).unwrap().log_score;
            assert!(s >= prev, "seed {seed}, beam {beam}");
            prev = s;
        }
    }
}

/// A beam of `C^K` never prunes before the last step of a two-frame input.
#[test]
fn joint_vocabulary_beam_is_exact_on_two_frames() {
    for seed in 0..20 {
        let (model, noisy) = instance_of_len(seed, 2);
        let (best_score, best_frames) = exhaustive(&model, &noisy);
        let hyp = decode_beam(&model, &noisy, &BeamConfig::new(16, 4)).unwrap();
        let frames: Vec<Vec<u32>> = (0..2).map(|t| hyp.tokens.frame(t)).collect();
        assert_eq!(frames, best_frames, "seed {seed}");
        assert_eq!(hyp.log_score, best_score);
    }
}
