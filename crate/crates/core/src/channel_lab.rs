//! Synthetic clean-token sources, a substitution channel, and exact
//! inference over the resulting hidden Markov model.
//!
//! Clean tokens come from a first-order Markov chain, either over joint
//! frames (all `K` codebooks at once, `C^K` states) or as `K` independent
//! per-codebook chains. The channel replaces each token independently with
//! probability `r`, drawing the replacement from a per-codebook confusion
//! row. Forward–backward gives per-frame posteriors (the best any
//! conditionally independent predictor can do per token); Viterbi gives the
//! joint MAP sequence (the best any predictor can do per utterance).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokens::{CodecSpec, TokenSequence};

/// Largest joint state space handled by the exact oracles.
pub const MAX_EXACT_STATES: usize = 4096;

const ROW_TOL: f64 = 1e-9;

/// Lower and upper clamp applied to the SNR-derived substitution rate.
pub const RATE_BOUNDS: (f64, f64) = (0.02, 0.98);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovChain {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn uniform(n: usize) -> Self {
        Self {
            initial: vec![1.0 / n as f64; n],
            transition: vec![vec![1.0 / n as f64; n]; n],
        }
    }

    /// Moves `i → i+1 (mod n)` with probability `p`; the remaining mass is
    /// spread evenly over the other states.
    pub fn cycle(n: usize, p: f64) -> Self {
        let rest = (1.0 - p) / (n as f64 - 1.0);
        let transition = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if j == (i + 1) % n { p } else { rest })
                    .collect()
            })
            .collect();
        Self {
            initial: vec![1.0 / n as f64; n],
            transition,
        }
    }

    /// Stays in the current state with probability `p`; the remaining mass
    /// is spread evenly over the other states.
    pub fn sticky(n: usize, p: f64) -> Self {
        let rest = (1.0 - p) / (n as f64 - 1.0);
        let transition = (0..n)
            .map(|i| (0..n).map(|j| if i == j { p } else { rest }).collect())
            .collect();
        Self {
            initial: vec![1.0 / n as f64; n],
            transition,
        }
    }

    /// Deterministic successor map `i → perm[i]`.
    pub fn permutation(perm: &[usize]) -> Self {
        let n = perm.len();
        let transition = perm
            .iter()
            .map(|&j| (0..n).map(|c| if c == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            initial: vec![1.0 / n as f64; n],
            transition,
        }
    }

    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.initial.len();
        check_distribution(&self.initial, "initial distribution")?;
        if self.transition.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "transition has {} rows for {} states",
                self.transition.len(),
                n
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!("transition row {i} has {} entries", row.len())));
            }
            check_distribution(row, &format!("transition row {i}"))?;
        }
        Ok(())
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.initial, rng)
    }

    fn sample_next<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        sample_categorical(&self.transition[state], rng)
    }
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidArgument(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

/// Inverse-CDF draw; falls back to the last positive entry on round-off.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Clean-token generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    /// One chain over joint frames; state `Σ_k y_k · C^k`.
    Joint { chain: MarkovChain },
    /// Independent chains, one per codebook.
    Factored { chains: Vec<MarkovChain> },
}

/// A complete synthetic corpus recipe: source, channel, and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub codec: CodecSpec,
    pub source: Source,
    pub noise_level_db: f64,
    /// Per codebook, a `C × C` row-stochastic replacement distribution.
    pub confusion: Vec<Vec<Vec<f64>>>,
    /// Bypasses the SNR map (and its clamp) when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substitution_rate_override: Option<f64>,
    pub seed: u64,
}

/// Substitution rate for a given SNR: `1 / (1 + 10^(snr/10))`, clamped.
pub fn snr_to_substitution_rate(snr_db: f64) -> f64 {
    let r = 1.0 / (1.0 + 10f64.powf(snr_db / 10.0));
    r.clamp(RATE_BOUNDS.0, RATE_BOUNDS.1)
}

/// Uniform replacement over all `C` ids, the clean id included.
pub fn uniform_confusion(c: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / c as f64; c]; c]
}

impl ChannelSpec {
    /// Independent per-codebook chains with uniform confusion.
    pub fn factored(codec: CodecSpec, chain: MarkovChain, noise_level_db: f64, seed: u64) -> Result<Self> {
        let k = codec.num_codebooks;
        let c = codec.codebook_size;
        let spec = Self {
            source: Source::Factored {
                chains: vec![chain; k],
            },
            confusion: vec![uniform_confusion(c); k],
            codec,
            noise_level_db,
            substitution_rate_override: None,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Strong-transition cycle source: the setting where joint decoding
    /// clearly beats per-frame decoding.
    pub fn cycle_testbed(codec: CodecSpec, p: f64, noise_level_db: f64, seed: u64) -> Result<Self> {
        let c = codec.codebook_size;
        Self::factored(codec, MarkovChain::cycle(c, p), noise_level_db, seed)
    }

    pub fn with_substitution_rate(mut self, r: f64) -> Result<Self> {
        self.substitution_rate_override = Some(r);
        self.validate()?;
        Ok(self)
    }

    pub fn num_codebooks(&self) -> usize {
        self.codec.num_codebooks
    }

    pub fn codebook_size(&self) -> usize {
        self.codec.codebook_size
    }

    pub fn joint_states(&self) -> usize {
        self.codebook_size().saturating_pow(self.num_codebooks() as u32)
    }

    pub fn substitution_rate(&self) -> f64 {
        self.substitution_rate_override
            .unwrap_or_else(|| snr_to_substitution_rate(self.noise_level_db))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let k = self.num_codebooks();
        let c = self.codebook_size();
        match &self.source {
            Source::Joint { chain } => {
                if chain.num_states() != self.joint_states() {
                    return Err(Error::ShapeMismatch(format!(
                        "joint source has {} states, expected C^K = {}",
                        chain.num_states(),
                        self.joint_states()
                    )));
                }
                chain.validate()?;
            }
            Source::Factored { chains } => {
                if chains.len() != k {
                    return Err(Error::ShapeMismatch(format!("{} chains for {k} codebooks", chains.len())));
                }
                for chain in chains {
                    if chain.num_states() != c {
                        return Err(Error::ShapeMismatch(format!(
                            "per-codebook chain has {} states, expected {c}",
                            chain.num_states()
                        )));
                    }
                    chain.validate()?;
                }
            }
        }
        if self.confusion.len() != k {
            return Err(Error::ShapeMismatch(format!("{} confusion matrices for {k} codebooks", self.confusion.len())));
        }
        for (ki, m) in self.confusion.iter().enumerate() {
            if m.len() != c || m.iter().any(|row| row.len() != c) {
                return Err(Error::ShapeMismatch(format!("confusion {ki} is not {c}×{c}")));
            }
            for (i, row) in m.iter().enumerate() {
                check_distribution(row, &format!("confusion {ki} row {i}"))?;
            }
        }
        let r = self.substitution_rate();
        if !(0.0..1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("substitution rate {r} outside [0, 1)")));
        }
        if !self.noise_level_db.is_finite() {
            return Err(Error::InvalidArgument("noise level must be finite".into()));
        }
        Ok(())
    }

    /// `P(observed | clean)` for one codebook.
    pub fn emission(&self, codebook: usize, clean: usize, observed: usize) -> f64 {
        let r = self.substitution_rate();
        let keep = if clean == observed { 1.0 - r } else { 0.0 };
        keep + r * self.confusion[codebook][clean][observed]
    }

    fn decode_state(&self, state: usize) -> Vec<usize> {
        let c = self.codebook_size();
        let mut s = state;
        (0..self.num_codebooks())
            .map(|_| {
                let v = s % c;
                s /= c;
                v
            })
            .collect()
    }

    fn encode_state(&self, frame: &[usize]) -> usize {
        let c = self.codebook_size();
        frame.iter().rev().fold(0, |acc, &v| acc * c + v)
    }

    fn check_exact(&self) -> Result<()> {
        let states = self.joint_states();
        if self.num_codebooks() > 12 || states > MAX_EXACT_STATES {
            return Err(Error::StateSpaceTooLarge {
                states,
                limit: MAX_EXACT_STATES,
            });
        }
        Ok(())
    }

    /// The independent chains viewed as single-codebook problems, or `None`
    /// for a joint source.
    fn per_codebook(&self) -> Option<Vec<Hmm>> {
        match &self.source {
            Source::Joint { .. } => None,
            Source::Factored { chains } => Some(
                chains
                    .iter()
                    .enumerate()
                    .map(|(k, chain)| Hmm {
                        chain: chain.clone(),
                        emit: Box::new({
                            let spec = self.clone();
                            move |state, obs: &[usize]| spec.emission(k, state, obs[k])
                        }),
                    })
                    .collect(),
            ),
        }
    }

    fn joint_hmm(&self) -> Hmm {
        let chain = match &self.source {
            Source::Joint { chain } => chain.clone(),
            Source::Factored { chains } => {
                let s = self.joint_states();
                let frames: Vec<Vec<usize>> = (0..s).map(|i| self.decode_state(i)).collect();
                let initial = frames
                    .iter()
                    .map(|f| f.iter().zip(chains).map(|(&v, ch)| ch.initial[v]).product())
                    .collect();
                let transition = frames
                    .iter()
                    .map(|a| {
                        frames
                            .iter()
                            .map(|b| {
                                a.iter()
                                    .zip(b)
                                    .zip(chains)
                                    .map(|((&i, &j), ch)| ch.transition[i][j])
                                    .product()
                            })
                            .collect()
                    })
                    .collect();
                MarkovChain { initial, transition }
            }
        };
        let spec = self.clone();
        Hmm {
            chain,
            emit: Box::new(move |state, obs: &[usize]| {
                spec.decode_state(state)
                    .iter()
                    .enumerate()
                    .map(|(k, &y)| spec.emission(k, y, obs[k]))
                    .product()
            }),
        }
    }
}

/// Draws a clean utterance of `t` frames from the source.
pub fn sample_clean<R: Rng + ?Sized>(spec: &ChannelSpec, t: usize, rng: &mut R) -> TokenSequence {
    let k = spec.num_codebooks();
    let mut rows = vec![Vec::with_capacity(t); k];
    match &spec.source {
        Source::Joint { chain } => {
            let mut state = 0;
            for step in 0..t {
                state = if step == 0 {
                    chain.sample_initial(rng)
                } else {
                    chain.sample_next(state, rng)
                };
                for (row, v) in rows.iter_mut().zip(spec.decode_state(state)) {
                    row.push(v as u32);
                }
            }
        }
        Source::Factored { chains } => {
            for step in 0..t {
                for (row, chain) in rows.iter_mut().zip(chains) {
                    let v = match row.last() {
                        None if step == 0 => chain.sample_initial(rng),
                        Some(&prev) => chain.sample_next(prev as usize, rng),
                        None => unreachable!(),
                    };
                    row.push(v as u32);
                }
            }
        }
    }
    TokenSequence::new(spec.codec.clone(), rows).expect("sampled ids are in range")
}

/// Passes a clean utterance through the substitution channel.
pub fn corrupt<R: Rng + ?Sized>(clean: &TokenSequence, spec: &ChannelSpec, rng: &mut R) -> Result<TokenSequence> {
    clean.spec().ensure_compatible(&spec.codec)?;
    let r = spec.substitution_rate();
    let rows = clean
        .rows()
        .iter()
        .enumerate()
        .map(|(k, row)| {
            row.iter()
                .map(|&y| {
                    if rng.random::<f64>() < r {
                        sample_categorical(&spec.confusion[k][y as usize], rng) as u32
                    } else {
                        y
                    }
                })
                .collect()
        })
        .collect();
    TokenSequence::new(clean.spec().clone(), rows)
}

type Emission = Box<dyn Fn(usize, &[usize]) -> f64>;

struct Hmm {
    chain: MarkovChain,
    emit: Emission,
}

impl Hmm {
    fn emissions(&self, obs: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let s = self.chain.num_states();
        obs.iter()
            .map(|frame| (0..s).map(|state| (self.emit)(state, frame)).collect())
            .collect()
    }

    /// Scaled forward–backward; returns per-frame state posteriors.
    fn posteriors(&self, obs: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let t_len = obs.len();
        if t_len == 0 {
            return Vec::new();
        }
        let s = self.chain.num_states();
        let a = &self.chain.transition;
        let e = self.emissions(obs);
        let mut alpha = vec![vec![0.0; s]; t_len];
        for i in 0..s {
            alpha[0][i] = self.chain.initial[i] * e[0][i];
        }
        normalize(&mut alpha[0]);
        for t in 1..t_len {
            let mut next = vec![0.0; s];
            for (i, &ai) in alpha[t - 1].iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                for (n, &aij) in next.iter_mut().zip(&a[i]) {
                    *n += ai * aij;
                }
            }
            for (n, &ej) in next.iter_mut().zip(&e[t]) {
                *n *= ej;
            }
            normalize(&mut next);
            alpha[t] = next;
        }
        let mut beta = vec![1.0; s];
        let mut post = vec![Vec::new(); t_len];
        for t in (0..t_len).rev() {
            let mut g: Vec<f64> = alpha[t].iter().zip(&beta).map(|(x, y)| x * y).collect();
            normalize(&mut g);
            post[t] = g;
            if t > 0 {
                let weighted: Vec<f64> = beta.iter().zip(&e[t]).map(|(b, e)| b * e).collect();
                let mut prev = vec![0.0; s];
                for (i, p) in prev.iter_mut().enumerate() {
                    *p = a[i].iter().zip(&weighted).map(|(x, y)| x * y).sum();
                }
                normalize(&mut prev);
                beta = prev;
            }
        }
        post
    }

    /// Log-domain Viterbi; ties resolve to the lowest state index.
    fn viterbi(&self, obs: &[Vec<usize>]) -> Vec<usize> {
        let t_len = obs.len();
        if t_len == 0 {
            return Vec::new();
        }
        let s = self.chain.num_states();
        let log_a: Vec<Vec<f64>> = self
            .chain
            .transition
            .iter()
            .map(|row| row.iter().map(|v| v.ln()).collect())
            .collect();
        let e = self.emissions(obs);
        let mut delta: Vec<f64> = (0..s).map(|i| self.chain.initial[i].ln() + e[0][i].ln()).collect();
        let mut back = vec![vec![0usize; s]; t_len];
        for t in 1..t_len {
            let mut next = vec![f64::NEG_INFINITY; s];
            for j in 0..s {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for i in 0..s {
                    let v = delta[i] + log_a[i][j];
                    if v > best {
                        best = v;
                        arg = i;
                    }
                }
                next[j] = best + e[t][j].ln();
                back[t][j] = arg;
            }
            delta = next;
        }
        let mut state = argmax_first(&delta);
        let mut path = vec![0; t_len];
        for t in (0..t_len).rev() {
            path[t] = state;
            state = back[t][state];
        }
        path
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Exact per-frame posteriors over joint clean frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    /// `T` rows of `C^K` probabilities; state `Σ_k y_k · C^k`.
    pub joint: Vec<Vec<f64>>,
}

impl Posteriors {
    pub fn len(&self) -> usize {
        self.joint.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joint.is_empty()
    }

    /// `P(y_{k,t} = · | x)` for one codebook.
    pub fn marginal(&self, k: usize, t: usize) -> Vec<f64> {
        let c = self.codebook_size;
        let stride = c.pow(k as u32);
        let mut out = vec![0.0; c];
        for (state, &p) in self.joint[t].iter().enumerate() {
            out[(state / stride) % c] += p;
        }
        out
    }

    /// Per-codebook, per-frame argmax of the marginals: the Bayes-optimal
    /// token-wise decision.
    pub fn marginal_argmax(&self, codec: &CodecSpec) -> TokenSequence {
        let rows = (0..self.num_codebooks)
            .map(|k| {
                (0..self.len())
                    .map(|t| argmax_first(&self.marginal(k, t)) as u32)
                    .collect()
            })
            .collect();
        TokenSequence::new(codec.clone(), rows).expect("argmax ids are in range")
    }
}

fn observations(noisy: &TokenSequence) -> Vec<Vec<usize>> {
    (0..noisy.len())
        .map(|t| noisy.frame(t).into_iter().map(|v| v as usize).collect())
        .collect()
}

/// Forward–backward posteriors `P(y_t | x_{1..T})`.
pub fn exact_posteriors(noisy: &TokenSequence, spec: &ChannelSpec) -> Result<Posteriors> {
    noisy.spec().ensure_compatible(&spec.codec)?;
    spec.check_exact()?;
    let obs = observations(noisy);
    let k = spec.num_codebooks();
    let c = spec.codebook_size();
    let joint = match spec.per_codebook() {
        None => spec.joint_hmm().posteriors(&obs),
        Some(hmms) => {
            let per: Vec<Vec<Vec<f64>>> = hmms.iter().map(|h| h.posteriors(&obs)).collect();
            (0..obs.len())
                .map(|t| {
                    (0..spec.joint_states())
                        .map(|state| {
                            spec.decode_state(state)
                                .iter()
                                .enumerate()
                                .map(|(ki, &y)| per[ki][t][y])
                                .product()
                        })
                        .collect()
                })
                .collect()
        }
    };
    Ok(Posteriors {
        num_codebooks: k,
        codebook_size: c,
        joint,
    })
}

/// Viterbi MAP sequence `argmax_y P(y | x)`.
pub fn exact_map(noisy: &TokenSequence, spec: &ChannelSpec) -> Result<TokenSequence> {
    noisy.spec().ensure_compatible(&spec.codec)?;
    spec.check_exact()?;
    let obs = observations(noisy);
    let rows = match spec.per_codebook() {
        None => {
            let path = spec.joint_hmm().viterbi(&obs);
            let mut rows = vec![Vec::with_capacity(obs.len()); spec.num_codebooks()];
            for state in path {
                for (row, v) in rows.iter_mut().zip(spec.decode_state(state)) {
                    row.push(v as u32);
                }
            }
            rows
        }
        Some(hmms) => hmms
            .iter()
            .map(|h| h.viterbi(&obs).into_iter().map(|v| v as u32).collect())
            .collect(),
    };
    TokenSequence::new(noisy.spec().clone(), rows)
}

/// `ln P(clean, noisy)` under the source and channel.
pub fn log_joint(clean: &TokenSequence, noisy: &TokenSequence, spec: &ChannelSpec) -> Result<f64> {
    crate::tokens::ensure_aligned(noisy, clean)?;
    let k = spec.num_codebooks();
    let mut lp = 0.0;
    for t in 0..clean.len() {
        let frame: Vec<usize> = clean.frame(t).into_iter().map(|v| v as usize).collect();
        match &spec.source {
            Source::Joint { chain } => {
                let s = spec.encode_state(&frame);
                lp += if t == 0 {
                    chain.initial[s].ln()
                } else {
                    let prev: Vec<usize> = clean.frame(t - 1).into_iter().map(|v| v as usize).collect();
                    chain.transition[spec.encode_state(&prev)][s].ln()
                };
            }
            Source::Factored { chains } => {
                for (ki, chain) in chains.iter().enumerate() {
                    lp += if t == 0 {
                        chain.initial[frame[ki]].ln()
                    } else {
                        chain.transition[clean.get(ki, t - 1) as usize][frame[ki]].ln()
                    };
                }
            }
        }
        for (ki, &y) in frame.iter().enumerate().take(k) {
            lp += spec.emission(ki, y, noisy.get(ki, t) as usize).ln();
        }
    }
    Ok(lp)
}

/// Matched settings for a bitrate axis: the base per-codebook chain and
/// confusion replicated over each requested codebook count.
pub fn bitrate_sweep_specs(base: &ChannelSpec, ks: &[usize]) -> Result<Vec<(ChannelSpec, CodecSpec)>> {
    let chain = match &base.source {
        Source::Factored { chains } => chains[0].clone(),
        Source::Joint { chain } if base.num_codebooks() == 1 => chain.clone(),
        Source::Joint { .. } => {
            return Err(Error::InvalidArgument(
                "bitrate sweeps need a factored source or a single-codebook joint source".into(),
            ))
        }
    };
    ks.iter()
        .map(|&k| {
            if k == 0 {
                return Err(Error::InvalidArgument("codebook count must be ≥ 1".into()));
            }
            let mut codec = base.codec.clone();
            codec.num_codebooks = k;
            let spec = ChannelSpec {
                codec: codec.clone(),
                source: Source::Factored {
                    chains: vec![chain.clone(); k],
                },
                noise_level_db: base.noise_level_db,
                confusion: vec![base.confusion[0].clone(); k],
                substitution_rate_override: base.substitution_rate_override,
                seed: base.seed,
            };
            spec.validate()?;
            Ok((spec, codec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn codec(k: usize, c: usize) -> CodecSpec {
        CodecSpec::new(k, c, 50.0, 16_000).unwrap()
    }

    #[test]
    fn snr_map_hits_half_at_zero_db_and_clamps() {
        assert!((snr_to_substitution_rate(0.0) - 0.5).abs() < 1e-15);
        assert_eq!(snr_to_substitution_rate(40.0), 0.02);
        assert_eq!(snr_to_substitution_rate(-40.0), 0.98);
        assert!(snr_to_substitution_rate(-5.0) > snr_to_substitution_rate(5.0));
    }

    #[test]
    fn permutation_source_is_predictable() {
        let chain = MarkovChain::permutation(&[2, 0, 3, 1]);
        let spec = ChannelSpec::factored(codec(1, 4), chain, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seq = sample_clean(&spec, 50, &mut rng);
        let perm = [2, 0, 3, 1];
        for t in 1..50 {
            assert_eq!(seq.get(0, t) as usize, perm[seq.get(0, t - 1) as usize]);
        }
    }

    #[test]
    fn zero_rate_channel_is_identity() {
        let spec = ChannelSpec::cycle_testbed(codec(2, 5), 0.9, 0.0, 1)
            .unwrap()
            .with_substitution_rate(0.0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clean = sample_clean(&spec, 200, &mut rng);
        assert_eq!(corrupt(&clean, &spec, &mut rng).unwrap(), clean);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let mut chain = MarkovChain::cycle(3, 0.9);
        chain.transition[1][0] += 1e-6;
        assert!(ChannelSpec::factored(codec(1, 3), chain, 0.0, 0).is_err());
    }

    #[test]
    fn uniform_source_posterior_argmax_is_observation() {
        let spec = ChannelSpec::factored(codec(1, 4), MarkovChain::uniform(4), 2.0, 0).unwrap();
        let noisy = TokenSequence::new(codec(1, 4), vec![vec![3, 1, 0, 2, 2]]).unwrap();
        let post = exact_posteriors(&noisy, &spec).unwrap();
        assert_eq!(post.marginal_argmax(&codec(1, 4)), noisy);
    }

    #[test]
    fn vanishing_noise_gives_point_masses() {
        let spec = ChannelSpec::cycle_testbed(codec(1, 3), 0.6, 0.0, 0)
            .unwrap()
            .with_substitution_rate(1e-12)
            .unwrap();
        let noisy = TokenSequence::new(codec(1, 3), vec![vec![0, 2, 2, 1]]).unwrap();
        let post = exact_posteriors(&noisy, &spec).unwrap();
        for t in 0..4 {
            let m = post.marginal(0, t);
            assert!(m[noisy.get(0, t) as usize] > 1.0 - 1e-9);
        }
    }

    #[test]
    fn deterministic_source_map_is_nearest_consistent_path() {
        let spec = ChannelSpec::factored(codec(1, 3), MarkovChain::permutation(&[1, 2, 0]), 0.0, 0).unwrap();
        // consistent paths are 0120…, 1201…, 2012…; this observation agrees
        // with 1201 20 in five of six places
        let noisy = TokenSequence::new(codec(1, 3), vec![vec![1, 2, 0, 0, 2, 0]]).unwrap();
        let map = exact_map(&noisy, &spec).unwrap();
        assert_eq!(map.codebook(0), &[1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn joint_and_factored_sources_agree() {
        let chains = vec![MarkovChain::cycle(2, 0.8), MarkovChain::cycle(2, 0.7)];
        let factored = ChannelSpec {
            codec: codec(2, 2),
            source: Source::Factored { chains },
            noise_level_db: -2.0,
            confusion: vec![uniform_confusion(2); 2],
            substitution_rate_override: None,
            seed: 0,
        };
        let joint_chain = factored.joint_hmm().chain;
        let joint = ChannelSpec {
            source: Source::Joint { chain: joint_chain },
            ..factored.clone()
        };
        joint.validate().unwrap();
        let noisy = TokenSequence::new(codec(2, 2), vec![vec![0, 1, 1, 0, 1], vec![1, 1, 0, 0, 1]]).unwrap();
        let a = exact_posteriors(&noisy, &factored).unwrap();
        let b = exact_posteriors(&noisy, &joint).unwrap();
        for (ra, rb) in a.joint.iter().zip(&b.joint) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(exact_map(&noisy, &factored).unwrap(), exact_map(&noisy, &joint).unwrap());
    }

    #[test]
    fn oversized_state_space_is_rejected() {
        let spec = ChannelSpec::cycle_testbed(codec(4, 16), 0.9, 0.0, 0).unwrap();
        let noisy = TokenSequence::new(codec(4, 16), vec![vec![0; 3]; 4]).unwrap();
        assert!(matches!(exact_posteriors(&noisy, &spec), Err(Error::StateSpaceTooLarge { .. })));
        assert!(matches!(exact_map(&noisy, &spec), Err(Error::StateSpaceTooLarge { .. })));
    }

    #[test]
    fn bitrate_specs_scale_width() {
        let base = ChannelSpec::cycle_testbed(codec(4, 8), 0.9, 0.0, 5).unwrap();
        let specs = bitrate_sweep_specs(&base, &[1, 2, 4, 8]).unwrap();
        assert_eq!(specs.len(), 4);
        assert_eq!(specs[2].0, base);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (spec, codec) in &specs {
            assert_eq!(sample_clean(spec, 10, &mut rng).num_codebooks(), codec.num_codebooks);
        }
    }
}
