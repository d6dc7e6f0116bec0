//! Order-1 Markov token model standing in for a language model.
//!
//! Each transition row is a draw from a symmetric Dirichlet distribution whose
//! concentration `beta` controls the entropy of next-token predictions, and
//! therefore how much room a watermark has to hide in.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, domain};

/// Tolerance on the total mass of a next-token distribution.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Vocabulary index in `1..=V`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(u32);

impl TokenId {
    pub fn new(value: u32, vocab_size: usize) -> Result<Self> {
        if value == 0 || value as usize > vocab_size {
            return Err(Error::InvalidToken { token: value, vocab_size });
        }
        Ok(Self(value))
    }

    /// Builds a token from a zero-based vocabulary position.
    pub(crate) fn from_index(index: usize) -> Self {
        Self(index as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based position in the vocabulary.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct NextTokenDistribution {
    probs: Vec<f64>,
}

impl NextTokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid("a distribution needs at least two outcomes"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.probs.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

/// Where the tokens of a sequence came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Watermarked,
    Plain,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub provenance: Provenance,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, provenance: Provenance) -> Self {
        Self { tokens, provenance }
    }

    pub fn empty(provenance: Provenance) -> Self {
        Self::new(Vec::new(), provenance)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for t in &self.tokens {
            TokenId::new(t.get(), vocab_size)?;
        }
        Ok(())
    }
}

/// Order-1 Markov next-token model.
///
/// `rows[0]` is the initial-state distribution used for an empty context;
/// `rows[k]` is the distribution following token `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct TokenModel {
    vocab_size: usize,
    beta: Option<f64>,
    seed: Option<u64>,
    rows: Vec<NextTokenDistribution>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    vocab_size: usize,
    beta: Option<f64>,
    seed: Option<u64>,
    rows: Vec<Vec<f64>>,
}

impl TryFrom<ModelFile> for TokenModel {
    type Error = Error;

    fn try_from(file: ModelFile) -> Result<Self> {
        let rows = file
            .rows
            .into_iter()
            .map(NextTokenDistribution::new)
            .collect::<Result<Vec<_>>>()?;
        let model = Self::from_rows(file.vocab_size, rows)?;
        Ok(Self { beta: file.beta, seed: file.seed, ..model })
    }
}

impl From<TokenModel> for ModelFile {
    fn from(model: TokenModel) -> Self {
        Self {
            vocab_size: model.vocab_size,
            beta: model.beta,
            seed: model.seed,
            rows: model.rows.into_iter().map(|r| r.probs).collect(),
        }
    }
}

impl TokenModel {
    /// Draws every row from a symmetric Dirichlet(`beta`) using the seeded
    /// generator. Deterministic in `(vocab_size, beta, seed)`.
    pub fn new_markov(vocab_size: usize, beta: f64, seed: u64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid("beta must be positive and finite"));
        }
        let gamma = Gamma::new(beta, 1.0).map_err(|e| invalid(e.to_string()))?;
        let mut rng = seed::stream(seed::derive(seed, domain::MODEL, 0), 0);
        let rows = (0..=vocab_size)
            .map(|_| dirichlet_row(&gamma, vocab_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vocab_size, beta: Some(beta), seed: Some(seed), rows })
    }

    /// Model with explicit rows: the initial row followed by one row per token.
    pub fn from_rows(vocab_size: usize, rows: Vec<NextTokenDistribution>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if rows.len() != vocab_size + 1 {
            return Err(invalid(format!(
                "expected {} rows (initial + one per token), got {}",
                vocab_size + 1,
                rows.len()
            )));
        }
        if rows.iter().any(|r| r.vocab_size() != vocab_size) {
            return Err(invalid("row length does not match vocab_size"));
        }
        Ok(Self { vocab_size, beta: None, seed: None, rows })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn initial_row(&self) -> &NextTokenDistribution {
        &self.rows[0]
    }

    /// Row following `token`.
    pub fn transition_row(&self, token: TokenId) -> &NextTokenDistribution {
        &self.rows[token.get() as usize]
    }

    /// Next-token distribution given the full context; only the last token matters.
    pub fn next_token_dist(&self, context: &[TokenId]) -> Result<&NextTokenDistribution> {
        for t in context {
            TokenId::new(t.get(), self.vocab_size)?;
        }
        Ok(self.row_after(context.last().copied()))
    }

    pub(crate) fn row_after(&self, last: Option<TokenId>) -> &NextTokenDistribution {
        match last {
            None => self.initial_row(),
            Some(t) => self.transition_row(t),
        }
    }

    /// Samples `count` tokens after `prompt` by ordinary inverse-CDF sampling.
    pub fn sample_plain(&self, prompt: &[TokenId], count: usize, seed: u64) -> Result<TokenSequence> {
        self.next_token_dist(prompt)?;
        let mut rng = seed::stream(seed::derive(seed, domain::PLAIN, 0), 0);
        let mut last = prompt.last().copied();
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            let u: f64 = rng.random();
            let next = inverse_cdf(self.row_after(last).probs(), (0..self.vocab_size).map(TokenId::from_index), u);
            tokens.push(next);
            last = Some(next);
        }
        Ok(TokenSequence::new(tokens, Provenance::Plain))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn dirichlet_row<R: Rng>(gamma: &Gamma<f64>, k: usize, rng: &mut R) -> Result<NextTokenDistribution> {
    let mut draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let mut total: f64 = draws.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        // every gamma draw underflowed to zero; use a point mass on the first token
        draws.iter_mut().for_each(|d| *d = 0.0);
        draws[0] = 1.0;
        total = 1.0;
    }
    draws.iter_mut().for_each(|d| *d /= total);
    NextTokenDistribution::new(draws)
}

/// Walks tokens in the given order accumulating mass and returns the first
/// positive-mass token whose cumulative mass reaches `u`. `u = 0` lands on the
/// first positive-mass token; if rounding leaves the total below `u`, the last
/// positive-mass token is returned.
pub(crate) fn inverse_cdf(probs: &[f64], order: impl Iterator<Item = TokenId>, u: f64) -> TokenId {
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for token in order {
        let p = probs[token.index()];
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last_positive = Some(token);
        if cumulative >= u {
            return token;
        }
    }
    last_positive.expect("a valid distribution has a positive-mass token")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(v: u32) -> TokenId {
        TokenId(v)
    }

    fn degenerate_model(v: usize) -> TokenModel {
        let mut point = vec![0.0; v];
        point[0] = 1.0;
        let rows = (0..=v).map(|_| NextTokenDistribution::new(point.clone()).unwrap()).collect();
        TokenModel::from_rows(v, rows).unwrap()
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(TokenModel::new_markov(1, 1.0, 0).is_err());
        assert!(TokenModel::new_markov(3, 0.0, 0).is_err());
        assert!(TokenModel::new_markov(3, -1.0, 0).is_err());
        assert!(TokenId::new(0, 3).is_err());
        assert!(TokenId::new(4, 3).is_err());
    }

    #[test]
    fn huge_beta_gives_flat_rows() {
        let m = TokenModel::new_markov(2, 1e9, 7).unwrap();
        for row in &m.rows {
            for p in row.probs() {
                assert!((p - 0.5).abs() < 1e-3, "{p}");
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = TokenModel::new_markov(3, 1.0, 42).unwrap();
        let b = TokenModel::new_markov(3, 1.0, 42).unwrap();
        assert_eq!(a, b);
        let c = TokenModel::new_markov(3, 1.0, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rows_are_normalized() {
        let m = TokenModel::new_markov(50, 0.05, 3).unwrap();
        for row in &m.rows {
            let total: f64 = row.probs().iter().sum();
            assert!((total - 1.0).abs() <= MASS_TOLERANCE);
        }
    }

    #[test]
    fn small_beta_lowers_entropy() {
        let mean_entropy = |beta| {
            let m = TokenModel::new_markov(5, beta, 1).unwrap();
            m.rows.iter().map(|r| r.entropy()).sum::<f64>() / m.rows.len() as f64
        };
        assert!(mean_entropy(0.1) < mean_entropy(10.0));
    }

    #[test]
    fn entropy_increases_with_beta_over_seeds() {
        let mut low = 0.0;
        let mut high = 0.0;
        for seed in 0..100 {
            let a = TokenModel::new_markov(5, 0.1, seed).unwrap();
            let b = TokenModel::new_markov(5, 10.0, seed).unwrap();
            low += a.rows.iter().map(|r| r.entropy()).sum::<f64>();
            high += b.rows.iter().map(|r| r.entropy()).sum::<f64>();
        }
        assert!(high > low);
    }

    #[test]
    fn next_token_dist_lookup() {
        let m = TokenModel::new_markov(3, 1.0, 42).unwrap();
        assert_eq!(m.next_token_dist(&[]).unwrap(), &m.rows[0]);
        let d = m.next_token_dist(&[tok(1), tok(3), tok(2)]).unwrap();
        assert_eq!(d.probs(), m.rows[2].probs());
        assert!(m.next_token_dist(&[tok(4)]).is_err());
        // repeated calls return identical vectors
        assert_eq!(m.next_token_dist(&[tok(2)]).unwrap(), m.next_token_dist(&[tok(2)]).unwrap());
    }

    #[test]
    fn sample_plain_basics() {
        let m = TokenModel::new_markov(4, 1.0, 5).unwrap();
        assert!(m.sample_plain(&[], 0, 1).unwrap().is_empty());
        let a = m.sample_plain(&[tok(2)], 30, 9).unwrap();
        let b = m.sample_plain(&[tok(2)], 30, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.provenance, Provenance::Plain);
        a.validate(4).unwrap();
    }

    #[test]
    fn unit_mass_rows_are_absorbing() {
        let m = degenerate_model(3);
        let s = m.sample_plain(&[tok(2)], 50, 3).unwrap();
        assert!(s.tokens.iter().all(|t| t.get() == 1));
    }

    #[test]
    fn sampled_frequencies_match_row() {
        // Prompt ending in token 2 and a model whose rows all equal that row,
        // so every draw comes from the same state.
        let row = TokenModel::new_markov(5, 1.0, 11).unwrap().rows[2].clone();
        let rows = (0..=5).map(|_| row.clone()).collect();
        let m = TokenModel::from_rows(5, rows).unwrap();
        let n = 100_000;
        let s = m.sample_plain(&[tok(2)], n, 4).unwrap();
        let mut counts = [0usize; 5];
        for t in &s.tokens {
            counts[t.index()] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(row.probs())
            .map(|(c, p)| (*c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv = {tv}");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = TokenModel::new_markov(6, 0.7, 123).unwrap();
        let back = TokenModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        for (a, b) in m.rows.iter().zip(&back.rows) {
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn json_rejects_invalid_rows() {
        let bad = r#"{"vocab_size":2,"beta":1.0,"seed":1,"rows":[[0.5,0.5],[0.9,0.5],[0.5,0.5]]}"#;
        assert!(TokenModel::from_json(bad).is_err());
    }

    #[test]
    fn inverse_cdf_zero_and_overflow() {
        let probs = [0.0, 0.4, 0.6];
        let order = || (0..3).map(TokenId::from_index);
        assert_eq!(inverse_cdf(&probs, order(), 0.0).get(), 2);
        assert_eq!(inverse_cdf(&probs, order(), 0.4).get(), 2);
        assert_eq!(inverse_cdf(&probs, order(), 0.41).get(), 3);
        assert_eq!(inverse_cdf(&probs, order(), 1.0 + 1e-15).get(), 3);
    }
}
