//! Watermark keys and the two distribution-preserving decoders.
//!
//! * Inverse transform sampling (ITS): the key is a permutation of the
//!   vocabulary plus a uniform `u`. Tokens are laid out on `[0, 1]` in
//!   permutation order, each occupying an interval as wide as its probability,
//!   and the token whose interval holds `u` is emitted.
//! * Exponential minimum sampling (EMS): the key is a vector of `V` uniforms
//!   and the emitted token minimises `-ln(xi_k) / p(k)`.
//!
//! Both decoders emit token `k` with probability `p(k)` when the key is drawn
//! from its reference law, so watermarking leaves the model distribution intact.

use rand::distr::Open01;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, domain};
use crate::toy_lm::{inverse_cdf, NextTokenDistribution, Provenance, TokenId, TokenModel, TokenSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Its,
    Ems,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "its" => Ok(Self::Its),
            "ems" => Ok(Self::Ems),
            other => Err(invalid(format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Its => "its",
            Self::Ems => "ems",
        })
    }
}

/// Inverse-transform key: `pi[k - 1]` is the rank `pi(k)` of token `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItsKey {
    pub u: f64,
    pub pi: Vec<u32>,
}

impl ItsKey {
    pub fn new(u: f64, pi: Vec<u32>) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) {
            return Err(invalid("ITS key u must lie in [0, 1]"));
        }
        let v = pi.len();
        if v < 2 {
            return Err(invalid("ITS permutation needs at least two entries"));
        }
        let mut seen = vec![false; v];
        for &r in &pi {
            if r == 0 || r as usize > v || std::mem::replace(&mut seen[r as usize - 1], true) {
                return Err(invalid("ITS key pi is not a permutation of 1..=V"));
            }
        }
        Ok(Self { u, pi })
    }

    pub fn vocab_size(&self) -> usize {
        self.pi.len()
    }

    pub fn rank(&self, token: TokenId) -> u32 {
        self.pi[token.index()]
    }

    /// `(pi(y) - 1) / (V - 1)`, the token's normalized position in key order.
    pub fn normalized_rank(&self, token: TokenId) -> f64 {
        (self.rank(token) - 1) as f64 / (self.pi.len() - 1) as f64
    }

    /// Tokens listed in increasing `pi` order.
    pub fn order(&self) -> Vec<TokenId> {
        let mut order = vec![TokenId::from_index(0); self.pi.len()];
        for (k, &r) in self.pi.iter().enumerate() {
            order[r as usize - 1] = TokenId::from_index(k);
        }
        order
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmsKey {
    pub xi: Vec<f64>,
}

impl EmsKey {
    pub fn new(xi: Vec<f64>) -> Result<Self> {
        if xi.len() < 2 {
            return Err(invalid("EMS key needs at least two entries"));
        }
        if xi.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
            return Err(invalid("EMS key entries must lie strictly inside (0, 1)"));
        }
        Ok(Self { xi })
    }

    pub fn vocab_size(&self) -> usize {
        self.xi.len()
    }

    pub fn value(&self, token: TokenId) -> f64 {
        self.xi[token.index()]
    }
}

/// Keys of one scheme, position by position.
#[derive(Clone, Debug, PartialEq)]
pub enum Keys {
    Its(Vec<ItsKey>),
    Ems(Vec<EmsKey>),
}

impl Keys {
    pub fn len(&self) -> usize {
        match self {
            Self::Its(k) => k.len(),
            Self::Ems(k) => k.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            Self::Its(_) => Scheme::Its,
            Self::Ems(_) => Scheme::Ems,
        }
    }
}

/// Watermark key sequence `xi_1..xi_n` shared by generator and detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KeyFile", into = "KeyFile")]
pub struct KeySequence {
    vocab_size: usize,
    seed: Option<u64>,
    keys: Keys,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KeyEntry {
    Its { u: f64, pi: Vec<u32> },
    Ems { xi: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    scheme: Scheme,
    vocab_size: usize,
    seed: Option<u64>,
    n: usize,
    keys: Vec<KeyEntry>,
}

impl TryFrom<KeyFile> for KeySequence {
    type Error = Error;

    fn try_from(file: KeyFile) -> Result<Self> {
        if file.n != file.keys.len() {
            return Err(Error::Format(format!("header says n = {} but {} keys follow", file.n, file.keys.len())));
        }
        let keys = match file.scheme {
            Scheme::Its => Keys::Its(
                file.keys
                    .into_iter()
                    .map(|e| match e {
                        KeyEntry::Its { u, pi } => ItsKey::new(u, pi),
                        KeyEntry::Ems { .. } => Err(Error::Format("EMS entry in an ITS key file".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
            Scheme::Ems => Keys::Ems(
                file.keys
                    .into_iter()
                    .map(|e| match e {
                        KeyEntry::Ems { xi } => EmsKey::new(xi),
                        KeyEntry::Its { .. } => Err(Error::Format("ITS entry in an EMS key file".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let mut seq = KeySequence::from_keys(file.vocab_size, keys)?;
        seq.seed = file.seed;
        Ok(seq)
    }
}

impl From<KeySequence> for KeyFile {
    fn from(seq: KeySequence) -> Self {
        let scheme = seq.scheme();
        let keys: Vec<KeyEntry> = match seq.keys {
            Keys::Its(k) => k.into_iter().map(|k| KeyEntry::Its { u: k.u, pi: k.pi }).collect(),
            Keys::Ems(k) => k.into_iter().map(|k| KeyEntry::Ems { xi: k.xi }).collect(),
        };
        Self { scheme, vocab_size: seq.vocab_size, seed: seq.seed, n: keys.len(), keys }
    }
}

impl KeySequence {
    /// Independent keys drawn from the scheme's reference law. Key `i` comes
    /// from its own substream of `seed`, so the result is identical however
    /// the positions are scheduled.
    pub fn generate(scheme: Scheme, n: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("key sequence length must be at least 1"));
        }
        if vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        let base = seed::derive(seed, domain::KEYS, 0);
        let keys = match scheme {
            Scheme::Its => Keys::Its((0..n).map(|i| its_key(vocab_size, &mut seed::stream(base, i as u64))).collect()),
            Scheme::Ems => Keys::Ems((0..n).map(|i| ems_key(vocab_size, &mut seed::stream(base, i as u64))).collect()),
        };
        Ok(Self { vocab_size, seed: Some(seed), keys })
    }

    /// Wraps explicit keys, checking every key against `vocab_size`.
    pub fn from_keys(vocab_size: usize, keys: Keys) -> Result<Self> {
        let ok = match &keys {
            Keys::Its(k) => k.iter().all(|k| k.vocab_size() == vocab_size),
            Keys::Ems(k) => k.iter().all(|k| k.vocab_size() == vocab_size),
        };
        if !ok {
            return Err(invalid("key width does not match vocab_size"));
        }
        Ok(Self { vocab_size, seed: None, keys })
    }

    pub fn scheme(&self) -> Scheme {
        self.keys.scheme()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn keys(&self) -> &Keys {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Emits the token for position `i` (zero-based).
    pub fn decode(&self, i: usize, dist: &NextTokenDistribution) -> TokenId {
        match &self.keys {
            Keys::Its(k) => decode_its(&k[i], dist),
            Keys::Ems(k) => decode_ems(&k[i], dist),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn its_key<R: Rng>(vocab_size: usize, rng: &mut R) -> ItsKey {
    let mut pi: Vec<u32> = (1..=vocab_size as u32).collect();
    pi.shuffle(rng);
    let u = rng.random::<f64>();
    ItsKey { u, pi }
}

fn ems_key<R: Rng>(vocab_size: usize, rng: &mut R) -> EmsKey {
    EmsKey { xi: (0..vocab_size).map(|_| rng.sample(Open01)).collect() }
}

/// Inverse transform decoder: the first token in `pi` order whose cumulative
/// mass reaches `u`. Intervals are half-open `(lower, upper]`, with `u = 0`
/// assigned to the first token carrying positive mass.
pub fn decode_its(key: &ItsKey, dist: &NextTokenDistribution) -> TokenId {
    debug_assert_eq!(key.vocab_size(), dist.vocab_size());
    inverse_cdf(dist.probs(), key.order().into_iter(), key.u)
}

/// Exponential minimum decoder: `argmin_k -ln(xi_k) / p(k)` over tokens with
/// positive mass, ties going to the smallest index.
pub fn decode_ems(key: &EmsKey, dist: &NextTokenDistribution) -> TokenId {
    debug_assert_eq!(key.vocab_size(), dist.vocab_size());
    let mut best = None;
    let mut best_cost = f64::INFINITY;
    for (k, (&p, &x)) in dist.probs().iter().zip(&key.xi).enumerate() {
        if p <= 0.0 {
            continue;
        }
        let cost = -x.ln() / p;
        if best.is_none() || cost < best_cost {
            best = Some(k);
            best_cost = cost;
        }
    }
    TokenId::from_index(best.expect("a valid distribution has a positive-mass token"))
}

/// Autoregressively emits one watermarked token per key.
pub fn generate_watermarked(model: &TokenModel, prompt: &[TokenId], keys: &KeySequence) -> Result<TokenSequence> {
    if keys.vocab_size() != model.vocab_size() {
        return Err(invalid(format!(
            "key vocabulary {} does not match model vocabulary {}",
            keys.vocab_size(),
            model.vocab_size()
        )));
    }
    model.next_token_dist(prompt)?;
    let mut last = prompt.last().copied();
    let mut tokens = Vec::with_capacity(keys.len());
    for i in 0..keys.len() {
        let next = keys.decode(i, model.row_after(last));
        tokens.push(next);
        last = Some(next);
    }
    Ok(TokenSequence::new(tokens, Provenance::Watermarked))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_lm::TokenModel;

    fn dist(p: &[f64]) -> NextTokenDistribution {
        NextTokenDistribution::new(p.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(KeySequence::generate(Scheme::Its, 1, 1, 0).is_err());
        assert!(KeySequence::generate(Scheme::Ems, 0, 4, 0).is_err());
        assert!(ItsKey::new(0.5, vec![1, 1, 3]).is_err());
        assert!(ItsKey::new(1.5, vec![1, 2]).is_err());
        assert!(EmsKey::new(vec![0.5, 1.0]).is_err());
    }

    #[test]
    fn key_generation_is_deterministic() {
        let a = KeySequence::generate(Scheme::Ems, 3, 4, 9).unwrap();
        let b = KeySequence::generate(Scheme::Ems, 3, 4, 9).unwrap();
        assert_eq!(a, b);
        let c = KeySequence::generate(Scheme::Its, 3, 4, 9).unwrap();
        assert_eq!(c, KeySequence::generate(Scheme::Its, 3, 4, 9).unwrap());
        // a prefix of a longer sequence equals the shorter sequence
        let long = KeySequence::generate(Scheme::Ems, 5, 4, 9).unwrap();
        match (long.keys(), a.keys()) {
            (Keys::Ems(l), Keys::Ems(s)) => assert_eq!(&l[..3], &s[..]),
            _ => unreachable!(),
        }
    }

    fn permutation_counts(seed: u64) -> Vec<usize> {
        let seq = KeySequence::generate(Scheme::Its, 10_000, 5, seed).unwrap();
        let Keys::Its(keys) = seq.keys() else { unreachable!() };
        let mut counts = std::collections::HashMap::new();
        for k in keys {
            *counts.entry(k.pi.clone()).or_insert(0usize) += 1;
        }
        counts.into_values().collect()
    }

    const PERM_EXPECTED: f64 = 10_000.0 / 120.0;

    fn outside_three_sigma(counts: &[usize]) -> usize {
        let sd = (PERM_EXPECTED * (1.0 - 1.0 / 120.0)).sqrt();
        counts.iter().filter(|&&c| (c as f64 - PERM_EXPECTED).abs() > 3.0 * sd).count()
    }

    #[test]
    fn permutations_are_uniform() {
        // 10^4 permutations of 5 items; chi-square with 119 dof has its
        // 99.9% quantile near 170.
        let counts = permutation_counts(3);
        assert_eq!(counts.len(), 120);
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - PERM_EXPECTED).powi(2) / PERM_EXPECTED).sum();
        assert!(chi2 < 170.0, "chi2 = {chi2}");
        // 120 cells at 0.27% each: about 0.32 exceedances expected
        assert!(outside_three_sigma(&counts) <= 2);
    }

    #[test]
    fn three_sigma_exceedance_rate_matches_multinomial() {
        // P(some cell outside 3 sd) = 1 - 0.9973^120 ~ 0.277 for a uniform
        // sampler; over 200 seeds the count of such seeds is 55 +- 6.3.
        let hits = (0..200).filter(|&s| outside_three_sigma(&permutation_counts(s)) > 0).count();
        assert!((36..=75).contains(&hits), "{hits} of 200 seeds");
    }

    #[test]
    fn its_hand_examples() {
        let key = ItsKey::new(0.65, vec![1, 2, 3]).unwrap();
        assert_eq!(decode_its(&key, &dist(&[0.2, 0.5, 0.3])).get(), 2);
        let key = ItsKey::new(0.6, vec![3, 1, 2]).unwrap();
        assert_eq!(decode_its(&key, &dist(&[0.2, 0.5, 0.3])).get(), 3);
        let key = ItsKey::new(0.99, vec![2, 3, 1]).unwrap();
        assert_eq!(decode_its(&key, &dist(&[1.0, 0.0, 0.0])).get(), 1);
        let key = ItsKey::new(0.0, vec![1, 2, 3]).unwrap();
        assert_eq!(decode_its(&key, &dist(&[0.0, 0.4, 0.6])).get(), 2);
    }

    #[test]
    fn ems_hand_examples() {
        let key = EmsKey::new(vec![0.9, 0.5, 0.1]).unwrap();
        assert_eq!(decode_ems(&key, &dist(&[0.5, 0.3, 0.2])).get(), 1);
        let key = EmsKey::new(vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(decode_ems(&key, &dist(&[0.2, 0.5, 0.3])).get(), 2);
        let key = EmsKey::new(vec![0.01, 0.99, 0.99]).unwrap();
        assert_eq!(decode_ems(&key, &dist(&[1.0, 0.0, 0.0])).get(), 1);
        // exact tie goes to the smaller index
        let key = EmsKey::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(decode_ems(&key, &dist(&[0.5, 0.5])).get(), 1);
    }

    #[test]
    fn generation_contract() {
        let model = TokenModel::new_markov(6, 2.0, 1).unwrap();
        let keys = KeySequence::generate(Scheme::Ems, 40, 6, 2).unwrap();
        let a = generate_watermarked(&model, &[], &keys).unwrap();
        let b = generate_watermarked(&model, &[], &keys).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        assert_eq!(a.provenance, Provenance::Watermarked);
        let wrong = KeySequence::generate(Scheme::Ems, 4, 5, 2).unwrap();
        assert!(generate_watermarked(&model, &[], &wrong).is_err());
    }

    #[test]
    fn empty_key_sequence_generates_nothing() {
        let model = TokenModel::new_markov(3, 1.0, 1).unwrap();
        let keys = KeySequence::from_keys(3, Keys::Ems(Vec::new())).unwrap();
        assert!(generate_watermarked(&model, &[], &keys).unwrap().is_empty());
    }

    #[test]
    fn degenerate_model_ignores_keys() {
        let mut point = vec![0.0; 4];
        point[0] = 1.0;
        let rows = (0..=4).map(|_| dist(&point)).collect();
        let model = TokenModel::from_rows(4, rows).unwrap();
        for scheme in [Scheme::Its, Scheme::Ems] {
            let keys = KeySequence::generate(scheme, 25, 4, 8).unwrap();
            let out = generate_watermarked(&model, &[], &keys).unwrap();
            assert!(out.tokens.iter().all(|t| t.get() == 1));
        }
    }

    #[test]
    fn key_json_round_trip() {
        for scheme in [Scheme::Its, Scheme::Ems] {
            let keys = KeySequence::generate(scheme, 7, 5, 77).unwrap();
            let json = keys.to_json().unwrap();
            assert!(json.contains("\"n\":7"));
            assert_eq!(KeySequence::from_json(&json).unwrap(), keys);
        }
        let mismatch = r#"{"scheme":"its","vocab_size":2,"seed":1,"n":1,"keys":[{"xi":[0.5,0.5]}]}"#;
        assert!(KeySequence::from_json(mismatch).is_err());
    }
}
