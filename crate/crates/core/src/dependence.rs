//! Dependence measures between a key slice and a token slice.
//!
//! Larger values are stronger evidence that the tokens were produced with
//! the keys. `Its` and `Ems` average a per-position score over aligned
//! positions; the Levenshtein variants negate an alignment cost that allows
//! insertions and deletions at price `gamma`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::toy_lm::TokenId;
use crate::watermark::{EmsKey, ItsKey, KeySequence, Keys, Scheme};

/// Default insertion/deletion penalty for the Levenshtein variants.
pub const DEFAULT_GAMMA: f64 = 0.4;

/// Guard keeping logarithms of EMS key entries finite.
const XI_CLAMP: f64 = 1e-15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Its,
    Itsl,
    Ems,
    Emsl,
}

impl MeasureKind {
    /// Key scheme the measure scores.
    pub fn scheme(self) -> Scheme {
        match self {
            Self::Its | Self::Itsl => Scheme::Its,
            Self::Ems | Self::Emsl => Scheme::Ems,
        }
    }

    pub fn is_levenshtein(self) -> bool {
        matches!(self, Self::Itsl | Self::Emsl)
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "its" => Ok(Self::Its),
            "itsl" => Ok(Self::Itsl),
            "ems" => Ok(Self::Ems),
            "emsl" => Ok(Self::Emsl),
            other => Err(invalid(format!("unknown measure `{other}`"))),
        }
    }
}

impl std::fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Its => "its",
            Self::Itsl => "itsl",
            Self::Ems => "ems",
            Self::Emsl => "emsl",
        })
    }
}

/// A measure together with its indel penalty (ignored by `Its`/`Ems`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub kind: MeasureKind,
    pub gamma: f64,
}

impl Measure {
    pub fn new(kind: MeasureKind, gamma: f64) -> Result<Self> {
        if gamma.is_nan() || gamma < 0.0 {
            return Err(invalid("gamma must be nonnegative"));
        }
        Ok(Self { kind, gamma })
    }

    pub fn its() -> Self {
        Self { kind: MeasureKind::Its, gamma: DEFAULT_GAMMA }
    }

    pub fn ems() -> Self {
        Self { kind: MeasureKind::Ems, gamma: DEFAULT_GAMMA }
    }

    pub fn itsl() -> Self {
        Self { kind: MeasureKind::Itsl, gamma: DEFAULT_GAMMA }
    }

    pub fn emsl() -> Self {
        Self { kind: MeasureKind::Emsl, gamma: DEFAULT_GAMMA }
    }
}

impl From<MeasureKind> for Measure {
    fn from(kind: MeasureKind) -> Self {
        Self { kind, gamma: DEFAULT_GAMMA }
    }
}

/// Per-position contributions of a key to each measure.
pub trait KeyTerms {
    /// Summand of the averaged measure.
    fn term(&self, token: TokenId) -> f64;
    /// Base alignment cost `d0` of the Levenshtein variant.
    fn align_cost(&self, token: TokenId) -> f64;
}

impl KeyTerms for ItsKey {
    fn term(&self, token: TokenId) -> f64 {
        (self.u - 0.5) * (self.normalized_rank(token) - 0.5)
    }

    fn align_cost(&self, token: TokenId) -> f64 {
        (self.u - self.normalized_rank(token)).abs()
    }
}

impl KeyTerms for EmsKey {
    fn term(&self, token: TokenId) -> f64 {
        clamp_xi(self.value(token)).ln() + 1.0
    }

    fn align_cost(&self, token: TokenId) -> f64 {
        (1.0 - clamp_xi(self.value(token))).ln()
    }
}

fn clamp_xi(x: f64) -> f64 {
    x.clamp(XI_CLAMP, 1.0 - XI_CLAMP)
}

fn mean_terms<K: KeyTerms>(keys: &[K], tokens: &[TokenId]) -> Result<f64> {
    if keys.len() != tokens.len() {
        return Err(invalid(format!("{} keys but {} tokens", keys.len(), tokens.len())));
    }
    if keys.is_empty() {
        return Err(invalid("at least one key/token pair is required"));
    }
    Ok(keys.iter().zip(tokens).map(|(k, t)| k.term(*t)).sum::<f64>() / keys.len() as f64)
}

/// `(1/n) sum (u_i - 1/2)((pi_i(y_i) - 1)/(V - 1) - 1/2)`.
pub fn m_its(keys: &[ItsKey], tokens: &[TokenId]) -> Result<f64> {
    mean_terms(keys, tokens)
}

/// `(1/n) sum (ln xi_{i, y_i} + 1)`.
pub fn m_ems(keys: &[EmsKey], tokens: &[TokenId]) -> Result<f64> {
    mean_terms(keys, tokens)
}

/// Simple Levenshtein cost between `tokens` and `keys` with indel penalty
/// `gamma` and the key type's base alignment cost.
pub fn levenshtein_cost<K: KeyTerms>(tokens: &[TokenId], keys: &[K], gamma: f64) -> Result<f64> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(invalid("gamma must be nonnegative"));
    }
    let mut scratch = Vec::new();
    Ok(edit_cost(tokens.len(), keys.len(), gamma, |i, j| keys[j].align_cost(tokens[i]), &mut scratch))
}

/// Alignment DP over a `rows x cols` grid with diagonal cost `d0(i, j)` and
/// horizontal/vertical steps costing `gamma`. Filled from the far corner so
/// the additions happen in the same order as the suffix recursion.
/// `scratch` is reused between calls.
pub(crate) fn edit_cost(
    rows: usize,
    cols: usize,
    gamma: f64,
    d0: impl Fn(usize, usize) -> f64,
    scratch: &mut Vec<f64>,
) -> f64 {
    scratch.clear();
    scratch.extend((0..=cols).map(|j| gamma * (cols - j) as f64));
    for i in (0..rows).rev() {
        let mut diag = scratch[cols];
        scratch[cols] = gamma * (rows - i) as f64;
        for j in (0..cols).rev() {
            let down = scratch[j];
            let best = (diag + d0(i, j)).min(scratch[j + 1] + gamma).min(down + gamma);
            diag = down;
            scratch[j] = best;
        }
    }
    scratch[0]
}

pub(crate) const LANES: usize = 8;

/// `edit_cost` for `LANES` grids of the same shape at once. Each lane runs
/// exactly the scalar sequence of operations, so results are identical; the
/// independent lanes hide the latency of the row recurrence.
pub(crate) fn edit_cost_lanes(
    rows: usize,
    cols: usize,
    gamma: f64,
    d0: impl Fn(usize, usize) -> [f64; LANES],
    scratch: &mut Vec<[f64; LANES]>,
) -> [f64; LANES] {
    scratch.clear();
    scratch.extend((0..=cols).map(|j| [gamma * (cols - j) as f64; LANES]));
    for i in (0..rows).rev() {
        let mut diag = scratch[cols];
        scratch[cols] = [gamma * (rows - i) as f64; LANES];
        for j in (0..cols).rev() {
            let down = scratch[j];
            let right = scratch[j + 1];
            let cost = d0(i, j);
            let mut best = [0.0; LANES];
            for l in 0..LANES {
                let x = diag[l] + cost[l];
                let y = right[l] + gamma;
                let z = down[l] + gamma;
                let xy = if y < x { y } else { x };
                best[l] = if z < xy { z } else { xy };
            }
            diag = down;
            scratch[j] = best;
        }
    }
    scratch[0]
}

/// Borrowed keys of either scheme.
#[derive(Clone, Copy, Debug)]
pub enum KeySlice<'a> {
    Its(&'a [ItsKey]),
    Ems(&'a [EmsKey]),
}

impl<'a> KeySlice<'a> {
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

    pub fn slice(&self, range: std::ops::Range<usize>) -> KeySlice<'a> {
        match *self {
            Self::Its(k) => Self::Its(&k[range]),
            Self::Ems(k) => Self::Ems(&k[range]),
        }
    }
}

impl<'a> From<&'a Keys> for KeySlice<'a> {
    fn from(keys: &'a Keys) -> Self {
        match keys {
            Keys::Its(k) => Self::Its(k),
            Keys::Ems(k) => Self::Ems(k),
        }
    }
}

impl<'a> From<&'a KeySequence> for KeySlice<'a> {
    fn from(keys: &'a KeySequence) -> Self {
        keys.keys().into()
    }
}

/// Evaluates `measure` on the given slices.
pub fn measure(measure: Measure, keys: KeySlice<'_>, tokens: &[TokenId]) -> Result<f64> {
    if measure.kind.scheme() != keys.scheme() {
        return Err(invalid(format!("measure {} cannot score {} keys", measure.kind, keys.scheme())));
    }
    match (measure.kind, keys) {
        (MeasureKind::Its, KeySlice::Its(k)) => m_its(k, tokens),
        (MeasureKind::Ems, KeySlice::Ems(k)) => m_ems(k, tokens),
        (MeasureKind::Itsl, KeySlice::Its(k)) => Ok(-levenshtein_cost(tokens, k, measure.gamma)?),
        (MeasureKind::Emsl, KeySlice::Ems(k)) => Ok(-levenshtein_cost(tokens, k, measure.gamma)?),
        _ => unreachable!("scheme checked above"),
    }
}

/// Dense `n x V` table of a key sequence's per-position values for one
/// measure: summands for `Its`/`Ems`, base alignment costs for the
/// Levenshtein variants. Scans look values up instead of recomputing logs.
#[derive(Clone, Debug)]
pub(crate) struct ScoreTable {
    vocab_size: usize,
    values: Vec<f64>,
}

impl ScoreTable {
    pub(crate) fn new(keys: &KeySequence, kind: MeasureKind) -> Result<Self> {
        if kind.scheme() != keys.scheme() {
            return Err(invalid(format!("measure {kind} cannot score {} keys", keys.scheme())));
        }
        let v = keys.vocab_size();
        let tokens: Vec<TokenId> = (0..v).map(TokenId::from_index).collect();
        let mut values = Vec::with_capacity(keys.len() * v);
        match keys.keys() {
            Keys::Its(k) => fill(&mut values, k, &tokens, kind.is_levenshtein()),
            Keys::Ems(k) => fill(&mut values, k, &tokens, kind.is_levenshtein()),
        }
        Ok(Self { vocab_size: v, values })
    }

    pub(crate) fn len(&self) -> usize {
        self.values.len() / self.vocab_size
    }

    /// Row of values for key position `k`, indexed by zero-based token.
    #[inline]
    pub(crate) fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.vocab_size..(k + 1) * self.vocab_size]
    }
}

fn fill<K: KeyTerms>(out: &mut Vec<f64>, keys: &[K], tokens: &[TokenId], align: bool) {
    for key in keys {
        if align {
            out.extend(tokens.iter().map(|t| key.align_cost(*t)));
        } else {
            out.extend(tokens.iter().map(|t| key.term(*t)));
        }
    }
}
