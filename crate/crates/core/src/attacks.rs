//! Edit attacks on token sequences and the benchmark settings built from them.
//!
//! Positions are one-based and ranges inclusive, matching how change points
//! are reported.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::{self, domain};
use crate::segmentation::Label;
use crate::toy_lm::{Provenance, TokenId, TokenModel, TokenSequence};
use crate::watermark::{generate_watermarked, KeySequence, Scheme};

pub const DEFAULT_PROMPT_LEN: usize = 10;

/// Splices `filler` in before position `pos`; `pos = len + 1` appends.
pub fn attack_insert(text: &TokenSequence, pos: usize, filler: &[TokenId]) -> Result<TokenSequence> {
    if pos == 0 || pos > text.len() + 1 {
        return Err(invalid(format!("insert position {pos} outside 1..={}", text.len() + 1)));
    }
    if filler.is_empty() {
        return Ok(text.clone());
    }
    let mut tokens = Vec::with_capacity(text.len() + filler.len());
    tokens.extend_from_slice(&text.tokens[..pos - 1]);
    tokens.extend_from_slice(filler);
    tokens.extend_from_slice(&text.tokens[pos - 1..]);
    Ok(TokenSequence::new(tokens, Provenance::Mixed))
}

fn check_range(len: usize, lo: usize, hi: usize) -> Result<()> {
    if lo == 0 || lo > hi || hi > len {
        return Err(invalid(format!("range {lo}..={hi} invalid for a sequence of length {len}")));
    }
    Ok(())
}

/// Replaces positions `lo..=hi` with `filler` of the same length.
pub fn attack_substitute(text: &TokenSequence, lo: usize, hi: usize, filler: &[TokenId]) -> Result<TokenSequence> {
    check_range(text.len(), lo, hi)?;
    if filler.len() != hi - lo + 1 {
        return Err(invalid(format!("filler has {} tokens, range {lo}..={hi} needs {}", filler.len(), hi - lo + 1)));
    }
    let mut tokens = text.tokens.clone();
    tokens[lo - 1..hi].copy_from_slice(filler);
    Ok(TokenSequence::new(tokens, Provenance::Mixed))
}

/// Removes positions `lo..=hi`.
pub fn attack_delete(text: &TokenSequence, lo: usize, hi: usize) -> Result<TokenSequence> {
    check_range(text.len(), lo, hi)?;
    let mut tokens = text.tokens.clone();
    tokens.drain(lo - 1..hi);
    Ok(TokenSequence::new(tokens, text.provenance))
}

/// Known segmentation of a constructed text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// First positions of new segments.
    pub change_points: Vec<usize>,
    /// One label per segment.
    pub labels: Vec<Label>,
    pub len: usize,
}

impl GroundTruth {
    /// Label of every position.
    pub fn token_labels(&self) -> Vec<Label> {
        let mut bounds = vec![1];
        bounds.extend_from_slice(&self.change_points);
        bounds.push(self.len + 1);
        bounds
            .windows(2)
            .zip(&self.labels)
            .flat_map(|(w, &l)| std::iter::repeat_n(l, w[1] - w[0]))
            .collect()
    }
}

/// A constructed text with the keys used to watermark it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingInstance {
    pub prompt: TokenSequence,
    pub text: TokenSequence,
    pub keys: KeySequence,
    pub truth: GroundTruth,
}

struct Builder<'a> {
    model: &'a TokenModel,
    seed: u64,
    prompt: Vec<TokenId>,
    fillers: u64,
}

impl Builder<'_> {
    /// Plain tokens continuing from `context` (the prompt followed by it).
    fn plain(&mut self, context: &[TokenId], count: usize) -> Result<Vec<TokenId>> {
        let mut full = self.prompt.clone();
        full.extend_from_slice(context);
        let seed = seed::derive(self.seed, domain::FILLER, self.fillers);
        self.fillers += 1;
        Ok(self.model.sample_plain(&full, count, seed)?.tokens)
    }
}

fn start(model: &TokenModel, scheme: Scheme, n: usize, seed: u64, prompt_len: usize) -> Result<(Builder<'_>, TokenSequence, KeySequence)> {
    let prompt = model.sample_plain(&[], prompt_len, seed::derive(seed, domain::PROMPT, 0))?;
    let keys = KeySequence::generate(scheme, n, model.vocab_size(), seed::derive(seed, domain::OBSERVED_KEYS, 0))?;
    let text = generate_watermarked(model, &prompt.tokens, &keys)?;
    let builder = Builder { model, seed, prompt: prompt.tokens, fillers: 0 };
    Ok((builder, text, keys))
}

fn finish(builder: Builder<'_>, text: TokenSequence, keys: KeySequence, change_points: Vec<usize>, labels: Vec<Label>) -> SettingInstance {
    let truth = GroundTruth { change_points, labels, len: text.len() };
    SettingInstance { prompt: TokenSequence::new(builder.prompt, Provenance::Plain), text, keys, truth }
}

/// `watermarked` watermarked tokens followed by `plain` plain tokens that
/// continue from them. The change point is `watermarked + 1`.
pub fn build_two_segment(
    model: &TokenModel,
    scheme: Scheme,
    watermarked: usize,
    plain: usize,
    seed: u64,
    prompt_len: usize,
) -> Result<SettingInstance> {
    if plain == 0 {
        return Err(invalid("the plain segment must be nonempty"));
    }
    let (mut b, text, keys) = start(model, scheme, watermarked, seed, prompt_len)?;
    let filler = b.plain(&text.tokens, plain)?;
    let text = attack_insert(&text, text.len() + 1, &filler)?;
    Ok(finish(b, text, keys, vec![watermarked + 1], vec![Label::Watermarked, Label::NonWatermarked]))
}

/// The four benchmark settings:
///
/// 1. 500 watermarked tokens, no change point.
/// 2. 250 watermarked then 250 plain; change point 251.
/// 3. 500 watermarked with 201..=300 replaced by plain; change points 201, 301.
/// 4. 400 watermarked, 101..=200 replaced by plain, then 100 plain spliced in
///    before position 301; change points 101, 201, 301, 401.
///
/// Plain segments continue the model from the token preceding them.
pub fn build_setting(k: u32, model: &TokenModel, scheme: Scheme, seed: u64, prompt_len: usize) -> Result<SettingInstance> {
    use Label::{NonWatermarked as N, Watermarked as W};
    match k {
        1 => {
            let (b, text, keys) = start(model, scheme, 500, seed, prompt_len)?;
            Ok(finish(b, text, keys, vec![], vec![W]))
        }
        2 => build_two_segment(model, scheme, 250, 250, seed, prompt_len),
        3 => {
            let (mut b, text, keys) = start(model, scheme, 500, seed, prompt_len)?;
            let filler = b.plain(&text.tokens[..200], 100)?;
            let text = attack_substitute(&text, 201, 300, &filler)?;
            Ok(finish(b, text, keys, vec![201, 301], vec![W, N, W]))
        }
        4 => {
            let (mut b, text, keys) = start(model, scheme, 400, seed, prompt_len)?;
            let filler = b.plain(&text.tokens[..100], 100)?;
            let text = attack_substitute(&text, 101, 200, &filler)?;
            let filler = b.plain(&text.tokens[..300], 100)?;
            let text = attack_insert(&text, 301, &filler)?;
            Ok(finish(b, text, keys, vec![101, 201, 301, 401], vec![W, N, W, N, W]))
        }
        _ => Err(invalid(format!("setting must be 1, 2, 3 or 4, got {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(values: &[u32]) -> TokenSequence {
        TokenSequence::new(values.iter().map(|&v| TokenId::new(v, 1000).unwrap()).collect(), Provenance::Watermarked)
    }

    fn values(s: &TokenSequence) -> Vec<u32> {
        s.tokens.iter().map(|t| t.get()).collect()
    }

    #[test]
    fn insert_examples() {
        let text = seq(&[1, 2, 3]);
        let f = seq(&[9, 9]).tokens;
        assert_eq!(values(&attack_insert(&text, 4, &f).unwrap()), vec![1, 2, 3, 9, 9]);
        assert_eq!(values(&attack_insert(&text, 1, &f).unwrap()), vec![9, 9, 1, 2, 3]);
        assert_eq!(attack_insert(&text, 2, &[]).unwrap(), text);
        assert_eq!(attack_insert(&text, 2, &f).unwrap().provenance, Provenance::Mixed);
        assert!(attack_insert(&text, 0, &f).is_err());
        assert!(attack_insert(&text, 5, &f).is_err());

        let long = seq(&(1..=400).collect::<Vec<_>>());
        let f: Vec<TokenId> = seq(&[999; 100]).tokens;
        let out = values(&attack_insert(&long, 300, &f).unwrap());
        assert_eq!(out.len(), 500);
        assert_eq!(&out[399..], &(300..=400).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn substitute_examples() {
        let text = seq(&[1, 2, 3, 4]);
        assert_eq!(values(&attack_substitute(&text, 2, 2, &seq(&[7]).tokens).unwrap()), vec![1, 7, 3, 4]);
        assert_eq!(values(&attack_substitute(&text, 2, 3, &text.tokens[1..3]).unwrap()), values(&text));
        assert!(attack_substitute(&text, 2, 3, &seq(&[7]).tokens).is_err());
        assert!(attack_substitute(&text, 3, 2, &[]).is_err());
        assert!(attack_substitute(&text, 4, 5, &seq(&[7, 7]).tokens).is_err());
    }

    #[test]
    fn delete_examples() {
        let text = seq(&[1, 2, 3]);
        assert!(attack_delete(&text, 1, 3).unwrap().is_empty());
        assert!(attack_delete(&text, 1, 0).is_err());
        assert!(attack_delete(&text, 0, 1).is_err());
        let long = seq(&(1..=500).collect::<Vec<_>>());
        let out = values(&attack_delete(&long, 101, 200).unwrap());
        assert_eq!(out.len(), 400);
        assert_eq!(out[100], 201);
    }

    #[test]
    fn settings_have_expected_truth() {
        let model = TokenModel::new_markov(20, 5.0, 0).unwrap();
        let expected: [&[usize]; 4] = [&[], &[251], &[201, 301], &[101, 201, 301, 401]];
        for (k, cps) in (1..=4).zip(expected) {
            let inst = build_setting(k, &model, Scheme::Ems, 3, DEFAULT_PROMPT_LEN).unwrap();
            assert_eq!(inst.truth.change_points, cps);
            assert_eq!(inst.text.len(), 500);
            assert_eq!(inst.truth.len, 500);
            assert_eq!(inst.truth.labels.len(), cps.len() + 1);
            assert_eq!(inst.prompt.len(), DEFAULT_PROMPT_LEN);
            inst.text.validate(20).unwrap();
        }
        assert!(build_setting(5, &model, Scheme::Its, 0, 10).is_err());
        assert!(build_setting(0, &model, Scheme::Its, 0, 10).is_err());
    }

    #[test]
    fn watermarked_segments_match_regeneration() {
        // positions labelled watermarked carry the tokens the decoder emits
        // for their key, given the actual preceding token
        let model = TokenModel::new_markov(20, 5.0, 0).unwrap();
        for k in 1..=4 {
            for scheme in [Scheme::Its, Scheme::Ems] {
                let inst = build_setting(k, &model, scheme, 11, DEFAULT_PROMPT_LEN).unwrap();
                let labels = inst.truth.token_labels();
                assert_eq!(labels.len(), 500);
                let mut key = 0;
                let mut prev = inst.prompt.tokens.last().copied();
                for (pos, &label) in labels.iter().enumerate() {
                    let token = inst.text.tokens[pos];
                    match label {
                        Label::Watermarked => {
                            let want = inst.keys.decode(key, model.next_token_dist(&[prev.unwrap()]).unwrap());
                            if pos == 0 || labels[pos - 1] == Label::Watermarked {
                                assert_eq!(token, want, "setting {k} position {}", pos + 1);
                            }
                            key += 1;
                        }
                        Label::NonWatermarked => {
                            // substitutions consume key positions, insertions do not
                            if k == 3 || (k == 4 && pos < 200) {
                                key += 1;
                            }
                        }
                    }
                    prev = Some(token);
                }
                assert_eq!(key, inst.keys.len());
            }
        }
    }

    #[test]
    fn settings_are_deterministic() {
        let model = TokenModel::new_markov(20, 5.0, 0).unwrap();
        let a = build_setting(4, &model, Scheme::Its, 9, 10).unwrap();
        assert_eq!(a, build_setting(4, &model, Scheme::Its, 9, 10).unwrap());
        assert_ne!(a.text, build_setting(4, &model, Scheme::Its, 10, 10).unwrap().text);
    }

    proptest! {
        #[test]
        fn insert_then_delete_is_identity(
            text in prop::collection::vec(1u32..50, 0..40),
            filler in prop::collection::vec(1u32..50, 1..10),
            frac in 0.0f64..=1.0,
        ) {
            let text = seq(&text);
            let pos = 1 + (frac * text.len() as f64).round() as usize;
            let filler = seq(&filler).tokens;
            let inserted = attack_insert(&text, pos, &filler).unwrap();
            let back = attack_delete(&inserted, pos, pos + filler.len() - 1).unwrap();
            prop_assert_eq!(back.tokens, text.tokens);
        }
    }
}
