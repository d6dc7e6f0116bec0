//! Randomization tests for watermark detection.
//!
//! The observed key sequence is scored against the text and compared with
//! `T` replicate key sequences drawn independently of the text. Under the
//! null the observed and replicate statistics are exchangeable, which makes
//! the rank-based p-value exact at every sample size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dependence::{edit_cost, edit_cost_lanes, Measure, ScoreTable, LANES};
use crate::error::{invalid, Error, Result};
use crate::seed::{self, domain};
use crate::toy_lm::TokenId;
use crate::watermark::KeySequence;

pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_REPLICATES: usize = 999;
pub const QUICK_REPLICATES: usize = 99;

/// Largest `B` with `B <= 3 n^(1/3)`, rounded down to an even number.
pub fn auto_window(n: usize) -> usize {
    let limit = 27u128 * n as u128;
    let mut b: u128 = 0;
    while (b + 1).pow(3) <= limit {
        b += 1;
    }
    let even = (b as usize) & !1;
    even.max(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Window size `B`; even.
    pub window: usize,
    /// Number of replicate key sequences `T`.
    pub replicates: usize,
    pub measure: Measure,
    pub seed: u64,
}

impl TestConfig {
    pub fn new(window: usize, replicates: usize, measure: Measure, seed: u64) -> Result<Self> {
        let config = Self { window, replicates, measure, seed };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !self.window.is_multiple_of(2) {
            return Err(invalid(format!("window size must be a positive even number, got {}", self.window)));
        }
        if self.replicates == 0 {
            return Err(invalid("at least one replicate is required"));
        }
        Measure::new(self.measure.kind, self.measure.gamma)?;
        Ok(())
    }
}

/// Sliding-window p-values `p_1..p_m`, one per token position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueSequence {
    pub pvals: Vec<f64>,
    pub window: usize,
    pub replicates: usize,
    pub measure: Measure,
}

impl PValueSequence {
    pub fn len(&self) -> usize {
        self.pvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pvals.is_empty()
    }

    /// CSV with header `index,p` and one-based indices.
    pub fn to_csv(&self) -> String {
        write_pvalues_csv(&self.pvals)
    }
}

pub fn write_pvalues_csv(pvals: &[f64]) -> String {
    let mut out = String::with_capacity(16 * pvals.len() + 8);
    out.push_str("index,p\n");
    for (i, p) in pvals.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, p));
    }
    out
}

/// Parses the `index,p` CSV format. Indices must run 1, 2, ... in order.
pub fn read_pvalues_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("index,p") => {}
        other => return Err(Error::Format(format!("expected header `index,p`, found {other:?}"))),
    }
    let mut pvals = Vec::new();
    for (row, line) in lines.enumerate() {
        let (index, p) = line
            .trim()
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("line {}: expected two fields", row + 2)))?;
        let index: usize = index.parse().map_err(|_| Error::Format(format!("line {}: bad index", row + 2)))?;
        if index != row + 1 {
            return Err(Error::Format(format!("line {}: index {index} out of order", row + 2)));
        }
        let p: f64 = p.parse().map_err(|_| Error::Format(format!("line {}: bad p-value", row + 2)))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Format(format!("line {}: p-value {p} outside [0, 1]", row + 2)));
        }
        pvals.push(p);
    }
    Ok(pvals)
}

/// `(1 + #{t : observed <= replicate_t}) / (T + 1)`.
pub fn randomization_pvalue(observed: f64, replicates: &[f64]) -> Result<f64> {
    if replicates.is_empty() {
        return Err(invalid("at least one replicate statistic is required"));
    }
    let exceed = replicates.iter().filter(|r| observed <= **r).count();
    Ok(rank_pvalue(exceed, replicates.len()))
}

fn rank_pvalue(exceed: usize, replicates: usize) -> f64 {
    (1 + exceed) as f64 / (replicates + 1) as f64
}

/// Contiguous zero-based range `[start, start + len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Span {
    pub start: usize,
    pub len: usize,
}

/// Every length-`window` span of a sequence of length `n`.
fn fixed_spans(n: usize, window: usize) -> Vec<Span> {
    (0..=n - window).map(|start| Span { start, len: window }).collect()
}

/// Spans `[(i - B/2) v 1, (i + B/2) ^ n]` for `i = 1..=n`, zero-based.
pub(crate) fn centered_spans(n: usize, window: usize) -> Vec<Span> {
    let half = window / 2;
    (1..=n)
        .map(|i| {
            let lo = i.saturating_sub(half).max(1);
            let hi = (i + half).min(n);
            Span { start: lo - 1, len: hi - lo + 1 }
        })
        .collect()
}

#[derive(Default)]
struct ScanBuffers {
    prefix: Vec<f64>,
    dp: Vec<f64>,
    lanes: Vec<[f64; LANES]>,
}

/// For every token span, the maximum of the measure over all key spans.
///
/// Additive measures use diagonal prefix sums so each (key span, token span)
/// pair costs O(1); spans of unequal length are compared over their first
/// `min(len)` aligned positions. Levenshtein measures run the alignment DP on
/// the full, possibly unequal, spans.
fn scan_max(
    table: &ScoreTable,
    text: &[usize],
    token_spans: &[Span],
    key_spans: &[Span],
    measure: Measure,
    buf: &mut ScanBuffers,
) -> Vec<f64> {
    if measure.kind.is_levenshtein() {
        return scan_levenshtein(table, text, token_spans, key_spans, measure.gamma, buf);
    }

    let n = table.len();
    let m = text.len();
    let stride = m + 1;
    buf.prefix.clear();
    buf.prefix.resize((n + 1) * stride, 0.0);
    for k in 0..n {
        let row = table.row(k);
        let (done, rest) = buf.prefix.split_at_mut((k + 1) * stride);
        let prev = &done[k * stride..];
        let cur = &mut rest[..stride];
        for j in 0..m {
            cur[j + 1] = prev[j] + row[text[j]];
        }
    }
    let prefix = &buf.prefix;
    token_spans
        .iter()
        .map(|ts| {
            let mut best = f64::NEG_INFINITY;
            for ks in key_spans {
                let len = ts.len.min(ks.len);
                let sum = prefix[(ks.start + len) * stride + ts.start + len] - prefix[ks.start * stride + ts.start];
                let value = sum / len as f64;
                if value > best {
                    best = value;
                }
            }
            best
        })
        .collect()
}

/// Levenshtein branch of `scan_max`. Runs of equal-length key spans with
/// consecutive starts are aligned `LANES` at a time against a token-by-key
/// matrix of base costs, so each lane reads a contiguous slice.
fn scan_levenshtein(
    table: &ScoreTable,
    text: &[usize],
    token_spans: &[Span],
    key_spans: &[Span],
    gamma: f64,
    buf: &mut ScanBuffers,
) -> Vec<f64> {
    let n = table.len();
    buf.prefix.clear();
    buf.prefix.extend(text.iter().flat_map(|&t| (0..n).map(move |k| (k, t))).map(|(k, t)| table.row(k)[t]));
    let costs = &buf.prefix;
    let mut out = Vec::with_capacity(token_spans.len());
    for ts in token_spans {
        let mut best = f64::NEG_INFINITY;
        let mut a = 0;
        while a < key_spans.len() {
            let ks = key_spans[a];
            let batch = a + LANES <= key_spans.len()
                && (1..LANES).all(|l| key_spans[a + l] == Span { start: ks.start + l, len: ks.len });
            if batch {
                let lanes = edit_cost_lanes(
                    ts.len,
                    ks.len,
                    gamma,
                    |i, j| {
                        let at = (ts.start + i) * n + ks.start + j;
                        costs[at..at + LANES].try_into().unwrap()
                    },
                    &mut buf.lanes,
                );
                for cost in lanes {
                    best = best.max(-cost);
                }
                a += LANES;
            } else {
                let cost = edit_cost(ts.len, ks.len, gamma, |i, j| costs[(ts.start + i) * n + ks.start + j], &mut buf.dp);
                best = best.max(-cost);
                a += 1;
            }
        }
        out.push(best);
    }
    out
}

fn token_indices(keys: &KeySequence, text: &[TokenId]) -> Result<Vec<usize>> {
    text.iter()
        .map(|t| TokenId::new(t.get(), keys.vocab_size()).map(TokenId::index))
        .collect()
}

fn replicate_keys(keys: &KeySequence, seed: u64, t: usize) -> Result<KeySequence> {
    KeySequence::generate(
        keys.scheme(),
        keys.len(),
        keys.vocab_size(),
        seed::derive(seed, domain::REPLICATE_KEYS, t as u64),
    )
}

/// Maximum of the measure over every pair of length-`window` key and token
/// windows.
pub fn global_scan_stat(keys: &KeySequence, text: &[TokenId], window: usize, measure: Measure) -> Result<f64> {
    let tokens = token_indices(keys, text)?;
    check_global(keys, &tokens, window)?;
    let table = ScoreTable::new(keys, measure.kind)?;
    let spans_k = fixed_spans(keys.len(), window);
    let spans_t = fixed_spans(tokens.len(), window);
    let stats = scan_max(&table, &tokens, &spans_t, &spans_k, measure, &mut ScanBuffers::default());
    Ok(stats.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

fn check_global(keys: &KeySequence, tokens: &[usize], window: usize) -> Result<()> {
    if window == 0 || window > keys.len() || window > tokens.len() {
        return Err(invalid(format!(
            "window {window} must lie in 1..=min(n = {}, m = {})",
            keys.len(),
            tokens.len()
        )));
    }
    Ok(())
}

/// Global randomization test of the whole text using the scan statistic.
pub fn global_test(keys: &KeySequence, text: &[TokenId], config: &TestConfig) -> Result<f64> {
    if config.replicates == 0 {
        return Err(invalid("at least one replicate is required"));
    }
    let tokens = token_indices(keys, text)?;
    check_global(keys, &tokens, config.window)?;
    let spans_k = fixed_spans(keys.len(), config.window);
    let spans_t = fixed_spans(tokens.len(), config.window);
    let stat = |keys: &KeySequence, buf: &mut ScanBuffers| -> Result<f64> {
        let table = ScoreTable::new(keys, config.measure.kind)?;
        let stats = scan_max(&table, &tokens, &spans_t, &spans_k, config.measure, buf);
        Ok(stats.into_iter().fold(f64::NEG_INFINITY, f64::max))
    };
    let observed = stat(keys, &mut ScanBuffers::default())?;
    let replicates = (0..config.replicates)
        .into_par_iter()
        .map_init(ScanBuffers::default, |buf, t| stat(&replicate_keys(keys, config.seed, t)?, buf))
        .collect::<Result<Vec<f64>>>()?;
    randomization_pvalue(observed, &replicates)
}

/// Sliding-window p-value sequence.
///
/// For each position `i` the statistic is the best match between the token
/// window centered at `i` and any key window centered at `k`. The same `T`
/// replicate key sequences serve every window.
pub fn window_pvalues(keys: &KeySequence, text: &[TokenId], config: &TestConfig) -> Result<PValueSequence> {
    config.validate()?;
    let tokens = token_indices(keys, text)?;
    let half = config.window / 2;
    if half >= tokens.len() {
        return Err(invalid(format!("half window {half} must be shorter than the text ({})", tokens.len())));
    }
    if keys.is_empty() {
        return Err(invalid("key sequence is empty"));
    }
    let spans_t = centered_spans(tokens.len(), config.window);
    let spans_k = centered_spans(keys.len(), config.window);
    let stats = |keys: &KeySequence, buf: &mut ScanBuffers| -> Result<Vec<f64>> {
        let table = ScoreTable::new(keys, config.measure.kind)?;
        Ok(scan_max(&table, &tokens, &spans_t, &spans_k, config.measure, buf))
    };
    let observed = stats(keys, &mut ScanBuffers::default())?;
    let exceed = (0..config.replicates)
        .into_par_iter()
        .map_init(ScanBuffers::default, |buf, t| {
            let rep = stats(&replicate_keys(keys, config.seed, t)?, buf)?;
            Ok::<_, Error>(observed.iter().zip(&rep).map(|(o, r)| u32::from(o <= r)).collect::<Vec<u32>>())
        })
        .try_reduce(
            || vec![0u32; observed.len()],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                Ok(a)
            },
        )?;
    Ok(PValueSequence {
        pvals: exceed.iter().map(|&c| rank_pvalue(c as usize, config.replicates)).collect(),
        window: config.window,
        replicates: config.replicates,
        measure: config.measure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dependence::{measure, KeySlice, MeasureKind};
    use crate::toy_lm::TokenModel;
    use crate::watermark::{generate_watermarked, EmsKey, Keys, Scheme};
    use approx::assert_abs_diff_eq;

    fn tok(v: u32) -> TokenId {
        TokenId::new(v, 100).unwrap()
    }

    #[test]
    fn randomization_pvalue_formula() {
        let reps: Vec<f64> = (0..9).map(f64::from).collect();
        assert_eq!(randomization_pvalue(100.0, &reps).unwrap(), 0.1);
        assert_eq!(randomization_pvalue(-1.0, &reps).unwrap(), 1.0);
        // ties count as exceedances
        assert_eq!(randomization_pvalue(4.0, &reps).unwrap(), 0.6);
        assert!(randomization_pvalue(0.0, &[]).is_err());
    }

    #[test]
    fn auto_window_rule() {
        // floor(3 * 500^(1/3)) = 23, rounded down to even
        assert_eq!(auto_window(500), 22);
        assert_eq!(auto_window(1000), 30);
        assert_eq!(auto_window(8), 6);
        assert_eq!(auto_window(1), 2);
    }

    #[test]
    fn config_validation() {
        assert!(TestConfig::new(21, 10, Measure::ems(), 0).is_err());
        assert!(TestConfig::new(0, 10, Measure::ems(), 0).is_err());
        assert!(TestConfig::new(20, 0, Measure::ems(), 0).is_err());
        assert!(TestConfig::new(20, 10, Measure::ems(), 0).is_ok());
    }

    #[test]
    fn centered_span_clamping() {
        let spans = centered_spans(50, 20);
        assert_eq!(spans[0], Span { start: 0, len: 11 });
        assert_eq!(spans[49], Span { start: 39, len: 11 });
        assert_eq!(spans[25], Span { start: 15, len: 21 });
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let p = vec![0.001, 0.5, 1.0, 0.123456789012345];
        let csv = write_pvalues_csv(&p);
        assert!(csv.starts_with("index,p\n1,0.001\n"));
        assert_eq!(read_pvalues_csv(&csv).unwrap(), p);
        assert!(read_pvalues_csv("i,p\n1,0.5\n").is_err());
        assert!(read_pvalues_csv("index,p\n2,0.5\n").is_err());
        assert!(read_pvalues_csv("index,p\n1,1.5\n").is_err());
    }

    fn ems_keys(values: &[f64], token: usize, v: usize) -> KeySequence {
        let keys = values
            .iter()
            .map(|&x| {
                let mut xi = vec![0.5; v];
                xi[token] = x;
                EmsKey::new(xi).unwrap()
            })
            .collect();
        KeySequence::from_keys(v, Keys::Ems(keys)).unwrap()
    }

    #[test]
    fn degenerate_scan_equals_full_measure() {
        let keys = KeySequence::generate(Scheme::Ems, 8, 5, 3).unwrap();
        let text: Vec<TokenId> = (0..8).map(|i| tok(i % 5 + 1)).collect();
        let direct = measure(Measure::ems(), (&keys).into(), &text).unwrap();
        let scan = global_scan_stat(&keys, &text, 8, Measure::ems()).unwrap();
        assert_abs_diff_eq!(scan, direct, epsilon = 1e-12);
        assert!(global_scan_stat(&keys, &text, 9, Measure::ems()).is_err());
    }

    #[test]
    fn three_position_hand_case() {
        // every text token is 1; per-position scores ln(x) + 1 for key values x
        let e = std::f64::consts::E;
        let keys = ems_keys(&[1.0 / e, 0.9, (-3.0f64).exp()], 0, 3);
        let text = vec![tok(1), tok(1), tok(1)];
        // the token windows are all identical, so the max is over key windows:
        // scores (0, 1 + ln 0.9, -2); best length-2 window is the first pair
        let expected = (0.0 + 1.0 + 0.9f64.ln()) / 2.0;
        assert_abs_diff_eq!(global_scan_stat(&keys, &text, 2, Measure::ems()).unwrap(), expected, epsilon = 1e-12);
        let best_single = 1.0 + 0.9f64.ln();
        assert_abs_diff_eq!(global_scan_stat(&keys, &text, 1, Measure::ems()).unwrap(), best_single, epsilon = 1e-12);
    }

    #[test]
    fn scan_matches_brute_force() {
        let v = 6;
        let keys = KeySequence::generate(Scheme::Its, 15, v, 8).unwrap();
        let text: Vec<TokenId> = (0..12).map(|i| tok((i * 5 % v) as u32 + 1)).collect();
        for kind in [MeasureKind::Its, MeasureKind::Itsl] {
            let m = Measure::from(kind);
            let slice: KeySlice = (&keys).into();
            let mut brute = f64::NEG_INFINITY;
            for a in 0..=15 - 4 {
                for b in 0..=12 - 4 {
                    brute = brute.max(measure(m, slice.slice(a..a + 4), &text[b..b + 4]).unwrap());
                }
            }
            assert_abs_diff_eq!(global_scan_stat(&keys, &text, 4, m).unwrap(), brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn appending_a_strong_window_never_lowers_the_statistic() {
        let v = 4;
        let keys = ems_keys(&[0.3, 0.6, 0.2, 0.5, 0.4], 0, v);
        let text = vec![tok(1); 5];
        let before = global_scan_stat(&keys, &text, 2, Measure::ems()).unwrap();
        let keys_after = ems_keys(&[0.3, 0.6, 0.2, 0.5, 0.4, 0.999], 0, v);
        let text_after = vec![tok(1); 6];
        let after = global_scan_stat(&keys_after, &text_after, 2, Measure::ems()).unwrap();
        assert!(after >= before);
        assert!(after > before, "the appended pair creates a higher-scoring window");
    }

    #[test]
    fn window_pvalues_match_direct_evaluation() {
        let model = TokenModel::new_markov(6, 1.0, 2).unwrap();
        let keys = KeySequence::generate(Scheme::Ems, 16, 6, 4).unwrap();
        let text = generate_watermarked(&model, &[], &keys).unwrap().tokens;
        let text = &text[..14];
        let config = TestConfig::new(4, 9, Measure::ems(), 77).unwrap();
        let fast = window_pvalues(&keys, text, &config).unwrap();

        // direct: phi_i = max_k M over aligned prefixes of the clamped windows
        let phi = |keys: &KeySequence| -> Vec<f64> {
            let ts = centered_spans(text.len(), 4);
            let ks = centered_spans(keys.len(), 4);
            let slice: KeySlice = keys.into();
            ts.iter()
                .map(|t| {
                    ks.iter()
                        .map(|k| {
                            let l = t.len.min(k.len);
                            measure(Measure::ems(), slice.slice(k.start..k.start + l), &text[t.start..t.start + l])
                                .unwrap()
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        };
        let obs = phi(&keys);
        let reps: Vec<Vec<f64>> = (0..9).map(|t| phi(&replicate_keys(&keys, 77, t).unwrap())).collect();
        for i in 0..text.len() {
            let col: Vec<f64> = reps.iter().map(|r| r[i]).collect();
            // prefix-sum rounding may differ from direct sums in the last bits
            let p = randomization_pvalue(obs[i] - 1e-12, &col).unwrap();
            let q = randomization_pvalue(obs[i] + 1e-12, &col).unwrap();
            assert!(fast.pvals[i] <= p && fast.pvals[i] >= q, "position {i}");
        }
    }

    #[test]
    fn levenshtein_window_scan_matches_direct_measure() {
        let model = TokenModel::new_markov(5, 1.0, 4).unwrap();
        let keys = KeySequence::generate(Scheme::Ems, 30, 5, 6).unwrap();
        let text = model.sample_plain(&[], 26, 1).unwrap().tokens;
        let tokens = token_indices(&keys, &text).unwrap();
        let table = ScoreTable::new(&keys, MeasureKind::Emsl).unwrap();
        let ts = centered_spans(text.len(), 6);
        let ks = centered_spans(keys.len(), 6);
        let fast = scan_max(&table, &tokens, &ts, &ks, Measure::emsl(), &mut ScanBuffers::default());
        let slice: KeySlice = (&keys).into();
        for (t, got) in ts.iter().zip(fast) {
            let want = ks
                .iter()
                .map(|k| {
                    let keys = slice.slice(k.start..k.start + k.len);
                    measure(Measure::emsl(), keys, &text[t.start..t.start + t.len]).unwrap()
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn pvalues_lie_on_grid() {
        let model = TokenModel::new_markov(8, 1.0, 1).unwrap();
        let keys = KeySequence::generate(Scheme::Its, 40, 8, 2).unwrap();
        let text = model.sample_plain(&[], 40, 3).unwrap().tokens;
        for kind in [MeasureKind::Its, MeasureKind::Itsl] {
            let config = TestConfig::new(6, 19, kind.into(), 5).unwrap();
            let p = window_pvalues(&keys, &text, &config).unwrap();
            assert_eq!(p.len(), 40);
            for &v in &p.pvals {
                let k = v * 20.0;
                assert!((k - k.round()).abs() < 1e-9 && (1.0..=20.0).contains(&k.round()));
            }
        }
    }

    #[test]
    fn t_equal_one_granularity() {
        let model = TokenModel::new_markov(5, 1.0, 1).unwrap();
        let keys = KeySequence::generate(Scheme::Ems, 30, 5, 2).unwrap();
        let text = model.sample_plain(&[], 30, 3).unwrap().tokens;
        for seed in 0..10 {
            let p = global_test(&keys, &text, &TestConfig::new(10, 1, Measure::ems(), seed).unwrap()).unwrap();
            assert!(p == 0.5 || p == 1.0);
        }
    }

    #[test]
    fn rejects_mismatched_measure_and_text() {
        let keys = KeySequence::generate(Scheme::Ems, 30, 5, 2).unwrap();
        let text: Vec<TokenId> = (0..30).map(|_| tok(1)).collect();
        assert!(window_pvalues(&keys, &text, &TestConfig::new(4, 5, Measure::its(), 0).unwrap()).is_err());
        let bad: Vec<TokenId> = (0..30).map(|_| tok(6)).collect();
        assert!(window_pvalues(&keys, &bad, &TestConfig::new(4, 5, Measure::ems(), 0).unwrap()).is_err());
        assert!(window_pvalues(&keys, &text[..2], &TestConfig::new(4, 5, Measure::ems(), 0).unwrap()).is_err());
    }
}
