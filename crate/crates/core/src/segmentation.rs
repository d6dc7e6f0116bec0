//! Change-point segmentation of a p-value sequence.
//!
//! Splits are scored with a weighted two-sample Kolmogorov-Smirnov scan,
//! calibrated per interval with a moving block bootstrap, and combined over
//! seeded intervals by narrowest-over-threshold selection.
//!
//! Change points are reported as the one-based index of the first token of
//! a new segment, so a split after token `tau` is reported as `tau + 1`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::{self, domain};

pub const DEFAULT_DECAY: f64 = std::f64::consts::FRAC_1_SQRT_2;
pub const DEFAULT_THRESHOLD: f64 = 0.005;
pub const DEFAULT_BLOCK: usize = 20;
pub const DEFAULT_BOOT_REPLICATES: usize = 999;
pub const DEFAULT_MIN_LEN: usize = 50;

const SNAP: f64 = 1e-9;

fn check_pvals(pvals: &[f64]) -> Result<()> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("p-value {p} outside [0, 1]")));
    }
    Ok(())
}

/// Fraction of entries `<= t`.
pub fn ecdf(pvals: &[f64], t: f64) -> Result<f64> {
    if pvals.is_empty() {
        return Err(invalid("empirical cdf of an empty slice"));
    }
    Ok(pvals.iter().filter(|&&p| p <= t).count() as f64 / pvals.len() as f64)
}

/// Dense ranks of `x` and its sorted distinct values.
fn rank(x: &[f64]) -> (Vec<u32>, Vec<f64>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0u32; x.len()];
    let mut distinct: Vec<f64> = Vec::new();
    for i in order {
        if distinct.last() != Some(&x[i]) {
            distinct.push(x[i]);
        }
        ranks[i] = (distinct.len() - 1) as u32;
    }
    (ranks, distinct)
}

fn scale(len: usize) -> f64 {
    (len as f64).powf(1.5)
}

/// Cumulative counts `#{x <= v_q}` over distinct-value ranks.
fn cumulative(ranks: &[u32], distinct: usize, out: &mut Vec<i64>) {
    out.clear();
    out.resize(distinct, 0);
    for &r in ranks {
        out[r as usize] += 1;
    }
    for q in 1..distinct {
        out[q] += out[q - 1];
    }
}

#[derive(Default)]
struct ScanBuffers {
    total: Vec<i64>,
    left: Vec<i64>,
    resample: Vec<u32>,
}

/// Best split of a ranked slice as `(tau, numerator)`.
///
/// With `L` values, `tau` on the left and cumulative counts `c_L`, `c_T` at a
/// distinct value, `tau (L - tau) |F_left - F_right| = |c_L L - c_T tau| / L`,
/// so the scan statistic is an integer numerator divided by `L^1.5`.
fn scan_ranks(ranks: &[u32], distinct: usize, buf: &mut ScanBuffers) -> (usize, i64) {
    let len = ranks.len();
    cumulative(ranks, distinct, &mut buf.total);
    buf.left.clear();
    buf.left.resize(distinct, 0);
    let l = len as i64;
    let mut best = (1, -1);
    for tau in 1..len {
        let r = ranks[tau - 1] as usize;
        let t = tau as i64;
        let mut top = 0;
        for (q, (c, &total)) in buf.left.iter_mut().zip(&buf.total).enumerate() {
            *c += i64::from(q >= r);
            top = top.max((*c * l - total * t).abs());
        }
        if top > best.1 {
            best = (tau, top);
        }
    }
    best
}

fn check_split(len: usize, tau: usize) -> Result<()> {
    if tau == 0 || tau >= len {
        return Err(invalid(format!("split {tau} must leave both sides of a length-{len} slice nonempty")));
    }
    Ok(())
}

/// Scan statistic for splitting `pvals` after its first `tau` entries.
pub fn ks_stat(pvals: &[f64], tau: usize) -> Result<f64> {
    check_pvals(pvals)?;
    check_split(pvals.len(), tau)?;
    let (ranks, distinct) = rank(pvals);
    let mut total = Vec::new();
    let mut left = Vec::new();
    cumulative(&ranks, distinct.len(), &mut total);
    cumulative(&ranks[..tau], distinct.len(), &mut left);
    let l = pvals.len() as i64;
    let top = left.iter().zip(&total).map(|(c, t)| (c * l - t * tau as i64).abs()).max().unwrap_or(0);
    Ok(top as f64 / scale(pvals.len()))
}

/// Weight function for the Cramer-von Mises statistic, given through its
/// integral over subintervals of `[0, 1]`.
pub trait Weight {
    /// `integral of w over [lo, hi]`.
    fn mass(&self, lo: f64, hi: f64) -> f64;
}

/// `w = 1`.
#[derive(Clone, Copy, Debug, Default)]
pub struct UnitWeight;

impl Weight for UnitWeight {
    fn mass(&self, lo: f64, hi: f64) -> f64 {
        hi - lo
    }
}

/// Weight given by an antiderivative `W` with `W' = w`.
#[derive(Clone, Copy, Debug)]
pub struct Antiderivative<F>(pub F);

impl<F: Fn(f64) -> f64> Weight for Antiderivative<F> {
    fn mass(&self, lo: f64, hi: f64) -> f64 {
        (self.0)(hi) - (self.0)(lo)
    }
}

/// Cramer-von Mises statistic for splitting after the first `tau` entries.
/// The squared ECDF difference is piecewise constant between sorted values,
/// so the integral is an exact finite sum.
pub fn cvm_stat(pvals: &[f64], tau: usize, weight: &impl Weight) -> Result<f64> {
    check_pvals(pvals)?;
    check_split(pvals.len(), tau)?;
    let (ranks, distinct) = rank(pvals);
    let mut total = Vec::new();
    let mut left = Vec::new();
    cumulative(&ranks, distinct.len(), &mut total);
    cumulative(&ranks[..tau], distinct.len(), &mut left);
    let l = pvals.len() as f64;
    let sum: f64 = (0..distinct.len())
        .map(|q| {
            let upper = distinct.get(q + 1).copied().unwrap_or(1.0);
            let num = left[q] as f64 * l - total[q] as f64 * tau as f64;
            num * num * weight.mass(distinct[q], upper)
        })
        .sum();
    Ok(sum / (l * l * l))
}

/// Location and value of the maximal scan statistic over `1 <= tau < len`.
/// Ties go to the smallest `tau`.
pub fn best_split(pvals: &[f64]) -> Result<(usize, f64)> {
    check_pvals(pvals)?;
    if pvals.len() < 2 {
        return Err(invalid("a split needs at least two values"));
    }
    let (ranks, distinct) = rank(pvals);
    let (tau, top) = scan_ranks(&ranks, distinct.len(), &mut ScanBuffers::default());
    Ok((tau, top as f64 / scale(pvals.len())))
}

fn bootstrap_exceedances(ranks: &[u32], distinct: usize, observed: f64, block: usize, reps: usize, seed: u64) -> usize {
    let len = ranks.len();
    let blocks = len.div_ceil(block);
    (0..reps)
        .into_par_iter()
        .map_init(ScanBuffers::default, |buf, t| {
            let mut rng = seed::stream(seed, t as u64);
            let mut resample = std::mem::take(&mut buf.resample);
            resample.clear();
            for _ in 0..blocks {
                let start = rng.random_range(0..=len - block);
                resample.extend_from_slice(&ranks[start..start + block]);
            }
            resample.truncate(len);
            let (_, top) = scan_ranks(&resample, distinct, buf);
            buf.resample = resample;
            observed <= top as f64 / scale(len)
        })
        .filter(|&hit| hit)
        .count()
}

/// Moving block bootstrap p-value of `observed` (the maximal scan statistic
/// of `pvals`) from `reps` resamples of length-`block` blocks.
pub fn block_bootstrap_pvalue(pvals: &[f64], observed: f64, block: usize, reps: usize, seed: u64) -> Result<f64> {
    check_pvals(pvals)?;
    if block == 0 || pvals.len() < block.max(2) {
        return Err(invalid(format!("block size {block} does not fit a slice of length {}", pvals.len())));
    }
    if reps == 0 {
        return Err(invalid("at least one bootstrap replicate is required"));
    }
    let (ranks, distinct) = rank(pvals);
    let hits = bootstrap_exceedances(&ranks, distinct.len(), observed, block, reps, seed);
    Ok((1 + hits) as f64 / (reps + 1) as f64)
}

/// Half-open interval `(lo, hi]` of one-based positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn len(&self) -> usize {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    pub fn contains(&self, x: usize) -> bool {
        self.lo < x && x <= self.hi
    }
}

/// Multi-scale seeded intervals over `(0, m]`, in generation order with
/// duplicates dropped.
pub fn seeded_intervals(m: usize, decay: f64, min_len: usize) -> Result<Vec<Interval>> {
    if !(0.5..1.0).contains(&decay) {
        return Err(invalid(format!("decay must lie in [1/2, 1), got {decay}")));
    }
    if min_len < 2 || m < min_len {
        return Err(invalid(format!("need 2 <= min_len <= m, got min_len = {min_len}, m = {m}")));
    }
    let mf = m as f64;
    let layers = ((mf.ln() / (1.0 / decay).ln()) - SNAP).ceil().max(1.0) as usize;
    let mut out = vec![Interval { lo: 0, hi: m }];
    for k in 2..=layers {
        let len = mf * decay.powi(k as i32 - 1);
        if len < min_len as f64 - SNAP {
            break;
        }
        let count = 2 * ((1.0 / decay).powi(k as i32 - 1) - SNAP).ceil() as usize - 1;
        let shift = (mf - len) / (count - 1) as f64;
        for i in 0..count {
            let start = i as f64 * shift;
            let interval = Interval {
                lo: (start + SNAP).floor() as usize,
                hi: ((start + len - SNAP).ceil() as usize).min(m),
            };
            if !out.contains(&interval) {
                out.push(interval);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    /// Decay `a` of seeded interval lengths between layers.
    pub decay: f64,
    /// Candidates with bootstrap p-value strictly below this are kept.
    pub threshold: f64,
    pub boot_block: usize,
    pub boot_replicates: usize,
    pub min_len: usize,
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            decay: DEFAULT_DECAY,
            threshold: DEFAULT_THRESHOLD,
            boot_block: DEFAULT_BLOCK,
            boot_replicates: DEFAULT_BOOT_REPLICATES,
            min_len: DEFAULT_MIN_LEN,
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.5..1.0).contains(&self.decay) {
            return Err(invalid(format!("decay must lie in [1/2, 1), got {}", self.decay)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if self.boot_block == 0 || self.boot_block > self.min_len {
            return Err(invalid("bootstrap block must be positive and no longer than min_len"));
        }
        if self.boot_replicates == 0 {
            return Err(invalid("at least one bootstrap replicate is required"));
        }
        if self.min_len < 2 {
            return Err(invalid("min_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalCandidate {
    /// Position in seeded-interval generation order.
    pub index: usize,
    pub interval: Interval,
    /// Absolute split location: the last position of the left part.
    pub tau_hat: usize,
    pub stat: f64,
    pub p_tilde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    /// Sorted first positions of new segments.
    pub change_points: Vec<usize>,
    /// Candidates accepted by the selection, in acceptance order.
    pub accepted: Vec<IntervalCandidate>,
    pub candidates: Vec<IntervalCandidate>,
}

/// Scores every seeded interval: best split plus bootstrap p-value. Interval
/// `i` bootstraps from its own substream, so the result does not depend on
/// scheduling.
pub fn score_intervals(pvals: &[f64], config: &SegmentationConfig) -> Result<Vec<IntervalCandidate>> {
    config.validate()?;
    check_pvals(pvals)?;
    let intervals = seeded_intervals(pvals.len(), config.decay, config.min_len)?;
    Ok(intervals
        .par_iter()
        .enumerate()
        .map(|(index, &interval)| {
            let slice = &pvals[interval.lo..interval.hi];
            let (ranks, distinct) = rank(slice);
            let (tau, top) = scan_ranks(&ranks, distinct.len(), &mut ScanBuffers::default());
            let stat = top as f64 / scale(slice.len());
            let boot_seed = seed::derive(config.seed, domain::BOOTSTRAP, index as u64);
            let hits = bootstrap_exceedances(
                &ranks,
                distinct.len(),
                stat,
                config.boot_block,
                config.boot_replicates,
                boot_seed,
            );
            IntervalCandidate {
                index,
                interval,
                tau_hat: interval.lo + tau,
                stat,
                p_tilde: (1 + hits) as f64 / (config.boot_replicates + 1) as f64,
            }
        })
        .collect())
}

/// Narrowest-over-threshold selection among scored candidates.
///
/// Keeps candidates with `p_tilde < threshold`, then repeatedly accepts the
/// narrowest (ties to the earliest generated) and drops every candidate whose
/// interval contains its split.
pub fn select_narrowest(candidates: &[IntervalCandidate], threshold: f64) -> SegmentationResult {
    let mut open: Vec<&IntervalCandidate> = candidates.iter().filter(|c| c.p_tilde < threshold).collect();
    let mut accepted = Vec::new();
    while let Some(pick) = open.iter().min_by_key(|c| (c.interval.len(), c.index)).copied() {
        accepted.push(*pick);
        open.retain(|c| !c.interval.contains(pick.tau_hat));
    }
    let mut change_points: Vec<usize> = accepted.iter().map(|c| c.tau_hat + 1).collect();
    change_points.sort_unstable();
    change_points.dedup();
    let mut candidates = candidates.to_vec();
    candidates.sort_by_key(|c| c.index);
    SegmentationResult { change_points, accepted, candidates }
}

/// Seeded binary segmentation with narrowest-over-threshold selection.
pub fn seedbs_not(pvals: &[f64], config: &SegmentationConfig) -> Result<SegmentationResult> {
    if pvals.len() < config.min_len {
        return Err(invalid(format!("sequence of length {} is shorter than min_len {}", pvals.len(), config.min_len)));
    }
    let candidates = score_intervals(pvals, config)?;
    Ok(select_narrowest(&candidates, config.threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Watermarked,
    NonWatermarked,
}

/// A maximal run of equally labelled positions, one-based and inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub lo: usize,
    pub hi: usize,
    pub label: Label,
    pub median_p: f64,
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

fn label_of(pvals: &[f64]) -> (Label, f64) {
    let med = median(pvals);
    (if med < 0.5 { Label::Watermarked } else { Label::NonWatermarked }, med)
}

/// Checks that change points are strictly increasing within `2..=m`.
pub fn check_change_points(change_points: &[usize], m: usize) -> Result<()> {
    let mut prev = 1;
    for &c in change_points {
        if c <= prev || c > m {
            return Err(invalid(format!("change points must increase strictly within 2..={m}, got {change_points:?}")));
        }
        prev = c;
    }
    Ok(())
}

fn raw_segments(m: usize, change_points: &[usize]) -> Vec<(usize, usize)> {
    let mut bounds = vec![1];
    bounds.extend_from_slice(change_points);
    bounds.push(m + 1);
    bounds.windows(2).map(|w| (w[0], w[1] - 1)).collect()
}

/// Labels each position watermarked when the median p-value of its segment
/// is below 1/2.
pub fn labels_from_changepoints(pvals: &[f64], change_points: &[usize]) -> Result<Vec<Label>> {
    check_pvals(pvals)?;
    check_change_points(change_points, pvals.len())?;
    let mut labels = Vec::with_capacity(pvals.len());
    for (lo, hi) in raw_segments(pvals.len(), change_points) {
        let (label, _) = label_of(&pvals[lo - 1..hi]);
        labels.extend(std::iter::repeat_n(label, hi - lo + 1));
    }
    Ok(labels)
}

/// Segments induced by the change points, with adjacent equal labels merged.
pub fn segments(pvals: &[f64], change_points: &[usize]) -> Result<Vec<Segment>> {
    let labels = labels_from_changepoints(pvals, change_points)?;
    let mut out: Vec<Segment> = Vec::new();
    for (lo, hi) in raw_segments(pvals.len(), change_points) {
        let label = labels[lo - 1];
        match out.last_mut() {
            Some(last) if last.label == label => last.hi = hi,
            _ => out.push(Segment { lo, hi, label, median_p: 0.0 }),
        }
    }
    for s in &mut out {
        s.median_p = median(&pvals[s.lo - 1..s.hi]);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub lo: usize,
    pub hi: usize,
    pub tau_hat: usize,
    pub stat: f64,
    pub p_tilde: f64,
    pub accepted: bool,
}

/// Serializable summary of a segmentation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub change_points: Vec<usize>,
    pub segments: Vec<Segment>,
    pub candidates: Vec<CandidateRecord>,
}

impl SegmentationReport {
    pub fn new(pvals: &[f64], result: &SegmentationResult) -> Result<Self> {
        let candidates = result
            .candidates
            .iter()
            .map(|c| CandidateRecord {
                lo: c.interval.lo,
                hi: c.interval.hi,
                tau_hat: c.tau_hat,
                stat: c.stat,
                p_tilde: c.p_tilde,
                accepted: result.accepted.iter().any(|a| a.index == c.index),
            })
            .collect();
        Ok(Self {
            change_points: result.change_points.clone(),
            segments: segments(pvals, &result.change_points)?,
            candidates,
        })
    }
}
