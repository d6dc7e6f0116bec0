//! Segmentation accuracy: the Rand index and the per-seed benchmark pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{build_setting, SettingInstance, DEFAULT_PROMPT_LEN};
use crate::dependence::Measure;
use crate::error::{invalid, Result};
use crate::rtest::{window_pvalues, TestConfig, DEFAULT_REPLICATES, DEFAULT_WINDOW};
use crate::segmentation::{
    check_change_points, score_intervals, select_narrowest, IntervalCandidate, SegmentationConfig,
};
use crate::toy_lm::TokenModel;

pub const DEFAULT_VOCAB: usize = 20;
pub const DEFAULT_BETA: f64 = 5.0;

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Rand index between the partitions of `1..=m` into consecutive runs
/// induced by two change-point sets.
pub fn rand_index(a: &[usize], b: &[usize], m: usize) -> Result<f64> {
    if m < 2 {
        return Err(invalid("the Rand index needs at least two positions"));
    }
    check_change_points(a, m)?;
    check_change_points(b, m)?;
    let sizes = |cps: &[usize]| -> Vec<u64> {
        let mut bounds = vec![1];
        bounds.extend_from_slice(cps);
        bounds.push(m + 1);
        bounds.windows(2).map(|w| (w[1] - w[0]) as u64).collect()
    };
    // cells of the contingency table are the runs between merged boundaries
    let mut merged: Vec<usize> = a.iter().chain(b).copied().collect();
    merged.sort_unstable();
    merged.dedup();
    let same_a: u128 = sizes(a).into_iter().map(pairs).sum();
    let same_b: u128 = sizes(b).into_iter().map(pairs).sum();
    let same_both: u128 = sizes(&merged).into_iter().map(pairs).sum();
    let total = pairs(m as u64);
    let agree = total + 2 * same_both - same_a - same_b;
    Ok(agree as f64 / total as f64)
}

/// A detection counts as false when it is farther than `tolerance` from
/// every true change point.
pub fn false_positives(detected: &[usize], truth: &[usize], tolerance: usize) -> usize {
    detected.iter().filter(|&&d| truth.iter().all(|&t| d.abs_diff(t) > tolerance)).count()
}

/// Everything needed to run the benchmark pipeline for one seed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vocab_size: usize,
    pub beta: f64,
    /// Seed of the token model, shared by every experiment seed.
    pub model_seed: u64,
    pub prompt_len: usize,
    pub window: usize,
    pub replicates: usize,
    pub segmentation: SegmentationConfig,
    pub fp_tolerance: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            vocab_size: DEFAULT_VOCAB,
            beta: DEFAULT_BETA,
            model_seed: 0,
            prompt_len: DEFAULT_PROMPT_LEN,
            window: DEFAULT_WINDOW,
            replicates: DEFAULT_REPLICATES,
            segmentation: SegmentationConfig::default(),
            fp_tolerance: 2 * DEFAULT_WINDOW,
        }
    }
}

impl ExperimentConfig {
    pub fn model(&self) -> Result<TokenModel> {
        TokenModel::new_markov(self.vocab_size, self.beta, self.model_seed)
    }

    pub fn test_config(&self, measure: Measure, seed: u64) -> Result<TestConfig> {
        TestConfig::new(self.window, self.replicates, measure, seed)
    }

    pub fn segmentation_config(&self, seed: u64) -> SegmentationConfig {
        SegmentationConfig { seed, ..self.segmentation }
    }
}

/// Intermediate products of the pipeline for one seed; candidates can be
/// re-thresholded without recomputing.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub instance: SettingInstance,
    pub pvals: Vec<f64>,
    pub candidates: Vec<IntervalCandidate>,
    pub elapsed_ms: u64,
}

impl SeedRun {
    pub fn record(&self, setting: u32, measure: Measure, threshold: f64, fp_tolerance: usize) -> Result<SeedRecord> {
        let detected = select_narrowest(&self.candidates, threshold).change_points;
        let truth = &self.instance.truth.change_points;
        Ok(SeedRecord {
            seed: self.seed,
            setting,
            measure,
            rand_index: rand_index(&detected, truth, self.pvals.len())?,
            n_detected: detected.len(),
            n_false_positive: false_positives(&detected, truth, fp_tolerance),
            runtime_ms: self.elapsed_ms,
            detected,
            truth: truth.clone(),
        })
    }
}

/// Builds the setting for `seed`, computes window p-values and scores the
/// seeded intervals. Both tests draw from `seed` in separate domains.
pub fn run_seed(setting: u32, seed: u64, measure: Measure, model: &TokenModel, config: &ExperimentConfig) -> Result<SeedRun> {
    let started = Instant::now();
    let instance = build_setting(setting, model, measure.kind.scheme(), seed, config.prompt_len)?;
    let pvals = window_pvalues(&instance.keys, &instance.text.tokens, &config.test_config(measure, seed)?)?.pvals;
    let candidates = score_intervals(&pvals, &config.segmentation_config(seed))?;
    Ok(SeedRun { seed, instance, pvals, candidates, elapsed_ms: started.elapsed().as_millis() as u64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub setting: u32,
    pub measure: Measure,
    pub detected: Vec<usize>,
    pub truth: Vec<usize>,
    pub rand_index: f64,
    pub n_detected: usize,
    pub n_false_positive: usize,
    pub runtime_ms: u64,
}

/// Median and quartiles, interpolating linearly between order statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let h = q * (v.len() - 1) as f64;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self { q1: at(0.25), median: at(0.5), q3: at(0.75) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub setting: u32,
    pub measure: Measure,
    pub seeds: Vec<u64>,
    pub records: Vec<SeedRecord>,
    pub rand_index: Option<Quartiles>,
    pub false_positives: Option<Quartiles>,
}

impl ExperimentReport {
    pub fn from_records(setting: u32, measure: Measure, mut records: Vec<SeedRecord>) -> Self {
        records.sort_by_key(|r| r.seed);
        let ri: Vec<f64> = records.iter().map(|r| r.rand_index).collect();
        let fp: Vec<f64> = records.iter().map(|r| r.n_false_positive as f64).collect();
        Self {
            setting,
            measure,
            seeds: records.iter().map(|r| r.seed).collect(),
            rand_index: Quartiles::of(&ri),
            false_positives: Quartiles::of(&fp),
            records,
        }
    }

    /// Flat CSV, one row per seed. Runtime is written as 0 when `timing` is
    /// false so the output is reproducible byte for byte.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("seed,setting,measure,rand_index,n_detected,n_false_positive,runtime_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.seed,
                r.setting,
                r.measure.kind,
                r.rand_index,
                r.n_detected,
                r.n_false_positive,
                if timing { r.runtime_ms } else { 0 }
            ));
        }
        out
    }
}

/// Runs the full pipeline for seeds `first_seed..first_seed + n_seeds`.
pub fn run_experiment(
    setting: u32,
    first_seed: u64,
    n_seeds: usize,
    measure: Measure,
    config: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if !(1..=4).contains(&setting) {
        return Err(invalid(format!("setting must be 1, 2, 3 or 4, got {setting}")));
    }
    let model = config.model()?;
    let records = (0..n_seeds as u64)
        .map(|i| {
            run_seed(setting, first_seed + i, measure, &model, config)?.record(
                setting,
                measure,
                config.segmentation.threshold,
                config.fp_tolerance,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_records(setting, measure, records))
}
