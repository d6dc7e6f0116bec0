use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use wmseg::attacks::{attack_delete, attack_insert, attack_substitute, build_setting};
use wmseg::experiment::run_experiment;
use wmseg::rtest::{auto_window, read_pvalues_csv, window_pvalues, DEFAULT_REPLICATES, DEFAULT_WINDOW, QUICK_REPLICATES};
use wmseg::seed::{self, domain};
use wmseg::segmentation::{seedbs_not, SegmentationReport};
use wmseg::watermark::generate_watermarked;
use wmseg::{
    rand_index, ExperimentConfig, GroundTruth, KeySequence, Measure, SegmentationConfig, TestConfig, TokenModel,
    TokenSequence,
};

use crate::{
    AttackArgs, Cli, Command, EvaluateArgs, ExperimentArgs, GenerateArgs, KeysArgs, ModelArgs, PvaluesArgs, SegmentArgs,
};

/// Length of every benchmark text.
const SETTING_LEN: usize = 500;

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Model(a) => model(cli, a),
        Command::Keys(a) => keys(cli, a),
        Command::Generate(a) => generate(cli, a),
        Command::Attack(a) => attack(cli, a),
        Command::Pvalues(a) => pvalues(cli, a),
        Command::Segment(a) => segment(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::Experiment(a) => experiment(cli, a),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes the primary output to `out` (stdout when absent) and the resolved
/// configuration plus a timestamp to `<out>.meta.json` (stderr when absent).
fn emit(cli: &Cli, out: Option<&Path>, contents: &str, resolved: Value) -> Result<()> {
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "created_unix": created,
        "args": cli,
        "resolved": resolved,
    });
    match out {
        Some(path) => {
            write_file(path, contents)?;
            write_file(&meta_path(path), &to_json(&meta)?)
        }
        None => {
            std::io::stdout().write_all(contents.as_bytes())?;
            eprintln!("{}", serde_json::to_string(&meta)?);
            Ok(())
        }
    }
}

fn replicates(cli: &Cli, explicit: Option<usize>) -> usize {
    explicit.unwrap_or(if cli.quick { QUICK_REPLICATES } else { DEFAULT_REPLICATES })
}

fn window(cli: &Cli, explicit: Option<usize>, n: usize) -> usize {
    match explicit {
        Some(b) => b,
        None if cli.auto_window => auto_window(n),
        None => DEFAULT_WINDOW,
    }
}

fn model(cli: &Cli, a: &ModelArgs) -> Result<()> {
    let model = TokenModel::new_markov(a.vocab, a.beta, cli.seed)?;
    emit(cli, a.out.as_deref(), &to_json(&model)?, json!({ "model_seed": cli.seed }))
}

fn keys(cli: &Cli, a: &KeysArgs) -> Result<()> {
    let keys = KeySequence::generate(a.scheme.into(), a.n, a.vocab, cli.seed)?;
    emit(cli, a.out.as_deref(), &to_json(&keys)?, json!({ "key_seed": cli.seed }))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let model: TokenModel = read_json(&a.model)?;
    let keys: KeySequence = read_json(&a.keys)?;
    let prompt_seed = seed::derive(cli.seed, domain::PROMPT, 0);
    let prompt = model.sample_plain(&[], a.prompt_len, prompt_seed)?;
    let text = generate_watermarked(&model, &prompt.tokens, &keys)?;
    let resolved = json!({ "prompt_seed": prompt_seed, "prompt": prompt.tokens });
    emit(cli, a.out.as_deref(), &to_json(&text)?, resolved)
}

fn attack(cli: &Cli, a: &AttackArgs) -> Result<()> {
    let model: TokenModel = read_json(&a.model)?;
    if let Some(k) = a.setting {
        let inst = build_setting(k, &model, a.scheme.into(), cli.seed, a.prompt_len)?;
        if let Some(path) = &a.keys_out {
            write_file(path, &to_json(&inst.keys)?)?;
        }
        if let Some(path) = &a.truth_out {
            write_file(path, &to_json(&inst.truth)?)?;
        }
        let resolved = json!({ "prompt": inst.prompt.tokens, "truth": inst.truth });
        return emit(cli, a.out.as_deref(), &to_json(&inst.text)?, resolved);
    }
    let Some(path) = &a.text else { bail!("--text is required unless --setting is given") };
    let text: TokenSequence = read_json(path)?;
    text.validate(model.vocab_size())?;
    let filler_seed = seed::derive(cli.seed, domain::FILLER, 0);
    let edits = [a.insert.is_some(), a.substitute.is_some(), a.delete.is_some()];
    if edits.iter().filter(|&&e| e).count() != 1 {
        bail!("give exactly one of --insert, --substitute or --delete");
    }
    let edited = if let Some(pos) = a.insert {
        let count = a.count.unwrap_or(0);
        if pos == 0 || pos > text.len() + 1 {
            bail!("insert position {pos} outside 1..={}", text.len() + 1);
        }
        let filler = model.sample_plain(&text.tokens[..pos - 1], count, filler_seed)?;
        attack_insert(&text, pos, &filler.tokens)?
    } else if let Some((lo, hi)) = a.substitute {
        if lo == 0 || lo > hi || hi > text.len() {
            bail!("range {lo}-{hi} invalid for a text of length {}", text.len());
        }
        let filler = model.sample_plain(&text.tokens[..lo - 1], hi - lo + 1, filler_seed)?;
        attack_substitute(&text, lo, hi, &filler.tokens)?
    } else {
        let (lo, hi) = a.delete.expect("one edit is present");
        attack_delete(&text, lo, hi)?
    };
    emit(cli, a.out.as_deref(), &to_json(&edited)?, json!({ "filler_seed": filler_seed }))
}

fn pvalues(cli: &Cli, a: &PvaluesArgs) -> Result<()> {
    let keys: KeySequence = read_json(&a.keys)?;
    let text: TokenSequence = read_json(&a.text)?;
    text.validate(keys.vocab_size())?;
    let measure = Measure::new(a.measure.into(), a.gamma)?;
    let config = TestConfig::new(window(cli, a.window, keys.len()), replicates(cli, a.replicates), measure, cli.seed)?;
    let seq = window_pvalues(&keys, &text.tokens, &config)?;
    emit(cli, a.out.as_deref(), &seq.to_csv(), json!({ "test": config }))
}

fn segment(cli: &Cli, a: &SegmentArgs) -> Result<()> {
    let pvals = read_pvalues_csv(&read(&a.pvalues)?)?;
    let config = SegmentationConfig {
        decay: a.decay,
        threshold: a.threshold,
        boot_block: a.block,
        boot_replicates: a.boot_replicates,
        min_len: a.min_len,
        seed: cli.seed,
    };
    let result = seedbs_not(&pvals, &config)?;
    let report = SegmentationReport::new(&pvals, &result)?;
    emit(cli, a.out.as_deref(), &to_json(&report)?, json!({ "segmentation": config }))
}

fn parse_list(flag: &str, s: &str) -> Result<Vec<usize>> {
    serde_json::from_str(s).with_context(|| format!("--{flag} must be a JSON list of positions, got `{s}`"))
}

#[derive(Serialize)]
struct Evaluation {
    detected: Vec<usize>,
    truth: Vec<usize>,
    m: usize,
    rand_index: f64,
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let detected = match (&a.detected, &a.segmentation) {
        (Some(s), _) => parse_list("detected", s)?,
        (None, Some(path)) => read_json::<SegmentationReport>(path)?.change_points,
        (None, None) => bail!("give --detected or --segmentation"),
    };
    let (truth, truth_len) = match (&a.truth, &a.truth_file) {
        (Some(s), _) => (parse_list("truth", s)?, None),
        (None, Some(path)) => {
            let t: GroundTruth = read_json(path)?;
            (t.change_points, Some(t.len))
        }
        (None, None) => bail!("give --truth or --truth-file"),
    };
    let Some(m) = a.m.or(truth_len) else { bail!("--m is required with --truth") };
    let rand_index = rand_index(&detected, &truth, m)?;
    let eval = Evaluation { detected, truth, m, rand_index };
    emit(cli, a.out.as_deref(), &to_json(&eval)?, Value::Null)
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let window = window(cli, a.window, SETTING_LEN);
    let config = ExperimentConfig {
        vocab_size: a.vocab,
        beta: a.beta,
        model_seed: a.model_seed,
        prompt_len: a.prompt_len,
        window,
        replicates: replicates(cli, a.replicates),
        segmentation: SegmentationConfig {
            decay: a.decay,
            threshold: a.threshold,
            boot_block: a.block,
            boot_replicates: a.boot_replicates,
            min_len: a.min_len,
            seed: 0,
        },
        fp_tolerance: a.fp_tolerance.unwrap_or(2 * window),
    };
    config.segmentation.validate()?;
    let measure = Measure::new(a.measure.into(), a.gamma)?;
    let report = run_experiment(a.setting, cli.seed, a.seeds, measure, &config)?;
    if let Some(path) = &a.json {
        let mut report = report.clone();
        if a.omit_timing {
            report.records.iter_mut().for_each(|r| r.runtime_ms = 0);
        }
        write_file(path, &to_json(&report)?)?;
    }
    let resolved = json!({ "experiment": config, "first_seed": cli.seed });
    emit(cli, a.out.as_deref(), &report.to_csv(!a.omit_timing), resolved)
}
