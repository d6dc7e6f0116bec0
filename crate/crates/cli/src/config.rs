//! `key = value` config files, merged into argv ahead of explicit flags.

use std::collections::HashSet;
use std::ffi::OsString;

use anyhow::{bail, Context, Result};
use clap::{Command, CommandFactory};

use crate::Cli;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').with_context(|| format!("config line {}: expected key = value", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn long_names(cmd: &Command) -> HashSet<String> {
    cmd.get_arguments().filter_map(|a| a.get_long()).map(str::to_string).collect()
}

/// Global options taking a value; used to find the subcommand in argv.
const VALUE_GLOBALS: [&str; 3] = ["--config", "--seed", "--jobs"];

fn subcommand_index(args: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if !a.starts_with('-') {
            return Some(i);
        }
        if VALUE_GLOBALS.contains(&a.as_ref()) {
            i += 1;
        }
        i += 1;
    }
    None
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(path) = s.strip_prefix("--config=") {
            return Some(path.into());
        }
    }
    None
}

/// Returns argv with the config file's settings inserted just after the
/// subcommand name, so explicit flags given later take precedence. Keys the
/// subcommand does not accept are skipped; keys no command accepts are an
/// error.
pub fn merge(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.to_string_lossy()))?;
    let entries = parse(&text)?;
    let Some(at) = subcommand_index(&args) else { return Ok(args) };
    let root = Cli::command();
    let name = args[at].to_string_lossy().into_owned();
    let Some(sub) = root.find_subcommand(&name) else { return Ok(args) };
    let accepted: HashSet<String> = long_names(sub).union(&long_names(&root)).cloned().collect();
    let known: HashSet<String> = root.get_subcommands().flat_map(long_names).chain(long_names(&root)).collect();

    let mut inserted: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!("config files cannot include other config files");
        }
        if !known.contains(&key) {
            bail!("unknown config key `{key}`");
        }
        if !accepted.contains(&key) {
            continue;
        }
        match value.as_str() {
            "true" => inserted.push(format!("--{key}").into()),
            "false" => {}
            _ => {
                inserted.push(format!("--{key}").into());
                inserted.push(value.into());
            }
        }
    }
    let mut out = args[..=at].to_vec();
    out.extend(inserted);
    out.extend_from_slice(&args[at + 1..]);
    Ok(out)
}
