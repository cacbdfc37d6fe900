//! `--config FILE` support: each `key = value` line becomes `--key=value`
//! spliced in right after the subcommand, so flags typed on the command
//! line (which come later) override it.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use crate::Invalid;

pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path)
        .map_err(|e| Invalid(format!("config file {}: {e}", path.display())))?;
    let injected = parse(&text).with_context(|| format!("in config file {}", path.display()))?;
    let mut out = argv;
    let at = 2.min(out.len());
    out.splice(at..at, injected);
    Ok(out)
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Flat `key = value` lines; `#` comments, blank lines and `[section]`
/// headers are ignored, values may be quoted. `true` / `false` toggle
/// switches.
pub fn parse(text: &str) -> Result<Vec<OsString>> {
    let mut args = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with('[') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!(Invalid(format!("line {}: expected key = value", no + 1)));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            bail!(Invalid(format!("line {}: bad key {:?}", no + 1, k.trim())));
        }
        match value {
            "true" => args.push(format!("--{key}").into()),
            "false" => {}
            v => args.push(format!("--{key}={v}").into()),
        }
    }
    Ok(args)
}
