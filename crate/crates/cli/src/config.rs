//! `--config FILE` support: each `key=value` line becomes `--key=value`,
//! inserted right after the subcommand so explicit flags override it.

use std::ffi::OsString;
use std::path::Path;

pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value, got {line:?}", n + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!("config line {}: invalid key {key:?}", n + 1));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Returns `args` with config-file entries spliced in after the subcommand.
pub fn expand(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .map_err(|e| format!("cannot read config {}: {e}", Path::new(&path).display()))?;
    let entries = parse_config_text(&text)?;
    let Some(sub) = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
    else {
        return Ok(args);
    };
    let at = sub + 2;
    let mut out: Vec<OsString> = args[..at].to_vec();
    out.extend(
        entries
            .into_iter()
            .map(|(k, v)| OsString::from(format!("--{k}={v}"))),
    );
    out.extend_from_slice(&args[at..]);
    Ok(out)
}
