//! Flat `key = value` config files grouped by `[subcommand]` sections.
//!
//! ```text
//! # comment
//! [train]
//! iterations = 500
//! horizons = 1,3,6
//! contiguous-subsample = true
//! ```
//!
//! Keys are the subcommand's long flag names. Values are spliced into the
//! argument list ahead of the user's own flags; a flag given on the command
//! line suppresses the file value for the same key.

use std::collections::BTreeMap;

use clap::{ArgAction, Command};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    pub sections: BTreeMap<String, Vec<Entry>>,
}

pub fn parse(text: &str) -> Result<ConfigFile, String> {
    let mut cfg = ConfigFile::default();
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') || s.starts_with(';') {
            continue;
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| format!("line {line}: unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(format!("line {line}: empty section name"));
            }
            cfg.sections.entry(name.to_string()).or_default();
            current = Some(name.to_string());
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| format!("line {line}: expected `key = value`"))?;
        let key = k.trim().to_string();
        let mut value = v.trim();
        if value.len() >= 2 && value.starts_with('"') && value.ends_with('"') {
            value = &value[1..value.len() - 1];
        }
        let section = current
            .as_ref()
            .ok_or_else(|| format!("line {line}: `{key}` appears before any [section]"))?;
        let entries = cfg.sections.get_mut(section).expect("section registered on header");
        if entries.iter().any(|e| e.key == key) {
            return Err(format!("line {line}: duplicate key `{key}` in [{section}]"));
        }
        entries.push(Entry {
            key,
            value: value.to_string(),
            line,
        });
    }
    Ok(cfg)
}

/// Long flag names a subcommand accepts from a config file.
pub fn accepted_keys(sub: &Command) -> Vec<String> {
    sub.get_arguments()
        .filter(|a| !a.is_global_set())
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "help" && *l != "config")
        .map(str::to_string)
        .collect()
}

fn is_flag(sub: &Command, key: &str) -> bool {
    sub.get_arguments()
        .find(|a| a.get_long() == Some(key))
        .is_some_and(|a| matches!(a.get_action(), ArgAction::SetTrue))
}

/// Removes `--config PATH` from `args` and splices the matching section in
/// after the subcommand name.
pub fn expand(args: Vec<String>, root: &Command) -> Result<Vec<String>, String> {
    let mut args = args;
    let mut path = None;
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--" {
            break;
        }
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err("--config needs a file path".into());
            }
            path = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(p) = args[i].strip_prefix("--config=") {
            path = Some(p.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let cfg = parse(&text).map_err(|e| format!("{path}: {e}"))?;
    for (section, entries) in &cfg.sections {
        let sub = root
            .find_subcommand(section)
            .ok_or_else(|| format!("{path}: unknown section [{section}]"))?;
        let keys = accepted_keys(sub);
        for e in entries {
            if !keys.contains(&e.key) {
                return Err(format!(
                    "{path}: line {}: unknown key `{}` in [{section}]",
                    e.line, e.key
                ));
            }
        }
    }
    let Some(pos) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let name = args[pos].clone();
    let (Some(sub), Some(entries)) = (root.find_subcommand(&name), cfg.sections.get(&name)) else {
        return Ok(args);
    };
    let given = |key: &str| {
        let flag = format!("--{key}");
        let eq = format!("--{key}=");
        args[pos + 1..].iter().any(|a| *a == flag || a.starts_with(&eq))
    };
    let mut spliced = Vec::new();
    for e in entries {
        if given(&e.key) {
            continue;
        }
        if is_flag(sub, &e.key) {
            match e.value.as_str() {
                "true" => spliced.push(format!("--{}", e.key)),
                "false" => {}
                other => {
                    return Err(format!(
                        "{path}: line {}: `{}` takes true or false, got `{other}`",
                        e.line, e.key
                    ))
                }
            }
        } else {
            spliced.push(format!("--{}={}", e.key, e.value));
        }
    }
    args.splice(pos + 1..pos + 1, spliced);
    Ok(args)
}
