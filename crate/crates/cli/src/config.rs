//! `--config FILE`: TOML defaults spliced into the argument list before
//! parsing.
//!
//! ```toml
//! seed = 7          # global flags at the top level
//! json = true
//!
//! [lock]            # one table per subcommand
//! method = "pt-aes"
//! pretransform = "empirical"
//!
//! [attack]
//! noise = [0, 0.1, 1]
//! ```
//!
//! Keys are flag names (`train_size` and `train-size` both work). Flags given
//! on the command line win over the file.

use crate::CliError;
use std::ffi::OsString;
use toml::Value;

// global flags that take a value, so their value is not mistaken for the subcommand
const VALUED_GLOBALS: [&str; 2] = ["--seed", "--config"];

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--" {
            break;
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

fn subcommand_index(args: &[OsString], names: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < args.len() {
        let s = args[i].to_string_lossy();
        if VALUED_GLOBALS.contains(&s.as_ref()) {
            i += 2;
            continue;
        }
        if names.iter().any(|n| n == s.as_ref()) {
            return Some(i);
        }
        if !s.starts_with('-') {
            return None;
        }
        i += 1;
    }
    None
}

fn given(args: &[OsString], flag: &str) -> bool {
    args.iter().any(|a| {
        let s = a.to_string_lossy();
        s == flag || s.strip_prefix(flag).is_some_and(|r| r.starts_with('='))
    })
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Integer(i) => Some(i.to_string()),
        Value::Float(f) => Some(f.to_string()),
        _ => None,
    }
}

fn flags(table: &toml::Table, args: &[OsString], context: &str) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            return Err(CliError::usage(format!("config: '{context}{key}' cannot be set from a config file")));
        }
        if given(args, &flag) {
            continue;
        }
        let rendered = match value {
            Value::Boolean(true) => Some(None),
            Value::Boolean(false) => None,
            Value::Array(items) => {
                let parts: Option<Vec<String>> = items.iter().map(scalar).collect();
                let parts =
                    parts.ok_or_else(|| CliError::usage(format!("config: '{context}{key}' must hold scalars")))?;
                Some(Some(parts.join(",")))
            }
            v => Some(Some(
                scalar(v).ok_or_else(|| CliError::usage(format!("config: unsupported value for '{context}{key}'")))?,
            )),
        };
        match rendered {
            Some(None) => out.push(flag.into()),
            Some(Some(v)) => out.push(format!("{flag}={v}").into()),
            None => {}
        }
    }
    Ok(out)
}

/// Returns `args` with defaults from the config file (if any) inserted.
pub fn expand(args: Vec<OsString>, subcommands: &[String]) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let shown = path.to_string_lossy().into_owned();
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::domain("config", format!("{shown}: {e}")))?;
    let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        CliError::domain("config", format!("{shown}: {}", e.message()))
    })?;

    let mut globals = toml::Table::new();
    let mut sections = Vec::new();
    for (k, v) in doc {
        match v {
            Value::Table(t) => {
                if !subcommands.contains(&k) {
                    return Err(CliError::usage(format!("config: unknown section [{k}]")));
                }
                sections.push((k, t));
            }
            v => {
                globals.insert(k, v);
            }
        }
    }

    let mut out = args.clone();
    if let Some(i) = subcommand_index(&args, subcommands) {
        let name = args[i].to_string_lossy().into_owned();
        if let Some((_, t)) = sections.iter().find(|(k, _)| *k == name) {
            let extra = flags(t, &args[i + 1..], &format!("{name}."))?;
            out.splice(i + 1..i + 1, extra);
        }
    }
    let extra = flags(&globals, &args, "")?;
    out.splice(1..1, extra);
    Ok(out)
}
