//! Flat `key = value` config files and the resolved-config echo.
//!
//! Keys are long flag names without the leading dashes (`gram-axis` or
//! `gram_axis`). File entries are spliced in front of the command-line flags,
//! so with last-occurrence-wins parsing the command line overrides the file.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use clap::{ArgMatches, Command};

/// Parses config text into `(flag, value)` pairs in file order.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key.starts_with('-') {
            return Err(format!("line {}: bad key {key:?}", i + 1));
        }
        if key == "config" {
            return Err(format!("line {}: config files cannot nest", i + 1));
        }
        out.push((key, value.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--" {
            return None;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.to_str().and_then(|s| s.strip_prefix("--config=")) {
            return Some(p.into());
        }
    }
    None
}

/// Returns `argv` with the flags of any `--config` file inserted right after
/// the subcommand name.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, String> {
    if argv.len() < 3 {
        return Ok(argv);
    }
    let Some(path) = config_path(&argv[2..]) else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| {
        format!(
            "cannot read config file {}: {e}",
            Path::new(&path).display()
        )
    })?;
    let entries =
        parse_config(&text).map_err(|e| format!("{}: {e}", Path::new(&path).display()))?;
    let mut out = argv[..2].to_vec();
    for (k, v) in entries {
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Every flag of the subcommand with the value it resolved to, defaults
/// included. Unset optional flags are omitted.
pub fn resolved(cmd: &Command, matches: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for arg in cmd.get_arguments() {
        let id = arg.get_id().as_str();
        if matches!(id, "help" | "version" | "config") {
            continue;
        }
        if matches.value_source(id).is_none() {
            continue;
        }
        let Some(raw) = matches.get_raw(id) else {
            continue;
        };
        let values: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
        let Some(value) = values.last() else {
            continue;
        };
        let key = arg
            .get_long()
            .map(str::to_string)
            .unwrap_or_else(|| id.replace('_', "-"));
        out.push((key, value.clone()));
    }
    out
}

/// Renders entries in the config-file syntax so the output can be fed back
/// through `--config`.
pub fn render(subcommand: &str, entries: &[(String, String)]) -> String {
    let mut s = format!("# disentangle {subcommand}\n");
    for (k, v) in entries {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_comments_blanks_and_underscores() {
        let got = parse_config("# header\n\nlr = 0.5  # inline\ngram_axis=features\n").unwrap();
        assert_eq!(
            got,
            vec![
                ("lr".into(), "0.5".into()),
                ("gram-axis".into(), "features".into())
            ]
        );
    }

    #[test]
    fn rejects_lines_without_equals() {
        let err = parse_config("lr 0.5\n").unwrap_err();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn rejects_nested_config() {
        assert!(parse_config("config = other.conf").is_err());
    }

    #[test]
    fn file_flags_precede_command_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "lr = 0.5\nepochs = 3\n").unwrap();
        let argv = os(&[
            "disentangle",
            "train",
            "--config",
            path.to_str().unwrap(),
            "--lr",
            "0.1",
        ]);
        let got = expand_config(argv).unwrap();
        let tail: Vec<_> = got[2..6].iter().map(|s| s.to_str().unwrap()).collect();
        assert_eq!(tail, ["--lr", "0.5", "--epochs", "3"]);
        assert_eq!(got.last().unwrap(), "0.1");
    }

    #[test]
    fn no_config_leaves_argv_alone() {
        let argv = os(&["disentangle", "train", "--lr", "0.1"]);
        assert_eq!(expand_config(argv.clone()).unwrap(), argv);
    }
}
