//! Plain-text `key = value` config files. Each key stands for the long flag
//! of the same name (underscores and dashes are interchangeable); a flag
//! given on the command line wins over the file.

use std::path::Path;

use crate::error::CliError;

/// Parses the file into `(flag, values)` entries. List values are separated
/// by whitespace; `true` marks a switch and `false` drops it.
pub fn parse(text: &str, origin: &Path) -> Result<Vec<(String, Vec<String>)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!("{}:{}: expected `key = value`", origin.display(), i + 1)));
        };
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(CliError::Config(format!("{}:{}: invalid key {key:?}", origin.display(), i + 1)));
        }
        let values: Vec<String> = match value.trim() {
            "true" => Vec::new(),
            "false" => continue,
            v => v.split_whitespace().map(String::from).collect(),
        };
        out.push((key, values));
    }
    Ok(out)
}

fn given_on_command_line(args: &[String], key: &str) -> bool {
    let flag = format!("--{key}");
    args.iter().any(|a| a == &flag || a.starts_with(&format!("{flag}=")))
}

/// Removes `--config PATH` from `args` and appends every file entry whose
/// flag is not already present.
pub fn expand(mut args: Vec<String>) -> Result<Vec<String>, CliError> {
    let pos = args.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else {
        return Ok(args);
    };
    let path = if let Some(v) = args[pos].strip_prefix("--config=") {
        let v = v.to_string();
        args.remove(pos);
        v
    } else {
        if pos + 1 >= args.len() {
            return Err(CliError::Config("--config needs a path".into()));
        }
        let v = args.remove(pos + 1);
        args.remove(pos);
        v
    };
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, &e))?;
    let mut extra = Vec::new();
    for (key, values) in parse(&text, path)? {
        if !given_on_command_line(&args, &key) {
            extra.push(format!("--{key}"));
            extra.extend(values);
        }
    }
    args.extend(extra);
    Ok(args)
}
