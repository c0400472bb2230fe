//! `--config FILE` support: the file's `key = value` lines become long
//! flags inserted ahead of the real command-line flags, so explicit flags
//! override them.

use std::ffi::OsString;
use std::path::Path;

use crate::CliError;

/// Flags that take no value; `key = true` enables them.
const SWITCHES: &[&str] = &["debug", "force"];

pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<OsString>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected `key = value`",
                origin.display(),
                i + 1
            )));
        };
        let key = key.trim();
        let value = value.trim().trim_matches('"');
        if key == "config" {
            return Err(CliError::Usage(format!(
                "{}:{}: config files cannot include other config files",
                origin.display(),
                i + 1
            )));
        }
        if SWITCHES.contains(&key) {
            match value {
                "true" => out.push(format!("--{key}").into()),
                "false" => {}
                other => {
                    return Err(CliError::Usage(format!(
                        "{}:{}: `{key}` takes true or false, got `{other}`",
                        origin.display(),
                        i + 1
                    )))
                }
            }
        } else {
            out.push(format!("--{key}").into());
            out.push(value.into());
        }
    }
    Ok(out)
}

/// Returns `argv` with the config file's flags spliced in right after the
/// subcommand name.
pub fn expand(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let Some(s) = a.to_str() else { continue };
        if s == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(p.into());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    if argv.len() < 2 {
        return Ok(argv);
    }
    let path = Path::new(&path);
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(mvre_core::Error::io(format!("reading {}", path.display()), e))
    })?;
    let extra = parse_config(&text, path)?;
    let mut out = Vec::with_capacity(argv.len() + extra.len());
    out.extend_from_slice(&argv[..2]);
    out.extend(extra);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_become_flags() {
        let args = parse_config("# run\nepochs = 3\nviews=\"lexicon,radical\"\ndebug = true\nforce = false\n", Path::new("c")).unwrap();
        let args: Vec<&str> = args.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(args, ["--epochs", "3", "--views", "lexicon,radical", "--debug"]);
    }

    #[test]
    fn malformed_lines_are_usage_errors() {
        assert!(matches!(parse_config("epochs 3", Path::new("c")), Err(CliError::Usage(_))));
        assert!(matches!(parse_config("debug = yes", Path::new("c")), Err(CliError::Usage(_))));
    }

    #[test]
    fn spliced_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.conf");
        std::fs::write(&cfg, "seed = 4\n").unwrap();
        let argv: Vec<OsString> = ["mvre", "train", "--config", cfg.to_str().unwrap(), "--seed", "9"]
            .iter()
            .map(OsString::from)
            .collect();
        let out = expand(argv).unwrap();
        let out: Vec<&str> = out.iter().map(|a| a.to_str().unwrap()).collect();
        assert_eq!(&out[..4], ["mvre", "train", "--seed", "4"]);
        assert_eq!(&out[6..], ["--seed", "9"]);
    }
}
