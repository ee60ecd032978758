//! `--config` support: TOML key/value pairs become command-line flags.
//!
//! Top-level keys apply to any subcommand that has a flag of that name and
//! are ignored by the others. Keys inside a table named after a subcommand
//! (`[serve]`, `[gen-synth]`) apply to that subcommand only, and an unknown
//! key there is an error. Flags given on the command line win because they
//! are parsed after the config-derived ones.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Command;

/// Splits `--config <path>` out of `args` and splices the file's settings in
/// right after the subcommand name.
pub fn expand_args(cmd: &Command, args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    if let Some(bin) = it.next() {
        rest.push(bin);
    }
    let mut sub_at = None;
    while let Some(arg) = it.next() {
        let s = arg.to_string_lossy();
        if sub_at.is_none() && s == "--config" {
            config = Some(it.next().context("--config needs a path")?);
            continue;
        }
        if sub_at.is_none() {
            if let Some(p) = s.strip_prefix("--config=") {
                config = Some(p.into());
                continue;
            }
            if cmd.find_subcommand(s.as_ref()).is_some() {
                sub_at = Some(rest.len());
            }
        }
        rest.push(arg);
    }
    let (Some(path), Some(at)) = (config, sub_at) else {
        return Ok(rest);
    };
    let name = rest[at].to_string_lossy().into_owned();
    let sub = cmd.find_subcommand(&name).expect("checked above");
    let flags = config_flags(sub, Path::new(&path))?;
    rest.splice(at + 1..at + 1, flags);
    Ok(rest)
}

fn config_flags(sub: &Command, path: &Path) -> Result<Vec<OsString>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {}", path.display()))?;
    let mut out = Vec::new();
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                if key == sub.get_name() {
                    for (k, v) in section {
                        push_flag(sub, k, v, true, &mut out)?;
                    }
                }
            }
            v => push_flag(sub, key, v, false, &mut out)?,
        }
    }
    Ok(out)
}

fn push_flag(
    sub: &Command,
    key: &str,
    value: &toml::Value,
    strict: bool,
    out: &mut Vec<OsString>,
) -> Result<()> {
    let long = key.replace('_', "-");
    let Some(arg) = sub
        .get_arguments()
        .find(|a| a.get_long() == Some(long.as_str()))
    else {
        if strict {
            bail!("config key {key:?} is not an option of {}", sub.get_name());
        }
        return Ok(());
    };
    let scalar = |v: &toml::Value| -> Result<String> {
        Ok(match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => bail!("config key {key:?}: unsupported value {other}"),
        })
    };
    if !arg.get_action().takes_values() {
        match value {
            toml::Value::Boolean(true) => out.push(format!("--{long}").into()),
            toml::Value::Boolean(false) => {}
            _ => bail!("config key {key:?} is a switch and takes true or false"),
        }
        return Ok(());
    }
    let values = match value {
        toml::Value::Array(items) => items.iter().map(scalar).collect::<Result<Vec<_>>>()?,
        v => vec![scalar(v)?],
    };
    for v in values {
        out.push(format!("--{long}={v}").into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{Arg, ArgAction};

    fn cmd() -> Command {
        Command::new("otf")
            .subcommand(
                Command::new("serve")
                    .arg(Arg::new("addr").long("addr"))
                    .arg(Arg::new("max_sessions").long("max-sessions"))
                    .arg(Arg::new("raw").long("raw").action(ArgAction::SetTrue)),
            )
            .subcommand(Command::new("encode").arg(Arg::new("out").long("out")))
    }

    fn run(toml: &str, args: &[&str]) -> Result<Vec<String>> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("otf.toml");
        fs::write(&path, toml)?;
        let mut full: Vec<OsString> = vec!["otf".into(), "--config".into(), path.clone().into()];
        full.extend(args.iter().map(OsString::from));
        Ok(expand_args(&cmd(), full)?
            .into_iter()
            .map(|s| s.to_string_lossy().into_owned())
            .collect())
    }

    #[test]
    fn keys_become_flags_after_subcommand() {
        let got = run(
            "addr = \"0.0.0.0:9\"\nout = \"x\"\nraw = true\n[serve]\nmax_sessions = 3\n",
            &["serve", "--addr", "1.2.3.4:5"],
        )
        .unwrap();
        assert_eq!(
            got,
            ["otf", "serve", "--addr=0.0.0.0:9", "--raw", "--max-sessions=3", "--addr", "1.2.3.4:5"]
        );
    }

    #[test]
    fn sections_for_other_commands_are_ignored() {
        let got = run("[serve]\naddr = \"a\"\n", &["encode"]).unwrap();
        assert_eq!(got, ["otf", "encode"]);
    }

    #[test]
    fn unknown_key_in_section_is_an_error() {
        assert!(run("[serve]\nbogus = 1\n", &["serve"]).is_err());
        assert!(run("raw = 5\n", &["serve"]).is_err());
    }

    #[test]
    fn no_config_leaves_args_alone() {
        let args: Vec<OsString> = ["otf", "serve", "--addr", "x"].iter().map(OsString::from).collect();
        assert_eq!(expand_args(&cmd(), args.clone()).unwrap(), args);
    }
}
