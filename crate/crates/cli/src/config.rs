//! Config files and `--section.key=value` overrides.

use std::path::Path;

use reora::harness::config::RunConfig;
use reora::harness::ArchSpec;
use reora::Error;

/// Pulls `--a.b=v` / `--a.b v` pairs out of `args`, leaving the rest for clap.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), Error> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match value {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Usage(format!("override --{key} needs a value")))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

/// A bare word that is not valid TOML (`adamw`, `runs/x`) is taken as a string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override --{key}: '{p}' is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

/// Reads a run config, applies overrides (and `--seed`), then validates.
pub fn load_run_config(path: &Path, overrides: &[(String, String)], seed: Option<u64>) -> Result<RunConfig, Error> {
    let text = read(path)?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    for (k, v) in overrides {
        apply(&mut table, k, parse_value(v))?;
    }
    if let Some(s) = seed {
        apply(&mut table, "train.seed", toml::Value::Integer(s as i64))?;
    }
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    if let Ok(dir) = std::env::var("REORA_OUT") {
        let mut cfg = cfg;
        cfg.output.dir = dir;
        cfg.validate()?;
        return Ok(cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The resolved config with every default filled in, headed by the overrides.
pub fn echo(cfg: &RunConfig, source: &Path, overrides: &[(String, String)]) -> Result<String, Error> {
    let mut s = format!("# resolved from {}\n", source.display());
    for (k, v) in overrides {
        s.push_str(&format!("# override --{k}={v}\n"));
    }
    s.push_str(&toml::to_string(cfg).map_err(|e| Error::Format(e.to_string()))?);
    Ok(s)
}

pub fn load_arch(path: &Path) -> Result<ArchSpec, Error> {
    let text = read(path)?;
    let arch: ArchSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    arch.validate()?;
    Ok(arch)
}
