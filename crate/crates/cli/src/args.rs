//! Flag parsing: `--config`, `--seed`, `--threads`, `--out` and free
//! `--key value` overrides merged over the config file.

use std::path::PathBuf;

use bevseg::config::FlatConfig;

#[derive(Debug)]
pub struct Invocation {
    pub command: String,
    pub config: FlatConfig,
    pub threads: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, PartialEq, Eq)]
pub struct UsageError(pub String);

pub const COMMANDS: &[&str] = &["ingest", "occupancy", "labels", "gradcheck", "train", "eval", "synth"];

pub const USAGE: &str = "\
usage: bevseg <command> [--config FILE] [--seed N] [--threads N] [--out DIR] [--key value ...]

commands:
  synth      write a synthetic sequence (velodyne/, labels/, poses.txt)
  ingest     parse and remap a sequence, cache the frames
  occupancy  render observability and visibility maps of one frame
  labels     render sparse and dense label maps of one frame
  gradcheck  run the gradient verification suite
  train      train on synthetic frames, write a checkpoint and metrics
  eval       evaluate a checkpoint on held-out frames

Any other `--key value` pair overrides the config file entry `key`.
The output directory defaults to $BEVSEG_OUT, then `out`.
";

/// Parses `args` (without the program name). `env_out` is the output
/// directory override from the environment.
pub fn parse(args: &[String], env_out: Option<String>) -> Result<Invocation, UsageError> {
    let Some(command) = args.first() else {
        return Err(UsageError("missing command".into()));
    };
    if !COMMANDS.contains(&command.as_str()) {
        return Err(UsageError(format!("unknown command `{command}`")));
    }
    let mut config_path = None;
    let mut overrides = FlatConfig::new();
    let mut threads = None;
    let mut out = env_out.map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"));
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--").filter(|k| !k.is_empty()) else {
            return Err(UsageError(format!("unexpected argument `{flag}`")));
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| UsageError(format!("flag `--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        match key.as_str() {
            "config" => config_path = Some(PathBuf::from(value)),
            "out" => out = PathBuf::from(value),
            "threads" => {
                let n: usize = value
                    .parse()
                    .ok()
                    .filter(|&n| n > 0)
                    .ok_or_else(|| UsageError(format!("`--threads {value}` is not a positive integer")))?;
                threads = Some(n);
            }
            "seed" => {
                value
                    .parse::<u64>()
                    .map_err(|_| UsageError(format!("`--seed {value}` is not an unsigned integer")))?;
                overrides.set("seed", &value);
            }
            _ => overrides.set(&key, &value),
        }
    }
    let mut config = match config_path {
        Some(p) => FlatConfig::load(&p).map_err(|e| UsageError(e.to_string()))?,
        None => FlatConfig::new(),
    };
    config.merge(&overrides);
    Ok(Invocation {
        command: command.clone(),
        config,
        threads,
        out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_and_builtins() {
        let inv = parse(&s(&["train", "--seed", "3", "--train.epochs=2", "--out", "x", "--threads", "2"]), None).unwrap();
        assert_eq!(inv.config.get("seed"), Some("3"));
        assert_eq!(inv.config.get("train.epochs"), Some("2"));
        assert_eq!(inv.out, PathBuf::from("x"));
        assert_eq!(inv.threads, Some(2));
    }

    #[test]
    fn env_out_default() {
        let inv = parse(&s(&["synth"]), Some("envdir".into())).unwrap();
        assert_eq!(inv.out, PathBuf::from("envdir"));
        let inv = parse(&s(&["synth", "--out", "flag"]), Some("envdir".into())).unwrap();
        assert_eq!(inv.out, PathBuf::from("flag"));
    }

    #[test]
    fn usage_errors() {
        assert!(parse(&[], None).is_err());
        assert!(parse(&s(&["nope"]), None).is_err());
        assert!(parse(&s(&["train", "stray"]), None).is_err());
        assert!(parse(&s(&["train", "--seed"]), None).is_err());
        assert!(parse(&s(&["train", "--seed", "-1"]), None).is_err());
        assert!(parse(&s(&["train", "--threads", "0"]), None).is_err());
    }
}
