//! Command-line front end: `train`, `eval`, `generate`, `gradcheck`, `bench`
//! and `params`.
//!
//! Every config key can be overridden with a flag of the same name, written
//! with hyphens (`--span-drop 0.3`). Those flags are split off before the
//! remaining arguments reach the subcommand parser.

mod commands;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bisparse::config::{section_of, RunConfig};
use clap::{Parser, Subcommand};

pub use commands::run_command;

#[derive(Parser, Debug)]
#[command(
    name = "bisparse",
    version,
    about = "Bilinear, sparse, adaptive-span and hybrid attention"
)]
pub struct Cli {
    /// Config file of `key = value` lines under [section] headers.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoints and a loss log.
    Train {
        /// Training data (overrides `train_data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the log (overrides `checkpoint_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perplexity, ROUGE and token-level scores of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation data in the configured `data_format`.
        #[arg(long)]
        data: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Evaluate only the first N examples.
        #[arg(long)]
        limit: Option<usize>,
        /// Also print every generated summary.
        #[arg(long)]
        show_summaries: bool,
    },
    /// Continue a prompt with a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// greedy, temperature or top-k.
        #[arg(long, default_value = "greedy")]
        sampling: String,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 40)]
        top_k: usize,
    },
    /// Finite-difference gradient check per attention mechanism.
    Gradcheck {
        /// Number of seeds, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Check the whole tiny model instead of one attention layer.
        #[arg(long)]
        model: bool,
        /// Corrupt the analytic gradients (negative control; must fail).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Attention throughput and mask density over sequence lengths.
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, default_value = "128,256,512,1024")]
        lengths: String,
        /// Comma-separated sparsity thresholds for a retained-fraction sweep.
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-component parameter counts.
    Params,
}

/// Arguments split into config overrides and everything else.
#[derive(Debug, Default, PartialEq)]
pub struct SplitArgs {
    pub overrides: Vec<(String, String)>,
    pub rest: Vec<String>,
}

/// Pulls `--some-key value` and `--some-key=value` pairs whose key names a
/// config entry out of `args`.
pub fn split_overrides(args: &[String]) -> Result<SplitArgs> {
    let mut out = SplitArgs::default();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(flag) = arg.strip_prefix("--") else {
            out.rest.push(arg.clone());
            i += 1;
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = name.replace('-', "_");
        if section_of(&key).is_none() {
            out.rest.push(arg.clone());
            i += 1;
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => {
                i += 1;
                match args.get(i) {
                    Some(v) => v.clone(),
                    None => bail!("flag --{name} needs a value"),
                }
            }
        };
        out.overrides.push((key, value));
        i += 1;
    }
    Ok(out)
}

/// Resolved configuration plus the keys explicitly chosen by the user.
pub struct Resolved {
    pub cfg: RunConfig,
    pub explicit: Vec<String>,
}

impl Resolved {
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }
}

pub fn resolve(config: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved> {
    let (mut cfg, mut explicit) = match config {
        Some(path) => {
            if !path.exists() {
                bail!("config file {} does not exist", path.display());
            }
            RunConfig::from_file(path)?
        }
        None => (RunConfig::default(), Vec::new()),
    };
    for (k, v) in overrides {
        cfg.set(k, v)
            .with_context(|| format!("invalid value for --{}", k.replace('_', "-")))?;
        explicit.push(k.clone());
    }
    Ok(Resolved { cfg, explicit })
}

/// Parses `argv` (without the program name) and runs the command. Returns
/// the process exit code.
pub fn run(argv: &[String]) -> Result<i32> {
    let split = split_overrides(argv)?;
    let mut clap_args = vec!["bisparse".to_string()];
    clap_args.extend(split.rest);
    let cli = match Cli::try_parse_from(&clap_args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            e.print()?;
            return Ok(code);
        }
    };
    let resolved = resolve(cli.config.as_deref(), &split.overrides)?;
    run_command(cli.command, resolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_command_args() {
        let split = split_overrides(&s(&[
            "train",
            "--span-drop",
            "0.3",
            "--data",
            "x.jsonl",
            "--mechanism=sparse",
            "--seed",
            "7",
        ]))
        .unwrap();
        assert_eq!(split.rest, s(&["train", "--data", "x.jsonl"]));
        assert_eq!(
            split.overrides,
            vec![
                ("span_drop".into(), "0.3".into()),
                ("mechanism".into(), "sparse".into()),
                ("seed".into(), "7".into())
            ]
        );
        assert!(split_overrides(&s(&["train", "--seed"])).is_err());
    }

    #[test]
    fn bad_override_names_the_key() {
        let err = resolve(None, &[("span_drop".into(), "lots".into())]).err().unwrap();
        assert!(format!("{err:#}").contains("span-drop"));
    }
}
