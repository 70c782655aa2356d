//! Plain-text run configuration: `key = value` lines under `[section]`
//! headers. `#` starts a comment. Unknown sections and keys are rejected.
//! Every key name is unique across sections, so a flat `key → value`
//! override (as from the command line) needs no section.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::Mechanism;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// How a data file is read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// One `{"article": ..., "summary": ...}` object per line.
    Jsonl,
    /// Blank-line-separated documents, trained as a plain token stream.
    Raw,
    /// Blank-line-separated documents, each halved into article and summary.
    Halves,
}

impl FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "jsonl" => Ok(Self::Jsonl),
            "raw" => Ok(Self::Raw),
            "halves" => Ok(Self::Halves),
            _ => Err(format!("unknown data format {s:?} (expected jsonl, raw or halves)")),
        }
    }
}

impl DataFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Jsonl => "jsonl",
            Self::Raw => "raw",
            Self::Halves => "halves",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub vocab_encoder: Option<PathBuf>,
    pub vocab_merges: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data_format: DataFormat,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data_format: DataFormat::Jsonl,
            paths: Paths::default(),
        }
    }
}

/// Every recognised key with its section, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "n_layer"),
    ("model", "vocab_size"),
    ("model", "ffn_multiplier"),
    ("model", "qkv_projection"),
    ("model", "tie_embeddings"),
    ("model", "dropout"),
    ("model", "layer_norm_eps"),
    ("model", "block_mechanisms"),
    ("attention", "mechanism"),
    ("attention", "n_head"),
    ("attention", "d_model"),
    ("attention", "sparsity_threshold"),
    ("attention", "span_drop"),
    ("attention", "causal"),
    ("attention", "mask_semantics"),
    ("attention", "mask_score_source"),
    ("attention", "context_window"),
    ("attention", "normalized"),
    ("train", "lr_max"),
    ("train", "lr_min"),
    ("train", "max_iters"),
    ("train", "batch_size"),
    ("train", "grad_accum_steps"),
    ("train", "patience"),
    ("train", "eval_interval"),
    ("train", "seed"),
    ("train", "clip_norm"),
    ("train", "beta1"),
    ("train", "beta2"),
    ("train", "adam_eps"),
    ("train", "score_article"),
    ("eval", "max_summary_tokens"),
    ("eval", "teacher_forced"),
    ("data", "data_format"),
    ("data", "train_data"),
    ("data", "val_data"),
    ("data", "vocab_encoder"),
    ("data", "vocab_merges"),
    ("data", "checkpoint_dir"),
    ("data", "log_path"),
];

pub fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| Error::Config {
        key: key.to_string(),
        msg: format!("cannot parse {value:?}: {e}"),
    })
}

fn path_value(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn mechanisms(key: &str, value: &str) -> Result<Vec<Mechanism>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let a = &mut m.attention;
        let t = &mut self.train;
        match key {
            "n_layer" => m.n_layer = parse(key, value)?,
            "vocab_size" => m.vocab_size = parse(key, value)?,
            "ffn_multiplier" => m.ffn_multiplier = parse(key, value)?,
            "qkv_projection" => m.qkv_projection = parse(key, value)?,
            "tie_embeddings" => m.tie_embeddings = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "layer_norm_eps" => m.layer_norm_eps = parse(key, value)?,
            "block_mechanisms" => m.block_mechanisms = mechanisms(key, value)?,
            "mechanism" => a.mechanism = parse(key, value)?,
            "n_head" => a.n_head = parse(key, value)?,
            "d_model" => a.d_model = parse(key, value)?,
            "sparsity_threshold" => a.sparsity_threshold = parse(key, value)?,
            "span_drop" => a.span_drop = parse(key, value)?,
            "causal" => a.causal = parse(key, value)?,
            "mask_semantics" => a.mask_semantics = parse(key, value)?,
            "mask_score_source" => a.mask_score_source = parse(key, value)?,
            "context_window" => a.context_window = parse(key, value)?,
            "normalized" => a.normalized = parse(key, value)?,
            "lr_max" => t.lr_max = parse(key, value)?,
            "lr_min" => t.lr_min = parse(key, value)?,
            "max_iters" => t.max_iters = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "grad_accum_steps" => t.grad_accum_steps = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "eval_interval" => t.eval_interval = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "score_article" => {
                t.score_article = parse(key, value)?;
                self.eval.score_article = t.score_article;
            }
            "max_summary_tokens" => self.eval.max_summary_tokens = parse(key, value)?,
            "teacher_forced" => self.eval.teacher_forced = parse(key, value)?,
            "data_format" => self.data_format = parse(key, value)?,
            "train_data" => self.paths.train_data = path_value(value),
            "val_data" => self.paths.val_data = path_value(value),
            "vocab_encoder" => self.paths.vocab_encoder = path_value(value),
            "vocab_merges" => self.paths.vocab_merges = path_value(value),
            "checkpoint_dir" => self.paths.checkpoint_dir = path_value(value),
            "log_path" => self.paths.log_path = path_value(value),
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Textual value of a key, such that `set(key, get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let a = &m.attention;
        let t = &self.train;
        Some(match key {
            "n_layer" => m.n_layer.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "ffn_multiplier" => m.ffn_multiplier.to_string(),
            "qkv_projection" => m.qkv_projection.to_string(),
            "tie_embeddings" => m.tie_embeddings.to_string(),
            "dropout" => m.dropout.to_string(),
            "layer_norm_eps" => m.layer_norm_eps.to_string(),
            "block_mechanisms" => m
                .block_mechanisms
                .iter()
                .map(|x| x.as_str())
                .collect::<Vec<_>>()
                .join(","),
            "mechanism" => a.mechanism.to_string(),
            "n_head" => a.n_head.to_string(),
            "d_model" => a.d_model.to_string(),
            "sparsity_threshold" => a.sparsity_threshold.to_string(),
            "span_drop" => a.span_drop.to_string(),
            "causal" => a.causal.to_string(),
            "mask_semantics" => a.mask_semantics.to_string(),
            "mask_score_source" => a.mask_score_source.to_string(),
            "context_window" => a.context_window.to_string(),
            "normalized" => a.normalized.to_string(),
            "lr_max" => t.lr_max.to_string(),
            "lr_min" => t.lr_min.to_string(),
            "max_iters" => t.max_iters.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "grad_accum_steps" => t.grad_accum_steps.to_string(),
            "patience" => t.patience.to_string(),
            "eval_interval" => t.eval_interval.to_string(),
            "seed" => t.seed.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "score_article" => t.score_article.to_string(),
            "max_summary_tokens" => self.eval.max_summary_tokens.to_string(),
            "teacher_forced" => self.eval.teacher_forced.to_string(),
            "data_format" => self.data_format.as_str().to_string(),
            "train_data" => show_path(&self.paths.train_data),
            "val_data" => show_path(&self.paths.val_data),
            "vocab_encoder" => show_path(&self.paths.vocab_encoder),
            "vocab_merges" => show_path(&self.paths.vocab_merges),
            "checkpoint_dir" => show_path(&self.paths.checkpoint_dir),
            "log_path" => show_path(&self.paths.log_path),
            _ => return None,
        })
    }

    /// Applies a config file's contents on top of `self`; returns the keys it set.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<Vec<String>> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut section: Option<String> = None;
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(parse_err(lineno, format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(parse_err(lineno, format!("expected `key = value`, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            match (section_of(key), section.as_deref()) {
                (None, _) => return Err(parse_err(lineno, format!("unknown key `{key}`"))),
                (Some(want), Some(have)) if want != have => {
                    return Err(parse_err(
                        lineno,
                        format!("key `{key}` belongs in [{want}], not [{have}]"),
                    ))
                }
                (Some(want), None) => return Err(parse_err(lineno, format!("key `{key}` must appear under [{want}]"))),
                _ => {}
            }
            if seen.iter().any(|k| k == key) {
                return Err(parse_err(lineno, format!("duplicate key `{key}`")));
            }
            seen.push(key.to_string());
            self.set(key, value).map_err(|e| parse_err(lineno, e.to_string()))?;
        }
        Ok(seen)
    }

    /// Defaults overlaid with a config file; also returns the keys the file set.
    pub fn from_file(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        let keys = cfg.apply_text(&text, path)?;
        Ok((cfg, keys))
    }

    /// Renders the given sections in canonical form.
    pub fn to_text(&self, sections: &[&str]) -> String {
        let mut out = String::new();
        for &name in sections {
            let _ = writeln!(out, "[{name}]");
            for (s, k) in KEYS {
                if *s == name {
                    let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Model-defining sections, as stored in checkpoint headers.
pub const MODEL_SECTIONS: &[&str] = &["model", "attention"];

pub fn model_config_text(model: &ModelConfig) -> String {
    RunConfig {
        model: model.clone(),
        ..RunConfig::default()
    }
    .to_text(MODEL_SECTIONS)
}

pub fn model_config_from_text(text: &str, origin: &Path) -> Result<ModelConfig> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(text, origin)?;
    Ok(cfg.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MaskSemantics;

    #[test]
    fn keys_are_unique_and_round_trip() {
        let mut names: Vec<_> = KEYS.iter().map(|(_, k)| *k).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), KEYS.len());

        let mut cfg = RunConfig::default();
        cfg.set("sparsity_threshold", "0.30000000000000004").unwrap();
        cfg.set("block_mechanisms", "sparse,hybrid").unwrap();
        cfg.set("n_layer", "2").unwrap();
        cfg.set("train_data", "some/file.jsonl").unwrap();
        let text = cfg.to_text(&["model", "attention", "train", "eval", "data"]);
        let mut back = RunConfig::default();
        back.apply_text(&text, Path::new("x")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_unknown_and_misplaced_keys() {
        let mut cfg = RunConfig::default();
        let err = cfg
            .apply_text("[model]\nn_layer = 2\nbogus = 1\n", Path::new("c.conf"))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(cfg.apply_text("[train]\nn_head = 2\n", Path::new("c")).is_err());
        assert!(cfg.apply_text("n_head = 2\n", Path::new("c")).is_err());
        assert!(cfg.apply_text("[nope]\n", Path::new("c")).is_err());
        assert!(cfg
            .apply_text("[attention]\nspan_drop = abc\n", Path::new("c"))
            .is_err());
        let err = cfg.set("no_such_key", "1").unwrap_err();
        assert!(err.to_string().contains("no_such_key"));
    }

    #[test]
    fn comments_and_enums() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# desk run\n[attention]\nmechanism = sparse  # inline\nmask_semantics = literal_multiply\n",
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(cfg.model.attention.mechanism, Mechanism::Sparse);
        assert_eq!(cfg.model.attention.mask_semantics, MaskSemantics::LiteralMultiply);
    }
}
