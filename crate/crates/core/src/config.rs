//! The flat `key = value` run-configuration format.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Keys are grouped by prefix (`model.`, `attn.`, `train.`, `data.`,
//! `output.`); every key is optional and unknown keys are rejected. The
//! README carries a fully annotated example.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::Mechanism;
use crate::backbone::{Augment, Downsample, ModelSpec};
use crate::error::{Error, Result};
use crate::train::{LrSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    /// CIFAR-10 when the data directory holds it, otherwise the synthetic fixture.
    Auto,
    Cifar10,
    Synthetic,
}

impl DataSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DataSource::Auto => "auto",
            DataSource::Cifar10 => "cifar10",
            DataSource::Synthetic => "synthetic",
        }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(DataSource::Auto),
            "cifar10" | "cifar-10" => Ok(DataSource::Cifar10),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(Error::config(format!("unknown data source `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: PathBuf,
    /// When positive, train and test come from a seeded subset of this many
    /// training images, the last `holdout` of which are held out. The
    /// synthetic source always generates `subset` images (2000 when 0).
    pub subset: usize,
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Auto,
            dir: PathBuf::from("data/cifar-10-batches-bin"),
            subset: 0,
            holdout: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::flagship(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            output_dir: PathBuf::from("runs/flagship"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::InvalidValue {
        key: key.to_string(),
        msg: format!("cannot parse `{raw}`"),
    })
}

fn parse_with<T>(key: &str, raw: &str, f: impl Fn(&str) -> Result<T>) -> Result<T> {
    f(raw).map_err(|e| Error::InvalidValue {
        key: key.to_string(),
        msg: e.to_string().trim_start_matches("invalid configuration: ").to_string(),
    })
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::InvalidValue {
            key: key.to_string(),
            msg: format!("expected true or false, got `{raw}`"),
        }),
    }
}

fn positive(key: &str, raw: &str) -> Result<usize> {
    let v: usize = parse_value(key, raw)?;
    if v == 0 {
        return Err(Error::InvalidValue {
            key: key.to_string(),
            msg: "must be at least 1".into(),
        });
    }
    Ok(v)
}

impl RunConfig {
    /// Apply one `key = value` pair.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        if let Some(rest) = key.strip_prefix("model.layer") {
            let (idx, field) = rest.split_once('.').unwrap_or((rest, ""));
            let i: usize = idx.parse().ok().filter(|i| (1..=m.layers.len()).contains(i)).ok_or_else(|| {
                Error::InvalidValue {
                    key: key.to_string(),
                    msg: format!("layer index must be 1..={}", m.layers.len()),
                }
            })?;
            let l = &mut m.layers[i - 1];
            match field {
                "channels" => l.channels = positive(key, raw)?,
                "blocks" => l.blocks = positive(key, raw)?,
                "stride" => l.stride = positive(key, raw)?,
                "augment" => l.augment = parse_with(key, raw, Augment::from_str)?,
                _ => return Err(Error::config(format!("unknown key `{key}`"))),
            }
            return Ok(());
        }
        match key {
            "model.in_channels" => m.in_channels = positive(key, raw)?,
            "model.input_side" => m.input_side = positive(key, raw)?,
            "model.stem_channels" => m.stem_channels = positive(key, raw)?,
            "model.classes" => m.classes = positive(key, raw)?,
            "model.downsample" => m.downsample = parse_with(key, raw, Downsample::from_str)?,
            "attn.mechanism" => m.attn.mechanism = parse_with(key, raw, Mechanism::from_str)?,
            "attn.heads" => m.attn.heads = positive(key, raw)?,
            "attn.k_rank" => m.attn.k_rank = positive(key, raw)?,
            "attn.window" => {
                let w = positive(key, raw)?;
                if w % 2 == 0 {
                    return Err(Error::InvalidValue {
                        key: key.into(),
                        msg: format!("window must be odd, got {w}"),
                    });
                }
                m.attn.window = w;
            }
            "attn.global_tokens" => m.attn.global_tokens = parse_value(key, raw)?,
            "attn.mlp_ratio" => {
                let r: f64 = parse_value(key, raw)?;
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::InvalidValue {
                        key: key.into(),
                        msg: "must be positive".into(),
                    });
                }
                m.attn.mlp_ratio = r;
            }
            "train.epochs" => t.epochs = parse_value(key, raw)?,
            "train.batch_size" => t.batch_size = positive(key, raw)?,
            "train.lr" => t.lr = parse_value(key, raw)?,
            "train.momentum" => t.momentum = parse_value(key, raw)?,
            "train.weight_decay" => t.weight_decay = parse_value(key, raw)?,
            "train.grad_clip" => t.grad_clip = parse_value(key, raw)?,
            "train.lr_schedule" => t.lr_schedule = parse_with(key, raw, LrSchedule::from_str)?,
            "train.seed" => t.seed = parse_value(key, raw)?,
            "train.convergence_window" => t.convergence_window = positive(key, raw)?,
            "train.convergence_delta" => t.convergence_delta = parse_value(key, raw)?,
            "train.augment" => t.augment = parse_bool(key, raw)?,
            "train.record_time" => t.record_time = parse_bool(key, raw)?,
            "data.source" => self.data.source = parse_with(key, raw, DataSource::from_str)?,
            "data.dir" => self.data.dir = PathBuf::from(raw),
            "data.subset" => self.data.subset = parse_value(key, raw)?,
            "data.holdout" => self.data.holdout = parse_value(key, raw)?,
            "output.dir" => self.output_dir = PathBuf::from(raw),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse the text of a config file on top of the defaults, then validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{content}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "missing key".into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            match cfg.set(key, value) {
                Ok(()) => {}
                Err(Error::Config(msg)) => return Err(Error::Parse { line: line_no, msg }),
                Err(e) => return Err(e),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        if self.data.subset > 0 && self.data.holdout >= self.data.subset {
            return Err(Error::InvalidValue {
                key: "data.holdout".into(),
                msg: format!("holdout {} must be below subset {}", self.data.holdout, self.data.subset),
            });
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&model_to_text(&self.model));
        let t = &self.train;
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.lr = {}", t.lr);
        let _ = writeln!(s, "train.momentum = {}", t.momentum);
        let _ = writeln!(s, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(s, "train.grad_clip = {}", t.grad_clip);
        let _ = writeln!(s, "train.lr_schedule = {}", t.lr_schedule);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.convergence_window = {}", t.convergence_window);
        let _ = writeln!(s, "train.convergence_delta = {}", t.convergence_delta);
        let _ = writeln!(s, "train.augment = {}", t.augment);
        let _ = writeln!(s, "train.record_time = {}", t.record_time);
        let _ = writeln!(s, "data.source = {}", self.data.source.as_str());
        let _ = writeln!(s, "data.dir = {}", self.data.dir.display());
        let _ = writeln!(s, "data.subset = {}", self.data.subset);
        let _ = writeln!(s, "data.holdout = {}", self.data.holdout);
        let _ = writeln!(s, "output.dir = {}", self.output_dir.display());
        s
    }
}

/// The `model.*` and `attn.*` keys of a spec.
pub fn model_to_text(m: &ModelSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model.in_channels = {}", m.in_channels);
    let _ = writeln!(s, "model.input_side = {}", m.input_side);
    let _ = writeln!(s, "model.stem_channels = {}", m.stem_channels);
    let _ = writeln!(s, "model.classes = {}", m.classes);
    let _ = writeln!(s, "model.downsample = {}", m.downsample);
    for (i, l) in m.layers.iter().enumerate() {
        let n = i + 1;
        let _ = writeln!(s, "model.layer{n}.channels = {}", l.channels);
        let _ = writeln!(s, "model.layer{n}.blocks = {}", l.blocks);
        let _ = writeln!(s, "model.layer{n}.stride = {}", l.stride);
        let _ = writeln!(s, "model.layer{n}.augment = {}", l.augment);
    }
    let a = &m.attn;
    let _ = writeln!(s, "attn.mechanism = {}", a.mechanism);
    let _ = writeln!(s, "attn.heads = {}", a.heads);
    let _ = writeln!(s, "attn.k_rank = {}", a.k_rank);
    let _ = writeln!(s, "attn.window = {}", a.window);
    let _ = writeln!(s, "attn.global_tokens = {}", a.global_tokens);
    let _ = writeln!(s, "attn.mlp_ratio = {}", a.mlp_ratio);
    s
}

/// Read a spec written by [`model_to_text`]; only model keys are accepted.
pub fn model_from_text(text: &str) -> Result<ModelSpec> {
    for (i, line) in text.lines().enumerate() {
        let key = line.split('=').next().unwrap_or("").trim();
        if !key.is_empty() && !(key.starts_with("model.") || key.starts_with("attn.")) {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("`{key}` is not a model key"),
            });
        }
    }
    Ok(RunConfig::parse(text)?.model)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    RunConfig::parse(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("# header\n\n  train.epochs = 3  # trailing\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn layer_keys() {
        let cfg = RunConfig::parse("model.layer2.augment = replace\nattn.mechanism = linformer\nattn.k_rank = 4").unwrap();
        assert_eq!(cfg.model.layers[1].augment, Augment::Replace);
        let err = RunConfig::parse("model.layer9.channels = 3").unwrap_err();
        assert!(matches!(err, Error::InvalidValue { ref key, .. } if key == "model.layer9.channels"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines() {
        assert!(matches!(RunConfig::parse("train.seed = 1\ntrain.seed = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(RunConfig::parse("\nnot a pair"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn even_window_names_the_key() {
        let err = RunConfig::parse("attn.window = 4").unwrap_err();
        assert!(matches!(err, Error::InvalidValue { ref key, .. } if key == "attn.window"));
    }
}
