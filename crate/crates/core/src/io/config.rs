//! `key = value` run configuration files.

use std::fmt::Write as _;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoder::{ModelConfig, STAGES};
use crate::error::{Error, Result};
use crate::train::trainer::{TrainConfig, DEFAULT_SEEDS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Train,
    Eval,
    Gradcheck,
    Synth,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::Eval => "eval",
            Task::Gradcheck => "gradcheck",
            Task::Synth => "synth",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Task::Train),
            "eval" => Ok(Task::Eval),
            "gradcheck" => Ok(Task::Gradcheck),
            "synth" => Ok(Task::Synth),
            _ => Err(format!("unknown task `{s}` (train|eval|gradcheck|synth)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    /// Directory of `images/*.ppm` and `masks/*.pgm`; synthetic data is
    /// generated in memory when unset.
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Size of the in-memory synthetic dataset, and of the dataset written by `synth`.
    pub num_samples: usize,
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Train,
            model: ModelConfig::default(),
            seeds: DEFAULT_SEEDS.to_vec(),
            train: TrainConfig::default(),
            data_dir: None,
            out_dir: PathBuf::from("out"),
            num_samples: 16,
            data_seed: 0,
        }
    }
}

/// Every recognised key, in the order [`RunConfig::to_text`] prints them.
pub const KEYS: &[&str] = &[
    "task",
    "img_size",
    "patch_size",
    "in_channels",
    "widths",
    "depths",
    "heads",
    "window_size",
    "effn_ratio",
    "num_classes",
    "decoder",
    "encoder_ffn",
    "dspp_rates",
    "seeds",
    "lr",
    "lr_min",
    "momentum",
    "weight_decay",
    "batch_size",
    "total_steps",
    "augment",
    "eval_every",
    "eval_threads",
    "data_dir",
    "out_dir",
    "num_samples",
    "data_seed",
];

fn scalar<V: FromStr>(v: &str) -> std::result::Result<V, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn list<V: FromStr>(v: &str) -> std::result::Result<Vec<V>, String> {
    v.split(',').map(|p| scalar(p.trim())).collect()
}

fn stages(v: &str) -> std::result::Result<[usize; STAGES], String> {
    let l: Vec<usize> = list(v)?;
    l.try_into()
        .map_err(|l: Vec<usize>| format!("expected {STAGES} values, got {}", l.len()))
}

fn flag(v: &str, on: &str, off: &str) -> std::result::Result<bool, String> {
    match v {
        _ if v == on => Ok(true),
        _ if v == off => Ok(false),
        _ => Err(format!("expected `{on}` or `{off}`, got `{v}`")),
    }
}

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "task" => self.task = v.parse()?,
            "img_size" => m.img_size = scalar(v)?,
            "patch_size" => m.patch_size = scalar(v)?,
            "in_channels" => m.in_channels = scalar(v)?,
            "widths" => m.stage_widths = stages(v)?,
            "depths" => m.stage_depths = stages(v)?,
            "heads" => m.heads_per_stage = stages(v)?,
            "window_size" => m.window_size = scalar(v)?,
            "effn_ratio" => m.effn_ratio = scalar(v)?,
            "num_classes" => m.num_classes = scalar(v)?,
            "decoder" => m.use_mff_decoder = flag(v, "mff", "plain")?,
            "encoder_ffn" => m.use_effn = flag(v, "effn", "ffn")?,
            "dspp_rates" => m.dspp_rates = list(v)?,
            "seeds" => self.seeds = list(v)?,
            "lr" => t.lr = scalar(v)?,
            "lr_min" => t.lr_min = scalar(v)?,
            "momentum" => t.momentum = scalar(v)?,
            "weight_decay" => t.weight_decay = scalar(v)?,
            "batch_size" => t.batch_size = scalar(v)?,
            "total_steps" => t.total_steps = scalar(v)?,
            "augment" => t.augment = scalar(v)?,
            "eval_every" => t.eval_every = scalar(v)?,
            "eval_threads" => t.eval_threads = scalar::<NonZeroUsize>(v)?,
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "num_samples" => self.num_samples = scalar(v)?,
            "data_seed" => self.data_seed = scalar(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a configuration; keys absent from the text keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigLine {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(k) = KEYS.iter().find(|k| **k == key) {
                if seen.contains(k) {
                    return Err(Error::ConfigLine {
                        line,
                        msg: format!("duplicate key `{key}`"),
                    });
                }
                seen.push(k);
            }
            cfg.set(key, value).map_err(|msg| Error::ConfigLine {
                line,
                msg: format!("{key}: {msg}"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.lr.is_finite() && self.train.lr_min.is_finite() && self.train.lr >= self.train.lr_min) {
            return Err(Error::Config("lr must be finite and at least lr_min".into()));
        }
        Ok(())
    }

    /// Canonical text form listing every key; parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let values = [
            self.task.name().to_string(),
            m.img_size.to_string(),
            m.patch_size.to_string(),
            m.in_channels.to_string(),
            join(&m.stage_widths),
            join(&m.stage_depths),
            join(&m.heads_per_stage),
            m.window_size.to_string(),
            m.effn_ratio.to_string(),
            m.num_classes.to_string(),
            if m.use_mff_decoder { "mff" } else { "plain" }.to_string(),
            if m.use_effn { "effn" } else { "ffn" }.to_string(),
            join(&m.dspp_rates),
            join(&self.seeds),
            format!("{:?}", t.lr),
            format!("{:?}", t.lr_min),
            format!("{:?}", t.momentum),
            format!("{:?}", t.weight_decay),
            t.batch_size.to_string(),
            t.total_steps.to_string(),
            t.augment.to_string(),
            t.eval_every.to_string(),
            t.eval_threads.to_string(),
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.out_dir.display().to_string(),
            self.num_samples.to_string(),
            self.data_seed.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_reference_values() {
        let text = RunConfig::default().to_text();
        for line in [
            "momentum = 0.98",
            "weight_decay = 1e-6",
            "lr = 0.01",
            "lr_min = 6e-6",
            "seeds = 3407,8261,10993",
            "dspp_rates = 1,6,12,18",
            "widths = 96,192,384,768",
        ] {
            assert!(text.lines().any(|l| l == line), "missing `{line}` in\n{text}");
        }
    }

    #[test]
    fn text_round_trips() {
        let mut cfg = RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        };
        cfg.data_dir = Some("data".into());
        cfg.train.lr = 0.05;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("task = train\n# comment\n\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 4, .. }), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("decoder = swin").is_err());
        assert!(RunConfig::parse("widths = 1,2,3").is_err());
        assert!(RunConfig::parse("lr = 1\nlr = 2").is_err());
        assert!(matches!(RunConfig::parse("img_size = 60"), Err(Error::Config(_))));
    }
}
