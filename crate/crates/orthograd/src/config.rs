//! Flat `key = value` config files.
//!
//! Unknown keys are rejected outright: a typo must fail the run, not
//! silently fall back to a default. `#` starts a comment; blank lines are
//! ignored. CLI flags override file values, and the merged result is what
//! gets logged next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attacks::AttackKind;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{desk_cnn, desk_mlp, LayerSpec};

/// Every key the toolkit understands.
pub const KNOWN_KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.path",
    "dataset.labels",
    "dataset.shape",
    "dataset.val_fraction",
    "dataset.synth.classes",
    "dataset.synth.n",
    "dataset.synth.hw",
    "dataset.synth.seed",
    "model.arch",
    "train.lr",
    "train.momentum",
    "train.batch",
    "train.lambda",
    "train.max_epochs",
    "train.epochs_check",
    "train.seed",
    "eval.n_samples",
    "eval.eps_grid",
    "eval.attacks",
    "eval.source",
    "eval.targets",
    "eval.defense",
    "reference.checkpoint",
    "sweep.lambdas",
    "compare.defenses",
    "report.input",
];

#[derive(Debug, Clone, Default)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: &Path) -> Result<Config> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Override or add a value; the key must be known.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad number `{v}`"))))
            .transpose()
    }

    pub fn require_f64(&self, key: &str) -> Result<f64> {
        self.get_f64(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`"))))
            .transpose()
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        self.get_usize(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| Error::Config(format!("key `{key}`: bad integer `{v}`"))))
            .transpose()
    }

    pub fn require_u64(&self, key: &str) -> Result<u64> {
        self.get_u64(key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    /// The merged config as deterministic `key = value` lines.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Comma-separated float list, strictly sorted ascending.
    pub fn eps_grid(&self) -> Result<Vec<f64>> {
        let raw = self.require("eval.eps_grid")?;
        let mut grid = Vec::new();
        for part in raw.split(',') {
            let v: f64 = part
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("eval.eps_grid: bad number `{part}`")))?;
            grid.push(v);
        }
        if grid.is_empty() {
            return Err(Error::Config("eval.eps_grid: empty grid".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.eps_grid must be strictly ascending".into()));
        }
        Ok(grid)
    }

    pub fn attack_kinds(&self) -> Result<Vec<AttackKind>> {
        let raw = self.require("eval.attacks")?;
        raw.split(',').map(|p| AttackKind::parse(p.trim())).collect()
    }

    pub fn lambdas(&self) -> Result<Vec<f64>> {
        let raw = self.get("sweep.lambdas").unwrap_or("0,5,30,100");
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("sweep.lambdas: bad number `{p}`")))
            })
            .collect()
    }

    /// Materialize the configured dataset.
    pub fn dataset(&self) -> Result<Dataset> {
        match self.require("dataset.kind")? {
            "synth" => {
                let classes = self.require_usize("dataset.synth.classes")?;
                let n = self.require_usize("dataset.synth.n")?;
                let hw = self.require_usize("dataset.synth.hw")?;
                let seed = self.require_u64("dataset.synth.seed")?;
                data::gen_synthetic(classes, n, hw, seed)
            }
            "idx" => {
                let images = self.require("dataset.path")?;
                let labels = self.require("dataset.labels")?;
                data::load_idx(Path::new(images), Path::new(labels))
            }
            "csv" => {
                let path = self.require("dataset.path")?;
                let shape = self.image_shape()?;
                data::load_csv(Path::new(path), shape)
            }
            other => Err(Error::Config(format!("dataset.kind `{other}` not one of synth|idx|csv"))),
        }
    }

    fn image_shape(&self) -> Result<[usize; 3]> {
        let raw = self.require("dataset.shape")?;
        let dims: Vec<usize> = raw
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Config(format!("dataset.shape: bad `{raw}`"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Config(format!("dataset.shape `{raw}` must be CxHxW")));
        }
        Ok([dims[0], dims[1], dims[2]])
    }

    pub fn val_fraction(&self) -> Result<f64> {
        Ok(self.get_f64("dataset.val_fraction")?.unwrap_or(0.2))
    }

    /// Resolve `model.arch` against an input shape and class count.
    pub fn arch(&self, input_shape: [usize; 3], classes: usize) -> Result<Vec<LayerSpec>> {
        match self.require("model.arch")? {
            "mlp" => Ok(desk_mlp(input_shape, classes)),
            "cnn" => Ok(desk_cnn(input_shape, classes)),
            other => Err(Error::Config(format!("model.arch `{other}` not one of mlp|cnn"))),
        }
    }
}
