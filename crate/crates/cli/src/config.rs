//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags.
//!
//! ```toml
//! data = "runs/ml1m/dataset.bin"
//! out = "runs/ml1m/model"
//!
//! [model]
//! dim = 256
//! beta = 0.1
//!
//! [train]
//! lr = 0.001
//! batch_size = 1024
//!
//! [eval]
//! ks = [10, 20]
//! ```
//!
//! Every section accepts the fields of the matching library struct; unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssdrec::model::ModelConfig;
use ssdrec::train::{EvalConfig, TrainConfig};
use ssdrec::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub beta: Option<f64>,
    pub rho: Option<f64>,
    pub max_len: Option<usize>,
    pub layers: Option<usize>,
    pub dim: Option<usize>,
    pub state_size: Option<usize>,
    pub dropout: Option<f64>,
    pub ks: Option<Vec<usize>>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        if o.data.is_some() {
            self.data.clone_from(&o.data);
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        set(&mut self.train.seed, &o.seed);
        set(&mut self.train.lr, &o.lr);
        set(&mut self.train.batch_size, &o.batch_size);
        set(&mut self.train.epochs, &o.epochs);
        set(&mut self.train.patience, &o.patience);
        set(&mut self.model.beta, &o.beta);
        set(&mut self.model.rho, &o.rho);
        set(&mut self.model.max_len, &o.max_len);
        set(&mut self.model.layers, &o.layers);
        set(&mut self.model.dim, &o.dim);
        set(&mut self.model.state_size, &o.state_size);
        set(&mut self.model.dropout, &o.dropout);
        set(&mut self.eval.ks, &o.ks);
    }

    /// Defaults, then `file` if given, then `overrides`; validated.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()
    }

    pub fn data(&self) -> Result<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (--data or `data` in the config file)".into()))
    }

    pub fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory given (--out or `out` in the config file)".into()))
    }
}
