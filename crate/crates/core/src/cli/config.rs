use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskSplitConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::openworld::LossConfig;
use crate::protocol::{InferConfig, TrainConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "OWDETR_OUT";

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    #[serde(rename = "+NC")]
    Nc,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 3] = [Variant::Baseline, Variant::Nc, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Nc => "+NC",
            Variant::Full => "full",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Nc => "nc",
            Variant::Full => "full",
        }
    }

    /// `(novelty, objectness)` switches.
    pub fn switches(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Nc => (true, false),
            Variant::Full => (true, true),
        }
    }
}

/// One file drives a full multi-task run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation; 0 uses every core.
    pub workers: usize,
    pub model: ModelConfig,
    pub split: TaskSplitConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: None,
            workers: 0,
            model: ModelConfig::default(),
            split: TaskSplitConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            infer: InferConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub k_u: Option<usize>,
    pub top_k: Option<usize>,
    pub no_nc: bool,
    pub no_objectness: bool,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.message().split('`').nth(1).unwrap_or("").to_string();
            Error::Config {
                key,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(a) = o.alpha {
            self.loss.alpha = a;
        }
        if let Some(k) = o.k_u {
            self.loss.k_u = k;
        }
        if let Some(k) = o.top_k {
            self.infer.top_k = k;
        }
        if o.no_nc {
            self.loss.novelty = false;
            self.infer.emit_unknown = false;
        }
        if o.no_objectness {
            self.loss.objectness = false;
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
    }

    /// Sets both ablation switches and whether unknown detections are emitted.
    pub fn set_variant(&mut self, v: Variant) {
        let (nc, obj) = v.switches();
        self.loss.novelty = nc;
        self.loss.objectness = obj;
        self.infer.emit_unknown = nc;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("split.{key}"), message),
            other => other,
        })?;
        self.train.validate()?;
        self.loss.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::config(format!("loss.{key}"), message),
            other => other,
        })?;
        self.infer
            .validate()
            .map_err(|_| Error::config("infer.top_k", format!("must be >= 1, got {}", self.infer.top_k)))?;
        self.eval.validate()?;
        let side = self.split.render.width.min(self.split.render.height) as usize;
        if side < self.model.min_input_side() {
            return Err(Error::config(
                "split.render.width",
                format!("images must be at least {} pixels for this model", self.model.min_input_side()),
            ));
        }
        Ok(())
    }

    /// Output root: config, then environment, then `./owdetr-out`.
    pub fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("owdetr-out"))
    }
}

/// Reads `path` (if any), applies flag overrides, validates.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Missing(p.to_path_buf()));
            }
            RunConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
