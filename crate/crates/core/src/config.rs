//! Run configuration: one JSON document with `data`, `model`, `init`,
//! `train` and `verify` sections. Unknown keys are rejected everywhere.
//! Every random stream is derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{SyntheticImageConfig, CONTRAST_REG};
use crate::error::{Result, SimNetError};
use crate::ggm::{BetaMode, GgmConfig};
use crate::mex::MexMode;
use crate::network::{NetSpec, Trainable};
use crate::similarity::SimilarityForm;
use crate::trainer::SgdConfig;
use crate::verify::VerifyConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Cifar10,
    Synthetic,
    /// CIFAR-10 when the batch files are present, synthetic otherwise.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    /// `None` keeps the whole split.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub synthetic: SyntheticImageConfig,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub contrast_reg: f64,
    pub zca_epsilon: f64,
    /// Training patches drawn to fit the whitening.
    pub zca_patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Auto,
            dir: None,
            train_per_class: Some(500),
            test_per_class: Some(100),
            synthetic: SyntheticImageConfig::default(),
            synthetic_train: 5000,
            synthetic_test: 1000,
            contrast_reg: CONTRAST_REG,
            zca_epsilon: 0.1,
            zca_patches: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub templates: usize,
    pub patch: [usize; 2],
    pub stride: usize,
    pub form: SimilarityForm,
    pub weighted: bool,
    pub p: f64,
    pub xi1: MexMode,
    pub xi2: MexMode,
    pub pool_lattice: [usize; 2],
    pub trainable: Trainable,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = NetSpec::default();
        ModelConfig {
            templates: spec.templates,
            patch: spec.patch,
            stride: spec.stride,
            form: spec.form,
            weighted: spec.weighted,
            p: spec.p,
            xi1: spec.xi1,
            xi2: spec.xi2,
            pool_lattice: spec.pool_lattice,
            trainable: spec.trainable,
        }
    }
}

impl ModelConfig {
    pub fn net_spec(&self, input: [usize; 3], classes: usize) -> NetSpec {
        NetSpec {
            input,
            patch: self.patch,
            stride: self.stride,
            templates: self.templates,
            classes,
            form: self.form,
            weighted: self.weighted,
            p: self.p,
            xi1: self.xi1,
            xi2: self.xi2,
            pool_lattice: self.pool_lattice,
            trainable: self.trainable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Ggm,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub method: InitMethod,
    /// `seed` is replaced by a stream derived from the run seed.
    pub ggm: GgmConfig,
    /// Whitened training patches sampled for EM.
    pub patches: usize,
    pub location_iters: usize,
    pub location_tol: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            method: InitMethod::Ggm,
            ggm: GgmConfig {
                beta: BetaMode::Fixed(2.0),
                max_iter: 50,
                ..GgmConfig::default()
            },
            patches: 20_000,
            location_iters: 100,
            location_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub init: InitConfig,
    /// `seed` is replaced by a stream derived from the run seed.
    pub train: SgdConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            init: InitConfig::default(),
            train: SgdConfig {
                epochs: 30,
                ..SgdConfig::default()
            },
            verify: VerifyConfig::default(),
        }
    }
}

/// Independent random streams carved out of the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    Whitening,
    Init,
    Train,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| SimNetError::Config(e.to_string()))?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: RunConfig = serde_json::from_value(value).map_err(|e| SimNetError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (defaults when `None`) and applies `key=value`
    /// overrides. Keys are dotted paths; values parse as JSON and fall back
    /// to plain strings.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| SimNetError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| SimNetError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.verify.tolerances.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if !(d.contrast_reg > 0.0 && d.zca_epsilon >= 0.0) {
            return Err(SimNetError::Config("contrast_reg must be positive and zca_epsilon non-negative".into()));
        }
        if self.model.templates == 0 {
            return Err(SimNetError::Config("model.templates must be positive".into()));
        }
        if self.init.patches == 0 {
            return Err(SimNetError::Config("init.patches must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        // splitmix64 finalizer over (seed, stream)
        let mut z = self.seed ^ (stream as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            seed: self.seed_for(Stream::Train),
            ..self.train.clone()
        }
    }

    pub fn ggm(&self) -> GgmConfig {
        GgmConfig {
            seed: self.seed_for(Stream::Init),
            ..self.init.ggm
        }
    }
}

fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| SimNetError::Config(format!("override `{item}` is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| SimNetError::Config(format!("`{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(SimNetError::Config("empty override key".into()))
}
