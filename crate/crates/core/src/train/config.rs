use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::skeleton::{EncoderConfig, Stream};

/// Which alignment terms enter the multipart objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveTerms {
    /// `S_g` against the refined description.
    pub global: bool,
    /// `S_g` against synonym variants.
    pub synonym: bool,
    /// `S_p` against part-tagged clauses.
    pub parts: bool,
}

impl ContrastiveTerms {
    pub const NONE: Self = Self {
        global: false,
        synonym: false,
        parts: false,
    };
    pub const ALL: Self = Self {
        global: true,
        synonym: true,
        parts: true,
    };

    pub fn any(&self) -> bool {
        self.global || self.synonym || self.parts
    }
}

impl Default for ContrastiveTerms {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub stream: Stream,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub frames: usize,
    pub train_fraction: f64,
    pub noise: f64,
    pub layers: usize,
    pub channels: usize,
    pub synonyms: usize,
    pub terms: ContrastiveTerms,
    /// Standardize inputs per joint and channel with train-split statistics.
    pub normalize_input: bool,
    /// Encode each description once instead of once per batch.
    pub cache_text_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            base_lr: 0.2,
            warmup_epochs: 3,
            decay_epochs: vec![20, 25],
            decay_factor: 0.1,
            weight_decay: 5e-4,
            temperature: 0.1,
            alpha: 0.5,
            seed: 1,
            embed_dim: 256,
            stream: Stream::Joint,
            num_classes: 10,
            samples_per_class: 20,
            frames: 16,
            train_fraction: 0.8,
            noise: 0.01,
            layers: 3,
            channels: 64,
            synonyms: 2,
            terms: ContrastiveTerms::ALL,
            normalize_input: true,
            cache_text_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return fail(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!("decay_epochs {:?} must be strictly increasing", self.decay_epochs));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.weight_decay >= 0.0 && self.noise >= 0.0) {
            return fail("weight_decay and noise must be nonnegative".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must lie in (0, 1), got {}", self.train_fraction));
        }
        let per_class_train = (self.samples_per_class as f64 * self.train_fraction).round() as usize;
        if per_class_train == 0 || per_class_train >= self.samples_per_class {
            return fail("split leaves a class without train or test samples".into());
        }
        if self.frames < 2 || self.num_classes < 2 || self.synonyms == 0 {
            return fail("need frames >= 2, num_classes >= 2 and synonyms >= 1".into());
        }
        if self.embed_dim < crate::text_encoder::MIN_DIM {
            return fail(format!("embed_dim must be at least {}", crate::text_encoder::MIN_DIM));
        }
        self.contrastive().validate()
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            alpha: self.alpha,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            layers: self.layers,
            channels: self.channels,
            embed_dim: self.embed_dim,
            num_classes: self.num_classes,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; values are parsed as TOML, falling
    /// back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()?).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
            let mut path = key.trim().split('.').peekable();
            let mut cursor = &mut table;
            while let Some(segment) = path.next() {
                if path.peek().is_none() {
                    cursor.insert(segment.to_owned(), value.clone());
                } else {
                    cursor = cursor
                        .entry(segment.to_owned())
                        .or_insert_with(|| toml::Value::Table(Default::default()))
                        .as_table_mut()
                        .ok_or_else(|| Error::Config(format!("{key:?} does not name a table")))?;
                }
            }
        }
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(serde_json::to_vec(self)?).into())
    }
}

/// Learning rate for `epoch` (zero based): linear warm-up reaching the base
/// rate at the end of warm-up, then one decay step per passed decay epoch.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.warmup_epochs {
        return config.base_lr * (epoch + 1) as f64 / config.warmup_epochs as f64;
    }
    let passed = config.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    config.base_lr * config.decay_factor.powi(passed as i32)
}
