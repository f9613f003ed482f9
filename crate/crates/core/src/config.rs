//! Run configuration shared by training, evaluation and the CLI.
//!
//! Every section rejects unknown keys. Dotted-path overrides
//! (`train.lr=0.002`) are applied on the JSON form before deserializing, so
//! an override of a misspelled key fails the same way a file would.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cf::CfConfig;
use crate::contrastive::{AugmentationConfig, Negatives};
use crate::error::ModelError;
use crate::item_encoder::SlotFill;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Representation width `d`.
    pub dim: usize,
    /// Feature-level attention layers `L`.
    pub item_layers: usize,
    /// Item-level attention layers `Z`.
    pub bundle_layers: usize,
    pub slot_fill: SlotFill,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            item_layers: 1,
            bundle_layers: 1,
            slot_fill: SlotFill::Projected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the item-level contrastive loss. The likelihood term is
    /// divided by the catalog size, so useful weights scale like `0.2 / N`.
    pub alpha_item: f64,
    /// Weight of the bundle-level contrastive loss.
    pub alpha_bundle: f64,
    /// Weight of the squared L2 norm of all trainable parameters.
    pub l2: f64,
    /// Epochs without a validation NDCG improvement before stopping.
    pub patience: usize,
    pub train_seed_ratio: f64,
    pub negatives: Negatives,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 2048,
            epochs: 100,
            alpha_item: 1e-4,
            alpha_bundle: 1e-4,
            l2: 1e-5,
            patience: 10,
            train_seed_ratio: 0.5,
            negatives: Negatives::Batch,
        }
    }
}

/// Switches for the ablated variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub use_feedback: bool,
    pub use_item_attention: bool,
    pub use_bundle_attention: bool,
    pub use_item_cl: bool,
    pub use_bundle_cl: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            use_feedback: true,
            use_item_attention: true,
            use_bundle_attention: true,
            use_item_cl: true,
            use_bundle_cl: true,
        }
    }
}

impl AblationConfig {
    /// Mean pooling at both levels, no contrastive terms.
    pub fn mean_pooling() -> Self {
        Self {
            use_feedback: true,
            use_item_attention: false,
            use_bundle_attention: false,
            use_item_cl: false,
            use_bundle_cl: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub eval_seed_ratio: f64,
    pub eval_repeats: usize,
    /// Worker threads for evaluation; 0 uses every core.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            eval_seed_ratio: 0.5,
            eval_repeats: 1,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub cf: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives initialization, view sampling and augmentation.
    pub seed: u64,
    /// Drives the train/validation/test partition of the bundles.
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
    pub cf: CfConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            split_seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
            cf: CfConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key=value` overrides (see [`apply_overrides`]).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ModelError> {
        apply_overrides(self, overrides)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.model.dim == 0 {
            return bad("model.dim must be positive".into());
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        for (name, v) in [
            ("train.alpha_item", self.train.alpha_item),
            ("train.alpha_bundle", self.train.alpha_bundle),
            ("train.l2", self.train.l2),
            ("train.lr", self.train.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        for (name, v) in [
            ("train.train_seed_ratio", self.train.train_seed_ratio),
            ("eval.eval_seed_ratio", self.eval.eval_seed_ratio),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if self.eval.k == 0 || self.eval.eval_repeats == 0 {
            return bad("eval.k and eval.eval_repeats must be positive".into());
        }
        if self.cf.dim == 0 {
            return bad("cf.dim must be positive".into());
        }
        self.augment.validate()
    }
}

/// Applies dotted `key=value` overrides to any serde document; values are
/// parsed as JSON and fall back to plain strings.
pub fn apply_overrides<T, S>(doc: &T, overrides: &[S]) -> Result<T, ModelError>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut value = serde_json::to_value(doc).map_err(|e| ModelError::Config(e.to_string()))?;
    for item in overrides {
        let item = item.as_ref();
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ModelError::Config(format!("override `{item}` is not key=value")))?;
        set_path(&mut value, key, raw)?;
    }
    serde_json::from_value(value).map_err(|e| ModelError::Config(e.to_string()))
}

fn set_path(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<(), ModelError> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_owned()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ModelError::Config(format!("`{}` is not a section", parts[..depth].join("."))))?;
        if depth + 1 == parts.len() {
            obj.insert((*part).to_owned(), parsed);
            return Ok(());
        }
        node = obj
            .entry(*part)
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(ModelError::Config("empty override key".into()))
}
