//! JSON parameter dump for [`LinearSoftmaxClassifier`].
//!
//! Floats are written in shortest round-trip form and parsed back exactly,
//! so a save/load cycle is bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LinearSoftmaxClassifier;
use crate::error::{Result, ShuntError};
use crate::prob::ClassId;

pub const CHECKPOINT_FORMAT: &str = "shuntgate.linear-softmax";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub seed: u64,
    /// `[classes, features]`
    pub shape: [usize; 2],
    pub classes: Vec<ClassId>,
    pub learning_rate: f64,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl From<&LinearSoftmaxClassifier> for Checkpoint {
    fn from(m: &LinearSoftmaxClassifier) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            name: m.name.clone(),
            seed: m.seed,
            shape: [m.classes.len(), m.n_features],
            classes: m.classes.clone(),
            learning_rate: m.learning_rate,
            weights: m.weights.clone(),
            bias: m.bias.clone(),
        }
    }
}

impl TryFrom<Checkpoint> for LinearSoftmaxClassifier {
    type Error = ShuntError;

    fn try_from(c: Checkpoint) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(ShuntError::config(format!("unknown checkpoint format `{}`", c.format)));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(ShuntError::config(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        let [k, f] = c.shape;
        if c.classes.len() != k || c.weights.len() != k * f || c.bias.len() != k {
            return Err(ShuntError::config("checkpoint shape header does not match its arrays"));
        }
        let mut model = LinearSoftmaxClassifier::zeros(c.classes, f, c.learning_rate, c.seed)?.with_name(c.name);
        if c.weights.iter().chain(&c.bias).any(|v| !v.is_finite()) {
            return Err(ShuntError::config("checkpoint contains non-finite parameters"));
        }
        model.weights = c.weights;
        model.bias = c.bias;
        Ok(model)
    }
}

impl LinearSoftmaxClassifier {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint::from(self))?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        serde_json::from_str::<Checkpoint>(text)?.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}
