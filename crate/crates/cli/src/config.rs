//! Resolved run configuration: task preset, then config file, then flags.

use std::path::Path;

use linvit::data::PreprocConfig;
use linvit::train::TrainConfig;
use linvit::{Task, ViTConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// How the dataset root is divided into train, validation and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Subsample every class to the smallest class size before splitting.
    pub balance_classes: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.7, 0.15, 0.15],
            seed: 0,
            balance_classes: false,
        }
    }
}

/// Everything a run needs, fully resolved before any work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Class directories to use, in label order. `None` means all of them.
    #[serde(default)]
    pub classes: Option<Vec<String>>,
    pub model: ViTConfig,
    pub preprocessing: PreprocConfig,
    pub training: TrainConfig,
    pub split: SplitConfig,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub classes: Option<Vec<String>>,
    pub layers: Option<usize>,
    pub image_size: Option<usize>,
    pub attention_mode: Option<linvit::attention::AttentionMode>,
    pub proj_rank: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub no_class_weights: bool,
    pub balance_classes: bool,
}

impl RunConfig {
    pub fn preset(task: Task) -> Self {
        let model = task.preset();
        RunConfig {
            task,
            classes: None,
            preprocessing: PreprocConfig {
                target_size: model.image_size,
                ..Default::default()
            },
            model,
            training: TrainConfig::default(),
            split: SplitConfig::default(),
        }
    }

    /// Applies the precedence preset < `file` < `flags`. The task comes from
    /// the flag, else the file, else defaults to binary. A file that sets the
    /// model's image size without a preprocessing size gets a matching one.
    pub fn resolve(task: Option<Task>, file: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let file_value = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
                if !v.is_object() {
                    return Err(CliError::usage(format!("config {}: expected a JSON object", p.display())));
                }
                Some(v)
            }
            None => None,
        };
        let file_task = match file_value.as_ref().and_then(|v| v.get("task")) {
            Some(t) => Some(
                serde_json::from_value::<Task>(t.clone())
                    .map_err(|e| CliError::usage(format!("config task: {e}")))?,
            ),
            None => None,
        };
        let task = task.or(file_task).unwrap_or(Task::Binary);
        let mut merged = serde_json::to_value(RunConfig::preset(task)).expect("config serializes");
        if let Some(v) = &file_value {
            let sets_model_size = v.pointer("/model/image_size").is_some();
            let sets_preproc_size = v.pointer("/preprocessing/target_size").is_some();
            merge(&mut merged, v);
            if sets_model_size && !sets_preproc_size {
                merged["preprocessing"]["target_size"] = merged["model"]["image_size"].clone();
            }
        }
        merged["task"] = serde_json::to_value(task).expect("task serializes");
        let mut cfg: RunConfig =
            serde_json::from_value(merged).map_err(|e| CliError::usage(format!("config: {e}")))?;
        cfg.apply(flags);
        Ok(cfg)
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(c) = &o.classes {
            self.classes = Some(c.clone());
        }
        if let Some(v) = o.layers {
            self.model.layers = v;
        }
        if let Some(v) = o.image_size {
            self.model.image_size = v;
            self.preprocessing.target_size = v;
        }
        if let Some(v) = o.attention_mode {
            self.model.attention_mode = v;
        }
        if let Some(v) = o.proj_rank {
            self.model.proj_rank = v;
        }
        if let Some(v) = o.epochs {
            self.training.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.training.batch_size = v;
        }
        if let Some(v) = o.learning_rate {
            self.training.learning_rate = v;
        }
        if let Some(v) = o.seed {
            self.training.seed = v;
            self.model.seed = v;
            self.split.seed = v;
        }
        if o.no_class_weights {
            self.training.use_class_weights = false;
        }
        if o.balance_classes {
            self.split.balance_classes = true;
        }
    }

    /// Checks every section and the cross-section constraints, given the
    /// number of classes actually selected from the dataset.
    pub fn validate(&self, num_classes: usize) -> Result<(), CliError> {
        match self.task {
            Task::Binary if num_classes != 2 => {
                return Err(CliError::usage(format!(
                    "binary task needs exactly 2 classes, got {num_classes} (select a pair with --classes)"
                )))
            }
            Task::Multiclass if num_classes < 3 => {
                return Err(CliError::usage(format!(
                    "multiclass task needs at least 3 classes, got {num_classes}"
                )))
            }
            _ => {}
        }
        if self.model.num_classes != num_classes {
            return Err(CliError::usage(format!(
                "model.num_classes is {} but {num_classes} classes are selected",
                self.model.num_classes
            )));
        }
        if self.preprocessing.target_size != self.model.image_size {
            return Err(CliError::usage(format!(
                "preprocessing.target_size {} differs from model.image_size {}",
                self.preprocessing.target_size, self.model.image_size
            )));
        }
        self.model.validate().map_err(CliError::usage)?;
        self.preprocessing.validate(self.model.patch_size).map_err(CliError::usage)?;
        self.training.validate().map_err(CliError::usage)?;
        let r = self.split.ratios;
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CliError::usage(format!("split ratios {r:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

/// Recursive object merge; non-object values in `patch` replace `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}
