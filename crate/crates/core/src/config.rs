//! Run configuration files (TOML) and dataset resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilevel::{prepare_datasets, BilevelConfig, LossConfig, TrainConfig, Trainer, TrainerSettings};
use crate::data::{
    generate_synthetic, group_split, load_task_csv, SplitFractions, SplitState, SyntheticSpec,
    TaskDataset, TaskManifest,
};
use crate::error::{GateError, Result};
use crate::model::{ModelConfig, TaskId};

/// One task file listed under `[[data.tasks]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub name: String,
    pub path: PathBuf,
}

/// `[data]`: exactly one of `synthetic`, `tasks` or `manifest`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// seeds synthetic generation and the initial split
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub tasks: Vec<TaskFile>,
    /// task manifest; each task is read from `<dir>/<abbreviation>.csv`
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_every() -> usize {
    10
}

/// `[output]`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// checkpoint every this many epochs (0: final epoch only)
    #[serde(default = "default_every")]
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: default_out(),
            checkpoint_every: default_every(),
        }
    }
}

fn default_grid_values() -> Vec<f64> {
    vec![0.2, 0.4, 0.6, 0.8, 1.0]
}

/// `[grid]`: symmetric ratio axes, one per unordered task pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// used for every pair unless `axes` is given
    #[serde(default = "default_grid_values")]
    pub values: Vec<f64>,
    /// explicit per-pair axes in pair order (0,1), (0,2), ..., (1,2), ...
    #[serde(default)]
    pub axes: Option<Vec<Vec<f64>>>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            values: default_grid_values(),
            axes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub bilevel: BilevelConfig,
    #[serde(default)]
    pub losses: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub grid: GridConfig,
}

impl RunConfig {
    /// Parse and validate. Relative data paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            GateError::Config {
                field: if field == "." { "<root>".into() } else { field },
                message: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| GateError::io(format!("reading config {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.data.tasks.iter_mut().for_each(|t| fix(&mut t.path));
        if let Some(m) = &mut self.data.manifest {
            fix(m);
        }
        if let Some(d) = &mut self.data.dir {
            fix(d);
        }
    }

    pub fn settings(&self) -> TrainerSettings {
        TrainerSettings {
            model: self.model.clone(),
            train: self.train.clone(),
            bilevel: self.bilevel.clone(),
            losses: self.losses.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.settings().validate()?;
        let d = &self.data;
        let sources = d.synthetic.is_some() as usize
            + (!d.tasks.is_empty()) as usize
            + d.manifest.is_some() as usize;
        if sources != 1 {
            return Err(GateError::config(
                "data",
                "give exactly one of `synthetic`, `tasks` or `manifest`",
            ));
        }
        if let Some(spec) = &d.synthetic {
            spec.validate()?;
            if spec.d_x != self.model.d_x {
                return Err(GateError::config(
                    "data.synthetic.d_x",
                    format!("is {} but model.d_x is {}", spec.d_x, self.model.d_x),
                ));
            }
        }
        d.split
            .validate()
            .map_err(|e| GateError::config("data.split", e.to_string()))?;
        if let Some(axes) = &self.grid.axes {
            if axes.iter().any(|a| a.is_empty()) {
                return Err(GateError::config("grid.axes", "empty axis"));
            }
        }
        if self.grid.values.is_empty() {
            return Err(GateError::config("grid.values", "empty axis"));
        }
        let all = self.grid.values.iter().chain(self.grid.axes.iter().flatten().flatten());
        if all.into_iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(GateError::config("grid", "ratios must be finite and >= 0"));
        }
        Ok(())
    }

    /// SHA-256 of everything that determines training (not the output section).
    pub fn config_hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "train": self.train,
            "bilevel": self.bilevel,
            "losses": self.losses,
            "data": self.data,
        });
        format!("{:x}", Sha256::digest(key.to_string().as_bytes()))
    }

    /// Raw (unnormalized) datasets in task order.
    pub fn load_datasets(&self) -> Result<Vec<TaskDataset>> {
        let d = &self.data;
        if let Some(spec) = &d.synthetic {
            return generate_synthetic(spec, d.seed);
        }
        if let Some(path) = &d.manifest {
            let manifest = TaskManifest::load(path)?;
            let dir = d
                .dir
                .clone()
                .or_else(|| path.parent().map(Path::to_path_buf))
                .unwrap_or_default();
            return manifest
                .tasks
                .iter()
                .map(|e| {
                    let ds = load_task_csv(
                        &dir.join(format!("{}.csv", e.abbreviation)),
                        TaskId::new(e.abbreviation.as_str())?,
                    )?;
                    if ds.len() != e.count {
                        return Err(GateError::config(
                            "data.manifest",
                            format!("task `{}` has {} rows, manifest says {}", e.abbreviation, ds.len(), e.count),
                        ));
                    }
                    Ok(ds)
                })
                .collect();
        }
        d.tasks
            .iter()
            .map(|t| load_task_csv(&t.path, TaskId::new(t.name.as_str())?))
            .collect()
    }

    /// Initial group split of every task.
    pub fn initial_split(&self, raw: &[TaskDataset]) -> Result<SplitState> {
        let tasks = raw
            .iter()
            .map(|ds| group_split(ds, self.data.split, self.data.seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(SplitState { tasks })
    }

    /// Load data, split, normalize, and build a fresh trainer.
    pub fn build_trainer(&self) -> Result<Trainer> {
        let raw = self.load_datasets()?;
        let split = self.initial_split(&raw)?;
        let datasets = prepare_datasets(&raw, &split)?;
        Trainer::new(self.settings(), datasets, split)
    }
}
