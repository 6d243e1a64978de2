use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::DatasetHeader;
use crate::model::ModelConfig;
use crate::msm::MsmConfig;
use crate::train::{LrSchedule, PointSelection, SplitSpec, TrainConfig};

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: &[&str] = &["full", "desk", "transfer-target"];

/// How samples are cut from simulated runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seed for the multi-step pair draw.
    pub pair_seed: u64,
    /// Side of the marker sub-grid used as the point cloud; 0 keeps every
    /// mass.
    pub markers_per_side: usize,
    /// Never indent a marker, so each cloud has `markers² + 1` points.
    pub exclude_marker_locations: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { pair_seed: 0, markers_per_side: 0, exclude_marker_locations: false }
    }
}

/// Everything a command needs, as one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Simulation seed.
    pub seed: u64,
    pub msm: MsmConfig,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            msm: MsmConfig::default(),
            data: DataConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(RunConfig { msm: MsmConfig::desk(), model: desk_model(), train: desk_train(250), ..Self::default() }),
            "transfer-target" => Ok(RunConfig {
                seed: 1,
                msm: MsmConfig::transfer_target(),
                data: DataConfig { pair_seed: 0, markers_per_side: 5, exclude_marker_locations: true },
                split: SplitSpec { ratios: [8, 3, 5], seed: 0 },
                model: desk_model(),
                train: desk_train(100),
            }),
            other => Err(Error::Config(format!("unknown preset '{other}' (expected one of {})", PRESETS.join(", ")))),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `key=value` overrides with dotted keys, e.g.
    /// `train.epochs=10`. Values are parsed as TOML, falling back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::Config(format!("override '{o}' is not of the form key=value")))?;
            let value = parse_value(raw.trim());
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = slot
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key '{key}' does not name a table")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*part) {
                        return Err(Error::Config(format!("unknown config key '{key}'")));
                    }
                    table.insert((*part).to_string(), value.clone());
                    break;
                }
                slot = table.get_mut(*part).ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
            }
        }
        let cfg: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.msm.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.split.ratios.iter().sum::<usize>() == 0 {
            return Err(Error::Config("split.ratios must not all be zero".into()));
        }
        if self.data.markers_per_side == 1 || self.data.markers_per_side > self.msm.grid_n {
            return Err(Error::Config(format!(
                "data.markers_per_side = {} must be 0 or between 2 and msm.grid_n = {}",
                self.data.markers_per_side, self.msm.grid_n
            )));
        }
        Ok(())
    }

    pub fn point_selection(&self) -> Result<PointSelection> {
        if self.data.markers_per_side == 0 {
            Ok(PointSelection::All)
        } else {
            PointSelection::marker_grid(self.msm.grid_n, self.data.markers_per_side)
        }
    }

    /// Grid points the simulator must not indent.
    pub fn excluded_locations(&self) -> Result<Vec<usize>> {
        match (self.data.exclude_marker_locations, self.point_selection()?) {
            (true, PointSelection::Markers(m)) => Ok(m),
            _ => Ok(Vec::new()),
        }
    }

    /// The part of the configuration that determines a dataset file.
    pub fn dataset_header(&self) -> Result<DatasetHeader> {
        Ok(DatasetHeader { seed: self.seed, excluded_locations: self.excluded_locations()?, msm: self.msm.clone() })
    }
}

/// Desk-scale network: default widths, coordinates scaled to centimetres.
fn desk_model() -> ModelConfig {
    ModelConfig { input_scale: 0.1, ..ModelConfig::default() }
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, lr: 1e-3, lr_schedule: LrSchedule::Cosine, ..TrainConfig::default() }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
