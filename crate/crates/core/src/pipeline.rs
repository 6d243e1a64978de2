//! Dataset-to-model workflows shared by the command line, the Python
//! bindings and the end-to-end tests.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ModelManifest, RunConfig, MANIFEST_VERSION};
use crate::model::ModelWeights;
use crate::msm::IndentationRun;
use crate::rng::Rng;
use crate::train::{build_modes_with, evaluate, evaluate_identity, split_by_location, train, EpochRecord, Metrics, TrainOutcome};
use crate::types::Sample;

/// Child stream of the training seed used for weight initialisation.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            "all" => Ok(SplitName::All),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train, val, test or all)"))),
        }
    }
}

/// Single-step and multi-step samples of each location split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSamples {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SplitSamples {
    pub fn get(&self, which: SplitName) -> Vec<Sample> {
        match which {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
            SplitName::All => self.train.iter().chain(&self.val).chain(&self.test).cloned().collect(),
        }
    }
}

/// Splits `runs` by location and cuts samples with the configured point
/// selection and pair seed.
pub fn split_samples(runs: &[IndentationRun], config: &RunConfig) -> Result<SplitSamples> {
    let split = split_by_location(runs, &config.split)?;
    let selection = config.point_selection()?;
    let rng = Rng::new(config.data.pair_seed);
    let cut = |r: &[IndentationRun]| build_modes_with(r, &rng, &selection).map(|m| m.combined());
    Ok(SplitSamples { train: cut(&split.train)?, val: cut(&split.val)?, test: cut(&split.test)? })
}

/// Fresh weights drawn from the training seed.
pub fn init_weights(config: &RunConfig) -> Result<ModelWeights<f32>> {
    ModelWeights::init(&config.model, &mut Rng::new(config.train.seed).child(INIT_STREAM))
}

/// Trains on the training split, selecting on the validation split.
/// `init` continues from existing weights; otherwise training starts from
/// [`init_weights`].
pub fn train_on_runs(
    runs: &[IndentationRun],
    dataset_hash: &str,
    config: &RunConfig,
    init: Option<&ModelWeights<f32>>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainOutcome, ModelManifest)> {
    config.validate()?;
    let samples = split_samples(runs, config)?;
    if samples.train.is_empty() || samples.val.is_empty() {
        return Err(Error::Config("training and validation splits must both be non-empty".into()));
    }
    let weights = match init {
        Some(w) => ModelWeights::from_named(&config.model, w.to_named())?,
        None => init_weights(config)?,
    };
    let outcome = train(&samples.train, &samples.val, &config.train, &config.model, weights, on_epoch)?;
    let manifest = ModelManifest {
        format_version: MANIFEST_VERSION,
        checkpoint: String::new(),
        checkpoint_sha256: String::new(),
        dataset_hash: dataset_hash.to_string(),
        markers_per_side: config.data.markers_per_side,
        mode: config.train.mode,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        model: config.model.clone(),
        train: config.train.clone(),
    };
    Ok((outcome, manifest))
}

/// Metrics of `weights` on one split, or of the zero-motion baseline when
/// `weights` is `None`.
pub fn evaluate_runs(
    runs: &[IndentationRun],
    config: &RunConfig,
    which: SplitName,
    weights: Option<&ModelWeights<f32>>,
) -> Result<Metrics> {
    let samples = split_samples(runs, config)?.get(which);
    match weights {
        Some(w) => evaluate(&samples, w, &config.model),
        None => evaluate_identity(&samples),
    }
}
