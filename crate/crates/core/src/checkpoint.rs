//! JSON checkpoints: a manifest describing how the parameters were produced
//! plus every named tensor. Floats are written in shortest round-trip form,
//! so save followed by load reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Protocol;
use crate::error::{Error, Result};
use crate::eval::Trained;
use crate::model::{Model, ModelConfig};
use crate::params::ParameterStore;
use crate::series::Normalizer;
use crate::tensor::Tensor2;
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
    pub normalizer: Normalizer,
    pub seed: u64,
    pub num_parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub manifest: Manifest,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(trained: &Trained, train: TrainConfig, protocol: Protocol) -> Self {
        let p = trained.model.params();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                model: *trained.model.config(),
                train,
                protocol,
                normalizer: trained.normalizer,
                seed: train.seed,
                num_parameters: p.num_scalars(),
            },
            tensors: p
                .ids()
                .map(|id| {
                    let v = p.value(id);
                    TensorRecord {
                        name: p.name(id).to_string(),
                        rows: v.rows(),
                        cols: v.cols(),
                        data: v.data().to_vec(),
                    }
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        if ck.manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                ck.manifest.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds the model. With `expected`, every architecture field must
    /// match the manifest.
    pub fn into_trained(self, expected: Option<&ModelConfig>) -> Result<Trained> {
        let cfg = self.manifest.model;
        if let Some(want) = expected {
            let mismatch = [
                ("variant", cfg.variant.to_string(), want.variant.to_string()),
                ("lookback", cfg.lookback.to_string(), want.lookback.to_string()),
                ("attr_dim", cfg.attr_dim.to_string(), want.attr_dim.to_string()),
                ("hidden", cfg.hidden.to_string(), want.hidden.to_string()),
                ("gn_layers", cfg.gn_layers.to_string(), want.gn_layers.to_string()),
                ("gru_input_width", cfg.gru_input_width.to_string(), want.gru_input_width.to_string()),
                ("aggregation", format!("{:?}", cfg.aggregation), format!("{:?}", want.aggregation)),
            ]
            .into_iter()
            .find(|(_, have, want)| have != want);
            if let Some((field, have, want)) = mismatch {
                return Err(Error::Config(format!(
                    "checkpoint manifest has {field} = {have}, configuration requires {want}"
                )));
            }
        }
        let mut store = ParameterStore::new();
        for t in self.tensors {
            store.add(t.name, Tensor2::from_vec(t.rows, t.cols, t.data)?)?;
        }
        if store.num_scalars() != self.manifest.num_parameters {
            return Err(Error::Config(format!(
                "checkpoint holds {} values, manifest declares {}",
                store.num_scalars(),
                self.manifest.num_parameters
            )));
        }
        Ok(Trained {
            model: Model::from_params(cfg, store)?,
            normalizer: self.manifest.normalizer,
        })
    }
}
