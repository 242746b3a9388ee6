//! The model contract the trainer is generic over.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::Item;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::SchemaError(format!(
                "shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

pub type Params = BTreeMap<String, Tensor>;

/// Forward/backward behaviour of a model. Parameters live outside, in
/// [`TrainableModel::params`], so the trainer owns all mutable state.
pub trait Network: Send + Sync {
    /// Mean loss over `batch` and its gradient for (a subset of) `params`.
    fn loss_and_grads(&self, params: &Params, batch: &[Item]) -> Result<(f64, Params)>;

    fn predict(&self, params: &Params, item: &Item) -> Result<String>;

    /// Batch-mean metrics besides the loss, e.g. `accuracy`.
    fn metrics(&self, _params: &Params, _batch: &[Item]) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

/// State needed to undo a LoRA injection.
#[derive(Clone)]
pub(crate) struct Adapters {
    pub base: Arc<dyn Network>,
    pub targets: Vec<crate::finetune::lora::LoraTarget>,
    pub frozen_before: BTreeSet<String>,
}

#[derive(Clone)]
pub struct TrainableModel {
    pub params: Params,
    /// Names whose gradients the trainer discards.
    pub frozen: BTreeSet<String>,
    pub network: Arc<dyn Network>,
    pub(crate) adapters: Option<Adapters>,
}

impl fmt::Debug for TrainableModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrainableModel")
            .field(
                "params",
                &self.params.iter().map(|(k, t)| (k, &t.shape)).collect::<Vec<_>>(),
            )
            .field("frozen", &self.frozen)
            .field("adapted", &self.adapters.is_some())
            .finish()
    }
}

impl TrainableModel {
    pub fn new(network: Arc<dyn Network>, params: Params) -> Self {
        Self {
            params,
            frozen: BTreeSet::new(),
            network,
            adapters: None,
        }
    }

    pub fn loss_and_grads(&self, batch: &[Item]) -> Result<(f64, Params)> {
        self.network.loss_and_grads(&self.params, batch)
    }

    pub fn predict(&self, item: &Item) -> Result<String> {
        self.network.predict(&self.params, item)
    }

    pub fn is_adapted(&self) -> bool {
        self.adapters.is_some()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }
}
