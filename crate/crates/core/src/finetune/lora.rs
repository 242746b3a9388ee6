//! Low-rank adapters: `W_eff = W + (alpha / r) · B · A`, with `A` (r × d_in)
//! drawn uniformly from ±`a_init_scale` and `B` (d_out × r) zero-initialized,
//! so an injected model starts out computing exactly what the base did.

use std::collections::BTreeSet;
use std::sync::Arc;

use glob::Pattern;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::dataset::Item;
use crate::error::{Error, Result};
use crate::model::{Adapters, Network, Params, Tensor, TrainableModel};

pub const LORA_A_SUFFIX: &str = ".lora_a";
pub const LORA_B_SUFFIX: &str = ".lora_b";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSpec {
    /// Glob patterns over parameter names; only matrices are adapted.
    pub target_patterns: Vec<String>,
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "default_a_init_scale")]
    pub a_init_scale: f64,
    /// Base parameters that stay trainable next to the adapters.
    #[serde(default)]
    pub trainable_patterns: Vec<String>,
}

fn default_a_init_scale() -> f64 {
    0.01
}

impl LoraSpec {
    pub fn new(target_patterns: &[&str], rank: usize, alpha: f64) -> Self {
        Self {
            target_patterns: target_patterns.iter().map(|s| s.to_string()).collect(),
            rank,
            alpha,
            a_init_scale: default_a_init_scale(),
            trainable_patterns: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.a_init_scale > 0.0) {
            return Err(Error::Config("LoRA alpha and a_init_scale must be positive".into()));
        }
        compile(&self.target_patterns)?;
        compile(&self.trainable_patterns)?;
        Ok(())
    }
}

fn compile(patterns: &[String]) -> Result<Vec<Pattern>> {
    patterns
        .iter()
        .map(|p| Pattern::new(p).map_err(|e| Error::Config(format!("bad pattern `{p}`: {e}"))))
        .collect()
}

fn matches_any(patterns: &[Pattern], name: &str) -> bool {
    patterns.iter().any(|p| p.matches(name))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraTarget {
    pub name: String,
    pub rank: usize,
    pub scale: f64,
    pub d_out: usize,
    pub d_in: usize,
}

impl LoraTarget {
    pub fn a_name(&self) -> String {
        format!("{}{LORA_A_SUFFIX}", self.name)
    }

    pub fn b_name(&self) -> String {
        format!("{}{LORA_B_SUFFIX}", self.name)
    }

    /// `W + scale · B · A`.
    fn effective(&self, w: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
        let (r, d_in) = (self.rank, self.d_in);
        let mut out = w.clone();
        for i in 0..self.d_out {
            for j in 0..d_in {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += b.data[i * r + k] * a.data[k * d_in + j];
                }
                out.data[i * d_in + j] += self.scale * acc;
            }
        }
        out
    }
}

/// Wraps a base network, substituting adapted weights on every call.
struct LoraNetwork {
    base: Arc<dyn Network>,
    targets: Vec<LoraTarget>,
}

impl LoraNetwork {
    fn base_params(&self, params: &Params) -> Result<Params> {
        let adapter_names: BTreeSet<String> = self.targets.iter().flat_map(|t| [t.a_name(), t.b_name()]).collect();
        let mut base: Params = params
            .iter()
            .filter(|(k, _)| !adapter_names.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for t in &self.targets {
            let get = |n: &str| {
                params
                    .get(n)
                    .ok_or_else(|| Error::SchemaError(format!("missing LoRA parameter `{n}`")))
            };
            let w_eff = t.effective(get(&t.name)?, get(&t.a_name())?, get(&t.b_name())?);
            base.insert(t.name.clone(), w_eff);
        }
        Ok(base)
    }
}

impl Network for LoraNetwork {
    fn loss_and_grads(&self, params: &Params, batch: &[Item]) -> Result<(f64, Params)> {
        let base_params = self.base_params(params)?;
        let (loss, mut grads) = self.base.loss_and_grads(&base_params, batch)?;
        for t in &self.targets {
            let (r, d_in, d_out) = (t.rank, t.d_in, t.d_out);
            let a = &params[&t.a_name()];
            let b = &params[&t.b_name()];
            let Some(dw) = grads.get(&t.name) else {
                continue;
            };
            // dA = scale · Bᵀ · dW ; dB = scale · dW · Aᵀ
            let mut da = vec![0.0; r * d_in];
            let mut db = vec![0.0; d_out * r];
            for i in 0..d_out {
                for j in 0..d_in {
                    let g = dw.data[i * d_in + j];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..r {
                        da[k * d_in + j] += t.scale * b.data[i * r + k] * g;
                        db[i * r + k] += t.scale * g * a.data[k * d_in + j];
                    }
                }
            }
            grads.insert(t.a_name(), Tensor::from_vec(&[r, d_in], da)?);
            grads.insert(t.b_name(), Tensor::from_vec(&[d_out, r], db)?);
        }
        Ok((loss, grads))
    }

    fn predict(&self, params: &Params, item: &Item) -> Result<String> {
        self.base.predict(&self.base_params(params)?, item)
    }

    fn metrics(&self, params: &Params, batch: &[Item]) -> Result<std::collections::BTreeMap<String, f64>> {
        self.base.metrics(&self.base_params(params)?, batch)
    }
}

/// Adds adapters to every matrix matched by `spec.target_patterns` and
/// freezes all base parameters except those in `spec.trainable_patterns`.
pub fn inject_lora(model: &TrainableModel, spec: &LoraSpec, seed: u64) -> Result<TrainableModel> {
    spec.validate()?;
    if model.is_adapted() {
        return Err(Error::Config("model already carries LoRA adapters".into()));
    }
    let targets_pat = compile(&spec.target_patterns)?;
    let keep_pat = compile(&spec.trainable_patterns)?;
    let scale = spec.alpha / spec.rank as f64;

    let targets: Vec<LoraTarget> = model
        .params
        .iter()
        .filter(|(name, t)| t.is_matrix() && matches_any(&targets_pat, name))
        .map(|(name, t)| LoraTarget {
            name: name.clone(),
            rank: spec.rank,
            scale,
            d_out: t.rows(),
            d_in: t.cols(),
        })
        .collect();
    if targets.is_empty() {
        return Err(Error::NoTargetsMatched(spec.target_patterns.clone()));
    }

    let mut rng = Pcg64::seed_from_u64(seed);
    let mut params = model.params.clone();
    for t in &targets {
        let a = (0..t.rank * t.d_in)
            .map(|_| rng.random_range(-spec.a_init_scale..=spec.a_init_scale))
            .collect();
        params.insert(t.a_name(), Tensor::from_vec(&[t.rank, t.d_in], a)?);
        params.insert(t.b_name(), Tensor::zeros(&[t.d_out, t.rank]));
    }

    let frozen = model
        .params
        .keys()
        .filter(|name| !matches_any(&keep_pat, name))
        .cloned()
        .collect();

    Ok(TrainableModel {
        params,
        frozen,
        network: Arc::new(LoraNetwork {
            base: model.network.clone(),
            targets: targets.clone(),
        }),
        adapters: Some(Adapters {
            base: model.network.clone(),
            targets,
            frozen_before: model.frozen.clone(),
        }),
    })
}

/// Folds the adapters into their base matrices and returns a plain model.
pub fn merge_lora(model: &TrainableModel) -> Result<TrainableModel> {
    let adapters = model.adapters.as_ref().ok_or(Error::NotAdapted)?;
    let mut params = model.params.clone();
    for t in &adapters.targets {
        let a = params.remove(&t.a_name()).ok_or(Error::NotAdapted)?;
        let b = params.remove(&t.b_name()).ok_or(Error::NotAdapted)?;
        let w = params.get(&t.name).ok_or(Error::NotAdapted)?;
        let merged = t.effective(w, &a, &b);
        params.insert(t.name.clone(), merged);
    }
    Ok(TrainableModel {
        params,
        frozen: adapters.frozen_before.clone(),
        network: adapters.base.clone(),
        adapters: None,
    })
}

/// Marks every parameter matching one of `patterns` as frozen.
pub fn freeze(model: &mut TrainableModel, patterns: &[&str]) -> Result<()> {
    let pats = compile(&patterns.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    let names: Vec<String> = model.params.keys().filter(|n| matches_any(&pats, n)).cloned().collect();
    model.frozen.extend(names);
    Ok(())
}

pub fn unfreeze(model: &mut TrainableModel, patterns: &[&str]) -> Result<()> {
    let pats = compile(&patterns.iter().map(|s| s.to_string()).collect::<Vec<_>>())?;
    model.frozen.retain(|n| !matches_any(&pats, n));
    Ok(())
}

/// Element count of all unfrozen parameters.
pub fn count_trainable(model: &TrainableModel) -> usize {
    model
        .params
        .iter()
        .filter(|(name, _)| model.is_trainable(name))
        .map(|(_, t)| t.numel())
        .sum()
}
