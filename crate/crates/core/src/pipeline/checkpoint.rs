//! Versioned JSON checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, ParamSet};
use crate::sepnet::{ModelConfig, SepModel};
use crate::sod::{SodConfig, SodModel};

const FORMAT: &str = "unisep-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Envelope<C> {
    format: String,
    version: u32,
    kind: String,
    config: C,
    params: ParamSet,
    optimizer: Option<Adam>,
    /// Completed training epochs.
    epoch: usize,
}

#[derive(Debug, Clone)]
pub struct SepCheckpoint {
    pub model: SepModel,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SodHeader {
    sod: SodConfig,
    input_dim: usize,
}

#[derive(Debug, Clone)]
pub struct SodCheckpoint {
    pub model: SodModel,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
}

fn save<C: Serialize>(path: &Path, env: &Envelope<C>) -> Result<()> {
    // Written beside the target and renamed, so a crash never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(env)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn load<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<Envelope<C>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let env: Envelope<C> =
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if env.format != FORMAT || env.version != VERSION || env.kind != kind {
        return Err(Error::Data(format!(
            "{}: expected {FORMAT} v{VERSION} `{kind}`, found {} v{} `{}`",
            path.display(),
            env.format,
            env.version,
            env.kind
        )));
    }
    if env.params.tensors.iter().any(|t| t.shape().iter().product::<usize>() != t.data().len() || !t.is_finite()) {
        return Err(Error::Data(format!("{}: corrupt tensor", path.display())));
    }
    if let Some(a) = &env.optimizer {
        let sizes: Vec<usize> = env.params.tensors.iter().map(|t| t.numel()).collect();
        let fits = |m: &[Vec<f64>]| m.len() == sizes.len() && m.iter().zip(&sizes).all(|(v, n)| v.len() == *n);
        if !fits(&a.m) || !fits(&a.v) {
            return Err(Error::Data(format!("{}: optimizer state does not match parameters", path.display())));
        }
    }
    Ok(env)
}

pub fn save_sep_checkpoint(path: &Path, model: &SepModel, optimizer: Option<&Adam>, epoch: usize) -> Result<()> {
    save(
        path,
        &Envelope {
            format: FORMAT.into(),
            version: VERSION,
            kind: "separator".into(),
            config: model.config.clone(),
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
            epoch,
        },
    )
}

pub fn load_sep_checkpoint(path: &Path) -> Result<SepCheckpoint> {
    let env: Envelope<ModelConfig> = load(path, "separator")?;
    let model = SepModel::from_params(env.config, env.params).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(SepCheckpoint { model, optimizer: env.optimizer, epoch: env.epoch })
}

pub fn save_sod_checkpoint(path: &Path, model: &SodModel, optimizer: Option<&Adam>, epoch: usize) -> Result<()> {
    save(
        path,
        &Envelope {
            format: FORMAT.into(),
            version: VERSION,
            kind: "sod".into(),
            config: SodHeader { sod: model.config.clone(), input_dim: model.input_dim },
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
            epoch,
        },
    )
}

pub fn load_sod_checkpoint(path: &Path) -> Result<SodCheckpoint> {
    let env: Envelope<SodHeader> = load(path, "sod")?;
    let model = SodModel::from_params(env.config.sod, env.config.input_dim, env.params)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(SodCheckpoint { model, optimizer: env.optimizer, epoch: env.epoch })
}
