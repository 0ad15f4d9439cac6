//! Checkpoint directories: `manifest.json` plus one TSR1 blob per parameter
//! (and per batch-norm statistic vector).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Model, NetworkSpec};
use crate::tensor_core::{RunningStats, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<String>,
    pub batchnorm_layers: usize,
}

fn param_file(i: usize, name: &str) -> String {
    format!("{i:03}_{name}.tsr1")
}

pub fn save_checkpoint(model: &Model, dir: &Path, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = CheckpointManifest {
        spec: model.spec.clone(),
        seed: model.spec.seed,
        epoch,
        params: model.names.clone(),
        batchnorm_layers: model.bn_stats.len(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    for (i, (name, p)) in model.names.iter().zip(&model.params).enumerate() {
        p.save_tsr1(&dir.join(param_file(i, name)))?;
    }
    for (i, s) in model.bn_stats.iter().enumerate() {
        let c = s.mean.len();
        Tensor::new(vec![c], s.mean.clone())?.save_tsr1(&dir.join(format!("bn{i:02}_mean.tsr1")))?;
        Tensor::new(vec![c], s.var.clone())?.save_tsr1(&dir.join(format!("bn{i:02}_var.tsr1")))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let mpath = dir.join("manifest.json");
    if !mpath.exists() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        offset: 0,
        reason: e.to_string(),
    })?;
    let mut model = Model::build(&manifest.spec)?;
    if model.names != manifest.params {
        return Err(Error::Format {
            path: mpath,
            offset: 0,
            reason: "parameter list does not match the architecture".into(),
        });
    }
    for (i, name) in manifest.params.iter().enumerate() {
        let t = Tensor::load_tsr1(&dir.join(param_file(i, name)))?;
        if t.shape() != model.params[i].shape() {
            return Err(Error::shape(format!(
                "checkpoint parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.params[i].shape()
            )));
        }
        model.params[i] = t;
    }
    for i in 0..manifest.batchnorm_layers.min(model.bn_stats.len()) {
        let mean = Tensor::load_tsr1(&dir.join(format!("bn{i:02}_mean.tsr1")))?;
        let var = Tensor::load_tsr1(&dir.join(format!("bn{i:02}_var.tsr1")))?;
        model.bn_stats[i] = RunningStats {
            mean: mean.into_data(),
            var: var.into_data(),
        };
    }
    Ok((model, manifest))
}
