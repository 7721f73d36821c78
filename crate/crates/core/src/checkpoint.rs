//! Checkpoint directories: `manifest.json`, `params.bin`, `optimizer.bin`.
//!
//! Binary files hold little-endian `f64` arrays in parameter registration
//! order. The optimizer file starts with the step counter as a `u64`,
//! followed by all first moments and then all second moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{DpgError, Result};
use crate::network::{Model, ModelConfig, ParameterSet};
use crate::optim::Adam;
use crate::tensor::Mat;
use crate::trainer::{TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub code_version: String,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub global_step: usize,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub params: Vec<ParamShape>,
}

fn write_f64s(path: &Path, header: Option<u64>, mats: &[&Mat]) -> Result<()> {
    let n: usize = mats.iter().map(|m| m.len()).sum();
    let mut buf = Vec::with_capacity(8 * (n + 1));
    if let Some(h) = header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for m in mats {
        for v in &m.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| DpgError::io(path, e))
}

fn read_f64s(path: &Path, shapes: &[(usize, usize)], with_header: bool) -> Result<(Option<u64>, Vec<Mat>)> {
    let bytes = fs::read(path).map_err(|e| DpgError::io(path, e))?;
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let expected = 8 * (n + with_header as usize);
    if bytes.len() != expected {
        return Err(DpgError::Checkpoint(format!(
            "{} holds {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut words = bytes.chunks_exact(8).map(|c| <[u8; 8]>::try_from(c).expect("8-byte chunk"));
    let header = with_header.then(|| u64::from_le_bytes(words.next().expect("header word")));
    let mats = shapes
        .iter()
        .map(|&(r, c)| Mat::from_vec(r, c, words.by_ref().take(r * c).map(f64::from_le_bytes).collect()))
        .collect();
    Ok((header, mats))
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| DpgError::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| DpgError::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(DpgError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            m.format_version
        )));
    }
    if m.schedule != m.model.schedule() {
        return Err(DpgError::Checkpoint(format!(
            "{}: schedule does not match the model configuration",
            path.display()
        )));
    }
    Ok(m)
}

pub fn save_params(dir: &Path, params: &ParameterSet) -> Result<()> {
    let refs: Vec<&Mat> = params.values.iter().collect();
    write_f64s(&dir.join("params.bin"), None, &refs)
}

/// Writes a resumable checkpoint of `state` into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, train: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpgError::io(dir, e))?;
    let p = &state.model.params;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        model: state.model.cfg.clone(),
        schedule: state.model.cfg.schedule(),
        train: train.clone(),
        global_step: state.global_step,
        epoch: state.epoch,
        best_metric: state.best_metric,
        best_epoch: state.best_epoch,
        params: p
            .names
            .iter()
            .zip(&p.values)
            .map(|(n, v)| ParamShape {
                name: n.clone(),
                rows: v.rows,
                cols: v.cols,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| DpgError::Checkpoint(e.to_string()))?;
    let mpath = dir.join("manifest.json");
    fs::write(&mpath, json + "\n").map_err(|e| DpgError::io(&mpath, e))?;
    save_params(dir, p)?;
    let moments: Vec<&Mat> = state.opt.m.iter().chain(&state.opt.v).collect();
    write_f64s(&dir.join("optimizer.bin"), Some(state.opt.t), &moments)?;
    if let Some(best) = &state.best_params {
        let bdir = dir.join("best");
        fs::create_dir_all(&bdir).map_err(|e| DpgError::io(&bdir, e))?;
        save_params(&bdir, best)?;
    }
    Ok(())
}

fn shapes_of(manifest: &CheckpointManifest) -> Vec<(usize, usize)> {
    manifest.params.iter().map(|s| (s.rows, s.cols)).collect()
}

fn load_model_from(dir: &Path, manifest: &CheckpointManifest, params_dir: &Path) -> Result<Model> {
    let shapes = shapes_of(manifest);
    let (_, values) = read_f64s(&params_dir.join("params.bin"), &shapes, false)?;
    let names = manifest.params.iter().map(|s| s.name.clone()).collect();
    let model = Model::from_parts(manifest.model.clone(), ParameterSet { names, values })
        .map_err(|e| DpgError::Checkpoint(format!("{}: {e}", dir.display())))?;
    if !model.params.is_finite() {
        return Err(DpgError::Checkpoint(format!("{}: non-finite parameters", dir.display())));
    }
    Ok(model)
}

/// Loads the model of a checkpoint; `best` selects the best validated
/// parameters when they were saved.
pub fn load_model(dir: &Path, best: bool) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let bdir = dir.join("best");
    let pdir = if best && bdir.join("params.bin").exists() { bdir } else { dir.to_path_buf() };
    load_model_from(dir, &manifest, &pdir)
}

/// Restores a resumable training state and its training configuration.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let manifest = read_manifest(dir)?;
    let model = load_model_from(dir, &manifest, dir)?;
    let shapes = shapes_of(&manifest);
    let doubled: Vec<(usize, usize)> = shapes.iter().chain(&shapes).copied().collect();
    let (t, mut moments) = read_f64s(&dir.join("optimizer.bin"), &doubled, true)?;
    let v = moments.split_off(shapes.len());
    let opt = Adam {
        cfg: manifest.train.adam(),
        t: t.expect("header read"),
        m: moments,
        v,
    };
    let bpath = dir.join("best").join("params.bin");
    let best_params = if bpath.exists() {
        let (_, values) = read_f64s(&bpath, &shapes, false)?;
        Some(ParameterSet {
            names: model.params.names.clone(),
            values,
        })
    } else {
        None
    };
    Ok((
        TrainState {
            model,
            opt,
            global_step: manifest.global_step,
            epoch: manifest.epoch,
            best_metric: manifest.best_metric,
            best_epoch: manifest.best_epoch,
            best_params,
        },
        manifest.train,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Variant;

    #[test]
    fn round_trip_is_bitwise() {
        let cfg = ModelConfig {
            d: 4,
            n_heads: 1,
            max_seq_len: 4,
            diffusion_steps: 5,
            vocab_x: 6,
            vocab_y: 5,
            variant: Variant::Full,
            ..ModelConfig::default()
        };
        let train = TrainConfig::default();
        let mut state = TrainState::new(&cfg, &train).unwrap();
        state.opt.t = 7;
        state.opt.m[0].data[1] = 0.125;
        state.global_step = 7;
        state.best_params = Some(state.model.params.clone());
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &state, &train).unwrap();
        let (back, tc) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back, state);
        assert_eq!(tc, train);
        assert_eq!(load_model(dir.path(), true).unwrap(), state.model);

        fs::write(dir.path().join("params.bin"), [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(DpgError::Checkpoint(_))));
    }
}
