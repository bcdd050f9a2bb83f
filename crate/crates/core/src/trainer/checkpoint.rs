//! Checkpoint files: named parameter blocks with shapes and flat values,
//! optimizer moments, progress counters and the training configuration.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ConceptWorld;
use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, BLOCK_NAMES};
use crate::numerics::Matrix;

use super::config::TrainConfig;
use super::optim::Moments;
use super::step::TrainState;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const FORMAT_TAG: &str = "lgdea-checkpoint";

#[derive(Serialize, Deserialize)]
struct Block {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MomentBlock {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    format: String,
    config: TrainConfig,
    n_patches: usize,
    step: u64,
    phase: usize,
    epoch: usize,
    batch_cursor: usize,
    blocks: Vec<Block>,
    moments: Vec<MomentBlock>,
}

/// A loaded checkpoint with the configuration it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(
    state: &TrainState,
    config: &TrainConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let blocks = state
        .model
        .blocks()
        .into_iter()
        .map(|(name, m)| Block {
            name: name.into(),
            shape: [m.rows(), m.cols()],
            data: m.data().to_vec(),
        })
        .collect();
    let moments = BLOCK_NAMES
        .iter()
        .zip(&state.moments)
        .map(|(name, mo)| MomentBlock {
            name: (*name).into(),
            m: mo.m.data().to_vec(),
            v: mo.v.data().to_vec(),
        })
        .collect();
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        format: FORMAT_TAG.into(),
        config: config.clone(),
        n_patches: state.model.n_patches,
        step: state.step,
        phase: state.phase,
        epoch: state.epoch,
        batch_cursor: state.batch_cursor,
        blocks,
        moments,
    };
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let probe: serde_json::Value = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| Error::format(path, e.to_string()))?;
    match probe.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CHECKPOINT_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::format(
                path,
                format!("checkpoint schema_version {v}, expected {CHECKPOINT_SCHEMA_VERSION}"),
            ))
        }
        None => return Err(Error::format(path, "checkpoint lacks schema_version")),
    }
    let file: CheckpointFile =
        serde_json::from_value(probe).map_err(|e| Error::format(path, e.to_string()))?;
    if file.format != FORMAT_TAG {
        return Err(Error::format(
            path,
            format!("not a checkpoint ({})", file.format),
        ));
    }
    let state = restore(file.blocks, file.moments, file.n_patches, &file.config)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        config: file.config,
        state: TrainState {
            step: file.step,
            phase: file.phase,
            epoch: file.epoch,
            batch_cursor: file.batch_cursor,
            ..state
        },
    })
}

/// Loads a checkpoint and checks its blocks against the shapes `config`
/// implies for `world`; a mismatch names the offending block.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    config: &TrainConfig,
    world: &ConceptWorld,
) -> Result<Checkpoint> {
    let mut ck = load_checkpoint(path)?;
    ck.state.model.check_dims(&config.model_dims(world))?;
    ck.state.model.bank.tau_t = config.temperatures.tau_t;
    ck.state.model.bank.tau_p = config.temperatures.tau_p;
    Ok(ck)
}

fn restore(
    blocks: Vec<Block>,
    moments: Vec<MomentBlock>,
    n_patches: usize,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let names: Vec<&str> = blocks.iter().map(|b| b.name.as_str()).collect();
    if let Some(missing) = BLOCK_NAMES.iter().find(|n| !names.contains(n)) {
        return Err(Error::config(format!("checkpoint lacks block {missing}")));
    }
    if let Some(extra) = names.iter().find(|n| !BLOCK_NAMES.contains(n)) {
        return Err(Error::config(format!(
            "checkpoint has unknown block {extra}"
        )));
    }
    let mut mats = Vec::with_capacity(BLOCK_NAMES.len());
    for name in BLOCK_NAMES {
        let b = blocks
            .iter()
            .find(|b| b.name == name)
            .expect("presence checked");
        let m = Matrix::from_vec(b.shape[0], b.shape[1], b.data.clone())
            .map_err(|e| Error::config(format!("block {name}: {e}")))?;
        mats.push(m);
    }
    let shape = |i: usize| mats[i].shape();
    let dims = ModelDims {
        vocab: shape(0).0,
        d_pix: shape(2).0,
        n_patches,
        d: shape(0).1,
        d_v: shape(2).1,
        k: shape(11).0,
        l: shape(8).0,
    };
    let mut model = Model::init(&dims, cfg.temperatures.tau_t, cfg.temperatures.tau_p, 0)?;
    for ((name, slot), want) in model.blocks_mut().into_iter().zip(dims.block_shapes()) {
        let idx = BLOCK_NAMES
            .iter()
            .position(|n| *n == name)
            .expect("known block");
        if mats[idx].shape() != want {
            return Err(Error::config(format!(
                "block {name} has shape {:?}, expected {want:?}",
                mats[idx].shape()
            )));
        }
        *slot = mats[idx].clone();
    }

    let mut state = TrainState::from_model(model);
    for name in BLOCK_NAMES {
        let mo = moments
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks moments for {name}")))?;
        let idx = BLOCK_NAMES
            .iter()
            .position(|n| *n == name)
            .expect("known block");
        let (r, c) = mats[idx].shape();
        state.moments[idx] = Moments {
            m: Matrix::from_vec(r, c, mo.m.clone())
                .map_err(|e| Error::config(format!("moments of {name}: {e}")))?,
            v: Matrix::from_vec(r, c, mo.v.clone())
                .map_err(|e| Error::config(format!("moments of {name}: {e}")))?,
        };
    }
    Ok(state)
}
