//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content                                        |
//! |-------|------------------------------------------------|
//! | 8     | magic `KCPLCKPT`                               |
//! | 4     | format version (`u32`, currently 1)            |
//! | 8     | header length `h` (`u64`)                      |
//! | h     | UTF-8 JSON header (see [`CheckpointHeader`])   |
//! | 8·n   | parameters, `f64`                              |
//! | 8·n   | Adam first moments, `f64`                      |
//! | 8·n   | Adam second moments, `f64`                     |
//!
//! `n` is `n_params` from the header. Floats are stored as raw bits, so a
//! save/load round trip is exact.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use kcplan_core::dataset::Normalizer;
use kcplan_core::denoiser::{Denoiser, DenoiserConfig, TrainState};

use crate::config::ScheduleConfig;

pub const MAGIC: &[u8; 8] = b"KCPLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DenoiserConfig,
    pub normalizer: Normalizer,
    pub step: u64,
    pub n_params: usize,
    pub schedule: ScheduleConfig,
}

pub fn save_checkpoint(path: &Path, state: &TrainState, schedule: &ScheduleConfig) -> Result<()> {
    let header = CheckpointHeader {
        config: state.config,
        normalizer: state.normalizer.clone(),
        step: state.step,
        n_params: state.params.len(),
        schedule: *schedule,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = crate::io::create(path)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for arr in [&state.params, &state.m, &state.v] {
        for x in arr.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainState, ScheduleConfig)> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut r = BufReader::new(f);
    let ctx = || format!("{}: truncated checkpoint", path.display());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).with_context(ctx)?;
    if &magic != MAGIC {
        bail!("{}: not a checkpoint file", path.display());
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).with_context(ctx)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        bail!("{}: unsupported checkpoint version {version}", path.display());
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).with_context(ctx)?;
    let hlen = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).with_context(ctx)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).with_context(|| format!("{}: bad checkpoint header", path.display()))?;
    let expected = Denoiser::new(header.config)
        .with_context(|| format!("{}: bad model config", path.display()))?
        .n_params();
    if expected != header.n_params {
        bail!(
            "{}: header declares {} parameters but the config needs {expected}",
            path.display(),
            header.n_params
        );
    }
    let mut read_arr = || -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 8 * header.n_params];
        r.read_exact(&mut buf).with_context(ctx)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    };
    let params = read_arr()?;
    let m = read_arr()?;
    let v = read_arr()?;
    let state = TrainState {
        config: header.config,
        params,
        m,
        v,
        step: header.step,
        normalizer: header.normalizer,
    };
    Ok((state, header.schedule))
}
