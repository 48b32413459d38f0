//! Versioned binary checkpoints: config echo, seed, epoch, every parameter
//! array in float64, optimizer accumulators, and the loss history. A resumed
//! run reproduces the uninterrupted one bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{
    DeformationEstimator, EstimatorBackend, GradientRms, LossRecord, RestorationConfig,
    RestorationState, RmsMomentum,
};
use crate::error::{CqcdError, Result};
use crate::restoration::remover::BlurRemover;

const MAGIC: &[u8; 8] = b"CQCDCKPT";
const VERSION: u32 = 1;

fn write_vec(out: &mut impl Write, data: &[f64]) -> Result<()> {
    out.write_u64::<LittleEndian>(data.len() as u64)?;
    for &v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_vec(input: &mut impl Read) -> Result<Vec<f64>> {
    let len = input.read_u64::<LittleEndian>()? as usize;
    if len > (1 << 28) {
        return Err(CqcdError::Numerical("implausible checkpoint block".into()));
    }
    let mut data = vec![0.0; len];
    for v in &mut data {
        *v = input.read_f64::<LittleEndian>()?;
    }
    Ok(data)
}

pub fn save_checkpoint(state: &RestorationState, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    let config = serde_json::to_vec(&state.config)
        .map_err(|e| CqcdError::Numerical(format!("config serialization: {e}")))?;
    out.write_u64::<LittleEndian>(config.len() as u64)?;
    out.write_all(&config)?;
    let (h, w, c) = state.frame_dims;
    for v in [h, w, c, state.frames, state.epoch, state.inversion_warnings] {
        out.write_u64::<LittleEndian>(v as u64)?;
    }
    out.write_u64::<LittleEndian>(state.history.len() as u64)?;
    for r in &state.history {
        out.write_u64::<LittleEndian>(r.epoch as u64)?;
        for v in [r.l_rec, r.l_dist, r.l_bc, r.l_de, r.l_br] {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    let est_blocks = state.estimator.blocks();
    out.write_u64::<LittleEndian>(est_blocks.len() as u64)?;
    for b in est_blocks {
        write_vec(&mut out, b)?;
    }
    let rem_blocks = state.remover.blocks();
    out.write_u64::<LittleEndian>(rem_blocks.len() as u64)?;
    for b in rem_blocks {
        write_vec(&mut out, b)?;
    }
    for stats in state.remover.running_stats() {
        write_vec(&mut out, stats.as_slice().unwrap())?;
    }
    out.write_u8(state.opt_estimator.warm as u8)?;
    write_vec(&mut out, &state.opt_estimator.v)?;
    out.write_u64::<LittleEndian>(state.opt_remover.t)?;
    write_vec(&mut out, &state.opt_remover.m)?;
    write_vec(&mut out, &state.opt_remover.v)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RestorationState> {
    let path = path.as_ref();
    let corrupt = |reason: String| CqcdError::CorruptFile {
        path: path.display().to_string(),
        reason,
    };
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| corrupt("short file".into()))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let config_len = input.read_u64::<LittleEndian>()? as usize;
    let mut config_buf = vec![0u8; config_len];
    input.read_exact(&mut config_buf)?;
    let config: RestorationConfig =
        serde_json::from_slice(&config_buf).map_err(|e| corrupt(format!("config: {e}")))?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = input.read_u64::<LittleEndian>()? as usize;
    }
    let [h, w, c, frames, epoch, inversion_warnings] = dims;

    let hist_len = input.read_u64::<LittleEndian>()? as usize;
    let mut history = Vec::with_capacity(hist_len.min(1 << 20));
    for _ in 0..hist_len {
        let epoch = input.read_u64::<LittleEndian>()? as usize;
        let mut vals = [0.0; 5];
        for v in &mut vals {
            *v = input.read_f64::<LittleEndian>()?;
        }
        history.push(LossRecord {
            epoch,
            l_rec: vals[0],
            l_dist: vals[1],
            l_bc: vals[2],
            l_de: vals[3],
            l_br: vals[4],
        });
    }

    let mut state = RestorationState::from_dims(config, (h, w, c), frames)?;
    let load_blocks = |input: &mut BufReader<File>, blocks: &mut Vec<&mut [f64]>| -> Result<()> {
        let count = input.read_u64::<LittleEndian>()? as usize;
        if count != blocks.len() {
            return Err(CqcdError::CorruptFile {
                path: String::new(),
                reason: format!("{count} parameter blocks, expected {}", blocks.len()),
            });
        }
        for b in blocks.iter_mut() {
            let data = read_vec(input)?;
            if data.len() != b.len() {
                return Err(CqcdError::CorruptFile {
                    path: String::new(),
                    reason: "parameter block length mismatch".into(),
                });
            }
            b.copy_from_slice(&data);
        }
        Ok(())
    };
    load_blocks(&mut input, &mut state.estimator.blocks_mut())?;
    load_blocks(&mut input, &mut state.remover.blocks_mut())?;
    let stats = (0..4)
        .map(|_| read_vec(&mut input).map(ndarray::Array1::from_vec))
        .collect::<Result<Vec<_>>>()?;
    state.remover.set_running_stats(stats)?;
    state.opt_estimator.warm = input.read_u8()? != 0;
    state.opt_estimator.v = read_vec(&mut input)?;
    state.opt_remover.t = input.read_u64::<LittleEndian>()?;
    state.opt_remover.m = read_vec(&mut input)?;
    state.opt_remover.v = read_vec(&mut input)?;
    if state.opt_estimator.v.len() != state.estimator.param_count()
        || state.opt_remover.v.len() != state.remover.param_count()
    {
        return Err(corrupt("optimizer state length mismatch".into()));
    }
    state.history = history;
    state.epoch = epoch;
    state.inversion_warnings = inversion_warnings;
    Ok(state)
}

impl RestorationState {
    /// Rebuilds an initialized state without a frame sequence; checkpoint
    /// loading fills the parameters afterwards.
    pub(crate) fn from_dims(
        config: RestorationConfig,
        frame_dims: (usize, usize, usize),
        frames: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = frame_dims;
        let pf = super::planes_per_frame(c, config.tf_level);
        let estimator = match config.backend {
            EstimatorBackend::Grid => DeformationEstimator::new_grid(
                frames,
                h,
                w,
                config.grid_spacing,
                config.displacement_scale,
            )?,
            EstimatorBackend::Conv => DeformationEstimator::new_conv(
                frames,
                h,
                w,
                pf,
                config.displacement_scale,
                config.seed ^ 0xE57A,
            )?,
        };
        let remover = BlurRemover::new(frames * pf, config.hidden_width, c, config.seed ^ 0x8B1F);
        let opt_estimator = GradientRms::new(estimator.param_count());
        let opt_remover = RmsMomentum::new(remover.param_count());
        Ok(Self {
            config,
            frame_dims,
            frames,
            estimator,
            remover,
            opt_estimator,
            opt_remover,
            history: Vec::new(),
            epoch: 0,
            inversion_warnings: 0,
        })
    }
}
