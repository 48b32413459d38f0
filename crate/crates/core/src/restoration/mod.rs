//! The circular restoration optimizer.
//!
//! Per epoch: estimate per-frame deformation fields, warp the frames into
//! geometric agreement, feed tight-frame features of the warped frames to the
//! pixel-wise blur remover to fuse one restored image, invert the fields, and
//! re-distort the restoration back toward every input frame. The deformation
//! estimator minimizes `L_DE = L_dist + L_rec + lambda * L_bc`; the blur
//! remover minimizes `L_BR = L_dist + L_rec`; the two groups alternate in
//! fixed-length phases. Inverse fields are recomputed every epoch but treated
//! as constants by backpropagation.

mod checkpoint;
pub mod estimator;
mod linalg;
pub mod losses;
pub mod optimizer;
pub mod remover;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use estimator::{DeformationEstimator, EstimatorBackend, EstimatorCache};
pub use losses::{loss_dist, loss_rec};
pub use optimizer::{GradientRms, RmsMomentum};
pub use remover::{BlurRemover, NormMode};

use crate::error::{CqcdError, Result};
use crate::field::DisplacementField;
use crate::imaging::{warp, FrameSequence, Image};
use crate::quasiconformal::{bc_term, bc_term_with_grad, diagnostics, invert_field, MapDiagnostics};
use crate::tightframe::{
    build_filter_bank, feature_stack, feature_stack_adjoint, planes_per_channel, FilterBank,
};

/// All knobs of one restoration run. `tf_level = 0` feeds raw intensities to
/// the remover instead of tight-frame subbands (the ablation switch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationConfig {
    pub backend: EstimatorBackend,
    pub grid_spacing: usize,
    pub displacement_scale: f64,
    pub tf_level: usize,
    pub lambda_bc: f64,
    pub total_epochs: usize,
    pub phase_len: usize,
    pub lr_estimator: f64,
    pub lr_remover: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub hidden_width: usize,
    pub seed: u64,
    pub early_stop_window: usize,
    pub early_stop_rel: f64,
    pub invert_tol: f64,
    pub invert_max_iter: usize,
}

impl Default for RestorationConfig {
    fn default() -> Self {
        Self {
            backend: EstimatorBackend::Grid,
            grid_spacing: 8,
            displacement_scale: 10.0,
            tf_level: 1,
            lambda_bc: 0.1,
            total_epochs: 1000,
            phase_len: 50,
            lr_estimator: 1e-2,
            lr_remover: 1e-3,
            lr_decay_every: 250,
            lr_decay_factor: 0.5,
            hidden_width: 256,
            seed: 0,
            early_stop_window: 100,
            early_stop_rel: 1e-5,
            invert_tol: crate::quasiconformal::DEFAULT_INVERT_TOL,
            invert_max_iter: crate::quasiconformal::DEFAULT_INVERT_MAX_ITER,
        }
    }
}

impl RestorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bc < 0.0 {
            return Err(CqcdError::InvalidArgument("lambda must be >= 0".into()));
        }
        if self.tf_level > 3 {
            return Err(CqcdError::InvalidArgument("tf level must be 0..=3".into()));
        }
        if self.total_epochs == 0 || self.phase_len == 0 {
            return Err(CqcdError::InvalidArgument(
                "epoch and phase counts must be positive".into(),
            ));
        }
        if self.grid_spacing == 0 {
            return Err(CqcdError::InvalidArgument("grid spacing must be positive".into()));
        }
        if self.displacement_scale <= 0.0 {
            return Err(CqcdError::InvalidArgument(
                "displacement scale must be positive".into(),
            ));
        }
        if self.lr_estimator <= 0.0 || self.lr_remover <= 0.0 || self.lr_decay_factor <= 0.0 {
            return Err(CqcdError::InvalidArgument("learning rates must be positive".into()));
        }
        if self.hidden_width == 0 || self.lr_decay_every == 0 {
            return Err(CqcdError::InvalidArgument(
                "hidden width and decay interval must be positive".into(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_dist: f64,
    pub l_bc: f64,
    pub l_de: f64,
    pub l_br: f64,
}

/// Everything optimizable plus the loss history; serializable for resume.
#[derive(Debug, Clone)]
pub struct RestorationState {
    pub config: RestorationConfig,
    pub frame_dims: (usize, usize, usize),
    pub frames: usize,
    pub estimator: DeformationEstimator,
    pub remover: BlurRemover,
    pub opt_estimator: GradientRms,
    pub opt_remover: RmsMomentum,
    pub history: Vec<LossRecord>,
    pub epoch: usize,
    pub inversion_warnings: usize,
}

fn planes_per_frame(channels: usize, tf_level: usize) -> usize {
    if tf_level == 0 {
        channels
    } else {
        channels * planes_per_channel(tf_level)
    }
}

impl RestorationState {
    pub fn new(config: RestorationConfig, seq: &FrameSequence) -> Result<Self> {
        let (h, w, _) = seq.frame_dim();
        if seq.len() < 2 {
            return Err(CqcdError::InvalidArgument(
                "restoration needs at least two frames".into(),
            ));
        }
        if h < 8 || w < 8 {
            return Err(CqcdError::InvalidArgument(format!(
                "frames {h}x{w} below the 8x8 minimum"
            )));
        }
        Self::from_dims(config, seq.frame_dim(), seq.len())
    }
}

/// Result of an [`optimize`] run.
#[derive(Debug)]
pub struct RestorationOutcome {
    pub restored: Image,
    pub fields: Vec<DisplacementField>,
    pub inverse_fields: Vec<DisplacementField>,
    pub field_diagnostics: Vec<MapDiagnostics>,
    pub inverse_diagnostics: Vec<MapDiagnostics>,
    pub final_losses: LossRecord,
    pub early_stopped: bool,
    pub state: RestorationState,
}

/// Loss components at the current parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_dist: f64,
    pub l_bc: f64,
    pub l_de: f64,
    pub l_br: f64,
}

struct EpochForward {
    fields: Vec<DisplacementField>,
    est_cache: EstimatorCache,
    warped: FrameSequence,
    remover_cache: remover::RemoverCache,
    istar: Image,
    inverses: Vec<DisplacementField>,
    unconverged: usize,
    redistorted: FrameSequence,
    l_rec: f64,
    l_dist: f64,
    l_bc: f64,
}

impl EpochForward {
    fn l_de(&self, lambda: f64) -> f64 {
        self.l_dist + self.l_rec + lambda * self.l_bc
    }

    fn l_br(&self) -> f64 {
        self.l_dist + self.l_rec
    }
}

/// Shared per-run context: the inputs, the filter bank, and (for the conv
/// backend) the features of the input frames, which never change.
struct PipelineCtx<'a> {
    config: &'a RestorationConfig,
    seq: &'a FrameSequence,
    bank: FilterBank,
    est_features: Option<Vec<Vec<Array2<f64>>>>,
}

fn frame_planes(img: &Image, tf_level: usize, bank: &FilterBank) -> Result<Vec<Array2<f64>>> {
    if tf_level == 0 {
        Ok((0..img.channels()).map(|c| img.channel_plane(c)).collect())
    } else {
        feature_stack(img, tf_level, bank)
    }
}

fn assemble_x(stacks: &[Vec<Array2<f64>>]) -> Array2<f64> {
    let (h, w) = stacks[0][0].dim();
    let per_frame = stacks[0].len();
    let mut x = Array2::zeros((h * w, stacks.len() * per_frame));
    for (t, stack) in stacks.iter().enumerate() {
        for (p, plane) in stack.iter().enumerate() {
            let col = t * per_frame + p;
            for y in 0..h {
                for xx in 0..w {
                    x[(y * w + xx, col)] = plane[(y, xx)];
                }
            }
        }
    }
    x
}

fn column_to_plane(x: &Array2<f64>, col: usize, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, xx)| x[(y * w + xx, col)])
}

fn image_grad_rows(g: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = g.dim();
    let mut out = Array2::zeros((h * w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x, ch)] = g[(y, x, ch)];
            }
        }
    }
    out
}

impl<'a> PipelineCtx<'a> {
    fn new(config: &'a RestorationConfig, seq: &'a FrameSequence) -> Result<Self> {
        let bank = build_filter_bank();
        let est_features = match config.backend {
            EstimatorBackend::Conv => Some(
                seq.frames()
                    .iter()
                    .map(|f| frame_planes(f, config.tf_level, &bank))
                    .collect::<Result<Vec<_>>>()?,
            ),
            EstimatorBackend::Grid => None,
        };
        Ok(Self {
            config,
            seq,
            bank,
            est_features,
        })
    }

    fn forward(
        &self,
        est: &DeformationEstimator,
        rem: &BlurRemover,
        frozen_inverses: Option<&[DisplacementField]>,
    ) -> Result<EpochForward> {
        let (fields, est_cache) = est.forward(self.est_features.as_deref())?;
        let t_count = self.seq.len();

        let warped: Vec<Image> = crate::parallel::install(|| {
            self.seq
                .frames()
                .par_iter()
                .zip(fields.par_iter())
                .map(|(frame, field)| warp(frame, field))
                .collect::<Result<Vec<_>>>()
        })?;
        let stacks: Vec<Vec<Array2<f64>>> = crate::parallel::install(|| {
            warped
                .par_iter()
                .map(|img| frame_planes(img, self.config.tf_level, &self.bank))
                .collect::<Result<Vec<_>>>()
        })?;
        let x = assemble_x(&stacks);
        let (rows, remover_cache) = rem.forward(&x, NormMode::Batch)?;
        let (h, w, _) = self.seq.frame_dim();
        let istar = remover::rows_to_image(&rows, h, w)?;

        let (inverses, unconverged) = match frozen_inverses {
            Some(g) => (g.to_vec(), 0),
            None => {
                let results: Vec<_> = crate::parallel::install(|| {
                    fields
                        .par_iter()
                        .map(|f| invert_field(f, self.config.invert_tol, self.config.invert_max_iter))
                        .collect()
                });
                let unconverged = results.iter().filter(|r| !r.converged).count();
                (results.into_iter().map(|r| r.field).collect(), unconverged)
            }
        };
        let redistorted: Vec<Image> = crate::parallel::install(|| {
            inverses
                .par_iter()
                .map(|g| warp(&istar, g))
                .collect::<Result<Vec<_>>>()
        })?;

        let warped = FrameSequence::new(warped)?;
        let redistorted = FrameSequence::new(redistorted)?;
        let l_rec = loss_rec(&istar, &warped)?;
        let l_dist = loss_dist(self.seq, &redistorted)?;
        let bc_total: f64 = fields
            .iter()
            .map(bc_term)
            .chain(inverses.iter().map(bc_term))
            .sum();
        let l_bc = bc_total / (4.0 * t_count as f64);
        Ok(EpochForward {
            fields,
            est_cache,
            warped,
            remover_cache,
            istar,
            inverses,
            unconverged,
            redistorted,
            l_rec,
            l_dist,
            l_bc,
        })
    }

    /// Cotangent of the restored image from both fidelity terms.
    fn istar_grad(&self, fwd: &EpochForward) -> Result<(Array3<f64>, Vec<Array3<f64>>)> {
        let (_, d_istar_rec, d_warped) = losses::loss_rec_with_grads(&fwd.istar, &fwd.warped)?;
        let (_, d_redist) = losses::loss_dist_with_grad(self.seq, &fwd.redistorted)?;
        let mut d_istar = d_istar_rec;
        for (g, inv) in d_redist.iter().zip(fwd.inverses.iter()) {
            d_istar += &losses::warp_backward_image(inv, g);
        }
        Ok((d_istar, d_warped))
    }

    /// `dL_DE/d(estimator params)`, flattened per block.
    fn estimator_grads(
        &self,
        fwd: &EpochForward,
        est: &DeformationEstimator,
        rem: &BlurRemover,
    ) -> Result<Vec<Vec<f64>>> {
        let (h, w, c) = self.seq.frame_dim();
        let (d_istar, d_warped_rec) = self.istar_grad(fwd)?;
        let (dx, _) = rem.backward(&fwd.remover_cache, &image_grad_rows(&d_istar), true, false);
        let dx = dx.expect("input gradient requested");
        let per_frame = planes_per_frame(c, self.config.tf_level);

        let dfields: Vec<DisplacementField> = crate::parallel::install(|| {
            (0..self.seq.len())
                .into_par_iter()
                .map(|t| {
                    // cotangent of warped frame t through the remover input ...
                    let planes: Vec<Array2<f64>> = (0..per_frame)
                        .map(|p| column_to_plane(&dx, t * per_frame + p, h, w))
                        .collect();
                    let channel_planes = if self.config.tf_level == 0 {
                        planes
                    } else {
                        feature_stack_adjoint(&planes, self.config.tf_level, c, &self.bank)?
                    };
                    let mut d_warped = Array3::zeros((h, w, c));
                    for (ch, plane) in channel_planes.iter().enumerate() {
                        for y in 0..h {
                            for x in 0..w {
                                d_warped[(y, x, ch)] = plane[(y, x)];
                            }
                        }
                    }
                    // ... plus the direct reconstruction term
                    d_warped += &d_warped_rec[t];
                    let mut dfield =
                        losses::warp_backward_field(self.seq.frame(t), &fwd.fields[t], &d_warped);
                    // forward BC term; the inverse term is stop-gradient
                    let (_, bc_grad) = bc_term_with_grad(&fwd.fields[t]);
                    let scale = self.config.lambda_bc / (4.0 * self.seq.len() as f64);
                    dfield.dx.scaled_add(scale, &bc_grad.dx);
                    dfield.dy.scaled_add(scale, &bc_grad.dy);
                    Ok(dfield)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        est.backward(&fwd.est_cache, &dfields)
    }

    /// `dL_BR/d(remover params)`, flattened.
    fn remover_grads(&self, fwd: &EpochForward, rem: &BlurRemover) -> Result<Vec<f64>> {
        let (d_istar, _) = self.istar_grad(fwd)?;
        let (_, grads) = rem.backward(&fwd.remover_cache, &image_grad_rows(&d_istar), false, true);
        Ok(grads.expect("weight gradients requested").flat())
    }
}

fn flatten(blocks: &[Vec<f64>]) -> Vec<f64> {
    blocks.iter().flatten().copied().collect()
}

/// Runs the alternating optimization from a fresh state.
pub fn optimize(config: &RestorationConfig, seq: &FrameSequence) -> Result<RestorationOutcome> {
    let state = RestorationState::new(config.clone(), seq)?;
    resume(state, seq)
}

/// Continues a (possibly checkpointed) state until `total_epochs` or early
/// stop, then reports the final forward pass.
pub fn resume(mut state: RestorationState, seq: &FrameSequence) -> Result<RestorationOutcome> {
    if seq.frame_dim() != state.frame_dims || seq.len() != state.frames {
        return Err(CqcdError::DimensionMismatch(
            "sequence does not match the state it was trained on".into(),
        ));
    }
    let config = state.config.clone();
    let ctx = PipelineCtx::new(&config, seq)?;
    let mut early_stopped = false;

    while state.epoch < config.total_epochs {
        let fwd = ctx.forward(&state.estimator, &state.remover, None)?;
        let record = LossRecord {
            epoch: state.epoch,
            l_rec: fwd.l_rec,
            l_dist: fwd.l_dist,
            l_bc: fwd.l_bc,
            l_de: fwd.l_de(config.lambda_bc),
            l_br: fwd.l_br(),
        };
        if !record.l_de.is_finite() || !record.l_br.is_finite() {
            return Err(CqcdError::Numerical(format!(
                "non-finite loss at epoch {}: rec={} dist={} bc={}",
                state.epoch, record.l_rec, record.l_dist, record.l_bc
            )));
        }
        state.history.push(record);
        state.inversion_warnings += fwd.unconverged;

        let estimator_phase = (state.epoch / config.phase_len) % 2 == 0;
        if estimator_phase {
            let grads = ctx.estimator_grads(&fwd, &state.estimator, &state.remover)?;
            let flat = flatten(&grads);
            let lr = config.lr_at(config.lr_estimator, state.epoch);
            let mut blocks = state.estimator.blocks_mut();
            state.opt_estimator.step(&mut blocks, &flat, lr);
        } else {
            let flat = ctx.remover_grads(&fwd, &state.remover)?;
            let lr = config.lr_at(config.lr_remover, state.epoch);
            let mut blocks = state.remover.blocks_mut();
            state.opt_remover.step(&mut blocks, &flat, lr);
            state.remover.update_running_stats(&fwd.remover_cache);
        }
        state.epoch += 1;

        if config.early_stop_window > 0 && state.history.len() > config.early_stop_window {
            let split = state.history.len() - config.early_stop_window;
            let best_prev = state.history[..split]
                .iter()
                .map(|r| r.l_de)
                .fold(f64::INFINITY, f64::min);
            let best_all = state
                .history
                .iter()
                .map(|r| r.l_de)
                .fold(f64::INFINITY, f64::min);
            if (best_prev - best_all) / best_prev.abs().max(1e-12) < config.early_stop_rel {
                early_stopped = true;
                break;
            }
        }
    }

    let fwd = ctx.forward(&state.estimator, &state.remover, None)?;
    let final_losses = LossRecord {
        epoch: state.epoch,
        l_rec: fwd.l_rec,
        l_dist: fwd.l_dist,
        l_bc: fwd.l_bc,
        l_de: fwd.l_de(config.lambda_bc),
        l_br: fwd.l_br(),
    };
    state.inversion_warnings += fwd.unconverged;
    Ok(RestorationOutcome {
        field_diagnostics: fwd.fields.iter().map(diagnostics).collect(),
        inverse_diagnostics: fwd.inverses.iter().map(diagnostics).collect(),
        restored: fwd.istar,
        fields: fwd.fields,
        inverse_fields: fwd.inverses,
        final_losses,
        early_stopped,
        state,
    })
}

/// Loss components of the current state on `seq`.
pub fn total_losses(state: &RestorationState, seq: &FrameSequence) -> Result<LossBreakdown> {
    let ctx = PipelineCtx::new(&state.config, seq)?;
    let fwd = ctx.forward(&state.estimator, &state.remover, None)?;
    Ok(LossBreakdown {
        l_rec: fwd.l_rec,
        l_dist: fwd.l_dist,
        l_bc: fwd.l_bc,
        l_de: fwd.l_de(state.config.lambda_bc),
        l_br: fwd.l_br(),
    })
}

/// One field per frame from the estimator (the public wrapper).
pub fn estimate_fields(
    est: &DeformationEstimator,
    features: &[Vec<Array2<f64>>],
) -> Result<Vec<DisplacementField>> {
    if features.len() != est.frames {
        return Err(CqcdError::DimensionMismatch(format!(
            "{} feature stacks for {} frames",
            features.len(),
            est.frames
        )));
    }
    let (fields, _) = est.forward(Some(features))?;
    Ok(fields)
}

/// Fuses feature stacks of warped frames into one image (the public wrapper
/// around the remover forward pass, batch statistics).
pub fn restore(rem: &BlurRemover, stacks: &[Vec<Array2<f64>>]) -> Result<Image> {
    if stacks.is_empty() || stacks[0].is_empty() {
        return Err(CqcdError::InvalidArgument("no feature planes".into()));
    }
    let (h, w) = stacks[0][0].dim();
    let x = assemble_x(stacks);
    let (rows, _) = rem.forward(&x, NormMode::Batch)?;
    remover::rows_to_image(&rows, h, w)
}

/// Mean and max endpoint error between two fields.
pub fn field_error(
    estimated: &DisplacementField,
    reference: &DisplacementField,
) -> Result<(f64, f64)> {
    if estimated.dim() != reference.dim() {
        return Err(CqcdError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            estimated.dim(),
            reference.dim()
        )));
    }
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for ((&ax, &ay), (&bx, &by)) in estimated
        .dx
        .iter()
        .zip(estimated.dy.iter())
        .zip(reference.dx.iter().zip(reference.dy.iter()))
    {
        let e = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
        sum += e;
        max = max.max(e);
    }
    Ok((sum / estimated.dx.len() as f64, max))
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Candidates discarded because a finite-difference step crossed a ReLU,
    /// absolute-value, or interpolation-cell kink.
    pub skipped: usize,
}

struct KinkSignature {
    relu: Vec<bool>,
    rec_signs: Vec<i8>,
    dist_signs: Vec<i8>,
    cells: Vec<u32>,
}

fn signature(seq: &FrameSequence, fwd: &EpochForward) -> KinkSignature {
    let sign = |v: f64| -> i8 {
        if v > 0.0 {
            1
        } else if v < 0.0 {
            -1
        } else {
            0
        }
    };
    let mut rec_signs = Vec::new();
    for frame in fwd.warped.frames() {
        for (&a, &b) in fwd.istar.data().iter().zip(frame.data().iter()) {
            rec_signs.push(sign(a - b));
        }
    }
    let mut dist_signs = Vec::new();
    for (orig, re) in seq.frames().iter().zip(fwd.redistorted.frames().iter()) {
        for (&a, &b) in orig.data().iter().zip(re.data().iter()) {
            dist_signs.push(sign(a - b));
        }
    }
    let (h, w, _) = seq.frame_dim();
    let mut cells = Vec::new();
    for field in &fwd.fields {
        cells.extend(losses::warp_cells((h, w), field));
    }
    KinkSignature {
        relu: fwd.remover_cache.relu_signs(),
        rec_signs,
        dist_signs,
        cells,
    }
}

impl KinkSignature {
    fn matches(&self, other: &KinkSignature) -> bool {
        self.relu == other.relu
            && self.rec_signs == other.rec_signs
            && self.dist_signs == other.dist_signs
            && self.cells == other.cells
    }
}

/// Compares analytic gradients of `L_DE` (estimator parameters) and `L_BR`
/// (remover parameters) against central finite differences on `n_params`
/// sampled parameters. Inverse fields are frozen at their base values to
/// match the stop-gradient treatment, and candidates whose perturbation
/// crosses a kink are re-sampled.
pub fn gradient_check(
    state: &RestorationState,
    seq: &FrameSequence,
    n_params: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};
    let ctx = PipelineCtx::new(&state.config, seq)?;
    let base = ctx.forward(&state.estimator, &state.remover, None)?;
    let frozen = base.inverses.clone();
    let base_for_grads = ctx.forward(&state.estimator, &state.remover, Some(&frozen))?;
    let base_sig = signature(seq, &base_for_grads);
    let lambda = state.config.lambda_bc;

    let est_grads =
        flatten(&ctx.estimator_grads(&base_for_grads, &state.estimator, &state.remover)?);
    let rem_grads = ctx.remover_grads(&base_for_grads, &state.remover)?;

    let est_len: usize = state.estimator.param_count();
    let rem_len: usize = state.remover.param_count();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let step = 1e-5;
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    let mut attempts = 0;
    let max_attempts = 10 * n_params.max(1);

    while checked < n_params && attempts < max_attempts {
        attempts += 1;
        let on_estimator = attempts % 2 == 0;
        let (len, analytic) = if on_estimator {
            (est_len, &est_grads)
        } else {
            (rem_len, &rem_grads)
        };
        let idx = rng.random_range(0..len);

        let eval = |delta: f64| -> Result<(f64, KinkSignature)> {
            let mut est = state.estimator.clone();
            let mut rem = state.remover.clone();
            {
                let mut blocks = if on_estimator {
                    est.blocks_mut()
                } else {
                    rem.blocks_mut()
                };
                let mut remaining = idx;
                for b in blocks.iter_mut() {
                    if remaining < b.len() {
                        b[remaining] += delta;
                        break;
                    }
                    remaining -= b.len();
                }
            }
            let fwd = ctx.forward(&est, &rem, Some(&frozen))?;
            let loss = if on_estimator {
                fwd.l_de(lambda)
            } else {
                fwd.l_br()
            };
            Ok((loss, signature(seq, &fwd)))
        };

        let (lp, sig_p) = eval(step)?;
        let (lm, sig_m) = eval(-step)?;
        if !sig_p.matches(&base_sig) || !sig_m.matches(&base_sig) {
            skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * step);
        let an = analytic[idx];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    if checked < n_params {
        return Err(CqcdError::Numerical(format!(
            "gradient check exhausted candidates: {checked}/{n_params} accepted, {skipped} skipped"
        )));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
        skipped,
    })
}

/// Seeds estimator parameters with small random values so the sampling
/// coordinates sit away from interpolation kinks; used before
/// [`gradient_check`] and by its CLI wrapper.
pub fn randomize_for_check(state: &mut RestorationState, seed: u64) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed ^ 0x6A3F);
    for block in state.estimator.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.random_range(-1.8..1.8) + 0.31;
        }
    }
}
