//! AdamW with cosine annealing over scan pairs, plus metrics and checkpoints.
//!
//! One optimization step takes a batch of pairs; each pair is evaluated on
//! its own tape (in parallel), and the per-pair gradients are averaged in
//! pair order, so results do not depend on thread scheduling.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, TapeError};
use crate::bev::{bev_pool, BevError};
use crate::contrast::{self, align, contrastive_loss, qualifying_cells, AlignMode, ContrastError, LossConfig};
use crate::encoder::{self, encode, EncodeOptions, EncoderError, EncoderParams};
use crate::geometry::RigidTransform;
use crate::io_kitti::{self, DatasetOptions, KittiError, PairingMode};
use crate::{PointCloud, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("parameter/gradient/state shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("no usable scan pairs")]
    NoPairs,
    #[error("every scan pair was degenerate (no overlapping cells)")]
    AllPairsDegenerate,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Bev(#[from] BevError),
    #[error(transparent)]
    Synth(#[from] crate::synthbench::SynthError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// First/second moment estimates for each parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn zeros_like(sizes: &[usize]) -> Self {
        Self {
            first_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> Default for AdamW<T> {
    fn default() -> Self {
        Self { beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), weight_decay: T::lit(1e-3) }
    }
}

/// One AdamW update with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    lr: T,
    opt: &AdamW<T>,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() || params.len() != state.second_moment.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[k].len() || p.len() != state.second_moment[k].len() {
            return Err(TrainError::ShapeMismatch(format!("tensor {k}: {} params, {} grads", p.len(), g.len())));
        }
    }
    state.step += 1;
    let t = T::from_u64(state.step).expect("step fits scalar");
    let bc1 = T::one() - opt.beta1.powf(t);
    let bc2 = T::one() - opt.beta2.powf(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..p.len() {
            m[i] = opt.beta1 * m[i] + (T::one() - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (T::one() - opt.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + opt.eps) + opt.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// `0.5 * lr_max * (1 + cos(pi * step / total_steps))`; `lr_max` when
/// `total_steps` is zero.
pub fn cosine_lr<T: Scalar>(step: usize, total_steps: usize, lr_max: T) -> T {
    if total_steps == 0 {
        return lr_max;
    }
    let frac = T::from_usize(step.min(total_steps)).expect("fits") / T::from_usize(total_steps).expect("fits");
    T::lit(0.5) * lr_max * (T::one() + (T::lit(std::f64::consts::PI) * frac).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pairing: PairingMode,
    /// Used when a sequence has no times file.
    pub scan_rate_hz: f64,
    /// BEV cell side `b`, meters.
    pub cell_size: f64,
    /// BEV cells per side `M`.
    pub grid_size: usize,
    pub tau: f64,
    pub n_samples: usize,
    pub occupancy_eps: f64,
    pub align_mode: AlignMode,
    pub hidden: usize,
    pub dim: usize,
    pub center_input: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-3,
            weight_decay: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            epochs: 1,
            batch_size: 2,
            pairing: PairingMode::ByTime { seconds: 0.7 },
            scan_rate_hz: 10.0,
            cell_size: 0.2,
            grid_size: 512,
            tau: contrast::DEFAULT_TAU,
            n_samples: contrast::DEFAULT_N_SAMPLES,
            occupancy_eps: contrast::DEFAULT_OCCUPANCY_EPS,
            align_mode: AlignMode::Bilinear2D,
            hidden: encoder::DEFAULT_HIDDEN,
            dim: encoder::DEFAULT_DIM,
            center_input: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        let positive = [
            ("weight_decay", self.weight_decay, true),
            ("lr_max", self.lr_max, true),
            ("eps", self.eps, false),
            ("cell_size", self.cell_size, false),
            ("scan_rate_hz", self.scan_rate_hz, false),
        ];
        for (name, v, zero_ok) in positive {
            if !v.is_finite() || v < 0.0 || (!zero_ok && v == 0.0) {
                return bad(format!("{name} = {v}"));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas = ({b1}, {b2})"));
        }
        if self.epochs < 1 || self.batch_size < 1 || self.grid_size < 1 {
            return bad(format!("epochs={}, batch_size={}, grid_size={}", self.epochs, self.batch_size, self.grid_size));
        }
        self.loss_config(0).validate()?;
        Ok(())
    }

    pub fn loss_config(&self, seed: u64) -> LossConfig {
        LossConfig { tau: self.tau, n_samples: self.n_samples, seed, occupancy_eps: self.occupancy_eps }
    }

    pub fn encode_options(&self) -> EncodeOptions {
        EncodeOptions { center_input: self.center_input }
    }

    pub fn optimizer(&self) -> AdamW<f64> {
        AdamW { beta1: self.betas.0, beta2: self.betas.1, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// `key=value` pairs of every setting, for output headers.
    pub fn provenance(&self) -> Vec<(String, String)> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                out.push((k, v.to_string()));
            }
        }
        out
    }
}

/// Two scans and the transform mapping the second into the first's frame.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub reference: PointCloud,
    pub other: PointCloud,
    pub rel: RigidTransform<f64>,
}

/// Everything about the per-pair loss except the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSetup {
    pub cell_size: f64,
    pub grid_size: usize,
    pub align_mode: AlignMode,
    pub loss: LossConfig,
    pub encode: EncodeOptions,
}

impl PairSetup {
    pub fn from_config(cfg: &TrainConfig, seed: u64) -> Self {
        Self {
            cell_size: cfg.cell_size,
            grid_size: cfg.grid_size,
            align_mode: cfg.align_mode,
            loss: cfg.loss_config(seed),
            encode: cfg.encode_options(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub loss: f64,
    /// Cells occupied on both sides before subsampling.
    pub n_qualifying: usize,
    /// Cells entering the loss.
    pub n_sampled: usize,
    /// Per-tensor gradients in checkpoint order, when requested.
    pub grads: Option<Vec<Vec<f64>>>,
}

/// Encodes both scans, pools, aligns, samples cells and evaluates the loss.
/// Returns `Ok(None)` for a degenerate pair (fewer than 2 usable cells).
pub fn evaluate_pair(params: &EncoderParams, pair: &TrainingPair, setup: &PairSetup, with_grads: bool) -> Result<Option<PairEvaluation>, TrainError> {
    if pair.reference.is_empty() || pair.other.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let fa = encode(&pair.reference, &bound, &mut tape, setup.encode)?;
    let fb = encode(&pair.other, &bound, &mut tape, setup.encode)?;
    let grid_a = bev_pool(fa, &pair.reference, setup.cell_size, setup.grid_size, &mut tape)?;
    let pooled_b = match setup.align_mode {
        AlignMode::Exact3D => None,
        _ => Some(bev_pool(fb, &pair.other, setup.cell_size, setup.grid_size, &mut tape)?),
    };
    let aligned = match &pooled_b {
        Some(g) => align(setup.align_mode, g, fb, &pair.other, &pair.rel, &mut tape)?,
        None => contrast::align_exact3d(fb, &pair.other, &pair.rel, setup.cell_size, setup.grid_size, &mut tape)?,
    };
    let n_qualifying = qualifying_cells(&grid_a, &aligned, setup.loss.occupancy_eps)?.len();
    let cells = match contrast::sample_cells(&grid_a, &aligned, &setup.loss) {
        Ok(c) if c.len() >= 2 => c,
        Ok(_) | Err(ContrastError::EmptyOverlap) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let loss = contrastive_loss(&grid_a, &aligned, &cells, setup.loss.tau, &mut tape)?;
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        Some(bound.vars().iter().zip(params.tensors()).map(|(v, t)| g.get_or_zeros(*v, t.len())).collect())
    } else {
        None
    };
    Ok(Some(PairEvaluation { loss: tape.value(loss).item(), n_qualifying, n_sampled: cells.len(), grads }))
}

/// Mean loss over the non-degenerate pairs, with a fixed sampling seed.
pub fn evaluate_loss(params: &EncoderParams, pairs: &[TrainingPair], cfg: &TrainConfig, seed: u64) -> Result<f64, TrainError> {
    let evals = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| evaluate_pair(params, p, &PairSetup::from_config(cfg, derive_seed(seed, i as u64, 0)), false))
        .collect::<Result<Vec<_>, _>>()?;
    let losses: Vec<f64> = evals.into_iter().flatten().map(|e| e.loss).collect();
    if losses.is_empty() {
        return Err(TrainError::AllPairsDegenerate);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// SplitMix64-style mixing of a base seed with two counters.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the batch's usable pairs (NaN when none was usable).
    pub loss: f64,
    /// Qualifying cells summed over the batch's pairs.
    pub n_cells: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: OptimizerState<f64>,
}

impl TrainState {
    pub fn fresh(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let params = EncoderParams::init(cfg.seed, cfg.hidden, cfg.dim)?;
        let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Ok(Self { params, optimizer: OptimizerState::zeros_like(&sizes) })
    }
}

pub fn steps_per_epoch(n_pairs: usize, batch_size: usize) -> usize {
    n_pairs.div_ceil(batch_size.max(1))
}

/// Runs the remaining steps of `cfg.epochs` epochs from `state` (whose
/// optimizer step counter says where to resume). `on_epoch_end` is called
/// after every completed epoch.
pub fn pretrain_from<F>(pairs: &[TrainingPair], cfg: &TrainConfig, mut state: TrainState, mut on_epoch_end: F) -> Result<(TrainState, Vec<StepRecord>), TrainError>
where
    F: FnMut(usize, &TrainState) -> Result<(), TrainError>,
{
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let per_epoch = steps_per_epoch(pairs.len(), cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let opt = cfg.optimizer();
    let mut records = Vec::new();
    let mut any_usable = false;
    let start = state.optimizer.step as usize;

    for epoch in start / per_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, 0x5EED)));
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            if step < start {
                continue;
            }
            let lr = cosine_lr(step, total, cfg.lr_max);
            let evals = batch
                .par_iter()
                .map(|&i| {
                    let setup = PairSetup::from_config(cfg, derive_seed(cfg.seed, step as u64, i as u64 + 1));
                    evaluate_pair(&state.params, &pairs[i], &setup, true)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let n_cells = evals.iter().flatten().map(|e| e.n_qualifying).sum();
            let usable: Vec<PairEvaluation> = evals.into_iter().flatten().collect();
            let loss = if usable.is_empty() {
                log::warn!("step {step}: every pair in the batch was degenerate, skipping update");
                f64::NAN
            } else {
                any_usable = true;
                let scale = 1.0 / usable.len() as f64;
                let mut mean: Vec<Vec<f64>> = state.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
                for e in &usable {
                    for (acc, g) in mean.iter_mut().zip(e.grads.as_ref().expect("requested")) {
                        acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                    }
                }
                mean.iter_mut().flatten().for_each(|v| *v *= scale);
                let grads: Vec<&[f64]> = mean.iter().map(|g| g.as_slice()).collect();
                let mut tensors = state.params.tensors_mut();
                let mut slices: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data_mut()).collect();
                adamw_step(&mut slices, &grads, &mut state.optimizer, lr, &opt)?;
                usable.iter().map(|e| e.loss).sum::<f64>() * scale
            };
            if usable.len() < batch.len() {
                log::warn!("step {step}: skipped {} degenerate pair(s)", batch.len() - usable.len());
            }
            // Keep the counter aligned with the schedule even for skipped updates.
            state.optimizer.step = step as u64 + 1;
            records.push(StepRecord { step, epoch, lr, loss, n_cells });
        }
        on_epoch_end(epoch, &state)?;
    }
    if !any_usable && !records.is_empty() {
        return Err(TrainError::AllPairsDegenerate);
    }
    Ok((state, records))
}

/// Fresh run of `cfg.epochs` epochs.
pub fn pretrain(pairs: &[TrainingPair], cfg: &TrainConfig) -> Result<(EncoderParams, Vec<StepRecord>), TrainError> {
    let (state, records) = pretrain_from(pairs, cfg, TrainState::fresh(cfg)?, |_, _| Ok(()))?;
    Ok((state.params, records))
}

/// Writes the metrics CSV: `# key=value` provenance lines, then
/// `step,epoch,lr,loss,n_cells`.
pub fn write_metrics<W: Write>(mut w: W, cfg: &TrainConfig, records: &[StepRecord]) -> io::Result<()> {
    for (k, v) in cfg.provenance() {
        writeln!(w, "# {k}={v}")?;
    }
    writeln!(w, "step,epoch,lr,loss,n_cells")?;
    for r in records {
        writeln!(w, "{},{},{:e},{:e},{}", r.step, r.epoch, r.lr, r.loss, r.n_cells)?;
    }
    Ok(())
}

/// Builds training pairs from every sequence under `data_dir`.
pub fn load_training_pairs(data_dir: &Path, cfg: &TrainConfig) -> Result<Vec<TrainingPair>, TrainError> {
    let seqs = io_kitti::load_dataset(data_dir, DatasetOptions { scan_rate_hz: cfg.scan_rate_hz })?;
    let mut pairs = Vec::new();
    for seq in &seqs {
        for p in io_kitti::select_pairs(&seq.track, cfg.pairing)? {
            pairs.push(TrainingPair { reference: seq.scans[p.index_a].clone(), other: seq.scans[p.index_b].clone(), rel: p.rel });
        }
    }
    Ok(pairs)
}

pub fn load_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cfg: TrainConfig = serde_json::from_str(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub n_pairs: usize,
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Pretrains on a dataset directory, writing into `out_dir`:
/// `config.json`, `metrics.csv`, `epoch_NNN.ckpt` per epoch and `final.ckpt`.
/// Checkpoints carry the optimizer section so a run can resume from them.
pub fn run_pretrain_dir(cfg: &TrainConfig, data_dir: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<RunSummary, TrainError> {
    cfg.validate()?;
    let pairs = load_training_pairs(data_dir, cfg)?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n").map_err(io_err(&cfg_path))?;

    let state = match resume {
        Some(path) => {
            let (params, opt) = encoder::load_checkpoint(path)?;
            let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
            if params.hidden() != cfg.hidden || params.dim() != cfg.dim {
                return Err(TrainError::InvalidConfig(format!("checkpoint is {}x{}, config wants {}x{}", params.hidden(), params.dim(), cfg.hidden, cfg.dim)));
            }
            TrainState { params, optimizer: opt.unwrap_or_else(|| OptimizerState::zeros_like(&sizes)) }
        }
        None => TrainState::fresh(cfg)?,
    };
    let (state, records) = pretrain_from(&pairs, cfg, state, |epoch, st| {
        let path = out_dir.join(format!("epoch_{epoch:03}.ckpt"));
        encoder::save_checkpoint(&path, &st.params, Some(&st.optimizer)).map_err(TrainError::from)
    })?;
    let final_checkpoint = out_dir.join("final.ckpt");
    encoder::save_checkpoint(&final_checkpoint, &state.params, Some(&state.optimizer))?;
    let metrics = out_dir.join("metrics.csv");
    let mut buf = Vec::new();
    write_metrics(&mut buf, cfg, &records).map_err(io_err(&metrics))?;
    fs::write(&metrics, buf).map_err(io_err(&metrics))?;
    Ok(RunSummary { n_pairs: pairs.len(), records, final_checkpoint, metrics })
}
