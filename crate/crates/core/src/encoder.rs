//! Per-point MLP encoder `[4, H, H, D]` and its binary checkpoint format.
//!
//! Each point `(x, y, z, intensity)` is mapped independently, ReLU on the two
//! hidden layers and a linear output. A per-point network has no neighborhood
//! context; the pooling and loss machinery downstream does not depend on that.
//!
//! Checkpoint layout (all little-endian):
//!
//! ```text
//! magic  "BEVSSLCK"      8 bytes
//! version u32            currently 1
//! hidden  u32
//! dim     u32
//! weights f64 * n        W1 [4xH], b1 [H], W2 [HxH], b2 [H], W3 [HxD], b3 [D]
//! -- optional optimizer section --
//! tag     "ADAMWOPT"     8 bytes
//! step    u64
//! m       f64 * n        first moments, same order as weights
//! v       f64 * n        second moments, same order as weights
//! ```

use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, TapeError, Tensor, Var};
use crate::trainer::OptimizerState;
use crate::PointCloud;

/// Number of per-point input channels: x, y, z, intensity.
pub const INPUT_DIM: usize = 4;
pub const DEFAULT_HIDDEN: usize = 32;
pub const DEFAULT_DIM: usize = 16;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEVSSLCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPTIMIZER_TAG: &[u8; 8] = b"ADAMWOPT";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot encode an empty point cloud")]
    EmptyInput,
    #[error("invalid encoder shape: hidden={hidden}, dim={dim} (need hidden >= 1, dim >= 2)")]
    InvalidShape { hidden: usize, dim: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[fan_in, fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    hidden: usize,
    dim: usize,
    layers: Vec<DenseLayer>,
}

/// Options applied to the raw point channels before the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EncodeOptions {
    /// Subtract the cloud's xyz centroid first.
    pub center_input: bool,
}

fn layer_sizes(hidden: usize, dim: usize) -> [(usize, usize); 3] {
    [(INPUT_DIM, hidden), (hidden, hidden), (hidden, dim)]
}

impl EncoderParams {
    /// Glorot-uniform weights `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`,
    /// zero biases. Deterministic in `seed`.
    pub fn init(seed: u64, hidden: usize, dim: usize) -> Result<Self, EncoderError> {
        if hidden < 1 || dim < 2 {
            return Err(EncoderError::InvalidShape { hidden, dim });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes(hidden, dim)
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..=s)).collect();
                DenseLayer {
                    weight: Tensor::new(vec![fan_in, fan_out], w).expect("sized"),
                    bias: Tensor::zeros(vec![fan_out]),
                }
            })
            .collect();
        Ok(Self { hidden, dim, layers })
    }

    /// Builds parameters from flat tensors in checkpoint order.
    pub fn from_flat(hidden: usize, dim: usize, flat: &[f64]) -> Result<Self, EncoderError> {
        if hidden < 1 || dim < 2 {
            return Err(EncoderError::InvalidShape { hidden, dim });
        }
        let expected = Self::count_for(hidden, dim);
        if flat.len() != expected {
            return Err(EncoderError::Checkpoint(format!("expected {expected} weights, found {}", flat.len())));
        }
        let mut off = 0;
        let mut take = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape, flat[off..off + n].to_vec()).expect("sized");
            off += n;
            t
        };
        let layers = layer_sizes(hidden, dim)
            .into_iter()
            .map(|(i, o)| {
                let weight = take(vec![i, o]);
                let bias = take(vec![o]);
                DenseLayer { weight, bias }
            })
            .collect();
        Ok(Self { hidden, dim, layers })
    }

    fn count_for(hidden: usize, dim: usize) -> usize {
        layer_sizes(hidden, dim).iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        Self::count_for(self.hidden, self.dim)
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundEncoder, TapeError> {
        let vars = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect::<Result<_, _>>()?;
        Ok(BoundEncoder { vars, dim: self.dim })
    }

    /// Forward pass without keeping the graph; `[n, D]` features.
    pub fn features(&self, cloud: &PointCloud, options: EncodeOptions) -> Result<Tensor, EncoderError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let out = encode(cloud, &bound, &mut tape, options)?;
        Ok(tape.value(out).clone())
    }
}

/// Encoder parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: Vec<Var>,
    dim: usize,
}

impl BoundEncoder {
    /// Leaf handles in checkpoint order, for reading gradients.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Stacks the point channels into an `[n, 4]` input matrix.
pub fn input_matrix(cloud: &PointCloud, options: EncodeOptions) -> Tensor {
    let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
    if options.center_input && !cloud.is_empty() {
        let n = cloud.len() as f64;
        cx = cloud.points.iter().map(|p| p.x).sum::<f64>() / n;
        cy = cloud.points.iter().map(|p| p.y).sum::<f64>() / n;
        cz = cloud.points.iter().map(|p| p.z).sum::<f64>() / n;
    }
    let data = cloud.points.iter().flat_map(|p| [p.x - cx, p.y - cy, p.z - cz, p.intensity]).collect();
    Tensor::new(vec![cloud.len(), INPUT_DIM], data).expect("sized")
}

/// Records the MLP on `tape`; row `i` of the result is the feature of point `i`.
pub fn encode(cloud: &PointCloud, params: &BoundEncoder, tape: &mut Tape, options: EncodeOptions) -> Result<Var, EncoderError> {
    if cloud.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    let mut h = tape.leaf(input_matrix(cloud, options))?;
    let n_layers = params.vars.len() / 2;
    for (k, wb) in params.vars.chunks(2).enumerate() {
        h = tape.matmul(h, wb[0])?;
        h = tape.add(h, wb[1])?;
        if k + 1 < n_layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn put_f64s<'a>(out: &mut Vec<u8>, vals: impl IntoIterator<Item = &'a f64>) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, optionally followed by the optimizer section.
pub fn checkpoint_bytes(params: &EncoderParams, optimizer: Option<&OptimizerState<f64>>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * params.num_params() * 3);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(params.dim as u32).to_le_bytes());
    put_f64s(&mut out, params.tensors().into_iter().flat_map(|t| t.data()));
    if let Some(opt) = optimizer {
        out.extend_from_slice(OPTIMIZER_TAG);
        out.extend_from_slice(&opt.step.to_le_bytes());
        put_f64s(&mut out, opt.first_moment.iter().flatten());
        put_f64s(&mut out, opt.second_moment.iter().flatten());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncoderError> {
        if self.buf.len() - self.pos < n {
            return Err(EncoderError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EncoderError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, EncoderError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, EncoderError> {
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

/// Parses a checkpoint; the optimizer state is returned when present.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(EncoderParams, Option<OptimizerState<f64>>), EncoderError> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(EncoderError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(EncoderError::Checkpoint(format!("unsupported version {version}")));
    }
    let hidden = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    if hidden < 1 || dim < 2 {
        return Err(EncoderError::InvalidShape { hidden, dim });
    }
    let n = EncoderParams::count_for(hidden, dim);
    let params = EncoderParams::from_flat(hidden, dim, &cur.f64s(n)?)?;
    if !params.to_flat().iter().all(|v| v.is_finite()) {
        return Err(EncoderError::Checkpoint("non-finite weight".into()));
    }
    if cur.pos == bytes.len() {
        return Ok((params, None));
    }
    if cur.take(8)? != OPTIMIZER_TAG {
        return Err(EncoderError::Checkpoint(format!("unknown section at byte {}", cur.pos - 8)));
    }
    let step = cur.u64()?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let split = |flat: Vec<f64>| {
        let mut off = 0;
        sizes
            .iter()
            .map(|&s| {
                off += s;
                flat[off - s..off].to_vec()
            })
            .collect::<Vec<_>>()
    };
    let first_moment = split(cur.f64s(n)?);
    let second_moment = split(cur.f64s(n)?);
    if cur.pos != bytes.len() {
        return Err(EncoderError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((params, Some(OptimizerState { first_moment, second_moment, step })))
}

pub fn save_checkpoint(path: &Path, params: &EncoderParams, optimizer: Option<&OptimizerState<f64>>) -> Result<(), EncoderError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(params, optimizer))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, Option<OptimizerState<f64>>), EncoderError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}
