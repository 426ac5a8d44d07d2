//! Gradient compressors with error feedback.
//!
//! Two lossy compressors are provided: 1-bit sign quantization with a
//! mean-absolute-value scale, and top-k magnitude sparsification. Either can
//! be wrapped in [`ErrorFeedbackState`], which carries the compression error
//! into the next step (`r_{t+1} = r_t + g - decompress(message)`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l1_norm, DenseVector};

/// Transmitted form of a gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedGradient {
    Dense(DenseVector),
    /// `signs` is packed LSB-first: bit `i % 8` of byte `i / 8` is 1 for `+1`.
    SignBit { signs: Vec<u8>, scale: f64, dim: usize },
    /// `indices` strictly increasing and `< dim`.
    TopK {
        indices: Vec<usize>,
        values: Vec<f64>,
        dim: usize,
    },
}

impl CompressedGradient {
    pub fn dim(&self) -> usize {
        match self {
            CompressedGradient::Dense(v) => v.dim(),
            CompressedGradient::SignBit { dim, .. } | CompressedGradient::TopK { dim, .. } => *dim,
        }
    }

    /// Sign of entry `i` of a `SignBit` message as `+1.0` / `-1.0`.
    pub fn sign_at(signs: &[u8], i: usize) -> f64 {
        if signs[i / 8] >> (i % 8) & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressedGradient::Dense(v) => v.check_finite("dense message"),
            CompressedGradient::SignBit { signs, scale, dim } => {
                if !(scale.is_finite() && *scale >= 0.0) {
                    return Err(Error::MalformedMessage(format!("sign scale {scale}")));
                }
                if signs.len() != dim.div_ceil(8) {
                    return Err(Error::MalformedMessage(format!(
                        "{} sign bytes for dim {dim}",
                        signs.len()
                    )));
                }
                Ok(())
            }
            CompressedGradient::TopK {
                indices,
                values,
                dim,
            } => {
                if indices.len() != values.len() {
                    return Err(Error::MalformedMessage(format!(
                        "{} indices but {} values",
                        indices.len(),
                        values.len()
                    )));
                }
                if indices.len() > *dim {
                    return Err(Error::MalformedMessage("more entries than dim".into()));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= *dim) {
                    return Err(Error::MalformedMessage(format!("index {bad} >= dim {dim}")));
                }
                if indices.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::MalformedMessage(
                        "indices not strictly increasing".into(),
                    ));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("top-k values"));
                }
                Ok(())
            }
        }
    }

    /// Little-endian wire encoding.
    ///
    /// Dense: `dim:u64, dim x f64`. SignBit: `dim:u64, scale:f64,
    /// ceil(dim/8) sign bytes`. TopK: `dim:u64, count:u64, count x (index:u64,
    /// value:f64)`. The kind is not encoded; the receiver must know it.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        match self {
            CompressedGradient::Dense(v) => {
                for x in v.as_slice() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            CompressedGradient::SignBit { signs, scale, .. } => {
                out.extend_from_slice(&scale.to_le_bytes());
                out.extend_from_slice(signs);
            }
            CompressedGradient::TopK {
                indices, values, ..
            } => {
                out.extend_from_slice(&(indices.len() as u64).to_le_bytes());
                for (i, x) in indices.iter().zip(values) {
                    out.extend_from_slice(&(*i as u64).to_le_bytes());
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(kind: CompressorKind, bytes: &[u8]) -> Result<Self> {
        let mut cur = WireCursor { bytes, pos: 0 };
        let dim = cur.u64()? as usize;
        let msg = match kind {
            CompressorKind::None => {
                let vals = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                CompressedGradient::Dense(DenseVector::new(vals)?)
            }
            CompressorKind::OneBit => {
                let scale = cur.f64()?;
                let signs = cur.take(dim.div_ceil(8))?.to_vec();
                CompressedGradient::SignBit { signs, scale, dim }
            }
            CompressorKind::TopK => {
                let count = cur.u64()? as usize;
                let mut indices = Vec::with_capacity(count.min(dim));
                let mut values = Vec::with_capacity(count.min(dim));
                for _ in 0..count {
                    indices.push(cur.u64()? as usize);
                    values.push(cur.f64()?);
                }
                CompressedGradient::TopK {
                    indices,
                    values,
                    dim,
                }
            }
        };
        if cur.pos != bytes.len() {
            return Err(Error::MalformedMessage(format!(
                "{} trailing bytes",
                bytes.len() - cur.pos
            )));
        }
        msg.validate()?;
        Ok(msg)
    }

    pub fn wire_len(&self) -> usize {
        match self {
            CompressedGradient::Dense(v) => dense_wire_len(v.dim()),
            CompressedGradient::SignBit { dim, .. } => onebit_wire_len(*dim),
            CompressedGradient::TopK { indices, .. } => topk_wire_len(indices.len()),
        }
    }
}

struct WireCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> WireCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedMessage("truncated wire message".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn dense_wire_len(dim: usize) -> usize {
    8 + 8 * dim
}

pub fn onebit_wire_len(dim: usize) -> usize {
    16 + dim.div_ceil(8)
}

pub fn topk_wire_len(k: usize) -> usize {
    16 + 16 * k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressorKind {
    None,
    OneBit,
    TopK,
}

/// Which compressor a worker applies before transmitting its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompressorConfig {
    #[default]
    None,
    OneBit,
    /// Keep exactly `k` entries.
    TopK(usize),
    /// Keep `ceil(fraction * dim)` entries, at least one.
    TopKFraction(f64),
}

impl CompressorConfig {
    pub fn kind(&self) -> CompressorKind {
        match self {
            CompressorConfig::None => CompressorKind::None,
            CompressorConfig::OneBit => CompressorKind::OneBit,
            CompressorConfig::TopK(_) | CompressorConfig::TopKFraction(_) => CompressorKind::TopK,
        }
    }

    /// Resolved `k` for a gradient of `dim` entries; `None` for non-top-k kinds.
    pub fn k_for(&self, dim: usize) -> Result<Option<usize>> {
        match *self {
            CompressorConfig::TopK(k) => {
                if k == 0 || k > dim {
                    return Err(Error::InvalidArgument(format!(
                        "top_k = {k} outside [1, {dim}]"
                    )));
                }
                Ok(Some(k))
            }
            CompressorConfig::TopKFraction(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!(
                        "top_k fraction {f} outside (0, 1]"
                    )));
                }
                if dim == 0 {
                    return Err(Error::Empty("top-k of an empty gradient"));
                }
                Ok(Some(((f * dim as f64).ceil() as usize).clamp(1, dim)))
            }
            _ => Ok(None),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorConfig::TopK(0) => {
                Err(Error::InvalidArgument("top_k must be at least 1".into()))
            }
            CompressorConfig::TopKFraction(f) if !(f > 0.0 && f <= 1.0) => Err(
                Error::InvalidArgument(format!("top_k fraction {f} outside (0, 1]")),
            ),
            _ => Ok(()),
        }
    }

    pub fn compress(&self, g: &DenseVector) -> Result<CompressedGradient> {
        match self {
            CompressorConfig::None => Ok(CompressedGradient::Dense(g.clone())),
            CompressorConfig::OneBit => compress_onebit(g),
            _ => {
                let k = self.k_for(g.dim())?.expect("top-k kind");
                compress_topk(g, k)
            }
        }
    }

    /// Dense wire bytes over compressed wire bytes for a `dim`-entry gradient.
    pub fn modeled_ratio(&self, dim: usize) -> Result<f64> {
        let compressed = match self {
            CompressorConfig::None => dense_wire_len(dim),
            CompressorConfig::OneBit => onebit_wire_len(dim),
            _ => topk_wire_len(self.k_for(dim)?.expect("top-k kind")),
        };
        Ok(dense_wire_len(dim) as f64 / compressed as f64)
    }
}

/// Sign quantization: `+1` where `g_i >= 0`, `-1` otherwise, with
/// `scale = ||g||_1 / dim`.
pub fn compress_onebit(g: &DenseVector) -> Result<CompressedGradient> {
    let dim = g.dim();
    let scale = l1_norm(g)? / dim as f64;
    let mut signs = vec![0u8; dim.div_ceil(8)];
    for (i, &x) in g.as_slice().iter().enumerate() {
        if x >= 0.0 {
            signs[i / 8] |= 1 << (i % 8);
        }
    }
    Ok(CompressedGradient::SignBit { signs, scale, dim })
}

/// Keep the `k` entries of largest magnitude. Equal magnitudes go to the
/// lower index. Output indices are ascending.
pub fn compress_topk(g: &DenseVector, k: usize) -> Result<CompressedGradient> {
    let dim = g.dim();
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "top_k = {k} outside [1, {dim}]"
        )));
    }
    let vals = g.as_slice();
    let mut order: Vec<usize> = (0..dim).collect();
    let by_rank = |a: &usize, b: &usize| {
        vals[*b]
            .abs()
            .total_cmp(&vals[*a].abs())
            .then_with(|| a.cmp(b))
    };
    if k < dim {
        order.select_nth_unstable_by(k - 1, by_rank);
    }
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    let values = indices.iter().map(|&i| vals[i]).collect();
    Ok(CompressedGradient::TopK {
        indices,
        values,
        dim,
    })
}

pub fn decompress(c: &CompressedGradient) -> Result<DenseVector> {
    c.validate()?;
    match c {
        CompressedGradient::Dense(v) => Ok(v.clone()),
        CompressedGradient::SignBit { signs, scale, dim } => DenseVector::new(
            (0..*dim)
                .map(|i| scale * CompressedGradient::sign_at(signs, i))
                .collect(),
        ),
        CompressedGradient::TopK {
            indices,
            values,
            dim,
        } => {
            let mut out = vec![0.0; *dim];
            for (&i, &x) in indices.iter().zip(values) {
                out[i] = x;
            }
            DenseVector::new(out)
        }
    }
}

/// Dense wire length over the message's wire length.
pub fn compression_ratio(c: &CompressedGradient) -> f64 {
    dense_wire_len(c.dim()) as f64 / c.wire_len() as f64
}

/// Per-worker compression residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorFeedbackState {
    residual: DenseVector,
}

impl ErrorFeedbackState {
    pub fn new(dim: usize) -> Self {
        Self {
            residual: DenseVector::zeros(dim),
        }
    }

    pub fn residual(&self) -> &DenseVector {
        &self.residual
    }

    pub fn dim(&self) -> usize {
        self.residual.dim()
    }

    /// Compresses `residual + g`, keeps what was not transmitted.
    pub fn step(&mut self, g: &DenseVector, cfg: &CompressorConfig) -> Result<CompressedGradient> {
        g.ensure_dim(self.residual.dim())?;
        let corrected = self.residual.add(g)?;
        let message = cfg.compress(&corrected)?;
        let sent = decompress(&message)?;
        self.residual = corrected.sub(&sent)?;
        Ok(message)
    }
}

/// Functional form of [`ErrorFeedbackState::step`].
pub fn ef_compress_step(
    state: &ErrorFeedbackState,
    g: &DenseVector,
    cfg: &CompressorConfig,
) -> Result<(CompressedGradient, ErrorFeedbackState)> {
    let mut next = state.clone();
    let message = next.step(g, cfg)?;
    Ok((message, next))
}
