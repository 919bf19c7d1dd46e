//! Activation traces: per-(layer, head) Q/K/V matrices, a synthetic
//! generator with channel-wise key outliers, and the KVTR file format.
//!
//! KVTR is little-endian: `"KVTR"`, then `u32` version, layers, heads,
//! seq_len and head_dim (24 header bytes), then for each layer and head the
//! Q, K and V matrices as row-major `f32`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::io_util::{read_f32, read_u32, write_f32, write_u32, ByteReader};
use crate::tensor::{derive_seed, seeded_rng, Matrix, Rng};

pub const TRACE_MAGIC: &[u8; 4] = b"KVTR";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_HEADER_BYTES: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    layers: usize,
    heads: usize,
    seq_len: usize,
    head_dim: usize,
    data: Vec<HeadTrace>,
}

impl AttentionTrace {
    /// `data` is ordered layer-major: index `layer * heads + head`.
    pub fn new(layers: usize, heads: usize, data: Vec<HeadTrace>) -> Result<Self> {
        if data.len() != layers * heads {
            return Err(Error::argument(format!(
                "expected {} head traces, got {}",
                layers * heads,
                data.len()
            )));
        }
        let (seq_len, head_dim) = data.first().map(|h| h.q.shape()).unwrap_or((0, 0));
        for h in &data {
            for m in [&h.q, &h.k, &h.v] {
                if m.shape() != (seq_len, head_dim) {
                    return Err(Error::Dimension {
                        op: "trace",
                        left: (seq_len, head_dim),
                        right: m.shape(),
                    });
                }
                if !m.is_finite() {
                    return Err(Error::argument("trace entries must be finite"));
                }
            }
        }
        Ok(Self {
            layers,
            heads,
            seq_len,
            head_dim,
            data,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn head(&self, layer: usize, head: usize) -> &HeadTrace {
        &self.data[layer * self.heads + head]
    }

    /// All heads in layer-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, &HeadTrace)> {
        self.data
            .iter()
            .enumerate()
            .map(move |(i, h)| (i / self.heads, i % self.heads, h))
    }

    pub fn file_len(&self) -> usize {
        TRACE_HEADER_BYTES + self.layers * self.heads * 3 * self.seq_len * self.head_dim * 4
    }
}

/// Shape of the outlier channels of K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub enum KeyProfile {
    /// I.i.d. standard normal keys; outlier channels are multiplied by the gain.
    #[default]
    Gaussian,
    /// Outlier channel `j` is `gain * (sqrt(2) cos(w_j t + theta_j) + offset * sign_j)`
    /// plus standard normal noise, with `w_j ~ U(freq_min, freq_max)`,
    /// `theta_j ~ U(0, 2 pi)`, `sign_j = +-1`: bounded, slowly rotating
    /// channels as produced by rotary position embeddings.
    Rotary {
        offset: f64,
        freq_min: f64,
        freq_max: f64,
    },
}

impl KeyProfile {
    pub fn rotary() -> Self {
        KeyProfile::Rotary {
            offset: 1.0,
            freq_min: 0.5,
            freq_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub enum ValueProfile {
    #[default]
    Gaussian,
    /// Student-t entries, times a per-token `exp(token_log_sigma * N(0,1))`
    /// scale, plus a per-channel `channel_bias * N(0,1)` offset.
    HeavyTailed {
        dof: f64,
        token_log_sigma: f64,
        channel_bias: f64,
    },
}

impl ValueProfile {
    pub fn heavy_tailed() -> Self {
        ValueProfile::HeavyTailed {
            dof: 3.0,
            token_log_sigma: 0.5,
            channel_bias: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SyntheticParams {
    pub layers: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub head_dim: usize,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    pub seed: u64,
    pub key_profile: KeyProfile,
    pub value_profile: ValueProfile,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 1,
            seq_len: 256,
            head_dim: 128,
            outlier_channels: 4,
            outlier_gain: 10.0,
            seed: 0,
            key_profile: KeyProfile::Gaussian,
            value_profile: ValueProfile::Gaussian,
        }
    }
}

impl SyntheticParams {
    /// Rotary keys and heavy-tailed values, the profile used by the
    /// design-space sweeps.
    pub fn structured(self) -> Self {
        Self {
            key_profile: KeyProfile::rotary(),
            value_profile: ValueProfile::heavy_tailed(),
            ..self
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn synthetic_head(p: &SyntheticParams, rng: &mut Rng) -> Result<HeadTrace> {
    let (n, d) = (p.seq_len, p.head_dim);
    let mut k = Matrix::random_normal(n, d, rng);
    let mut outliers = index::sample(rng, d, p.outlier_channels).into_vec();
    outliers.sort_unstable();
    match p.key_profile {
        KeyProfile::Gaussian => {
            for &c in &outliers {
                for t in 0..n {
                    k.set(t, c, k.get(t, c) * p.outlier_gain);
                }
            }
        }
        KeyProfile::Rotary {
            offset,
            freq_min,
            freq_max,
        } => {
            if freq_min.is_nan() || freq_max.is_nan() || freq_min > freq_max {
                return Err(Error::argument("rotary frequency range is empty"));
            }
            for &c in &outliers {
                let w = rng.random_range(freq_min..=freq_max);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                for t in 0..n {
                    let wave = 2f64.sqrt() * (w * t as f64 + theta).cos() + offset * sign;
                    k.set(t, c, p.outlier_gain * wave + k.get(t, c));
                }
            }
        }
    }
    let v = match p.value_profile {
        ValueProfile::Gaussian => Matrix::random_normal(n, d, rng),
        ValueProfile::HeavyTailed {
            dof,
            token_log_sigma,
            channel_bias,
        } => {
            let t = StudentT::new(dof).map_err(|e| Error::argument(format!("value dof: {e}")))?;
            let mut v = Matrix::from_fn(n, d, |_, _| t.sample(rng));
            for r in 0..n {
                let s = (token_log_sigma * normal(rng)).exp();
                v.row_mut(r).iter_mut().for_each(|x| *x *= s);
            }
            let bias: Vec<f64> = (0..d).map(|_| channel_bias * normal(rng)).collect();
            for r in 0..n {
                for (x, b) in v.row_mut(r).iter_mut().zip(&bias) {
                    *x += b;
                }
            }
            v
        }
    };
    let q = Matrix::random_normal(n, d, rng);
    let f32_round = |m: Matrix| m.map(|x| x as f32 as f64);
    Ok(HeadTrace {
        q: f32_round(q),
        k: f32_round(k),
        v: f32_round(v),
    })
}

/// Generates a trace. Each (layer, head) draws from its own ChaCha8 stream
/// seeded by `derive_seed(seed, layer * heads + head)`, in the order:
/// K noise, outlier channel choice, outlier waveforms, V, Q. Entries are
/// rounded to `f32`.
pub fn generate_synthetic_trace(p: &SyntheticParams) -> Result<AttentionTrace> {
    if p.head_dim == 0 || !p.head_dim.is_power_of_two() {
        return Err(Error::UnsupportedDimension {
            dim: p.head_dim,
            reason: "synthetic traces need a power-of-two head dimension",
        });
    }
    if p.outlier_channels > p.head_dim {
        return Err(Error::argument(format!(
            "outlier_channels {} exceeds head_dim {}",
            p.outlier_channels, p.head_dim
        )));
    }
    if p.layers == 0 || p.heads == 0 || p.seq_len == 0 {
        return Err(Error::argument("layers, heads and seq_len must be positive"));
    }
    if !p.outlier_gain.is_finite() {
        return Err(Error::argument("outlier_gain must be finite"));
    }
    let data = (0..p.layers * p.heads)
        .map(|i| synthetic_head(p, &mut seeded_rng(derive_seed(p.seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    AttentionTrace::new(p.layers, p.heads, data)
}

pub fn write_trace_to<W: Write>(trace: &AttentionTrace, w: &mut W) -> Result<()> {
    w.write_all(TRACE_MAGIC)?;
    for v in [
        TRACE_VERSION,
        trace.layers as u32,
        trace.heads as u32,
        trace.seq_len as u32,
        trace.head_dim as u32,
    ] {
        write_u32(w, v)?;
    }
    for h in &trace.data {
        for m in [&h.q, &h.k, &h.v] {
            for &x in m.data() {
                write_f32(w, x as f32)?;
            }
        }
    }
    Ok(())
}

pub fn write_trace(trace: &AttentionTrace, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(trace.file_len());
    write_trace_to(trace, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_trace_from<R: Read>(r: &mut ByteReader<R>) -> Result<AttentionTrace> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::format(0, "bad trace magic"));
    }
    let version = read_u32(r)?;
    if version != TRACE_VERSION {
        return Err(Error::format(4, format!("unsupported trace version {version}")));
    }
    let layers = read_u32(r)? as usize;
    let heads = read_u32(r)? as usize;
    let seq_len = read_u32(r)? as usize;
    let head_dim = read_u32(r)? as usize;
    let mut data = Vec::with_capacity(layers * heads);
    for _ in 0..layers * heads {
        let mut mats = Vec::with_capacity(3);
        for _ in 0..3 {
            let start = r.offset();
            let mut vals = Vec::with_capacity(seq_len * head_dim);
            for _ in 0..seq_len * head_dim {
                let x = read_f32(r)?;
                if !x.is_finite() {
                    return Err(Error::format(r.offset() - 4, "non-finite trace entry"));
                }
                vals.push(x as f64);
            }
            mats.push(Matrix::new(seq_len, head_dim, vals).map_err(|e| Error::format(start, e.to_string()))?);
        }
        let v = mats.pop().unwrap();
        let k = mats.pop().unwrap();
        let q = mats.pop().unwrap();
        data.push(HeadTrace { q, k, v });
    }
    if !r.at_eof()? {
        return Err(Error::format(r.offset(), "trailing bytes after trace"));
    }
    let trace = AttentionTrace {
        layers,
        heads,
        seq_len,
        head_dim,
        data,
    };
    Ok(trace)
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace> {
    let bytes = std::fs::read(path)?;
    read_trace_from(&mut ByteReader::new(&bytes[..]))
}
