//! Asymmetric group-wise integer quantization and low-bit code packing.
//!
//! A group of values is mapped to `bits`-bit unsigned codes with
//! `zero = min`, `scale = (max - min) / (2^bits - 1)` and
//! `code = round_half_even((v - zero) / scale)`. Dequantization is
//! `scale * code + zero`. A constant group gets `scale = 0`, all-zero codes,
//! and dequantizes back to the constant exactly.
//!
//! # Code layout
//!
//! Codes of a [`QuantizedTensor`] are stored in *grouped order*: row-major for
//! [`Axis::Token`] and column-major for [`Axis::Channel`], so every group is a
//! contiguous run of codes. The stream is packed into little-endian 32-bit
//! words by [`pack_codes`]. Lane `i` of word `w` holds code `lanes * w + i`
//! in bits `[bits * i, bits * (i + 1))`, where `lanes = 32 / bits`. For 2-bit
//! codes that is 16 codes per word. Unused trailing lanes of the last word
//! are zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Axis along which consecutive entries share a scale and zero point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    /// Groups run down a column (one feature channel across tokens).
    Channel,
    /// Groups run along a row (one token across channels).
    Token,
}

/// Where a Hadamard rotation is applied before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    None,
    /// `H * X`: mixes tokens.
    PreMultiply,
    /// `X * H`: mixes channels within each token.
    PostMultiply,
}

impl Axis {
    pub fn label(self) -> &'static str {
        match self {
            Axis::Channel => "channel",
            Axis::Token => "token",
        }
    }
}

impl Rotation {
    pub fn label(self) -> &'static str {
        match self {
            Rotation::None => "raw",
            Rotation::PreMultiply => "pre",
            Rotation::PostMultiply => "post",
        }
    }
}

/// Bit width value meaning "keep full precision".
pub const PASSTHROUGH_BITS: u8 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    pub axis: Axis,
    pub rotation: Rotation,
}

impl QuantConfig {
    /// Validated constructor. `bits` must be one of 2, 3, 4, 8 or
    /// [`PASSTHROUGH_BITS`].
    pub fn new(bits: u8, group_size: usize, axis: Axis, rotation: Rotation) -> Result<Self> {
        if !matches!(bits, 2 | 3 | 4 | 8 | PASSTHROUGH_BITS) {
            return Err(Error::argument(format!(
                "bits must be one of 2, 3, 4, 8, 16 (got {bits})"
            )));
        }
        if group_size == 0 {
            return Err(Error::argument("group size must be positive"));
        }
        Ok(Self {
            bits,
            group_size,
            axis,
            rotation,
        })
    }

    pub fn channel(bits: u8, group_size: usize) -> Result<Self> {
        Self::new(bits, group_size, Axis::Channel, Rotation::None)
    }

    pub fn token(bits: u8, group_size: usize) -> Result<Self> {
        Self::new(bits, group_size, Axis::Token, Rotation::None)
    }

    pub fn passthrough() -> Self {
        Self {
            bits: PASSTHROUGH_BITS,
            group_size: 1,
            axis: Axis::Token,
            rotation: Rotation::None,
        }
    }

    pub fn with_rotation(mut self, rotation: Rotation) -> Self {
        self.rotation = rotation;
        self
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == PASSTHROUGH_BITS
    }

    /// Largest representable code.
    pub fn max_code(&self) -> u32 {
        max_code(self.bits)
    }

    /// Short label such as `channel/raw` used in reports.
    pub fn label(&self) -> String {
        if self.is_passthrough() {
            "fp".to_string()
        } else {
            format!("{}/{}", self.axis.label(), self.rotation.label())
        }
    }
}

#[inline]
fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

/// Codes and parameters of a single quantized group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupCodes {
    pub codes: Vec<u16>,
    pub scale: f64,
    pub zero: f64,
}

/// Quantizes one group of values to `bits`-bit codes.
pub fn quantize_group(values: &[f64], bits: u8) -> Result<GroupCodes> {
    if values.is_empty() {
        return Err(Error::argument("cannot quantize an empty group"));
    }
    if bits == 0 || bits > 16 {
        return Err(Error::argument(format!("unsupported bit width {bits}")));
    }
    let (scale, zero) = group_params(values, bits);
    let mut codes = Vec::with_capacity(values.len());
    encode_into(values, scale, zero, bits, &mut codes);
    Ok(GroupCodes { codes, scale, zero })
}

fn group_params(values: &[f64], bits: u8) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let scale = if hi > lo {
        (hi - lo) / max_code(bits) as f64
    } else {
        0.0
    };
    (scale, lo)
}

fn encode_into(values: &[f64], scale: f64, zero: f64, bits: u8, out: &mut Vec<u16>) {
    let top = max_code(bits) as f64;
    if scale == 0.0 {
        out.extend(std::iter::repeat_n(0, values.len()));
        return;
    }
    out.extend(values.iter().map(|&v| {
        let c = ((v - zero) / scale).round_ties_even().clamp(0.0, top);
        c as u16
    }));
}

pub fn dequantize_group(codes: &[u16], scale: f64, zero: f64) -> Vec<f64> {
    codes.iter().map(|&c| scale * c as f64 + zero).collect()
}

/// Expected squared error of uniform rounding with step `scale`: `scale^2 / 12`.
pub fn expected_quant_mse(scale: f64) -> f64 {
    scale * scale / 12.0
}

#[inline]
fn lanes_per_word(bits: u8) -> usize {
    32 / bits as usize
}

/// Number of 32-bit words needed for `count` codes of `bits` bits.
pub fn packed_words(count: usize, bits: u8) -> usize {
    count.div_ceil(lanes_per_word(bits))
}

/// Packs codes into little-endian lanes of 32-bit words.
pub fn pack_codes(codes: &[u16], bits: u8) -> Result<Vec<u32>> {
    if bits == 0 || bits > 16 {
        return Err(Error::argument(format!("unsupported bit width {bits}")));
    }
    let lanes = lanes_per_word(bits);
    let top = max_code(bits);
    let mut words = vec![0u32; packed_words(codes.len(), bits)];
    for (i, &c) in codes.iter().enumerate() {
        if c as u32 > top {
            return Err(Error::argument(format!(
                "code {c} at index {i} exceeds {bits}-bit range"
            )));
        }
        words[i / lanes] |= (c as u32) << (bits as usize * (i % lanes));
    }
    Ok(words)
}

/// Inverse of [`pack_codes`]: extracts `count` codes.
pub fn unpack_codes(words: &[u32], count: usize, bits: u8) -> Result<Vec<u16>> {
    if bits == 0 || bits > 16 {
        return Err(Error::argument(format!("unsupported bit width {bits}")));
    }
    if packed_words(count, bits) > words.len() {
        return Err(Error::argument(format!(
            "{count} codes need {} words, got {}",
            packed_words(count, bits),
            words.len()
        )));
    }
    Ok((0..count).map(|i| extract_code(words, i, bits)).collect())
}

#[inline]
pub(crate) fn extract_code(words: &[u32], index: usize, bits: u8) -> u16 {
    let lanes = lanes_per_word(bits);
    let w = words[index / lanes];
    ((w >> (bits as usize * (index % lanes))) & max_code(bits)) as u16
}

/// A matrix stored as packed integer codes plus per-group scale and zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u32>,
    scales: Vec<f64>,
    zeros: Vec<f64>,
    rows: usize,
    cols: usize,
    config: QuantConfig,
}

impl QuantizedTensor {
    /// Quantizes `x` group-wise along `config.axis`.
    ///
    /// Rotation is the caller's job; `config.rotation` is only recorded.
    /// A final group shorter than `group_size` gets its own scale and zero.
    pub fn quantize(x: &Matrix, config: QuantConfig) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::argument("cannot quantize an empty matrix"));
        }
        let (rows, cols) = x.shape();
        let g = config.group_size;
        let mut codes16 = Vec::with_capacity(rows * cols);
        let mut scales = Vec::new();
        let mut zeros = Vec::new();
        let mut buf = Vec::with_capacity(g);
        let (outer, inner) = match config.axis {
            Axis::Token => (rows, cols),
            Axis::Channel => (cols, rows),
        };
        for o in 0..outer {
            let mut start = 0;
            while start < inner {
                let end = (start + g).min(inner);
                buf.clear();
                match config.axis {
                    Axis::Token => buf.extend_from_slice(&x.row(o)[start..end]),
                    Axis::Channel => buf.extend((start..end).map(|r| x.get(r, o))),
                }
                let (scale, zero) = group_params(&buf, config.bits);
                encode_into(&buf, scale, zero, config.bits, &mut codes16);
                scales.push(scale);
                zeros.push(zero);
                start = end;
            }
        }
        Ok(Self {
            codes: pack_codes(&codes16, config.bits)?,
            scales,
            zeros,
            rows,
            cols,
            config,
        })
    }

    /// Reassembles a tensor from raw parts (used by deserialization).
    pub fn from_parts(
        codes: Vec<u32>,
        scales: Vec<f64>,
        zeros: Vec<f64>,
        rows: usize,
        cols: usize,
        config: QuantConfig,
    ) -> Result<Self> {
        let groups = Self::group_count_for(rows, cols, &config);
        if scales.len() != groups || zeros.len() != groups {
            return Err(Error::argument(format!(
                "expected {groups} scales/zeros, got {}/{}",
                scales.len(),
                zeros.len()
            )));
        }
        if codes.len() != packed_words(rows * cols, config.bits) {
            return Err(Error::argument("packed code length does not match shape"));
        }
        Ok(Self {
            codes,
            scales,
            zeros,
            rows,
            cols,
            config,
        })
    }

    fn group_count_for(rows: usize, cols: usize, config: &QuantConfig) -> usize {
        match config.axis {
            Axis::Token => rows * cols.div_ceil(config.group_size),
            Axis::Channel => cols * rows.div_ceil(config.group_size),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn config(&self) -> &QuantConfig {
        &self.config
    }

    pub fn packed(&self) -> &[u32] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f64] {
        &self.zeros
    }

    pub fn group_count(&self) -> usize {
        self.scales.len()
    }

    #[inline]
    fn groups_per_line(&self) -> usize {
        match self.config.axis {
            Axis::Token => self.cols.div_ceil(self.config.group_size),
            Axis::Channel => self.rows.div_ceil(self.config.group_size),
        }
    }

    /// Position of element `(r, c)` in the code stream.
    #[inline]
    pub fn linear_index(&self, r: usize, c: usize) -> usize {
        match self.config.axis {
            Axis::Token => r * self.cols + c,
            Axis::Channel => c * self.rows + r,
        }
    }

    /// Index of the group holding element `(r, c)`.
    #[inline]
    pub fn group_index(&self, r: usize, c: usize) -> usize {
        let g = self.config.group_size;
        match self.config.axis {
            Axis::Token => r * self.groups_per_line() + c / g,
            Axis::Channel => c * self.groups_per_line() + r / g,
        }
    }

    #[inline]
    pub fn code(&self, r: usize, c: usize) -> u16 {
        extract_code(&self.codes, self.linear_index(r, c), self.config.bits)
    }

    /// All codes in grouped order.
    pub fn unpacked_codes(&self) -> Vec<u16> {
        (0..self.rows * self.cols)
            .map(|i| extract_code(&self.codes, i, self.config.bits))
            .collect()
    }

    #[inline]
    pub fn value(&self, r: usize, c: usize) -> f64 {
        let gi = self.group_index(r, c);
        self.scales[gi] * self.code(r, c) as f64 + self.zeros[gi]
    }

    pub fn dequantize(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.value(r, c))
    }

    /// Byte size of the packed code words.
    pub fn code_bytes(&self) -> usize {
        self.codes.len() * 4
    }

    /// Byte size of scales and zeros when stored as 16-bit floats.
    pub fn metadata_bytes(&self) -> usize {
        self.scales.len() * 2 * 2
    }

    pub fn mean_scale(&self) -> f64 {
        self.scales.iter().sum::<f64>() / self.scales.len() as f64
    }
}

/// Free-function form of [`QuantizedTensor::quantize`].
pub fn quantize_tensor(x: &Matrix, config: QuantConfig) -> Result<QuantizedTensor> {
    QuantizedTensor::quantize(x, config)
}
