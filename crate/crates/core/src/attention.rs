//! Reference attention, quantization-config attention, corrected attention
//! (quadratic and recurrent) and the blocked single-step decoder.

use rayon::prelude::*;

use crate::adapter::{mix_weights, CorrectionAdapter};
use crate::cache::KvCache;
use crate::error::{Error, Result};
use crate::hadamard::{rotate, rotate_token_blocks, HadamardMatrix};
use crate::quant::{quantize_tensor, QuantConfig, Rotation};
use crate::tensor::{dot, softmax_in_place, Matrix};

fn check_qkv(op: &'static str, q: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
    if q.cols() != k.cols() || k.rows() != v.rows() || q.rows() > k.rows() {
        return Err(Error::Dimension {
            op,
            left: q.shape(),
            right: k.shape(),
        });
    }
    if k.rows() == 0 {
        return Err(Error::argument(format!("{op}: empty key sequence")));
    }
    Ok(())
}

/// Causal softmax attention.
///
/// `q` may be shorter than `k`; its rows are aligned to the end of the key
/// sequence, so query `r` sees keys `0..=r + k.rows() - q.rows()`. Returns
/// the weights (`q.rows() x k.rows()`, zero above the causal boundary) and
/// outputs.
pub fn attention_reference(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, Matrix)> {
    check_qkv("attention_reference", q, k, v)?;
    let (m, n) = (q.rows(), k.rows());
    let offset = n - m;
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    let mut a = Matrix::zeros(m, n);
    let mut y = Matrix::zeros(m, v.cols());
    for r in 0..m {
        let visible = r + offset + 1;
        let row = &mut a.row_mut(r)[..visible];
        for (i, s) in row.iter_mut().enumerate() {
            *s = dot(q.row(r), k.row(i)) * inv_sqrt_d;
        }
        softmax_in_place(row);
        let weights = a.row(r)[..visible].to_vec();
        let out = y.row_mut(r);
        for (i, &w) in weights.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(v.row(i)) {
                *o += w * x;
            }
        }
    }
    Ok((a, y))
}

/// Quantizes and dequantizes `x` under `cfg`, applying the configured
/// rotation first. Returns the reconstruction still in the rotated domain
/// together with the rotation needed to undo it.
fn quantize_rotated(x: &Matrix, cfg: QuantConfig, h: Option<&HadamardMatrix>) -> Result<Matrix> {
    let rotated = match (cfg.rotation, h) {
        (Rotation::None, _) => x.clone(),
        (Rotation::PostMultiply, Some(h)) => rotate(x, h, Rotation::PostMultiply)?,
        (Rotation::PreMultiply, Some(h)) => rotate_token_blocks(x, h)?,
        (_, None) => unreachable!("rotation requires a Hadamard matrix"),
    };
    Ok(quantize_tensor(&rotated, cfg)?.dequantize())
}

fn unrotate(x: &Matrix, rotation: Rotation, h: Option<&HadamardMatrix>) -> Result<Matrix> {
    match (rotation, h) {
        (Rotation::None, _) => Ok(x.clone()),
        (Rotation::PostMultiply, Some(h)) => x.matmul(&h.matrix().transpose()),
        (Rotation::PreMultiply, Some(h)) => rotate_token_blocks(x, &h.transpose()),
        (_, None) => unreachable!("rotation requires a Hadamard matrix"),
    }
}

/// Reconstruction of `x` after rotation, quantization, dequantization and
/// inverse rotation. Passthrough configs return `x` unchanged.
pub fn fake_quantize(x: &Matrix, cfg: QuantConfig) -> Result<Matrix> {
    if cfg.is_passthrough() {
        return Ok(x.clone());
    }
    let h = match cfg.rotation {
        Rotation::None => None,
        _ => Some(HadamardMatrix::new(x.cols())?),
    };
    let deq = quantize_rotated(x, cfg, h.as_ref())?;
    unrotate(&deq, cfg.rotation, h.as_ref())
}

/// Attention over keys and values quantized under `cfg_k` and `cfg_v`.
///
/// Keys are reconstructed in the original domain before the logits.
/// Post-rotated values stay rotated through the weighted sum and the output
/// is multiplied by `H^T`; pre-rotated values are un-rotated first, since
/// token mixing does not commute with the causal weights.
pub fn attention_with_config(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg_k: QuantConfig,
    cfg_v: QuantConfig,
) -> Result<(Matrix, Matrix)> {
    check_qkv("attention_with_config", q, k, v)?;
    let k_hat = fake_quantize(k, cfg_k)?;
    if !cfg_v.is_passthrough() && cfg_v.rotation == Rotation::PostMultiply {
        let h = HadamardMatrix::new(v.cols())?;
        let v_rot = quantize_rotated(v, cfg_v, Some(&h))?;
        let (a, y_rot) = attention_reference(q, &k_hat, &v_rot)?;
        return Ok((a, y_rot.matmul(&h.matrix().transpose())?));
    }
    let v_hat = fake_quantize(v, cfg_v)?;
    attention_reference(q, &k_hat, &v_hat)
}

fn check_corrected(
    q: &Matrix,
    k_q: &Matrix,
    k_err: &Matrix,
    v_q: &Matrix,
    adapter: &CorrectionAdapter,
) -> Result<()> {
    check_qkv("corrected attention", q, k_q, v_q)?;
    if k_err.shape() != k_q.shape() {
        return Err(Error::Dimension {
            op: "corrected attention",
            left: k_q.shape(),
            right: k_err.shape(),
        });
    }
    if q.rows() != k_q.rows() {
        return Err(Error::Dimension {
            op: "corrected attention (causal self-attention)",
            left: q.shape(),
            right: k_q.shape(),
        });
    }
    if adapter.enabled && adapter.head_dim() != q.cols() {
        return Err(Error::Dimension {
            op: "corrected attention adapter",
            left: q.shape(),
            right: (adapter.head_dim(), adapter.rank()),
        });
    }
    Ok(())
}

/// Corrected causal attention with explicit `O(n^2)` sums:
///
/// ```text
/// Y_n = sum_i (exp(s_ni) + f(Q_n, Ke_i)) Vq_i / sum_i (exp(s_ni) + f(Q_n, Ke_i))
/// ```
pub fn corrected_attention_quadratic(
    q: &Matrix,
    k_q: &Matrix,
    k_err: &Matrix,
    v_q: &Matrix,
    adapter: &CorrectionAdapter,
) -> Result<Matrix> {
    check_corrected(q, k_q, k_err, v_q, adapter)?;
    if !adapter.enabled {
        return Ok(attention_reference(q, k_q, v_q)?.1);
    }
    let n = q.rows();
    let inv_sqrt_d = 1.0 / (q.cols() as f64).sqrt();
    let phi_k: Vec<Vec<f64>> = (0..n)
        .map(|i| adapter.phi_k(k_err.row(i)))
        .collect::<Result<_>>()?;
    let mut y = Matrix::zeros(n, v_q.cols());
    for t in 0..n {
        let phi_q = adapter.phi_q(q.row(t))?;
        let logits: Vec<f64> = (0..=t)
            .map(|i| dot(q.row(t), k_q.row(i)) * inv_sqrt_d)
            .collect();
        let f: Vec<f64> = phi_k[..=t].iter().map(|b| dot(&phi_q, b)).collect();
        let w = mix_weights(&logits, &f);
        let out = y.row_mut(t);
        for (i, &wi) in w.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(v_q.row(i)) {
                *o += wi * x;
            }
        }
    }
    Ok(y)
}

/// Output of [`corrected_attention_recurrent`].
#[derive(Debug, Clone)]
pub struct RecurrentOutput {
    pub y: Matrix,
    /// Multiply-adds spent on the correction path (state updates and
    /// readouts). Grows linearly in the sequence length.
    pub correction_ops: u64,
}

/// Corrected attention with the correction carried in running states
/// `S_t = S_{t-1} + phi_k(Ke_t)^T Vq_t` and `P_t = P_{t-1} + phi_k(Ke_t)`;
/// each position reads them out with `phi_q(Q_t)`.
pub fn corrected_attention_recurrent(
    q: &Matrix,
    k_q: &Matrix,
    k_err: &Matrix,
    v_q: &Matrix,
    adapter: &CorrectionAdapter,
) -> Result<RecurrentOutput> {
    check_corrected(q, k_q, k_err, v_q, adapter)?;
    if !adapter.enabled {
        return Ok(RecurrentOutput {
            y: attention_reference(q, k_q, v_q)?.1,
            correction_ops: 0,
        });
    }
    let (n, d) = q.shape();
    let dv = v_q.cols();
    let rank = adapter.rank();
    let half = (rank / 2) as u64;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut s = Matrix::zeros(rank, dv);
    let mut p = vec![0.0; rank];
    let mut y = Matrix::zeros(n, dv);
    let mut ops = 0u64;
    // Projection (d x D/2 per half) plus softmax per feature map.
    let phi_cost = 2 * (d as u64 * half + half);
    for t in 0..n {
        let phi_k = adapter.phi_k(k_err.row(t))?;
        for (r, &f) in phi_k.iter().enumerate() {
            p[r] += f;
            for (sv, &x) in s.row_mut(r).iter_mut().zip(v_q.row(t)) {
                *sv += f * x;
            }
        }
        let phi_q = adapter.phi_q(q.row(t))?;
        let c_n = s.vecmul(&phi_q)?;
        let c_d = dot(&phi_q, &p);
        ops += 2 * phi_cost + 2 * (rank * dv) as u64 + 2 * rank as u64;

        let logits: Vec<f64> = (0..=t)
            .map(|i| dot(q.row(t), k_q.row(i)) * inv_sqrt_d)
            .collect();
        let shift = logits.iter().copied().fold(0.0f64, f64::max);
        let corr = (-shift).exp();
        let mut num: Vec<f64> = c_n.iter().map(|c| c * corr).collect();
        let mut den = c_d * corr;
        for (i, &l) in logits.iter().enumerate() {
            let e = (l - shift).exp();
            den += e;
            for (o, &x) in num.iter_mut().zip(v_q.row(i)) {
                *o += e * x;
            }
        }
        for (o, x) in y.row_mut(t).iter_mut().zip(&num) {
            *o = x / den;
        }
    }
    Ok(RecurrentOutput {
        y,
        correction_ops: ops,
    })
}

/// How the correction states enter the blocked reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionScaling {
    /// Corrections are scaled into the same shifted domain as the
    /// exponentials, so the result equals the corrected attention formula.
    #[default]
    Consistent,
    /// `C_n` and `C_d` are added unscaled after the max shift.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Tokens per block; `None` uses the cache group size.
    pub block_size: Option<usize>,
    pub scaling: CorrectionScaling,
    /// Map the output back from the rotated value domain.
    pub unrotate: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            block_size: None,
            scaling: CorrectionScaling::Consistent,
            unrotate: true,
        }
    }
}

/// Per-block partial results: unnormalized output, block max and sum.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodePartial {
    pub y: Vec<f32>,
    pub max: f32,
    pub sum: f32,
}

/// `C_n = phi_q(q) S` and `C_d = phi_q(q) . P`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionStates {
    pub c_n: Vec<f32>,
    pub c_d: f32,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub output: Vec<f64>,
    /// Quantized blocks in order, then the residual block if non-empty.
    pub partials: Vec<DecodePartial>,
    pub states: CorrectionStates,
}

fn block_partial(
    q: &[f32],
    inv_sqrt_d: f32,
    len: usize,
    d: usize,
    key: impl Fn(usize, usize) -> f32,
    value: impl Fn(usize, usize) -> f32,
) -> DecodePartial {
    let scores: Vec<f32> = (0..len)
        .map(|t| (0..d).map(|c| q[c] * key(t, c)).sum::<f32>() * inv_sqrt_d)
        .collect();
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    let mut y = vec![0.0f32; d];
    for (t, &s) in scores.iter().enumerate() {
        let e = (s - max).exp();
        sum += e;
        for (c, o) in y.iter_mut().enumerate() {
            *o += e * value(t, c);
        }
    }
    DecodePartial { y, max, sum }
}

/// One decode step over a cache, in 32-bit arithmetic.
///
/// The quantized history is split into blocks of `block_size` tokens; each
/// block is dequantized on the fly and reduced to a [`DecodePartial`]. The
/// residual window forms one more full-precision block without correction.
/// Partials are combined in ascending block order with an online-softmax
/// reduction, and the correction states are added to numerator and
/// denominator.
pub fn decode_step_blocked(
    q: &[f64],
    cache: &KvCache,
    adapter: Option<&CorrectionAdapter>,
    options: DecodeOptions,
) -> Result<DecodeOutput> {
    let d = cache.config().head_dim;
    if q.len() != d {
        return Err(Error::Dimension {
            op: "decode_step_blocked",
            left: (1, q.len()),
            right: (1, d),
        });
    }
    if cache.is_empty() {
        return Err(Error::argument("decode on an empty cache"));
    }
    let g = cache.config().group_size;
    let block = options.block_size.unwrap_or(g);
    if block == 0 {
        return Err(Error::argument("block size must be positive"));
    }
    let qf: Vec<f32> = q.iter().map(|&x| x as f32).collect();
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();

    let states = match adapter {
        Some(a) if a.enabled && cache.config().rank > 0 => {
            if a.rank() != cache.config().rank || a.head_dim() != d {
                return Err(Error::Dimension {
                    op: "decode adapter",
                    left: (d, cache.config().rank),
                    right: (a.head_dim(), a.rank()),
                });
            }
            let phi = a.phi_q(q)?;
            let c_n = cache.s_state().vecmul(&phi)?;
            CorrectionStates {
                c_n: c_n.iter().map(|&x| x as f32).collect(),
                c_d: dot(&phi, cache.p_state()) as f32,
            }
        }
        _ => CorrectionStates {
            c_n: vec![0.0; d],
            c_d: 0.0,
        },
    };

    let keys = cache.key_chunks();
    let values = cache.value_chunks();
    let quantized = cache.quantized_tokens();
    let blocks: Vec<(usize, usize)> = (0..quantized)
        .step_by(block)
        .map(|s| (s, (s + block).min(quantized)))
        .collect();
    let dequant = |chunk: &crate::quant::QuantizedTensor, r: usize, c: usize| -> f32 {
        let gi = chunk.group_index(r, c);
        chunk.scales()[gi] as f32 * chunk.code(r, c) as f32 + chunk.zeros()[gi] as f32
    };
    let mut partials: Vec<DecodePartial> = blocks
        .par_iter()
        .map(|&(start, end)| {
            block_partial(
                &qf,
                inv_sqrt_d,
                end - start,
                d,
                |t, c| {
                    let tok = start + t;
                    dequant(&keys[tok / g], tok % g, c)
                },
                |t, c| {
                    let tok = start + t;
                    dequant(&values[tok / g], tok % g, c)
                },
            )
        })
        .collect();
    if cache.residual_len() > 0 {
        let (rk, rv) = (cache.residual_k(), cache.residual_v());
        partials.push(block_partial(
            &qf,
            inv_sqrt_d,
            rk.rows(),
            d,
            |t, c| rk.get(t, c) as f32,
            |t, c| rv.get(t, c) as f32,
        ));
    }

    let m = partials.iter().map(|p| p.max).fold(f32::NEG_INFINITY, f32::max);
    let (shift, num, den) = match options.scaling {
        CorrectionScaling::Literal => (m, states.c_n.clone(), states.c_d),
        CorrectionScaling::Consistent if states.c_d > 0.0 => {
            // C_d * exp(-shift) <= 1, and C_n / C_d is bounded by the values.
            let shift = m.max(states.c_d.ln());
            let den = (states.c_d.ln() - shift).exp();
            let num = states.c_n.iter().map(|c| c / states.c_d * den).collect();
            (shift, num, den)
        }
        CorrectionScaling::Consistent => (m, vec![0.0; d], 0.0),
    };
    let (mut num, mut den) = (num, den);
    for p in &partials {
        let w = (p.max - shift).exp();
        den += w * p.sum;
        for (o, &y) in num.iter_mut().zip(&p.y) {
            *o += w * y;
        }
    }
    let out: Vec<f64> = num.iter().map(|&x| (x / den) as f64).collect();
    let output = if options.unrotate {
        cache.from_value_domain(&out)?
    } else {
        out
    };
    Ok(DecodeOutput {
        output,
        partials,
        states,
    })
}
