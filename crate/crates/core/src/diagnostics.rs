//! Analysis reports: key scale statistics, attention-error reports, the
//! axis x rotation design-space sweep, rank ablation and average-precision
//! accounting.
//!
//! Reports serialize as JSON lines (one object per record). Sweep grids can
//! also be written as whitespace-separated `x y value` triples.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{corrected_weights, train, CorrectionAdapter, TrainConfig};
use crate::attention::{attention_with_config, fake_quantize};
use crate::error::{Error, Result};
use crate::hadamard::{rotate, rotate_token_blocks, HadamardMatrix};
use crate::quant::{quantize_tensor, Axis, QuantConfig, Rotation};
use crate::tensor::Matrix;
use crate::trace::AttentionTrace;

/// Every (axis, rotation) pair, in grid order.
pub const DESIGN_SPACE: [(Axis, Rotation); 6] = [
    (Axis::Channel, Rotation::None),
    (Axis::Channel, Rotation::PreMultiply),
    (Axis::Channel, Rotation::PostMultiply),
    (Axis::Token, Rotation::None),
    (Axis::Token, Rotation::PreMultiply),
    (Axis::Token, Rotation::PostMultiply),
];

fn variant_label(axis: Axis, rotation: Rotation) -> String {
    format!("{}/{}", axis.label(), rotation.label())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleStat {
    pub axis: Axis,
    pub rotation: Rotation,
    pub label: String,
    pub mean_scale: f64,
}

/// Mean group scale of `k` quantized under each (axis, rotation) variant.
/// Pre-rotation mixes consecutive `head_dim`-token blocks.
pub fn scale_factor_stats(
    k: &Matrix,
    variants: &[(Axis, Rotation)],
    bits: u8,
    group_size: usize,
) -> Result<Vec<ScaleStat>> {
    if k.is_empty() {
        return Err(Error::argument("scale_factor_stats needs a non-empty matrix"));
    }
    let needs_h = variants.iter().any(|(_, r)| *r != Rotation::None);
    let h = if needs_h {
        Some(HadamardMatrix::new(k.cols())?)
    } else {
        None
    };
    variants
        .iter()
        .map(|&(axis, rotation)| {
            let x = match (rotation, &h) {
                (Rotation::None, _) => k.clone(),
                (Rotation::PostMultiply, Some(h)) => rotate(k, h, Rotation::PostMultiply)?,
                (Rotation::PreMultiply, Some(h)) => rotate_token_blocks(k, h)?,
                _ => unreachable!(),
            };
            let cfg = QuantConfig::new(bits, group_size, axis, rotation)?;
            Ok(ScaleStat {
                axis,
                rotation,
                label: variant_label(axis, rotation),
                mean_scale: quantize_tensor(&x, cfg)?.mean_scale(),
            })
        })
        .collect()
}

/// Attention error of one head against full-precision attention.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadError {
    pub layer: usize,
    pub head: usize,
    pub key_config: String,
    pub value_config: String,
    pub adapter: bool,
    /// Mean squared error over causal weight entries (`i <= n`).
    pub mse_weights: f64,
    pub mse_outputs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    pub heads: Vec<HeadError>,
}

impl ErrorReport {
    pub fn mean_mse_weights(&self) -> f64 {
        mean(self.heads.iter().map(|h| h.mse_weights))
    }

    pub fn mean_mse_outputs(&self) -> f64 {
        mean(self.heads.iter().map(|h| h.mse_outputs))
    }

    pub fn to_jsonl(&self) -> String {
        jsonl(&self.heads)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub(crate) fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("report records serialize"));
        out.push('\n');
    }
    out
}

fn causal_weight_mse(a: &Matrix, b: &Matrix) -> f64 {
    let mut s = 0.0;
    let mut count = 0usize;
    for n in 0..a.rows() {
        for i in 0..=n {
            let e = a.get(n, i) - b.get(n, i);
            s += e * e;
        }
        count += n + 1;
    }
    s / count as f64
}

/// Corrected weights and outputs for every query of a head.
pub fn corrected_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg_k: QuantConfig,
    cfg_v: QuantConfig,
    adapter: &CorrectionAdapter,
) -> Result<(Matrix, Matrix)> {
    let k_q = fake_quantize(k, cfg_k)?;
    let k_err = k.sub(&k_q)?;
    let v_q = fake_quantize(v, cfg_v)?;
    let n = q.rows();
    let mut a = Matrix::zeros(n, n);
    let mut y = Matrix::zeros(n, v.cols());
    for t in 0..n {
        let w = corrected_weights(
            q.row(t),
            &k_q.slice_rows(0..t + 1),
            &k_err.slice_rows(0..t + 1),
            adapter,
        )?;
        a.row_mut(t)[..=t].copy_from_slice(&w);
        let out = y.row_mut(t);
        for (i, &wi) in w.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(v_q.row(i)) {
                *o += wi * x;
            }
        }
    }
    Ok((a, y))
}

/// Per-head MSE of attention weights and outputs under the given configs.
/// `adapters`, when given, holds one adapter per head in layer-major order.
pub fn attention_error_report(
    trace: &AttentionTrace,
    cfg_k: QuantConfig,
    cfg_v: QuantConfig,
    adapters: Option<&[CorrectionAdapter]>,
) -> Result<ErrorReport> {
    let n_heads = trace.layers() * trace.heads();
    if let Some(a) = adapters {
        if a.len() != n_heads {
            return Err(Error::argument(format!(
                "expected {n_heads} adapters, got {}",
                a.len()
            )));
        }
    }
    let jobs: Vec<_> = trace.iter().enumerate().collect();
    let heads = jobs
        .par_iter()
        .map(|&(idx, (layer, head, h))| {
            let (a_ref, y_ref) = crate::attention::attention_reference(&h.q, &h.k, &h.v)?;
            let adapter = adapters.map(|a| &a[idx]).filter(|a| a.enabled);
            let (a_hat, y_hat) = match adapter {
                Some(ad) => corrected_head_attention(&h.q, &h.k, &h.v, cfg_k, cfg_v, ad)?,
                None => attention_with_config(&h.q, &h.k, &h.v, cfg_k, cfg_v)?,
            };
            Ok(HeadError {
                layer,
                head,
                key_config: cfg_k.label(),
                value_config: cfg_v.label(),
                adapter: adapter.is_some(),
                mse_weights: causal_weight_mse(&a_ref, &a_hat),
                mse_outputs: y_ref.mse(&y_hat)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorReport { heads })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub key: String,
    pub value: String,
    pub key_axis: Axis,
    pub key_rotation: Rotation,
    pub value_axis: Axis,
    pub value_rotation: Rotation,
    /// Output MSE averaged over all heads.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepGrid {
    pub bits: u8,
    pub group_size: usize,
    /// Key variants (rows) x value variants (columns), row-major.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, key: (Axis, Rotation), value: (Axis, Rotation)) -> &SweepCell {
        self.cells
            .iter()
            .find(|c| (c.key_axis, c.key_rotation) == key && (c.value_axis, c.value_rotation) == value)
            .expect("grid covers the whole design space")
    }

    /// Cell with the smallest MSE; ties go to the earliest cell.
    pub fn argmin(&self) -> &SweepCell {
        self.cells
            .iter()
            .reduce(|best, c| if c.mse < best.mse { c } else { best })
            .expect("non-empty grid")
    }

    pub fn to_jsonl(&self) -> String {
        jsonl(&self.cells)
    }

    /// `key value mse` triples, one per line.
    pub fn to_triples(&self) -> String {
        let mut out = String::from("# key value mse\n");
        for c in &self.cells {
            writeln!(out, "{} {} {:.12e}", c.key, c.value, c.mse).unwrap();
        }
        out
    }
}

/// Output MSE for every (key variant, value variant) pair of
/// [`DESIGN_SPACE`], averaged over the heads of `trace`.
pub fn config_sweep(trace: &AttentionTrace, bits: u8, group_size: usize) -> Result<SweepGrid> {
    let d = trace.head_dim();
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::UnsupportedDimension {
            dim: d,
            reason: "the sweep needs a power-of-two head dimension",
        });
    }
    let cfg = |(axis, rotation): (Axis, Rotation)| QuantConfig::new(bits, group_size, axis, rotation);
    // Reconstructions per head and variant, shared by all cells.
    let per_head: Vec<(Matrix, Vec<Matrix>, Vec<Matrix>, Matrix)> = trace
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(_, _, h)| {
            let keys = DESIGN_SPACE
                .iter()
                .map(|&var| fake_quantize(&h.k, cfg(var)?))
                .collect::<Result<Vec<_>>>()?;
            let values = DESIGN_SPACE
                .iter()
                .map(|&var| fake_quantize(&h.v, cfg(var)?))
                .collect::<Result<Vec<_>>>()?;
            let (_, y) = crate::attention::attention_reference(&h.q, &h.k, &h.v)?;
            Ok((h.q.clone(), keys, values, y))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(usize, usize)> = (0..DESIGN_SPACE.len())
        .flat_map(|i| (0..DESIGN_SPACE.len()).map(move |j| (i, j)))
        .collect();
    let cells = pairs
        .par_iter()
        .map(|&(ki, vi)| {
            let mut total = 0.0;
            for (q, keys, values, y_ref) in &per_head {
                let (_, y) = crate::attention::attention_reference(q, &keys[ki], &values[vi])?;
                total += y_ref.mse(&y)?;
            }
            let (ka, kr) = DESIGN_SPACE[ki];
            let (va, vr) = DESIGN_SPACE[vi];
            Ok(SweepCell {
                key: variant_label(ka, kr),
                value: variant_label(va, vr),
                key_axis: ka,
                key_rotation: kr,
                value_axis: va,
                value_rotation: vr,
                mse: total / per_head.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepGrid {
        bits,
        group_size,
        cells,
    })
}

/// Inputs of [`average_precision`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrecisionParams {
    pub seq_len: usize,
    pub head_dim: usize,
    pub group_size: usize,
    /// Residual tokens kept in 16-bit.
    pub window: usize,
    pub bits: u8,
    /// Bits for each scale and each zero point.
    pub metadata_bits: u32,
    /// Correction-state rank; `None` for no adapter.
    pub adapter_rank: Option<usize>,
}

impl PrecisionParams {
    /// 2-bit keys and values, `G = 128`, `R = 128`, 16-bit metadata and
    /// residual, `d = 128`, sequence length 8192.
    pub fn kivi() -> Self {
        Self {
            seq_len: 8192,
            head_dim: 128,
            group_size: 128,
            window: 128,
            bits: 2,
            metadata_bits: 16,
            adapter_rank: None,
        }
    }

    /// [`PrecisionParams::kivi`] plus rank-256 correction states.
    pub fn kvlinc() -> Self {
        Self {
            adapter_rank: Some(256),
            ..Self::kivi()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrecisionReport {
    pub params: PrecisionParams,
    pub bits_per_element: f64,
    pub code_bits: f64,
    pub metadata_bits: f64,
    pub residual_bits: f64,
    pub state_bits: f64,
    /// Cached K and V elements per head.
    pub elements: f64,
    pub assumptions: Vec<String>,
}

/// Average stored bits per cached K/V element of one head:
///
/// ```text
/// quantized = (N - R) * d per stream, two streams (K and V)
/// codes     = 2 * quantized * bits
/// metadata  = 2 * (quantized / G) * 2 * metadata_bits
/// residual  = 2 * R * d * 16
/// states    = 16 * D * (d + 1)          (S and P, when an adapter is used)
/// precision = (codes + metadata + residual + states) / (2 * N * d)
/// ```
///
/// Per-head states are amortized over that head's own K/V elements, so the
/// layer and head counts cancel.
pub fn average_precision(p: &PrecisionParams) -> Result<PrecisionReport> {
    if p.seq_len <= p.window {
        return Err(Error::argument(format!(
            "seq_len {} must exceed the residual window {}",
            p.seq_len, p.window
        )));
    }
    if p.head_dim == 0 || p.group_size == 0 {
        return Err(Error::argument("head_dim and group_size must be positive"));
    }
    let n = p.seq_len as f64;
    let d = p.head_dim as f64;
    let r = p.window as f64;
    let quantized = (n - r) * d;
    let code_bits = 2.0 * quantized * p.bits as f64;
    let metadata_bits = 2.0 * (quantized / p.group_size as f64) * 2.0 * p.metadata_bits as f64;
    let residual_bits = 2.0 * r * d * 16.0;
    let state_bits = p.adapter_rank.map_or(0.0, |rank| 16.0 * rank as f64 * (d + 1.0));
    let elements = 2.0 * n * d;
    let total = code_bits + metadata_bits + residual_bits + state_bits;
    let mut assumptions = vec![
        format!("sequence length N = {}", p.seq_len),
        format!("head dim d = {}, group size G = {}", p.head_dim, p.group_size),
        format!("{}-bit codes for keys and values", p.bits),
        format!("{}-bit scale and {}-bit zero per group", p.metadata_bits, p.metadata_bits),
        format!("residual window R = {} tokens stored at 16 bits", p.window),
    ];
    match p.adapter_rank {
        Some(rank) => assumptions.push(format!(
            "correction states S (D x d) and P (D) per KV head at 16 bits, D = {rank}"
        )),
        None => assumptions.push("no correction states".to_string()),
    }
    assumptions.push("states amortized over the same head's K and V elements".to_string());
    Ok(PrecisionReport {
        params: *p,
        bits_per_element: total / elements,
        code_bits,
        metadata_bits,
        residual_bits,
        state_bits,
        elements,
        assumptions,
    })
}

impl PrecisionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankPoint {
    pub rank: usize,
    pub parameter_count: usize,
    /// Mean attention-weight MSE over heads after training.
    pub mse_weights: f64,
    pub mse_outputs: f64,
}

/// Trains adapters at each rank with the same seed and step budget and
/// reports the post-training error.
pub fn rank_ablation(
    trace: &AttentionTrace,
    ranks: &[usize],
    base: &TrainConfig,
    cfg_v: QuantConfig,
) -> Result<Vec<RankPoint>> {
    if let Some(&r) = ranks.iter().find(|&&r| r < 2 || r % 2 != 0) {
        return Err(Error::argument(format!("rank {r} must be even and >= 2")));
    }
    ranks
        .iter()
        .map(|&rank| {
            let cfg = TrainConfig {
                rank,
                ..base.clone()
            };
            let trained = train(trace, &cfg)?;
            let adapters: Vec<CorrectionAdapter> = trained.into_iter().map(|h| h.adapter).collect();
            let report = attention_error_report(trace, cfg.key_config, cfg_v, Some(&adapters))?;
            Ok(RankPoint {
                rank,
                parameter_count: adapters[0].parameter_count(),
                mse_weights: report.mean_mse_weights(),
                mse_outputs: report.mean_mse_outputs(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{generate_synthetic_trace, SyntheticParams};

    fn trace(seed: u64, gain: f64) -> AttentionTrace {
        generate_synthetic_trace(&SyntheticParams {
            seq_len: 128,
            head_dim: 32,
            outlier_channels: 1,
            outlier_gain: gain,
            seed,
            ..SyntheticParams::default()
        })
        .unwrap()
    }

    #[test]
    fn constant_keys_have_zero_scales() {
        let k = Matrix::from_fn(16, 8, |_, _| 3.5);
        let raw = [(Axis::Channel, Rotation::None), (Axis::Token, Rotation::None)];
        for s in scale_factor_stats(&k, &raw, 2, 8).unwrap() {
            assert!(s.mean_scale.abs() < 1e-12, "{}: {}", s.label, s.mean_scale);
        }
    }

    #[test]
    fn outlier_scale_ordering() {
        let t = trace(1, 100.0);
        let variants = [
            (Axis::Channel, Rotation::None),
            (Axis::Token, Rotation::PostMultiply),
            (Axis::Token, Rotation::None),
        ];
        let s = scale_factor_stats(&t.head(0, 0).k, &variants, 2, 128).unwrap();
        assert!(s[0].mean_scale < s[1].mean_scale);
        assert!(s[1].mean_scale < s[2].mean_scale);
    }

    #[test]
    fn passthrough_report_is_exact() {
        let t = trace(2, 10.0);
        let p = QuantConfig::passthrough();
        let r = attention_error_report(&t, p, p, None).unwrap();
        assert!(r.mean_mse_weights() <= 1e-20 && r.mean_mse_outputs() <= 1e-20);
        assert!(r.to_jsonl().lines().count() == 1);
    }

    #[test]
    fn passthrough_sweep_is_flat() {
        let t = trace(3, 10.0);
        let g = config_sweep(&t, 16, 128).unwrap();
        assert_eq!(g.cells.len(), 36);
        assert!(g.cells.iter().all(|c| c.mse <= 1e-20));
        assert_eq!(g.to_triples().lines().count(), 37);
    }

    #[test]
    fn precision_examples() {
        let none = average_precision(&PrecisionParams {
            window: 0,
            ..PrecisionParams::kivi()
        })
        .unwrap();
        assert_eq!(none.bits_per_element, 2.25);
        let kivi = average_precision(&PrecisionParams::kivi()).unwrap().bits_per_element;
        assert!((kivi - (2.25 + 13.75 * 128.0 / 8192.0)).abs() < 1e-12);
        let kvlinc = average_precision(&PrecisionParams::kvlinc()).unwrap().bits_per_element;
        let states = 16.0 * 256.0 * 129.0 / (2.0 * 8192.0 * 128.0);
        assert!((kvlinc - kivi - states).abs() < 1e-12);
        assert!(average_precision(&PrecisionParams {
            seq_len: 128,
            ..PrecisionParams::kivi()
        })
        .is_err());
    }

    #[test]
    fn precision_decreases_with_length() {
        let mut last = f64::INFINITY;
        for n in [256, 512, 1024, 4096, 16384] {
            let p = average_precision(&PrecisionParams {
                seq_len: n,
                ..PrecisionParams::kvlinc()
            })
            .unwrap()
            .bits_per_element;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn rank_ablation_parameter_counts() {
        let t = generate_synthetic_trace(&SyntheticParams {
            seq_len: 32,
            head_dim: 8,
            outlier_channels: 1,
            ..SyntheticParams::default()
        })
        .unwrap();
        let base = TrainConfig {
            steps: 2,
            key_config: QuantConfig::channel(2, 16).unwrap(),
            ..TrainConfig::default()
        };
        let cfg_v = QuantConfig::token(2, 8).unwrap();
        let one = rank_ablation(&t, &[4], &base, cfg_v).unwrap();
        assert_eq!(one.len(), 1);
        let pts = rank_ablation(&t, &[4, 8], &base, cfg_v).unwrap();
        assert_eq!(pts[1].parameter_count, 2 * pts[0].parameter_count);
        assert!(rank_ablation(&t, &[3], &base, cfg_v).is_err());
    }
}
