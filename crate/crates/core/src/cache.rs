//! Streaming per-head KV cache.
//!
//! New tokens land in a full-precision residual window of capacity `R + G`.
//! When the window is full the oldest `G` tokens are flushed: keys are
//! quantized channel-wise (raw), values token-wise (in the value domain, i.e.
//! after the optional Hadamard post-rotation), and the correction states
//!
//! ```text
//! S += phi_k(K_e)^T V_q        (rank x d)
//! P += phi_k(K_e)              (rank)
//! ```
//!
//! are updated from the key errors `K_e = K - K_q` of the flushed tokens.
//!
//! # KVLC snapshot layout
//!
//! Little-endian throughout. A 48-byte header (`"KVLC"` followed by eleven
//! `u32`: version, head_dim, rank, group_size, window, key_bits, value_bits,
//! value_group, value_rotation, quantized_tokens, residual_tokens) is followed
//! by key codes, value codes, key scales, key zeros, value scales, value
//! zeros, residual keys, residual values, `S` and `P`. Codes are 32-bit packed
//! words, one packed run per `G`-token chunk; everything else is `f16`.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::adapter::CorrectionAdapter;
use crate::error::{Error, Result};
use crate::hadamard::HadamardMatrix;
use crate::io_util::{read_f16, read_u32, write_f16, write_u32, ByteReader};
use crate::quant::{packed_words, Axis, QuantConfig, QuantizedTensor, Rotation};
use crate::tensor::Matrix;

pub const CACHE_MAGIC: &[u8; 4] = b"KVLC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_HEADER_BYTES: usize = 4 + 11 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheConfig {
    pub head_dim: usize,
    pub key_bits: u8,
    pub value_bits: u8,
    /// Tokens per flushed chunk; also the channel-wise key group size.
    pub group_size: usize,
    /// Channels per token-wise value group.
    pub value_group: usize,
    /// Residual tokens always kept in full precision (`R`).
    pub window: usize,
    pub value_rotation: Rotation,
    /// Correction-state rank `D`; 0 disables the states.
    pub rank: usize,
}

impl CacheConfig {
    /// 2-bit keys and values, `G = 128`, `R = 128`, rotated values and
    /// rank-256 correction states.
    pub fn kvlinc(head_dim: usize) -> Self {
        Self {
            head_dim,
            key_bits: 2,
            value_bits: 2,
            group_size: 128,
            value_group: 128,
            window: 128,
            value_rotation: Rotation::PostMultiply,
            rank: 256,
        }
    }

    /// Same quantizer without value rotation or correction states.
    pub fn kivi(head_dim: usize) -> Self {
        Self {
            value_rotation: Rotation::None,
            rank: 0,
            ..Self::kvlinc(head_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.group_size == 0 || self.value_group == 0 {
            return Err(Error::argument("head_dim and group sizes must be positive"));
        }
        for bits in [self.key_bits, self.value_bits] {
            if !matches!(bits, 2 | 3 | 4 | 8) {
                return Err(Error::argument(format!(
                    "cache bits must be one of 2, 3, 4, 8 (got {bits})"
                )));
            }
        }
        if self.value_rotation == Rotation::PreMultiply {
            return Err(Error::argument(
                "cache values support no rotation or post-rotation only",
            ));
        }
        if !self.rank.is_multiple_of(2) {
            return Err(Error::argument("correction rank must be even"));
        }
        Ok(())
    }

    pub fn key_quant(&self) -> QuantConfig {
        QuantConfig {
            bits: self.key_bits,
            group_size: self.group_size,
            axis: Axis::Channel,
            rotation: Rotation::None,
        }
    }

    pub fn value_quant(&self) -> QuantConfig {
        QuantConfig {
            bits: self.value_bits,
            group_size: self.value_group,
            axis: Axis::Token,
            rotation: self.value_rotation,
        }
    }
}

/// Byte counts of a cache snapshot, by section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Footprint {
    pub header: usize,
    pub packed_codes: usize,
    pub scales_zeros: usize,
    pub residual: usize,
    pub correction_states: usize,
    /// Payload bytes, excluding the header.
    pub total: usize,
}

impl Footprint {
    pub fn serialized_len(&self) -> usize {
        self.header + self.total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    config: CacheConfig,
    hadamard: Option<HadamardMatrix>,
    key_chunks: Vec<QuantizedTensor>,
    value_chunks: Vec<QuantizedTensor>,
    residual_k: Matrix,
    residual_v: Matrix,
    s_state: Matrix,
    p_state: Vec<f64>,
}

impl KvCache {
    pub fn new(config: CacheConfig) -> Result<Self> {
        config.validate()?;
        let hadamard = match config.value_rotation {
            Rotation::PostMultiply => Some(HadamardMatrix::new(config.head_dim)?),
            _ => None,
        };
        Ok(Self {
            config,
            hadamard,
            key_chunks: Vec::new(),
            value_chunks: Vec::new(),
            residual_k: Matrix::zeros(0, config.head_dim),
            residual_v: Matrix::zeros(0, config.head_dim),
            s_state: Matrix::zeros(config.rank, config.head_dim),
            p_state: vec![0.0; config.rank],
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn hadamard(&self) -> Option<&HadamardMatrix> {
        self.hadamard.as_ref()
    }

    pub fn key_chunks(&self) -> &[QuantizedTensor] {
        &self.key_chunks
    }

    pub fn value_chunks(&self) -> &[QuantizedTensor] {
        &self.value_chunks
    }

    /// Residual keys, raw.
    pub fn residual_k(&self) -> &Matrix {
        &self.residual_k
    }

    /// Residual values in the value domain (rotated when configured).
    pub fn residual_v(&self) -> &Matrix {
        &self.residual_v
    }

    /// `S`, stored `rank x d`.
    pub fn s_state(&self) -> &Matrix {
        &self.s_state
    }

    pub fn p_state(&self) -> &[f64] {
        &self.p_state
    }

    pub fn quantized_tokens(&self) -> usize {
        self.key_chunks.len() * self.config.group_size
    }

    pub fn residual_len(&self) -> usize {
        self.residual_k.rows()
    }

    pub fn tokens_total(&self) -> usize {
        self.quantized_tokens() + self.residual_len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens_total() == 0
    }

    /// Maps a value row into the stored domain.
    pub fn to_value_domain(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.hadamard {
            Some(h) => h.rotate_row(v),
            None => Ok(v.to_vec()),
        }
    }

    /// Maps a stored-domain row back (`x * H^T`).
    pub fn from_value_domain(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.hadamard {
            Some(h) => h.matrix().transpose().vecmul(v),
            None => Ok(v.to_vec()),
        }
    }

    fn check_adapter<'a>(
        &self,
        adapter: Option<&'a CorrectionAdapter>,
    ) -> Result<Option<&'a CorrectionAdapter>> {
        match adapter {
            Some(a) if a.enabled => {
                if self.config.rank == 0 {
                    return Err(Error::argument(
                        "cache has no correction states but an enabled adapter was given",
                    ));
                }
                if a.rank() != self.config.rank || a.head_dim() != self.config.head_dim {
                    return Err(Error::Dimension {
                        op: "cache adapter",
                        left: (self.config.head_dim, self.config.rank),
                        right: (a.head_dim(), a.rank()),
                    });
                }
                Ok(Some(a))
            }
            _ => Ok(None),
        }
    }

    /// Appends one token. Flushes the oldest `G` residual tokens when the
    /// window reaches `R + G`.
    pub fn append(&mut self, k: &[f64], v: &[f64], adapter: Option<&CorrectionAdapter>) -> Result<()> {
        let d = self.config.head_dim;
        if k.len() != d || v.len() != d {
            return Err(Error::Dimension {
                op: "cache append",
                left: (1, d),
                right: (k.len(), v.len()),
            });
        }
        let adapter = self.check_adapter(adapter)?;
        let v_stored = self.to_value_domain(v)?;
        self.residual_k.push_row(k)?;
        self.residual_v.push_row(&v_stored)?;
        if self.residual_len() >= self.config.window + self.config.group_size {
            self.flush_group(adapter)?;
        }
        Ok(())
    }

    /// Quantizes the oldest `G` residual tokens into a new chunk.
    pub fn flush_group(&mut self, adapter: Option<&CorrectionAdapter>) -> Result<()> {
        let g = self.config.group_size;
        if self.residual_len() < g {
            return Err(Error::State(format!(
                "flush needs {g} residual tokens, have {}",
                self.residual_len()
            )));
        }
        let adapter = self.check_adapter(adapter)?;
        let k = self.residual_k.drain_front_rows(g);
        let v = self.residual_v.drain_front_rows(g);
        let kq = QuantizedTensor::quantize(&k, self.config.key_quant())?;
        let vq = QuantizedTensor::quantize(&v, self.config.value_quant())?;
        if let Some(a) = adapter {
            let k_err = k.sub(&kq.dequantize())?;
            let v_deq = vq.dequantize();
            for i in 0..g {
                let phi = a.phi_k(k_err.row(i))?;
                let v_row = v_deq.row(i);
                for (r, &p) in phi.iter().enumerate() {
                    self.p_state[r] += p;
                    for (s, &x) in self.s_state.row_mut(r).iter_mut().zip(v_row) {
                        *s += p * x;
                    }
                }
            }
        }
        self.key_chunks.push(kq);
        self.value_chunks.push(vq);
        Ok(())
    }

    /// Dequantized keys of the quantized history (`quantized_tokens x d`).
    pub fn dequantized_keys(&self) -> Matrix {
        stack(self.key_chunks.iter().map(|c| c.dequantize()), self.config.head_dim)
    }

    /// Dequantized values of the quantized history, in the value domain.
    pub fn dequantized_values(&self) -> Matrix {
        stack(self.value_chunks.iter().map(|c| c.dequantize()), self.config.head_dim)
    }

    pub fn memory_footprint(&self) -> Footprint {
        let d = self.config.head_dim;
        let packed_codes: usize = self
            .key_chunks
            .iter()
            .chain(&self.value_chunks)
            .map(|c| c.code_bytes())
            .sum();
        let scales_zeros: usize = self
            .key_chunks
            .iter()
            .chain(&self.value_chunks)
            .map(|c| c.metadata_bytes())
            .sum();
        let residual = 2 * self.residual_len() * d * 2;
        let correction_states = self.config.rank * (d + 1) * 2;
        Footprint {
            header: CACHE_HEADER_BYTES,
            packed_codes,
            scales_zeros,
            residual,
            correction_states,
            total: packed_codes + scales_zeros + residual + correction_states,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        w.write_all(CACHE_MAGIC)?;
        for v in [
            CACHE_VERSION,
            c.head_dim as u32,
            c.rank as u32,
            c.group_size as u32,
            c.window as u32,
            c.key_bits as u32,
            c.value_bits as u32,
            c.value_group as u32,
            rotation_code(c.value_rotation),
            self.quantized_tokens() as u32,
            self.residual_len() as u32,
        ] {
            write_u32(w, v)?;
        }
        for chunk in self.key_chunks.iter().chain(&self.value_chunks) {
            for &word in chunk.packed() {
                write_u32(w, word)?;
            }
        }
        for chunks in [&self.key_chunks, &self.value_chunks] {
            for chunk in chunks.iter() {
                for &s in chunk.scales() {
                    write_f16(w, s)?;
                }
            }
            for chunk in chunks.iter() {
                for &z in chunk.zeros() {
                    write_f16(w, z)?;
                }
            }
        }
        for m in [&self.residual_k, &self.residual_v, &self.s_state] {
            for &x in m.data() {
                write_f16(w, x)?;
            }
        }
        for &p in &self.p_state {
            write_f16(w, p)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.memory_footprint().serialized_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Reads a snapshot. Scales, zeros, residual and states come back rounded
    /// to `f16`.
    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CACHE_MAGIC {
            return Err(Error::format(0, "bad cache magic"));
        }
        let mut fields = [0u32; 11];
        for f in fields.iter_mut() {
            *f = read_u32(r)?;
        }
        if fields[0] != CACHE_VERSION {
            return Err(Error::format(4, format!("unsupported cache version {}", fields[0])));
        }
        let value_rotation = match fields[8] {
            0 => Rotation::None,
            2 => Rotation::PostMultiply,
            other => return Err(Error::format(36, format!("bad value rotation {other}"))),
        };
        let config = CacheConfig {
            head_dim: fields[1] as usize,
            rank: fields[2] as usize,
            group_size: fields[3] as usize,
            window: fields[4] as usize,
            key_bits: fields[5] as u8,
            value_bits: fields[6] as u8,
            value_group: fields[7] as usize,
            value_rotation,
        };
        let mut cache =
            KvCache::new(config).map_err(|e| Error::format(4, format!("invalid header: {e}")))?;
        let quantized = fields[9] as usize;
        let residual = fields[10] as usize;
        let g = config.group_size;
        let d = config.head_dim;
        if !quantized.is_multiple_of(g) {
            return Err(Error::format(40, "quantized token count is not a multiple of G"));
        }
        let chunks = quantized / g;
        let (kc, vc) = (config.key_quant(), config.value_quant());
        let read_words = |r: &mut ByteReader<R>, n: usize| -> Result<Vec<u32>> {
            (0..n).map(|_| read_u32(r)).collect()
        };
        let key_words: Vec<Vec<u32>> = (0..chunks)
            .map(|_| read_words(r, packed_words(g * d, kc.bits)))
            .collect::<Result<_>>()?;
        let value_words: Vec<Vec<u32>> = (0..chunks)
            .map(|_| read_words(r, packed_words(g * d, vc.bits)))
            .collect::<Result<_>>()?;
        let key_groups = d * g.div_ceil(kc.group_size);
        let value_groups = g * d.div_ceil(vc.group_size);
        let read_halfs = |r: &mut ByteReader<R>, n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| read_f16(r)).collect()
        };
        let ks = read_halfs(r, chunks * key_groups)?;
        let kz = read_halfs(r, chunks * key_groups)?;
        let vs = read_halfs(r, chunks * value_groups)?;
        let vz = read_halfs(r, chunks * value_groups)?;
        for (i, words) in key_words.into_iter().enumerate() {
            let span = i * key_groups..(i + 1) * key_groups;
            cache.key_chunks.push(QuantizedTensor::from_parts(
                words,
                ks[span.clone()].to_vec(),
                kz[span].to_vec(),
                g,
                d,
                kc,
            )?);
        }
        for (i, words) in value_words.into_iter().enumerate() {
            let span = i * value_groups..(i + 1) * value_groups;
            cache.value_chunks.push(QuantizedTensor::from_parts(
                words,
                vs[span.clone()].to_vec(),
                vz[span].to_vec(),
                g,
                d,
                vc,
            )?);
        }
        cache.residual_k = Matrix::new(residual, d, read_halfs(r, residual * d)?)?;
        cache.residual_v = Matrix::new(residual, d, read_halfs(r, residual * d)?)?;
        cache.s_state = Matrix::new(config.rank, d, read_halfs(r, config.rank * d)?)?;
        cache.p_state = read_halfs(r, config.rank)?;
        if !r.at_eof()? {
            return Err(Error::format(r.offset(), "trailing bytes after cache snapshot"));
        }
        Ok(cache)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut ByteReader::new(&bytes[..]))
    }
}

fn rotation_code(r: Rotation) -> u32 {
    match r {
        Rotation::None => 0,
        Rotation::PreMultiply => 1,
        Rotation::PostMultiply => 2,
    }
}

fn stack(parts: impl Iterator<Item = Matrix>, cols: usize) -> Matrix {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Matrix::new(rows, cols, data).expect("chunks share the head dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, seeded_rng};

    fn small_config() -> CacheConfig {
        CacheConfig {
            head_dim: 8,
            key_bits: 2,
            value_bits: 2,
            group_size: 4,
            value_group: 8,
            window: 4,
            value_rotation: Rotation::PostMultiply,
            rank: 8,
        }
    }

    fn feed(cache: &mut KvCache, k: &Matrix, v: &Matrix, a: Option<&CorrectionAdapter>) {
        for i in 0..k.rows() {
            cache.append(k.row(i), v.row(i), a).unwrap();
        }
    }

    #[test]
    fn single_append() {
        let mut c = KvCache::new(small_config()).unwrap();
        c.append(&[1.0; 8], &[2.0; 8], None).unwrap();
        assert_eq!(c.residual_len(), 1);
        assert!(c.key_chunks().is_empty());
    }

    #[test]
    fn window_policy_128() {
        let cfg = CacheConfig::kivi(16);
        let mut c = KvCache::new(cfg).unwrap();
        let mut rng = seeded_rng(1);
        let k = Matrix::random_normal(256, 16, &mut rng);
        feed(&mut c, &k, &k, None);
        assert_eq!(c.quantized_tokens(), 128);
        assert_eq!(c.residual_len(), 128);
        assert_eq!(c.key_chunks().len(), 1);
    }

    #[test]
    fn window_invariant_while_streaming() {
        let cfg = small_config();
        let mut c = KvCache::new(cfg).unwrap();
        for t in 0..50 {
            c.append(&[t as f64; 8], &[1.0; 8], None).unwrap();
            assert!(c.residual_len() < cfg.window + cfg.group_size);
            assert_eq!(c.quantized_tokens() % cfg.group_size, 0);
            assert_eq!(c.tokens_total(), t + 1);
        }
    }

    #[test]
    fn flush_needs_a_full_group() {
        let mut c = KvCache::new(small_config()).unwrap();
        c.append(&[0.0; 8], &[0.0; 8], None).unwrap();
        assert!(matches!(c.flush_group(None), Err(Error::State(_))));
    }

    #[test]
    fn streaming_matches_one_shot() {
        let cfg = small_config();
        let mut rng = seeded_rng(5);
        let k = Matrix::random_normal(20, 8, &mut rng);
        let v = Matrix::random_normal(20, 8, &mut rng);
        let a = CorrectionAdapter::random(8, 8, 0.5, 3).unwrap();
        let mut c = KvCache::new(cfg).unwrap();
        feed(&mut c, &k, &v, Some(&a));
        assert_eq!(c.key_chunks().len(), 4);
        let h = HadamardMatrix::new(8).unwrap();
        let vh = v.matmul(h.matrix()).unwrap();
        let mut s = Matrix::zeros(8, 8);
        let mut p = vec![0.0; 8];
        for chunk in 0..4 {
            let rows = chunk * 4..chunk * 4 + 4;
            let kq = QuantizedTensor::quantize(&k.slice_rows(rows.clone()), cfg.key_quant()).unwrap();
            let vq = QuantizedTensor::quantize(&vh.slice_rows(rows.clone()), cfg.value_quant()).unwrap();
            assert_eq!(kq, c.key_chunks()[chunk]);
            assert_eq!(vq, c.value_chunks()[chunk]);
            let ke = k.slice_rows(rows).sub(&kq.dequantize()).unwrap();
            let vd = vq.dequantize();
            for i in 0..4 {
                let phi = a.phi_k(ke.row(i)).unwrap();
                for r in 0..8 {
                    p[r] += phi[r];
                    for j in 0..8 {
                        s.set(r, j, s.get(r, j) + phi[r] * vd.get(i, j));
                    }
                }
            }
        }
        assert!(c.s_state().sub(&s).unwrap().max_abs() <= 1e-10);
        for (x, y) in c.p_state().iter().zip(&p) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn disabled_adapter_leaves_states_zero() {
        let mut rng = seeded_rng(9);
        let k = Matrix::random_normal(16, 8, &mut rng);
        let off = CorrectionAdapter::disabled(8, 8).unwrap();
        let mut c = KvCache::new(small_config()).unwrap();
        feed(&mut c, &k, &k, Some(&off));
        assert!(!c.key_chunks().is_empty());
        assert_eq!(c.s_state().max_abs(), 0.0);
        assert!(c.p_state().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn grid_keys_accumulate_uniform_features() {
        // Every key channel takes values on {0, 1, 2, 3} within each chunk.
        let k = Matrix::from_fn(16, 8, |r, _| (r % 4) as f64);
        let a = CorrectionAdapter::random(8, 8, 1.0, 7).unwrap();
        let mut c = KvCache::new(small_config()).unwrap();
        feed(&mut c, &k, &k, Some(&a));
        let n = c.quantized_tokens() as f64;
        let phi0 = a.phi_k(&[0.0; 8]).unwrap();
        for (p, f) in c.p_state().iter().zip(&phi0) {
            assert_eq!(*p, n * f);
        }
        assert!((dot(&phi0, &[1.0; 8]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_adapter_rejected() {
        let a = CorrectionAdapter::random(8, 4, 0.1, 1).unwrap();
        let mut c = KvCache::new(small_config()).unwrap();
        assert!(c.append(&[0.0; 8], &[0.0; 8], Some(&a)).is_err());
        assert!(c.append(&[0.0; 3], &[0.0; 8], None).is_err());
    }

    #[test]
    fn empty_footprint() {
        let c = KvCache::new(CacheConfig::kivi(128)).unwrap();
        let f = c.memory_footprint();
        assert_eq!(
            (f.packed_codes, f.scales_zeros, f.residual, f.correction_states, f.total),
            (0, 0, 0, 0, 0)
        );
        assert_eq!(c.to_bytes().len(), CACHE_HEADER_BYTES);
    }

    #[test]
    fn footprint_matches_serialized_length() {
        let mut rng = seeded_rng(11);
        let k = Matrix::random_normal(23, 8, &mut rng);
        let a = CorrectionAdapter::random(8, 8, 0.3, 1).unwrap();
        let mut c = KvCache::new(small_config()).unwrap();
        feed(&mut c, &k, &k, Some(&a));
        let f = c.memory_footprint();
        assert_eq!(c.to_bytes().len(), f.serialized_len());
        // 4 chunks x 4 tokens x 8 channels at 2 bits, keys and values.
        assert_eq!(f.packed_codes, 2 * 4 * packed_words(32, 2) * 4);
        assert_eq!(f.scales_zeros, 4 * (8 + 4) * 4);
        assert_eq!(f.residual, 7 * 8 * 4);
        assert_eq!(f.correction_states, 8 * 9 * 2);
    }

    #[test]
    fn snapshot_round_trip() {
        let mut rng = seeded_rng(12);
        let k = Matrix::random_normal(27, 8, &mut rng);
        let a = CorrectionAdapter::random(8, 8, 0.3, 2).unwrap();
        let mut c = KvCache::new(small_config()).unwrap();
        feed(&mut c, &k, &k, Some(&a));
        let bytes = c.to_bytes();
        let back = KvCache::read_from(&mut ByteReader::new(&bytes[..])).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.quantized_tokens(), c.quantized_tokens());
        for (x, y) in back.key_chunks().iter().zip(c.key_chunks()) {
            assert_eq!(x.packed(), y.packed());
        }
        assert!(matches!(
            KvCache::read_from(&mut ByteReader::new(&bytes[..bytes.len() - 1])),
            Err(Error::Format { .. })
        ));
    }
}
