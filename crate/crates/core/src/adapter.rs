//! Linear correction adapters.
//!
//! A correction adapter owns two feature maps, one for queries and one for
//! key quantization errors. Each is
//! `phi(x) = [softmax(x W1), softmax(x W2)]`, with `W1, W2` of shape
//! `d x D/2`. The correction added to the attention mass of key `i` is
//! `f(q, k_err_i) = phi_q(q) . phi_k(k_err_i)`, and the corrected weights are
//!
//! ```text
//! A_hat_i = (exp(s_i) + f_i) / (sum_j exp(s_j) + sum_j f_j),   s_i = q . kq_i / sqrt(d)
//! ```
//!
//! Adapters are trained by distilling full-precision attention weights into
//! `A_hat` under a cross-entropy loss, with analytic gradients and Adam.

use std::io::{Read, Write};

use rand::seq::index;
use rayon::prelude::*;

use crate::attention::attention_reference;
use crate::error::{Error, Result};
use crate::io_util::{read_f32, read_u32, write_f32, write_u32, ByteReader};
use crate::quant::{quantize_tensor, QuantConfig};
use crate::tensor::{derive_seed, dot, seeded_rng, softmax, Matrix};
use crate::trace::AttentionTrace;

pub const ADAPTER_MAGIC: &[u8; 4] = b"KVLA";
pub const ADAPTER_VERSION: u32 = 1;

/// Default rank of the correction feature maps.
pub const DEFAULT_RANK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionAdapter {
    pub w1_q: Matrix,
    pub w2_q: Matrix,
    pub w1_k: Matrix,
    pub w2_k: Matrix,
    head_dim: usize,
    rank: usize,
    pub enabled: bool,
}

/// Gradients with the same layout as the adapter weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub w1_q: Matrix,
    pub w2_q: Matrix,
    pub w1_k: Matrix,
    pub w2_k: Matrix,
}

impl AdapterGrads {
    fn zeros(d: usize, half: usize) -> Self {
        Self {
            w1_q: Matrix::zeros(d, half),
            w2_q: Matrix::zeros(d, half),
            w1_k: Matrix::zeros(d, half),
            w2_k: Matrix::zeros(d, half),
        }
    }

    pub fn as_array(&self) -> [&Matrix; 4] {
        [&self.w1_q, &self.w2_q, &self.w1_k, &self.w2_k]
    }

    fn scale(&mut self, s: f64) {
        for m in [
            &mut self.w1_q,
            &mut self.w2_q,
            &mut self.w1_k,
            &mut self.w2_k,
        ] {
            m.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn check_rank(head_dim: usize, rank: usize) -> Result<()> {
    if head_dim == 0 {
        return Err(Error::argument("head dimension must be positive"));
    }
    if rank < 2 || !rank.is_multiple_of(2) {
        return Err(Error::argument(format!(
            "adapter rank must be even and >= 2 (got {rank})"
        )));
    }
    Ok(())
}

impl CorrectionAdapter {
    /// All-zero weights: both feature maps are uniform for every input.
    pub fn zeros(head_dim: usize, rank: usize) -> Result<Self> {
        check_rank(head_dim, rank)?;
        let half = rank / 2;
        Ok(Self {
            w1_q: Matrix::zeros(head_dim, half),
            w2_q: Matrix::zeros(head_dim, half),
            w1_k: Matrix::zeros(head_dim, half),
            w2_k: Matrix::zeros(head_dim, half),
            head_dim,
            rank,
            enabled: true,
        })
    }

    /// Weights drawn i.i.d. from `N(0, init_std^2)` in the order
    /// `w1_q, w2_q, w1_k, w2_k`, each row-major.
    pub fn random(head_dim: usize, rank: usize, init_std: f64, seed: u64) -> Result<Self> {
        check_rank(head_dim, rank)?;
        let mut rng = seeded_rng(seed);
        let half = rank / 2;
        let mut draw = || Matrix::random_normal(head_dim, half, &mut rng).map(|v| v * init_std);
        Ok(Self {
            w1_q: draw(),
            w2_q: draw(),
            w1_k: draw(),
            w2_k: draw(),
            head_dim,
            rank,
            enabled: true,
        })
    }

    /// An adapter that contributes no correction anywhere.
    pub fn disabled(head_dim: usize, rank: usize) -> Result<Self> {
        let mut a = Self::zeros(head_dim, rank)?;
        a.enabled = false;
        Ok(a)
    }

    pub fn from_weights(w1_q: Matrix, w2_q: Matrix, w1_k: Matrix, w2_k: Matrix) -> Result<Self> {
        let (d, half) = w1_q.shape();
        for m in [&w2_q, &w1_k, &w2_k] {
            if m.shape() != (d, half) {
                return Err(Error::Dimension {
                    op: "adapter weights",
                    left: (d, half),
                    right: m.shape(),
                });
            }
        }
        check_rank(d, 2 * half)?;
        if ![&w1_q, &w2_q, &w1_k, &w2_k].iter().all(|m| m.is_finite()) {
            return Err(Error::argument("adapter weights must be finite"));
        }
        Ok(Self {
            w1_q,
            w2_q,
            w1_k,
            w2_k,
            head_dim: d,
            rank: 2 * half,
            enabled: true,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Number of trainable parameters: `4 * d * D/2`.
    pub fn parameter_count(&self) -> usize {
        4 * self.head_dim * (self.rank / 2)
    }

    pub fn phi_q(&self, q: &[f64]) -> Result<Vec<f64>> {
        feature_map(q, &self.w1_q, &self.w2_q)
    }

    pub fn phi_k(&self, k_err: &[f64]) -> Result<Vec<f64>> {
        feature_map(k_err, &self.w1_k, &self.w2_k)
    }

    fn weights_mut(&mut self) -> [&mut Matrix; 4] {
        [
            &mut self.w1_q,
            &mut self.w2_q,
            &mut self.w1_k,
            &mut self.w2_k,
        ]
    }

    pub fn weights(&self) -> [&Matrix; 4] {
        [&self.w1_q, &self.w2_q, &self.w1_k, &self.w2_k]
    }

    /// Writes one KVLA record.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ADAPTER_MAGIC)?;
        write_u32(w, ADAPTER_VERSION)?;
        write_u32(w, self.head_dim as u32)?;
        write_u32(w, self.rank as u32)?;
        for m in self.weights() {
            for &v in m.data() {
                write_f32(w, v as f32)?;
            }
        }
        Ok(())
    }

    /// Reads one KVLA record. Weights come back rounded to `f32`.
    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        let start = r.offset();
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ADAPTER_MAGIC {
            return Err(Error::format(start, "bad adapter magic"));
        }
        let version = read_u32(r)?;
        if version != ADAPTER_VERSION {
            return Err(Error::format(
                start + 4,
                format!("unsupported adapter version {version}"),
            ));
        }
        let d = read_u32(r)? as usize;
        let rank = read_u32(r)? as usize;
        if check_rank(d, rank).is_err() {
            return Err(Error::format(start + 8, "invalid adapter dimensions"));
        }
        let half = rank / 2;
        let mut mats = Vec::with_capacity(4);
        for _ in 0..4 {
            let mut data = Vec::with_capacity(d * half);
            for _ in 0..d * half {
                data.push(read_f32(r)? as f64);
            }
            mats.push(Matrix::new(d, half, data)?);
        }
        let w2_k = mats.pop().unwrap();
        let w1_k = mats.pop().unwrap();
        let w2_q = mats.pop().unwrap();
        let w1_q = mats.pop().unwrap();
        Self::from_weights(w1_q, w2_q, w1_k, w2_k)
    }
}

/// Writes adapters back to back into one KVLA file.
pub fn write_adapters(path: &std::path::Path, adapters: &[CorrectionAdapter]) -> Result<()> {
    let mut buf = Vec::new();
    for a in adapters {
        a.write_to(&mut buf)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads every KVLA record in a file.
pub fn read_adapters(path: &std::path::Path) -> Result<Vec<CorrectionAdapter>> {
    let bytes = std::fs::read(path)?;
    let len = bytes.len() as u64;
    let mut r = ByteReader::new(&bytes[..]);
    let mut out = Vec::new();
    while r.offset() < len {
        out.push(CorrectionAdapter::read_from(&mut r)?);
    }
    if out.is_empty() {
        return Err(Error::format(0, "no adapter records"));
    }
    Ok(out)
}

/// `[softmax(x W1), softmax(x W2)]`. The output has length `2 * W1.cols()`
/// and sums to 2.
pub fn feature_map(x: &[f64], w1: &Matrix, w2: &Matrix) -> Result<Vec<f64>> {
    if w1.shape() != w2.shape() {
        return Err(Error::Dimension {
            op: "feature_map",
            left: w1.shape(),
            right: w2.shape(),
        });
    }
    let mut out = softmax(&w1.vecmul(x)?);
    out.extend(softmax(&w2.vecmul(x)?));
    Ok(out)
}

/// `phi_q(q) . phi_k(k_err)`, in `(0, 2]`.
pub fn correction_term(q: &[f64], k_err: &[f64], adapter: &CorrectionAdapter) -> Result<f64> {
    Ok(dot(&adapter.phi_q(q)?, &adapter.phi_k(k_err)?))
}

/// Corrected attention weights of one query over a causal prefix.
///
/// `keys_q` and `key_err` hold the prefix (rows `0..n`). With a disabled
/// adapter this is the ordinary softmax of the quantized logits.
pub fn corrected_weights(
    q: &[f64],
    keys_q: &Matrix,
    key_err: &Matrix,
    adapter: &CorrectionAdapter,
) -> Result<Vec<f64>> {
    let d = q.len();
    if keys_q.cols() != d || key_err.shape() != keys_q.shape() {
        return Err(Error::Dimension {
            op: "corrected_weights",
            left: keys_q.shape(),
            right: key_err.shape(),
        });
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..keys_q.rows())
        .map(|i| dot(q, keys_q.row(i)) * inv_sqrt_d)
        .collect();
    if !adapter.enabled {
        return Ok(softmax(&logits));
    }
    let a = adapter.phi_q(q)?;
    let f: Vec<f64> = (0..key_err.rows())
        .map(|i| adapter.phi_k(key_err.row(i)).map(|b| dot(&a, &b)))
        .collect::<Result<_>>()?;
    Ok(mix_weights(&logits, &f))
}

/// `(exp(s_i) + f_i) / sum_j (exp(s_j) + f_j)`, evaluated after scaling
/// numerator and denominator by `exp(-max(0, max s))`.
pub(crate) fn mix_weights(logits: &[f64], f: &[f64]) -> Vec<f64> {
    let shift = logits.iter().copied().fold(0.0f64, f64::max);
    let corr = (-shift).exp();
    let mut u: Vec<f64> = logits
        .iter()
        .zip(f)
        .map(|(&s, &fi)| (s - shift).exp() + corr * fi)
        .collect();
    let z: f64 = u.iter().sum();
    u.iter_mut().for_each(|v| *v /= z);
    u
}

/// One attention head's distillation data.
///
/// `teacher` is the full-precision causal attention matrix (`n x n`, zero
/// above the diagonal). `positions` lists the query rows that contribute to
/// the loss.
#[derive(Debug, Clone)]
pub struct DistillBatch<'a> {
    pub teacher: &'a Matrix,
    pub queries: &'a Matrix,
    pub keys_q: &'a Matrix,
    pub key_err: &'a Matrix,
    pub positions: Vec<usize>,
}

impl DistillBatch<'_> {
    fn validate(&self) -> Result<()> {
        let n = self.queries.rows();
        if self.keys_q.shape() != self.queries.shape() || self.key_err.shape() != self.keys_q.shape()
        {
            return Err(Error::Dimension {
                op: "distill batch",
                left: self.queries.shape(),
                right: self.keys_q.shape(),
            });
        }
        if self.teacher.shape() != (n, n) {
            return Err(Error::Dimension {
                op: "distill teacher",
                left: self.teacher.shape(),
                right: (n, n),
            });
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= n) {
            return Err(Error::argument(format!("query position {p} out of range")));
        }
        Ok(())
    }
}

/// Softmax halves of a feature map, kept for the backward pass.
fn feature_halves(x: &[f64], w1: &Matrix, w2: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((softmax(&w1.vecmul(x)?), softmax(&w2.vecmul(x)?)))
}

/// Backpropagates `grad` (w.r.t. one softmax half `p`) into `dw += x^T dz`.
fn softmax_backward(x: &[f64], p: &[f64], grad: &[f64], dw: &mut Matrix) {
    let inner = dot(p, grad);
    let dz: Vec<f64> = p.iter().zip(grad).map(|(pi, gi)| pi * (gi - inner)).collect();
    for (r, &xr) in x.iter().enumerate() {
        if xr == 0.0 {
            continue;
        }
        for (w, dzi) in dw.row_mut(r).iter_mut().zip(&dz) {
            *w += xr * dzi;
        }
    }
}

/// Mean cross-entropy `-sum_i A_i log A_hat_i` over `batch.positions`, and
/// its analytic gradient with respect to all four weight matrices.
pub fn loss_and_grads(batch: &DistillBatch, adapter: &CorrectionAdapter) -> Result<(f64, AdapterGrads)> {
    batch.validate()?;
    let d = batch.queries.cols();
    if adapter.head_dim() != d {
        return Err(Error::Dimension {
            op: "loss_and_grads",
            left: (d, 0),
            right: (adapter.head_dim(), adapter.rank()),
        });
    }
    let half = adapter.rank() / 2;
    let mut grads = AdapterGrads::zeros(d, half);
    if batch.positions.is_empty() {
        return Ok((0.0, grads));
    }
    let max_pos = *batch.positions.iter().max().unwrap();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // Key feature maps for every key any query can see.
    let key_feats: Vec<(Vec<f64>, Vec<f64>)> = (0..=max_pos)
        .map(|i| feature_halves(batch.key_err.row(i), &adapter.w1_k, &adapter.w2_k))
        .collect::<Result<_>>()?;
    let mut key_grads = vec![vec![0.0; adapter.rank()]; max_pos + 1];

    let mut total = 0.0;
    for &n in &batch.positions {
        let q = batch.queries.row(n);
        let (a1, a2) = feature_halves(q, &adapter.w1_q, &adapter.w2_q)?;
        let teacher = &batch.teacher.row(n)[..=n];
        let logits: Vec<f64> = (0..=n)
            .map(|i| dot(q, batch.keys_q.row(i)) * inv_sqrt_d)
            .collect();
        let shift = logits.iter().copied().fold(0.0f64, f64::max);
        let corr = (-shift).exp();
        let f: Vec<f64> = key_feats[..=n]
            .iter()
            .map(|(b1, b2)| dot(&a1, b1) + dot(&a2, b2))
            .collect();
        let u: Vec<f64> = logits
            .iter()
            .zip(&f)
            .map(|(&s, &fi)| (s - shift).exp() + corr * fi)
            .collect();
        let z: f64 = u.iter().sum();
        let teacher_mass: f64 = teacher.iter().sum();
        let log_z = z.ln();
        let mut loss = 0.0;
        for (&t, &ui) in teacher.iter().zip(&u) {
            if t > 0.0 {
                loss -= t * (ui.max(f64::MIN_POSITIVE).ln() - log_z);
            }
        }
        total += loss;

        // dL/df_i = corr * (mass / Z - A_i / u_i)
        let mut ga = vec![0.0; adapter.rank()];
        for i in 0..=n {
            let t = teacher[i];
            let mut g = teacher_mass / z;
            if t > 0.0 {
                g -= t / u[i].max(f64::MIN_POSITIVE);
            }
            let g = g * corr;
            if g == 0.0 {
                continue;
            }
            let (b1, b2) = &key_feats[i];
            for (k, (&x1, &x2)) in b1.iter().zip(b2).enumerate() {
                ga[k] += g * x1;
                ga[half + k] += g * x2;
            }
            let kg = &mut key_grads[i];
            for k in 0..half {
                kg[k] += g * a1[k];
                kg[half + k] += g * a2[k];
            }
        }
        softmax_backward(q, &a1, &ga[..half], &mut grads.w1_q);
        softmax_backward(q, &a2, &ga[half..], &mut grads.w2_q);
    }
    for (i, kg) in key_grads.iter().enumerate() {
        if kg.iter().all(|&v| v == 0.0) {
            continue;
        }
        let x = batch.key_err.row(i);
        let (b1, b2) = &key_feats[i];
        softmax_backward(x, b1, &kg[..half], &mut grads.w1_k);
        softmax_backward(x, b2, &kg[half..], &mut grads.w2_k);
    }
    let inv = 1.0 / batch.positions.len() as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, adapter: &mut CorrectionAdapter, grads: &AdapterGrads) {
        if self.m.is_empty() {
            self.m = grads.as_array().iter().map(|g| vec![0.0; g.data().len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (slot, (w, g)) in adapter
            .weights_mut()
            .into_iter()
            .zip(grads.as_array())
            .enumerate()
        {
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for (j, (wj, &gj)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *wj -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub rank: usize,
    pub lr: f64,
    pub steps: usize,
    /// Query positions sampled per step; 0 means every position.
    pub batch: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Key quantization (channel-wise raw keys by default).
    pub key_config: QuantConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            lr: 0.01,
            steps: 200,
            batch: 0,
            seed: 0,
            init_std: 0.1,
            key_config: QuantConfig::channel(2, 128).expect("valid default"),
        }
    }
}

/// Result of training one head.
#[derive(Debug, Clone)]
pub struct HeadTraining {
    pub layer: usize,
    pub head: usize,
    pub adapter: CorrectionAdapter,
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
    /// Full-sequence loss before training.
    pub initial_loss: f64,
    /// Full-sequence loss after training.
    pub final_loss: f64,
}

/// Quantized keys, key errors and teacher weights for one head.
#[derive(Debug, Clone)]
pub struct HeadDistillData {
    pub queries: Matrix,
    pub keys_q: Matrix,
    pub key_err: Matrix,
    pub teacher: Matrix,
}

impl HeadDistillData {
    pub fn build(q: &Matrix, k: &Matrix, v: &Matrix, key_config: QuantConfig) -> Result<Self> {
        let keys_q = quantize_tensor(k, key_config)?.dequantize();
        let key_err = k.sub(&keys_q)?;
        let (teacher, _) = attention_reference(q, k, v)?;
        Ok(Self {
            queries: q.clone(),
            keys_q,
            key_err,
            teacher,
        })
    }

    pub fn batch(&self, positions: Vec<usize>) -> DistillBatch<'_> {
        DistillBatch {
            teacher: &self.teacher,
            queries: &self.queries,
            keys_q: &self.keys_q,
            key_err: &self.key_err,
            positions,
        }
    }

    pub fn full_batch(&self) -> DistillBatch<'_> {
        self.batch((0..self.queries.rows()).collect())
    }
}

/// Trains a single adapter on prepared head data.
pub fn train_head(
    data: &HeadDistillData,
    config: &TrainConfig,
    init_seed: u64,
) -> Result<(CorrectionAdapter, Vec<f64>, f64, f64)> {
    let n = data.queries.rows();
    let mut adapter =
        CorrectionAdapter::random(data.queries.cols(), config.rank, config.init_std, init_seed)?;
    let initial = loss_and_grads(&data.full_batch(), &adapter)?.0;
    let mut opt = Adam::new(config.lr);
    let mut rng = seeded_rng(derive_seed(init_seed, 0xBA7C));
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let positions = if config.batch == 0 || config.batch >= n {
            (0..n).collect()
        } else {
            let mut p = index::sample(&mut rng, n, config.batch).into_vec();
            p.sort_unstable();
            p
        };
        let (loss, grads) = loss_and_grads(&data.batch(positions), &adapter)?;
        losses.push(loss);
        opt.step(&mut adapter, &grads);
    }
    let final_loss = loss_and_grads(&data.full_batch(), &adapter)?.0;
    Ok((adapter, losses, initial, final_loss))
}

/// Trains one adapter per (layer, head) of `trace`. Heads are independent
/// and run in parallel on the current rayon pool; results are ordered by
/// (layer, head) and do not depend on the thread count.
pub fn train(trace: &AttentionTrace, config: &TrainConfig) -> Result<Vec<HeadTraining>> {
    if trace.layers() == 0 || trace.heads() == 0 || trace.seq_len() == 0 {
        return Err(Error::argument("cannot train on an empty trace"));
    }
    let jobs: Vec<(usize, usize)> = (0..trace.layers())
        .flat_map(|l| (0..trace.heads()).map(move |h| (l, h)))
        .collect();
    jobs.par_iter()
        .map(|&(layer, head)| {
            let t = trace.head(layer, head);
            let data = HeadDistillData::build(&t.q, &t.k, &t.v, config.key_config)?;
            let seed = derive_seed(config.seed, (layer * trace.heads() + head) as u64);
            let (adapter, losses, initial_loss, final_loss) = train_head(&data, config, seed)?;
            Ok(HeadTraining {
                layer,
                head,
                adapter,
                losses,
                initial_loss,
                final_loss,
            })
        })
        .collect()
}
