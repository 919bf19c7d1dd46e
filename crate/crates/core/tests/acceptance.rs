//! Acceptance criteria. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use kvlinc::adapter::{loss_and_grads, train, CorrectionAdapter, HeadDistillData, TrainConfig};
use kvlinc::attention::{
    attention_reference, corrected_attention_quadratic, corrected_attention_recurrent,
    decode_step_blocked, DecodeOptions,
};
use kvlinc::cache::{CacheConfig, KvCache, CACHE_HEADER_BYTES};
use kvlinc::diagnostics::{
    attention_error_report, average_precision, config_sweep, scale_factor_stats, PrecisionParams,
    DESIGN_SPACE,
};
use kvlinc::quant::{pack_codes, unpack_codes, Axis, QuantConfig, QuantizedTensor, Rotation};
use kvlinc::tensor::{dot, seeded_rng, Matrix};
use kvlinc::trace::{generate_synthetic_trace, SyntheticParams};
use kvlinc::HadamardMatrix;
use rand::Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn quant_error_model() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(1);
    let groups = 200;
    let g = 128;
    let x = Matrix::from_fn(groups, g, |r, _| {
        let width = 0.5 + r as f64 / groups as f64;
        width * rng.random_range(-1.0..1.0)
    });
    let qt = QuantizedTensor::quantize(&x, QuantConfig::token(2, g).unwrap()).unwrap();
    let deq = qt.dequantize();
    let mut sq = 0.0;
    let mut worst_excess = f64::NEG_INFINITY;
    for r in 0..groups {
        for c in 0..g {
            let e = (x.get(r, c) - deq.get(r, c)).abs();
            sq += e * e;
            let s = qt.scales()[qt.group_index(r, c)];
            worst_excess = worst_excess.max(e - (s / 2.0 + 1e-12));
        }
    }
    let empirical = sq / (groups * g) as f64;
    let model = qt.scales().iter().map(|s| s * s / 12.0).sum::<f64>() / qt.scales().len() as f64;
    let rel = (empirical - model).abs() / model;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        rel <= 0.25 && worst_excess <= 0.0 && secs < 5.0,
        format!(
            "{} samples, mse {empirical:.4e} vs s^2/12 {model:.4e} (rel {rel:.3}), bound holds: {}, {secs:.2}s",
            groups * g,
            worst_excess <= 0.0
        ),
    )
}

fn packing_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(2);
    let mut failures = 0usize;
    let streams = 100_000;
    for _ in 0..streams {
        let len = rng.random_range(1..=64);
        let codes: Vec<u16> = (0..len).map(|_| rng.random_range(0..4)).collect();
        let words = pack_codes(&codes, 2).unwrap();
        if unpack_codes(&words, len, 2).unwrap() != codes {
            failures += 1;
        }
    }
    // Every 2-bit code in every lane of an 8-code stream.
    for w in 0..(1u32 << 16) {
        let codes: Vec<u16> = (0..8).map(|i| ((w >> (2 * i)) & 3) as u16).collect();
        if unpack_codes(&pack_codes(&codes, 2).unwrap(), 8, 2).unwrap() != codes {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 5.0,
        format!("{streams} random streams + 65536 exhaustive, {failures} mismatches, {secs:.2}s"),
    )
}

fn hadamard_checks() -> Outcome {
    let mut worst_orth = 0.0f64;
    let mut dim = 2;
    while dim <= 256 {
        let h = HadamardMatrix::new(dim).unwrap();
        let p = h.matrix().matmul(&h.matrix().transpose()).unwrap();
        let eye = Matrix::identity(dim);
        worst_orth = worst_orth.max(p.sub(&eye).unwrap().max_abs());
        dim *= 2;
    }
    let mut rng = seeded_rng(3);
    let mut worst_merge = 0.0f64;
    for &d in &[8usize, 32, 128] {
        let h = HadamardMatrix::new(d).unwrap();
        for _ in 0..10 {
            let n = 48;
            let q = Matrix::random_normal(n, d, &mut rng);
            let k = Matrix::random_normal(n, d, &mut rng);
            let v = Matrix::random_normal(n, d, &mut rng);
            let (_, y) = attention_reference(&q, &k, &v).unwrap();
            let vh = v.matmul(h.matrix()).unwrap();
            let (_, yh) = attention_reference(&q, &k, &vh).unwrap();
            let back = yh.matmul(&h.matrix().transpose()).unwrap();
            worst_merge = worst_merge.max(back.sub(&y).unwrap().max_abs());
        }
    }
    outcome(
        worst_orth <= 1e-12 && worst_merge <= 1e-10,
        format!("max |HH^T - I| {worst_orth:.2e} (dims 2..256), merged rotation {worst_merge:.2e}"),
    )
}

/// Dequantize-everything decode in f64 with the correction on quantized
/// tokens only.
fn decode_oracle(
    q: &[f64],
    keys: &Matrix,
    cache: &KvCache,
    adapter: Option<&CorrectionAdapter>,
) -> Vec<f64> {
    let d = q.len();
    let nq = cache.quantized_tokens();
    let kq = cache.dequantized_keys();
    let vq = cache.dequantized_values();
    let inv = 1.0 / (d as f64).sqrt();
    let mut rows: Vec<(f64, f64, &[f64])> = Vec::new();
    let phi_q = adapter.map(|a| a.phi_q(q).unwrap());
    for i in 0..nq {
        let s = dot(q, kq.row(i)) * inv;
        let f = match (adapter, &phi_q) {
            (Some(a), Some(pq)) => {
                let err: Vec<f64> = keys.row(i).iter().zip(kq.row(i)).map(|(a, b)| a - b).collect();
                dot(pq, &a.phi_k(&err).unwrap())
            }
            _ => 0.0,
        };
        rows.push((s, f, vq.row(i)));
    }
    for i in 0..cache.residual_len() {
        rows.push((dot(q, cache.residual_k().row(i)) * inv, 0.0, cache.residual_v().row(i)));
    }
    let m = rows.iter().map(|r| r.0).fold(0.0f64, f64::max);
    let mut num = vec![0.0; d];
    let mut den = 0.0;
    for (s, f, v) in rows {
        let w = (s - m).exp() + f * (-m).exp();
        den += w;
        for (o, x) in num.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    let y: Vec<f64> = num.iter().map(|x| x / den).collect();
    cache.from_value_domain(&y).unwrap()
}

fn decode_equivalence() -> Outcome {
    let start = Instant::now();
    let d = 64;
    let rank = 32;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (ni, &n) in [129usize, 512, 1023, 4096].iter().enumerate() {
        let mut rng = seeded_rng(40 + ni as u64);
        let keys = Matrix::random_normal(n, d, &mut rng);
        let values = Matrix::random_normal(n, d, &mut rng);
        let q: Vec<f64> = Matrix::random_normal(1, d, &mut rng).into_data();
        for with_adapter in [false, true] {
            let adapter = with_adapter
                .then(|| CorrectionAdapter::random(d, rank, 0.5, 7 + ni as u64).unwrap());
            let config = CacheConfig {
                head_dim: d,
                key_bits: 2,
                value_bits: 2,
                group_size: 32,
                value_group: 64,
                window: 32,
                value_rotation: Rotation::PostMultiply,
                rank: if with_adapter { rank } else { 0 },
            };
            let mut cache = KvCache::new(config).unwrap();
            for t in 0..n {
                cache.append(keys.row(t), values.row(t), adapter.as_ref()).unwrap();
            }
            let oracle = decode_oracle(&q, &keys, &cache, adapter.as_ref());
            for block in [32usize, 64, 128] {
                let opts = DecodeOptions {
                    block_size: Some(block),
                    ..DecodeOptions::default()
                };
                let out = decode_step_blocked(&q, &cache, adapter.as_ref(), opts).unwrap();
                for (a, b) in out.output.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("{cases} cases, max abs diff {worst:.2e}, {secs:.2}s"),
    )
}

fn recurrent_equals_quadratic() -> Outcome {
    let d = 16;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let n = if seed == 0 { 512 } else { 1 + (seed as usize * 97) % 512 };
        let mut rng = seeded_rng(500 + seed);
        let q = Matrix::random_normal(n, d, &mut rng);
        let k = Matrix::random_normal(n, d, &mut rng);
        let v = Matrix::random_normal(n, d, &mut rng);
        let cfg = QuantConfig::channel(2, 128).unwrap();
        let k_q = QuantizedTensor::quantize(&k, cfg).unwrap().dequantize();
        let k_err = k.sub(&k_q).unwrap();
        let adapter = CorrectionAdapter::random(d, 16, 0.5, seed).unwrap();
        let quad = corrected_attention_quadratic(&q, &k_q, &k_err, &v, &adapter).unwrap();
        let rec = corrected_attention_recurrent(&q, &k_q, &k_err, &v, &adapter).unwrap();
        worst = worst.max(rec.y.sub(&quad).unwrap().max_abs());
    }
    outcome(worst <= 1e-10, format!("100 seeds, n <= 512, max abs diff {worst:.2e}"))
}

fn weights_mut(a: &mut CorrectionAdapter, which: usize) -> &mut Matrix {
    match which {
        0 => &mut a.w1_q,
        1 => &mut a.w2_q,
        2 => &mut a.w1_k,
        _ => &mut a.w2_k,
    }
}

fn gradient_check() -> Outcome {
    let (d, rank, n, h) = (4, 8, 8, 1e-5);
    let mut worst = 0.0f64;
    for inst in 0..50u64 {
        let mut rng = seeded_rng(600 + inst);
        let q = Matrix::random_normal(n, d, &mut rng).map(|x| 2.0 * x);
        let k = Matrix::random_normal(n, d, &mut rng).map(|x| 2.0 * x);
        let v = Matrix::random_normal(n, d, &mut rng);
        let data = HeadDistillData::build(&q, &k, &v, QuantConfig::channel(2, n).unwrap()).unwrap();
        let batch = data.full_batch();
        let adapter = CorrectionAdapter::random(d, rank, 0.8, inst).unwrap();
        let (_, grads) = loss_and_grads(&batch, &adapter).unwrap();
        for (which, g) in grads.as_array().iter().enumerate() {
            for idx in 0..g.data().len() {
                let mut plus = adapter.clone();
                weights_mut(&mut plus, which).data_mut()[idx] += h;
                let mut minus = adapter.clone();
                weights_mut(&mut minus, which).data_mut()[idx] -= h;
                let lp = loss_and_grads(&batch, &plus).unwrap().0;
                let lm = loss_and_grads(&batch, &minus).unwrap().0;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = g.data()[idx];
                let scale = analytic.abs().max(numeric.abs()).max(1e-7);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("50 instances (d=4, D=8, n=8), max relative error {worst:.2e}"),
    )
}

/// Mean row entropy of a causal attention matrix, the lower bound of the
/// cross-entropy loss.
fn teacher_entropy(a: &Matrix) -> f64 {
    let n = a.rows();
    let total: f64 = (0..n)
        .map(|r| {
            a.row(r)[..=r]
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

fn training_efficacy() -> Outcome {
    let start = Instant::now();
    let params = SyntheticParams {
        seq_len: 256,
        head_dim: 32,
        outlier_channels: 2,
        seed: 7,
        ..SyntheticParams::default()
    }
    .structured();
    let trace = generate_synthetic_trace(&params).unwrap();
    let key_config = QuantConfig::channel(2, 128).unwrap();
    let cfg = TrainConfig {
        rank: 32,
        lr: 0.01,
        steps: 200,
        batch: 0,
        seed: 7,
        init_std: 0.1,
        key_config,
    };
    let run = train(&trace, &cfg).unwrap().remove(0);
    let values = QuantConfig::passthrough();
    let off = attention_error_report(&trace, key_config, values, None).unwrap();
    let on = attention_error_report(&trace, key_config, values, Some(std::slice::from_ref(&run.adapter))).unwrap();
    let h = trace.head(0, 0);
    let teacher = HeadDistillData::build(&h.q, &h.k, &h.v, key_config).unwrap().teacher;
    let entropy = teacher_entropy(&teacher);
    let ratio = run.final_loss / run.initial_loss;
    let (w_on, w_off) = (on.mean_mse_weights(), off.mean_mse_weights());
    let (y_on, y_off) = (on.mean_mse_outputs(), off.mean_mse_outputs());
    let secs = start.elapsed().as_secs_f64();
    outcome(
        ratio <= 0.5 && w_on < w_off && y_on < y_off && secs < 120.0,
        format!(
            "loss {:.4} -> {:.4} (ratio {ratio:.3}, needs <= 0.5; teacher entropy floor {entropy:.4}); weight mse {w_on:.3e} vs off {w_off:.3e}; \
             output mse {y_on:.3e} vs off {y_off:.3e}; {secs:.1}s",
            run.initial_loss, run.final_loss
        ),
    )
}

fn design_space_ordering() -> Outcome {
    let trials = 10;
    let best = ((Axis::Channel, Rotation::None), (Axis::Token, Rotation::PostMultiply));
    let mut argmin_hits = 0;
    // (key axis, value variant) -> trials where post beats pre.
    let mut post_wins = vec![0usize; 2 * DESIGN_SPACE.len()];
    for seed in 0..trials {
        let params = SyntheticParams {
            seed: 800 + seed,
            ..SyntheticParams::default()
        }
        .structured();
        let trace = generate_synthetic_trace(&params).unwrap();
        let grid = config_sweep(&trace, 2, 128).unwrap();
        let m = grid.argmin();
        if ((m.key_axis, m.key_rotation), (m.value_axis, m.value_rotation)) == best {
            argmin_hits += 1;
        }
        for (ai, axis) in [Axis::Channel, Axis::Token].into_iter().enumerate() {
            for (vi, &value) in DESIGN_SPACE.iter().enumerate() {
                let pre = grid.cell((axis, Rotation::PreMultiply), value).mse;
                let post = grid.cell((axis, Rotation::PostMultiply), value).mse;
                if post < pre {
                    post_wins[ai * DESIGN_SPACE.len() + vi] += 1;
                }
            }
        }
    }
    let min_wins = *post_wins.iter().min().unwrap();
    outcome(
        argmin_hits >= 9 && min_wins >= 9,
        format!(
            "argmin at channel/raw + token/post in {argmin_hits}/{trials}; \
             post beats pre in at least {min_wins}/{trials} for all 12 pairs"
        ),
    )
}

fn scale_ordering() -> Outcome {
    let variants = [
        (Axis::Channel, Rotation::None),
        (Axis::Token, Rotation::PostMultiply),
        (Axis::Token, Rotation::None),
    ];
    let mut holds = 0;
    let mut example = String::new();
    for seed in 0..10 {
        let params = SyntheticParams {
            seed: 900 + seed,
            ..SyntheticParams::default()
        };
        let trace = generate_synthetic_trace(&params).unwrap();
        let stats = scale_factor_stats(&trace.head(0, 0).k, &variants, 2, 128).unwrap();
        let s: Vec<f64> = stats.iter().map(|s| s.mean_scale).collect();
        if s[0] < s[1] && s[1] < s[2] {
            holds += 1;
        }
        if seed == 0 {
            example = format!("{:.3} < {:.3} < {:.3}", s[0], s[1], s[2]);
        }
    }
    outcome(
        holds == 10,
        format!("ordering holds in {holds}/10 seeds (seed 0: {example})"),
    )
}

fn precision_accounting() -> Outcome {
    let kivi = average_precision(&PrecisionParams::kivi()).unwrap().bits_per_element;
    let kvlinc = average_precision(&PrecisionParams::kvlinc()).unwrap().bits_per_element;
    let bare = average_precision(&PrecisionParams {
        window: 0,
        ..PrecisionParams::kivi()
    })
    .unwrap()
    .bits_per_element;
    outcome(
        (kivi - 2.46).abs() <= 0.05 && (kvlinc - 2.71).abs() <= 0.05 && bare == 2.25,
        format!("N=8192: no adapter {kivi:.4}, with adapter {kvlinc:.4}, R=0 no adapter {bare}"),
    )
}

/// Closed-form byte count of a 2-bit snapshot, independent of the cache code.
fn tally(tokens: usize, c: &CacheConfig) -> usize {
    let d = c.head_dim;
    let flushed = if tokens < c.window + c.group_size {
        0
    } else {
        (tokens - c.window) / c.group_size * c.group_size
    };
    let chunks = flushed / c.group_size;
    let codes = 2 * flushed * d * 2 / 8;
    let key_groups = chunks * d;
    let value_groups = flushed * d / c.value_group;
    let meta = (key_groups + value_groups) * 2 * 2;
    let residual = 2 * (tokens - flushed) * d * 2;
    let states = c.rank * (d + 1) * 2;
    CACHE_HEADER_BYTES + codes + meta + residual + states
}

fn footprint() -> Outcome {
    let (n, d) = (8192, 128);
    let fp16 = 2 * n * d * 2;
    let mut rng = seeded_rng(11);
    let keys = Matrix::random_normal(n, d, &mut rng);
    let values = Matrix::random_normal(n, d, &mut rng);
    let adapter = CorrectionAdapter::random(d, 256, 0.1, 11).unwrap();
    let setups = [
        ("R=0 with states", CacheConfig { window: 0, ..CacheConfig::kvlinc(d) }, Some(&adapter)),
        ("R=128 no states", CacheConfig::kivi(d), None),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, config, adapter) in setups {
        let mut cache = KvCache::new(config).unwrap();
        for t in 0..n {
            cache.append(keys.row(t), values.row(t), adapter).unwrap();
        }
        let bytes = cache.to_bytes().len();
        let expected = tally(n, &config);
        let ratio = fp16 as f64 / bytes as f64;
        pass &= bytes == expected && ratio >= 6.0;
        parts.push(format!("{name}: {bytes} bytes (tally {expected}), {ratio:.3}x"));
    }
    outcome(pass, format!("fp16 {fp16} bytes; {}", parts.join("; ")))
}

fn run_cli(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_kvlinc"))
        .current_dir(dir)
        .arg("--threads")
        .arg("1")
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let files = ["t.kvtr", "a.kvla", "c.kvlc", "r.jsonl"];
    let mut runs: Vec<Vec<Vec<u8>>> = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        let ok = run_cli(p, &["gen", "--seq", "256", "--d", "32", "--heads", "2", "--seed", "5", "--out", "t.kvtr"])
            && run_cli(p, &["train", "--trace", "t.kvtr", "--rank", "16", "--steps", "10", "--batch", "32", "--seed", "5", "--out", "a.kvla"])
            && run_cli(p, &["bench", "--trace", "t.kvtr", "--decode-steps", "32", "--group", "32", "--window", "32", "--adapters", "a.kvla", "--cache-out", "c.kvlc"])
            && run_cli(p, &["report", "--trace", "t.kvtr", "--group", "32", "--adapters", "a.kvla", "--out", "r.jsonl"]);
        if !ok {
            return outcome(false, "CLI run failed".to_string());
        }
        runs.push(files.iter().map(|f| std::fs::read(p.join(f)).unwrap()).collect());
    }
    let same: Vec<bool> = (0..files.len()).map(|i| runs[0][i] == runs[1][i]).collect();
    let summary: Vec<String> = files
        .iter()
        .zip(&same)
        .map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "differs" }))
        .collect();
    outcome(same.iter().all(|&s| s), summary.join(", "))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("quantization error model", quant_error_model),
        ("2-bit packing round trip", packing_round_trip),
        ("Hadamard orthogonality and merged rotation", hadamard_checks),
        ("blocked decode vs f64 oracle", decode_equivalence),
        ("recurrent equals quadratic", recurrent_equals_quadratic),
        ("distillation gradient check", gradient_check),
        ("training efficacy", training_efficacy),
        ("design-space ordering", design_space_ordering),
        ("scale-factor ordering", scale_ordering),
        ("precision accounting", precision_accounting),
        ("cache footprint", footprint),
        ("CLI determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("{tag} criterion {:>2} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
