//! Streams a head's keys and values into the packed cache, runs the blocked
//! decode kernel, compares it with full-precision attention and writes a
//! snapshot.
//!
//! ```text
//! cargo run --release --example cache_decode
//! ```

use kvlinc::adapter::CorrectionAdapter;
use kvlinc::attention::{decode_step_blocked, DecodeOptions};
use kvlinc::tensor::{dot, softmax};
use kvlinc::trace::{generate_synthetic_trace, SyntheticParams};
use kvlinc::{CacheConfig, KvCache};

fn main() -> kvlinc::Result<()> {
    let trace = generate_synthetic_trace(&SyntheticParams {
        seq_len: 1024,
        seed: 1,
        ..SyntheticParams::default()
    })?
    .head(0, 0)
    .clone();
    let d = trace.q.cols();
    let adapter = CorrectionAdapter::random(d, 256, 0.1, 1)?;
    let mut cache = KvCache::new(CacheConfig::kvlinc(d))?;

    for t in 0..trace.k.rows() {
        cache.append(trace.k.row(t), trace.v.row(t), Some(&adapter))?;
    }
    println!(
        "{} tokens: {} quantized in {} chunks, {} in the residual window",
        cache.tokens_total(),
        cache.quantized_tokens(),
        cache.key_chunks().len(),
        cache.residual_len()
    );

    let q = trace.q.row(trace.q.rows() - 1);
    let inv = 1.0 / (d as f64).sqrt();
    let logits: Vec<f64> = (0..trace.k.rows()).map(|i| dot(q, trace.k.row(i)) * inv).collect();
    let w = softmax(&logits);
    let mut exact = vec![0.0; d];
    for (i, wi) in w.iter().enumerate() {
        for (o, x) in exact.iter_mut().zip(trace.v.row(i)) {
            *o += wi * x;
        }
    }

    for block in [32, 128, 512] {
        let opts = DecodeOptions {
            block_size: Some(block),
            ..DecodeOptions::default()
        };
        let out = decode_step_blocked(q, &cache, Some(&adapter), opts)?;
        let err = out.output.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "block {block:>3}: {} partials, C_d {:.3}, max |y - y_fp| {:.4}",
            out.partials.len(),
            out.states.c_d,
            err
        );
    }

    let plain = decode_step_blocked(q, &cache, None, DecodeOptions::default())?;
    let err = plain.output.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("no correction: max |y - y_fp| {err:.4}");

    let f = cache.memory_footprint();
    println!(
        "footprint: codes {} + scales/zeros {} + residual {} + states {} + header {} = {} bytes (fp16 {})",
        f.packed_codes,
        f.scales_zeros,
        f.residual,
        f.correction_states,
        f.header,
        f.serialized_len(),
        2 * cache.tokens_total() * d * 2
    );

    let path = std::env::temp_dir().join("kvlinc_example.kvlc");
    cache.save(&path)?;
    let loaded = KvCache::load(&path)?;
    println!("snapshot {} reloaded with {} tokens", path.display(), loaded.tokens_total());
    Ok(())
}
