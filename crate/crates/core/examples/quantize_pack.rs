//! Group-wise 2-bit quantization of an outlier-heavy key matrix, packed into
//! `u32` lanes and checked against the uniform-rounding error model.
//!
//! ```text
//! cargo run --example quantize_pack
//! ```

use kvlinc::quant::{expected_quant_mse, packed_words, QuantConfig, QuantizedTensor};
use kvlinc::tensor::{seeded_rng, Matrix};

fn main() -> kvlinc::Result<()> {
    let mut rng = seeded_rng(0);
    let mut keys = Matrix::random_normal(256, 64, &mut rng);
    // Two outlier channels, the usual shape of attention keys.
    for t in 0..keys.rows() {
        for c in [3, 17] {
            let v = keys.get(t, c) * 10.0;
            keys.set(t, c, v);
        }
    }

    for cfg in [QuantConfig::channel(2, 128)?, QuantConfig::token(2, 64)?] {
        let qt = QuantizedTensor::quantize(&keys, cfg)?;
        let deq = qt.dequantize();
        let mse = keys.mse(&deq)?;
        let model: f64 =
            qt.scales().iter().map(|&s| expected_quant_mse(s)).sum::<f64>() / qt.scales().len() as f64;
        println!(
            "{:<14} groups {:>4}  mean scale {:.4}  mse {:.5}  s^2/12 {:.5}",
            cfg.label(),
            qt.group_count(),
            qt.mean_scale(),
            mse,
            model
        );
        println!(
            "{:<14} {} codes in {} words: {} code bytes + {} metadata bytes (fp16 would be {})",
            "",
            keys.rows() * keys.cols(),
            packed_words(keys.rows() * keys.cols(), cfg.bits),
            qt.code_bytes(),
            qt.metadata_bytes(),
            keys.rows() * keys.cols() * 2
        );
    }

    let qt = QuantizedTensor::quantize(&keys, QuantConfig::channel(2, 128)?)?;
    println!("first packed word {:#034b}", qt.packed()[0]);
    let first: Vec<u16> = (0..16).map(|c| qt.code(0, c)).collect();
    println!("codes of token 0, channels 0..16: {first:?}");
    Ok(())
}
