//! The correction term computed two ways: explicit pairwise sums and running
//! states. The recurrent form costs a constant amount per token.
//!
//! ```text
//! cargo run --release --example recurrent_correction
//! ```

use kvlinc::adapter::CorrectionAdapter;
use kvlinc::attention::fake_quantize;
use kvlinc::tensor::{seeded_rng, Matrix};
use kvlinc::{corrected_attention_quadratic, corrected_attention_recurrent, QuantConfig};

fn main() -> kvlinc::Result<()> {
    let d = 32;
    let adapter = CorrectionAdapter::random(d, 64, 0.3, 5)?;
    for n in [64, 128, 256, 512] {
        let mut rng = seeded_rng(n as u64);
        let q = Matrix::random_normal(n, d, &mut rng);
        let k = Matrix::random_normal(n, d, &mut rng);
        let v = Matrix::random_normal(n, d, &mut rng);
        let k_q = fake_quantize(&k, QuantConfig::channel(2, 128)?)?;
        let k_err = k.sub(&k_q)?;
        let quad = corrected_attention_quadratic(&q, &k_q, &k_err, &v, &adapter)?;
        let rec = corrected_attention_recurrent(&q, &k_q, &k_err, &v, &adapter)?;
        println!(
            "n {n:>3}: max diff {:.1e}, correction ops {:>9} ({} per token)",
            rec.y.sub(&quad)?.max_abs(),
            rec.correction_ops,
            rec.correction_ops / n as u64
        );
    }
    Ok(())
}
