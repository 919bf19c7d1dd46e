//! How a Hadamard rotation spreads outlier channels, and what that does to
//! the quantization scale under each axis/rotation choice.
//!
//! ```text
//! cargo run --example hadamard_rotation
//! ```

use kvlinc::diagnostics::{scale_factor_stats, DESIGN_SPACE};
use kvlinc::trace::{generate_synthetic_trace, SyntheticParams};
use kvlinc::{rotate, HadamardMatrix, Rotation};

fn main() -> kvlinc::Result<()> {
    let trace = generate_synthetic_trace(&SyntheticParams {
        seed: 3,
        ..SyntheticParams::default()
    })?;
    let k = &trace.head(0, 0).k;
    let h = HadamardMatrix::new(k.cols())?;

    let row = k.row(0);
    let rotated = h.rotate_row(row)?;
    let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
    println!("token 0 before rotation: peak {:.2}, rms {:.2}", peak(row), rms(row));
    println!("token 0 after rotation:  peak {:.2}, rms {:.2}", peak(&rotated), rms(&rotated));

    let merged = rotate(&rotate(k, &h, Rotation::PostMultiply)?, &h.transpose(), Rotation::PostMultiply)?;
    println!("max |K H H^T - K| = {:.2e}", merged.sub(k)?.max_abs());

    println!("\nmean 2-bit key scale, G = 128:");
    for s in scale_factor_stats(k, &DESIGN_SPACE, 2, 128)? {
        println!("  {:<16} {:.4}", s.label, s.mean_scale);
    }
    Ok(())
}
