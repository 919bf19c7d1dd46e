//! Output MSE over every key/value axis and rotation choice at 2 bits.
//!
//! ```text
//! cargo run --release --example design_sweep
//! ```

use kvlinc::diagnostics::{config_sweep, DESIGN_SPACE};
use kvlinc::trace::{generate_synthetic_trace, SyntheticParams};

fn main() -> kvlinc::Result<()> {
    let trace = generate_synthetic_trace(
        &SyntheticParams {
            seed: 11,
            ..SyntheticParams::default()
        }
        .structured(),
    )?;
    let grid = config_sweep(&trace, 2, 128)?;

    print!("{:<16}", "key \\ value");
    for &(axis, rot) in &DESIGN_SPACE {
        print!("{:>15}", format!("{}/{}", axis.label(), rot.label()));
    }
    println!();
    for &key in &DESIGN_SPACE {
        print!("{:<16}", format!("{}/{}", key.0.label(), key.1.label()));
        for &value in &DESIGN_SPACE {
            print!("{:>15.3e}", grid.cell(key, value).mse);
        }
        println!();
    }
    let best = grid.argmin();
    println!("\nlowest error: keys {}, values {} ({:.3e})", best.key, best.value, best.mse);
    Ok(())
}
