//! Trains a correction adapter on a synthetic outlier trace and reports the
//! attention error with and without it.
//!
//! ```text
//! cargo run --release --example train_adapter
//! ```

use kvlinc::adapter::train;
use kvlinc::diagnostics::attention_error_report;
use kvlinc::trace::{generate_synthetic_trace, SyntheticParams};
use kvlinc::{QuantConfig, TrainConfig};

fn main() -> kvlinc::Result<()> {
    let trace = generate_synthetic_trace(
        &SyntheticParams {
            seq_len: 256,
            head_dim: 32,
            outlier_channels: 2,
            seed: 7,
            ..SyntheticParams::default()
        }
        .structured(),
    )?;
    let cfg = TrainConfig {
        rank: 32,
        seed: 7,
        ..TrainConfig::default()
    };
    let run = train(&trace, &cfg)?.remove(0);
    for (step, loss) in run.losses.iter().enumerate().step_by(40) {
        println!("step {step:>3}  loss {loss:.5}");
    }
    println!("loss {:.5} -> {:.5}", run.initial_loss, run.final_loss);

    let values = QuantConfig::passthrough();
    let off = attention_error_report(&trace, cfg.key_config, values, None)?;
    let on = attention_error_report(&trace, cfg.key_config, values, Some(&[run.adapter]))?;
    println!(
        "attention weights mse: {:.3e} without adapter, {:.3e} with",
        off.mean_mse_weights(),
        on.mean_mse_weights()
    );
    println!(
        "attention output mse:  {:.3e} without adapter, {:.3e} with",
        off.mean_mse_outputs(),
        on.mean_mse_outputs()
    );
    Ok(())
}
