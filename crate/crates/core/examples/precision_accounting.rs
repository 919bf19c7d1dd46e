//! Average stored bits per cached element across sequence lengths, with and
//! without correction states.
//!
//! ```text
//! cargo run --example precision_accounting
//! ```

use kvlinc::diagnostics::{average_precision, PrecisionParams};

fn main() -> kvlinc::Result<()> {
    println!("{:>8} {:>10} {:>12} {:>12}", "N", "R=0", "R=128", "R=128+D=256");
    for n in [1024, 2048, 4096, 8192, 16384, 32768] {
        let base = PrecisionParams {
            seq_len: n,
            ..PrecisionParams::kivi()
        };
        let bare = average_precision(&PrecisionParams { window: 0, ..base })?;
        let kivi = average_precision(&base)?;
        let kvlinc = average_precision(&PrecisionParams {
            adapter_rank: Some(256),
            ..base
        })?;
        println!(
            "{n:>8} {:>10.4} {:>12.4} {:>12.4}",
            bare.bits_per_element, kivi.bits_per_element, kvlinc.bits_per_element
        );
    }
    let report = average_precision(&PrecisionParams::kvlinc())?;
    println!();
    for a in &report.assumptions {
        println!("assumes {a}");
    }
    Ok(())
}
