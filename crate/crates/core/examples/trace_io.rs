//! Generates a multi-head synthetic trace, writes it as KVTR and reads it
//! back.
//!
//! ```text
//! cargo run --example trace_io
//! ```

use kvlinc::trace::{read_trace, write_trace, KeyProfile};
use kvlinc::{generate_synthetic_trace, SyntheticParams};

fn main() -> kvlinc::Result<()> {
    let params = SyntheticParams {
        layers: 2,
        heads: 4,
        seq_len: 128,
        head_dim: 64,
        seed: 42,
        ..SyntheticParams::default()
    }
    .structured();
    let trace = generate_synthetic_trace(&params)?;
    let path = std::env::temp_dir().join("kvlinc_example.kvtr");
    write_trace(&trace, &path)?;
    let back = read_trace(&path)?;
    println!(
        "{}: {} layers x {} heads, {} tokens, d = {}, {} bytes",
        path.display(),
        back.layers(),
        back.heads(),
        back.seq_len(),
        back.head_dim(),
        std::fs::metadata(&path)?.len()
    );
    println!("identical after round trip: {}", back == trace);
    if let KeyProfile::Rotary { offset, freq_min, freq_max } = params.key_profile {
        println!("rotary keys: offset {offset}, frequencies in [{freq_min}, {freq_max})");
    }
    for (layer, head, h) in back.iter().take(3) {
        let peak = h.k.data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
        println!("layer {layer} head {head}: peak |k| {peak:.2}");
    }
    Ok(())
}
