//! Command-line front end: `gen`, `sweep`, `train`, `report`, `bench` and
//! `precision`.
//!
//! Every subcommand first prints its resolved configuration as one JSON line,
//! then writes machine-readable artifacts to the requested files and a short
//! summary to the output stream.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::adapter::{read_adapters, train, write_adapters, TrainConfig};
use crate::attention::{decode_step_blocked, DecodeOptions};
use crate::cache::{CacheConfig, KvCache};
use crate::diagnostics::{attention_error_report, average_precision, config_sweep, jsonl, PrecisionParams};
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, Rotation};
use crate::trace::{generate_synthetic_trace, read_trace, write_trace, SyntheticParams};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "KVLINC_THREADS";

#[derive(Debug, Clone, PartialEq, Parser, Serialize)]
#[command(name = "kvlinc", version, about = "2-bit KV-cache quantization with linear correction")]
pub struct RunConfig {
    /// Worker threads (default: available parallelism). 1 runs serially.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic KVTR trace.
    Gen(GenArgs),
    /// Output MSE over the axis x rotation design space.
    Sweep(SweepArgs),
    /// Train correction adapters on a trace.
    Train(TrainArgs),
    /// Per-head attention-error report.
    Report(ReportArgs),
    /// Decode latency and cache footprint, FP vs packed.
    Bench(BenchArgs),
    /// Average stored bits per cached element.
    Precision(PrecisionArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Gaussian keys with scaled outlier channels, Gaussian values.
    Gaussian,
    /// Rotary outlier channels and heavy-tailed values.
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRotation {
    None,
    Post,
}

impl ValueRotation {
    fn rotation(self) -> Rotation {
        match self {
            ValueRotation::None => Rotation::None,
            ValueRotation::Post => Rotation::PostMultiply,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 1024)]
    pub seq: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub outliers: usize,
    #[arg(long, default_value_t = 10.0)]
    pub gain: f64,
    #[arg(long, value_enum, default_value_t = Profile::Gaussian)]
    pub profile: Profile,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 2, value_parser = parse_bits)]
    pub bits: u8,
    #[arg(long, default_value_t = 128, value_parser = parse_positive)]
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// JSON-lines grid.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `key value mse` triples for plotting.
    #[arg(long)]
    pub triples: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 256, value_parser = parse_rank)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Query positions per step; 0 uses every position.
    #[arg(long, default_value_t = 0)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub init_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// KVLA output.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss curve as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, value_enum, default_value_t = ValueRotation::Post)]
    pub value_rotation: ValueRotation,
    /// KVLA adapters; adds adapter-on rows to the report.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub decode_steps: usize,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// KVLA adapters; enables correction states.
    #[arg(long)]
    pub adapters: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// KVLC snapshot of the final cache.
    #[arg(long)]
    pub cache_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize)]
pub struct PrecisionArgs {
    #[arg(long, default_value_t = 8192)]
    pub seq: usize,
    #[arg(long, default_value_t = 128)]
    pub d: usize,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    #[arg(long, default_value_t = 16)]
    pub metadata_bits: u32,
    /// Include correction states.
    #[arg(long)]
    pub adapter: bool,
    #[arg(long, default_value_t = 256, value_parser = parse_rank)]
    pub rank: usize,
}

fn parse_rank(s: &str) -> std::result::Result<usize, String> {
    let r: usize = s.parse().map_err(|e| format!("{e}"))?;
    if r < 2 || !r.is_multiple_of(2) {
        return Err(format!("rank must be even and >= 2 (got {r})"));
    }
    Ok(r)
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    let b: u8 = s.parse().map_err(|e| format!("{e}"))?;
    if !matches!(b, 2 | 3 | 4 | 8 | 16) {
        return Err(format!("bits must be one of 2, 3, 4, 8, 16 (got {b})"));
    }
    Ok(b)
}

fn parse_positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".to_string()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

/// Parses `argv` (including the program name). Help, version and invalid
/// input all come back as [`Error::Usage`] carrying clap's rendered text.
pub fn parse_args<I, T>(argv: I) -> Result<RunConfig>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    RunConfig::try_parse_from(argv).map_err(|e| Error::Usage(e.render().to_string()))
}

/// Runs a parsed command, writing the summary to `out`.
pub fn execute(config: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let threads = config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        return Err(Error::Usage("--threads must be positive".to_string()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    writeln!(
        out,
        "{}",
        serde_json::json!({ "resolved": config, "threads": threads })
    )?;
    let mut buf: Vec<u8> = Vec::new();
    let result = pool.install(|| {
        let w: &mut dyn Write = &mut buf;
        match &config.command {
            Command::Gen(a) => run_gen(a, w),
            Command::Sweep(a) => run_sweep(a, w),
            Command::Train(a) => run_train(a, w),
            Command::Report(a) => run_report(a, w),
            Command::Bench(a) => run_bench(a, w),
            Command::Precision(a) => run_precision(a, w),
        }
    });
    out.write_all(&buf)?;
    result
}

/// Parses and executes; returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match RunConfig::try_parse_from(argv) {
        Ok(cfg) => match execute(&cfg, out) {
            Ok(()) => 0,
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                1
            }
        },
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            }
        }
    }
}

fn run_gen(a: &GenArgs, out: &mut dyn Write) -> Result<()> {
    let mut params = SyntheticParams {
        layers: a.layers,
        heads: a.heads,
        seq_len: a.seq,
        head_dim: a.d,
        outlier_channels: a.outliers,
        outlier_gain: a.gain,
        seed: a.seed,
        ..SyntheticParams::default()
    };
    if a.profile == Profile::Structured {
        params = params.structured();
    }
    let trace = generate_synthetic_trace(&params)?;
    write_trace(&trace, &a.out)?;
    writeln!(
        out,
        "wrote {} ({} bytes, {} layers x {} heads, seq {}, d {})",
        a.out.display(),
        trace.file_len(),
        a.layers,
        a.heads,
        a.seq,
        a.d
    )?;
    Ok(())
}

fn run_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let grid = config_sweep(&trace, a.quant.bits, a.quant.group)?;
    if let Some(p) = &a.out {
        fs::write(p, grid.to_jsonl())?;
    }
    if let Some(p) = &a.triples {
        fs::write(p, grid.to_triples())?;
    }
    for c in &grid.cells {
        writeln!(out, "K {:<13} V {:<13} mse {:.6e}", c.key, c.value, c.mse)?;
    }
    let best = grid.argmin();
    writeln!(out, "best: K {} V {} ({:.6e})", best.key, best.value, best.mse)?;
    Ok(())
}

#[derive(Serialize)]
struct LossRecord {
    layer: usize,
    head: usize,
    step: usize,
    loss: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    layer: usize,
    head: usize,
    initial_loss: f64,
    final_loss: f64,
}

fn run_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let cfg = TrainConfig {
        rank: a.rank,
        lr: a.lr,
        steps: a.steps,
        batch: a.batch,
        seed: a.seed,
        init_std: a.init_std,
        key_config: QuantConfig::channel(a.quant.bits, a.quant.group)?,
    };
    let heads = train(&trace, &cfg)?;
    let adapters: Vec<_> = heads.iter().map(|h| h.adapter.clone()).collect();
    write_adapters(&a.out, &adapters)?;
    if let Some(p) = &a.log {
        let records: Vec<LossRecord> = heads
            .iter()
            .flat_map(|h| {
                h.losses.iter().enumerate().map(|(step, &loss)| LossRecord {
                    layer: h.layer,
                    head: h.head,
                    step,
                    loss,
                })
            })
            .collect();
        fs::write(p, jsonl(&records))?;
    }
    let summary: Vec<TrainSummary> = heads
        .iter()
        .map(|h| TrainSummary {
            layer: h.layer,
            head: h.head,
            initial_loss: h.initial_loss,
            final_loss: h.final_loss,
        })
        .collect();
    write!(out, "{}", jsonl(&summary))?;
    writeln!(out, "wrote {} adapters to {}", adapters.len(), a.out.display())?;
    Ok(())
}

fn run_report(a: &ReportArgs, out: &mut dyn Write) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    let cfg_k = QuantConfig::channel(a.quant.bits, a.quant.group)?;
    let cfg_v = QuantConfig::token(a.quant.bits, a.quant.group)?.with_rotation(a.value_rotation.rotation());
    let mut text = attention_error_report(&trace, cfg_k, cfg_v, None)?.to_jsonl();
    if let Some(p) = &a.adapters {
        let adapters = read_adapters(p)?;
        text.push_str(&attention_error_report(&trace, cfg_k, cfg_v, Some(&adapters))?.to_jsonl());
    }
    match &a.out {
        Some(p) => {
            fs::write(p, &text)?;
            writeln!(out, "wrote {}", p.display())?;
        }
        None => write!(out, "{text}")?,
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    tokens: usize,
    decode_steps: usize,
    fp_step_us: f64,
    packed_step_us: f64,
    fp16_bytes: usize,
    packed_bytes: usize,
    ratio: f64,
    footprint: crate::cache::Footprint,
    max_abs_diff_vs_fp: f64,
}

fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    let trace = read_trace(&a.trace)?;
    if a.layer >= trace.layers() || a.head >= trace.heads() {
        return Err(Error::argument("layer/head out of range"));
    }
    let n = trace.seq_len();
    if a.decode_steps == 0 || a.decode_steps > n {
        return Err(Error::argument(format!(
            "decode steps must be in 1..={n}"
        )));
    }
    let d = trace.head_dim();
    let h = trace.head(a.layer, a.head);
    let adapter = match &a.adapters {
        Some(p) => {
            let all = read_adapters(p)?;
            let idx = a.layer * trace.heads() + a.head;
            Some(
                all.get(idx)
                    .cloned()
                    .ok_or_else(|| Error::argument("adapter file has too few records"))?,
            )
        }
        None => None,
    };
    let config = CacheConfig {
        head_dim: d,
        key_bits: a.quant.bits,
        value_bits: a.quant.bits,
        group_size: a.quant.group,
        value_group: a.quant.group,
        window: a.window,
        value_rotation: Rotation::PostMultiply,
        rank: adapter.as_ref().map_or(0, |x| x.rank()),
    };
    let mut cache = KvCache::new(config)?;
    let prefill = n - a.decode_steps;
    for t in 0..prefill {
        cache.append(h.k.row(t), h.v.row(t), adapter.as_ref())?;
    }
    let mut packed_time = 0.0;
    let mut fp_time = 0.0;
    let mut max_diff = 0.0f64;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    for t in prefill..n {
        cache.append(h.k.row(t), h.v.row(t), adapter.as_ref())?;
        let q = h.q.row(t);
        let start = Instant::now();
        let y = decode_step_blocked(q, &cache, adapter.as_ref(), DecodeOptions::default())?.output;
        packed_time += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let mut logits: Vec<f64> = (0..=t).map(|i| crate::tensor::dot(q, h.k.row(i)) * inv_sqrt_d).collect();
        crate::tensor::softmax_in_place(&mut logits);
        let mut y_fp = vec![0.0; d];
        for (i, &w) in logits.iter().enumerate() {
            for (o, &x) in y_fp.iter_mut().zip(h.v.row(i)) {
                *o += w * x;
            }
        }
        fp_time += start.elapsed().as_secs_f64();
        for (x, yv) in y.iter().zip(&y_fp) {
            max_diff = max_diff.max((x - yv).abs());
        }
    }
    let footprint = cache.memory_footprint();
    let fp16_bytes = n * d * 2 * 2;
    let packed_bytes = footprint.serialized_len();
    let report = BenchReport {
        tokens: n,
        decode_steps: a.decode_steps,
        fp_step_us: fp_time * 1e6 / a.decode_steps as f64,
        packed_step_us: packed_time * 1e6 / a.decode_steps as f64,
        fp16_bytes,
        packed_bytes,
        ratio: fp16_bytes as f64 / packed_bytes as f64,
        footprint,
        max_abs_diff_vs_fp: max_diff,
    };
    let line = serde_json::to_string(&report).expect("bench report serializes");
    if let Some(p) = &a.out {
        fs::write(p, format!("{line}\n"))?;
    }
    if let Some(p) = &a.cache_out {
        cache.save(p)?;
    }
    writeln!(out, "{line}")?;
    writeln!(
        out,
        "fp {:.1} us/step, packed {:.1} us/step, {} -> {} bytes ({:.2}x)",
        report.fp_step_us, report.packed_step_us, fp16_bytes, packed_bytes, report.ratio
    )?;
    Ok(())
}

fn run_precision(a: &PrecisionArgs, out: &mut dyn Write) -> Result<()> {
    let params = PrecisionParams {
        seq_len: a.seq,
        head_dim: a.d,
        group_size: a.quant.group,
        window: a.window,
        bits: a.quant.bits,
        metadata_bits: a.metadata_bits,
        adapter_rank: a.adapter.then_some(a.rank),
    };
    let report = average_precision(&params)?;
    writeln!(out, "{}", report.to_json())?;
    writeln!(out, "average precision: {:.4} bits/element", report.bits_per_element)?;
    for line in &report.assumptions {
        writeln!(out, "  assumes {line}")?;
    }
    Ok(())
}
