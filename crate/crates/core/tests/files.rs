use kvlinc::adapter::{read_adapters, write_adapters, CorrectionAdapter};
use kvlinc::cache::{CacheConfig, KvCache};
use kvlinc::tensor::{seeded_rng, Matrix};
use kvlinc::trace::{generate_synthetic_trace, read_trace, write_trace, SyntheticParams};
use kvlinc::Error;

#[test]
fn trace_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.kvtr");
    let params = SyntheticParams {
        layers: 2,
        heads: 3,
        seq_len: 40,
        head_dim: 16,
        seed: 9,
        ..SyntheticParams::default()
    };
    let trace = generate_synthetic_trace(&params).unwrap();
    write_trace(&trace, &path).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, trace.file_len());
    assert_eq!(read_trace(&path).unwrap(), trace);
}

#[test]
fn truncated_trace_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.kvtr");
    let trace = generate_synthetic_trace(&SyntheticParams {
        seq_len: 8,
        head_dim: 4,
        outlier_channels: 1,
        ..SyntheticParams::default()
    })
    .unwrap();
    write_trace(&trace, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    match read_trace(&path) {
        Err(Error::Format { offset, .. }) => assert!(offset > 0 && offset < bytes.len() as u64),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn adapter_file_holds_several_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.kvla");
    let adapters: Vec<_> = (0..3)
        .map(|s| CorrectionAdapter::random(8, 6, 0.2, s).unwrap())
        .collect();
    write_adapters(&path, &adapters).unwrap();
    let back = read_adapters(&path).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in adapters.iter().zip(&back) {
        for (x, y) in a.weights().iter().zip(b.weights()) {
            // Stored as f32.
            assert!(x.sub(y).unwrap().max_abs() < 1e-6);
        }
    }
}

#[test]
fn cache_snapshot_reloads_and_keeps_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.kvlc");
    let config = CacheConfig {
        window: 16,
        group_size: 32,
        value_group: 32,
        rank: 16,
        ..CacheConfig::kvlinc(32)
    };
    let adapter = CorrectionAdapter::random(32, 16, 0.3, 4).unwrap();
    let mut cache = KvCache::new(config).unwrap();
    let mut rng = seeded_rng(4);
    let kv = Matrix::random_normal(150, 64, &mut rng);
    for t in 0..150 {
        cache.append(&kv.row(t)[..32], &kv.row(t)[32..], Some(&adapter)).unwrap();
    }
    cache.save(&path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, cache.memory_footprint().serialized_len());

    let loaded = KvCache::load(&path).unwrap();
    assert_eq!(loaded.config(), cache.config());
    assert_eq!(loaded.quantized_tokens(), cache.quantized_tokens());
    assert_eq!(loaded.residual_len(), cache.residual_len());
    for (a, b) in loaded.key_chunks().iter().zip(cache.key_chunks()) {
        assert_eq!(a.packed(), b.packed());
    }
    // A reloaded snapshot serializes to the same bytes.
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
}
