use flowkv_core::model::{build_toy_model, prefill, synthesize_prompt, PromptSpec};
use flowkv_core::{AttentionSnapshot, KvCache, LayerKvCache, Modality, ModelDims, TokenMeta};
use flowkv_harness::experiments::Workload;
use flowkv_harness::trace::{read_trace, write_trace, TraceError, TraceFile, FIXED_HEADER_LEN};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_trace() -> TraceFile {
    let dims = ModelDims {
        layer_count: 3,
        ..ModelDims::default()
    };
    let spec = PromptSpec {
        seed: 9,
        text_runs: 2,
        image_runs: 1,
        tokens_per_run: 8,
        patches_per_image: 24,
    };
    let model = build_toy_model(9, dims).unwrap();
    let pf = prefill(&model, &synthesize_prompt(&spec, dims.vocab_size).unwrap()).unwrap();
    TraceFile::from_prefill(&pf, 8).unwrap()
}

#[test]
fn toy_prefill_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.fkv");
    let t = toy_trace();
    write_trace(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = read_trace(&path).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.header.proxy_count, 8);
}

#[test]
fn profile_survives_round_trip() {
    let t = toy_trace();
    let before = Workload::from_trace(t.clone()).unwrap().rho;
    let after = Workload::from_trace(TraceFile::from_bytes(&t.to_bytes()).unwrap()).unwrap().rho;
    for (a, b) in before.iter().zip(&after) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn header_mismatch_detected() {
    let mut bytes = toy_trace().to_bytes();
    // Claim one more layer than the payload holds.
    bytes[8] += 1;
    match TraceFile::from_bytes(&bytes) {
        Err(TraceError::Parse { offset, .. }) => assert_eq!(offset, bytes.len()),
        other => panic!("{other:?}"),
    }
    assert!(matches!(read_trace(std::path::Path::new("/nonexistent/x.fkv")), Err(TraceError::Io(_))));
}

fn random_trace(seed: u64, layers: usize, heads: usize, n: usize, d: usize) -> TraceFile {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut attn = AttentionSnapshot::zeros(layers, heads, n);
    for l in 0..layers {
        for h in 0..heads {
            let m = attn.matrix_mut(l, h);
            for i in 0..n {
                // Powers of two sum exactly, keeping every row at 1.
                let width = i + 1;
                for j in 0..=i {
                    m[i * n + j] = if width.is_power_of_two() { 1.0 / width as f32 } else if j == 0 { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let mods: Vec<Modality> = (0..n).map(|_| if r.random_bool(0.5) { Modality::Vision } else { Modality::Text }).collect();
    let cache = KvCache::new(
        (0..layers)
            .map(|_| {
                let mut c = LayerKvCache::new();
                for (i, &m) in mods.iter().enumerate() {
                    let k: Vec<f32> = (0..d).map(|_| f32::from_bits(r.random::<u32>() & 0x3fff_ffff)).collect();
                    let v: Vec<f32> = (0..d).map(|_| -r.random::<f32>()).collect();
                    c.append(&k, &v, TokenMeta::new(i, m)).unwrap();
                }
                c
            })
            .collect(),
    );
    TraceFile::new(attn, cache, r.random_range(0..4)).unwrap()
}

proptest! {
    #[test]
    fn round_trip_is_byte_identical(seed in any::<u64>(), l in 1usize..4, h in 1usize..3, n in 1usize..12, d in 1usize..6) {
        let t = random_trace(seed, l, h, n, d);
        let bytes = t.to_bytes();
        prop_assert_eq!(bytes.len(), FIXED_HEADER_LEN + n + 4 * l * (h * n * n + 2 * n * d));
        let back = TraceFile::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, t);
    }

    #[test]
    fn truncation_always_fails(seed in any::<u64>(), cut in 1usize..200) {
        let bytes = random_trace(seed, 2, 2, 5, 3).to_bytes();
        let len = bytes.len().saturating_sub(cut);
        prop_assert!(TraceFile::from_bytes(&bytes[..len]).is_err());
    }
}
