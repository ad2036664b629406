#![allow(dead_code)]

use flowkv_core::{AttentionSnapshot, LayerKvCache, Modality, TokenMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random causal snapshot: each row is a normalized random distribution
/// over keys `0..=i`.
pub fn random_causal(rng: &mut ChaCha8Rng, layers: usize, heads: usize, n: usize) -> AttentionSnapshot {
    let mut s = AttentionSnapshot::zeros(layers, heads, n);
    for l in 0..layers {
        for h in 0..heads {
            let m = s.matrix_mut(l, h);
            for i in 0..n {
                let raw: Vec<f64> = (0..=i).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
                let z: f64 = raw.iter().sum();
                for (j, r) in raw.iter().enumerate() {
                    m[i * n + j] = (r / z) as f32;
                }
            }
        }
    }
    s
}

pub fn random_modalities(rng: &mut ChaCha8Rng, n: usize) -> Vec<Modality> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { Modality::Text } else { Modality::Vision })
        .collect()
}

pub fn metas(mods: &[Modality]) -> Vec<TokenMeta> {
    mods.iter().enumerate().map(|(i, &m)| TokenMeta::new(i, m)).collect()
}

pub fn random_layer(rng: &mut ChaCha8Rng, mods: &[Modality], dim: usize) -> LayerKvCache {
    let mut c = LayerKvCache::new();
    for (i, &m) in mods.iter().enumerate() {
        let k: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        c.append(&k, &v, TokenMeta::new(i, m)).unwrap();
    }
    c
}

/// Brute-force interaction ratio straight from the definition.
pub fn rho_oracle(attn: &AttentionSnapshot, mods: &[Modality], layer: usize) -> f64 {
    let n = attn.seq_len();
    let heads = attn.head_count();
    let mut acc = 0.0;
    for h in 0..heads {
        let (mut cross, mut total) = (0.0f64, 0.0f64);
        for i in 0..n {
            for j in 0..n {
                let w = f64::from(attn.weight(layer, h, i, j));
                total += w;
                if mods[i] != mods[j] {
                    cross += w;
                }
            }
        }
        acc += cross / total;
    }
    acc / heads as f64
}
