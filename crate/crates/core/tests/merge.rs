mod common;

use common::*;
use flowkv_core::cache::mark_proxies;
use flowkv_core::importance::{select_pivots, ImportanceVector, PivotPartition};
use flowkv_core::merge::{
    build_merge_plan, execute_merge, resolve_tau, Assignment, SimilarityMatrix, TauSpec,
};
use flowkv_core::{LayerKvCache, MergeMode, Modality, TokenMeta};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_case(r: &mut ChaCha8Rng, n: usize, dim: usize) -> (LayerKvCache, PivotPartition) {
    let mods = random_modalities(r, n);
    let layer = random_layer(r, &mods, dim);
    let mut meta = layer.meta().to_vec();
    mark_proxies(&mut meta, r.random_range(0..n.min(3)));
    let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
    let budget = r.random_range(1..=n);
    let part = select_pivots(ImportanceVector::new(scores).unwrap(), budget, &meta).unwrap();
    (layer, part)
}

fn cos64(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    let na: f64 = a.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn plan_matches_brute_force_argmax() {
    let mut r = rng(5);
    for _ in 0..300 {
        let n = r.random_range(2..14);
        let (layer, part) = random_case(&mut r, n, 6);
        let tau = r.random::<f64>();
        let mode = if r.random_bool(0.5) { MergeMode::InterModal } else { MergeMode::IntraModal };
        let plan = build_merge_plan(&part, &layer, mode, tau).unwrap();
        for &(i, a) in &plan.assignments {
            let eligible: Vec<usize> = part
                .pivots
                .iter()
                .copied()
                .filter(|&j| !part.is_proxy(j) && part.importance.get(j) <= tau)
                .filter(|&j| mode == MergeMode::InterModal || layer.meta()[i].modality == layer.meta()[j].modality)
                .collect();
            match a {
                Assignment::Merge(j) => {
                    assert!(eligible.contains(&j));
                    let best = eligible.iter().map(|&c| cos64(layer.key(i), layer.key(c))).fold(f64::NEG_INFINITY, f64::max);
                    assert!(cos64(layer.key(i), layer.key(j)) >= best - 1e-5);
                }
                Assignment::Discard => assert!(eligible.is_empty()),
                Assignment::Retain => panic!("retain without the flag"),
            }
        }
    }
}

#[test]
fn similarity_entries_in_range() {
    let mut r = rng(6);
    for _ in 0..50 {
        let (layer, part) = random_case(&mut r, 12, 5);
        let sim = SimilarityMatrix::compute(&part, &layer);
        for row in 0..sim.rows.len() {
            for u in sim.row(row).iter().flatten() {
                assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&f64::from(*u)));
            }
        }
    }
}

#[test]
fn intra_modal_never_crosses_exhaustive() {
    let mut r = rng(7);
    for n in 1..=10usize {
        for mask in 0u32..(1 << n) {
            let mods: Vec<Modality> = (0..n)
                .map(|i| if mask >> i & 1 == 1 { Modality::Vision } else { Modality::Text })
                .collect();
            let layer = random_layer(&mut r, &mods, 3);
            let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
            let part = select_pivots(ImportanceVector::new(scores).unwrap(), n.div_ceil(3), layer.meta()).unwrap();
            let plan = build_merge_plan(&part, &layer, MergeMode::IntraModal, f64::INFINITY).unwrap();
            for &(i, a) in &plan.assignments {
                if let Assignment::Merge(j) = a {
                    assert_eq!(mods[i], mods[j]);
                }
            }
        }
    }
}

fn case() -> impl Strategy<Value = (LayerKvCache, PivotPartition, f64, bool)> {
    (2usize..24, any::<u64>(), 0.0f64..=1.0, any::<bool>()).prop_map(|(n, seed, q, intra)| {
        let mut r = rng(seed);
        let (layer, part) = random_case(&mut r, n, 4);
        (layer, part, q, intra)
    })
}

proptest! {
    #[test]
    fn size_law_and_sensitivity((layer, part, q, intra) in case()) {
        let mode = if intra { MergeMode::IntraModal } else { MergeMode::InterModal };
        let tau = resolve_tau(&part, TauSpec::Quantile(q)).unwrap();
        let plan = build_merge_plan(&part, &layer, mode, tau).unwrap();
        let (out, stats) = execute_merge(&layer, &plan, &part).unwrap();
        prop_assert_eq!(out.len(), part.pivots.len());
        prop_assert_eq!(stats.retained + stats.merged + stats.discarded, layer.len());
        prop_assert!(stats.bytes_compressed <= stats.bytes_full);
        for (row, &p) in part.pivots.iter().enumerate() {
            prop_assert_eq!(out.meta()[row], layer.meta()[p]);
            if part.importance.get(p) > tau || part.is_proxy(p) {
                prop_assert_eq!(out.key(row), layer.key(p));
                prop_assert_eq!(out.value(row), layer.value(p));
            }
        }
    }

    #[test]
    fn merged_rows_are_convex((layer, part, _q, intra) in case()) {
        let mode = if intra { MergeMode::IntraModal } else { MergeMode::InterModal };
        let plan = build_merge_plan(&part, &layer, mode, f64::INFINITY).unwrap();
        let (out, _) = execute_merge(&layer, &plan, &part).unwrap();
        for (row, &p) in part.pivots.iter().enumerate() {
            let mut group = vec![p];
            group.extend(plan.assignments.iter().filter(|(_, a)| *a == Assignment::Merge(p)).map(|(i, _)| *i));
            for c in 0..4 {
                for (get_src, got) in [(LayerKvCache::key as fn(&LayerKvCache, usize) -> &[f32], out.key(row)), (LayerKvCache::value, out.value(row))] {
                    let lo = group.iter().map(|&g| get_src(&layer, g)[c]).fold(f32::INFINITY, f32::min);
                    let hi = group.iter().map(|&g| get_src(&layer, g)[c]).fold(f32::NEG_INFINITY, f32::max);
                    prop_assert!(got[c] >= lo && got[c] <= hi);
                }
            }
        }
    }

    #[test]
    fn identical_groups_merge_exactly(v in prop::collection::vec(-5.0f32..5.0, 3), weights in prop::collection::vec(0.0f64..10.0, 2..8)) {
        let n = weights.len();
        let mut layer = LayerKvCache::new();
        for i in 0..n {
            layer.append(&v, &v, TokenMeta::new(i, Modality::Text)).unwrap();
        }
        let part = select_pivots(ImportanceVector::new(weights).unwrap(), 1, layer.meta()).unwrap();
        let plan = build_merge_plan(&part, &layer, MergeMode::InterModal, f64::INFINITY).unwrap();
        let (out, stats) = execute_merge(&layer, &plan, &part).unwrap();
        prop_assert_eq!(stats.merged, n - 1);
        prop_assert_eq!(out.key(0), v.as_slice());
        prop_assert_eq!(out.value(0), v.as_slice());
    }

    #[test]
    fn deterministic((layer, part, q, intra) in case()) {
        let mode = if intra { MergeMode::IntraModal } else { MergeMode::InterModal };
        let tau = resolve_tau(&part, TauSpec::Quantile(q)).unwrap();
        let a = build_merge_plan(&part, &layer, mode, tau).unwrap();
        let b = build_merge_plan(&part, &layer, mode, tau).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(execute_merge(&layer, &a, &part).unwrap(), execute_merge(&layer, &b, &part).unwrap());
    }
}
