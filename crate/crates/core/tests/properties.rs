//! Property tests over randomized inputs: mask structure, partition
//! validity, and the round-update bookkeeping identities.

use cahfp_core::data::{client_weights, dirichlet_partition, synth_dataset};
use cahfp_core::federation::{aggregate, noise_decomposition, reconstruct};
use cahfp_core::nn::{Activation, Architecture, FeatureShape, LayerSpec};
use cahfp_core::pruning::{build_group_map, generate_mask, CriterionKind, PruneMask, SaliencyScores};
use proptest::prelude::*;

fn small_mlp(hidden: usize) -> Architecture {
    Architecture::new(
        FeatureShape::Flat(4),
        vec![
            LayerSpec::Dense {
                in_dim: 4,
                out_dim: hidden,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                in_dim: hidden,
                out_dim: 3,
                activation: Activation::Identity,
            },
        ],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Masks are unions of whole groups; coupled coordinates follow
    /// their group; the last layer's outputs are never zeroed; the
    /// achieved ratio lands in [target, target + largest group mass].
    #[test]
    fn masks_are_whole_group_unions(
        hidden in 3usize..9,
        target in 0.0f64..0.5,
        warmup in prop::bool::ANY,
        seed in 0u64..1000,
    ) {
        let arch = small_mlp(hidden);
        let map = build_group_map(&arch).unwrap();
        let scores = SaliencyScores {
            per_coord: vec![0.0; map.dim],
            per_group: (0..map.groups.len()).map(|g| ((g * 7919) % 13) as f64).collect(),
            criterion: CriterionKind::Curvature,
        };
        let round = if warmup { 0 } else { 10 };
        let mask = generate_mask(Some(&scores), &map, target, round, 5, seed, 0).unwrap();

        for g in &map.groups {
            let first = mask.bits[g.own_coords[0]];
            for &c in &g.own_coords {
                prop_assert_eq!(mask.bits[c], first);
            }
            if first == 0 {
                for &c in &g.coupled_coords {
                    prop_assert_eq!(mask.bits[c], 0);
                }
            }
        }
        // Last-layer output units survive: their bias coords are in the
        // final layer's bias range and owned by no group.
        let index = arch.param_index();
        let last = index.layers.last().unwrap();
        for c in last.biases.clone() {
            prop_assert_eq!(mask.bits[c], 1);
        }
        let achieved = mask.achieved_ratio();
        prop_assert!(achieved >= target || target == 0.0);
        let max_group = map
            .groups
            .iter()
            .map(|g| g.own_coords.len() + g.coupled_coords.len())
            .max()
            .unwrap() as f64
            / map.dim as f64;
        prop_assert!(achieved <= target + max_group + 1e-12,
            "achieved {} target {} max group {}", achieved, target, max_group);
    }

    /// Partitions are disjoint, cover the dataset, and weights sum to 1.
    #[test]
    fn partitions_are_valid(
        k in 1usize..7,
        alpha in 0.05f64..20.0,
        seed in 0u64..500,
    ) {
        let ds = synth_dataset(4, 4, 30, 4.0, 11).unwrap();
        let p = dirichlet_partition(&ds, k, alpha, 1, seed).unwrap();
        let mut seen = vec![false; ds.len()];
        for shard in &p.shards {
            for &i in shard {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&b| b));
        let w = client_weights(&p);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Zeros-fill aggregation equals w - q*w + weighted deltas; the
    /// reconstruction path leaves pruned-by-all coordinates at w.
    #[test]
    fn update_identity_from_random_masks(
        seed in 0u64..300,
        k in 2usize..5,
    ) {
        let arch = small_mlp(6);
        let map = build_group_map(&arch).unwrap();
        let d = map.dim;
        let mut rng_state = seed;
        let mut next_f64 = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let w: Vec<f64> = (0..d).map(|_| next_f64()).collect();
        let weights = vec![1.0 / k as f64; k];
        let masks: Vec<PruneMask> = (0..k)
            .map(|c| generate_mask(None, &map, 0.3, 0, 5, seed.wrapping_add(c as u64), c).unwrap())
            .collect();
        // Deltas supported on each mask.
        let deltas: Vec<Vec<f64>> = masks
            .iter()
            .map(|m| (0..d).map(|i| m.bits[i] as f64 * next_f64()).collect())
            .collect();

        // Zeros-fill route: client returns (m*w + delta).
        let raw: Vec<Vec<f64>> = masks
            .iter()
            .zip(&deltas)
            .map(|(m, dl)| {
                m.apply(&w).iter().zip(dl).map(|(a, b)| a + b).collect()
            })
            .collect();
        let agg = aggregate(&raw, &weights).unwrap();
        let mask_refs: Vec<&PruneMask> = masks.iter().collect();
        let noise = noise_decomposition(&mask_refs, &weights, &w).unwrap();
        for i in 0..d {
            let mut rhs = w[i] - noise.e[i];
            for (dl, &p) in deltas.iter().zip(&weights) {
                rhs += p * dl[i];
            }
            prop_assert!((agg[i] - rhs).abs() < 1e-12);
        }

        // Reconstruction route freezes coordinates pruned by everyone.
        let recon: Vec<Vec<f64>> = raw
            .iter()
            .zip(&masks)
            .map(|(r, m)| reconstruct(r, m, &w))
            .collect();
        let agg_rec = aggregate(&recon, &weights).unwrap();
        for i in 0..d {
            if masks.iter().all(|m| m.bits[i] == 0) {
                prop_assert!((agg_rec[i] - w[i]).abs() < 1e-12);
            }
        }
    }
}
