//! Property tests for the structural invariants: IO round-trips,
//! threshold monotonicity, score identities, and fusion convexity.

use asymseg::fusion::{fuse, FusionMode, FusionSpec, PatchPrediction};
use asymseg::losses::f_beta_score;
use asymseg::patching::build_grid;
use asymseg::volume::{
    load_volume, save_volume, threshold, Dims, Mask, ProbabilityMap, Volume,
};
use proptest::prelude::*;

fn arb_dims() -> impl Strategy<Value = Dims> {
    (1usize..6, 1usize..6, 1usize..6).prop_map(|(x, y, z)| Dims::new(x, y, z))
}

fn arb_volume() -> impl Strategy<Value = Volume> {
    (arb_dims(), 1usize..3).prop_flat_map(|(dims, channels)| {
        let len = dims.voxel_count() * channels;
        (
            proptest::collection::vec(-1.0e6f32..1.0e6f32, len),
            proptest::collection::vec(0.1f64..10.0, 3),
        )
            .prop_map(move |(data, spacing)| {
                Volume::new(dims, channels, [spacing[0], spacing[1], spacing[2]], data)
                    .expect("generated volume is valid")
            })
    })
}

proptest! {
    #[test]
    fn save_load_is_identity(v in arb_volume()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.rvol");
        save_volume(&v, &path).unwrap();
        let loaded = load_volume(&path).unwrap();
        prop_assert_eq!(loaded.dims(), v.dims());
        prop_assert_eq!(loaded.channels(), v.channels());
        prop_assert_eq!(loaded.spacing(), v.spacing());
        for (a, b) in v.data().iter().zip(loaded.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn threshold_is_monotone(
        values in proptest::collection::vec(0.0f64..=1.0, 1..200),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let dims = Dims::new(values.len(), 1, 1);
        let p = ProbabilityMap::new(dims, values).unwrap();
        let loose = threshold(&p, lo).unwrap();
        let tight = threshold(&p, hi).unwrap();
        for (a, b) in tight.data().iter().zip(loose.data()) {
            // tight mask is a subset of the loose mask
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn fbeta_at_one_equals_soft_dice(
        pairs in proptest::collection::vec((0.0f64..=1.0, prop::bool::ANY), 1..300),
    ) {
        let n = pairs.len();
        let p: Vec<f64> = pairs.iter().map(|(v, _)| *v).collect();
        let g: Vec<u8> = pairs.iter().map(|(_, b)| u8::from(*b)).collect();
        prop_assume!(g.contains(&1) || p.iter().any(|&v| v > 0.0));
        let dims = Dims::new(n, 1, 1);
        let pm = ProbabilityMap::new(dims, p.clone()).unwrap();
        let gm = Mask::new(dims, g.clone()).unwrap();
        let f1 = f_beta_score(&pm, &gm, 1.0).unwrap();
        let inter: f64 = p.iter().zip(&g).map(|(pi, gi)| pi * f64::from(*gi)).sum();
        let total: f64 = p.iter().sum::<f64>() + g.iter().map(|&v| f64::from(v)).sum::<f64>();
        let dice = 2.0 * inter / total;
        prop_assert!((f1 - dice).abs() <= 1e-12, "{} vs {}", f1, dice);
    }

    #[test]
    fn fbeta_swap_symmetry(
        pairs in proptest::collection::vec((prop::bool::ANY, prop::bool::ANY), 1..300),
        beta in 0.25f64..4.0,
    ) {
        let p: Vec<u8> = pairs.iter().map(|(a, _)| u8::from(*a)).collect();
        let g: Vec<u8> = pairs.iter().map(|(_, b)| u8::from(*b)).collect();
        prop_assume!(p.contains(&1) || g.contains(&1));
        let dims = Dims::new(p.len(), 1, 1);
        let p_soft = ProbabilityMap::new(dims, p.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let g_soft = ProbabilityMap::new(dims, g.iter().map(|&v| f64::from(v)).collect()).unwrap();
        let p_mask = Mask::new(dims, p).unwrap();
        let g_mask = Mask::new(dims, g).unwrap();
        // Swapping prediction and truth inverts the role of beta.
        let lhs = f_beta_score(&p_soft, &g_mask, beta).unwrap();
        let rhs = f_beta_score(&g_soft, &p_mask, 1.0 / beta).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12, "{} vs {}", lhs, rhs);
    }
}

fn fusion_case() -> impl Strategy<Value = (Dims, usize, f64)> {
    prop_oneof![
        (arb_dims(), Just(4usize), Just(0.5f64)),
        (arb_dims(), Just(2usize), Just(0.5f64)),
        (arb_dims(), Just(4usize), Just(0.0f64)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fusion_stays_within_vote_range(
        (dims, size, overlap) in fusion_case(),
        seed in 0u64..1000,
    ) {
        let grid = build_grid(dims, size, overlap).unwrap();
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let cube = size * size * size;
        let mut patches = Vec::new();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for center in grid.centers() {
            for aug in 0..4u8 {
                let values: Vec<f64> = (0..cube).map(|_| next()).collect();
                for &v in &values {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                patches.push(PatchPrediction { center, augmentation_id: aug, values });
            }
        }
        for mode in [FusionMode::Uniform, FusionMode::Spline] {
            let spec = FusionSpec { mode, patch_size: size, stride: grid.stride };
            let fused = fuse(&patches, dims, &spec).unwrap();
            for &v in fused.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn constant_votes_fuse_exactly(
        (dims, size, overlap) in fusion_case(),
        value in 0.0f64..=1.0,
    ) {
        let grid = build_grid(dims, size, overlap).unwrap();
        let cube = size * size * size;
        let mut patches = Vec::new();
        for center in grid.centers() {
            for aug in 0..4u8 {
                patches.push(PatchPrediction {
                    center,
                    augmentation_id: aug,
                    values: vec![value; cube],
                });
            }
        }
        for mode in [FusionMode::Uniform, FusionMode::Spline] {
            let spec = FusionSpec { mode, patch_size: size, stride: grid.stride };
            let fused = fuse(&patches, dims, &spec).unwrap();
            for &v in fused.data() {
                prop_assert!((v - value).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn modes_agree_when_votes_agree(
        (dims, size, _) in fusion_case(),
        value in 0.0f64..=1.0,
    ) {
        // Tiling vs uniform vs spline on a no-overlap grid where every
        // patch predicts the same constant.
        let grid = build_grid(dims, size, 0.0).unwrap();
        let cube = size * size * size;
        let patches: Vec<PatchPrediction> = grid
            .centers()
            .into_iter()
            .map(|center| PatchPrediction {
                center,
                augmentation_id: 0,
                values: vec![value; cube],
            })
            .collect();
        let mut outputs = Vec::new();
        for mode in [FusionMode::Tiling, FusionMode::Uniform, FusionMode::Spline] {
            let spec = FusionSpec { mode, patch_size: size, stride: grid.stride };
            outputs.push(fuse(&patches, dims, &spec).unwrap());
        }
        for w in outputs.windows(2) {
            for (a, b) in w[0].data().iter().zip(w[1].data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
