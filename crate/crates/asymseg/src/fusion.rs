//! Fuse per-patch probability predictions into a full-volume map.
//!
//! Three modes: `tiling` copies the single covering patch (requires
//! stride = patch size), `uniform` averages all covering votes, and
//! `spline` weights each vote by a separable quadratic window centered on
//! its patch, so border predictions count less than center predictions.
//!
//! Fusion runs as a gather: each output voxel walks the lattice centers
//! whose extents cover it and accumulates weight * value. That keeps the
//! accumulation order fixed per voxel, so results are independent of
//! thread count. Augmented prediction cubes are undone in place via the
//! involution property of the flip transforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::patching::{augment_coords, ceil_div, floor_div, AUGMENTATIONS};
use crate::volume::{Dims, ProbabilityMap};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Tiling,
    Uniform,
    Spline,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiling" => Ok(FusionMode::Tiling),
            "uniform" => Ok(FusionMode::Uniform),
            "spline" => Ok(FusionMode::Spline),
            other => Err(Error::invalid(
                "fusion mode",
                format!("{other:?}; expected tiling, uniform, or spline"),
            )),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::Tiling => "tiling",
            FusionMode::Uniform => "uniform",
            FusionMode::Spline => "spline",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub mode: FusionMode,
    pub patch_size: usize,
    pub stride: usize,
}

impl FusionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 {
            return Err(Error::invalid(
                "fusion spec",
                "patch size and stride must be positive",
            ));
        }
        if self.mode == FusionMode::Tiling && self.stride != self.patch_size {
            return Err(Error::invalid(
                "fusion spec",
                format!(
                    "tiling requires stride = patch size, got stride {} for size {}",
                    self.stride, self.patch_size
                ),
            ));
        }
        Ok(())
    }
}

/// Separable window of per-axis weights for one patch. The underlying
/// axis profile peaks at the patch center and falls to zero at the patch
/// border; entries are evaluated at voxel centers (half-integer offsets),
/// so every stored weight is strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightKernel {
    size: usize,
    axis: Vec<f64>,
}

impl WeightKernel {
    pub fn size(&self) -> usize {
        self.size
    }

    /// Per-axis weight at local voxel coordinate `i` in `0..size`.
    #[inline]
    pub fn axis_weight(&self, i: usize) -> f64 {
        self.axis[i]
    }

    /// Full 3D weight at a local voxel coordinate.
    #[inline]
    pub fn value_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.axis[x] * self.axis[y] * self.axis[z]
    }
}

/// Centered quadratic window `w(u) = 1 - (2u / size)^2`, sampled at voxel
/// centers `u = i - size/2 + 0.5`. Second order, maximal at the center,
/// and vanishing at the patch border, which mimics the roughly Gaussian
/// decay of prediction confidence toward patch edges.
pub fn spline_kernel(size: usize) -> Result<WeightKernel> {
    if size < 2 || !size.is_multiple_of(2) {
        return Err(Error::invalid(
            "kernel size",
            format!("{size} must be even and at least 2"),
        ));
    }
    let axis = (0..size)
        .map(|i| {
            let u = i as f64 - size as f64 / 2.0 + 0.5;
            1.0 - (2.0 * u / size as f64).powi(2)
        })
        .collect();
    Ok(WeightKernel { size, axis })
}

/// One patch's prediction: probabilities over its cube, stored in the
/// augmented orientation it was predicted in.
#[derive(Clone, Debug)]
pub struct PatchPrediction {
    pub center: [usize; 3],
    pub augmentation_id: u8,
    pub values: Vec<f64>,
}

/// Weighted soft-voting fusion of overlapping patch predictions.
///
/// Every output voxel is a convex combination of the covering votes
/// (weights per the mode), so it stays within [min, max] of those votes,
/// and identical constant votes fuse to that constant. Predictions on the
/// padded region beyond `dims` are discarded.
pub fn fuse(patches: &[PatchPrediction], dims: Dims, spec: &FusionSpec) -> Result<ProbabilityMap> {
    spec.validate()?;
    let s = spec.patch_size;
    let t = spec.stride;
    let cube_len = s * s * s;

    let mut padded = [0usize; 3];
    let mut k_axis = [0usize; 3];
    for (i, &n) in dims.as_array().iter().enumerate() {
        padded[i] = n.div_ceil(t) * t;
        k_axis[i] = padded[i] / t + 1;
    }

    // Dense bucket per lattice center; each holds the indices of the
    // patch predictions placed there (typically one per augmentation).
    let slots = k_axis[0] * k_axis[1] * k_axis[2];
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); slots];
    for (idx, patch) in patches.iter().enumerate() {
        if patch.values.len() != cube_len {
            return Err(Error::invalid(
                "prediction cube",
                format!("expected {cube_len} values, got {}", patch.values.len()),
            ));
        }
        if patch.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "prediction cube",
                "probabilities must lie in [0, 1]",
            ));
        }
        if patch.augmentation_id as usize >= AUGMENTATIONS {
            return Err(Error::invalid(
                "augmentation_id",
                format!("{}", patch.augmentation_id),
            ));
        }
        let mut slot = 0usize;
        for axis in 0..3 {
            let c = patch.center[axis];
            if c % t != 0 || c > padded[axis] {
                return Err(Error::invalid(
                    "center",
                    format!("{:?} is off the stride-{t} lattice", patch.center),
                ));
            }
            slot = slot * k_axis[axis] + c / t;
        }
        buckets[slot].push(idx as u32);
    }

    let kernel = match spec.mode {
        FusionMode::Spline => Some(spline_kernel(s)?),
        _ => None,
    };
    let half = (s / 2) as i64;

    let fuse_voxel = |voxel: usize| -> Result<f64> {
        let (x, y, z) = dims.coords(voxel);
        let pos = [x as i64, y as i64, z as i64];
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for axis in 0..3 {
            // covering centers c satisfy c - s/2 <= v < c + s/2
            lo[axis] = ceil_div(pos[axis] - half + 1, t as i64).max(0);
            hi[axis] = floor_div(pos[axis] + half, t as i64).min(k_axis[axis] as i64 - 1);
        }
        let mut weighted = 0.0f64;
        let mut total = 0.0f64;
        let mut votes = 0usize;
        let mut single = 0.0f64;
        for kx in lo[0]..=hi[0] {
            for ky in lo[1]..=hi[1] {
                for kz in lo[2]..=hi[2] {
                    let slot =
                        ((kx as usize) * k_axis[1] + ky as usize) * k_axis[2] + kz as usize;
                    if buckets[slot].is_empty() {
                        continue;
                    }
                    let center = [kx as usize * t, ky as usize * t, kz as usize * t];
                    let local = [
                        (pos[0] - (center[0] as i64 - half)) as usize,
                        (pos[1] - (center[1] as i64 - half)) as usize,
                        (pos[2] - (center[2] as i64 - half)) as usize,
                    ];
                    let w = match &kernel {
                        Some(k) => k.value_at(local[0], local[1], local[2]),
                        None => 1.0,
                    };
                    for &patch_idx in &buckets[slot] {
                        let patch = &patches[patch_idx as usize];
                        // The cube is stored augmented; the transform is an
                        // involution, so reading through it restores the
                        // original orientation.
                        let (ax, ay, az) = augment_coords(
                            patch.augmentation_id,
                            s,
                            local[0],
                            local[1],
                            local[2],
                        );
                        let value = patch.values[(ax * s + ay) * s + az];
                        weighted += w * value;
                        total += w;
                        votes += 1;
                        single = value;
                    }
                }
            }
        }
        match spec.mode {
            FusionMode::Tiling => {
                if votes != 1 {
                    return Err(Error::Internal(format!(
                        "tiling expects exactly one covering patch per voxel, found {votes}"
                    )));
                }
                Ok(single)
            }
            _ => {
                if total <= 0.0 {
                    return Err(Error::Internal(format!(
                        "zero fusion weight at voxel ({x}, {y}, {z})"
                    )));
                }
                Ok((weighted / total).clamp(0.0, 1.0))
            }
        }
    };

    let mut failure: Option<Error> = None;
    let mut out = vec![0.0f64; dims.voxel_count()];
    let chunk_results: Vec<Result<Vec<f64>>> = par::partials(dims.voxel_count(), |r| {
        r.map(&fuse_voxel).collect()
    });
    let mut cursor = 0usize;
    for chunk in chunk_results {
        match chunk {
            Ok(values) => {
                out[cursor..cursor + values.len()].copy_from_slice(&values);
                cursor += values.len();
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }
    ProbabilityMap::new(dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::build_grid;

    fn full_grid_predictions(
        dims: Dims,
        s: usize,
        overlap: f64,
        value: f64,
        augs: &[u8],
    ) -> (Vec<PatchPrediction>, FusionSpec) {
        let grid = build_grid(dims, s, overlap).unwrap();
        let mut patches = Vec::new();
        for center in grid.centers() {
            for &aug in augs {
                patches.push(PatchPrediction {
                    center,
                    augmentation_id: aug,
                    values: vec![value; s * s * s],
                });
            }
        }
        (
            patches,
            FusionSpec {
                mode: FusionMode::Uniform,
                patch_size: s,
                stride: grid.stride,
            },
        )
    }

    #[test]
    fn constant_votes_fuse_to_the_constant() {
        let dims = Dims::new(12, 10, 8);
        for mode in [FusionMode::Uniform, FusionMode::Spline] {
            let (patches, mut spec) =
                full_grid_predictions(dims, 4, 0.5, 0.7, &[0, 1, 2, 3]);
            spec.mode = mode;
            let fused = fuse(&patches, dims, &spec).unwrap();
            assert!(
                fused.data().iter().all(|v| (v - 0.7).abs() < 1e-12),
                "mode {mode}"
            );
        }
    }

    #[test]
    fn spline_kernel_reference_values() {
        let k = spline_kernel(64).unwrap();
        // Center voxel: offset 0.5 per axis.
        let w_center = k.value_at(31, 31, 31);
        let expected = (1.0 - (1.0f64 / 64.0).powi(2)).powi(3);
        assert!((w_center - expected).abs() < 1e-12);
        assert!((w_center - 0.99927).abs() < 1e-4);
        // Border voxel along one axis: offset 31.5.
        let w1_border = k.axis_weight(63);
        assert!((w1_border - (1.0 - (63.0f64 / 64.0).powi(2))).abs() < 1e-12);
        assert!((w1_border - 0.03100).abs() < 1e-4);
        // All weights strictly positive and at most 1.
        for i in 0..64 {
            let w = k.axis_weight(i);
            assert!(w > 0.0 && w <= 1.0);
        }
        // Symmetric and non-increasing away from the center.
        for i in 0..32 {
            assert_eq!(k.axis_weight(i).to_bits(), k.axis_weight(63 - i).to_bits());
        }
        for i in 32..63 {
            assert!(k.axis_weight(i) >= k.axis_weight(i + 1));
        }
    }

    #[test]
    fn spline_kernel_rejects_odd_sizes() {
        assert!(spline_kernel(0).is_err());
        assert!(spline_kernel(5).is_err());
    }

    #[test]
    fn spline_weighs_center_votes_higher_than_uniform() {
        // One patch votes 1.0 at a voxel near its center; the overlapping
        // patches vote 0 there (the voxel sits near their borders).
        let dims = Dims::new(8, 8, 8);
        let s = 8;
        let grid = build_grid(dims, s, 0.5).unwrap();
        let target = (4usize, 4usize, 4usize); // center of the [4,4,4] patch
        let mut patches = Vec::new();
        for center in grid.centers() {
            let mut values = vec![0.0; s * s * s];
            if center == [4, 4, 4] {
                let half = (s / 2) as i64;
                let lx = (target.0 as i64 - (center[0] as i64 - half)) as usize;
                let ly = (target.1 as i64 - (center[1] as i64 - half)) as usize;
                let lz = (target.2 as i64 - (center[2] as i64 - half)) as usize;
                values[(lx * s + ly) * s + lz] = 1.0;
            }
            patches.push(PatchPrediction {
                center,
                augmentation_id: 0,
                values,
            });
        }
        let uniform = fuse(
            &patches,
            dims,
            &FusionSpec {
                mode: FusionMode::Uniform,
                patch_size: s,
                stride: grid.stride,
            },
        )
        .unwrap();
        let spline = fuse(
            &patches,
            dims,
            &FusionSpec {
                mode: FusionMode::Spline,
                patch_size: s,
                stride: grid.stride,
            },
        )
        .unwrap();
        let idx = dims.index(target.0, target.1, target.2);
        assert!(uniform.data()[idx] < 1.0);
        assert!(spline.data()[idx] < 1.0);
        assert!(
            spline.data()[idx] > uniform.data()[idx],
            "spline {} vs uniform {}",
            spline.data()[idx],
            uniform.data()[idx]
        );
    }

    #[test]
    fn tiling_is_bit_exact_concatenation() {
        let dims = Dims::new(8, 8, 8);
        let s = 4;
        let grid = build_grid(dims, s, 0.0).unwrap();
        let mut patches = Vec::new();
        for (i, center) in grid.centers().into_iter().enumerate() {
            let values: Vec<f64> = (0..s * s * s)
                .map(|j| ((i * 131 + j * 17) % 997) as f64 / 996.0)
                .collect();
            patches.push(PatchPrediction {
                center,
                augmentation_id: 0,
                values,
            });
        }
        let spec = FusionSpec {
            mode: FusionMode::Tiling,
            patch_size: s,
            stride: s,
        };
        let fused = fuse(&patches, dims, &spec).unwrap();
        // Every voxel must equal the value of its unique covering patch.
        let half = (s / 2) as i64;
        for x in 0..8usize {
            for y in 0..8usize {
                for z in 0..8usize {
                    let mut expected = None;
                    for p in &patches {
                        let x0 = p.center[0] as i64 - half;
                        let y0 = p.center[1] as i64 - half;
                        let z0 = p.center[2] as i64 - half;
                        let (lx, ly, lz) =
                            (x as i64 - x0, y as i64 - y0, z as i64 - z0);
                        if (0..s as i64).contains(&lx)
                            && (0..s as i64).contains(&ly)
                            && (0..s as i64).contains(&lz)
                        {
                            assert!(expected.is_none(), "overlapping tiles");
                            expected = Some(
                                p.values[((lx as usize) * s + ly as usize) * s + lz as usize],
                            );
                        }
                    }
                    let got = fused.data()[dims.index(x, y, z)];
                    assert_eq!(got.to_bits(), expected.unwrap().to_bits());
                }
            }
        }
    }

    #[test]
    fn tiling_requires_matching_stride() {
        let spec = FusionSpec {
            mode: FusionMode::Tiling,
            patch_size: 8,
            stride: 4,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn augmented_copies_do_not_shift_the_result() {
        // A non-constant prediction fed once vs. four augmented copies
        // (the cubes transformed accordingly) must fuse identically.
        let dims = Dims::new(8, 8, 8);
        let s = 8;
        let grid = build_grid(dims, s, 0.5).unwrap();
        let base_cube = |center: [usize; 3]| -> Vec<f64> {
            (0..s * s * s)
                .map(|j| {
                    (((center[0] * 7 + center[1] * 3 + center[2]) * 31 + j * 13) % 89) as f64
                        / 88.0
                })
                .collect()
        };
        let mut once = Vec::new();
        let mut four = Vec::new();
        for center in grid.centers() {
            let cube = base_cube(center);
            once.push(PatchPrediction {
                center,
                augmentation_id: 0,
                values: cube.clone(),
            });
            for aug in 0..AUGMENTATIONS as u8 {
                let mut transformed = vec![0.0; cube.len()];
                for x in 0..s {
                    for y in 0..s {
                        for z in 0..s {
                            let (a, b, c) = augment_coords(aug, s, x, y, z);
                            transformed[(a * s + b) * s + c] = cube[(x * s + y) * s + z];
                        }
                    }
                }
                four.push(PatchPrediction {
                    center,
                    augmentation_id: aug,
                    values: transformed,
                });
            }
        }
        for mode in [FusionMode::Uniform, FusionMode::Spline] {
            let spec = FusionSpec {
                mode,
                patch_size: s,
                stride: grid.stride,
            };
            let a = fuse(&once, dims, &spec).unwrap();
            let b = fuse(&four, dims, &spec).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15, "mode {mode}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn cube_size_mismatch_rejected() {
        let dims = Dims::new(4, 4, 4);
        let patches = vec![PatchPrediction {
            center: [0, 0, 0],
            augmentation_id: 0,
            values: vec![0.5; 9],
        }];
        let spec = FusionSpec {
            mode: FusionMode::Uniform,
            patch_size: 4,
            stride: 2,
        };
        assert!(fuse(&patches, dims, &spec).is_err());
    }

    #[test]
    fn uncovered_voxel_is_an_internal_error() {
        // A single corner patch cannot cover the whole volume.
        let dims = Dims::new(8, 8, 8);
        let patches = vec![PatchPrediction {
            center: [0, 0, 0],
            augmentation_id: 0,
            values: vec![0.5; 64],
        }];
        let spec = FusionSpec {
            mode: FusionMode::Uniform,
            patch_size: 4,
            stride: 2,
        };
        assert!(matches!(
            fuse(&patches, dims, &spec),
            Err(Error::Internal(_))
        ));
    }
}
