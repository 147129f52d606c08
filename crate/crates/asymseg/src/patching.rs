//! Overlapping 3D patch grids, patch extraction with flip augmentation,
//! and lesion-aware training-patch selection.
//!
//! Patch centers sit on the stride lattice `{0, t, 2t, ..., L}` per axis,
//! where `L` is the axis length padded up to the next multiple of the
//! stride. Both boundaries are included, so reads outside the volume are
//! zero-padded and every voxel of the volume falls strictly inside at
//! least one patch. At 50% overlap (stride = size/2) every voxel is
//! covered by exactly 2 patches per axis, 8 in 3D.
//!
//! Four augmentations are used: identity plus a 180-degree rotation about
//! each axis. Each rotation reverses the two axes orthogonal to its own
//! and is its own inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{Dims, Mask, Volume};

/// Number of patch augmentations (identity + three axis rotations).
pub const AUGMENTATIONS: usize = 4;

/// Map local cube coordinates through augmentation `id` (0 = identity,
/// 1..=3 = 180-degree rotation about the x, y, z axis). The mapping is an
/// involution: applying it twice is the identity.
#[inline]
pub fn augment_coords(
    id: u8,
    size: usize,
    x: usize,
    y: usize,
    z: usize,
) -> (usize, usize, usize) {
    let m = size - 1;
    match id {
        0 => (x, y, z),
        1 => (x, m - y, m - z),
        2 => (m - x, y, m - z),
        3 => (m - x, m - y, z),
        _ => panic!("augmentation id {id} out of range"),
    }
}

/// Lattice of patch centers over a (possibly padded) volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub volume_dims: Dims,
    pub patch_size: usize,
    pub stride: usize,
    /// Axis lengths rounded up to the next stride multiple.
    pub padded: [usize; 3],
    /// Center count per axis: padded / stride + 1.
    pub centers_per_axis: [usize; 3],
}

impl PatchGrid {
    /// Centers per augmentation, i.e. the product over axes.
    pub fn center_count(&self) -> usize {
        self.centers_per_axis.iter().product()
    }

    /// Total patches over all augmentations.
    pub fn patch_count(&self) -> usize {
        self.center_count() * AUGMENTATIONS
    }

    /// All centers in scan order (x slowest, z fastest).
    pub fn centers(&self) -> Vec<[usize; 3]> {
        let [kx, ky, kz] = self.centers_per_axis;
        let t = self.stride;
        let mut out = Vec::with_capacity(self.center_count());
        for ix in 0..kx {
            for iy in 0..ky {
                for iz in 0..kz {
                    out.push([ix * t, iy * t, iz * t]);
                }
            }
        }
        out
    }

    pub fn is_on_lattice(&self, center: [usize; 3]) -> bool {
        center
            .iter()
            .zip(&self.padded)
            .all(|(&c, &l)| c % self.stride == 0 && c <= l)
    }
}

/// Build the boundary-inclusive patch lattice for a volume.
///
/// The stride is `round(size * (1 - overlap_fraction))`; axes are padded
/// up to the next stride multiple, and centers are placed at every stride
/// multiple from 0 to the padded length inclusive.
pub fn build_grid(dims: Dims, patch_size: usize, overlap_fraction: f64) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::invalid("patch_size", "must be positive"));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::invalid(
            "overlap_fraction",
            format!("{overlap_fraction} outside [0, 1)"),
        ));
    }
    let stride = (patch_size as f64 * (1.0 - overlap_fraction)).round() as usize;
    if stride == 0 {
        return Err(Error::invalid(
            "overlap_fraction",
            "stride rounds to zero at this overlap",
        ));
    }
    let mut padded = [0usize; 3];
    let mut centers_per_axis = [0usize; 3];
    for (i, &n) in dims.as_array().iter().enumerate() {
        let l = n.div_ceil(stride) * stride;
        if patch_size > 2 * l {
            return Err(Error::invalid(
                "patch_size",
                format!("{patch_size} exceeds twice the padded axis length {l}"),
            ));
        }
        padded[i] = l;
        centers_per_axis[i] = l / stride + 1;
    }
    Ok(PatchGrid {
        volume_dims: dims,
        patch_size,
        stride,
        padded,
        centers_per_axis,
    })
}

/// One extracted patch: an augmented, zero-padded multi-channel cube.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub center: [usize; 3],
    pub augmentation_id: u8,
    pub channels: usize,
    pub size: usize,
    /// channel slowest, then x, y, z fastest; exactly channels * size^3.
    pub data: Vec<f32>,
}

impl Patch {
    /// Half-open extent `[center - size/2, center + size/2)` along one axis.
    pub fn extent(&self, axis: usize) -> (i64, i64) {
        let half = (self.size / 2) as i64;
        let c = self.center[axis] as i64;
        (c - half, c - half + self.size as i64)
    }
}

/// Copy the cube centered at `center` out of the volume (zero-padded
/// outside) and apply the augmentation transform.
pub fn extract_patch(
    v: &Volume,
    grid: &PatchGrid,
    center: [usize; 3],
    augmentation_id: u8,
) -> Result<Patch> {
    if augmentation_id as usize >= AUGMENTATIONS {
        return Err(Error::invalid(
            "augmentation_id",
            format!("{augmentation_id} not in 0..{AUGMENTATIONS}"),
        ));
    }
    if !grid.is_on_lattice(center) {
        return Err(Error::invalid(
            "center",
            format!("{center:?} is not on the stride-{} lattice", grid.stride),
        ));
    }
    let s = grid.patch_size;
    let half = (s / 2) as i64;
    let dims = v.dims();
    let c = v.channels();
    let mut data = vec![0.0f32; c * s * s * s];
    for ch in 0..c {
        let base = ch * s * s * s;
        for x in 0..s {
            let gx = center[0] as i64 - half + x as i64;
            for y in 0..s {
                let gy = center[1] as i64 - half + y as i64;
                for z in 0..s {
                    let gz = center[2] as i64 - half + z as i64;
                    if dims.contains(gx, gy, gz) {
                        let (tx, ty, tz) = augment_coords(augmentation_id, s, x, y, z);
                        data[base + (tx * s + ty) * s + tz] =
                            v.get(ch, gx as usize, gy as usize, gz as usize);
                    }
                }
            }
        }
    }
    Ok(Patch {
        center,
        augmentation_id,
        channels: c,
        size: s,
        data,
    })
}

/// Ground-truth cube for a patch extent (identity orientation,
/// zero-padded outside the mask).
pub fn extract_mask_patch(g: &Mask, center: [usize; 3], size: usize) -> Mask {
    let half = (size / 2) as i64;
    let dims = g.dims();
    let mut data = vec![0u8; size * size * size];
    for x in 0..size {
        let gx = center[0] as i64 - half + x as i64;
        for y in 0..size {
            let gy = center[1] as i64 - half + y as i64;
            for z in 0..size {
                let gz = center[2] as i64 - half + z as i64;
                if dims.contains(gx, gy, gz) {
                    data[(x * size + y) * size + z] =
                        g.get(gx as usize, gy as usize, gz as usize);
                }
            }
        }
    }
    Mask::new(Dims::new(size, size, size), data).expect("copied values are binary")
}

/// How many patches (identity augmentation) cover each voxel of the
/// unpadded volume.
pub fn coverage_counts(grid: &PatchGrid) -> Vec<u32> {
    let dims = grid.volume_dims;
    let s = grid.patch_size as i64;
    let t = grid.stride as i64;
    let mut axis_counts: [Vec<u32>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (axis, counts) in axis_counts.iter_mut().enumerate() {
        let n = dims.as_array()[axis];
        let k_max = (grid.centers_per_axis[axis] - 1) as i64;
        for v in 0..n as i64 {
            // centers c with c - s/2 <= v < c + s/2, i.e. c in (v - s/2, v + s/2]
            let lo = ceil_div(v - s / 2 + 1, t).max(0);
            let hi = floor_div(v + s / 2, t).min(k_max);
            counts.push((hi - lo + 1).max(0) as u32);
        }
    }
    let mut out = Vec::with_capacity(dims.voxel_count());
    for x in 0..dims.nx {
        for y in 0..dims.ny {
            for z in 0..dims.nz {
                out.push(axis_counts[0][x] * axis_counts[1][y] * axis_counts[2][z]);
            }
        }
    }
    out
}

#[inline]
pub(crate) fn floor_div(a: i64, b: i64) -> i64 {
    a.div_euclid(b)
}

#[inline]
pub(crate) fn ceil_div(a: i64, b: i64) -> i64 {
    -((-a).div_euclid(b))
}

/// 3D summed-area table over a mask; box sums in O(1) per query.
struct IntegralImage {
    dims: Dims,
    table: Vec<i64>,
}

impl IntegralImage {
    fn build(mask: &Mask) -> Self {
        let d = mask.dims();
        let (nx, ny, nz) = (d.nx + 1, d.ny + 1, d.nz + 1);
        let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
        let mut table = vec![0i64; nx * ny * nz];
        for x in 1..nx {
            for y in 1..ny {
                for z in 1..nz {
                    table[idx(x, y, z)] = mask.get(x - 1, y - 1, z - 1) as i64
                        + table[idx(x - 1, y, z)]
                        + table[idx(x, y - 1, z)]
                        + table[idx(x, y, z - 1)]
                        - table[idx(x - 1, y - 1, z)]
                        - table[idx(x - 1, y, z - 1)]
                        - table[idx(x, y - 1, z - 1)]
                        + table[idx(x - 1, y - 1, z - 1)];
                }
            }
        }
        IntegralImage { dims: d, table }
    }

    /// Sum over the half-open box [x0, x1) x [y0, y1) x [z0, z1),
    /// clipped to the mask bounds.
    fn box_sum(&self, x0: i64, x1: i64, y0: i64, y1: i64, z0: i64, z1: i64) -> i64 {
        let cx0 = x0.clamp(0, self.dims.nx as i64) as usize;
        let cx1 = x1.clamp(0, self.dims.nx as i64) as usize;
        let cy0 = y0.clamp(0, self.dims.ny as i64) as usize;
        let cy1 = y1.clamp(0, self.dims.ny as i64) as usize;
        let cz0 = z0.clamp(0, self.dims.nz as i64) as usize;
        let cz1 = z1.clamp(0, self.dims.nz as i64) as usize;
        if cx0 >= cx1 || cy0 >= cy1 || cz0 >= cz1 {
            return 0;
        }
        let (ny, nz) = (self.dims.ny + 1, self.dims.nz + 1);
        let idx = |x: usize, y: usize, z: usize| (x * ny + y) * nz + z;
        let t = &self.table;
        t[idx(cx1, cy1, cz1)] - t[idx(cx0, cy1, cz1)] - t[idx(cx1, cy0, cz1)]
            - t[idx(cx1, cy1, cz0)]
            + t[idx(cx0, cy0, cz1)]
            + t[idx(cx0, cy1, cz0)]
            + t[idx(cx1, cy0, cz0)]
            - t[idx(cx0, cy0, cz0)]
    }
}

/// Pick `per_image_quota` centers whose patches hold at least
/// `min_lesion_voxels` ground-truth lesion voxels, uniformly without
/// replacement under a ChaCha8 stream seeded with `rng_seed`. The chosen
/// centers are returned in scan order; the same seed and inputs always
/// produce the same selection.
pub fn select_training_patches(
    g: &Mask,
    grid: &PatchGrid,
    min_lesion_voxels: usize,
    per_image_quota: usize,
    rng_seed: u64,
) -> Result<Vec<[usize; 3]>> {
    if per_image_quota == 0 {
        return Err(Error::invalid("per_image_quota", "must be positive"));
    }
    let integral = IntegralImage::build(g);
    let half = (grid.patch_size / 2) as i64;
    let s = grid.patch_size as i64;
    let qualifying: Vec<[usize; 3]> = grid
        .centers()
        .into_iter()
        .filter(|c| {
            let count = integral.box_sum(
                c[0] as i64 - half,
                c[0] as i64 - half + s,
                c[1] as i64 - half,
                c[1] as i64 - half + s,
                c[2] as i64 - half,
                c[2] as i64 - half + s,
            );
            count >= min_lesion_voxels as i64
        })
        .collect();
    if qualifying.len() < per_image_quota {
        return Err(Error::SelectionShortfall {
            qualifying: qualifying.len(),
            requested: per_image_quota,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked: Vec<usize> =
        rand::seq::index::sample(&mut rng, qualifying.len(), per_image_quota).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| qualifying[i]).collect())
}
