//! Deterministic synthetic volumes with ellipsoidal lesions.
//!
//! Generation is a pure function of the spec: the same seed always yields
//! the same bytes. All randomness flows through a single ChaCha8 stream
//! (`rand_chacha::ChaCha8Rng` seeded with `rng_seed`), which is the named
//! generator other implementations must match to reproduce fixtures.
//!
//! A volume is a smooth low-frequency cosine field per channel, plus
//! i.i.d. Gaussian noise, plus a per-channel intensity shift on every
//! voxel inside a lesion. Lesions are random non-overlapping ellipsoids;
//! the mask marks exactly the voxels whose centers fall inside one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::volume::{Dims, Mask, Volume};

/// Amplitude budget of the smooth background field (sum over modes).
const BACKGROUND_AMPLITUDE: f64 = 0.5;
const BACKGROUND_MODES: usize = 3;
/// Whole-generation retries before reporting the fraction unsatisfiable.
const MAX_ROUNDS: usize = 64;
/// Ellipsoid placement attempts within one round.
const MAX_PLACEMENTS: usize = 200;

/// Lesion-load presets scaled from sparse / typical / dense clinical
/// loads; values are fractions of total voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LesionLoad {
    Low,
    Medium,
    High,
}

impl LesionLoad {
    pub fn fraction(&self) -> f64 {
        match self {
            LesionLoad::Low => 8.814e-5,
            LesionLoad::Medium => 2.1117e-3,
            LesionLoad::High => 7.0667e-3,
        }
    }

    pub const NAMES: [&'static str; 3] = ["low", "medium", "high"];
}

impl std::str::FromStr for LesionLoad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(LesionLoad::Low),
            "medium" => Ok(LesionLoad::Medium),
            "high" => Ok(LesionLoad::High),
            other => Err(Error::invalid(
                "preset",
                format!("{other:?}; valid presets are low, medium, high"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub dims: Dims,
    pub channels: usize,
    pub spacing: [f64; 3],
    /// Inclusive range for the number of lesions.
    pub lesion_count: (usize, usize),
    /// Per-axis ellipsoid radius range, in voxels.
    pub lesion_radius: (f64, f64),
    /// Target fraction of lesion voxels; realizations outside +-50% of
    /// this are regenerated.
    pub lesion_fraction: f64,
    /// Added to every lesion voxel, per channel.
    pub intensity_shift: Vec<f64>,
    pub noise_sigma: f64,
    pub rng_seed: u64,
}

impl SynthSpec {
    /// Spec for a named lesion load on the given dims; lesion count and
    /// radii are derived so the target fraction is reachable.
    pub fn preset(load: LesionLoad, dims: Dims, channels: usize, rng_seed: u64) -> SynthSpec {
        let target_voxels = load.fraction() * dims.voxel_count() as f64;
        // Aim for a handful of lesions of roughly equal volume.
        let count = ((target_voxels / 40.0).round() as usize).clamp(1, 12).max(
            if target_voxels >= 25.0 { 2 } else { 1 },
        );
        let per_lesion = target_voxels / count as f64;
        let radius = (per_lesion * 3.0 / (4.0 * std::f64::consts::PI)).cbrt();
        let radius = radius.max(0.72); // a sub-voxel ellipsoid marks one voxel
        SynthSpec {
            dims,
            channels,
            spacing: [1.0, 1.0, 1.0],
            lesion_count: (count, count),
            lesion_radius: (radius * 0.85, radius * 1.15),
            lesion_fraction: load.fraction(),
            intensity_shift: vec![2.5; channels],
            noise_sigma: 1.0,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.intensity_shift.len() != self.channels {
            return Err(Error::invalid(
                "intensity_shift",
                "must provide one shift per channel",
            ));
        }
        let (r_lo, r_hi) = self.lesion_radius;
        if !(r_lo > 0.0 && r_hi >= r_lo) {
            return Err(Error::invalid("lesion_radius", "range must be positive"));
        }
        let min_dim = self.dims.as_array().into_iter().min().unwrap() as f64;
        if 2.0 * r_hi >= min_dim {
            return Err(Error::invalid(
                "lesion_radius",
                format!("radius {r_hi} cannot fit inside dims {:?}", self.dims.as_array()),
            ));
        }
        if self.lesion_count.0 == 0 || self.lesion_count.1 < self.lesion_count.0 {
            return Err(Error::invalid("lesion_count", "range must be non-empty"));
        }
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction < 1.0) {
            return Err(Error::invalid("lesion_fraction", "must lie in (0, 1)"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::invalid("noise_sigma", "must be non-negative"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let q = [x, y, z]
            .iter()
            .zip(self.center.iter().zip(&self.radii))
            .map(|(&v, (c, r))| {
                let d = (v as f64 + 0.5 - c) / r;
                d * d
            })
            .sum::<f64>();
        q <= 1.0
    }

    fn bounding_box(&self, dims: Dims) -> [(usize, usize); 3] {
        let mut out = [(0usize, 0usize); 3];
        for (a, slot) in out.iter_mut().enumerate() {
            let lo = (self.center[a] - self.radii[a] - 1.0).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a] + 1.0).ceil() as usize)
                .min(dims.as_array()[a]);
            *slot = (lo, hi);
        }
        out
    }
}

/// Generate one volume/mask pair. Deterministic per spec.
pub fn generate(spec: &SynthSpec) -> Result<(Volume, Mask)> {
    spec.validate()?;
    let dims = spec.dims;
    let n = dims.voxel_count();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // Smooth per-channel background: a few low-frequency cosine modes.
    let mut field = vec![0.0f64; spec.channels * n];
    let amplitude = BACKGROUND_AMPLITUDE / BACKGROUND_MODES as f64;
    for c in 0..spec.channels {
        for _ in 0..BACKGROUND_MODES {
            let freq: [f64; 3] = [
                rng.random_range(0..=2u32) as f64,
                rng.random_range(0..=2u32) as f64,
                rng.random_range(0..=2u32) as f64,
            ];
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let base = c * n;
            for x in 0..dims.nx {
                let fx = freq[0] * x as f64 / dims.nx as f64;
                for y in 0..dims.ny {
                    let fy = freq[1] * y as f64 / dims.ny as f64;
                    for z in 0..dims.nz {
                        let fz = freq[2] * z as f64 / dims.nz as f64;
                        field[base + dims.index(x, y, z)] +=
                            amplitude * (std::f64::consts::TAU * (fx + fy + fz) + phase).cos();
                    }
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
        for v in field.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    // Lesions: retry whole rounds until the realized fraction lands
    // within +-50% of the target.
    let target = spec.lesion_fraction * n as f64;
    let count_dist = Uniform::new_inclusive(spec.lesion_count.0, spec.lesion_count.1)
        .map_err(|e| Error::invalid("lesion_count", e.to_string()))?;
    let radius_dist = Uniform::new_inclusive(spec.lesion_radius.0, spec.lesion_radius.1)
        .map_err(|e| Error::invalid("lesion_radius", e.to_string()))?;
    let mut mask_data = vec![0u8; n];
    let mut satisfied = false;
    for _round in 0..MAX_ROUNDS {
        mask_data.fill(0);
        let mut lesion_total = 0usize;
        let wanted = count_dist.sample(&mut rng);
        let mut placed = 0;
        let mut attempts = 0;
        while placed < wanted && attempts < MAX_PLACEMENTS {
            attempts += 1;
            let radii = [
                radius_dist.sample(&mut rng),
                radius_dist.sample(&mut rng),
                radius_dist.sample(&mut rng),
            ];
            let mut center = [0.0f64; 3];
            let mut fits = true;
            for a in 0..3 {
                let extent = dims.as_array()[a] as f64;
                if extent <= 2.0 * radii[a] {
                    fits = false;
                    break;
                }
                center[a] = rng.random_range(radii[a]..extent - radii[a]);
            }
            if !fits {
                continue;
            }
            let e = Ellipsoid { center, radii };
            let bb = e.bounding_box(dims);
            let mut voxels = Vec::new();
            let mut overlaps = false;
            'scan: for x in bb[0].0..bb[0].1 {
                for y in bb[1].0..bb[1].1 {
                    for z in bb[2].0..bb[2].1 {
                        if e.contains(x, y, z) {
                            let idx = dims.index(x, y, z);
                            if mask_data[idx] == 1 {
                                overlaps = true;
                                break 'scan;
                            }
                            voxels.push(idx);
                        }
                    }
                }
            }
            if overlaps || voxels.is_empty() {
                continue;
            }
            for idx in voxels.iter() {
                mask_data[*idx] = 1;
            }
            lesion_total += voxels.len();
            placed += 1;
        }
        if placed == wanted
            && lesion_total as f64 >= 0.5 * target
            && lesion_total as f64 <= 1.5 * target
        {
            satisfied = true;
            break;
        }
    }
    if !satisfied {
        return Err(Error::Unsatisfiable {
            target: spec.lesion_fraction,
            attempts: MAX_ROUNDS,
        });
    }

    for c in 0..spec.channels {
        let shift = spec.intensity_shift[c];
        let base = c * n;
        for (i, m) in mask_data.iter().enumerate() {
            if *m == 1 {
                field[base + i] += shift;
            }
        }
    }

    let data: Vec<f32> = field.into_iter().map(|v| v as f32).collect();
    let volume = Volume::new(dims, spec.channels, spec.spacing, data)?;
    let mask = Mask::new(dims, mask_data)?;
    Ok((volume, mask))
}

/// Realized lesion fraction of a generated mask.
pub fn lesion_fraction(mask: &Mask) -> f64 {
    mask.lesion_voxels() as f64 / mask.dims().voxel_count() as f64
}
