//! A desk-scale differentiable voxel classifier: one 3x3x3 convolution
//! over all channels followed by a per-voxel sigmoid. Small enough that
//! every gradient can be checked against finite differences, yet enough
//! of a model to drive the losses end to end and expose their
//! precision-recall behavior.
//!
//! Training runs Adam on one patch per step, cycling round-robin over
//! images and their selected patches so every image contributes equally.
//! The learning rate decays by `lr_decay` every `lr_interval` steps, and
//! the interval itself doubles every 16,000 steps. All randomness comes
//! from ChaCha8 streams derived from the run seed, so training is
//! deterministic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionMode, FusionSpec, PatchPrediction};
use crate::losses::{LossResult, LossSpec};
use crate::par;
use crate::patching::{build_grid, extract_mask_patch, extract_patch, select_training_patches, PatchGrid, AUGMENTATIONS};
use crate::volume::{Dims, Mask, ProbabilityMap, Volume};

/// Stencil edge length; the kernel covers offsets in {-1, 0, 1}^3.
pub const STENCIL: usize = 3;
const OFFSETS: usize = STENCIL * STENCIL * STENCIL;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Steps between doublings of the learning-rate decay interval.
const LR_INTERVAL_GROWTH_STEPS: u64 = 16_000;

/// Half-width of the uniform kernel initialization.
const INIT_HALF_WIDTH: f64 = 0.05;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Linear 3x3x3 voxel classifier: `p = sigmoid(kernel . neighborhood + bias)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StencilModel {
    channels: usize,
    /// `channels * 27` weights; channel slowest, then dx, dy, dz with dz
    /// fastest, offsets ordered -1, 0, 1.
    kernel: Vec<f64>,
    bias: f64,
}

impl StencilModel {
    pub fn new(channels: usize, kernel: Vec<f64>, bias: f64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::invalid("channels", "must be positive"));
        }
        if kernel.len() != channels * OFFSETS {
            return Err(Error::invalid(
                "kernel",
                format!("expected {} weights, got {}", channels * OFFSETS, kernel.len()),
            ));
        }
        if !bias.is_finite() || kernel.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("kernel", "weights must be finite"));
        }
        Ok(StencilModel {
            channels,
            kernel,
            bias,
        })
    }

    pub fn zeros(channels: usize) -> Self {
        StencilModel {
            channels,
            kernel: vec![0.0; channels * OFFSETS],
            bias: 0.0,
        }
    }

    /// Kernel entries drawn uniformly from [-0.05, 0.05], bias zero.
    pub fn random_init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let kernel = (0..channels * OFFSETS)
            .map(|_| rng.random_range(-INIT_HALF_WIDTH..INIT_HALF_WIDTH))
            .collect();
        StencilModel {
            channels,
            kernel,
            bias: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    /// Total trainable parameters (kernel + bias).
    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + 1
    }

    #[inline]
    pub fn kernel_index(c: usize, dx: i64, dy: i64, dz: i64) -> usize {
        let o = (((dx + 1) * 3 + (dy + 1)) * 3 + (dz + 1)) as usize;
        c * OFFSETS + o
    }

    /// Per-voxel lesion probabilities over a whole volume, zero-padded at
    /// the borders.
    pub fn forward(&self, v: &Volume) -> Result<ProbabilityMap> {
        if v.channels() != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                actual: v.channels(),
            });
        }
        let dims = v.dims();
        let n = dims.voxel_count();
        let mut out = vec![0.0f64; n];
        par::fill_chunks(&mut out, |start, chunk| {
            for (k, slot) in chunk.iter_mut().enumerate() {
                let (x, y, z) = dims.coords(start + k);
                let mut z_acc = self.bias;
                for c in 0..self.channels {
                    let plane = v.channel(c);
                    for dx in -1i64..=1 {
                        let gx = x as i64 + dx;
                        for dy in -1i64..=1 {
                            let gy = y as i64 + dy;
                            for dz in -1i64..=1 {
                                let gz = z as i64 + dz;
                                if dims.contains(gx, gy, gz) {
                                    let w = self.kernel[Self::kernel_index(c, dx, dy, dz)];
                                    z_acc += w * f64::from(
                                        plane[dims.index(gx as usize, gy as usize, gz as usize)],
                                    );
                                }
                            }
                        }
                    }
                }
                *slot = sigmoid(z_acc);
            }
        });
        ProbabilityMap::new(dims, out)
    }

    /// Write the checkpoint: one JSON header line, then the kernel as
    /// little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            channels: self.channels,
            stencil: STENCIL,
            bias: self.bias,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let line = serde_json::to_string(&header).expect("header serialization cannot fail");
        let mut payload = Vec::with_capacity(self.kernel.len() * 8);
        for v in &self.kernel {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.write_all(&payload))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: "checkpoint ended before header newline".into(),
                });
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0]);
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        if header.stencil != STENCIL {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("unsupported stencil {}", header.stencil),
            });
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let expected = header.channels * OFFSETS * 8;
        if payload.len() != expected {
            return Err(Error::PayloadLength {
                path: path.to_path_buf(),
                expected,
                actual: payload.len(),
            });
        }
        let kernel: Vec<f64> = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        StencilModel::new(header.channels, kernel, header.bias)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    channels: usize,
    stencil: usize,
    bias: f64,
}

/// Loss value and parameter gradients for one volume/mask pair: the loss
/// gradient is chained through the sigmoid and accumulated against the
/// input neighborhoods.
pub fn backward(
    model: &StencilModel,
    v: &Volume,
    g: &Mask,
    loss: &LossSpec,
) -> Result<(f64, Vec<f64>, f64)> {
    let p = model.forward(v)?;
    let LossResult {
        value, gradient, ..
    } = loss.evaluate(&p, g)?;

    let dims = v.dims();
    let n = dims.voxel_count();
    let channels = model.channels;
    let params = channels * OFFSETS + 1;
    let partials = par::partials(n, |range| {
        let mut acc = vec![0.0f64; params];
        for i in range {
            let pi = p.data()[i];
            let dz = gradient[i] * pi * (1.0 - pi);
            if dz == 0.0 {
                continue;
            }
            let (x, y, z) = dims.coords(i);
            for c in 0..channels {
                let plane = v.channel(c);
                for dx in -1i64..=1 {
                    let gx = x as i64 + dx;
                    for dy in -1i64..=1 {
                        let gy = y as i64 + dy;
                        for dz_off in -1i64..=1 {
                            let gz = z as i64 + dz_off;
                            if dims.contains(gx, gy, gz) {
                                let input = f64::from(
                                    plane[dims.index(gx as usize, gy as usize, gz as usize)],
                                );
                                acc[StencilModel::kernel_index(c, dx, dy, dz_off)] += dz * input;
                            }
                        }
                    }
                }
            }
            acc[params - 1] += dz;
        }
        acc
    });
    let mut total = vec![0.0f64; params];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    let bias_grad = total.pop().expect("params >= 1");
    Ok((value, total, bias_grad))
}

/// Everything that parameterizes a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `lr_interval` steps.
    pub lr_decay: f64,
    pub lr_interval: u64,
    pub steps: u64,
    pub patch_size: usize,
    pub overlap: f64,
    /// Training patches selected per image.
    pub quota: usize,
    pub min_lesion_voxels: usize,
    pub rng_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay", "must lie in (0, 1]"));
        }
        if self.lr_interval == 0 {
            return Err(Error::invalid("lr_interval", "must be positive"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be positive"));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn train_log_csv(rows: &[TrainLogRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Train a stencil model with Adam, one selected patch per step.
///
/// Patch selection draws `quota` centers per image (seeded per image from
/// the run seed), and steps cycle images round-robin, then each image's
/// patches in selection order. Returns the final model and the per-step
/// log.
pub fn train(
    images: &[(Volume, Mask)],
    cfg: &TrainConfig,
) -> Result<(StencilModel, Vec<TrainLogRow>)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("images", "training set is empty"));
    }
    let channels = images[0].0.channels();
    for (v, g) in images {
        if v.channels() != channels {
            return Err(Error::ChannelMismatch {
                expected: channels,
                actual: v.channels(),
            });
        }
        crate::volume::check_dims_match(v.dims(), g.dims())?;
    }

    // Per-image patch selection under derived seeds.
    let mut selections = Vec::with_capacity(images.len());
    let mut grids: Vec<PatchGrid> = Vec::with_capacity(images.len());
    for (i, (v, g)) in images.iter().enumerate() {
        let grid = build_grid(v.dims(), cfg.patch_size, cfg.overlap)?;
        let centers = select_training_patches(
            g,
            &grid,
            cfg.min_lesion_voxels,
            cfg.quota,
            cfg.rng_seed.wrapping_add(1 + i as u64),
        )?;
        selections.push(centers);
        grids.push(grid);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = StencilModel::random_init(channels, &mut rng);
    let params = model.parameter_count();
    let mut m = vec![0.0f64; params];
    let mut v_state = vec![0.0f64; params];
    let mut lr = cfg.learning_rate;
    let mut interval = cfg.lr_interval;
    let mut since_decay = 0u64;
    let mut log = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let img = (step % images.len() as u64) as usize;
        let slot = ((step / images.len() as u64) % cfg.quota as u64) as usize;
        let center = selections[img][slot];
        let (volume, mask) = &images[img];
        let patch = extract_patch(volume, &grids[img], center, 0)?;
        let patch_dims = Dims::new(patch.size, patch.size, patch.size);
        let patch_volume = Volume::new(patch_dims, channels, volume.spacing(), patch.data)?;
        let patch_mask = extract_mask_patch(mask, center, cfg.patch_size);

        let (loss_value, kernel_grad, bias_grad) =
            backward(&model, &patch_volume, &patch_mask, &cfg.loss)?;

        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let mut apply = |idx: usize, grad: f64, value: &mut f64| {
            m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * grad;
            v_state[idx] = ADAM_BETA2 * v_state[idx] + (1.0 - ADAM_BETA2) * grad * grad;
            let m_hat = m[idx] / bc1;
            let v_hat = v_state[idx] / bc2;
            *value -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        };
        for (idx, grad) in kernel_grad.iter().enumerate() {
            let mut w = model.kernel[idx];
            apply(idx, *grad, &mut w);
            model.kernel[idx] = w;
        }
        let mut b = model.bias;
        apply(params - 1, bias_grad, &mut b);
        model.bias = b;

        log.push(TrainLogRow {
            step: step + 1,
            lr,
            loss: loss_value,
        });

        // Decay check, then interval growth at the 16,000-step marks.
        since_decay += 1;
        if since_decay == interval {
            lr *= cfg.lr_decay;
            since_decay = 0;
        }
        if (step + 1) % LR_INTERVAL_GROWTH_STEPS == 0 {
            interval *= 2;
        }
    }
    Ok((model, log))
}

/// Patch-wise prediction: every grid center is evaluated under each
/// augmentation (identity only for tiling) and the cubes are fused into a
/// full-volume probability map.
pub fn predict(
    model: &StencilModel,
    v: &Volume,
    grid: &PatchGrid,
    fusion: &FusionSpec,
) -> Result<ProbabilityMap> {
    fusion.validate()?;
    if grid.volume_dims != v.dims() {
        return Err(Error::DimensionMismatch {
            left: grid.volume_dims.as_tuple(),
            right: v.dims().as_tuple(),
        });
    }
    if fusion.patch_size != grid.patch_size || fusion.stride != grid.stride {
        return Err(Error::invalid(
            "fusion spec",
            "patch size and stride must match the grid",
        ));
    }
    let augmentations: &[u8] = if fusion.mode == FusionMode::Tiling {
        &[0]
    } else {
        &[0, 1, 2, 3]
    };
    debug_assert!(augmentations.len() <= AUGMENTATIONS);
    let s = grid.patch_size;
    let patch_dims = Dims::new(s, s, s);
    let mut predictions = Vec::with_capacity(grid.center_count() * augmentations.len());
    for center in grid.centers() {
        for &aug in augmentations {
            let patch = extract_patch(v, grid, center, aug)?;
            let patch_volume = Volume::new(patch_dims, v.channels(), v.spacing(), patch.data)?;
            let prob = model.forward(&patch_volume)?;
            predictions.push(PatchPrediction {
                center,
                augmentation_id: aug,
                values: prob.data().to_vec(),
            });
        }
    }
    fuse(&predictions, v.dims(), fusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_volume(dims: Dims, channels: usize, value: f32) -> Volume {
        Volume::new(
            dims,
            channels,
            [1.0; 3],
            vec![value; channels * dims.voxel_count()],
        )
        .unwrap()
    }

    #[test]
    fn zero_model_predicts_half_everywhere() {
        let v = flat_volume(Dims::new(4, 4, 4), 2, 1.0);
        let p = StencilModel::zeros(2).forward(&v).unwrap();
        assert!(p.data().iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn large_bias_saturates() {
        let v = flat_volume(Dims::new(3, 3, 3), 1, 0.0);
        let m = StencilModel::new(1, vec![0.0; 27], 50.0).unwrap();
        let p = m.forward(&v).unwrap();
        assert!(p.data().iter().all(|&x| x >= 1.0 - 1e-9));
    }

    #[test]
    fn zero_input_gives_sigmoid_of_bias() {
        let v = flat_volume(Dims::new(5, 4, 3), 1, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = StencilModel::random_init(1, &mut rng);
        m.bias = -0.7;
        let p = m.forward(&v).unwrap();
        let expected = sigmoid(-0.7);
        assert!(p.data().iter().all(|&x| (x - expected).abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let v = flat_volume(Dims::new(3, 3, 3), 2, 0.0);
        assert!(matches!(
            StencilModel::zeros(1).forward(&v),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut m = StencilModel::random_init(3, &mut rng);
        m.bias = -0.123456789012345;
        m.save(&path).unwrap();
        let loaded = StencilModel::load(&path).unwrap();
        assert_eq!(m.channels(), loaded.channels());
        assert_eq!(m.bias().to_bits(), loaded.bias().to_bits());
        for (a, b) in m.kernel().iter().zip(loaded.kernel()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn saturated_correct_predictions_have_flat_gradient() {
        // A strongly separable input with a confident-correct model: the
        // sigmoid saturates, so gradients vanish.
        let dims = Dims::new(4, 4, 4);
        let mut data = vec![-10.0f32; dims.voxel_count()];
        let mut mask = vec![0u8; dims.voxel_count()];
        for i in [21, 22, 25] {
            data[i] = 10.0;
            mask[i] = 1;
        }
        let v = Volume::new(dims, 1, [1.0; 3], data).unwrap();
        let g = Mask::new(dims, mask).unwrap();
        let mut kernel = vec![0.0; 27];
        kernel[StencilModel::kernel_index(0, 0, 0, 0)] = 5.0;
        let m = StencilModel::new(1, kernel, 0.0).unwrap();
        let (_, kg, bg) = backward(&m, &v, &g, &LossSpec::FBeta { beta: 1.0 }).unwrap();
        let norm = kg.iter().map(|x| x * x).sum::<f64>().sqrt() + bg.abs();
        assert!(norm < 1e-6, "{norm}");
    }

    #[test]
    fn symmetric_data_gives_symmetric_kernel_gradient() {
        // Mirror-symmetric volume and mask along every axis with a zero
        // kernel: the gradient must equal its mirrored self.
        let dims = Dims::new(6, 6, 6);
        let mut data = vec![0.0f32; dims.voxel_count()];
        let mut mask = vec![0u8; dims.voxel_count()];
        for x in 0..6 {
            for y in 0..6 {
                for z in 0..6 {
                    let sym = ((x.min(5 - x) + y.min(5 - y) + z.min(5 - z)) % 3) as f32;
                    data[dims.index(x, y, z)] = sym;
                    mask[dims.index(x, y, z)] = u8::from(sym > 1.0);
                }
            }
        }
        let v = Volume::new(dims, 1, [1.0; 3], data).unwrap();
        let g = Mask::new(dims, mask).unwrap();
        let m = StencilModel::zeros(1);
        let (_, kg, _) = backward(&m, &v, &g, &LossSpec::FBeta { beta: 1.5 }).unwrap();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let a = kg[StencilModel::kernel_index(0, dx, dy, dz)];
                    let b = kg[StencilModel::kernel_index(0, -dx, -dy, -dz)];
                    assert!((a - b).abs() < 1e-9, "offset ({dx},{dy},{dz}): {a} vs {b}");
                }
            }
        }
    }

    fn separable_images(seed: u64) -> Vec<(Volume, Mask)> {
        let spec = crate::synth::SynthSpec {
            dims: Dims::new(24, 24, 24),
            channels: 1,
            spacing: [1.0; 3],
            lesion_count: (2, 3),
            lesion_radius: (2.0, 3.0),
            lesion_fraction: 0.008,
            intensity_shift: vec![10.0],
            noise_sigma: 0.0,
            rng_seed: seed,
        };
        vec![crate::synth::generate(&spec).unwrap()]
    }

    fn quick_config(seed: u64) -> TrainConfig {
        TrainConfig {
            loss: LossSpec::FBeta { beta: 1.5 },
            learning_rate: 0.05,
            lr_decay: 0.95,
            lr_interval: 100,
            steps: 60,
            patch_size: 12,
            overlap: 0.5,
            quota: 4,
            min_lesion_voxels: 10,
            rng_seed: seed,
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let images = separable_images(5);
        let cfg = quick_config(9);
        let (m1, log1) = train(&images, &cfg).unwrap();
        let (m2, log2) = train(&images, &cfg).unwrap();
        assert_eq!(m1.bias().to_bits(), m2.bias().to_bits());
        for (a, b) in m1.kernel().iter().zip(m2.kernel()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(log1.len(), log2.len());
        for (a, b) in log1.iter().zip(&log2) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_data() {
        let images = separable_images(5);
        let mut cfg = quick_config(9);
        cfg.steps = 120;
        let (_, log) = train(&images, &cfg).unwrap();
        let first = log.first().unwrap().loss;
        let last = log.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn constant_lr_when_decay_is_one() {
        let images = separable_images(5);
        let mut cfg = quick_config(9);
        cfg.lr_decay = 1.0;
        cfg.lr_interval = 10;
        cfg.steps = 30;
        let (_, log) = train(&images, &cfg).unwrap();
        assert!(log.iter().all(|r| r.lr == cfg.learning_rate));
    }

    #[test]
    fn lr_decays_on_schedule() {
        let images = separable_images(5);
        let mut cfg = quick_config(9);
        cfg.lr_interval = 10;
        cfg.steps = 25;
        let (_, log) = train(&images, &cfg).unwrap();
        assert_eq!(log[9].lr, cfg.learning_rate);
        assert!((log[10].lr - cfg.learning_rate * 0.95).abs() < 1e-15);
        assert!((log[20].lr - cfg.learning_rate * 0.95 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn constant_model_predicts_constant_through_fusion() {
        let v = flat_volume(Dims::new(16, 16, 16), 1, 0.3);
        let m = StencilModel::new(1, vec![0.0; 27], 1.3).unwrap();
        let grid = build_grid(v.dims(), 8, 0.5).unwrap();
        for mode in [FusionMode::Uniform, FusionMode::Spline] {
            let spec = FusionSpec {
                mode,
                patch_size: 8,
                stride: grid.stride,
            };
            let p = predict(&m, &v, &grid, &spec).unwrap();
            let expected = sigmoid(1.3);
            assert!(
                p.data().iter().all(|&x| (x - expected).abs() < 1e-12),
                "mode {mode}"
            );
        }
    }

    #[test]
    fn tiling_matches_whole_volume_forward_away_from_seams() {
        let images = separable_images(21);
        let (v, _) = &images[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = StencilModel::random_init(1, &mut rng);
        let grid = build_grid(v.dims(), 8, 0.0).unwrap();
        let spec = FusionSpec {
            mode: FusionMode::Tiling,
            patch_size: 8,
            stride: 8,
        };
        let tiled = predict(&m, v, &grid, &spec).unwrap();
        let whole = m.forward(v).unwrap();
        let dims = v.dims();
        let mut checked = 0usize;
        for x in 0..dims.nx {
            for y in 0..dims.ny {
                for z in 0..dims.nz {
                    // Tile boundaries sit at 4, 12, 20 on the inclusive
                    // lattice; skip voxels within stencil reach of one.
                    let seam_adjacent = [x, y, z].iter().any(|&c| {
                        let d = (c as i64 + 4).rem_euclid(8);
                        d <= 1 || d >= 7
                    });
                    if seam_adjacent || x == 0 || y == 0 || z == 0
                        || x + 1 == dims.nx || y + 1 == dims.ny || z + 1 == dims.nz
                    {
                        continue;
                    }
                    let idx = dims.index(x, y, z);
                    assert!(
                        (tiled.data()[idx] - whole.data()[idx]).abs() < 1e-12,
                        "voxel ({x},{y},{z})"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "interior comparison set too small: {checked}");
    }
}
