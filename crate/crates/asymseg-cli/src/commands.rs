//! Subcommand implementations. Every command resolves its inputs, runs
//! the corresponding library pipeline, and writes its outputs plus a
//! `resolved_config.toml` provenance file into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use asymseg::fusion::{FusionMode, FusionSpec};
use asymseg::losses::LossSpec;
use asymseg::metrics::{evaluate_masks, evaluate_probability, MetricsReport};
use asymseg::model::{predict, train, train_log_csv, StencilModel};
use asymseg::patching::build_grid;
use asymseg::synth::{generate, lesion_fraction};
use asymseg::volume::{
    load_mask, load_probability_map, load_volume, read_header, save_mask,
    save_probability_map, save_volume, threshold, Dtype, Mask, Volume,
};

use crate::config::{resolved_toml, ExperimentConfig};

fn ensure_out_dir(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))
}

fn write_provenance(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let path = out_dir.join("resolved_config.toml");
    fs::write(&path, resolved_toml(cfg)).with_context(|| format!("writing {}", path.display()))
}

fn image_stem(index: usize) -> String {
    format!("img{index:03}")
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    if cfg.synth.images == 0 {
        bail!("config key synth.images must be positive");
    }
    ensure_out_dir(out_dir)?;
    for i in 0..cfg.synth.images {
        let spec = cfg.synth.to_spec(cfg.seed, i as u64)?;
        let (volume, mask) = generate(&spec)
            .with_context(|| format!("generating image {i} (seed {})", spec.rng_seed))?;
        let stem = image_stem(i);
        save_volume(&volume, &out_dir.join(format!("{stem}.volume.rvol")))?;
        save_mask(&mask, volume.spacing(), &out_dir.join(format!("{stem}.mask.rvol")))?;
        println!(
            "{stem}: lesion fraction {:.6} ({} voxels)",
            lesion_fraction(&mask),
            mask.lesion_voxels()
        );
    }
    write_provenance(cfg, out_dir)
}

/// Volume/mask pairs found in a directory, sorted by file name.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<(Volume, Mask)>> {
    let mut volume_paths: Vec<PathBuf> = fs::read_dir(data_dir)
        .with_context(|| format!("reading data directory {}", data_dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".volume.rvol"))
        })
        .collect();
    volume_paths.sort();
    if volume_paths.is_empty() {
        bail!(
            "no *.volume.rvol files found in {}",
            data_dir.display()
        );
    }
    let mut pairs = Vec::with_capacity(volume_paths.len());
    for volume_path in volume_paths {
        let name = volume_path
            .file_name()
            .and_then(|n| n.to_str())
            .expect("filtered on name");
        let mask_path = volume_path.with_file_name(name.replace(".volume.rvol", ".mask.rvol"));
        if !mask_path.exists() {
            bail!("missing mask file {}", mask_path.display());
        }
        let volume = load_volume(&volume_path)
            .with_context(|| format!("loading {}", volume_path.display()))?;
        let mask =
            load_mask(&mask_path).with_context(|| format!("loading {}", mask_path.display()))?;
        pairs.push((volume, mask));
    }
    Ok(pairs)
}

pub fn cmd_train(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let images = load_dataset(data_dir)?;
    let train_cfg = cfg.train.to_train_config(cfg.seed)?;
    let (model, log) = train(&images, &train_cfg).context("training failed")?;
    ensure_out_dir(out_dir)?;
    model.save(&out_dir.join("model.ckpt"))?;
    fs::write(out_dir.join("train_log.csv"), train_log_csv(&log))
        .context("writing train_log.csv")?;
    write_provenance(cfg, out_dir)?;
    println!(
        "trained {} steps; final loss {:.6}",
        log.len(),
        log.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok(())
}

pub fn cmd_predict(
    cfg: &ExperimentConfig,
    model_path: &Path,
    volume_path: &Path,
    fusion_override: Option<FusionMode>,
    out_dir: &Path,
) -> Result<()> {
    let model = StencilModel::load(model_path)
        .with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let volume = load_volume(volume_path)
        .with_context(|| format!("loading {}", volume_path.display()))?;
    let mode = match fusion_override {
        Some(m) => m,
        None => cfg.fusion.mode()?,
    };
    // Tiling means non-overlapping patches regardless of the training
    // overlap setting.
    let overlap = if mode == FusionMode::Tiling {
        0.0
    } else {
        cfg.train.overlap
    };
    let grid = build_grid(volume.dims(), cfg.train.patch_size, overlap)?;
    let spec = FusionSpec {
        mode,
        patch_size: grid.patch_size,
        stride: grid.stride,
    };
    let probability = predict(&model, &volume, &grid, &spec).context("prediction failed")?;
    let mask = threshold(&probability, 0.5)?;
    ensure_out_dir(out_dir)?;
    save_probability_map(&probability, volume.spacing(), &out_dir.join("probability.rvol"))?;
    save_mask(&mask, volume.spacing(), &out_dir.join("mask.rvol"))?;
    write_provenance(cfg, out_dir)?;
    println!(
        "predicted {} voxels with {mode} fusion; {} above threshold",
        probability.data().len(),
        mask.lesion_voxels()
    );
    Ok(())
}

fn parse_spacing(values: &[f64]) -> Result<[f64; 3]> {
    match values {
        [sx, sy, sz] => Ok([*sx, *sy, *sz]),
        other => bail!("--spacing expects sx,sy,sz, got {} values", other.len()),
    }
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    pred_path: &Path,
    gt_path: &Path,
    spacing_override: Option<Vec<f64>>,
    out_dir: &Path,
) -> Result<()> {
    let gt_header = read_header(gt_path)?;
    let gt = load_mask(gt_path).with_context(|| format!("loading {}", gt_path.display()))?;
    let spacing = match (&spacing_override, cfg.evaluate.spacing) {
        (Some(values), _) => parse_spacing(values)?,
        (None, Some(spacing)) => spacing,
        (None, None) => gt_header.spacing,
    };

    let pred_header = read_header(pred_path)?;
    let (report, from_probability): (MetricsReport, bool) = match pred_header.dtype {
        Dtype::U8 => {
            let pred = load_mask(pred_path)
                .with_context(|| format!("loading {}", pred_path.display()))?;
            (evaluate_masks(&pred, &gt, spacing)?, false)
        }
        Dtype::F32le => {
            let prob = load_probability_map(pred_path)
                .with_context(|| format!("loading {}", pred_path.display()))?;
            (
                evaluate_probability(&prob, &gt, spacing, cfg.evaluate.n_thresholds)?,
                true,
            )
        }
    };

    ensure_out_dir(out_dir)?;
    fs::write(out_dir.join("metrics.json"), report.to_json()).context("writing metrics.json")?;
    fs::write(out_dir.join("metrics.csv"), report.to_csv()).context("writing metrics.csv")?;
    if from_probability && !report.pr_curve.is_empty() {
        fs::write(out_dir.join("pr_curve.csv"), report.pr_curve_csv())
            .context("writing pr_curve.csv")?;
    }
    write_provenance(cfg, out_dir)?;
    println!("{}", report.to_csv().trim_end());
    Ok(())
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn cmd_sweep_beta(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    betas: &[f64],
    out_dir: &Path,
) -> Result<()> {
    if betas.len() < 2 {
        bail!("sweep-beta needs at least two beta values to compare");
    }
    let images = load_dataset(data_dir)?;
    if images.len() < 2 {
        bail!("sweep-beta needs at least two images (the last is held out for testing)");
    }
    let (held_out, training) = images.split_last().expect("checked length");
    let (test_volume, test_mask) = held_out;

    ensure_out_dir(out_dir)?;
    let mut summary = String::from("beta,dsc,sensitivity,specificity,f2,apr\n");
    for &beta in betas {
        let mut train_cfg = cfg.train.to_train_config(cfg.seed)?;
        train_cfg.loss = LossSpec::FBeta { beta };
        train_cfg.loss.validate()?;
        let (model, log) =
            train(training, &train_cfg).with_context(|| format!("training beta = {beta}"))?;

        let grid = build_grid(test_volume.dims(), train_cfg.patch_size, train_cfg.overlap)?;
        let spec = FusionSpec {
            mode: FusionMode::Spline,
            patch_size: grid.patch_size,
            stride: grid.stride,
        };
        let probability = predict(&model, test_volume, &grid, &spec)?;
        let report = evaluate_probability(
            &probability,
            test_mask,
            test_volume.spacing(),
            cfg.evaluate.n_thresholds,
        )?;

        let beta_dir = out_dir.join(format!("beta_{beta}"));
        ensure_out_dir(&beta_dir)?;
        model.save(&beta_dir.join("model.ckpt"))?;
        fs::write(beta_dir.join("train_log.csv"), train_log_csv(&log))?;
        fs::write(beta_dir.join("metrics.json"), report.to_json())?;

        summary.push_str(&format!(
            "{beta},{},{},{},{},{}\n",
            csv_cell(report.dsc),
            csv_cell(report.tpr),
            csv_cell(report.specificity),
            csv_cell(report.f2),
            csv_cell(report.apr),
        ));
    }
    fs::write(out_dir.join("sweep.csv"), &summary).context("writing sweep.csv")?;
    write_provenance(cfg, out_dir)?;
    print!("{summary}");
    Ok(())
}
