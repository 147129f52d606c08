//! Evaluation suite for unbalanced binary segmentation: voxel-wise
//! scores, lesion-wise scores over 26-connected components, symmetric
//! surface distance in millimetres, and precision-recall curves.
//!
//! Metrics whose denominator is zero are reported as `None` (serialized
//! as `null`), never as 0 — a zero is a meaningful score.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{check_dims_match, threshold, Dims, Mask, ProbabilityMap};

/// Voxel-level confusion counts between a predicted and a ground-truth
/// mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_dims_match(pred.dims(), gt.dims())?;
    let p = pred.data();
    let g = gt.data();
    let parts = par::partials(p.len(), |r| {
        let mut c = [0u64; 4];
        for i in r {
            c[(p[i] * 2 + g[i]) as usize] += 1;
        }
        c
    });
    let mut c = [0u64; 4];
    for part in parts {
        for (acc, v) in c.iter_mut().zip(part) {
            *acc += v;
        }
    }
    Ok(ConfusionCounts {
        tn: c[0],
        fn_: c[1],
        fp: c[2],
        tp: c[3],
    })
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Scalar scores derived from confusion counts. Each is `None` when its
/// denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelMetrics {
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub specificity: Option<f64>,
    pub f2: Option<f64>,
    pub vd: Option<f64>,
}

pub fn voxel_metrics(c: &ConfusionCounts) -> VoxelMetrics {
    let vd = (c.tp + c.fn_ > 0).then(|| {
        let seg = (c.tp + c.fp) as f64;
        let gt = (c.tp + c.fn_) as f64;
        (seg - gt).abs() / gt
    });
    VoxelMetrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_),
        ppv: ratio(c.tp, c.tp + c.fp),
        tpr: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f2: ratio(5 * c.tp, 5 * c.tp + 4 * c.fn_ + c.fp),
        vd,
    }
}

/// Labeling of a mask into 26-connected components. Labels are assigned
/// 1, 2, ... in first-encounter scan order (x slowest, z fastest);
/// 0 marks background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub component_count: u32,
    /// Voxel count per component, indexed by label - 1.
    pub component_sizes: Vec<u64>,
}

pub fn connected_components(mask: &Mask) -> ComponentLabeling {
    let dims = mask.dims();
    let data = mask.data();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    let mut next = 0u32;
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        let mut size = 0u64;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            size += 1;
            let (x, y, z) = dims.coords(idx);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dz in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if !dims.contains(nx, ny, nz) {
                            continue;
                        }
                        let n = dims.index(nx as usize, ny as usize, nz as usize);
                        if data[n] == 1 && labels[n] == 0 {
                            labels[n] = next;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabeling {
        dims,
        labels,
        component_count: next,
        component_sizes: sizes,
    }
}

/// Lesion-wise rates over connected components.
///
/// A ground-truth component counts as detected when it shares at least
/// one voxel with the prediction; a predicted component is spurious when
/// it shares none with the ground truth. Returns
/// `(ltpr, lfpr) = (detected / gt components, spurious / predicted
/// components)`, each `None` when the respective component count is zero.
pub fn lesion_metrics(pred: &Mask, gt: &Mask) -> Result<(Option<f64>, Option<f64>)> {
    check_dims_match(pred.dims(), gt.dims())?;
    let gt_cc = connected_components(gt);
    let pred_cc = connected_components(pred);
    let mut gt_hit = vec![false; gt_cc.component_count as usize];
    let mut pred_hit = vec![false; pred_cc.component_count as usize];
    for i in 0..pred.data().len() {
        if gt_cc.labels[i] != 0 && pred.data()[i] == 1 {
            gt_hit[(gt_cc.labels[i] - 1) as usize] = true;
        }
        if pred_cc.labels[i] != 0 && gt.data()[i] == 1 {
            pred_hit[(pred_cc.labels[i] - 1) as usize] = true;
        }
    }
    let ltpr = (gt_cc.component_count > 0)
        .then(|| gt_hit.iter().filter(|h| **h).count() as f64 / gt_cc.component_count as f64);
    let lfpr = (pred_cc.component_count > 0).then(|| {
        pred_hit.iter().filter(|h| !**h).count() as f64 / pred_cc.component_count as f64
    });
    Ok((ltpr, lfpr))
}

/// Voxels of a mask with at least one 6-neighbor outside the mask (or
/// outside the volume).
pub fn boundary_voxels(mask: &Mask) -> Vec<[i32; 3]> {
    let dims = mask.dims();
    let mut out = Vec::new();
    for x in 0..dims.nx {
        for y in 0..dims.ny {
            for z in 0..dims.nz {
                if mask.get(x, y, z) == 0 {
                    continue;
                }
                let mut exposed = false;
                for (dx, dy, dz) in [
                    (-1i64, 0i64, 0i64),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ] {
                    let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if !dims.contains(nx, ny, nz)
                        || mask.get(nx as usize, ny as usize, nz as usize) == 0
                    {
                        exposed = true;
                        break;
                    }
                }
                if exposed {
                    out.push([x as i32, y as i32, z as i32]);
                }
            }
        }
    }
    out
}

/// Above this many total boundary voxels the nearest-neighbor search
/// switches from brute force to a binned search (still exact).
const SURFACE_BRUTE_FORCE_LIMIT: usize = 100_000;

fn squared_distance(a: [i32; 3], b: [i32; 3], spacing: [f64; 3]) -> f64 {
    let dx = (a[0] - b[0]) as f64 * spacing[0];
    let dy = (a[1] - b[1]) as f64 * spacing[1];
    let dz = (a[2] - b[2]) as f64 * spacing[2];
    dx * dx + dy * dy + dz * dz
}

fn mean_nearest_brute(from: &[[i32; 3]], to: &[[i32; 3]], spacing: [f64; 3]) -> f64 {
    let sum = par::sum_f64(from.len(), |r| {
        r.map(|i| {
            to.iter()
                .map(|b| squared_distance(from[i], *b, spacing))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
    });
    sum / from.len() as f64
}

/// Exact nearest-neighbor mean via a uniform grid of bins, expanding in
/// Chebyshev shells until no closer point can exist.
fn mean_nearest_binned(from: &[[i32; 3]], to: &[[i32; 3]], spacing: [f64; 3]) -> f64 {
    const BIN: i32 = 8;
    let mut lo = [i32::MAX; 3];
    let mut hi = [i32::MIN; 3];
    for p in to {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let cells: Vec<i32> = (0..3).map(|a| (hi[a] - lo[a]) / BIN + 1).collect();
    let cell_of = |p: [i32; 3]| -> [i32; 3] {
        [
            (p[0] - lo[0]) / BIN,
            (p[1] - lo[1]) / BIN,
            (p[2] - lo[2]) / BIN,
        ]
    };
    let slot = |c: [i32; 3]| -> usize {
        ((c[0] * cells[1] + c[1]) * cells[2] + c[2]) as usize
    };
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (cells[0] * cells[1] * cells[2]) as usize];
    for (i, p) in to.iter().enumerate() {
        bins[slot(cell_of(*p))].push(i as u32);
    }
    let min_spacing = spacing.iter().fold(f64::INFINITY, |a, &b| a.min(b));

    let nearest = |q: [i32; 3]| -> f64 {
        let qc = cell_of([
            q[0].clamp(lo[0], hi[0]),
            q[1].clamp(lo[1], hi[1]),
            q[2].clamp(lo[2], hi[2]),
        ]);
        let mut best = f64::INFINITY;
        let max_shell = *cells.iter().max().unwrap();
        for shell in 0.. {
            // Any point in a bin at Chebyshev shell distance `shell` is at
            // least (shell - 1) * BIN * min_spacing away from the query.
            if best.is_finite() {
                let floor = ((shell - 1).max(0) as f64) * BIN as f64 * min_spacing;
                if floor * floor > best {
                    break;
                }
            } else if shell > max_shell * 2 {
                break;
            }
            for cx in (qc[0] - shell).max(0)..=(qc[0] + shell).min(cells[0] - 1) {
                for cy in (qc[1] - shell).max(0)..=(qc[1] + shell).min(cells[1] - 1) {
                    for cz in (qc[2] - shell).max(0)..=(qc[2] + shell).min(cells[2] - 1) {
                        let on_shell = (cx - qc[0]).abs() == shell
                            || (cy - qc[1]).abs() == shell
                            || (cz - qc[2]).abs() == shell;
                        if !on_shell {
                            continue;
                        }
                        for &i in &bins[slot([cx, cy, cz])] {
                            best = best.min(squared_distance(q, to[i as usize], spacing));
                        }
                    }
                }
            }
        }
        best.sqrt()
    };

    let sum = par::sum_f64(from.len(), |r| r.map(|i| nearest(from[i])).sum());
    sum / from.len() as f64
}

fn mean_nearest(from: &[[i32; 3]], to: &[[i32; 3]], spacing: [f64; 3]) -> f64 {
    if from.len() + to.len() <= SURFACE_BRUTE_FORCE_LIMIT {
        mean_nearest_brute(from, to, spacing)
    } else {
        mean_nearest_binned(from, to, spacing)
    }
}

/// Average symmetric surface distance in millimetres: the mean distance
/// from predicted boundary voxels to the nearest ground-truth boundary
/// voxel, averaged with the reverse direction. `None` when either mask is
/// empty. Identical masks give exactly 0.
pub fn surface_distance(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<Option<f64>> {
    check_dims_match(pred.dims(), gt.dims())?;
    let bp = boundary_voxels(pred);
    let bg = boundary_voxels(gt);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let forward = mean_nearest(&bp, &bg, spacing);
    let reverse = mean_nearest(&bg, &bp, spacing);
    Ok(Some(0.5 * (forward + reverse)))
}

/// One point of a precision-recall curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Area under the precision-recall curve: points are ordered by recall,
/// equal-recall points keep their maximum precision, and the area is the
/// trapezoid sum with the leading segment extended flat to recall 0.
fn average_precision(points: &[PrPoint]) -> f64 {
    let mut rp: Vec<(f64, f64)> = points.iter().map(|p| (p.recall, p.precision)).collect();
    rp.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut dedup: Vec<(f64, f64)> = Vec::with_capacity(rp.len());
    for (r, p) in rp {
        match dedup.last_mut() {
            Some(last) if last.0 == r => last.1 = last.1.max(p),
            _ => dedup.push((r, p)),
        }
    }
    let mut area = 0.0;
    let mut prev = (0.0, dedup.first().map_or(0.0, |f| f.1));
    for &(r, p) in &dedup {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    area
}

fn pr_points_at(prob: &ProbabilityMap, gt: &Mask, thresholds: &[f64]) -> Vec<PrPoint> {
    let pd = prob.data();
    let gd = gt.data();
    let gt_total: u64 = gd.iter().map(|&g| g as u64).sum();
    let count_at = |t: f64| -> (u64, u64) {
        let parts = par::partials(pd.len(), |r| {
            let mut tp = 0u64;
            let mut pp = 0u64;
            for i in r {
                if pd[i] >= t {
                    pp += 1;
                    tp += gd[i] as u64;
                }
            }
            (tp, pp)
        });
        parts
            .into_iter()
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    };
    thresholds
        .iter()
        .filter_map(|&t| {
            let (tp, pp) = count_at(t);
            if pp == 0 {
                return None; // precision undefined; point dropped
            }
            Some(PrPoint {
                threshold: t,
                precision: tp as f64 / pp as f64,
                recall: tp as f64 / gt_total as f64,
            })
        })
        .collect()
}

/// Precision-recall curve at `n_thresholds + 1` evenly spaced inclusive
/// thresholds in [0, 1], plus the area under it. Thresholding is
/// inclusive (`p >= t`); points with no positive predictions are dropped.
pub fn pr_curve(
    prob: &ProbabilityMap,
    gt: &Mask,
    n_thresholds: usize,
) -> Result<(Vec<PrPoint>, f64)> {
    check_dims_match(prob.dims(), gt.dims())?;
    if gt.lesion_voxels() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    if n_thresholds == 0 {
        return Err(Error::invalid("n_thresholds", "must be positive"));
    }
    let thresholds: Vec<f64> = (0..=n_thresholds)
        .map(|k| k as f64 / n_thresholds as f64)
        .collect();
    let points = pr_points_at(prob, gt, &thresholds);
    let apr = average_precision(&points);
    Ok((points, apr))
}

/// Precision-recall curve with one threshold per distinct probability
/// value. Invariant under strictly monotone transforms of the map.
pub fn pr_curve_exhaustive(prob: &ProbabilityMap, gt: &Mask) -> Result<(Vec<PrPoint>, f64)> {
    check_dims_match(prob.dims(), gt.dims())?;
    if gt.lesion_voxels() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let mut order: Vec<u32> = (0..prob.data().len() as u32).collect();
    order.sort_by(|&a, &b| {
        prob.data()[b as usize]
            .partial_cmp(&prob.data()[a as usize])
            .unwrap()
    });
    let gt_total: u64 = gt.data().iter().map(|&g| g as u64).sum();
    let mut points = Vec::new();
    let mut tp = 0u64;
    let mut pp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let value = prob.data()[order[i] as usize];
        while i < order.len() && prob.data()[order[i] as usize] == value {
            pp += 1;
            tp += gt.data()[order[i] as usize] as u64;
            i += 1;
        }
        points.push(PrPoint {
            threshold: value,
            precision: tp as f64 / pp as f64,
            recall: tp as f64 / gt_total as f64,
        });
    }
    points.reverse(); // ascending threshold order
    let apr = average_precision(&points);
    Ok((points, apr))
}

/// Full evaluation report. Scalars are `None` wherever undefined; `apr`
/// and the curve are present only when a probability map was evaluated.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub ppv: Option<f64>,
    pub tpr: Option<f64>,
    pub specificity: Option<f64>,
    pub f2: Option<f64>,
    pub ltpr: Option<f64>,
    pub lfpr: Option<f64>,
    pub vd: Option<f64>,
    pub sd_mm: Option<f64>,
    pub apr: Option<f64>,
    pub seg_volume: u64,
    #[serde(skip)]
    pub pr_curve: Vec<PrPoint>,
}

const CSV_COLUMNS: [&str; 12] = [
    "dsc",
    "jaccard",
    "ppv",
    "tpr",
    "specificity",
    "f2",
    "ltpr",
    "lfpr",
    "vd",
    "sd_mm",
    "apr",
    "seg_volume",
];

fn csv_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Header line plus one value row; undefined metrics are empty fields.
    pub fn to_csv(&self) -> String {
        let values = [
            csv_field(self.dsc),
            csv_field(self.jaccard),
            csv_field(self.ppv),
            csv_field(self.tpr),
            csv_field(self.specificity),
            csv_field(self.f2),
            csv_field(self.ltpr),
            csv_field(self.lfpr),
            csv_field(self.vd),
            csv_field(self.sd_mm),
            csv_field(self.apr),
            self.seg_volume.to_string(),
        ];
        format!("{}\n{}\n", CSV_COLUMNS.join(","), values.join(","))
    }

    /// threshold,precision,recall rows for the stored curve.
    pub fn pr_curve_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall\n");
        for p in &self.pr_curve {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        out
    }
}

/// Evaluate a binary prediction against ground truth.
pub fn evaluate_masks(pred: &Mask, gt: &Mask, spacing: [f64; 3]) -> Result<MetricsReport> {
    let counts = confusion(pred, gt)?;
    let vm = voxel_metrics(&counts);
    let (ltpr, lfpr) = lesion_metrics(pred, gt)?;
    let sd_mm = surface_distance(pred, gt, spacing)?;
    Ok(MetricsReport {
        dsc: vm.dsc,
        jaccard: vm.jaccard,
        ppv: vm.ppv,
        tpr: vm.tpr,
        specificity: vm.specificity,
        f2: vm.f2,
        ltpr,
        lfpr,
        vd: vm.vd,
        sd_mm,
        apr: None,
        seg_volume: counts.tp + counts.fp,
        pr_curve: Vec::new(),
    })
}

/// Evaluate a probability map: mask metrics at the 0.5 threshold plus the
/// PR curve and its area.
pub fn evaluate_probability(
    prob: &ProbabilityMap,
    gt: &Mask,
    spacing: [f64; 3],
    n_thresholds: usize,
) -> Result<MetricsReport> {
    let pred = threshold(prob, 0.5)?;
    let mut report = evaluate_masks(&pred, gt, spacing)?;
    match pr_curve(prob, gt, n_thresholds) {
        Ok((curve, apr)) => {
            report.pr_curve = curve;
            report.apr = Some(apr);
        }
        Err(Error::EmptyGroundTruth) => {} // apr stays undefined
        Err(e) => return Err(e),
    }
    Ok(report)
}
