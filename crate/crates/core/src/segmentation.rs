//! Structure segmentation: seeded GrowCut, margin expansion (HR-CTV to
//! IR-CTV), surface point clouds and structure volumes.

use std::collections::BTreeSet;

use nalgebra::Point3;
use rayon::prelude::*;
use thiserror::Error;

use crate::volume::{LabelMap, ScalarVolume, StructureKind};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentationError {
    #[error("grid of the {0} does not match the volume grid")]
    GridMismatch(&'static str),
    #[error("GrowCut needs seeds of at least two labels, found {0}")]
    TooFewSeedLabels(usize),
    #[error("structure {0} is not present in the label map")]
    AbsentStructure(StructureKind),
    #[error("invalid margin {0} mm")]
    InvalidMargin(f64),
    #[error("source and target structure must differ")]
    SameStructure,
    #[error("extension mask has {found} entries, expected {expected}")]
    MaskSize { expected: usize, found: usize },
}

/// Seed painting: 0 = unlabeled, k > 0 = seed of structure k.
pub type SeedMap = LabelMap;

/// Outcome of a GrowCut run.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowCutState {
    pub labels: LabelMap,
    /// Per-voxel strength in [0, 1].
    pub strength: Vec<f64>,
    /// Passes that changed at least one voxel.
    pub passes: usize,
    /// True when the automaton reached a fixed point within `max_passes`.
    pub converged: bool,
}

/// The 26 neighbour offsets in a fixed order.
fn neighbour_offsets() -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1 {
        for dy in -1..=1 {
            for dx in -1..=1 {
                if (dx, dy, dz) != (0, 0, 0) {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Seeded GrowCut cellular automaton with synchronous updates.
///
/// A neighbour `q` attacks `p` when `g(|I(p) − I(q)|) · s(q) > s(p)` with
/// `g(d) = 1 − d / d_max` and `d_max` the intensity range of the volume
/// (`g ≡ 1` on a constant volume). The strongest attack wins; equal attacks
/// go to the lowest label code. Seeds start at strength 1 and can never be
/// captured because `g ≤ 1`.
pub fn growcut(vol: &ScalarVolume, seeds: &SeedMap, max_passes: usize) -> Result<LabelMap, SegmentationError> {
    growcut_state(vol, seeds, max_passes).map(|s| s.labels)
}

pub fn growcut_state(vol: &ScalarVolume, seeds: &SeedMap, max_passes: usize) -> Result<GrowCutState, SegmentationError> {
    if seeds.grid != vol.grid {
        return Err(SegmentationError::GridMismatch("seed map"));
    }
    let distinct: BTreeSet<u8> = seeds.voxels.iter().copied().filter(|&c| c != 0).collect();
    if distinct.len() < 2 {
        return Err(SegmentationError::TooFewSeedLabels(distinct.len()));
    }

    let intensity: Vec<f64> = vol.voxels.iter().map(|&v| v as f64).collect();
    let (lo, hi) = intensity
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let d_max = hi - lo;
    let g = |a: f64, b: f64| if d_max > 0.0 { 1.0 - (a - b).abs() / d_max } else { 1.0 };

    let [nx, ny, nz] = vol.grid.dims;
    let offsets = neighbour_offsets();
    let mut labels = seeds.voxels.clone();
    let mut strength: Vec<f64> = labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect();
    let mut next_labels = labels.clone();
    let mut next_strength = strength.clone();
    let mut passes = 0;
    let mut converged = false;

    loop {
        let plane = nx * ny;
        let changed = next_labels
            .par_chunks_mut(plane)
            .zip(next_strength.par_chunks_mut(plane))
            .enumerate()
            .map(|(k, (out_l, out_s))| {
                let mut changed = false;
                for j in 0..ny {
                    for i in 0..nx {
                        let p = i + nx * (j + ny * k);
                        let mut best_s = strength[p];
                        let mut best_l = labels[p];
                        let mut captured = false;
                        for off in &offsets {
                            let (qi, qj, qk) = (i as i64 + off[0], j as i64 + off[1], k as i64 + off[2]);
                            if qi < 0 || qj < 0 || qk < 0 || qi >= nx as i64 || qj >= ny as i64 || qk >= nz as i64 {
                                continue;
                            }
                            let q = qi as usize + nx * (qj as usize + ny * qk as usize);
                            let attack = g(intensity[p], intensity[q]) * strength[q];
                            if attack > strength[p] {
                                let better = !captured
                                    || attack > best_s
                                    || (attack == best_s && labels[q] < best_l);
                                if better {
                                    best_s = attack;
                                    best_l = labels[q];
                                    captured = true;
                                }
                            }
                        }
                        let local = i + nx * j;
                        out_l[local] = best_l;
                        out_s[local] = best_s;
                        changed |= best_l != labels[p] || best_s != strength[p];
                    }
                }
                changed
            })
            .reduce(|| false, |a, b| a || b);

        if !changed {
            converged = true;
            break;
        }
        std::mem::swap(&mut labels, &mut next_labels);
        std::mem::swap(&mut strength, &mut next_strength);
        passes += 1;
        if passes >= max_passes {
            break;
        }
    }

    Ok(GrowCutState {
        labels: LabelMap { grid: seeds.grid.clone(), voxels: labels, legend: seeds.legend.clone() },
        strength,
        passes,
        converged,
    })
}

/// Slack on the voxel-center distance test so that centers lying exactly on
/// the margin sphere are included regardless of rounding.
pub const MARGIN_EPS: f64 = 1e-9;

/// Grows `target` to every voxel whose center lies within `margin` mm of a
/// `source` voxel center, unioned with an optional `extension` mask.
///
/// Only background voxels and voxels already carrying `target` are written;
/// every other label, OARs and the source included, is kept. Target voxels
/// outside the new region are cleared to background. The target code is
/// added to the legend if missing.
pub fn expand_margin(
    labels: &LabelMap,
    source: &StructureKind,
    target: &StructureKind,
    margin: f64,
    extension: Option<&[bool]>,
) -> Result<LabelMap, SegmentationError> {
    if !(margin.is_finite() && margin >= 0.0) {
        return Err(SegmentationError::InvalidMargin(margin));
    }
    if source == target {
        return Err(SegmentationError::SameStructure);
    }
    let source_code = labels
        .code_of(source)
        .ok_or_else(|| SegmentationError::AbsentStructure(source.clone()))?;
    let n = labels.grid.voxel_count();
    if let Some(mask) = extension {
        if mask.len() != n {
            return Err(SegmentationError::MaskSize { expected: n, found: mask.len() });
        }
    }

    let grid = &labels.grid;
    let [nx, ny, nz] = grid.dims;
    let s = grid.spacing;
    let reach = |axis: usize| ((margin + MARGIN_EPS) / s[axis]).floor() as i64;
    let (rx, ry, rz) = (reach(0), reach(1), reach(2));
    let mut offsets = Vec::new();
    for dk in -rz..=rz {
        for dj in -ry..=ry {
            for di in -rx..=rx {
                let d = ((di as f64 * s[0]).powi(2) + (dj as f64 * s[1]).powi(2) + (dk as f64 * s[2]).powi(2)).sqrt();
                if d <= margin + MARGIN_EPS {
                    offsets.push([di, dj, dk]);
                }
            }
        }
    }

    let mut inside = vec![false; n];
    for (idx, _) in labels.voxels.iter().enumerate().filter(|(_, &c)| c == source_code) {
        let [i, j, k] = grid.ijk(idx);
        for off in &offsets {
            let (a, b, c) = (i as i64 + off[0], j as i64 + off[1], k as i64 + off[2]);
            if a >= 0 && b >= 0 && c >= 0 && a < nx as i64 && b < ny as i64 && c < nz as i64 {
                inside[grid.linear_index(a as usize, b as usize, c as usize)] = true;
            }
        }
    }
    if let Some(mask) = extension {
        for (slot, &m) in inside.iter_mut().zip(mask) {
            *slot |= m;
        }
    }

    let mut out = labels.clone();
    let target_code = out.ensure_code(target);
    for (v, &within) in out.voxels.iter_mut().zip(&inside) {
        if *v == target_code {
            if !within {
                *v = 0;
            }
        } else if *v == 0 && within {
            *v = target_code;
        }
    }
    Ok(out)
}

/// World-space centers of `kind` voxels with at least one of their six face
/// neighbours outside the structure or outside the grid.
pub fn surface_cloud(labels: &LabelMap, kind: &StructureKind) -> Result<Vec<Point3<f64>>, SegmentationError> {
    let code = labels
        .code_of(kind)
        .ok_or_else(|| SegmentationError::AbsentStructure(kind.clone()))?;
    let grid = &labels.grid;
    let [nx, ny, nz] = grid.dims;
    let at = |i: i64, j: i64, k: i64| -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && i < nx as i64
            && j < ny as i64
            && k < nz as i64
            && labels.voxels[grid.linear_index(i as usize, j as usize, k as usize)] == code
    };
    let mut out = Vec::new();
    for (idx, _) in labels.voxels.iter().enumerate().filter(|(_, &c)| c == code) {
        let [i, j, k] = grid.ijk(idx);
        let (i, j, k) = (i as i64, j as i64, k as i64);
        let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
        if faces.iter().any(|(a, b, c)| !at(i + a, j + b, k + c)) {
            out.push(grid.world_of_index(grid.ijk(idx)));
        }
    }
    Ok(out)
}

/// Volume of a structure in cm³; zero when absent.
pub fn structure_volume_cc(labels: &LabelMap, kind: &StructureKind) -> f64 {
    labels.count(kind) as f64 * labels.grid.voxel_volume_cc()
}
