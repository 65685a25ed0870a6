//! Plane-fit ground removal over BEV pillars.
//!
//! Each pillar contributes its lowest occupied voxel center as a ground
//! candidate. A RANSAC consensus plane is fitted to the candidates and then
//! refined by least squares on its inliers. A pillar is ground when both its
//! lowest and highest occupied voxel centers lie within `tau_g` of the plane.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{BevMap, Cell, CellSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundConfig {
    /// Inlier band around the plane, meters.
    pub tau_g: f64,
    pub iterations: usize,
    /// Smallest admissible |n_z| of the plane normal.
    pub min_normal_z: f64,
    pub seed: u64,
}

impl Default for GroundConfig {
    fn default() -> Self {
        GroundConfig {
            tau_g: 0.15,
            iterations: 64,
            min_normal_z: 0.9,
            seed: 0x6772_6f75_6e64,
        }
    }
}

/// Metric extent of one pillar's occupied voxels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellHeights {
    pub x: f64,
    pub y: f64,
    pub z_min: f64,
    pub z_max: f64,
}

/// `z = a x + b y + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Plane {
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }

    fn through(p: [[f64; 3]; 3]) -> Option<Plane> {
        let u = Vector3::new(p[1][0] - p[0][0], p[1][1] - p[0][1], p[1][2] - p[0][2]);
        let v = Vector3::new(p[2][0] - p[0][0], p[2][1] - p[0][1], p[2][2] - p[0][2]);
        let n = u.cross(&v);
        let norm = n.norm();
        if norm < 1e-12 || n.z.abs() < 1e-12 {
            return None;
        }
        let a = -n.x / n.z;
        let b = -n.y / n.z;
        Some(Plane {
            a,
            b,
            c: p[0][2] - a * p[0][0] - b * p[0][1],
        })
    }

    fn normal_z(&self) -> f64 {
        1.0 / (self.a * self.a + self.b * self.b + 1.0).sqrt()
    }

    /// Vertical offset is used as distance; planes are near-horizontal.
    fn offset(&self, x: f64, y: f64, z: f64) -> f64 {
        (z - self.height_at(x, y)).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundRemoval {
    pub kept: CellSet,
    pub removed: Vec<Cell>,
    pub plane: Option<Plane>,
    /// Fewer than three candidates or no admissible plane: nothing removed.
    pub degenerate: bool,
}

/// Heights of the occupied voxel centers of each listed pillar.
pub fn column_heights(map: &BevMap, cells: &CellSet) -> Vec<CellHeights> {
    let spec = map.spec();
    cells
        .coords
        .iter()
        .map(|&cell| {
            let pillar = map.pillar(cell);
            let lo = pillar.iter().position(|&v| v != 0);
            let hi = pillar.iter().rposition(|&v| v != 0);
            let [x, y] = spec.cell_center(cell);
            match (lo, hi) {
                (Some(lo), Some(hi)) => CellHeights {
                    x,
                    y,
                    z_min: spec.layer_center(lo),
                    z_max: spec.layer_center(hi),
                },
                _ => CellHeights {
                    x,
                    y,
                    z_min: f64::NAN,
                    z_max: f64::NAN,
                },
            }
        })
        .collect()
}

fn least_squares(points: &[[f64; 3]]) -> Option<Plane> {
    let mut ata = Matrix3::<f64>::zeros();
    let mut atz = Vector3::<f64>::zeros();
    for p in points {
        let row = Vector3::new(p[0], p[1], 1.0);
        ata += row * row.transpose();
        atz += row * p[2];
    }
    let sol = ata.lu().solve(&atz)?;
    sol.iter().all(|v| v.is_finite()).then(|| Plane {
        a: sol[0],
        b: sol[1],
        c: sol[2],
    })
}

pub fn fit_ground_plane(candidates: &[[f64; 3]], cfg: &GroundConfig) -> Option<Plane> {
    if candidates.len() < 3 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let count = |plane: &Plane| {
        candidates
            .iter()
            .filter(|p| plane.offset(p[0], p[1], p[2]) <= cfg.tau_g)
            .count()
    };
    // Start from the flat plane through the lowest candidate; random triples
    // may then beat it.
    let lowest = candidates
        .iter()
        .map(|p| p[2])
        .fold(f64::INFINITY, f64::min);
    let mut best = Plane {
        a: 0.0,
        b: 0.0,
        c: lowest,
    };
    let mut best_count = count(&best);
    for _ in 0..cfg.iterations {
        let idx = sample(&mut rng, candidates.len(), 3);
        let triple = [
            candidates[idx.index(0)],
            candidates[idx.index(1)],
            candidates[idx.index(2)],
        ];
        let Some(plane) = Plane::through(triple) else {
            continue;
        };
        if plane.normal_z() < cfg.min_normal_z {
            continue;
        }
        let n = count(&plane);
        if n > best_count {
            best = plane;
            best_count = n;
        }
    }
    let inliers: Vec<[f64; 3]> = candidates
        .iter()
        .filter(|p| best.offset(p[0], p[1], p[2]) <= cfg.tau_g)
        .copied()
        .collect();
    match least_squares(&inliers) {
        Some(refined) if refined.normal_z() >= cfg.min_normal_z && count(&refined) >= best_count => {
            Some(refined)
        }
        _ => Some(best),
    }
}

pub fn ground_remove(cells: &CellSet, heights: &[CellHeights], cfg: &GroundConfig) -> GroundRemoval {
    assert_eq!(cells.len(), heights.len(), "one height record per cell");
    let candidates: Vec<[f64; 3]> = heights
        .iter()
        .filter(|h| h.z_min.is_finite())
        .map(|h| [h.x, h.y, h.z_min])
        .collect();
    let Some(plane) = fit_ground_plane(&candidates, cfg) else {
        log::warn!(
            "ground removal skipped: {} candidate pillars, need at least 3",
            candidates.len()
        );
        return GroundRemoval {
            kept: cells.clone(),
            removed: vec![],
            plane: None,
            degenerate: true,
        };
    };
    let mut kept = Vec::with_capacity(cells.len());
    let mut removed = Vec::new();
    for (&cell, h) in cells.coords.iter().zip(heights) {
        let ground = h.z_min.is_finite()
            && plane.offset(h.x, h.y, h.z_min) <= cfg.tau_g
            && plane.offset(h.x, h.y, h.z_max) <= cfg.tau_g;
        if ground {
            removed.push(cell);
        } else {
            kept.push(cell);
        }
    }
    GroundRemoval {
        kept: CellSet {
            coords: kept,
            source_frame: cells.source_frame,
        },
        removed,
        plane: Some(plane),
        degenerate: false,
    }
}
