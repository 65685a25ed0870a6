//! Motion select and re-generate.
//!
//! Pseudo labels are scored by warping the current cells with them and
//! matching the warped cells against the observed future frame through
//! entropic transport. Cells whose pseudo label disagrees with the
//! transport-derived label by `mu` or more are re-generated from nearby
//! reliable labels, and the re-generated label is kept only when the
//! neighborhood moves consistently.

use crate::error::{Error, Result};
use crate::ground::{column_heights, ground_remove, GroundConfig};
use crate::grid::{nonempty_cells, warp_cells, BevMap, Cell, CellSet, MotionField};
use crate::knn::GridIndex;
use crate::transport::{match_frames, MatchConfig, TransportPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub delta_m: Vec<f64>,
    pub reliable_idx: Vec<usize>,
    pub unreliable_idx: Vec<usize>,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegenConfig {
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub theta_w: f64,
}

impl Default for RegenConfig {
    fn default() -> Self {
        RegenConfig {
            k: 5,
            beta: 10.0,
            gamma: 0.6,
            theta_w: 5.0,
        }
    }
}

impl RegenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.theta_w > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "theta_w must be positive, got {}",
                self.theta_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Selected,
    Regenerated,
}

/// Surviving labels. `kept_idx` indexes the scored cell list.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedLabels {
    pub kept_idx: Vec<usize>,
    pub motion: Vec<[f64; 2]>,
    pub provenance: Vec<Provenance>,
}

impl RefinedLabels {
    pub fn len(&self) -> usize {
        self.kept_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_idx.is_empty()
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.provenance.iter().filter(|&&x| x == p).count()
    }

    /// Scatter into a grid-shaped target whose mask is the kept set.
    pub fn to_motion_field(&self, cells: &CellSet, rows: usize, cols: usize) -> MotionField {
        let mut field = MotionField::zeros(rows, cols);
        for (&i, &m) in self.kept_idx.iter().zip(&self.motion) {
            let cell = cells.coords[i];
            field.set(cell, m);
            field.set_valid(cell, true);
        }
        field
    }
}

/// Euclidean distance between each pseudo label and its auxiliary label.
pub fn score_reliability(pseudo: &[[f64; 2]], auxiliary: &[[f64; 2]]) -> Result<Vec<f64>> {
    if pseudo.len() != auxiliary.len() {
        return Err(Error::LengthMismatch {
            left: pseudo.len(),
            right: auxiliary.len(),
        });
    }
    Ok(pseudo
        .iter()
        .zip(auxiliary)
        .map(|(p, a)| (p[0] - a[0]).hypot(p[1] - a[1]))
        .collect())
}

/// Splits cells into `delta < mu` (reliable) and the rest. Non-finite scores are unreliable.
pub fn select(delta_m: &[f64], mu: f64) -> ReliabilityReport {
    let (reliable_idx, unreliable_idx) = (0..delta_m.len()).partition(|&i| delta_m[i] < mu);
    ReliabilityReport {
        delta_m: delta_m.to_vec(),
        reliable_idx,
        unreliable_idx,
        mu,
    }
}

/// `anchor + sum(w * (x - anchor)) / sum(w)` with the first value as anchor,
/// so identical inputs return that value exactly.
fn anchored_weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let anchor = values[0];
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.iter().zip(weights) {
        num += w * (v - anchor);
        den += w;
    }
    anchor + num / den
}

fn weighted_mean(values: &[f64], weights: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (v, w) in values.iter().zip(weights) {
        num += w * v;
        den += w;
    }
    num / den
}

/// `|(x - mean) / mean|`, defined as 0 for a zero mean with zero deviation
/// and as infinity for a zero mean with any deviation.
fn relative_deviation(x: f64, mean: f64) -> f64 {
    let dev = x - mean;
    if mean == 0.0 {
        if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (dev / mean).abs()
    }
}

/// Re-generates labels of unreliable cells from the reliable ones.
///
/// The neighbor pool is the initial reliable set; re-generated labels are
/// never used as neighbors. For each unreliable cell the `k` nearest
/// reliable cells closer than `beta` are weighted by `exp(-d / theta_w)`.
/// The weighted mean label is kept when the consistency
/// `exp(-(mean_w(dif_x) + mean_w(dif_y)) / 2)` exceeds `gamma`, where
/// `dif` is the componentwise relative deviation of each neighbor from the
/// mean. The mean label uses the nearest neighbor as anchor so a uniform
/// neighborhood reproduces its label bit-for-bit.
pub fn regenerate(
    report: &ReliabilityReport,
    pseudo: &[[f64; 2]],
    cells: &CellSet,
    cfg: &RegenConfig,
) -> Result<RefinedLabels> {
    cfg.validate()?;
    let n = cells.len();
    if pseudo.len() != n || report.delta_m.len() != n {
        return Err(Error::LengthMismatch {
            left: pseudo.len().max(report.delta_m.len()),
            right: n,
        });
    }
    let mut out = RefinedLabels {
        kept_idx: report.reliable_idx.clone(),
        motion: report.reliable_idx.iter().map(|&i| pseudo[i]).collect(),
        provenance: vec![Provenance::Selected; report.reliable_idx.len()],
    };
    if report.reliable_idx.is_empty() {
        return Ok(out);
    }
    let pool: Vec<[f64; 2]> = report
        .reliable_idx
        .iter()
        .map(|&i| cells.coords[i].as_point())
        .collect();
    let index = GridIndex::new(&pool, cfg.beta);

    let mut mx = Vec::with_capacity(cfg.k);
    let mut my = Vec::with_capacity(cfg.k);
    let mut w = Vec::with_capacity(cfg.k);
    let mut dif_x = Vec::with_capacity(cfg.k);
    let mut dif_y = Vec::with_capacity(cfg.k);
    for &i in &report.unreliable_idx {
        let neighbors = index.k_nearest_within(cells.coords[i].as_point(), cfg.k, cfg.beta);
        if neighbors.is_empty() {
            continue;
        }
        mx.clear();
        my.clear();
        w.clear();
        for &(slot, d) in &neighbors {
            let label = out.motion[slot];
            mx.push(label[0]);
            my.push(label[1]);
            w.push((-d / cfg.theta_w).exp());
        }
        let mean = [anchored_weighted_mean(&mx, &w), anchored_weighted_mean(&my, &w)];
        dif_x.clear();
        dif_y.clear();
        dif_x.extend(mx.iter().map(|&x| relative_deviation(x, mean[0])));
        dif_y.extend(my.iter().map(|&y| relative_deviation(y, mean[1])));
        let spread = 0.5 * (weighted_mean(&dif_x, &w) + weighted_mean(&dif_y, &w));
        let h = (-spread).exp();
        if h > cfg.gamma {
            out.kept_idx.push(i);
            out.motion.push(mean);
            out.provenance.push(Provenance::Regenerated);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsrmConfig {
    pub mu: f64,
    pub matching: MatchConfig,
    pub regen: RegenConfig,
    /// Drop ground cells from both frames before matching.
    pub exclude_ground: Option<GroundConfig>,
}

impl Default for MsrmConfig {
    fn default() -> Self {
        MsrmConfig {
            mu: 1.0,
            matching: MatchConfig::default(),
            regen: RegenConfig::default(),
            exclude_ground: None,
        }
    }
}

/// Everything `refine` produced, for labels and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub cells: CellSet,
    pub report: ReliabilityReport,
    pub labels: RefinedLabels,
    pub transport_converged: bool,
    pub plan: Option<TransportPlan>,
}

impl Refinement {
    pub fn mean_delta(&self) -> Option<f64> {
        let finite: Vec<f64> = self
            .report
            .delta_m
            .iter()
            .copied()
            .filter(|d| d.is_finite())
            .collect();
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64)
    }

    pub fn to_motion_field(&self, rows: usize, cols: usize) -> MotionField {
        self.labels.to_motion_field(&self.cells, rows, cols)
    }

    /// ΔM scattered onto the grid, NaN outside the scored cells.
    pub fn delta_grid(&self, rows: usize, cols: usize) -> Vec<f64> {
        let mut grid = vec![f64::NAN; rows * cols];
        for (c, d) in self.cells.coords.iter().zip(&self.report.delta_m) {
            grid[c.row * cols + c.col] = *d;
        }
        grid
    }
}

/// Full warp, match, score, select and re-generate pass for one frame pair.
pub fn refine(
    pseudo_motion: &MotionField,
    current: &BevMap,
    future: &BevMap,
    cfg: &MsrmConfig,
) -> Result<Refinement> {
    if current.spec() != future.spec() {
        return Err(Error::ShapeMismatch("current and future frames use different grids".into()));
    }
    if pseudo_motion.rows() != current.rows() || pseudo_motion.cols() != current.cols() {
        return Err(Error::ShapeMismatch(format!(
            "pseudo motion {}x{} does not match grid {}x{}",
            pseudo_motion.rows(),
            pseudo_motion.cols(),
            current.rows(),
            current.cols()
        )));
    }
    if !(cfg.mu > 0.0) {
        return Err(Error::InvalidConfig(format!("mu must be positive, got {}", cfg.mu)));
    }
    cfg.regen.validate()?;
    let mut cells = nonempty_cells(current);
    let mut targets = nonempty_cells(future);
    if let Some(ground) = &cfg.exclude_ground {
        cells = ground_remove(&cells, &column_heights(current, &cells), ground).kept;
        targets = ground_remove(&targets, &column_heights(future, &targets), ground).kept;
    }
    if cells.is_empty() {
        return Ok(Refinement {
            report: select(&[], cfg.mu),
            labels: RefinedLabels {
                kept_idx: vec![],
                motion: vec![],
                provenance: vec![],
            },
            cells,
            transport_converged: true,
            plan: None,
        });
    }
    if targets.is_empty() {
        return Err(Error::NoCellsToMatch);
    }

    let warped = warp_cells(&cells, pseudo_motion)?;
    let pseudo: Vec<[f64; 2]> = cells.coords.iter().map(|&c| pseudo_motion.get(c)).collect();
    let matched = match_frames(&warped, &cells.points(), &targets.points(), &cfg.matching)?;
    let delta_m: Vec<f64> = pseudo
        .iter()
        .zip(&matched.labels)
        .map(|(p, aux)| match aux {
            Some(a) => (p[0] - a[0]).hypot(p[1] - a[1]),
            None => f64::INFINITY,
        })
        .collect();
    let report = select(&delta_m, cfg.mu);
    let labels = regenerate(&report, &pseudo, &cells, &cfg.regen)?;
    Ok(Refinement {
        cells,
        report,
        labels,
        transport_converged: matched.converged,
        plan: matched.plan,
    })
}

/// Kept labels that sit on `cell`, if any.
pub fn label_at(refinement: &Refinement, cell: Cell) -> Option<[f64; 2]> {
    refinement
        .labels
        .kept_idx
        .iter()
        .position(|&i| refinement.cells.coords[i] == cell)
        .map(|p| refinement.labels.motion[p])
}
