//! Entropic optimal transport between warped source cells and next-frame cells.
//!
//! The cost between a warped cell and a target cell is
//! `1 - exp(-d² / theta_c)`, bounded in `[0, 1)`. Plans carry uniform
//! marginals `1/N_src` on rows and `1/N_dst` on columns.

use crate::error::{Error, Result};
use crate::grid::CellSet;
use crate::knn::GridIndex;

/// Search radius, in cells, for assigning targets to tiles.
const NEAREST_REACH: f64 = 4.0;

/// Dense `rows x cols` cost matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    pub theta_c: f64,
}

impl CostMatrix {
    /// Wraps raw values; each must lie in `[0, 1)`.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>, theta_c: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::NoCellsToMatch);
        }
        if values.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: rows * cols,
            });
        }
        if values.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::InvalidConfig("cost entries must lie in [0, 1)".into()));
        }
        Ok(CostMatrix {
            rows,
            cols,
            values,
            theta_c,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn build_cost(warped: &[[f64; 2]], targets: &CellSet, theta_c: f64) -> Result<CostMatrix> {
    build_cost_points(warped, &targets.points(), theta_c)
}

pub fn build_cost_points(
    warped: &[[f64; 2]],
    targets: &[[f64; 2]],
    theta_c: f64,
) -> Result<CostMatrix> {
    if warped.is_empty() || targets.is_empty() {
        return Err(Error::NoCellsToMatch);
    }
    if !(theta_c > 0.0 && theta_c.is_finite()) {
        return Err(Error::InvalidConfig(format!("theta_c must be positive, got {theta_c}")));
    }
    let mut values = Vec::with_capacity(warped.len() * targets.len());
    for a in warped {
        for b in targets {
            let dx = a[0] - b[0];
            let dy = a[1] - b[1];
            values.push(1.0 - (-(dx * dx + dy * dy) / theta_c).exp());
        }
    }
    Ok(CostMatrix {
        rows: warped.len(),
        cols: targets.len(),
        values,
        theta_c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
    /// Fall back to log-domain updates when the scaling vectors leave the
    /// representable range. Without it such inputs fail with `EpsilonTooSmall`.
    pub stabilize: bool,
    /// Record `<C, pi>` after every iteration.
    pub record_objective: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions {
            epsilon: 0.03,
            max_iters: 100,
            marginal_tol: 1e-6,
            stabilize: true,
            record_objective: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    pi: Vec<f64>,
    pub epsilon: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest absolute deviation of a row or column sum from its target mass.
    pub marginal_error: f64,
    pub log_domain: bool,
    pub objective_trace: Vec<f64>,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pi[i * self.cols + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.pi
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.pi[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.pi.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.pi.chunks_exact(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// `<C, pi>`.
    pub fn transport_cost(&self, cost: &CostMatrix) -> f64 {
        self.pi.iter().zip(cost.values()).map(|(p, c)| p * c).sum()
    }
}

const SCALING_GUARD: f64 = 1e100;

fn marginal_error(pi: &[f64], rows: usize, cols: usize) -> f64 {
    let a = 1.0 / rows as f64;
    let b = 1.0 / cols as f64;
    let mut col = vec![0.0; cols];
    let mut worst = 0.0f64;
    for r in pi.chunks_exact(cols) {
        worst = worst.max((r.iter().sum::<f64>() - a).abs());
        for (s, v) in col.iter_mut().zip(r) {
            *s += v;
        }
    }
    col.iter().fold(worst, |w, s| w.max((s - b).abs()))
}

fn objective(pi: &[f64], cost: &CostMatrix) -> f64 {
    pi.iter().zip(cost.values()).map(|(p, c)| p * c).sum()
}

/// Entropy-regularized transport with uniform marginals.
///
/// Runs multiplicative Sinkhorn scaling and switches to log-domain updates
/// when a scaling factor exceeds the dynamic-range guard. Stops when the
/// worst marginal violation drops below `marginal_tol` or after `max_iters`
/// full (row then column) iterations; `converged` records which.
pub fn sinkhorn(cost: &CostMatrix, opts: &SinkhornOptions) -> Result<TransportPlan> {
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {}",
            opts.epsilon
        )));
    }
    match scaling_sinkhorn(cost, opts) {
        Some(plan) => Ok(plan),
        None if opts.stabilize => log_sinkhorn(cost, opts),
        None => Err(Error::EpsilonTooSmall(opts.epsilon)),
    }
}

fn scaling_sinkhorn(cost: &CostMatrix, opts: &SinkhornOptions) -> Option<TransportPlan> {
    let (n, m) = (cost.rows, cost.cols);
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let kernel: Vec<f64> = cost
        .values
        .iter()
        .map(|c| (-c / opts.epsilon).exp())
        .collect();
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let plan_of = |u: &[f64], v: &[f64]| -> Vec<f64> {
        let mut pi = Vec::with_capacity(n * m);
        for (i, row) in kernel.chunks_exact(m).enumerate() {
            pi.extend(row.iter().zip(v).map(|(k, vj)| u[i] * k * vj));
        }
        pi
    };

    while iterations < opts.max_iters {
        for (i, row) in kernel.chunks_exact(m).enumerate() {
            kv[i] = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
        }
        for (ui, kvi) in u.iter_mut().zip(&kv) {
            *ui = a / kvi;
        }
        ktu.iter_mut().for_each(|x| *x = 0.0);
        for (row, ui) in kernel.chunks_exact(m).zip(&u) {
            for (acc, k) in ktu.iter_mut().zip(row) {
                *acc += k * ui;
            }
        }
        for (vj, ktuj) in v.iter_mut().zip(&ktu) {
            *vj = b / ktuj;
        }
        iterations += 1;
        let out_of_range = |x: &f64| !x.is_finite() || *x > SCALING_GUARD || *x <= 0.0;
        if u.iter().any(out_of_range) || v.iter().any(out_of_range) {
            return None;
        }
        // Column sums are exact after the v update; only rows can be off.
        for (i, row) in kernel.chunks_exact(m).enumerate() {
            kv[i] = row.iter().zip(&v).map(|(k, vj)| k * vj).sum();
        }
        let error = u
            .iter()
            .zip(&kv)
            .map(|(ui, kvi)| (ui * kvi - a).abs())
            .fold(0.0, f64::max);
        if opts.record_objective {
            trace.push(objective(&plan_of(&u, &v), cost));
        }
        if error < opts.marginal_tol {
            break;
        }
    }

    let pi = plan_of(&u, &v);
    let marginal_error = marginal_error(&pi, n, m);
    Some(TransportPlan {
        rows: n,
        cols: m,
        converged: marginal_error < opts.marginal_tol,
        marginal_error,
        pi,
        epsilon: opts.epsilon,
        iterations_used: iterations,
        log_domain: false,
        objective_trace: trace,
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn log_sinkhorn(cost: &CostMatrix, opts: &SinkhornOptions) -> Result<TransportPlan> {
    let (n, m) = (cost.rows, cost.cols);
    let eps = opts.epsilon;
    let scaled: Vec<f64> = cost.values.iter().map(|c| c / eps).collect();
    if scaled.iter().any(|x| !x.is_finite()) {
        return Err(Error::EpsilonTooSmall(eps));
    }
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    // Potentials divided by epsilon.
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let plan_of = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut pi = Vec::with_capacity(n * m);
        for (i, row) in scaled.chunks_exact(m).enumerate() {
            pi.extend(row.iter().zip(g).map(|(c, gj)| (f[i] + gj - c).exp()));
        }
        pi
    };

    while iterations < opts.max_iters {
        for (i, row) in scaled.chunks_exact(m).enumerate() {
            f[i] = log_a - log_sum_exp(row.iter().zip(&g).map(|(c, gj)| gj - c));
        }
        for j in 0..m {
            g[j] = log_b - log_sum_exp((0..n).map(|i| f[i] - scaled[i * m + j]));
        }
        iterations += 1;
        if f.iter().chain(&g).any(|x| !x.is_finite()) {
            return Err(Error::EpsilonTooSmall(eps));
        }
        let error = scaled
            .chunks_exact(m)
            .enumerate()
            .map(|(i, row)| {
                let s: f64 = row.iter().zip(&g).map(|(c, gj)| (f[i] + gj - c).exp()).sum();
                (s - 1.0 / n as f64).abs()
            })
            .fold(0.0, f64::max);
        if opts.record_objective {
            trace.push(objective(&plan_of(&f, &g), cost));
        }
        if error < opts.marginal_tol {
            break;
        }
    }

    let pi = plan_of(&f, &g);
    let marginal_error = marginal_error(&pi, n, m);
    Ok(TransportPlan {
        rows: n,
        cols: m,
        converged: marginal_error < opts.marginal_tol,
        marginal_error,
        pi,
        epsilon: eps,
        iterations_used: iterations,
        log_domain: true,
        objective_trace: trace,
    })
}

pub fn auxiliary_labels(
    plan: &TransportPlan,
    source: &CellSet,
    targets: &CellSet,
) -> Result<Vec<[f64; 2]>> {
    auxiliary_labels_points(plan, &source.points(), &targets.points())
}

/// Barycentric target of each source row minus the source coordinate.
///
/// Each row of the plan is normalized by its own sum before taking the
/// barycenter, so a soft plan reduces to a convex combination of targets.
pub fn auxiliary_labels_points(
    plan: &TransportPlan,
    source: &[[f64; 2]],
    targets: &[[f64; 2]],
) -> Result<Vec<[f64; 2]>> {
    if plan.rows != source.len() {
        return Err(Error::LengthMismatch {
            left: plan.rows,
            right: source.len(),
        });
    }
    if plan.cols != targets.len() {
        return Err(Error::LengthMismatch {
            left: plan.cols,
            right: targets.len(),
        });
    }
    source
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let row = plan.row(i);
            let mass: f64 = row.iter().sum();
            if !(mass > 0.0) {
                return Err(Error::IsolatedSourceCell(i));
            }
            let mut acc = [0.0; 2];
            for (p, t) in row.iter().zip(targets) {
                acc[0] += p * t[0];
                acc[1] += p * t[1];
            }
            Ok([acc[0] / mass - s[0], acc[1] / mass - s[1]])
        })
        .collect()
}

/// Matching configuration shared by whole-frame and tiled solves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub theta_c: f64,
    pub sinkhorn: SinkhornOptions,
    /// Source count above which the frame is split into spatial tiles.
    pub tile_cap: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            theta_c: 3.0,
            sinkhorn: SinkhornOptions::default(),
            tile_cap: 4096,
        }
    }
}

/// Result of matching a frame pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatch {
    /// Auxiliary label per source, `None` when the source's tile saw no target.
    pub labels: Vec<Option<[f64; 2]>>,
    pub converged: bool,
    pub tiles: usize,
    /// The plan, kept only for untiled solves.
    pub plan: Option<TransportPlan>,
}

/// Auxiliary labels for `source` cells warped to `warped`, matched against `targets`.
///
/// Frames with more than `tile_cap` sources are cut into axis-aligned tiles
/// by recursive median splits on the warped coordinates; each target is
/// assigned to the tile whose bounding box is nearest and tiles are solved
/// independently.
pub fn match_frames(
    warped: &[[f64; 2]],
    source: &[[f64; 2]],
    targets: &[[f64; 2]],
    cfg: &MatchConfig,
) -> Result<FrameMatch> {
    if warped.len() != source.len() {
        return Err(Error::LengthMismatch {
            left: warped.len(),
            right: source.len(),
        });
    }
    if warped.is_empty() || targets.is_empty() {
        return Err(Error::NoCellsToMatch);
    }
    if warped.len() <= cfg.tile_cap.max(1) {
        let cost = build_cost_points(warped, targets, cfg.theta_c)?;
        let plan = sinkhorn(&cost, &cfg.sinkhorn)?;
        let labels = auxiliary_labels_points(&plan, source, targets)?;
        return Ok(FrameMatch {
            labels: labels.into_iter().map(Some).collect(),
            converged: plan.converged,
            tiles: 1,
            plan: Some(plan),
        });
    }

    let mut tiles = Vec::new();
    split_tiles((0..warped.len()).collect(), warped, cfg.tile_cap.max(1), &mut tiles);
    let boxes: Vec<([f64; 2], [f64; 2])> = tiles
        .iter()
        .map(|tile| {
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for &i in tile {
                for k in 0..2 {
                    lo[k] = lo[k].min(warped[i][k]);
                    hi[k] = hi[k].max(warped[i][k]);
                }
            }
            (lo, hi)
        })
        .collect();
    // Each target joins the tile of its nearest warped source (nearest box
    // when no source is close), so every tile solves a roughly balanced
    // problem and no target is counted twice.
    let mut tile_of = vec![0; warped.len()];
    for (k, tile) in tiles.iter().enumerate() {
        for &i in tile {
            tile_of[i] = k;
        }
    }
    let index = GridIndex::new(warped, NEAREST_REACH);
    let mut owned: Vec<Vec<[f64; 2]>> = vec![Vec::new(); tiles.len()];
    for t in targets {
        let best = match index.k_nearest_within(*t, 1, NEAREST_REACH).first() {
            Some(&(i, _)) => tile_of[i],
            None => {
                let gap = |(lo, hi): &([f64; 2], [f64; 2])| {
                    let dx = (lo[0] - t[0]).max(t[0] - hi[0]).max(0.0);
                    let dy = (lo[1] - t[1]).max(t[1] - hi[1]).max(0.0);
                    dx * dx + dy * dy
                };
                (0..boxes.len())
                    .min_by(|&a, &b| gap(&boxes[a]).total_cmp(&gap(&boxes[b])).then(a.cmp(&b)))
                    .expect("at least one tile")
            }
        };
        owned[best].push(*t);
    }
    let mut labels = vec![None; warped.len()];
    let mut converged = true;
    for (tile, local_targets) in tiles.iter().zip(&owned) {
        if local_targets.is_empty() {
            continue;
        }
        let local_warped: Vec<[f64; 2]> = tile.iter().map(|&i| warped[i]).collect();
        let local_source: Vec<[f64; 2]> = tile.iter().map(|&i| source[i]).collect();
        let cost = build_cost_points(&local_warped, local_targets, cfg.theta_c)?;
        let plan = sinkhorn(&cost, &cfg.sinkhorn)?;
        converged &= plan.converged;
        let local = auxiliary_labels_points(&plan, &local_source, local_targets)?;
        for (&i, l) in tile.iter().zip(local) {
            labels[i] = Some(l);
        }
    }
    Ok(FrameMatch {
        labels,
        converged,
        tiles: tiles.len(),
        plan: None,
    })
}

fn split_tiles(mut idx: Vec<usize>, pts: &[[f64; 2]], cap: usize, out: &mut Vec<Vec<usize>>) {
    if idx.len() <= cap {
        out.push(idx);
        return;
    }
    let extent = |k: usize| {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(pts[i][k]), hi.max(pts[i][k]))
        });
        hi - lo
    };
    let axis = if extent(0) >= extent(1) { 0 } else { 1 };
    idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
    let right = idx.split_off(idx.len() / 2);
    split_tiles(idx, pts, cap, out);
    split_tiles(right, pts, cap, out);
}
