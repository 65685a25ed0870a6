//! Grid geometry, voxelization and motion-field storage.
//!
//! Rows run along X, columns along Y, layers along Z. Each voxel covers the
//! half-open box `[min + i * cell, min + (i + 1) * cell)` on every axis, so a
//! point on the maximum edge of the crop range is dropped.
//!
//! Motion is stored in cell units. Conversion to meters goes through
//! [`cells_to_meters`] using the grid's horizontal cell sizes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GridBounds {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    z_min: f64,
    z_max: f64,
    cell_x: f64,
    cell_y: f64,
    cell_z: f64,
}

/// Crop range and voxel size of a BEV grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridBounds", into = "GridBounds")]
pub struct GridSpec {
    bounds: GridBounds,
    rows: usize,
    cols: usize,
    layers: usize,
}

impl TryFrom<GridBounds> for GridSpec {
    type Error = Error;

    fn try_from(b: GridBounds) -> Result<Self> {
        let cells = [b.cell_x, b.cell_y, b.cell_z];
        if cells.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(Error::InvalidGrid(format!(
                "cell sizes must be positive, got {cells:?}"
            )));
        }
        let count = |lo: f64, hi: f64, cell: f64, axis: &str| -> Result<usize> {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidGrid(format!("non-finite {axis} range")));
            }
            let n = ((hi - lo) / cell).round();
            if n < 1.0 {
                return Err(Error::InvalidGrid(format!(
                    "{axis} range [{lo}, {hi}) holds no {cell} m voxel"
                )));
            }
            Ok(n as usize)
        };
        Ok(GridSpec {
            rows: count(b.x_min, b.x_max, b.cell_x, "x")?,
            cols: count(b.y_min, b.y_max, b.cell_y, "y")?,
            layers: count(b.z_min, b.z_max, b.cell_z, "z")?,
            bounds: b,
        })
    }
}

impl From<GridSpec> for GridBounds {
    fn from(spec: GridSpec) -> Self {
        spec.bounds
    }
}

impl Default for GridSpec {
    /// nuScenes preprocessing: 64 m x 64 m x 5 m crop at 0.25 x 0.25 x 0.4 m.
    fn default() -> Self {
        GridSpec::new([-32.0, 32.0], [-32.0, 32.0], [-3.0, 2.0], [0.25, 0.25, 0.4])
            .expect("default grid is valid")
    }
}

impl GridSpec {
    pub fn new(x: [f64; 2], y: [f64; 2], z: [f64; 2], cell: [f64; 3]) -> Result<Self> {
        GridBounds {
            x_min: x[0],
            x_max: x[1],
            y_min: y[0],
            y_max: y[1],
            z_min: z[0],
            z_max: z[1],
            cell_x: cell[0],
            cell_y: cell[1],
            cell_z: cell[2],
        }
        .try_into()
    }

    /// H: voxel count along X.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// W: voxel count along Y.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// C: voxel count along Z.
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn cell_size(&self) -> [f64; 3] {
        [self.bounds.cell_x, self.bounds.cell_y, self.bounds.cell_z]
    }

    pub fn min_corner(&self) -> [f64; 3] {
        [self.bounds.x_min, self.bounds.y_min, self.bounds.z_min]
    }

    /// Voxel index of a point, or `None` when it falls outside the crop.
    pub fn voxel_of(&self, p: [f64; 3]) -> Option<(usize, usize, usize)> {
        let min = self.min_corner();
        let cell = self.cell_size();
        let dims = [self.rows, self.cols, self.layers];
        let mut idx = [0usize; 3];
        for axis in 0..3 {
            let f = ((p[axis] - min[axis]) / cell[axis]).floor();
            if !(f >= 0.0 && f < dims[axis] as f64) {
                return None;
            }
            idx[axis] = f as usize;
        }
        Some((idx[0], idx[1], idx[2]))
    }

    /// Metric center of a BEV cell.
    pub fn cell_center(&self, cell: Cell) -> [f64; 2] {
        [
            self.bounds.x_min + (cell.row as f64 + 0.5) * self.bounds.cell_x,
            self.bounds.y_min + (cell.col as f64 + 0.5) * self.bounds.cell_y,
        ]
    }

    /// Metric height of the center of a layer.
    pub fn layer_center(&self, layer: usize) -> f64 {
        self.bounds.z_min + (layer as f64 + 0.5) * self.bounds.cell_z
    }
}

/// One synchronized LiDAR sweep in current-frame coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    pub timestamp_index: i32,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, timestamp_index: i32) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinitePoint(i));
        }
        Ok(PointCloud {
            points,
            timestamp_index,
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// A BEV pillar coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }

    pub fn as_point(self) -> [f64; 2] {
        [self.row as f64, self.col as f64]
    }
}

/// Binary H x W x C occupancy of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    spec: GridSpec,
    occupancy: Vec<u8>,
    pub frame_index: i32,
}

impl BevMap {
    pub fn empty(spec: GridSpec, frame_index: i32) -> Self {
        BevMap {
            occupancy: vec![0; spec.rows() * spec.cols() * spec.layers()],
            spec,
            frame_index,
        }
    }

    /// Wraps raw row-major `[H][W][C]` occupancy. Any nonzero byte counts as occupied.
    pub fn from_raw(spec: GridSpec, occupancy: Vec<u8>, frame_index: i32) -> Result<Self> {
        let expected = spec.rows() * spec.cols() * spec.layers();
        if occupancy.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "occupancy has {} voxels, grid expects {expected}",
                occupancy.len()
            )));
        }
        let occupancy = occupancy.into_iter().map(|v| u8::from(v != 0)).collect();
        Ok(BevMap {
            spec,
            occupancy,
            frame_index,
        })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn rows(&self) -> usize {
        self.spec.rows()
    }

    pub fn cols(&self) -> usize {
        self.spec.cols()
    }

    pub fn layers(&self) -> usize {
        self.spec.layers()
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.occupancy
    }

    fn offset(&self, row: usize, col: usize) -> usize {
        (row * self.cols() + col) * self.layers()
    }

    pub fn get(&self, row: usize, col: usize, layer: usize) -> bool {
        self.occupancy[self.offset(row, col) + layer] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, layer: usize, value: bool) {
        let o = self.offset(row, col) + layer;
        self.occupancy[o] = u8::from(value);
    }

    pub fn pillar(&self, cell: Cell) -> &[u8] {
        let o = self.offset(cell.row, cell.col);
        &self.occupancy[o..o + self.layers()]
    }

    pub fn set_pillar(&mut self, cell: Cell, pillar: &[u8]) {
        let o = self.offset(cell.row, cell.col);
        let layers = self.layers();
        self.occupancy[o..o + layers].copy_from_slice(pillar);
    }

    pub fn is_occupied(&self, cell: Cell) -> bool {
        self.pillar(cell).iter().any(|&v| v != 0)
    }

    /// Pillar occupancy flattened to H x W.
    pub fn pillar_mask(&self) -> Vec<bool> {
        self.occupancy
            .chunks_exact(self.layers())
            .map(|p| p.iter().any(|&v| v != 0))
            .collect()
    }

    pub fn occupied_voxels(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v != 0).count()
    }
}

/// T occupancy frames sharing one grid, oldest first; the last frame is current.
#[derive(Debug, Clone, PartialEq)]
pub struct BevSequence {
    frames: Vec<BevMap>,
    pub horizon_seconds: f64,
}

impl BevSequence {
    pub fn new(frames: Vec<BevMap>, horizon_seconds: f64) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::ShapeMismatch("sequence needs at least one frame".into()))?;
        if let Some(bad) = frames.iter().find(|f| f.spec() != first.spec()) {
            return Err(Error::ShapeMismatch(format!(
                "frame {} uses a different grid",
                bad.frame_index
            )));
        }
        Ok(BevSequence {
            frames,
            horizon_seconds,
        })
    }

    pub fn frames(&self) -> &[BevMap] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [BevMap] {
        &mut self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn spec(&self) -> &GridSpec {
        self.frames[0].spec()
    }

    pub fn current(&self) -> &BevMap {
        self.frames.last().expect("sequence is never empty")
    }
}

/// Per-cell displacement over the prediction horizon, in cell units.
///
/// `valid` doubles as an index set: a training target only constrains cells
/// where it is true.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    rows: usize,
    cols: usize,
    displacement: Vec<[f64; 2]>,
    valid: Vec<bool>,
}

impl MotionField {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MotionField {
            rows,
            cols,
            displacement: vec![[0.0; 2]; rows * cols],
            valid: vec![false; rows * cols],
        }
    }

    pub fn from_parts(
        rows: usize,
        cols: usize,
        displacement: Vec<[f64; 2]>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if displacement.len() != rows * cols || valid.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "motion field {rows}x{cols} got {} vectors and {} mask entries",
                displacement.len(),
                valid.len()
            )));
        }
        Ok(MotionField {
            rows,
            cols,
            displacement,
            valid,
        })
    }

    /// Zero field whose mask is the current frame's non-empty pillars.
    pub fn for_map(map: &BevMap) -> Self {
        MotionField {
            rows: map.rows(),
            cols: map.cols(),
            displacement: vec![[0.0; 2]; map.rows() * map.cols()],
            valid: map.pillar_mask(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, cell: Cell) -> [f64; 2] {
        self.displacement[cell.row * self.cols + cell.col]
    }

    pub fn set(&mut self, cell: Cell, v: [f64; 2]) {
        self.displacement[cell.row * self.cols + cell.col] = v;
    }

    pub fn is_valid(&self, cell: Cell) -> bool {
        self.valid[cell.row * self.cols + cell.col]
    }

    pub fn set_valid(&mut self, cell: Cell, valid: bool) {
        self.valid[cell.row * self.cols + cell.col] = valid;
    }

    pub fn displacements(&self) -> &[[f64; 2]] {
        &self.displacement
    }

    pub fn displacements_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.displacement
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let cols = self.cols;
        self.valid
            .iter()
            .enumerate()
            .filter(|(_, v)| **v)
            .map(move |(i, _)| Cell::new(i / cols, i % cols))
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Coordinates of the non-empty pillars of one frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSet {
    pub coords: Vec<Cell>,
    pub source_frame: i32,
}

impl CellSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        self.coords.iter().map(|c| c.as_point()).collect()
    }
}

pub fn voxelize(cloud: &PointCloud, spec: &GridSpec) -> BevMap {
    let mut map = BevMap::empty(*spec, cloud.timestamp_index);
    for p in cloud.points() {
        if let Some((r, c, l)) = spec.voxel_of(*p) {
            map.set(r, c, l, true);
        }
    }
    map
}

pub fn nonempty_cells(map: &BevMap) -> CellSet {
    let cols = map.cols();
    let coords = map
        .pillar_mask()
        .into_iter()
        .enumerate()
        .filter(|(_, occ)| *occ)
        .map(|(i, _)| Cell::new(i / cols, i % cols))
        .collect();
    CellSet {
        coords,
        source_frame: map.frame_index,
    }
}

/// Adds each cell's displacement to its coordinate.
pub fn warp_cells(cells: &CellSet, motion: &MotionField) -> Result<Vec<[f64; 2]>> {
    cells
        .coords
        .iter()
        .map(|&cell| {
            if cell.row >= motion.rows() || cell.col >= motion.cols() || !motion.is_valid(cell) {
                return Err(Error::UnlabeledCell {
                    row: cell.row,
                    col: cell.col,
                });
            }
            let d = motion.get(cell);
            Ok([cell.row as f64 + d[0], cell.col as f64 + d[1]])
        })
        .collect()
}

pub fn meters_to_cells(v: [f64; 2], spec: &GridSpec) -> [f64; 2] {
    let cell = spec.cell_size();
    [v[0] / cell[0], v[1] / cell[1]]
}

pub fn cells_to_meters(v: [f64; 2], spec: &GridSpec) -> [f64; 2] {
    let cell = spec.cell_size();
    [v[0] * cell[0], v[1] * cell[1]]
}
