//! Synthetic rigid-box scenes with exact ground-truth motion, and the
//! speed-bucketed L2 evaluation.
//!
//! Boxes are axis-aligned, move at constant velocity and are sampled as
//! surface point clouds. Their footprints are snapped to whole cells in every
//! frame (the continuous trajectory is rounded per frame), so the
//! ground-truth displacement of a box is an integer number of cells and its
//! future footprint is an exact translate of the current one.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    cells_to_meters, voxelize, BevMap, BevSequence, Cell, GridSpec, MotionField, PointCloud,
};

/// Speed class of a generated object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedClass {
    Static,
    Slow,
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid: GridSpec,
    /// Past and current frames in the input sequence (T).
    pub sequence_len: usize,
    pub frame_interval: f64,
    pub horizon_seconds: f64,
    pub n_objects: usize,
    pub static_fraction: f64,
    pub slow_fraction: f64,
    pub fast_fraction: f64,
    /// Slow objects draw speeds from `[min_slow_speed, 5)` m/s.
    pub min_slow_speed: f64,
    /// Fast objects draw speeds from `[5, max_speed]` m/s.
    pub max_speed: f64,
    /// Footprint side lengths, in cells, inclusive.
    pub footprint: [usize; 2],
    /// Box heights above the ground plane, meters.
    pub height: [f64; 2],
    pub ground_z: f64,
    /// Expected ground returns per square meter.
    pub ground_density: f64,
    pub noise_sigma: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid: GridSpec::new([-16.0, 16.0], [-16.0, 16.0], [-2.0, 2.0], [1.0, 1.0, 1.0])
                .expect("valid grid"),
            sequence_len: 5,
            frame_interval: 0.2,
            horizon_seconds: 1.0,
            n_objects: 6,
            static_fraction: 0.4,
            slow_fraction: 0.45,
            fast_fraction: 0.15,
            min_slow_speed: 1.0,
            max_speed: 9.0,
            footprint: [2, 4],
            height: [1.2, 2.4],
            ground_z: -1.5,
            ground_density: 0.15,
            noise_sigma: 0.02,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.static_fraction, self.slow_fraction, self.fast_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "speed fractions must be in [0, 1] and sum to 1, got {fr:?}"
            )));
        }
        if self.sequence_len == 0 {
            return Err(Error::InvalidConfig("sequence_len must be at least 1".into()));
        }
        if !(self.frame_interval > 0.0 && self.horizon_seconds > 0.0) {
            return Err(Error::InvalidConfig("frame interval and horizon must be positive".into()));
        }
        if self.footprint[0] == 0 || self.footprint[0] > self.footprint[1] {
            return Err(Error::InvalidConfig(format!("bad footprint range {:?}", self.footprint)));
        }
        if !(self.height[0] > 0.0 && self.height[0] <= self.height[1]) {
            return Err(Error::InvalidConfig(format!("bad height range {:?}", self.height)));
        }
        if !(self.min_slow_speed >= 0.0 && self.min_slow_speed < 5.0 && self.max_speed >= 5.0) {
            return Err(Error::InvalidConfig("speed ranges must straddle 5 m/s".into()));
        }
        if !(self.ground_density >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("density and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Cell-space trajectory of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub class: SpeedClass,
    /// Velocity in m/s along (X, Y).
    pub velocity: [f64; 2],
    /// Footprint extent in cells along rows and columns.
    pub size: [usize; 2],
    pub height: f64,
    /// Footprint corner (min row, min col) for each input frame, then the future frame.
    pub anchors: Vec<[i64; 2]>,
}

impl ObjectTrack {
    pub fn footprint(&self, frame: usize) -> impl Iterator<Item = Cell> + '_ {
        let [r0, c0] = self.anchors[frame];
        (0..self.size[0]).flat_map(move |dr| {
            (0..self.size[1]).map(move |dc| Cell::new(r0 as usize + dr, c0 as usize + dc))
        })
    }

    /// Displacement from the current frame to the future frame, in cells.
    pub fn displacement(&self) -> [f64; 2] {
        let n = self.anchors.len();
        let (a, b) = (self.anchors[n - 2], self.anchors[n - 1]);
        [(b[0] - a[0]) as f64, (b[1] - a[1]) as f64]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sequence: BevSequence,
    pub future: BevMap,
    pub motion: MotionField,
    /// Current-frame pillars occupied only by ground returns.
    pub ground_mask: Vec<bool>,
    /// Ground-only pillar mask for each input frame.
    pub ground_masks: Vec<Vec<bool>>,
    pub objects: Vec<ObjectTrack>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_class(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> SpeedClass {
    let u: f64 = rng.gen();
    if u < cfg.static_fraction {
        SpeedClass::Static
    } else if u < cfg.static_fraction + cfg.slow_fraction {
        SpeedClass::Slow
    } else {
        SpeedClass::Fast
    }
}

fn sample_track(
    cfg: &SceneConfig,
    class: SpeedClass,
    rng: &mut ChaCha8Rng,
    times: &[f64],
) -> ObjectTrack {
    let speed = match class {
        SpeedClass::Static => 0.0,
        SpeedClass::Slow => rng.gen_range(cfg.min_slow_speed..5.0),
        SpeedClass::Fast => rng.gen_range(5.0..=cfg.max_speed),
    };
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let velocity = [speed * heading.cos(), speed * heading.sin()];
    let size = [
        rng.gen_range(cfg.footprint[0]..=cfg.footprint[1]),
        rng.gen_range(cfg.footprint[0]..=cfg.footprint[1]),
    ];
    let height = rng.gen_range(cfg.height[0]..=cfg.height[1]);
    let cell = cfg.grid.cell_size();
    let start = [
        rng.gen_range(0.0..cfg.grid.rows() as f64),
        rng.gen_range(0.0..cfg.grid.cols() as f64),
    ];
    let anchors = times
        .iter()
        .map(|t| {
            [
                (start[0] + velocity[0] * t / cell[0]).round() as i64,
                (start[1] + velocity[1] * t / cell[1]).round() as i64,
            ]
        })
        .collect();
    ObjectTrack {
        class,
        velocity,
        size,
        height,
        anchors,
    }
}

fn fits(track: &ObjectTrack, rows: usize, cols: usize) -> bool {
    track.anchors.iter().all(|a| {
        a[0] >= 0
            && a[1] >= 0
            && a[0] as usize + track.size[0] <= rows
            && a[1] as usize + track.size[1] <= cols
    })
}

/// Footprints with a one-cell gap never touch in any frame.
fn collides(a: &ObjectTrack, b: &ObjectTrack) -> bool {
    a.anchors.iter().zip(&b.anchors).any(|(pa, pb)| {
        let sep_r = pa[0] + a.size[0] as i64 + 1 <= pb[0] || pb[0] + b.size[0] as i64 + 1 <= pa[0];
        let sep_c = pa[1] + a.size[1] as i64 + 1 <= pb[1] || pb[1] + b.size[1] as i64 + 1 <= pa[1];
        !(sep_r || sep_c)
    })
}

fn box_points(
    track: &ObjectTrack,
    frame: usize,
    cfg: &SceneConfig,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f64; 3]>,
) {
    let spec = &cfg.grid;
    let [cx, cy, cz] = spec.cell_size();
    let min = spec.min_corner();
    let top = cfg.ground_z + track.height;
    let [r0, c0] = track.anchors[frame];
    let margin = 0.2;
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(margin..1.0 - margin);
    for cell in track.footprint(frame) {
        let x0 = min[0] + cell.row as f64 * cx;
        let y0 = min[1] + cell.col as f64 * cy;
        // Top face.
        for _ in 0..2 {
            out.push([x0 + jitter(rng) * cx, y0 + jitter(rng) * cy, top]);
        }
        // Side faces on the perimeter, from the ground up.
        let on_edge = cell.row as i64 == r0
            || cell.col as i64 == c0
            || cell.row + 1 == r0 as usize + track.size[0]
            || cell.col + 1 == c0 as usize + track.size[1];
        if on_edge {
            let mut z = cfg.ground_z + 0.05;
            while z < top {
                out.push([x0 + jitter(rng) * cx, y0 + jitter(rng) * cy, z]);
                z += 0.5 * cz;
            }
        }
    }
}

pub fn generate(cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = cfg.grid;
    let (rows, cols) = (spec.rows(), spec.cols());
    let t_len = cfg.sequence_len;
    // Input frames end at t = 0; the future frame sits one horizon later.
    let times: Vec<f64> = (0..t_len)
        .map(|k| -((t_len - 1 - k) as f64) * cfg.frame_interval)
        .chain(std::iter::once(cfg.horizon_seconds))
        .collect();

    let mut objects: Vec<ObjectTrack> = Vec::with_capacity(cfg.n_objects);
    for _ in 0..cfg.n_objects {
        // The class is fixed before placement retries so rejections do not
        // skew the speed mix.
        let class = sample_class(cfg, &mut rng);
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let track = sample_track(cfg, class, &mut rng, &times);
            if fits(&track, rows, cols) && !objects.iter().any(|o| collides(o, &track)) {
                placed = Some(track);
                break;
            }
        }
        objects.push(placed.ok_or(Error::PlacementFailed(cfg.max_retries))?);
    }

    // Static ground returns, shared by all frames.
    let [cx, cy, _] = spec.cell_size();
    let min = spec.min_corner();
    let p_ground = 1.0 - (-cfg.ground_density * cx * cy).exp();
    let mut ground = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            if rng.gen::<f64>() < p_ground {
                ground.push([
                    min[0] + (row as f64 + rng.gen_range(0.2..0.8)) * cx,
                    min[1] + (col as f64 + rng.gen_range(0.2..0.8)) * cy,
                    cfg.ground_z + cfg.noise_sigma * gaussian(&mut rng),
                ]);
            }
        }
    }

    let mut maps = Vec::with_capacity(times.len());
    let mut ground_masks = Vec::with_capacity(times.len());
    for frame in 0..times.len() {
        let mut points = ground.clone();
        let mut object_cells = vec![false; rows * cols];
        for track in &objects {
            let start = points.len();
            box_points(track, frame, cfg, &mut rng, &mut points);
            for p in &mut points[start..] {
                for v in p.iter_mut() {
                    *v += cfg.noise_sigma * gaussian(&mut rng);
                }
            }
            for cell in track.footprint(frame) {
                object_cells[cell.row * cols + cell.col] = true;
            }
        }
        let index = frame as i32 - (t_len as i32 - 1);
        let map = voxelize(&PointCloud::new(points, index)?, &spec);
        let mask: Vec<bool> = map
            .pillar_mask()
            .into_iter()
            .zip(&object_cells)
            .map(|(occ, obj)| occ && !obj)
            .collect();
        maps.push(map);
        ground_masks.push(mask);
    }

    let future = maps.pop().expect("future frame");
    ground_masks.pop();
    let sequence = BevSequence::new(maps, cfg.horizon_seconds)?;
    let mut motion = MotionField::for_map(sequence.current());
    for track in &objects {
        let d = track.displacement();
        for cell in track.footprint(t_len - 1) {
            motion.set(cell, d);
        }
    }
    Ok(Scene {
        ground_mask: ground_masks.last().cloned().unwrap_or_default(),
        ground_masks,
        sequence,
        future,
        motion,
        objects,
    })
}

/// Speed thresholds, m/s: static at or below `STATIC_SPEED`, fast at or above `FAST_SPEED`.
pub const STATIC_SPEED: f64 = 0.2;
pub const FAST_SPEED: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeedBucket {
    Static,
    Slow,
    Fast,
}

impl SpeedBucket {
    pub const ALL: [SpeedBucket; 3] = [SpeedBucket::Static, SpeedBucket::Slow, SpeedBucket::Fast];

    pub fn of_speed(speed: f64) -> Self {
        if speed <= STATIC_SPEED {
            SpeedBucket::Static
        } else if speed < FAST_SPEED {
            SpeedBucket::Slow
        } else {
            SpeedBucket::Fast
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpeedBucket::Static => "static",
            SpeedBucket::Slow => "slow",
            SpeedBucket::Fast => "fast",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    /// `None` for an empty bucket.
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub static_: BucketStats,
    pub slow: BucketStats,
    pub fast: BucketStats,
}

impl EvalReport {
    pub fn bucket(&self, b: SpeedBucket) -> &BucketStats {
        match b {
            SpeedBucket::Static => &self.static_,
            SpeedBucket::Slow => &self.slow,
            SpeedBucket::Fast => &self.fast,
        }
    }
}

/// Per-cell errors grouped by bucket, meters. Feed several samples into one
/// accumulator to pool cells across a test set.
#[derive(Debug, Clone, Default)]
pub struct ErrorAccumulator {
    errors: [Vec<f64>; 3],
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred: &MotionField, gt: &MotionField, spec: &GridSpec) -> Result<()> {
        if pred.rows() != gt.rows() || pred.cols() != gt.cols() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.rows(),
                pred.cols(),
                gt.rows(),
                gt.cols()
            )));
        }
        let horizon = 1.0;
        for cell in gt.valid_cells() {
            let g = cells_to_meters(gt.get(cell), spec);
            let p = cells_to_meters(pred.get(cell), spec);
            let speed = g[0].hypot(g[1]) / horizon;
            let err = (p[0] - g[0]).hypot(p[1] - g[1]);
            let slot = SpeedBucket::ALL
                .iter()
                .position(|&b| b == SpeedBucket::of_speed(speed))
                .unwrap();
            self.errors[slot].push(err);
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let stats = |v: &Vec<f64>| {
            if v.is_empty() {
                return BucketStats {
                    count: 0,
                    mean: None,
                    median: None,
                };
            }
            let mut sorted = v.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let median = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            BucketStats {
                count: n,
                mean: Some(v.iter().sum::<f64>() / n as f64),
                median: Some(median),
            }
        };
        EvalReport {
            static_: stats(&self.errors[0]),
            slow: stats(&self.errors[1]),
            fast: stats(&self.errors[2]),
        }
    }
}

/// Mean and median L2 error per ground-truth speed bucket over the valid
/// ground-truth cells. Displacements cover a one-second horizon, so the
/// displacement norm in meters is the speed in m/s.
pub fn evaluate(pred: &MotionField, gt: &MotionField, spec: &GridSpec) -> Result<EvalReport> {
    let mut acc = ErrorAccumulator::default();
    acc.add(pred, gt, spec)?;
    Ok(acc.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{nonempty_cells, warp_cells};

    #[test]
    fn ground_only_scene_is_static() {
        let scene = generate(&SceneConfig {
            n_objects: 0,
            ground_density: 0.5,
            ..Default::default()
        })
        .unwrap();
        assert!(scene.motion.valid_count() > 0);
        for cell in scene.motion.valid_cells() {
            assert_eq!(scene.motion.get(cell), [0.0, 0.0]);
        }
        assert_eq!(
            scene.ground_mask.iter().filter(|g| **g).count(),
            scene.motion.valid_count()
        );
    }

    #[test]
    fn two_meters_per_second_is_eight_quarter_cells() {
        let grid =
            GridSpec::new([-16.0, 16.0], [-16.0, 16.0], [-2.0, 2.0], [0.25, 0.25, 1.0]).unwrap();
        let cfg = SceneConfig {
            grid,
            n_objects: 0,
            ..Default::default()
        };
        let times = [-0.8, -0.6, -0.4, -0.2, 0.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut track = sample_track(&cfg, SpeedClass::Slow, &mut rng, &times);
        track.velocity = [2.0, 0.0];
        track.anchors = times
            .iter()
            .map(|t| [(40.0 + 2.0 * t / 0.25f64).round() as i64, 10])
            .collect();
        assert_eq!(track.displacement(), [8.0, 0.0]);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn gt_warp_lands_on_future_cells() {
        for seed in 0..20 {
            let scene = generate(&SceneConfig {
                seed,
                ..Default::default()
            })
            .unwrap();
            let t = scene.sequence.len() - 1;
            for obj in &scene.objects {
                let cells = crate::grid::CellSet {
                    coords: obj.footprint(t).collect(),
                    source_frame: 0,
                };
                let warped = warp_cells(&cells, &scene.motion).unwrap();
                let future: Vec<[f64; 2]> = obj.footprint(t + 1).map(|c| c.as_point()).collect();
                for w in warped {
                    let d = future
                        .iter()
                        .map(|f| (f[0] - w[0]).hypot(f[1] - w[1]))
                        .fold(f64::INFINITY, f64::min);
                    assert!(d <= 0.5, "seed {seed}: {d}");
                }
                assert!(obj.footprint(t + 1).all(|c| scene.future.is_occupied(c)));
            }
            assert_eq!(nonempty_cells(scene.sequence.current()).len(), scene.motion.valid_count());
        }
    }

    #[test]
    fn overcrowded_scene_fails_placement() {
        let cfg = SceneConfig {
            n_objects: 400,
            max_retries: 5,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::PlacementFailed(5))));
    }

    #[test]
    fn bad_fractions_rejected() {
        let cfg = SceneConfig {
            static_fraction: 0.5,
            slow_fraction: 0.5,
            fast_fraction: 0.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn perfect_prediction_has_zero_error() {
        let scene = generate(&SceneConfig::default()).unwrap();
        let report = evaluate(&scene.motion, &scene.motion, scene.sequence.spec()).unwrap();
        for b in SpeedBucket::ALL {
            let s = report.bucket(b);
            if s.count > 0 {
                assert_eq!(s.mean, Some(0.0));
                assert_eq!(s.median, Some(0.0));
            }
        }
    }

    #[test]
    fn constant_offset_on_static_cells() {
        let spec = GridSpec::new([0.0, 4.0], [0.0, 4.0], [0.0, 1.0], [0.25, 0.25, 1.0]).unwrap();
        let mut gt = MotionField::zeros(16, 16);
        let mut pred = MotionField::zeros(16, 16);
        for r in 0..16 {
            for c in 0..16 {
                gt.set_valid(Cell::new(r, c), true);
                pred.set(Cell::new(r, c), [1.0, 0.0]);
            }
        }
        let report = evaluate(&pred, &gt, &spec).unwrap();
        assert_eq!(report.static_.mean, Some(0.25));
        assert_eq!(report.static_.median, Some(0.25));
        assert_eq!(report.slow.mean, None);
        assert_eq!(report.fast.count, 0);
    }
}
