//! Weak (flip) and strong (temporal sampling, BEVMix) augmentations.

use rand::Rng;

use crate::error::{Error, Result};
use crate::ground::{column_heights, ground_remove, GroundConfig};
use crate::grid::{nonempty_cells, BevMap, BevSequence, Cell, CellSet, MotionField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipAxis {
    /// Mirror rows; negates the X component.
    X,
    /// Mirror columns; negates the Y component.
    Y,
    None,
}

impl FlipAxis {
    pub fn random(rng: &mut impl Rng) -> Self {
        match rng.gen_range(0..3) {
            0 => FlipAxis::X,
            1 => FlipAxis::Y,
            _ => FlipAxis::None,
        }
    }
}

fn mirror(cell: Cell, rows: usize, cols: usize, axis: FlipAxis) -> Cell {
    match axis {
        FlipAxis::X => Cell::new(rows - 1 - cell.row, cell.col),
        FlipAxis::Y => Cell::new(cell.row, cols - 1 - cell.col),
        FlipAxis::None => cell,
    }
}

pub fn flip_map(map: &BevMap, axis: FlipAxis) -> BevMap {
    if axis == FlipAxis::None {
        return map.clone();
    }
    let mut out = BevMap::empty(*map.spec(), map.frame_index);
    for row in 0..map.rows() {
        for col in 0..map.cols() {
            let cell = Cell::new(row, col);
            out.set_pillar(mirror(cell, map.rows(), map.cols(), axis), map.pillar(cell));
        }
    }
    out
}

pub fn flip_motion(motion: &MotionField, axis: FlipAxis) -> MotionField {
    if axis == FlipAxis::None {
        return motion.clone();
    }
    let (rows, cols) = (motion.rows(), motion.cols());
    let mut out = MotionField::zeros(rows, cols);
    for row in 0..rows {
        for col in 0..cols {
            let cell = Cell::new(row, col);
            let [dx, dy] = motion.get(cell);
            let v = match axis {
                FlipAxis::X => [-dx, dy],
                FlipAxis::Y => [dx, -dy],
                FlipAxis::None => [dx, dy],
            };
            let target = mirror(cell, rows, cols, axis);
            out.set(target, v);
            out.set_valid(target, motion.is_valid(cell));
        }
    }
    out
}

pub fn flip_sequence(seq: &BevSequence, axis: FlipAxis) -> BevSequence {
    let frames = seq.frames().iter().map(|f| flip_map(f, axis)).collect();
    BevSequence::new(frames, seq.horizon_seconds).expect("flip preserves shape")
}

/// Mirrors every frame and the motion field along `axis`.
pub fn random_flip(
    seq: &BevSequence,
    motion: &MotionField,
    axis: FlipAxis,
) -> (BevSequence, MotionField) {
    (flip_sequence(seq, axis), flip_motion(motion, axis))
}

/// Stride-2 resampling: keeps frames 1, 3, ..., T, pads the front with copies
/// of frame 1 back to length T, and doubles the displacement.
pub fn temporal_sample(
    seq: &BevSequence,
    motion: &MotionField,
) -> Result<(BevSequence, MotionField)> {
    let t = seq.len();
    if t % 2 == 0 {
        return Err(Error::StrideMissesCurrent(t));
    }
    if t < 3 {
        return Err(Error::InvalidConfig(format!(
            "temporal sampling needs at least 3 frames, got {t}"
        )));
    }
    let kept: Vec<&BevMap> = seq.frames().iter().step_by(2).collect();
    let mut frames: Vec<BevMap> = std::iter::repeat(kept[0])
        .take(t - kept.len())
        .cloned()
        .collect();
    frames.extend(kept.into_iter().cloned());
    let mut doubled = motion.clone();
    for d in doubled.displacements_mut() {
        d[0] *= 2.0;
        d[1] *= 2.0;
    }
    Ok((BevSequence::new(frames, seq.horizon_seconds)?, doubled))
}

/// Foreground and background samples for BEVMix; labels use the mask as index set.
#[derive(Debug, Clone, Copy)]
pub struct MixPair<'a> {
    pub foreground: (&'a BevSequence, &'a MotionField),
    pub background: (&'a BevSequence, &'a MotionField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixResult {
    pub sequence: BevSequence,
    pub labels: MotionField,
    /// Ground-removed foreground cells per frame.
    pub foreground_cells: Vec<CellSet>,
}

/// Pastes the ground-removed foreground pillars of each frame into the
/// background, and the foreground labels of the current frame's pasted
/// cells into the background labels.
pub fn bevmix(pair: MixPair<'_>, ground: &GroundConfig) -> Result<MixResult> {
    let (fg_seq, fg_labels) = pair.foreground;
    let (bg_seq, bg_labels) = pair.background;
    if fg_seq.spec() != bg_seq.spec() || fg_seq.len() != bg_seq.len() {
        return Err(Error::ShapeMismatch(
            "BEVMix pair must share grid and sequence length".into(),
        ));
    }
    let (rows, cols) = (bg_seq.spec().rows(), bg_seq.spec().cols());
    for m in [fg_labels, bg_labels] {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::ShapeMismatch("BEVMix labels do not match grid".into()));
        }
    }

    let mut frames: Vec<BevMap> = bg_seq.frames().to_vec();
    let mut labels = bg_labels.clone();
    let last = frames.len() - 1;
    let mut foreground_cells = Vec::with_capacity(frames.len());
    for (t, (mix, fg)) in frames.iter_mut().zip(fg_seq.frames()).enumerate() {
        let cells = nonempty_cells(fg);
        let cells = ground_remove(&cells, &column_heights(fg, &cells), ground).kept;
        for &cell in &cells.coords {
            mix.set_pillar(cell, fg.pillar(cell));
            if t == last {
                labels.set(cell, fg_labels.get(cell));
                labels.set_valid(cell, fg_labels.is_valid(cell));
            }
        }
        foreground_cells.push(cells);
    }
    Ok(MixResult {
        sequence: BevSequence::new(frames, bg_seq.horizon_seconds)?,
        labels,
        foreground_cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;

    fn spec() -> GridSpec {
        GridSpec::new([0.0, 8.0], [0.0, 6.0], [0.0, 2.0], [1.0, 1.0, 1.0]).unwrap()
    }

    fn seq_of(n: usize) -> BevSequence {
        let frames = (0..n)
            .map(|t| {
                let mut m = BevMap::empty(spec(), t as i32);
                m.set(t % 8, 1, 0, true);
                m
            })
            .collect();
        BevSequence::new(frames, 1.0).unwrap()
    }

    #[test]
    fn flip_none_is_identity() {
        let s = seq_of(3);
        let m = MotionField::for_map(s.current());
        assert_eq!(random_flip(&s, &m, FlipAxis::None), (s.clone(), m));
    }

    #[test]
    fn flip_x_mirrors_row_and_negates_x() {
        let mut map = BevMap::empty(spec(), 0);
        map.set(2, 3, 1, true);
        let s = BevSequence::new(vec![map.clone()], 1.0).unwrap();
        let mut m = MotionField::for_map(&map);
        m.set(Cell::new(2, 3), [2.0, -1.0]);
        let (fs, fm) = random_flip(&s, &m, FlipAxis::X);
        assert!(fs.current().get(5, 3, 1));
        assert_eq!(fm.get(Cell::new(5, 3)), [-2.0, -1.0]);
        assert!(fm.is_valid(Cell::new(5, 3)));
        assert!(!fm.is_valid(Cell::new(2, 3)));
    }

    #[test]
    fn double_flip_is_identity() {
        let s = seq_of(5);
        let mut m = MotionField::for_map(s.current());
        m.set(Cell::new(4, 1), [1.5, 0.25]);
        for axis in [FlipAxis::X, FlipAxis::Y] {
            let (a, b) = random_flip(&s, &m, axis);
            assert_eq!(random_flip(&a, &b, axis), (s.clone(), m.clone()));
        }
    }

    #[test]
    fn temporal_sampling_order_and_scaling() {
        let s = seq_of(5);
        let mut m = MotionField::for_map(s.current());
        m.set(Cell::new(4, 1), [1.5, -0.5]);
        let (ts, tm) = temporal_sample(&s, &m).unwrap();
        let picked: Vec<i32> = ts.frames().iter().map(|f| f.frame_index).collect();
        assert_eq!(picked, vec![0, 0, 0, 2, 4]);
        assert_eq!(ts.frames()[3], s.frames()[2]);
        assert_eq!(tm.get(Cell::new(4, 1)), [3.0, -1.0]);
        assert_eq!(tm.mask(), m.mask());
    }

    #[test]
    fn temporal_sampling_rejects_even_length() {
        let s = seq_of(4);
        let m = MotionField::for_map(s.current());
        assert!(matches!(
            temporal_sample(&s, &m),
            Err(Error::StrideMissesCurrent(4))
        ));
    }

    #[test]
    fn static_sequence_stays_static() {
        let frame = seq_of(1).frames()[0].clone();
        let s = BevSequence::new(vec![frame; 5], 1.0).unwrap();
        let m = MotionField::for_map(s.current());
        let (ts, tm) = temporal_sample(&s, &m).unwrap();
        assert_eq!(ts, s);
        assert_eq!(tm, m);
    }

    #[test]
    fn empty_foreground_leaves_background() {
        let bg = seq_of(3);
        let mut bl = MotionField::for_map(bg.current());
        bl.set(Cell::new(2, 1), [1.0, 1.0]);
        let fg = BevSequence::new(vec![BevMap::empty(spec(), 0); 3], 1.0).unwrap();
        let fl = MotionField::zeros(8, 6);
        let out = bevmix(
            MixPair {
                foreground: (&fg, &fl),
                background: (&bg, &bl),
            },
            &GroundConfig::default(),
        )
        .unwrap();
        assert_eq!(out.sequence, bg);
        assert_eq!(out.labels, bl);
    }

    #[test]
    fn empty_background_takes_foreground() {
        // Too few pillars for a plane fit, so nothing is removed as ground.
        let fg = seq_of(3);
        let mut fl = MotionField::for_map(fg.current());
        fl.set(Cell::new(2, 1), [0.5, 2.0]);
        let bg = BevSequence::new(vec![BevMap::empty(spec(), 0); 3], 1.0).unwrap();
        let bl = MotionField::zeros(8, 6);
        let out = bevmix(
            MixPair {
                foreground: (&fg, &fl),
                background: (&bg, &bl),
            },
            &GroundConfig::default(),
        )
        .unwrap();
        for (a, b) in out.sequence.frames().iter().zip(fg.frames()) {
            assert_eq!(a.as_raw(), b.as_raw());
        }
        assert_eq!(out.labels, fl);
    }
}
