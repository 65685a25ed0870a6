//! Smooth-L1 regression loss over an index set of cells, and its gradient
//! through the predictor.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{BevSequence, Cell, MotionField};

use super::params::ParamVector;
use super::predictor::{backward, encode_input, forward, PredictorConfig};

/// Transition point between the quadratic and linear branches, in cells.
pub const SMOOTH_L1_DELTA: f64 = 1.0;

fn huber(r: f64) -> (f64, f64) {
    if r.abs() < SMOOTH_L1_DELTA {
        (0.5 * r * r / SMOOTH_L1_DELTA, r / SMOOTH_L1_DELTA)
    } else {
        (r.abs() - 0.5 * SMOOTH_L1_DELTA, r.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    /// Mean over indexed cells and both components; 0 when `empty`.
    pub loss: f64,
    pub cells: usize,
    pub empty: bool,
}

/// Sum of per-component losses over the target's valid cells, accumulating
/// d(sum)/d(output) into `grad` (layout `[2][H][W]`) when given.
fn summed(
    pred: &MotionField,
    target: &MotionField,
    mut grad: Option<&mut [f64]>,
) -> Result<(f64, usize)> {
    if pred.rows() != target.rows() || pred.cols() != target.cols() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let hw = pred.rows() * pred.cols();
    let mut total = 0.0;
    let mut cells = 0;
    for cell in target.valid_cells() {
        if !pred.is_valid(cell) {
            return Err(Error::LabelOutsideValid {
                row: cell.row,
                col: cell.col,
            });
        }
        let (p, t) = (pred.get(cell), target.get(cell));
        let i = cell.row * pred.cols() + cell.col;
        for k in 0..2 {
            let (l, d) = huber(p[k] - t[k]);
            total += l;
            if let Some(g) = grad.as_deref_mut() {
                g[k * hw + i] += d;
            }
        }
        cells += 1;
    }
    Ok((total, cells))
}

/// Mean smooth-L1 between `pred` and `target` over the target's valid cells,
/// which must all be valid in `pred`.
pub fn smooth_l1(pred: &MotionField, target: &MotionField) -> Result<LossValue> {
    let (sum, cells) = summed(pred, target, None)?;
    Ok(mean_of(sum, cells))
}

fn mean_of(sum: f64, cells: usize) -> LossValue {
    if cells == 0 {
        LossValue {
            loss: 0.0,
            cells: 0,
            empty: true,
        }
    } else {
        LossValue {
            loss: sum / (2 * cells) as f64,
            cells,
            empty: false,
        }
    }
}

/// One training example: an input sequence and labels whose valid mask is the index set.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub sequence: &'a BevSequence,
    pub target: &'a MotionField,
}

struct Partial {
    sum: f64,
    cells: usize,
    grad: Vec<f64>,
}

fn example_grad(cfg: &PredictorConfig, params: &ParamVector, ex: &Example<'_>) -> Result<Partial> {
    let spec = ex.sequence.spec();
    let (h, w) = (spec.rows(), spec.cols());
    let acts = forward(cfg, params, encode_input(ex.sequence), h, w)?;
    let mut pred = MotionField::for_map(ex.sequence.current());
    for (i, d) in pred.displacements_mut().iter_mut().enumerate() {
        *d = [acts.output[i], acts.output[h * w + i]];
    }
    let mut grad_out = vec![0.0; 2 * h * w];
    let (sum, cells) = summed(&pred, ex.target, Some(&mut grad_out))?;
    let grad = if cells == 0 {
        vec![0.0; params.len()]
    } else {
        backward(cfg, params, &acts, &grad_out)
    };
    Ok(Partial { sum, cells, grad })
}

/// Mean loss of a batch pooled over all indexed cells, and its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGrad {
    pub value: LossValue,
    pub grad: Vec<f64>,
}

/// Per-example passes may run on the rayon pool; partial sums are reduced
/// in batch order so the result does not depend on the worker count.
pub fn batch_loss(cfg: &PredictorConfig, params: &ParamVector, batch: &[Example<'_>]) -> Result<TermGrad> {
    let partials: Vec<Partial> = batch
        .par_iter()
        .map(|ex| example_grad(cfg, params, ex))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut cells = 0;
    let mut grad = vec![0.0; params.len()];
    for p in &partials {
        sum += p.sum;
        cells += p.cells;
        for (g, v) in grad.iter_mut().zip(&p.grad) {
            *g += v;
        }
    }
    let value = mean_of(sum, cells);
    if cells > 0 {
        let scale = 1.0 / (2 * cells) as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(TermGrad { value, grad })
}

/// Student objective: supervised plus unsupervised term with unit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentLoss {
    pub supervised: LossValue,
    pub unsupervised: LossValue,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn student_loss(
    cfg: &PredictorConfig,
    params: &ParamVector,
    labeled: &[Example<'_>],
    unlabeled: &[Example<'_>],
) -> Result<StudentLoss> {
    let s = batch_loss(cfg, params, labeled)?;
    let u = batch_loss(cfg, params, unlabeled)?;
    let grad = s.grad.iter().zip(&u.grad).map(|(a, b)| a + b).collect();
    Ok(StudentLoss {
        total: s.value.loss + u.value.loss,
        supervised: s.value,
        unsupervised: u.value,
        grad,
    })
}

/// Restricts `labels` to `cells`; everything else becomes invalid.
pub fn restrict(labels: &MotionField, cells: &[Cell]) -> MotionField {
    let mut out = MotionField::zeros(labels.rows(), labels.cols());
    for &c in cells {
        out.set(c, labels.get(c));
        out.set_valid(c, labels.is_valid(c));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid(rows: usize, cols: usize) -> MotionField {
        MotionField::from_parts(rows, cols, vec![[0.0; 2]; rows * cols], vec![true; rows * cols])
            .unwrap()
    }

    #[test]
    fn identical_fields_have_zero_loss() {
        let mut m = valid(3, 3);
        m.set(Cell::new(1, 1), [2.0, -3.0]);
        assert_eq!(smooth_l1(&m, &m).unwrap().loss, 0.0);
    }

    #[test]
    fn quadratic_branch_closed_form() {
        let mut pred = valid(2, 2);
        pred.set(Cell::new(0, 1), [0.5, 0.0]);
        let mut target = MotionField::zeros(2, 2);
        target.set_valid(Cell::new(0, 1), true);
        let v = smooth_l1(&pred, &target).unwrap();
        assert_eq!(v.loss, 0.0625);
        assert_eq!(v.cells, 1);
    }

    #[test]
    fn linear_branch_above_delta() {
        let mut pred = valid(1, 1);
        pred.set(Cell::new(0, 0), [3.0, -2.0]);
        let target = valid(1, 1);
        assert_eq!(smooth_l1(&pred, &target).unwrap().loss, (2.5 + 1.5) / 2.0);
    }

    #[test]
    fn empty_index_is_flagged() {
        let v = smooth_l1(&valid(2, 2), &MotionField::zeros(2, 2)).unwrap();
        assert!(v.empty);
        assert_eq!(v.loss, 0.0);
    }

    #[test]
    fn target_outside_prediction_mask_errors() {
        let mut pred = valid(2, 2);
        pred.set_valid(Cell::new(1, 1), false);
        assert!(matches!(
            smooth_l1(&pred, &valid(2, 2)),
            Err(Error::LabelOutsideValid { row: 1, col: 1 })
        ));
    }
}
