//! Supervised teacher training and the mean-teacher semi-supervised loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{bevmix, flip_map, flip_motion, flip_sequence, temporal_sample, FlipAxis, MixPair};
use crate::error::{Error, Result};
use crate::grid::{BevMap, BevSequence, MotionField};
use crate::ground::GroundConfig;
use crate::msrm::{refine, MsrmConfig};
use crate::synthworld::{ErrorAccumulator, EvalReport};

use super::loss::{student_loss, Example};
use super::params::{ema_update, Adam, AdamConfig, ParamVector};
use super::predictor::{predict, PredictorConfig};

/// A scene as seen by the trainer. Labeled samples carry `labels`;
/// unlabeled samples need `future` for label refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sequence: BevSequence,
    pub labels: Option<MotionField>,
    pub future: Option<BevMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub predictor: PredictorConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Random flips as weak augmentation of labeled samples.
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            predictor: PredictorConfig::default(),
            epochs: 20,
            batch_size: 4,
            adam: AdamConfig::default(),
            flip: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    /// Predictor, optimizer, batch size and seed; `train.epochs` is the teacher warm-up length.
    pub train: TrainConfig,
    pub ssl_epochs: usize,
    pub alpha: f64,
    /// Share of the labeled set that keeps its labels; the rest joins the unlabeled pool.
    pub labeled_fraction: f64,
    pub msrm: MsrmConfig,
    pub ground: GroundConfig,
    pub temporal_prob: f64,
    pub bevmix_prob: f64,
    /// Student iterations per epoch; defaults to one pass over the larger set.
    pub steps_per_epoch: Option<usize>,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            train: TrainConfig::default(),
            ssl_epochs: 10,
            alpha: 0.999,
            labeled_fraction: 1.0,
            msrm: MsrmConfig::default(),
            ground: GroundConfig::default(),
            temporal_prob: 0.5,
            bevmix_prob: 0.5,
            steps_per_epoch: None,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "labeled fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        for p in [self.temporal_prob, self.bevmix_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("probability {p} outside [0, 1]")));
            }
        }
        validate_train(&self.train)
    }
}

fn validate_train(cfg: &TrainConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    cfg.predictor.validate()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Teacher,
    Ssl,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean supervised loss over the epoch's iterations.
    pub loss_s: f64,
    pub loss_u: f64,
    pub loss: f64,
    /// Refined pseudo-label cells available this epoch.
    pub pseudo_cells: usize,
    /// Evaluation of the model used for inference (the teacher).
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub teacher: ParamVector,
    pub student: ParamVector,
    pub history: Vec<EpochRecord>,
}

/// Endless shuffled passes over the labeled set, each draw with its flip axis.
struct LabeledStream {
    order: Vec<usize>,
    pos: usize,
    flip: bool,
    rng: ChaCha8Rng,
}

impl LabeledStream {
    fn new(n: usize, flip: bool, seed: u64) -> Self {
        LabeledStream {
            order: (0..n).collect(),
            pos: n,
            flip,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<(usize, FlipAxis)> {
        let mut out = Vec::with_capacity(size);
        if self.order.is_empty() {
            return out;
        }
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let axis = if self.flip {
                FlipAxis::random(&mut self.rng)
            } else {
                FlipAxis::None
            };
            out.push((self.order[self.pos], axis));
            self.pos += 1;
        }
        out
    }
}

/// Optimizer, data order and parameters of the model being trained by gradient steps.
struct Learner<'a> {
    cfg: TrainConfig,
    labeled: Vec<(&'a BevSequence, &'a MotionField)>,
    stream: LabeledStream,
    adam: Adam,
    params: ParamVector,
}

struct StepLoss {
    supervised: f64,
    unsupervised: f64,
    total: f64,
}

impl<'a> Learner<'a> {
    fn new(cfg: TrainConfig, labeled: Vec<(&'a BevSequence, &'a MotionField)>) -> Self {
        let params = cfg.predictor.init(cfg.seed);
        Learner {
            stream: LabeledStream::new(labeled.len(), cfg.flip, cfg.seed ^ 0x5eed_1abe),
            adam: Adam::new(cfg.adam, params.len()),
            labeled,
            params,
            cfg,
        }
    }

    fn labeled_batch(&mut self) -> Vec<(BevSequence, MotionField)> {
        let picks = self.stream.next_batch(self.cfg.batch_size);
        picks
            .into_iter()
            .map(|(i, axis)| {
                let (s, m) = self.labeled[i];
                (flip_sequence(s, axis), flip_motion(m, axis))
            })
            .collect()
    }

    fn step(&mut self, unlabeled: &[(BevSequence, MotionField)]) -> Result<StepLoss> {
        let labeled = self.labeled_batch();
        let ls: Vec<Example<'_>> = labeled
            .iter()
            .map(|(s, m)| Example {
                sequence: s,
                target: m,
            })
            .collect();
        let us: Vec<Example<'_>> = unlabeled
            .iter()
            .map(|(s, m)| Example {
                sequence: s,
                target: m,
            })
            .collect();
        let out = student_loss(&self.cfg.predictor, &self.params, &ls, &us)?;
        if !out.total.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite loss {} after {} optimizer steps",
                out.total,
                self.adam.steps()
            )));
        }
        self.adam.update(&mut self.params, &out.grad);
        Ok(StepLoss {
            supervised: out.supervised.loss,
            unsupervised: out.unsupervised.loss,
            total: out.total,
        })
    }

    fn iterations_per_pass(&self) -> usize {
        self.labeled.len().div_ceil(self.cfg.batch_size)
    }
}

fn labeled_pairs(samples: &[Sample]) -> Result<Vec<(&BevSequence, &MotionField)>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.labels
                .as_ref()
                .map(|m| (&s.sequence, m))
                .ok_or_else(|| Error::InvalidConfig(format!("labeled sample {i} has no labels")))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn teacher_phase(
    learner: &mut Learner<'_>,
    epochs: usize,
    eval: Option<&[Sample]>,
    history: &mut Vec<EpochRecord>,
) -> Result<()> {
    for epoch in 0..epochs {
        let mut losses = Vec::new();
        for _ in 0..learner.iterations_per_pass() {
            losses.push(learner.step(&[])?.supervised);
        }
        let loss = mean(&losses);
        log::info!("teacher epoch {epoch}: loss {loss:.6}");
        history.push(EpochRecord {
            phase: Phase::Teacher,
            epoch,
            loss_s: loss,
            loss_u: 0.0,
            loss,
            pseudo_cells: 0,
            eval: eval
                .map(|e| evaluate_params(&learner.cfg.predictor, &learner.params, e))
                .transpose()?,
        });
    }
    Ok(())
}

/// Supervised training on labeled samples with random-flip augmentation.
pub fn train_teacher(labeled: &[Sample], cfg: &TrainConfig, eval: Option<&[Sample]>) -> Result<TrainOutcome> {
    validate_train(cfg)?;
    if labeled.is_empty() {
        return Err(Error::InvalidConfig("no labeled samples".into()));
    }
    let mut learner = Learner::new(*cfg, labeled_pairs(labeled)?);
    let mut history = Vec::new();
    teacher_phase(&mut learner, cfg.epochs, eval, &mut history)?;
    Ok(TrainOutcome {
        teacher: learner.params.clone(),
        student: learner.params,
        history,
    })
}

/// Teacher predictions on weakly flipped inputs, refined against the
/// (equally flipped) future frame and mapped back to the original frame.
pub fn pseudo_labels(
    predictor: &PredictorConfig,
    teacher: &ParamVector,
    sequence: &BevSequence,
    future: &BevMap,
    axis: FlipAxis,
    msrm: &MsrmConfig,
) -> Result<MotionField> {
    let seq = flip_sequence(sequence, axis);
    let fut = flip_map(future, axis);
    let pseudo = predict(predictor, teacher, &seq)?;
    let rows = seq.spec().rows();
    let cols = seq.spec().cols();
    let refined = refine(&pseudo, seq.current(), &fut, msrm)?;
    Ok(flip_motion(&refined.to_motion_field(rows, cols), axis))
}

/// Teacher warm-up on the labeled set, then epochs of fresh pseudo labels
/// followed by student steps on supervised plus unsupervised loss with an
/// EMA teacher update after every step.
pub fn train_ssl(
    labeled: &[Sample],
    unlabeled: &[Sample],
    cfg: &SslConfig,
    eval: Option<&[Sample]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::InvalidConfig("no labeled samples".into()));
    }
    let keep = if cfg.labeled_fraction >= 1.0 {
        labeled.len()
    } else {
        ((cfg.labeled_fraction * labeled.len() as f64).round() as usize).clamp(1, labeled.len())
    };
    let pool: Vec<&Sample> = unlabeled.iter().chain(&labeled[keep..]).collect();
    let futures: Vec<&BevMap> = pool
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.future
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig(format!("unlabeled sample {i} has no future frame")))
        })
        .collect::<Result<_>>()?;

    let tc = cfg.train;
    let mut learner = Learner::new(tc, labeled_pairs(&labeled[..keep])?);
    let mut history = Vec::new();
    teacher_phase(&mut learner, tc.epochs, eval, &mut history)?;
    let mut teacher = learner.params.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0a11_ab1e);
    let n_u = pool.len();
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| n_u.max(keep).div_ceil(tc.batch_size));
    for epoch in 0..cfg.ssl_epochs {
        let axes: Vec<FlipAxis> = (0..n_u)
            .map(|_| if tc.flip { FlipAxis::random(&mut rng) } else { FlipAxis::None })
            .collect();
        let labels: Vec<MotionField> = pool
            .par_iter()
            .zip(&futures)
            .zip(&axes)
            .map(|((s, f), &axis)| pseudo_labels(&tc.predictor, &teacher, &s.sequence, f, axis, &cfg.msrm))
            .collect::<Result<_>>()?;
        let pseudo_cells: usize = labels.iter().map(|m| m.valid_count()).sum();
        if n_u > 0 && pseudo_cells == 0 {
            log::warn!("epoch {epoch}: every refined label set is empty; training on supervised loss only");
        }

        let mut order: Vec<usize> = (0..n_u).collect();
        order.shuffle(&mut rng);
        let (mut ls, mut lu, mut lt) = (Vec::new(), Vec::new(), Vec::new());
        for it in 0..steps {
            let mut batch = Vec::new();
            if n_u > 0 {
                for j in 0..tc.batch_size {
                    let i = order[(it * tc.batch_size + j) % n_u];
                    batch.push(strong_augment(i, &pool, &labels, cfg, &mut rng)?);
                }
            }
            let loss = learner.step(&batch)?;
            ema_update(&mut teacher, &learner.params, cfg.alpha)?;
            ls.push(loss.supervised);
            lu.push(loss.unsupervised);
            lt.push(loss.total);
        }
        let record = EpochRecord {
            phase: Phase::Ssl,
            epoch,
            loss_s: mean(&ls),
            loss_u: mean(&lu),
            loss: mean(&lt),
            pseudo_cells,
            eval: eval
                .map(|e| evaluate_params(&tc.predictor, &teacher, e))
                .transpose()?,
        };
        log::info!(
            "ssl epoch {epoch}: loss_s {:.6} loss_u {:.6} pseudo cells {pseudo_cells}",
            record.loss_s,
            record.loss_u
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        teacher,
        student: learner.params,
        history,
    })
}

/// BEVMix with a random partner as foreground, then stride-2 temporal
/// sampling, each applied with its configured probability.
fn strong_augment(
    i: usize,
    pool: &[&Sample],
    labels: &[MotionField],
    cfg: &SslConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(BevSequence, MotionField)> {
    let mut seq = pool[i].sequence.clone();
    let mut lab = labels[i].clone();
    if pool.len() > 1 && rng.gen_bool(cfg.bevmix_prob) {
        let mut j = rng.gen_range(0..pool.len() - 1);
        if j >= i {
            j += 1;
        }
        let mixed = bevmix(
            MixPair {
                foreground: (&pool[j].sequence, &labels[j]),
                background: (&seq, &lab),
            },
            &cfg.ground,
        )?;
        seq = mixed.sequence;
        lab = mixed.labels;
    }
    if seq.len() >= 3 && seq.len() % 2 == 1 && rng.gen_bool(cfg.temporal_prob) {
        (seq, lab) = temporal_sample(&seq, &lab)?;
    }
    Ok((seq, lab))
}

/// Speed-bucketed errors of `params` pooled over all labeled cells of `samples`.
pub fn evaluate_params(cfg: &PredictorConfig, params: &ParamVector, samples: &[Sample]) -> Result<EvalReport> {
    let preds: Vec<MotionField> = samples
        .par_iter()
        .map(|s| predict(cfg, params, &s.sequence))
        .collect::<Result<_>>()?;
    let mut acc = ErrorAccumulator::default();
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("evaluation sample has no ground truth".into()))?;
        acc.add(p, gt, s.sequence.spec())?;
    }
    Ok(acc.report())
}
