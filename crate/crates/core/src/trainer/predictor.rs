//! Three-layer same-padded convolutional motion regressor with hand-written
//! reverse-mode gradients.
//!
//! Activations are stored channel-major (`[channel][row][col]`). The input
//! has one channel per (frame, layer) pair, channel `t * C + l`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BevSequence, MotionField};

use super::params::{LayerSlot, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    /// Frames times height layers.
    pub in_channels: usize,
    pub hidden: [usize; 2],
    /// Odd kernel side lengths of the three convolutions.
    pub kernels: [usize; 3],
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            in_channels: 5 * 13,
            hidden: [16, 16],
            kernels: [3, 3, 1],
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvShape {
    ci: usize,
    co: usize,
    k: usize,
}

impl PredictorConfig {
    pub fn for_sequence(seq: &BevSequence) -> Self {
        PredictorConfig {
            in_channels: seq.len() * seq.spec().layers(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidConfig("predictor widths must be positive".into()));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::InvalidConfig(format!(
                "kernel sizes must be odd for same padding, got {:?}",
                self.kernels
            )));
        }
        Ok(())
    }

    fn convs(&self) -> [ConvShape; 3] {
        let widths = [self.in_channels, self.hidden[0], self.hidden[1], 2];
        std::array::from_fn(|i| ConvShape {
            ci: widths[i],
            co: widths[i + 1],
            k: self.kernels[i],
        })
    }

    pub fn layout(&self) -> Vec<LayerSlot> {
        let mut offset = 0;
        let mut slots = Vec::new();
        for (i, c) in self.convs().iter().enumerate() {
            for (name, shape) in [
                (format!("conv{}.weight", i + 1), vec![c.co, c.ci, c.k, c.k]),
                (format!("conv{}.bias", i + 1), vec![c.co]),
            ] {
                let slot = LayerSlot {
                    name,
                    offset,
                    shape,
                };
                offset += slot.len();
                slots.push(slot);
            }
        }
        slots
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.len()).sum()
    }

    /// He-normal weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamVector::zeros(self.layout());
        for (i, c) in self.convs().iter().enumerate() {
            let slot = p.slot(&format!("conv{}.weight", i + 1)).unwrap().clone();
            let std = (2.0 / (c.ci * c.k * c.k) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut p.values[slot.offset..slot.offset + slot.len()] {
                *v = normal.sample(&mut rng);
            }
        }
        p
    }
}

/// Occupancy of every frame and layer as a `[T*C][H][W]` f64 tensor.
pub fn encode_input(seq: &BevSequence) -> Vec<f64> {
    let spec = seq.spec();
    let (h, w, c) = (spec.rows(), spec.cols(), spec.layers());
    let hw = h * w;
    let mut x = vec![0.0; seq.len() * c * hw];
    for (t, frame) in seq.frames().iter().enumerate() {
        let raw = frame.as_raw();
        for cell in 0..hw {
            for l in 0..c {
                if raw[cell * c + l] != 0 {
                    x[(t * c + l) * hw + cell] = 1.0;
                }
            }
        }
    }
    x
}

/// Column range `[x0, x1)` of output pixels whose input `x + d` is in bounds.
#[inline]
fn span(d: isize, w: usize) -> (usize, usize) {
    let x0 = (-d).max(0) as usize;
    let x1 = (w as isize - d).clamp(0, w as isize) as usize;
    (x0, x1.max(x0))
}

fn conv_forward(input: &[f64], s: ConvShape, h: usize, w: usize, wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let pad = (s.k / 2) as isize;
    let mut out = vec![0.0; s.co * hw];
    for o in 0..s.co {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(bias[o]);
        for i in 0..s.ci {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..s.k {
                let dy = ky as isize - pad;
                for kx in 0..s.k {
                    let dx = kx as isize - pad;
                    let wv = wt[((o * s.ci + i) * s.k + ky) * s.k + kx];
                    let (x0, x1) = span(dx, w);
                    let (y0, y1) = span(dy, h);
                    for y in y0..y1 {
                        let src = ((y as isize + dy) as usize) * w;
                        let dst = &mut out_o[y * w + x0..y * w + x1];
                        let src = &in_i[(src as isize + x0 as isize + dx) as usize..][..x1 - x0];
                        for (d, v) in dst.iter_mut().zip(src) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    grad_out: &[f64],
    s: ConvShape,
    h: usize,
    w: usize,
    wt: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let hw = h * w;
    let pad = (s.k / 2) as isize;
    let mut grad_in = want_input_grad.then(|| vec![0.0; s.ci * hw]);
    for o in 0..s.co {
        let go = &grad_out[o * hw..(o + 1) * hw];
        grad_b[o] += go.iter().sum::<f64>();
        for i in 0..s.ci {
            let in_i = &input[i * hw..(i + 1) * hw];
            for ky in 0..s.k {
                let dy = ky as isize - pad;
                for kx in 0..s.k {
                    let dx = kx as isize - pad;
                    let widx = ((o * s.ci + i) * s.k + ky) * s.k + kx;
                    let wv = wt[widx];
                    let (x0, x1) = span(dx, w);
                    let (y0, y1) = span(dy, h);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = ((y as isize + dy) * w as isize + x0 as isize + dx) as usize;
                        let g = &go[y * w + x0..y * w + x1];
                        let x = &in_i[src..src + (x1 - x0)];
                        acc += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_mut() {
                            let gi = &mut gi[i * hw + src..i * hw + src + (x1 - x0)];
                            for (d, v) in gi.iter_mut().zip(g) {
                                *d += wv * v;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
    grad_in
}

/// Intermediate activations kept for the backward pass.
pub struct Activations {
    h: usize,
    w: usize,
    input: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    /// `[2][H][W]` output: X then Y displacement in cells.
    pub output: Vec<f64>,
}

fn check(cfg: &PredictorConfig, params: &ParamVector, input_len: usize, hw: usize) -> Result<()> {
    if params.layout != cfg.layout() {
        return Err(Error::ShapeMismatch("parameters do not match predictor layout".into()));
    }
    if input_len != cfg.in_channels * hw {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, predictor expects {}",
            input_len / hw.max(1),
            cfg.in_channels
        )));
    }
    Ok(())
}

pub fn forward(
    cfg: &PredictorConfig,
    params: &ParamVector,
    input: Vec<f64>,
    h: usize,
    w: usize,
) -> Result<Activations> {
    check(cfg, params, input.len(), h * w)?;
    let [c1, c2, c3] = cfg.convs();
    let relu = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.max(0.0));
    let mut a1 = conv_forward(&input, c1, h, w, params.layer("conv1.weight"), params.layer("conv1.bias"));
    relu(&mut a1);
    let mut a2 = conv_forward(&a1, c2, h, w, params.layer("conv2.weight"), params.layer("conv2.bias"));
    relu(&mut a2);
    let output = conv_forward(&a2, c3, h, w, params.layer("conv3.weight"), params.layer("conv3.bias"));
    Ok(Activations {
        h,
        w,
        input,
        a1,
        a2,
        output,
    })
}

/// Parameter gradient given the gradient of the loss w.r.t. the output.
pub fn backward(
    cfg: &PredictorConfig,
    params: &ParamVector,
    acts: &Activations,
    grad_output: &[f64],
) -> Vec<f64> {
    let [c1, c2, c3] = cfg.convs();
    let (h, w) = (acts.h, acts.w);
    let mut grad = vec![0.0; params.len()];
    let slot = |name: &str| params.slot(name).unwrap().clone();
    let (w1, b1, w2, b2, w3, b3) = (
        slot("conv1.weight"),
        slot("conv1.bias"),
        slot("conv2.weight"),
        slot("conv2.bias"),
        slot("conv3.weight"),
        slot("conv3.bias"),
    );
    let split = |wslot: &LayerSlot, bslot: &LayerSlot| -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; wslot.len()], vec![0.0; bslot.len()])
    };
    let (mut gw3, mut gb3) = split(&w3, &b3);
    let mut g2 = conv_backward(&acts.a2, grad_output, c3, h, w, params.layer("conv3.weight"), &mut gw3, &mut gb3, true)
        .unwrap();
    for (g, a) in g2.iter_mut().zip(&acts.a2) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let (mut gw2, mut gb2) = split(&w2, &b2);
    let mut g1 = conv_backward(&acts.a1, &g2, c2, h, w, params.layer("conv2.weight"), &mut gw2, &mut gb2, true)
        .unwrap();
    for (g, a) in g1.iter_mut().zip(&acts.a1) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
    let (mut gw1, mut gb1) = split(&w1, &b1);
    conv_backward(&acts.input, &g1, c1, h, w, params.layer("conv1.weight"), &mut gw1, &mut gb1, false);
    for (s, g) in [(w1, gw1), (b1, gb1), (w2, gw2), (b2, gb2), (w3, gw3), (b3, gb3)] {
        grad[s.offset..s.offset + s.len()].copy_from_slice(&g);
    }
    grad
}

/// Motion field from an output tensor; validity follows the current frame.
pub fn to_motion(acts: &Activations, seq: &BevSequence) -> MotionField {
    let hw = acts.h * acts.w;
    let mut m = MotionField::for_map(seq.current());
    for (i, d) in m.displacements_mut().iter_mut().enumerate() {
        *d = [acts.output[i], acts.output[hw + i]];
    }
    m
}

pub fn predict(cfg: &PredictorConfig, params: &ParamVector, seq: &BevSequence) -> Result<MotionField> {
    let spec = seq.spec();
    let acts = forward(cfg, params, encode_input(seq), spec.rows(), spec.cols())?;
    Ok(to_motion(&acts, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BevMap, GridSpec};

    fn small() -> (PredictorConfig, BevSequence) {
        let spec = GridSpec::new([0.0, 6.0], [0.0, 5.0], [0.0, 2.0], [1.0, 1.0, 1.0]).unwrap();
        let mut frames = Vec::new();
        for t in 0..3 {
            let mut m = BevMap::empty(spec, t);
            m.set(1 + t as usize, 2, 0, true);
            m.set(4, 4, 1, true);
            frames.push(m);
        }
        let seq = BevSequence::new(frames, 1.0).unwrap();
        let cfg = PredictorConfig {
            in_channels: 6,
            hidden: [4, 3],
            kernels: [3, 3, 1],
        };
        (cfg, seq)
    }

    #[test]
    fn zero_params_predict_zero() {
        let (cfg, seq) = small();
        let p = ParamVector::zeros(cfg.layout());
        let m = predict(&cfg, &p, &seq).unwrap();
        assert!(m.displacements().iter().all(|d| *d == [0.0, 0.0]));
        assert_eq!(m.valid_count(), 2);
    }

    #[test]
    fn forward_is_deterministic() {
        let (cfg, seq) = small();
        let p = cfg.init(4);
        assert_eq!(predict(&cfg, &p, &seq).unwrap(), predict(&cfg, &p, &seq).unwrap());
    }

    #[test]
    fn layout_counts() {
        let cfg = PredictorConfig {
            in_channels: 6,
            hidden: [4, 3],
            kernels: [3, 3, 1],
        };
        assert_eq!(cfg.param_count(), 6 * 4 * 9 + 4 + 4 * 3 * 9 + 3 + 3 * 2 + 2);
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let (mut cfg, seq) = small();
        let p = cfg.init(0);
        cfg.in_channels = 7;
        assert!(predict(&cfg, &p, &seq).is_err());
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 1 -> 1 channel, 3x3 kernel on a 4x5 image, against a textbook loop.
        let (h, w) = (4, 5);
        let input: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let s = ConvShape { ci: 1, co: 1, k: 3 };
        let out = conv_forward(&input, s, h, w, &wt, &[0.5]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.5;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (y + ky - 1, x + kx - 1);
                        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                            acc += wt[(ky * 3 + kx) as usize] * input[(yy * w as isize + xx) as usize];
                        }
                    }
                }
                assert!((out[(y * w as isize + x) as usize] - acc).abs() < 1e-12);
            }
        }
    }
}
