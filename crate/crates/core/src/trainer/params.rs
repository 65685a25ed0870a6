//! Flat parameter storage, the Adam optimizer and the EMA teacher update.

use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl LayerSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters in one flat buffer plus the layer layout that slices it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: Vec<LayerSlot>,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<LayerSlot>) -> Self {
        let n = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        ParamVector {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<&LayerSlot> {
        self.layout.iter().find(|s| s.name == name)
    }

    pub fn layer(&self, name: &str) -> &[f64] {
        let s = self.slot(name).unwrap_or_else(|| panic!("no layer '{name}'"));
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout || self.values.len() != other.values.len() {
            return Err(Error::ShapeMismatch("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// Euclidean distance to `other`; layouts must match.
    pub fn distance(&self, other: &ParamVector) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    /// Stores values as a flat f32 array "params" and the layout under meta "params.layout".
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.push(
            "params",
            vec![self.values.len()],
            ArrayData::F32(self.values.iter().map(|&v| v as f32).collect()),
            None,
            None,
        )?;
        c.set_meta(
            "params.layout",
            serde_json::to_value(&self.layout).expect("layout serializes"),
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let layout: Vec<LayerSlot> = c
            .meta("params.layout")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::ShapeMismatch(format!("bad parameter layout: {e}")))?
            .ok_or_else(|| Error::ShapeMismatch("container has no parameter layout".into()))?;
        let values: Vec<f64> = c.require("params")?.as_f32()?.iter().map(|&v| v as f64).collect();
        let p = ParamVector::zeros(layout);
        if p.values.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: p.values.len(),
                right: values.len(),
            });
        }
        Ok(ParamVector { values, ..p })
    }
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &mut ParamVector, student: &ParamVector, alpha: f64) -> Result<()> {
    teacher.check_layout(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("EMA decay must lie in [0, 1], got {alpha}")));
    }
    for (t, s) in teacher.values.iter_mut().zip(&student.values) {
        *t = alpha * *t + (1.0 - alpha) * s;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamVector, grad: &[f64]) {
        assert_eq!(grad.len(), params.values.len(), "gradient length");
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(values: Vec<f64>) -> ParamVector {
        ParamVector {
            layout: vec![LayerSlot {
                name: "w".into(),
                offset: 0,
                shape: vec![values.len()],
            }],
            values,
        }
    }

    #[test]
    fn ema_endpoints() {
        let s = vec_of(vec![0.0, 2.0]);
        let mut t = vec_of(vec![1.0, -1.0]);
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.values, vec![1.0, -1.0]);
        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.values, s.values);
    }

    #[test]
    fn ema_single_step() {
        let mut t = vec_of(vec![1.0]);
        ema_update(&mut t, &vec_of(vec![0.0]), 0.999).unwrap();
        assert_eq!(t.values, vec![0.999]);
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut t = vec_of(vec![1.0]);
        assert!(ema_update(&mut t, &vec_of(vec![0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec_of(vec![1.0, -1.0]);
        let mut opt = Adam::new(AdamConfig::default(), 2);
        opt.update(&mut p, &[3.0, -0.5]);
        assert!((p.values[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.values[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn container_round_trip() {
        let p = vec_of(vec![0.5, -0.25, 3.0]);
        let c = p.to_container().unwrap();
        let back = ParamVector::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, p);
    }
}
