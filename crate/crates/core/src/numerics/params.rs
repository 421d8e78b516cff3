use std::fmt;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdaptiveMoment,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::AdaptiveMoment => f.write_str("adaptive-moment"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    moments: Option<(Tensor, Tensor)>,
}

/// Named parameters of one network, with optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    steps: u64,
}

/// Serialized form of a single parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            moments: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on the tape, as leaves when `trainable` and as
    /// constants otherwise. The returned handles are indexed like the set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Copy gradients for bound handles out of a backward pass.
    pub fn absorb_grads(&mut self, grads: &Gradients, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(Error::contract(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            p.grad = grads.wrt(v);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn moments(&self, idx: usize) -> Option<(&Tensor, &Tensor)> {
        self.params[idx].moments.as_ref().map(|(m, v)| (m, v))
    }

    /// Apply one update using the stored gradients.
    pub fn step(&mut self, lr: f64, kind: OptimizerKind) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for p in &mut self.params {
            match kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let (m, v) = p.moments.get_or_insert_with(|| {
                        (
                            Tensor::zeros(p.value.shape()),
                            Tensor::zeros(p.value.shape()),
                        )
                    });
                    let bc1 = 1.0 - ADAM_BETA1.powi(t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(t);
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for (i, (w, &g)) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .enumerate()
                    {
                        md[i] = ADAM_BETA1 * md[i] + (1.0 - ADAM_BETA1) * g;
                        vd[i] = ADAM_BETA2 * vd[i] + (1.0 - ADAM_BETA2) * g * g;
                        let mhat = md[i] / bc1;
                        let vhat = vd[i] / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(format!("optimizer update of {}", p.name)));
            }
        }
        Ok(())
    }

    /// Forget optimizer moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.steps = 0;
        for p in &mut self.params {
            p.moments = None;
        }
    }

    pub fn to_named(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Overwrite values from a dump; names and shapes must line up.
    pub fn load_named(&mut self, arrays: &[NamedArray]) -> Result<()> {
        if arrays.len() != self.params.len() {
            return Err(Error::dim(format!(
                "checkpoint has {} arrays, network has {}",
                arrays.len(),
                self.params.len()
            )));
        }
        for (p, a) in self.params.iter_mut().zip(arrays) {
            if p.name != a.name || p.value.shape() != a.shape.as_slice() {
                return Err(Error::dim(format!(
                    "checkpoint array {} {:?} does not match parameter {} {:?}",
                    a.name,
                    a.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(a.shape.clone(), a.data.clone())?;
        }
        self.reset_optimizer();
        Ok(())
    }

    /// Bitwise equality of parameter values.
    pub fn same_values(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.value.shape() == b.value.shape()
                    && a
                        .value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(values: &[f64], grads: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        ps.params[0].grad = Tensor::new(vec![grads.len()], grads.to_vec()).unwrap();
        ps
    }

    #[test]
    fn sgd_definition() {
        let mut ps = one(&[1.0, -2.0], &[0.5, -1.0]);
        ps.step(0.1, OptimizerKind::Sgd).unwrap();
        assert_eq!(ps.get(0).data(), &[1.0 - 0.1 * 0.5, -2.0 + 0.1 * 1.0]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdaptiveMoment] {
            let mut ps = one(&[1.0, -2.0], &[0.0, 0.0]);
            ps.step(0.1, kind).unwrap();
            assert_eq!(ps.get(0).data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn adaptive_moment_first_step_closed_form() {
        // From zero moments with bias correction: m_hat = g, v_hat = g^2,
        // so the update is lr * g / (|g| + eps).
        let g = [0.3, -4.0, 1e-3];
        let w = [1.0, 1.0, 1.0];
        let lr = 0.01;
        let mut ps = one(&w, &g);
        ps.step(lr, OptimizerKind::AdaptiveMoment).unwrap();
        for i in 0..3 {
            let expected = w[i] - lr * g[i] / (g[i].abs() + ADAM_EPS);
            assert!((ps.get(0).data()[i] - expected).abs() < 1e-15);
        }
        let (m, v) = ps.moments(0).unwrap();
        assert_eq!(m.shape(), ps.get(0).shape());
        assert_eq!(v.shape(), ps.get(0).shape());
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut ps = one(&[1.0], &[1.0]);
        assert!(ps.step(0.0, OptimizerKind::Sgd).is_err());
        assert!(ps.step(-1.0, OptimizerKind::AdaptiveMoment).is_err());
    }
}
