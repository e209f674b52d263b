use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

/// Per-parameter optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    /// Multiplier on the optimiser learning rate.
    pub lr_scale: f64,
    pub l1: f64,
    /// Coefficient of `½·l2·‖w‖²`.
    pub l2: f64,
    pub trainable: bool,
}

impl Default for ParamGroup {
    fn default() -> Self {
        Self { lr_scale: 1.0, l1: 0.0, l2: 0.0, trainable: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
    pub group: ParamGroup,
}

impl Param {
    fn new(value: Tensor, group: ParamGroup) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self { grad: zeros.clone(), m: zeros.clone(), v: zeros, value, group }
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }
}

/// Named parameters with gradient buffers and Adam state.
///
/// Iteration order is the lexicographic order of names, which fixes the
/// order of every reduction over parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) {
        self.params.insert(name.into(), Param::new(value, group));
    }

    /// Restores a parameter including optimiser moments (checkpoint loading).
    pub fn insert_with_state(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        m: Tensor,
        v: Tensor,
        group: ParamGroup,
    ) -> Result<()> {
        value.check_same_shape(&m)?;
        value.check_same_shape(&v)?;
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.into(), Param { value, grad, m, v, group });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.param_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        self.param_mut(name)?.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(|p| p.grad.fill(0.0));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.group.trainable = trainable;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Adds the L1/L2 penalties of trainable parameters to their gradients
    /// and returns the penalty value.
    pub fn apply_weight_decay(&mut self) -> f64 {
        let mut penalty = 0.0;
        for p in self.params.values_mut() {
            let ParamGroup { l1, l2, trainable, .. } = p.group;
            if !trainable || (l1 == 0.0 && l2 == 0.0) {
                continue;
            }
            for (g, &w) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
                penalty += l1 * w.abs() + 0.5 * l2 * w * w;
                // subgradient 0 at w = 0
                let sign = if w == 0.0 { 0.0 } else { w.signum() };
                *g += l1 * sign + l2 * w;
            }
        }
        penalty
    }

    /// SHA-256 over the names, shapes and value bits of parameters whose
    /// names start with any of `prefixes` (all parameters if empty).
    pub fn checksum(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if !prefixes.is_empty() && !prefixes.iter().any(|pre| name.starts_with(pre)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies parameter values from `other` (same names and shapes).
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, p) in self.params.iter_mut() {
            let src = other.value(name)?;
            p.value.check_same_shape(src)?;
            p.value.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One bias-corrected Adam update of every trainable parameter; increments
    /// the step counter. Frozen parameters are left untouched.
    pub fn step(&self, params: &mut ParamSet) -> Result<()> {
        for (name, p) in params.params.iter() {
            if p.group.trainable && !p.grad.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {name}")));
            }
        }
        params.step += 1;
        let t = params.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in params.params.values_mut() {
            if !p.group.trainable {
                continue;
            }
            let lr = self.lr * p.group.lr_scale;
            let vals = p.value.data_mut();
            let m = p.m.data_mut();
            let v = p.v.data_mut();
            for (i, &g) in p.grad.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                vals[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1−decay)·live` over every parameter of `shadow`.
pub fn ema_update(shadow: &mut ParamSet, live: &ParamSet, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::Contract(format!("EMA decay must be in [0, 1), got {decay}")));
    }
    for (name, p) in shadow.params.iter_mut() {
        let src = live.value(name)?;
        p.value.check_same_shape(src)?;
        for (s, &l) in p.value.data_mut().iter_mut().zip(src.data()) {
            *s = decay * *s + (1.0 - decay) * l;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::vector(vec![v]), ParamGroup::default());
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_set(1.5);
        Adam::new(0.1).step(&mut ps).unwrap();
        assert_eq!(ps.value("p").unwrap().data(), &[1.5]);
        assert_eq!(ps.step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_set(0.0);
        ps.accumulate_grad("p", &Tensor::vector(vec![1.0])).unwrap();
        Adam::new(0.1).step(&mut ps).unwrap();
        // m̂ = v̂ = 1 after bias correction
        let moved = ps.value("p").unwrap().data()[0];
        assert!((moved + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = scalar_set(0.3);
        let mut b = scalar_set(0.3);
        for i in 0..10 {
            let g = Tensor::vector(vec![(i as f64).sin()]);
            for ps in [&mut a, &mut b] {
                ps.zero_grad();
                ps.accumulate_grad("p", &g).unwrap();
                Adam::new(0.01).step(ps).unwrap();
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = scalar_set(0.0);
        ps.accumulate_grad("p", &Tensor::vector(vec![f64::NAN])).unwrap();
        let err = Adam::new(0.1).step(&mut ps).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains('p')));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut ps = scalar_set(2.0);
        ps.set_trainable("p", false);
        ps.accumulate_grad("p", &Tensor::vector(vec![1.0])).unwrap();
        Adam::new(0.1).step(&mut ps).unwrap();
        assert_eq!(ps.value("p").unwrap().data(), &[2.0]);
    }

    #[test]
    fn ema_fixtures() {
        let mut shadow = scalar_set(0.0);
        let live = scalar_set(2.0);
        ema_update(&mut shadow, &live, 0.5).unwrap();
        assert_eq!(shadow.value("p").unwrap().data(), &[1.0]);
        ema_update(&mut shadow, &live, 0.0).unwrap();
        assert_eq!(shadow.value("p").unwrap().data(), &[2.0]);

        let mut shadow = scalar_set(0.0);
        let mut gap = 2.0;
        for _ in 0..50 {
            ema_update(&mut shadow, &live, 0.9).unwrap();
            let new_gap = 2.0 - shadow.value("p").unwrap().data()[0];
            assert!((new_gap - 0.9 * gap).abs() < 1e-12);
            gap = new_gap;
        }
        assert!(ema_update(&mut shadow, &live, 1.0).is_err());
    }

    #[test]
    fn weight_decay_gradient() {
        let mut ps = ParamSet::new();
        let group = ParamGroup { l1: 0.1, l2: 0.5, ..Default::default() };
        ps.insert("w", Tensor::vector(vec![2.0, -1.0, 0.0]), group);
        let pen = ps.apply_weight_decay();
        assert!((pen - (0.1 * 3.0 + 0.25 * 5.0)).abs() < 1e-12);
        assert_eq!(ps.grad("w").unwrap().data(), &[0.1 + 1.0, -0.1 - 0.5, 0.0]);
    }

    #[test]
    fn checksum_tracks_values() {
        let a = scalar_set(1.0);
        let b = scalar_set(1.0);
        let c = scalar_set(1.0 + 1e-15);
        assert_eq!(a.checksum(&[]), b.checksum(&[]));
        assert_ne!(a.checksum(&[]), c.checksum(&[]));
        assert_eq!(a.checksum(&["q"]), scalar_set(5.0).checksum(&["q"]));
    }
}
