//! Adam with inspectable moments, so optimizer state can be checkpointed.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(1e-4)
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            betas: [0.9, 0.99],
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    /// `vars` are named so moments can be saved and restored.
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<_>>()?;
        Ok(Self { cfg, step: 0, slots })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from `grads`; variables without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let [b1, b2] = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.m = ((&slot.m * b1)? + (g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let delta = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            slot.var.set(&slot.var.as_tensor().sub(&(delta * self.cfg.lr)?)?)?;
        }
        Ok(())
    }

    /// `{prefix}step`, `{prefix}m.{name}` and `{prefix}v.{name}`.
    pub fn state_tensors(&self, prefix: &str) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        let dev = self.slots.first().map(|s| s.var.device().clone()).unwrap_or(candle_core::Device::Cpu);
        out.insert(format!("{prefix}step"), Tensor::new(&[self.step as f64], &dev)?);
        for s in &self.slots {
            out.insert(format!("{prefix}m.{}", s.name), s.m.clone());
            out.insert(format!("{prefix}v.{}", s.name), s.v.clone());
        }
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        let step = tensors
            .get(&format!("{prefix}step"))
            .ok_or_else(|| Error::Shape(format!("missing {prefix}step")))?;
        self.step = step.to_vec1::<f64>()?[0] as u64;
        for s in &mut self.slots {
            for (which, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let key = format!("{prefix}{which}.{}", s.name);
                let t = tensors.get(&key).ok_or_else(|| Error::Shape(format!("missing {key}")))?;
                if t.dims() != dst.dims() {
                    return Err(Error::Shape(format!("{key}: {:?} vs {:?}", t.dims(), dst.dims())));
                }
                *dst = t.to_dtype(dst.dtype())?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let v = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), v.clone())], AdamConfig::with_lr(0.1)).unwrap();
        let loss = (v.as_tensor() * Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss.backward().unwrap()).unwrap();
        let got = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn quadratic_converges() {
        let v = Var::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let target = Tensor::new(&[1.0f64, 2.0, -1.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("w".into(), v.clone())], AdamConfig::with_lr(0.05)).unwrap();
        for _ in 0..500 {
            let loss = (v.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap()).unwrap();
        }
        let got = v.as_tensor().to_vec1::<f64>().unwrap();
        assert!(got.iter().zip([1.0, 2.0, -1.0]).all(|(a, b)| (a - b).abs() < 1e-2), "{got:?}");
    }

    #[test]
    fn state_round_trip() {
        let v = Var::ones(2, DType::F64, &Device::Cpu).unwrap();
        let mut a = Adam::new(vec![("w".into(), v.clone())], AdamConfig::with_lr(0.1)).unwrap();
        let loss = v.as_tensor().sqr().unwrap().sum_all().unwrap();
        a.step(&loss.backward().unwrap()).unwrap();
        let st = a.state_tensors("opt.").unwrap();
        let mut b = Adam::new(vec![("w".into(), v.clone())], AdamConfig::with_lr(0.1)).unwrap();
        b.load_state(&st, "opt.").unwrap();
        assert_eq!(b.steps(), 1);
        assert_eq!(b.state_tensors("opt.").unwrap()["opt.m.w"].to_vec1::<f64>().unwrap(), st["opt.m.w"].to_vec1::<f64>().unwrap());
    }
}
