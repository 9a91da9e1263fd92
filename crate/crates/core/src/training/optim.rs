//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug)]
pub struct AdamW {
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    /// Number of steps taken.
    pub t: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, weight_decay: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            vars,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        })
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Global L2 norm of the gradients present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.detach().sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update at learning rate `lr`; parameters without a gradient are untouched.
    /// Returns the pre-clip gradient norm when clipping is requested.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<Option<f64>> {
        let mut scale = 1.0;
        let mut norm = None;
        if let Some(c) = clip {
            let n = self.grad_norm(grads)?;
            if n > c {
                scale = c / (n + 1e-6);
            }
            norm = Some(n);
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g.detach() * scale)? } else { g.detach() };
            let m = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * self.weight_decay))?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(norm)
    }

    /// First and second moments by parameter name.
    pub fn moments(&self) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
        let names = self.vars.iter().map(|(n, _)| n.clone());
        (
            names.clone().zip(self.m.iter().cloned()).collect(),
            names.zip(self.v.iter().cloned()).collect(),
        )
    }

    pub fn restore(&mut self, m: &BTreeMap<String, Tensor>, v: &BTreeMap<String, Tensor>, t: usize) -> Result<()> {
        for (i, (name, _)) in self.vars.iter().enumerate() {
            let (Some(a), Some(b)) = (m.get(name), v.get(name)) else {
                return Err(crate::error::Error::MissingWeight(format!("optimizer moment for {name}")));
            };
            self.m[i] = a.clone();
            self.v[i] = b.clone();
        }
        self.t = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    /// Reference scalar AdamW written out step by step.
    fn reference(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            th = th * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
        }
        th
    }

    #[test]
    fn matches_scalar_reference() {
        let var = Var::from_tensor(&Tensor::new(&[2.0f32], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], 0.1).unwrap();
        let mut gs = Vec::new();
        for _ in 0..5 {
            // loss = w^3, gradient 3w^2
            let loss = var.as_tensor().powf(3.0).unwrap().sum_all().unwrap();
            let g = 3.0 * var.as_tensor().to_vec1::<f32>().unwrap()[0].powi(2) as f64;
            gs.push(g);
            opt.step(&loss.backward().unwrap(), 0.01, None).unwrap();
        }
        // Replay the observed gradients through the reference.
        let want = reference(2.0, &gs, 0.01, 0.1);
        let got = var.as_tensor().to_vec1::<f32>().unwrap()[0] as f64;
        assert!((got - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn parameters_without_gradient_are_untouched() {
        let a = Var::from_tensor(&Tensor::ones(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::ones(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("a".into(), a.clone()), ("b".into(), b.clone())], 0.5).unwrap();
        let loss = a.as_tensor().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1, Some(1.0)).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
        assert_ne!(a.as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }
}
