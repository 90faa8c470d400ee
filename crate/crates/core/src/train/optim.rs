use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradStore, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for Adam; unused by SGD.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: Optimizer,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        OptimizerState {
            kind,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. Every parameter must
    /// have a gradient of the same shape.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
            if g.shape() != p.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
            let updated: Vec<f64> = match self.kind {
                Optimizer::Sgd => p
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(w, d)| w - lr * d)
                    .collect(),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let m = self
                        .m
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    let v = self
                        .v
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.numel()]);
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    p.data()
                        .iter()
                        .zip(g.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                        .map(|((w, d), (mi, vi))| {
                            *mi = beta1 * *mi + (1.0 - beta1) * d;
                            *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                            let mhat = *mi / c1;
                            let vhat = *vi / c2;
                            w - lr * mhat / (vhat.sqrt() + eps)
                        })
                        .collect()
                }
            };
            *p = Tensor::new(p.shape().to_vec(), updated)?;
        }
        Ok(())
    }
}

/// Element-wise mean of several gradient stores with identical keys.
pub fn mean_gradients(stores: &[GradStore]) -> Result<GradStore> {
    let first = stores
        .first()
        .ok_or_else(|| Error::invalid("no gradients to average"))?;
    let k = stores.len() as f64;
    let mut out = GradStore::new();
    for (name, t) in first {
        let mut acc = t.data().to_vec();
        for s in &stores[1..] {
            let other = s
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if other.shape() != t.shape() {
                return Err(Error::shape("mean_gradients", t.shape(), other.shape()));
            }
            acc.iter_mut().zip(other.data()).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= k);
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), acc)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    fn bowl(params: &ParamStore) -> (f64, GradStore) {
        // f(w) = sum((w - 3)^2)
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let w = b.get("w").unwrap();
        let d = g.offset(w, -3.0);
        let sq = g.mul(d, d).unwrap();
        let l = g.sum_all(sq);
        g.backward(l).unwrap();
        (g.value(l).item().unwrap(), b.gradients(&g))
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        for lr in [1e-4, 1e-3, 1e-2] {
            let mut params = ParamStore::new();
            params
                .insert("w", Tensor::new([3], vec![0.0, 10.0, -4.0]).unwrap())
                .unwrap();
            let mut opt = OptimizerState::new(Optimizer::default());
            let (mut prev, _) = bowl(&params);
            for _ in 0..20 {
                let (_, grads) = bowl(&params);
                opt.step(&mut params, &grads, lr).unwrap();
                let (now, _) = bowl(&params);
                assert!(now < prev, "lr {lr}: {now} >= {prev}");
                prev = now;
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut params = ParamStore::new();
        params
            .insert("w", Tensor::new([2], vec![0.1, -7.25]).unwrap())
            .unwrap();
        let before = params.clone();
        let (_, grads) = bowl(&params);
        for kind in [Optimizer::Sgd, Optimizer::default()] {
            OptimizerState::new(kind)
                .step(&mut params, &grads, 0.0)
                .unwrap();
            assert_eq!(params, before);
        }
    }

    #[test]
    fn mean_of_two() {
        let mut a = GradStore::new();
        a.insert("w".into(), Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let mut b = GradStore::new();
        b.insert("w".into(), Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let m = mean_gradients(&[a, b]).unwrap();
        assert_eq!(m["w"].data(), [2.0, 0.0]);
    }
}
