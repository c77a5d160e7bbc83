//! Minimal parameter containers and optimizer shared by the recurrent nets.
//!
//! Parameters are a list of named dense tensors stored row-major, so they
//! serialize as flat arrays and gradients can reuse the same layout.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// Uniform in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(name: &str, shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(name, shape);
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..=scale));
        t
    }

    pub fn mat(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("2-d tensor")
    }

    pub fn mat_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("2-d tensor")
    }

    pub fn vec(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[..])
    }

    pub fn vec_mut(&mut self) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|t| Tensor::zeros(&t.name, &t.shape)).collect() }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fill(&mut self, v: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x = v));
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| &t.data).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Flat view across tensors, for probes.
    pub fn get(&self, mut i: usize) -> f64 {
        for t in &self.tensors {
            if i < t.data.len() {
                return t.data[i];
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for t in &mut self.tensors {
            if i < t.data.len() {
                t.data[i] = v;
                return;
            }
            i -= t.data.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Check that `other` has this set's names and shapes.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        let same = self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name && a.shape == b.shape && b.data.len() == b.shape.iter().product::<usize>()
            });
        if same {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter layout does not match the architecture".into()))
        }
    }

    /// Rescale so the global norm is at most `max`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let n = self.norm();
        if n > max {
            self.scale(max / n);
        }
        n
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    /// Decoupled decay applied to every parameter each step.
    pub weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in
            params.tensors.iter_mut().zip(&grads.tensors).zip(&mut self.m.tensors).zip(&mut self.v.tensors)
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] -=
                    self.lr * ((m.data[i] / c1) / ((v.data[i] / c2).sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamSet { tensors: vec![Tensor { name: "x".into(), shape: vec![2], data: vec![3.0, -2.0] }] };
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let mut g = p.zeros_like();
            g.tensors[0].data = p.tensors[0].data.iter().map(|x| 2.0 * (x - 1.0)).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.tensors[0].data.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn flat_indexing_spans_tensors() {
        let mut p = ParamSet { tensors: vec![Tensor::zeros("a", &[2, 2]), Tensor::zeros("b", &[3])] };
        p.set(5, 7.0);
        assert_eq!(p.tensors[1].data[1], 7.0);
        assert_eq!(p.get(5), 7.0);
        assert_eq!(p.len(), 7);
    }
}
