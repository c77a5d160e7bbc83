//! Mixture-of-von-Mises beliefs over the preference circle.
//!
//! The network head emits, per component, a mixture logit and a 2-vector
//! `(a, b)`. The component's density over bins is `softmax_i(a cos θ_i + b sin θ_i)`,
//! i.e. a von Mises with concentration `|(a, b)|` and mean `atan2(b, a)`,
//! normalized over the bins rather than over the continuous circle.

use serde::{Deserialize, Serialize};

use crate::env::{check_simplex, PrefSpace};
use crate::error::{Error, Result};

pub const MIN_CONCENTRATION: f64 = 1e-3;
pub const MAX_CONCENTRATION: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VonMisesComponent {
    pub mean_deg: f64,
    pub concentration: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureBelief {
    pub components: Vec<VonMisesComponent>,
}

impl MixtureBelief {
    pub fn new(components: Vec<VonMisesComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Parameter("mixture needs at least one component".into()));
        }
        let w: Vec<f64> = components.iter().map(|c| c.weight).collect();
        if check_simplex(&w).is_err() && (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Simplex("mixture weights must sum to one".into()));
        }
        if components.iter().any(|c| !(c.concentration > 0.0) || !c.mean_deg.is_finite()) {
            return Err(Error::Parameter("concentrations must be positive".into()));
        }
        Ok(Self { components })
    }

    /// The mixture evaluated at bin centers, renormalized over bins.
    pub fn density_at_bins(&self, space: &PrefSpace) -> Vec<f64> {
        let n = space.n_bins();
        let mut out = vec![0.0; n];
        let mut comp = vec![0.0; n];
        for c in &self.components {
            let mu = c.mean_deg.to_radians();
            let kappa = c.concentration.min(MAX_CONCENTRATION);
            let (a, b) = (kappa * mu.cos(), kappa * mu.sin());
            component_density(space, a, b, &mut comp);
            out.iter_mut().zip(&comp).for_each(|(o, q)| *o += c.weight * q);
        }
        crate::env::normalize(&mut out);
        out
    }

    /// Read a mixture off a raw head output `[logits; (a, b) pairs]`.
    pub fn from_head(raw: &[f64]) -> Self {
        let k = raw.len() / 3;
        let w = softmax(&raw[..k]);
        let components = (0..k)
            .map(|j| {
                let (a, b) = capped(raw[k + 2 * j], raw[k + 2 * j + 1]).0;
                VonMisesComponent {
                    mean_deg: b.atan2(a).to_degrees().rem_euclid(360.0),
                    concentration: a.hypot(b).max(MIN_CONCENTRATION),
                    weight: w[j],
                }
            })
            .collect();
        Self { components }
    }
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    crate::env::normalize(&mut out);
    out
}

/// `(a, b)` rescaled so its norm is at most the concentration cap, plus the scale used.
fn capped(a: f64, b: f64) -> ((f64, f64), f64) {
    let r = a.hypot(b);
    if r > MAX_CONCENTRATION {
        let s = MAX_CONCENTRATION / r;
        ((a * s, b * s), s)
    } else {
        ((a, b), 1.0)
    }
}

fn component_density(space: &PrefSpace, a: f64, b: f64, out: &mut [f64]) {
    let n = space.n_bins();
    let w = std::f64::consts::TAU / n as f64;
    let mut max = f64::NEG_INFINITY;
    for (i, o) in out.iter_mut().enumerate() {
        let th = i as f64 * w;
        *o = a * th.cos() + b * th.sin();
        max = max.max(*o);
    }
    out.iter_mut().for_each(|o| *o = (*o - max).exp());
    crate::env::normalize(out);
}

/// Forward pass of the head for one output row, keeping what the backward pass needs.
pub(crate) struct HeadEval {
    /// Mixture weights.
    pub w: Vec<f64>,
    /// Per-component bin densities, row-major `K x n`.
    pub q: Vec<f64>,
    pub scale: Vec<f64>,
    /// Mixed belief over bins.
    pub belief: Vec<f64>,
}

pub(crate) struct Trig {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl Trig {
    pub fn new(n: usize) -> Self {
        let w = std::f64::consts::TAU / n as f64;
        Self {
            cos: (0..n).map(|i| (i as f64 * w).cos()).collect(),
            sin: (0..n).map(|i| (i as f64 * w).sin()).collect(),
        }
    }
}

pub(crate) fn head_forward(raw: &[f64], trig: &Trig) -> HeadEval {
    let k = raw.len() / 3;
    let n = trig.cos.len();
    let w = softmax(&raw[..k]);
    let mut q = vec![0.0; k * n];
    let mut scale = vec![1.0; k];
    let mut belief = vec![0.0; n];
    for j in 0..k {
        let ((a, b), s) = capped(raw[k + 2 * j], raw[k + 2 * j + 1]);
        scale[j] = s;
        let row = &mut q[j * n..(j + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for i in 0..n {
            row[i] = a * trig.cos[i] + b * trig.sin[i];
            max = max.max(row[i]);
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for (i, v) in row.iter_mut().enumerate() {
            *v /= z;
            belief[i] += w[j] * *v;
        }
    }
    HeadEval { w, q, scale, belief }
}

/// Loss `-ln Σ_i belief(i) lik(i)` and its gradient with respect to the raw head output.
pub(crate) fn head_loss_grad(eval: &HeadEval, lik: &[f64], trig: &Trig, grad: &mut [f64]) -> f64 {
    let k = eval.w.len();
    let n = trig.cos.len();
    let m: Vec<f64> = (0..k).map(|j| crate::user::dot(&eval.q[j * n..(j + 1) * n], lik)).collect();
    let z: f64 = eval.w.iter().zip(&m).map(|(w, m)| w * m).sum::<f64>().max(1e-300);
    for j in 0..k {
        grad[j] = eval.w[j] * (1.0 - m[j] / z);
        let q = &eval.q[j * n..(j + 1) * n];
        let (mut ga, mut gb) = (0.0, 0.0);
        let c = -eval.w[j] / z;
        for i in 0..n {
            let de = c * q[i] * (lik[i] - m[j]);
            ga += de * trig.cos[i];
            gb += de * trig.sin[i];
        }
        grad[k + 2 * j] = ga * eval.scale[j];
        grad[k + 2 * j + 1] = gb * eval.scale[j];
    }
    -z.ln()
}
