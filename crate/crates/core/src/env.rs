//! Discretized circular preference/content space.
//!
//! Preferences and items are unit vectors in the plane, binned by angle into
//! `n` equal sectors. Bin `i` is centered at `i * 360 / n` degrees. Engagement
//! between a preference and an item is the dot product of the two unit
//! vectors, i.e. the cosine of the angle between the bin centers.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 36;

/// Tolerance for the sum-to-one check on every categorical in the crate.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct PrefSpace {
    n_bins: usize,
    // row-major n x n table of cos(center_u - center_x)
    cos: Arc<[f64]>,
}

impl PartialEq for PrefSpace {
    fn eq(&self, other: &Self) -> bool {
        self.n_bins == other.n_bins
    }
}

impl Default for PrefSpace {
    fn default() -> Self {
        Self::new(DEFAULT_BINS).expect("default bin count is valid")
    }
}

impl PrefSpace {
    pub fn new(n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Parameter(format!("need at least 2 bins, got {n_bins}")));
        }
        let width = 360.0 / n_bins as f64;
        let mut cos = Vec::with_capacity(n_bins * n_bins);
        for u in 0..n_bins {
            for x in 0..n_bins {
                let delta = ((u as f64 - x as f64) * width).to_radians();
                cos.push(snap(delta.cos()));
            }
        }
        Ok(Self { n_bins, cos: cos.into() })
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn bin_width_deg(&self) -> f64 {
        360.0 / self.n_bins as f64
    }

    pub fn bin_center_deg(&self, bin: usize) -> f64 {
        bin as f64 * self.bin_width_deg()
    }

    /// Bin whose sector contains `deg` (sectors are centered on bin centers).
    pub fn bin_of_angle(&self, deg: f64) -> usize {
        let w = self.bin_width_deg();
        let idx = ((deg.rem_euclid(360.0) + 0.5 * w) / w).floor() as usize;
        idx % self.n_bins
    }

    pub fn check_bin(&self, bin: usize) -> Result<()> {
        if bin < self.n_bins {
            Ok(())
        } else {
            Err(Error::BinOutOfRange { bin, n_bins: self.n_bins })
        }
    }

    /// Row `u` of the cosine table: engagement of every item under preference `u`.
    #[inline]
    pub fn cos_row(&self, u: usize) -> &[f64] {
        &self.cos[u * self.n_bins..(u + 1) * self.n_bins]
    }

    #[inline]
    pub(crate) fn cos_unchecked(&self, u: usize, x: usize) -> f64 {
        self.cos[u * self.n_bins + x]
    }

    /// Cosine of the angle between bin centers `u` and `x`.
    pub fn engagement(&self, u: usize, x: usize) -> Result<f64> {
        self.check_bin(u)?;
        self.check_bin(x)?;
        Ok(self.cos_unchecked(u, x))
    }

    /// Rotate a per-bin vector by `k` bins: `out[(i + k) % n] = v[i]`.
    pub fn rotate<T: Copy>(&self, v: &[T], k: usize) -> Vec<T> {
        let n = v.len();
        let mut out = v.to_vec();
        for (i, &x) in v.iter().enumerate() {
            out[(i + k) % n] = x;
        }
        out
    }

    pub fn uniform_slate(&self) -> Slate {
        Slate(vec![1.0 / self.n_bins as f64; self.n_bins])
    }

    /// Wrapped-normal slate: density summed over the -1, 0, +1 periods,
    /// evaluated at bin centers and normalized over bins.
    pub fn wrapped_gaussian_slate(&self, mean_deg: f64, std_deg: f64) -> Result<Slate> {
        Ok(Slate(self.wrapped_gaussian_weights(mean_deg, std_deg)?))
    }

    pub(crate) fn wrapped_gaussian_weights(&self, mean_deg: f64, std_deg: f64) -> Result<Vec<f64>> {
        if !(std_deg > 0.0) || !std_deg.is_finite() {
            return Err(Error::Parameter(format!("std must be positive, got {std_deg}")));
        }
        if !mean_deg.is_finite() {
            return Err(Error::Parameter(format!("mean must be finite, got {mean_deg}")));
        }
        let mut w: Vec<f64> = (0..self.n_bins)
            .map(|i| {
                let d = signed_angle(self.bin_center_deg(i) - mean_deg);
                [-360.0, 0.0, 360.0]
                    .iter()
                    .map(|wrap| {
                        let z = (d + wrap) / std_deg;
                        (-0.5 * z * z).exp()
                    })
                    .sum()
            })
            .collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|p| *p /= total);
        Ok(w)
    }
}

// Exact zeros/ones at the quarter turns keep orthogonal/antipodal bins exact.
fn snap(c: f64) -> f64 {
    if c.abs() < 1e-15 {
        0.0
    } else {
        c
    }
}

/// Angle difference mapped into (-180, 180].
pub fn signed_angle(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Unsigned circular distance in degrees, in [0, 180].
pub fn circular_distance(a: f64, b: f64) -> f64 {
    signed_angle(a - b).abs()
}

/// A slate: categorical distribution over content bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Slate(Vec<f64>);

impl Slate {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_simplex(&probs)?;
        Ok(Self(probs))
    }

    /// Normalize non-negative weights into a slate.
    pub fn from_weights(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Simplex("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Simplex("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self(weights))
    }

    pub fn one_hot(n_bins: usize, bin: usize) -> Result<Self> {
        if bin >= n_bins {
            return Err(Error::BinOutOfRange { bin, n_bins });
        }
        let mut p = vec![0.0; n_bins];
        p[bin] = 1.0;
        Ok(Self(p))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        check_simplex(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// An item, represented by its feature bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Item(pub usize);

impl Item {
    pub fn new(space: &PrefSpace, bin: usize) -> Result<Self> {
        space.check_bin(bin)?;
        Ok(Self(bin))
    }

    pub fn bin(self) -> usize {
        self.0
    }
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Simplex("empty distribution".into()));
    }
    if let Some(bad) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Simplex(format!("entry {bad} is negative or non-finite")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Simplex(format!("entries sum to {total}")));
    }
    Ok(())
}

/// Normalize in place; returns the pre-normalization total.
pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
    total
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
