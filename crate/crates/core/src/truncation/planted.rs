//! Synthetic top-k profiles with known structure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LossCurveGrid;
use crate::error::{invalid, Result};

/// Evenly spaced points on [lo, hi].
pub fn linspace(lo: f64, hi: f64, g: usize) -> Vec<f64> {
    (0..g).map(|i| lo + (hi - lo) * i as f64 / (g - 1).max(1) as f64).collect()
}

fn prefix(components: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    components
        .map(|c| {
            acc += c;
            acc
        })
        .collect()
}

fn head_curve(theta: f64) -> f64 {
    -1.0 + 0.5 * (theta - 0.4).powi(2)
}

/// Profiles whose first `k0` components sum to the same convex curve at
/// every width, with width-dependent scatter inside the head and a small
/// width-dependent tail.
pub fn invariant_head(hp: &[f64], widths: &[usize], k0: usize) -> Result<BTreeMap<usize, LossCurveGrid>> {
    if k0 < 2 || widths.iter().any(|&n| n <= k0) {
        return invalid("every width must exceed the head size, and the head needs two components");
    }
    let mut out = BTreeMap::new();
    for &n in widths {
        let nf = n as f64;
        let scatter = 0.5 / nf.sqrt();
        let tail_amp = 0.05 / nf.sqrt();
        let rows = hp
            .iter()
            .map(|&t| {
                let h = head_curve(t);
                let tail = -tail_amp * (1.0 + 0.3 * t) / (n - k0) as f64;
                prefix((1..=n).map(|j| {
                    if j <= k0 {
                        let s = if 2 * j <= k0 { 1.0 } else { -1.0 };
                        let s = if k0 % 2 == 1 && 2 * j == k0 + 1 { 0.0 } else { s };
                        h * (1.0 / k0 as f64 + scatter * s / k0 as f64)
                    } else {
                        tail
                    }
                }))
            })
            .collect();
        out.insert(n, LossCurveGrid::new(hp.to_vec(), rows)?);
    }
    Ok(out)
}

/// φ_n(θ) = φ∞ + A n^{-α} + (c/2)(θ − θ∞ − B n^{-β})² split into a head of
/// `k0` components carrying a fraction `gamma` of the optimum drift and a
/// tail of affine components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftFamily {
    pub phi_inf: f64,
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    pub beta: f64,
    pub curvature: f64,
    pub theta_inf: f64,
    pub gamma: f64,
    pub k0: usize,
}

impl Default for DriftFamily {
    fn default() -> Self {
        Self { phi_inf: -1.0, a: 1.0, alpha: 0.5, b: 1.0, beta: 0.5, curvature: 2.0, theta_inf: 0.4, gamma: 0.5, k0: 4 }
    }
}

impl DriftFamily {
    fn shift(&self, n: Option<usize>) -> f64 {
        n.map_or(0.0, |n| self.b * (n as f64).powf(-self.beta))
    }

    fn level(&self, n: Option<usize>) -> f64 {
        n.map_or(0.0, |n| self.a * (n as f64).powf(-self.alpha))
    }

    /// Total loss decrease at width `n` (`None` is the infinite-width limit).
    pub fn total(&self, n: Option<usize>, theta: f64) -> f64 {
        self.phi_inf + self.level(n) + 0.5 * self.curvature * (theta - self.theta_inf - self.shift(n)).powi(2)
    }

    fn head(&self, n: Option<usize>, theta: f64) -> f64 {
        self.phi_inf
            + 0.5 * self.level(n)
            + 0.5 * self.curvature * (theta - self.theta_inf - self.gamma * self.shift(n)).powi(2)
    }

    /// Profile with `columns` components; `n = None` gives the limit profile.
    pub fn profile(&self, hp: &[f64], n: Option<usize>, columns: usize) -> Result<LossCurveGrid> {
        if columns <= self.k0 {
            return invalid("profile must have more columns than the head");
        }
        let k0 = self.k0;
        let rows = hp
            .iter()
            .map(|&t| {
                let h = self.head(n, t);
                let r = (self.total(n, t) - h) / (columns - k0) as f64;
                prefix((1..=columns).map(|j| if j <= k0 { h / k0 as f64 } else { r }))
            })
            .collect();
        LossCurveGrid::new(hp.to_vec(), rows)
    }

    /// |θ*(n) − θ*(∞)| with both optima located on an `fine`-point grid over [lo, hi].
    pub fn hp_gap_on_grid(&self, n: usize, lo: f64, hi: f64, fine: usize) -> f64 {
        let xs = linspace(lo, hi, fine);
        let arg = |w: Option<usize>| {
            xs.iter().copied().min_by(|&x, &y| self.total(w, x).total_cmp(&self.total(w, y))).unwrap()
        };
        (arg(Some(n)) - arg(None)).abs()
    }
}
