//! Scaled hyperparameters, grid argmins, power-law fits and transfer gaps.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Width-free constants θ with exponents τ; the concrete value at width n is θ·n^{−τ}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledHyperparams {
    pub theta: Vec<f64>,
    pub tau: Vec<f64>,
    pub names: Vec<String>,
}

impl ScaledHyperparams {
    pub fn new(theta: Vec<f64>, tau: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if theta.is_empty() || theta.len() != tau.len() || theta.len() != names.len() {
            return invalid("theta, tau and names must share a nonzero length");
        }
        Ok(Self { theta, tau, names })
    }

    pub fn at_width(&self, n: u64) -> Result<Vec<f64>> {
        scale_hps(self, n)
    }
}

pub fn scale_hps(sh: &ScaledHyperparams, n: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return invalid("width must be at least 1");
    }
    if sh.theta.len() != sh.tau.len() {
        return invalid("theta and tau lengths differ");
    }
    let nf = n as f64;
    sh.theta
        .iter()
        .zip(&sh.tau)
        .map(|(&t, &e)| {
            if !(t >= 0.0) {
                invalid(format!("negative hyperparameter constant {t}"))
            } else {
                Ok(t * nf.powf(-e))
            }
        })
        .collect()
}

/// Axis-aligned grid inside a box search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HpGrid {
    pub axes: Vec<Vec<f64>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: f64,
}

impl HpGrid {
    /// Grid whose search box is the hull of its axes.
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        let lo = axes.iter().map(|a| a.first().copied().unwrap_or(0.0)).collect();
        let hi = axes.iter().map(|a| a.last().copied().unwrap_or(0.0)).collect();
        Self::in_box(axes, lo, hi)
    }

    pub fn in_box(axes: Vec<Vec<f64>>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if axes.is_empty() || lo.len() != axes.len() || hi.len() != axes.len() {
            return invalid("grid needs one box interval per axis");
        }
        let mut r2 = 0.0;
        for (i, ax) in axes.iter().enumerate() {
            if ax.is_empty() {
                return invalid("empty grid axis");
            }
            if ax.windows(2).any(|w| !(w[1] > w[0])) {
                return invalid("grid axes must be strictly increasing");
            }
            if ax[0] < lo[i] || *ax.last().unwrap() > hi[i] {
                return invalid("grid point outside the search box");
            }
            let mut r = (ax[0] - lo[i]).max(hi[i] - ax.last().unwrap());
            for w in ax.windows(2) {
                r = r.max(0.5 * (w[1] - w[0]));
            }
            r2 += r * r;
        }
        let resolution = r2.sqrt();
        if !(resolution > 0.0) {
            return invalid("grid resolution must be positive");
        }
        Ok(Self { axes, lo, hi, resolution })
    }
}

/// Minimal grid point. Ties go to the smaller hp; `+∞` marks diverged cells.
pub fn argmin_on_grid(curve: &[(f64, f64)]) -> Result<(f64, f64)> {
    let i = argmin_index(curve)?;
    Ok(curve[i])
}

pub fn argmin_index(curve: &[(f64, f64)]) -> Result<usize> {
    if curve.is_empty() {
        return invalid("argmin of an empty curve");
    }
    let mut best: Option<usize> = None;
    for (i, &(x, y)) in curve.iter().enumerate() {
        if y.is_nan() || y == f64::NEG_INFINITY || !x.is_finite() {
            return invalid(format!("non-finite point ({x}, {y})"));
        }
        if y == f64::INFINITY {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (bx, by) = curve[b];
                if y < by || (y == by && x < bx) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or_else(|| Error::Invalid("every point of the curve diverged".into()))
}

/// Vertex of the parabola through the grid argmin and its neighbours.
///
/// Falls back to the grid point at the boundary, or when the neighbours
/// are not convex around it.
pub fn refined_argmin(curve: &[(f64, f64)]) -> Result<(f64, f64)> {
    let i = argmin_index(curve)?;
    if i == 0 || i + 1 >= curve.len() {
        return Ok(curve[i]);
    }
    let (x0, y0) = curve[i - 1];
    let (x1, y1) = curve[i];
    let (x2, y2) = curve[i + 1];
    if !(y0.is_finite() && y2.is_finite()) {
        return Ok(curve[i]);
    }
    let d01 = (y1 - y0) / (x1 - x0);
    let d12 = (y2 - y1) / (x2 - x1);
    let a = (d12 - d01) / (x2 - x0);
    if !(a > 0.0) {
        return Ok(curve[i]);
    }
    let b = d01 - a * (x0 + x1);
    let xv = (-b / (2.0 * a)).clamp(x0, x2);
    let yv = y1 + (xv - x1) * (d01 + a * (xv - x0));
    Ok((xv, yv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub log_prefactor: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        (self.log_prefactor + self.exponent * n.ln()).exp()
    }
}

/// Least squares on (ln n, ln y).
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return invalid("power-law fit needs at least 3 points");
    }
    for &(n, y) in points {
        if !(y > 0.0) || !y.is_finite() {
            return invalid(format!("power-law fit needs positive finite y, got {y}"));
        }
        if !(n > 0.0) || !n.is_finite() {
            return invalid(format!("power-law fit needs positive n, got {n}"));
        }
    }
    let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    if xs.windows(2).any(|w| w[0] == w[1]) {
        return invalid("power-law fit needs distinct n");
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (slope, icpt, r2) = ols(&lx, &ly);
    Ok(PowerLawFit { exponent: slope, log_prefactor: icpt, r_squared: r2, n_points: points.len() })
}

fn ols(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let r2 = if syy <= 1e-300 * k || sse <= 1e-28 * syy.max(1e-300) {
        1.0
    } else {
        (1.0 - sse / syy).clamp(0.0, 1.0)
    };
    (slope, icpt, r2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetPowerLawFit {
    pub fit: PowerLawFit,
    pub offset: f64,
}

/// Fit y = C n^{exponent} + y∞ by a nested 1-D search over y∞ ∈ [0, min y).
pub fn fit_power_law_offset(points: &[(f64, f64)]) -> Result<OffsetPowerLawFit> {
    if points.len() < 4 {
        return invalid("offset power-law fit needs at least 4 points");
    }
    let ymin = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if !(ymin > 0.0) {
        return invalid("offset power-law fit needs positive y");
    }
    let sse = |off: f64| -> f64 {
        let shifted: Vec<(f64, f64)> = points.iter().map(|&(n, y)| (n, y - off)).collect();
        match fit_power_law(&shifted) {
            Ok(f) => shifted
                .iter()
                .map(|&(n, y)| (y.ln() - f.log_prefactor - f.exponent * n.ln()).powi(2))
                .sum(),
            Err(_) => f64::INFINITY,
        }
    };
    let hi = ymin * (1.0 - 1e-9);
    let steps = 400;
    let mut best = (0.0, sse(0.0));
    for i in 1..steps {
        let off = hi * i as f64 / steps as f64;
        let v = sse(off);
        if v < best.1 {
            best = (off, v);
        }
    }
    let h = hi / steps as f64;
    let (mut a, mut b) = ((best.0 - h).max(0.0), (best.0 + h).min(hi));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (sse(c), sse(d));
    for _ in 0..100 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = sse(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = sse(d);
        }
    }
    let mid = 0.5 * (a + b);
    let offset = if sse(mid) <= best.1 { mid } else { best.0 };
    let shifted: Vec<(f64, f64)> = points.iter().map(|&(n, y)| (n, y - offset)).collect();
    Ok(OffsetPowerLawFit { fit: fit_power_law(&shifted)?, offset })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimates {
    pub widths: Vec<u64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub proxy_width: u64,
    /// Optimal hp and optimal value per width.
    pub theta_star: Vec<f64>,
    pub phi_star: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgminMode {
    Grid,
    Parabolic,
}

/// Loss, hp and suboptimality gaps against the proxy width, using grid argmins.
pub fn estimate_gaps(surfaces: &BTreeMap<u64, Vec<(f64, f64)>>, proxy_width: u64) -> Result<GapEstimates> {
    estimate_gaps_with(surfaces, proxy_width, ArgminMode::Grid)
}

pub fn estimate_gaps_with(
    surfaces: &BTreeMap<u64, Vec<(f64, f64)>>,
    proxy_width: u64,
    mode: ArgminMode,
) -> Result<GapEstimates> {
    let proxy = surfaces
        .get(&proxy_width)
        .ok_or_else(|| Error::Invalid(format!("proxy width {proxy_width} missing")))?;
    for (w, s) in surfaces {
        if s.len() != proxy.len() || s.iter().zip(proxy).any(|(p, q)| p.0 != q.0) {
            return invalid(format!("hp grid of width {w} differs from the proxy grid"));
        }
    }
    let opt = |s: &[(f64, f64)]| match mode {
        ArgminMode::Grid => argmin_on_grid(s),
        ArgminMode::Parabolic => refined_argmin(s),
    };
    let (tp, fp) = opt(proxy)?;
    let ip = argmin_index(proxy)?;
    let proxy_at = |theta: f64| -> f64 {
        match mode {
            ArgminMode::Grid => proxy.iter().find(|p| p.0 == theta).map(|p| p.1).unwrap_or(f64::NAN),
            ArgminMode::Parabolic => parabola_at(proxy, ip, theta) - parabola_at(proxy, ip, tp) + fp,
        }
    };
    let mut out = GapEstimates {
        widths: vec![],
        a: vec![],
        b: vec![],
        c: vec![],
        proxy_width,
        theta_star: vec![],
        phi_star: vec![],
    };
    for (&w, s) in surfaces {
        let (t, f) = if w == proxy_width { (tp, fp) } else { opt(s)? };
        out.widths.push(w);
        out.theta_star.push(t);
        out.phi_star.push(f);
        if w == proxy_width {
            out.a.push(0.0);
            out.b.push(0.0);
            out.c.push(0.0);
        } else {
            out.a.push((f - fp).abs());
            out.b.push((t - tp).abs());
            out.c.push((proxy_at(t) - fp).abs());
        }
    }
    Ok(out)
}

/// Interpolating parabola through points i−1, i, i+1 (linear at a boundary).
fn parabola_at(curve: &[(f64, f64)], i: usize, x: f64) -> f64 {
    if curve.len() < 3 {
        return curve[i].1;
    }
    let j = i.clamp(1, curve.len() - 2);
    let (x0, y0) = curve[j - 1];
    let (x1, y1) = curve[j];
    let (x2, y2) = curve[j + 1];
    let l0 = (x - x1) * (x - x2) / ((x0 - x1) * (x0 - x2));
    let l1 = (x - x0) * (x - x2) / ((x1 - x0) * (x1 - x2));
    let l2 = (x - x0) * (x - x1) / ((x2 - x0) * (x2 - x1));
    y0 * l0 + y1 * l1 + y2 * l2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferVerdict {
    FastUseful,
    NotFast,
}

/// Fast (and useful) transfer iff β > α/2.
pub fn classify_transfer(alpha: f64, beta: f64) -> Result<TransferVerdict> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return invalid(format!("alpha must be positive, got {alpha}"));
    }
    if !(beta >= 0.0) {
        return invalid(format!("beta must be nonnegative, got {beta}"));
    }
    Ok(if beta > alpha / 2.0 { TransferVerdict::FastUseful } else { TransferVerdict::NotFast })
}
