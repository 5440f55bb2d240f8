use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{NormalizedActivation, RfSetting};
use crate::error::{invalid, Error, Result};
use crate::rng::stream;

/// One sampled ridge problem, diagonalized so the test risk is cheap at any penalty.
pub struct RidgeTrial {
    eig: Vec<f64>,
    g: Vec<f64>,
    p: Vec<f64>,
    h: DMatrix<f64>,
    yy: f64,
    n_test: usize,
    pub n_samples: usize,
    pub n_features: usize,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

impl RidgeTrial {
    /// Draw teacher, features, training and test data for trial `index`.
    pub fn sample(
        d: usize,
        s: &RfSetting,
        student: &NormalizedActivation,
        teacher: &NormalizedActivation,
        seed: u64,
        index: usize,
    ) -> Result<Self> {
        if d == 0 {
            return invalid("input dimension must be positive");
        }
        let n_samples = (s.psi1 * d as f64).round() as usize;
        let n_features = (s.psi2 * d as f64).round() as usize;
        let n_test = 10 * d;
        if n_samples == 0 || n_features == 0 {
            return invalid("sample or feature count rounds to zero");
        }
        let mut rng = stream(seed, &format!("rf-mc/trial{index}"));
        let mut beta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        beta /= beta.norm();
        let w = gaussian(d, n_features, 1.0 / (d as f64).sqrt(), &mut rng);
        let noise = s.sigma_eps_sq.sqrt();
        let draw = |m: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let x = gaussian(m, d, 1.0, rng);
            let proj = &x * &beta;
            let y = DVector::from_fn(m, |i, _| teacher.eval(proj[i]) + noise * rng.sample::<f64, _>(StandardNormal));
            let f = (&x * &w).map(|z| student.eval(z));
            (f, y)
        };
        let (f, y) = draw(n_samples, &mut rng);
        let (ft, yt) = draw(n_test, &mut rng);
        let (eig, g, b) = if n_features <= n_samples {
            let k = f.tr_mul(&f);
            let e = SymmetricEigen::new(k);
            let g = e.eigenvectors.tr_mul(&f.tr_mul(&y));
            let b = &ft * &e.eigenvectors;
            (e.eigenvalues, g, b)
        } else {
            let k = &f * f.transpose();
            let e = SymmetricEigen::new(k);
            let g = e.eigenvectors.tr_mul(&y);
            let b = (&ft * f.transpose()) * &e.eigenvectors;
            (e.eigenvalues, g, b)
        };
        if eig.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!("eigendecomposition failed in trial {index}")));
        }
        let p = b.tr_mul(&yt);
        let h = b.tr_mul(&b);
        Ok(Self {
            eig: eig.iter().copied().collect(),
            g: g.iter().copied().collect(),
            p: p.iter().copied().collect(),
            h,
            yy: yt.norm_squared(),
            n_test,
            n_samples,
            n_features,
        })
    }

    /// Test mean squared error of min ‖y − Fa‖² + penalty·‖a‖².
    pub fn risk(&self, penalty: f64) -> f64 {
        let u = DVector::from_iterator(self.g.len(), self.eig.iter().zip(&self.g).map(|(&l, &g)| g / (l + penalty)));
        let lin: f64 = self.p.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        let quad = u.dot(&(&self.h * &u));
        (self.yy - 2.0 * lin + quad) / self.n_test as f64
    }

    /// Ratio of the largest to the smallest shifted eigenvalue at `penalty`.
    pub fn condition(&self, penalty: f64) -> f64 {
        let mx = self.eig.iter().cloned().fold(f64::MIN, f64::max);
        let mn = self.eig.iter().cloned().fold(f64::MAX, f64::min);
        (mx + penalty) / (mn + penalty)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub lambda: f64,
    /// Penalty used in the finite problem: scale·n_features·λ.
    pub penalty: f64,
    pub mean: f64,
    pub stderr: f64,
    pub trials: Vec<f64>,
}

fn summarize(lambda: f64, penalty: f64, trials: Vec<f64>) -> McEstimate {
    let k = trials.len() as f64;
    let mean = trials.iter().sum::<f64>() / k;
    let var = if trials.len() > 1 {
        trials.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    McEstimate { lambda, penalty, mean, stderr: (var / k).sqrt(), trials }
}

/// Empirical test risk at each asymptotic λ, with finite penalty scale·n·λ.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_rf(
    d: usize,
    s: &RfSetting,
    student: &NormalizedActivation,
    teacher: &NormalizedActivation,
    lambdas: &[f64],
    trials: usize,
    seed: u64,
    scale: f64,
) -> Result<Vec<McEstimate>> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let n = (s.psi2 * d as f64).round();
    let per_trial: Vec<Vec<f64>> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let t = RidgeTrial::sample(d, s, student, teacher, seed, i)?;
            Ok(lambdas.iter().map(|&l| t.risk(scale * n * l)).collect())
        })
        .collect::<Result<_>>()?;
    Ok(lambdas
        .iter()
        .enumerate()
        .map(|(j, &l)| summarize(l, scale * n * l, per_trial.iter().map(|r| r[j]).collect()))
        .collect())
}

/// Solve for the scale c making the Monte Carlo mean match `target` at the anchor λ,
/// with common random numbers across the bisection.
#[allow(clippy::too_many_arguments)]
pub fn calibrate_lambda_scale(
    d: usize,
    s: &RfSetting,
    student: &NormalizedActivation,
    teacher: &NormalizedActivation,
    anchor_lambda: f64,
    target: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let ts: Vec<RidgeTrial> = (0..trials)
        .into_par_iter()
        .map(|i| RidgeTrial::sample(d, s, student, teacher, seed, i))
        .collect::<Result<_>>()?;
    let n = (s.psi2 * d as f64).round();
    let mean = |c: f64| ts.iter().map(|t| t.risk(c * n * anchor_lambda)).sum::<f64>() / ts.len() as f64;
    let (mut lo, mut hi) = (0.0625f64.ln(), 16f64.ln());
    let (flo, fhi) = (mean(lo.exp()) - target, mean(hi.exp()) - target);
    if flo.signum() == fhi.signum() {
        return Err(Error::Solver(format!(
            "calibration target {target} not bracketed ({} .. {})",
            flo + target,
            fhi + target
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let fm = mean(mid.exp()) - target;
        if fm.signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

#[cfg(test)]
mod tests {
    use super::super::{hermite_moments, risk, ActivationMoments, RfActivation};
    use super::*;

    #[test]
    fn huge_penalty_gives_null_risk() {
        let st = hermite_moments(RfActivation::Tanh).unwrap();
        let te = hermite_moments(RfActivation::Relu).unwrap();
        let s = RfSetting::reference(2.0);
        let est = monte_carlo_rf(60, &s, &st, &te, &[1e9], 4, 1, 1.0).unwrap();
        assert!((est[0].mean - 1.0625).abs() < 0.1, "{}", est[0].mean);
    }

    #[test]
    fn spectral_risk_matches_direct_solve() {
        let st = hermite_moments(RfActivation::Tanh).unwrap();
        let te = hermite_moments(RfActivation::Relu).unwrap();
        for &psi2 in &[0.5, 2.0] {
            let s = RfSetting::new(1.0, psi2, 0.0625).unwrap();
            let d = 20;
            let t = RidgeTrial::sample(d, &s, &st, &te, 3, 0).unwrap();
            // Rebuild the same draws and solve the primal system directly.
            let mut rng = stream(3, "rf-mc/trial0");
            let mut beta = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            beta /= beta.norm();
            let w = gaussian(d, t.n_features, 1.0 / (d as f64).sqrt(), &mut rng);
            let mut draw = |m: usize| {
                let x = gaussian(m, d, 1.0, &mut rng);
                let proj = &x * &beta;
                let y = DVector::from_fn(m, |i, _| te.eval(proj[i]) + 0.25 * rng.sample::<f64, _>(StandardNormal));
                ((&x * &w).map(|z| st.eval(z)), y)
            };
            let (f, y) = draw(t.n_samples);
            let (ft, yt) = draw(10 * d);
            let pen = 0.7;
            let k = f.tr_mul(&f) + DMatrix::identity(t.n_features, t.n_features) * pen;
            let a = k.lu().solve(&f.tr_mul(&y)).unwrap();
            let direct = (yt - ft * a).norm_squared() / (10 * d) as f64;
            assert!((direct - t.risk(pen)).abs() < 1e-9 * direct.max(1.0), "{direct} {}", t.risk(pen));
        }
    }

    #[test]
    fn moderate_size_agrees_with_asymptotics() {
        let st = hermite_moments(RfActivation::Tanh).unwrap();
        let te = hermite_moments(RfActivation::Relu).unwrap();
        let s = RfSetting::reference(2.0);
        let lam = 1.0;
        let est = monte_carlo_rf(100, &s, &st, &te, &[lam], 6, 5, 1.0).unwrap();
        let r = risk(lam, &s, &ActivationMoments::tanh_relu()).unwrap().risk;
        assert!(((est[0].mean - r) / r).abs() < 0.06, "{} vs {r}", est[0].mean);
    }
}
