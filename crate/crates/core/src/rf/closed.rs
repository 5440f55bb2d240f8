use serde::{Deserialize, Serialize};

use super::{risk, ActivationMoments, RfSetting};
use crate::error::{invalid, Error, Result};
use crate::hpcore::{fit_power_law, PowerLawFit};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormInf {
    pub t_star: f64,
    pub lambda_star_inf: f64,
    pub risk_inf_at_opt: f64,
    pub curvature: f64,
    pub c_eta: f64,
    pub c_lambda: f64,
}

fn s_of(t: f64, psi1: f64) -> f64 {
    psi1 * t * t - (t - 1.0) * (t - 1.0)
}

fn lambda_of_t(t: f64, psi1: f64, mo: &ActivationMoments) -> f64 {
    let a = mo.mu1_sq();
    a * psi1 / (t - 1.0) - a / t - mo.mu2_sq
}

/// Infinite-width optimum, curvature and first-order width coefficients.
pub fn closed_forms_inf(s: &RfSetting, mo: &ActivationMoments) -> Result<ClosedFormInf> {
    let a1 = mo.mu1_sq();
    let b1 = mo.mu1_star_sq();
    let big_a = mo.mu2_star_sq + s.sigma_eps_sq;
    let psi1 = s.psi1;
    let lambda_star_inf = a1 * big_a / b1 - mo.mu2_sq;
    if !(lambda_star_inf > 0.0) {
        return Err(Error::Invalid(format!(
            "optimal infinite-width ridge penalty {lambda_star_inf} is not positive"
        )));
    }
    // A t² − (A + μ₁*²(ψ₁−1)) t − μ₁*² = 0
    let qb = -(big_a + b1 * (psi1 - 1.0));
    let disc = qb * qb + 4.0 * big_a * b1;
    let t_star = [(-qb + disc.sqrt()) / (2.0 * big_a), (-qb - disc.sqrt()) / (2.0 * big_a)]
        .into_iter()
        .find(|&t| t > 1.0 && psi1 * t - t + 1.0 > 0.0)
        .ok_or_else(|| Error::Invalid("no admissible root t* > 1".into()))?;
    let st = s_of(t_star, psi1);
    let g = psi1 * t_star - t_star + 1.0;
    let risk_inf_at_opt = psi1 * (big_a * t_star * t_star + b1) / st;
    let dl = -a1 * st / (t_star * t_star * (t_star - 1.0).powi(2));
    let curvature = 2.0 * big_a * psi1 / (st * dl * dl * g);
    let c_eta = 2.0 * big_a * (a1 + mo.mu2_sq * t_star) * (t_star - 1.0).powi(3) / (a1 * st * g);
    let c_lambda = ((3.0 * psi1 - 4.0 * a1 * psi1 + 1.0) * t_star * t_star
        + 2.0 * (2.0 * a1 * psi1 - 1.0) * t_star
        + 1.0)
        / (2.0 * psi1 * t_star * t_star);
    Ok(ClosedFormInf { t_star, lambda_star_inf, risk_inf_at_opt, curvature, c_eta, c_lambda })
}

/// Infinite-width risk at ridge penalty λ through the parametrization λ(t).
pub fn risk_inf(lambda: f64, s: &RfSetting, mo: &ActivationMoments) -> Result<f64> {
    if !(lambda > -mo.mu2_sq) {
        return invalid("ridge penalty below the infinite-width branch");
    }
    let psi1 = s.psi1;
    // λ(t) decreases from +∞ at t → 1⁺; bracket then bisect.
    let (mut lo, mut hi) = (1.0 + 1e-15, 2.0);
    while lambda_of_t(hi, psi1, mo) > lambda {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 || s_of(hi, psi1) <= 0.0 {
            return invalid("ridge penalty outside the parametrized branch");
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if lambda_of_t(mid, psi1, mo) > lambda {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    let t = 0.5 * (lo + hi);
    let big_a = mo.mu2_star_sq + s.sigma_eps_sq;
    Ok(psi1 * (big_a * t * t + mo.mu1_star_sq()) / s_of(t, psi1))
}

/// Golden-section search for argmin over λ ∈ [lo, hi] (in log λ).
pub fn optimal_lambda(s: &RfSetting, mo: &ActivationMoments, interval: (f64, f64)) -> Result<(f64, f64)> {
    let f = |l: f64| risk(l, s, mo).map(|r| r.risk);
    golden_min(&f, interval, 1e-8)
}

pub(crate) fn golden_min(
    f: &dyn Fn(f64) -> Result<f64>,
    (lo, hi): (f64, f64),
    tol: f64,
) -> Result<(f64, f64)> {
    if !(lo > 0.0 && hi > lo) {
        return invalid("search interval must satisfy 0 < lo < hi");
    }
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo.ln(), hi.ln());
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c.exp())?, f(d.exp())?);
    while b.exp() - a.exp() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d.exp())?;
        }
    }
    let x = (0.5 * (a + b)).exp();
    let fx = f(x)?;
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if !(fx < flo && fx < fhi) {
        return Err(Error::Solver(format!("no interior minimum in [{lo}, {hi}]")));
    }
    Ok((x, fx))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub psi2: f64,
    pub lambda_star: f64,
    pub risk_star: f64,
    pub loss_gap: f64,
    pub hp_gap: f64,
    pub subopt_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub loss_gap: PowerLawFit,
    pub hp_gap: PowerLawFit,
    pub subopt_gap: PowerLawFit,
    pub closed_forms: ClosedFormInf,
}

/// Loss, hp and suboptimality gaps against the closed-form infinite-width optimum.
pub fn rf_rates(s: &RfSetting, mo: &ActivationMoments, psi2s: &[f64]) -> Result<RateReport> {
    if psi2s.len() < 3 {
        return invalid("rate fits need at least 3 widths");
    }
    let (mn, mx) = psi2s.iter().fold((f64::MAX, f64::MIN), |(a, b), &p| (a.min(p), b.max(p)));
    if mx / mn < 100.0 {
        return invalid("psi2 list must span at least two decades");
    }
    let cf = closed_forms_inf(s, mo)?;
    let l0 = cf.lambda_star_inf;
    let mut rows = Vec::with_capacity(psi2s.len());
    for &p in psi2s {
        let sp = s.with_psi2(p);
        let (lambda_star, risk_star) = optimal_lambda(&sp, mo, (l0 / 20.0, l0 * 20.0))?;
        rows.push(RateRow {
            psi2: p,
            lambda_star,
            risk_star,
            loss_gap: (risk_star - cf.risk_inf_at_opt).abs(),
            hp_gap: (lambda_star - l0).abs(),
            subopt_gap: (risk_inf(lambda_star, s, mo)? - cf.risk_inf_at_opt).abs(),
        });
    }
    let fit = |g: fn(&RateRow) -> f64| fit_power_law(&rows.iter().map(|r| (r.psi2, g(r))).collect::<Vec<_>>());
    Ok(RateReport {
        loss_gap: fit(|r| r.loss_gap)?,
        hp_gap: fit(|r| r.hp_gap)?,
        subopt_gap: fit(|r| r.subopt_gap)?,
        rows,
        closed_forms: cf,
    })
}

/// Leading width coefficients obtained numerically from the full equations:
/// 𝓡_{ψ₂}(λ*(∞)) − 𝓡_∞* ≈ c_eta·η and λ*(ψ₂) − λ*(∞) ≈ c_lambda·η, η = ψ₁/ψ₂.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeadingCoefficients {
    pub c_eta: f64,
    pub c_lambda: f64,
}

pub fn numeric_leading_coefficients(s: &RfSetting, mo: &ActivationMoments) -> Result<LeadingCoefficients> {
    let cf = closed_forms_inf(s, mo)?;
    let l0 = cf.lambda_star_inf;
    let eta = 1e-3;
    let slope_eta = |e: f64| -> Result<f64> {
        let sp = s.with_psi2(s.psi1 / e);
        Ok((risk(l0, &sp, mo)?.risk - cf.risk_inf_at_opt) / e)
    };
    let slope_lam = |e: f64| -> Result<f64> {
        let sp = s.with_psi2(s.psi1 / e);
        Ok((optimal_lambda(&sp, mo, (l0 / 4.0, l0 * 4.0))?.0 - l0) / e)
    };
    // Richardson extrapolation removes the O(η) term of each quotient.
    Ok(LeadingCoefficients {
        c_eta: 2.0 * slope_eta(eta / 2.0)? - slope_eta(eta)?,
        c_lambda: 2.0 * slope_lam(eta / 2.0)? - slope_lam(eta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mo() -> ActivationMoments {
        ActivationMoments::tanh_relu()
    }

    #[test]
    fn boundary_of_regime() {
        let half = ActivationMoments { mu1: 0.5f64.sqrt(), mu2_sq: 0.5, mu1_star: 0.5f64.sqrt(), mu2_star_sq: 0.5 };
        let s = RfSetting::new(4.0, 8.0, 0.0).unwrap();
        assert!(closed_forms_inf(&s, &half).is_err());
        let lam = half.mu1_sq() * half.mu2_star_sq / half.mu1_star_sq() - half.mu2_sq;
        assert!(lam.abs() < 1e-15);
    }

    #[test]
    fn reference_closed_forms() {
        let cf = closed_forms_inf(&RfSetting::reference(f64::INFINITY), &mo()).unwrap();
        assert!((cf.lambda_star_inf - 0.347871).abs() < 1e-5);
        assert!((cf.t_star - 7.96739).abs() < 1e-4);
        assert!((cf.risk_inf_at_opt - 0.4210880).abs() < 1e-6);
        assert!(cf.t_star > 1.0 && s_of(cf.t_star, 4.0) > 0.0);
        assert!(cf.curvature > 0.0 && cf.c_eta > 0.0);
        // λ(t*) is the stated optimum.
        assert!((lambda_of_t(cf.t_star, 4.0, &mo()) - cf.lambda_star_inf).abs() < 1e-12);
    }

    #[test]
    fn curvature_matches_second_difference() {
        let s = RfSetting::reference(f64::INFINITY);
        let cf = closed_forms_inf(&s, &mo()).unwrap();
        let l = cf.lambda_star_inf;
        let h = 1e-3;
        let r = |x: f64| risk_inf(x, &s, &mo()).unwrap();
        let fd = (r(l + h) - 2.0 * r(l) + r(l - h)) / (h * h);
        assert!(((fd - cf.curvature) / cf.curvature).abs() < 1e-4, "{fd} vs {}", cf.curvature);
        let slope = (r(l + 1e-6) - r(l - 1e-6)) / 2e-6;
        assert!(slope.abs() < 1e-7);
    }

    #[test]
    fn large_width_solver_agrees_with_parametric_curve() {
        let m = mo();
        let s = RfSetting::reference(1e6);
        for i in 0..20 {
            let l = 10f64.powf(-1.5 + 2.5 * i as f64 / 19.0);
            let a = risk(l, &s, &m).unwrap().risk;
            let b = risk_inf(l, &s, &m).unwrap();
            assert!((a - b).abs() < 1e-6, "{l}: {a} vs {b}");
        }
    }

    #[test]
    fn optimal_lambda_at_large_width() {
        let m = mo();
        let s = RfSetting::reference(1e6);
        let cf = closed_forms_inf(&s, &m).unwrap();
        let (l, r) = optimal_lambda(&s, &m, (0.05, 2.0)).unwrap();
        assert!((l - cf.lambda_star_inf).abs() < 1e-4, "{l}");
        assert!((r - cf.risk_inf_at_opt).abs() < 1e-6);
        let left = risk(l * 0.9, &s, &m).unwrap().risk;
        let right = risk(l * 1.1, &s, &m).unwrap().risk;
        assert!(left > r && right > r);
        assert!(optimal_lambda(&s, &m, (1.0, 2.0)).is_err());
    }

    #[test]
    fn numeric_coefficients_predict_finite_width_gaps() {
        let m = mo();
        let s = RfSetting::reference(f64::INFINITY);
        let lc = numeric_leading_coefficients(&s, &m).unwrap();
        let cf = closed_forms_inf(&s, &m).unwrap();
        let psi2 = 4096.0;
        let sp = s.with_psi2(psi2);
        let (l, _) = optimal_lambda(&sp, &m, (0.1, 1.0)).unwrap();
        let lead = (l - cf.lambda_star_inf) * psi2;
        assert!(((lead - lc.c_lambda * s.psi1) / (lc.c_lambda * s.psi1)).abs() < 0.1, "{lead} {}", lc.c_lambda);
        assert!(lc.c_eta > 0.0);
    }
}
