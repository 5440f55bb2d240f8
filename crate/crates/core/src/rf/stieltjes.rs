use serde::{Deserialize, Serialize};

use super::{ActivationMoments, RfSetting};
use crate::error::{invalid, Error, Result};

const LAMBDA_BIG: f64 = 1e6;
const LADDER: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StieltjesSolution {
    pub m1: f64,
    pub m2: f64,
    pub lambda: f64,
    /// Residuals of the first equation and of the rescaled second equation.
    pub residuals: [f64; 2],
    /// Residual of the second equation before rescaling.
    pub raw_residual2: f64,
}

/// Rescaling of the second equation, which carries an overall ψ₂/ψ₁ factor.
fn eq2_scale(s: &RfSetting) -> f64 {
    1.0 / (1.0 + s.psi2 / s.psi1)
}

fn equations(m1: f64, m2: f64, z: f64, s: &RfSetting, mo: &ActivationMoments) -> [f64; 2] {
    let (a, b) = (mo.mu1_sq(), mo.mu2_sq);
    let common = a * m1 * m2 * (z * m1 - 1.0);
    let e1 = (m1 - m2) * (b * m1 + a * m2) / s.psi1 + common;
    let e2 = s.psi2 / s.psi1 * (a * m1 * m2 + (m2 - m1) / s.psi1) + common;
    [e1, e2 * eq2_scale(s)]
}

fn jacobian(m1: f64, m2: f64, z: f64, s: &RfSetting, mo: &ActivationMoments) -> [[f64; 2]; 2] {
    let (a, b) = (mo.mu1_sq(), mo.mu2_sq);
    let r = s.psi2 / s.psi1;
    let sc = eq2_scale(s);
    let j11 = (2.0 * b * m1 + (a - b) * m2) / s.psi1 + a * m2 * (2.0 * z * m1 - 1.0);
    let j12 = ((a - b) * m1 - 2.0 * a * m2) / s.psi1 + a * m1 * (z * m1 - 1.0);
    let j21 = r * (a * m2 - 1.0 / s.psi1) + a * m2 * (2.0 * z * m1 - 1.0);
    let j22 = r * (a * m1 + 1.0 / s.psi1) + a * m1 * (z * m1 - 1.0);
    [[j11, j12], [j21 * sc, j22 * sc]]
}

fn solve2(j: &[[f64; 2]; 2], r: &[f64; 2]) -> Option<[f64; 2]> {
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let scale = j.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(det.abs() > 1e-300 && det.abs() > 1e-15 * scale * scale) {
        return None;
    }
    Some([(r[0] * j[1][1] - r[1] * j[0][1]) / det, (j[0][0] * r[1] - j[1][0] * r[0]) / det])
}

fn norm(r: &[f64; 2]) -> f64 {
    r[0].abs().max(r[1].abs())
}

fn newton(m: &mut [f64; 2], z: f64, s: &RfSetting, mo: &ActivationMoments) -> Result<()> {
    let mut res = equations(m[0], m[1], z, s, mo);
    for _ in 0..200 {
        let j = jacobian(m[0], m[1], z, s, mo);
        let step = solve2(&j, &res)
            .ok_or_else(|| Error::Solver(format!("singular Jacobian at z={z}, m=({}, {})", m[0], m[1])))?;
        let mut t = 1.0;
        let mut next;
        loop {
            next = [m[0] - t * step[0], m[1] - t * step[1]];
            let r = equations(next[0], next[1], z, s, mo);
            if (next[0] > 0.0 && next[1] > 0.0 && norm(&r) <= norm(&res)) || t < 1e-6 {
                res = r;
                break;
            }
            t *= 0.5;
        }
        let moved = (next[0] - m[0]).abs().max((next[1] - m[1]).abs());
        *m = next;
        if moved <= 1e-15 * m[0].abs().max(m[1].abs()) {
            return Ok(());
        }
    }
    Ok(())
}

/// Solve the coupled equations at z = λ by damped Newton with continuation
/// down from λ = 10⁶, where m₁ ≈ m₂ ≈ 1/λ.
pub fn solve_stieltjes(lambda: f64, s: &RfSetting, mo: &ActivationMoments) -> Result<StieltjesSolution> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return invalid(format!("ridge penalty must be positive, got {lambda}"));
    }
    let mut z = LAMBDA_BIG.max(lambda);
    let mut m = [1.0 / z, 1.0 / z];
    let mut trace = Vec::new();
    loop {
        if let Err(e) = newton(&mut m, z, s, mo) {
            trace.push(format!("{e}"));
            return Err(Error::Solver(format!("continuation failed: {}", trace.join("; "))));
        }
        if z == lambda {
            break;
        }
        z = (z * LADDER).max(lambda);
    }
    let residuals = equations(m[0], m[1], lambda, s, mo);
    if !(norm(&residuals) < 1e-12) || !(m[0] > 0.0 && m[1] > 0.0) {
        return Err(Error::Solver(format!(
            "no convergence at lambda={lambda}: m=({}, {}), residuals={residuals:?}",
            m[0], m[1]
        )));
    }
    Ok(StieltjesSolution {
        m1: m[0],
        m2: m[1],
        lambda,
        residuals,
        raw_residual2: residuals[1] / eq2_scale(s),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub lambda: f64,
    pub risk: f64,
    pub m1: f64,
    pub m2: f64,
    pub dm1: f64,
    pub dm2: f64,
    pub residual: f64,
}

fn risk_from(m1: f64, dm1: f64, dm2: f64, s: &RfSetting, mo: &ActivationMoments) -> f64 {
    -(mo.mu2_star_sq + s.sigma_eps_sq) * dm1 / (m1 * m1) - mo.mu1_star_sq() * dm2 / (m1 * m1)
}

/// Asymptotic test risk, with λ-derivatives of (m₁, m₂) from implicit differentiation.
pub fn risk(lambda: f64, s: &RfSetting, mo: &ActivationMoments) -> Result<RiskPoint> {
    let sol = solve_stieltjes(lambda, s, mo)?;
    let (m1, m2) = (sol.m1, sol.m2);
    let j = jacobian(m1, m2, lambda, s, mo);
    let dz = mo.mu1_sq() * m1 * m1 * m2;
    let d = solve2(&j, &[-dz, -dz * eq2_scale(s)])
        .ok_or_else(|| Error::Solver(format!("singular Jacobian at lambda={lambda}")))?;
    Ok(RiskPoint {
        lambda,
        risk: risk_from(m1, d[0], d[1], s, mo),
        m1,
        m2,
        dm1: d[0],
        dm2: d[1],
        residual: norm(&sol.residuals),
    })
}

/// Risk with central finite differences (step 1e-6·λ) in place of the implicit derivative.
pub fn risk_fd(lambda: f64, s: &RfSetting, mo: &ActivationMoments) -> Result<RiskPoint> {
    let h = 1e-6 * lambda;
    let c = solve_stieltjes(lambda, s, mo)?;
    let p = solve_stieltjes(lambda + h, s, mo)?;
    let q = solve_stieltjes(lambda - h, s, mo)?;
    let dm1 = (p.m1 - q.m1) / (2.0 * h);
    let dm2 = (p.m2 - q.m2) / (2.0 * h);
    Ok(RiskPoint {
        lambda,
        risk: risk_from(c.m1, dm1, dm2, s, mo),
        m1: c.m1,
        m2: c.m2,
        dm1,
        dm2,
        residual: norm(&c.residuals),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mo() -> ActivationMoments {
        ActivationMoments::tanh_relu()
    }

    #[test]
    fn large_lambda_asymptote() {
        let s = RfSetting::reference(2.0);
        let sol = solve_stieltjes(1e6, &s, &mo()).unwrap();
        assert!((sol.m1 * 1e6 - 1.0).abs() < 1e-4);
        let r = risk(1e7, &s, &mo()).unwrap();
        assert!((r.risk - 1.0625).abs() < 1e-5, "{}", r.risk);
    }

    #[test]
    fn residuals_below_tolerance() {
        for &psi2 in &[1.0, 2.0, 4.0, 8.0, 1e6] {
            let s = RfSetting::reference(psi2);
            for &l in &[1e-2, 0.1, 0.35, 1.0, 10.0, 100.0] {
                let sol = solve_stieltjes(l, &s, &mo()).unwrap();
                assert!(sol.residuals[0].abs() < 1e-12 && sol.residuals[1].abs() < 1e-12);
                assert!(sol.m1 > 0.0 && sol.m2 > 0.0);
            }
        }
    }

    #[test]
    fn reduced_system_at_large_width() {
        // As ψ₂ → ∞ the solution satisfies μ₁²m₁m₂ + (m₂−m₁)/ψ₁ = 0 and λm₁ + μ₂²m₁ + μ₁²m₂ = 1,
        // with O(ψ₁/ψ₂) defects at finite width.
        let m = mo();
        let reduced = |psi2: f64, l: f64| {
            let s = RfSetting::reference(psi2);
            let sol = solve_stieltjes(l, &s, &m).unwrap();
            let t1 = m.mu1_sq() * sol.m1 * sol.m2 + (sol.m2 - sol.m1) / s.psi1;
            let t2 = l * sol.m1 + m.mu2_sq * sol.m1 + m.mu1_sq() * sol.m2 - 1.0;
            t1.abs().max(t2.abs())
        };
        for &l in &[0.1, 0.35, 2.0] {
            assert!(reduced(1e6, l) < 4e-6, "{}", reduced(1e6, l));
            assert!(reduced(1e10, l) < 1e-8, "{}", reduced(1e10, l));
        }
    }

    #[test]
    fn implicit_matches_finite_difference() {
        for &psi2 in &[1.0, 4.0, 8.0] {
            let s = RfSetting::reference(psi2);
            for &l in &[0.05, 0.35, 3.0] {
                let a = risk(l, &s, &mo()).unwrap();
                let b = risk_fd(l, &s, &mo()).unwrap();
                assert!(((a.dm1 - b.dm1) / a.dm1).abs() < 1e-6);
                assert!(((a.dm2 - b.dm2) / a.dm2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn reference_risk_values() {
        // Values cross-checked against an independent Monte Carlo ridge simulation.
        let m = mo();
        let r = |p: f64, l: f64| risk(l, &RfSetting::reference(p), &m).unwrap().risk;
        assert!((r(2.0, 3.0) - 0.62364).abs() < 1e-4);
        assert!((r(2.0, 10.0) - 0.78888).abs() < 1e-4);
        assert!((r(8.0, 3.0) - 0.55870).abs() < 1e-4);
        assert!((r(8.0, 10.0) - 0.75751).abs() < 1e-4);
    }

    #[test]
    fn risk_at_least_noise_floor() {
        let m = mo();
        for &p in &[1.0, 2.0, 4.0, 8.0] {
            for i in 0..30 {
                let l = 10f64.powf(-2.0 + 4.0 * i as f64 / 29.0);
                let v = risk(l, &RfSetting::reference(p), &m).unwrap().risk;
                assert!(v >= 1.0 / 16.0, "{p} {l} {v}");
            }
        }
    }

    #[test]
    fn rejects_nonpositive_lambda() {
        assert!(solve_stieltjes(0.0, &RfSetting::reference(2.0), &mo()).is_err());
    }
}
