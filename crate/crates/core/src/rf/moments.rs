use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const GH_NODES: usize = 201;

#[derive(Clone, Copy, Debug)]
pub enum RfActivation {
    Linear,
    Tanh,
    Relu,
    /// Function and derivative.
    Custom(fn(f64) -> f64, fn(f64) -> f64),
}

impl RfActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => invalid(format!("unknown activation {other}")),
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Self::Linear => z,
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
            Self::Custom(f, _) => f(z),
        }
    }

    fn deriv(&self, z: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::Tanh => 1.0 - z.tanh().powi(2),
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Custom(_, df) => df(z),
        }
    }
}

/// Activation centred and scaled to unit Gaussian norm: (σ(z) − mean)/sd.
#[derive(Clone, Copy, Debug)]
pub struct NormalizedActivation {
    pub act: RfActivation,
    pub mean: f64,
    pub sd: f64,
    pub mu1: f64,
    pub mu2_sq: f64,
}

impl NormalizedActivation {
    pub fn eval(&self, z: f64) -> f64 {
        (self.act.eval(z) - self.mean) / self.sd
    }
}

/// Probabilists' Gauss–Hermite rule with weights summing to one (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    (pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1 / total).collect())
}

fn gh_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(GH_NODES))
}

/// Normalize an activation and compute its first Hermite coefficient.
///
/// ReLU uses closed-form half-Gaussian moments; everything else uses
/// Gauss–Hermite quadrature.
pub fn hermite_moments(act: RfActivation) -> Result<NormalizedActivation> {
    let (mean, var, d1) = match act {
        RfActivation::Relu => {
            let m = 1.0 / (2.0 * PI).sqrt();
            (m, 0.5 - m * m, 0.5)
        }
        RfActivation::Linear => (0.0, 1.0, 1.0),
        _ => {
            let (x, w) = gh_rule();
            let m: f64 = x.iter().zip(w).map(|(&z, &wi)| wi * act.eval(z)).sum();
            let v: f64 = x.iter().zip(w).map(|(&z, &wi)| wi * (act.eval(z) - m).powi(2)).sum();
            let d: f64 = x.iter().zip(w).map(|(&z, &wi)| wi * act.deriv(z)).sum();
            (m, v, d)
        }
    };
    if !(var > 1e-14) {
        return invalid("activation has zero Gaussian variance");
    }
    let sd = var.sqrt();
    let mu1 = d1 / sd;
    if mu1 == 0.0 {
        return invalid("activation has zero first Hermite coefficient");
    }
    Ok(NormalizedActivation { act, mean, sd, mu1, mu2_sq: (1.0 - mu1 * mu1).max(0.0) })
}

/// Hermite coefficients of the student (μ₁, μ₂²) and teacher (μ₁*, μ₂*²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMoments {
    pub mu1: f64,
    pub mu2_sq: f64,
    pub mu1_star: f64,
    pub mu2_star_sq: f64,
}

impl ActivationMoments {
    pub fn from_activations(student: &NormalizedActivation, teacher: &NormalizedActivation) -> Self {
        Self { mu1: student.mu1, mu2_sq: student.mu2_sq, mu1_star: teacher.mu1, mu2_star_sq: teacher.mu2_sq }
    }

    pub fn of(student: RfActivation, teacher: RfActivation) -> Result<Self> {
        Ok(Self::from_activations(&hermite_moments(student)?, &hermite_moments(teacher)?))
    }

    /// tanh student with ReLU teacher.
    pub fn tanh_relu() -> Self {
        Self::of(RfActivation::Tanh, RfActivation::Relu).expect("tanh and relu are valid")
    }

    pub fn mu1_sq(&self) -> f64 {
        self.mu1 * self.mu1
    }

    pub fn mu1_star_sq(&self) -> f64 {
        self.mu1_star * self.mu1_star
    }
}
