//! Compute-optimal grid search on a planted loss family: tune directly at one
//! width, or tune small and transfer to a large width.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hpcore::{fit_power_law, PowerLawFit};
use crate::rng::stream;

/// φ_n(θ) = φ∞* + A n^{−α} + (τ/2)‖θ − θ*(n)‖², θ*(n) = θ*(∞) + B n^{−β}·dir, on [0, 1]^h.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLossFamily {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub b: f64,
    pub tau_sc: f64,
    pub theta_star_inf: Vec<f64>,
    pub direction: Vec<f64>,
    pub phi_inf_star: f64,
}

impl SyntheticLossFamily {
    /// Family with θ*(∞) at the centre of the unit box and a diagonal drift.
    pub fn new(alpha: f64, beta: f64, a: f64, b: f64, tau_sc: f64, h: usize) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && a > 0.0 && b > 0.0 && tau_sc > 0.0) || h == 0 {
            return invalid("family parameters must be positive and h ≥ 1");
        }
        let u = 1.0 / (h as f64).sqrt();
        Ok(Self {
            alpha,
            beta,
            a,
            b,
            tau_sc,
            theta_star_inf: vec![0.5; h],
            direction: vec![u; h],
            phi_inf_star: 0.0,
        })
    }

    pub fn h(&self) -> usize {
        self.theta_star_inf.len()
    }

    pub fn theta_star(&self, n: f64) -> Vec<f64> {
        let s = self.b * n.powf(-self.beta);
        self.theta_star_inf.iter().zip(&self.direction).map(|(t, d)| t + s * d).collect()
    }

    /// Copy with θ*(∞) drawn uniformly from the central half of the box.
    pub fn placed(&self, seed: u64, index: usize) -> Self {
        let mut rng = stream(seed, &format!("gridsim/placement{index}"));
        let mut f = self.clone();
        for t in f.theta_star_inf.iter_mut() {
            *t = rng.random_range(0.25..0.75);
        }
        f
    }

    pub fn loss_gap(&self, n: f64) -> f64 {
        self.a * n.powf(-self.alpha)
    }

    pub fn hp_gap(&self, n: f64) -> f64 {
        self.b * n.powf(-self.beta)
    }

    pub fn suboptimality_gap(&self, n: f64) -> f64 {
        0.5 * self.tau_sc * self.hp_gap(n).powi(2)
    }
}

pub fn synthetic_phi(f: &SyntheticLossFamily, n: f64, theta: &[f64]) -> f64 {
    let ts = f.theta_star(n);
    let d2: f64 = theta.iter().zip(&ts).map(|(a, b)| (a - b).powi(2)).sum();
    let inf = if n.is_infinite() { 0.0 } else { f.loss_gap(n) };
    f.phi_inf_star + inf + 0.5 * f.tau_sc * d2
}

/// Regular grid with `m` points per axis at cell centres of [0, 1].
fn nearest_on_grid(theta: &[f64], m: u64) -> Vec<f64> {
    let mf = m as f64;
    theta
        .iter()
        .map(|&t| {
            let i = (t * mf - 0.5).round().clamp(0.0, mf - 1.0);
            (i + 0.5) / mf
        })
        .collect()
}

fn points_per_axis(points: f64, h: usize) -> u64 {
    if points < 1.0 {
        return 0;
    }
    let mut m = points.powf(1.0 / h as f64).floor() as u64;
    while ((m + 1) as f64).powi(h as i32) <= points {
        m += 1;
    }
    while m > 0 && (m as f64).powi(h as i32) > points {
        m -= 1;
    }
    m
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub flops: f64,
    pub r: f64,
}

impl Budget {
    pub fn new(flops: f64, r: f64) -> Result<Self> {
        if !(flops > 0.0) || !(r >= 1.0) {
            return invalid("budget needs F > 0 and r ≥ 1");
        }
        Ok(Self { flops, r })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Direct,
    Transfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub strategy: Strategy,
    pub budget: f64,
    pub n_star: u64,
    /// Final width for transfer; equals `n_star` for direct tuning.
    pub m_star: u64,
    pub suboptimality: f64,
    /// Per-axis grid half-spacing.
    pub resolution: f64,
    pub grid_points_per_axis: u64,
    pub cost: f64,
}

/// Width ladder 2³, 2⁴, …, 2²⁰.
pub fn width_ladder() -> Vec<u64> {
    (3..=20).map(|k| 1u64 << k).collect()
}

/// One tuning plan: width n with m points per axis, then (for transfer) a run at M.
#[derive(Clone, Copy, Debug)]
struct Plan {
    n: u64,
    m_final: u64,
    per_axis: u64,
    cost: f64,
}

fn plans(strategy: Strategy, budget: &Budget, h: usize) -> Vec<Plan> {
    let ladder = width_ladder();
    let cost = |w: u64| (w as f64).powf(budget.r);
    let mut out = Vec::new();
    for &n in &ladder {
        match strategy {
            Strategy::Direct => {
                let m = points_per_axis(budget.flops / cost(n), h);
                if m > 0 {
                    let c = (m as f64).powi(h as i32) * cost(n);
                    out.push(Plan { n, m_final: n, per_axis: m, cost: c });
                }
            }
            Strategy::Transfer => {
                for &big in ladder.iter().filter(|&&w| w > n) {
                    let left = budget.flops - cost(big);
                    let m = points_per_axis(left / cost(n), h);
                    if m > 0 {
                        let c = (m as f64).powi(h as i32) * cost(n) + cost(big);
                        out.push(Plan { n, m_final: big, per_axis: m, cost: c });
                    }
                }
            }
        }
    }
    out
}

fn evaluate(f: &SyntheticLossFamily, p: &Plan) -> f64 {
    let chosen = nearest_on_grid(&f.theta_star(p.n as f64), p.per_axis);
    synthetic_phi(f, p.m_final as f64, &chosen) - f.phi_inf_star
}

fn result(strategy: Strategy, budget: &Budget, p: &Plan, subopt: f64) -> SimResult {
    SimResult {
        strategy,
        budget: budget.flops,
        n_star: p.n,
        m_star: p.m_final,
        suboptimality: subopt,
        resolution: 0.5 / p.per_axis as f64,
        grid_points_per_axis: p.per_axis,
        cost: p.cost,
    }
}

fn run(strategy: Strategy, f: &SyntheticLossFamily, budget: &Budget, seed: u64) -> Result<SimResult> {
    let placed = f.placed(seed, 0);
    let ps = plans(strategy, budget, f.h());
    let best = ps
        .iter()
        .map(|p| (p, evaluate(&placed, p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| crate::Error::Invalid(format!("budget {} affords no run", budget.flops)))?;
    Ok(result(strategy, budget, best.0, best.1))
}

/// Tune on a grid at the best width the budget allows, for one grid placement.
pub fn run_direct(f: &SyntheticLossFamily, budget: &Budget, seed: u64) -> Result<SimResult> {
    run(Strategy::Direct, f, budget, seed)
}

/// Tune at width n, train once at width M with the tuned point, for one grid placement.
pub fn run_transfer(f: &SyntheticLossFamily, budget: &Budget, seed: u64) -> Result<SimResult> {
    run(Strategy::Transfer, f, budget, seed)
}

/// Plan minimizing the suboptimality averaged over `placements` random grid placements.
pub fn expected_run(
    strategy: Strategy,
    f: &SyntheticLossFamily,
    budget: &Budget,
    placements: usize,
    seed: u64,
) -> Result<SimResult> {
    let fams: Vec<SyntheticLossFamily> = (0..placements.max(1)).map(|i| f.placed(seed, i)).collect();
    let ps = plans(strategy, budget, f.h());
    let best = ps
        .par_iter()
        .map(|p| (p, fams.iter().map(|g| evaluate(g, p)).sum::<f64>() / fams.len() as f64))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| crate::Error::Invalid(format!("budget {} affords no run", budget.flops)))?;
    Ok(result(strategy, budget, best.0, best.1))
}

/// Expected frontier over a list of budgets.
pub fn frontier(
    strategy: Strategy,
    f: &SyntheticLossFamily,
    budgets: &[f64],
    r: f64,
    placements: usize,
    seed: u64,
) -> Result<Vec<SimResult>> {
    budgets.iter().map(|&b| expected_run(strategy, f, &Budget::new(b, r)?, placements, seed)).collect()
}

/// Log-log fit of suboptimality against budget. The frontier decays as F^{exponent}.
pub fn fit_frontier(results: &[SimResult]) -> Result<PowerLawFit> {
    if results.len() < 6 {
        return invalid("frontier fit needs at least 6 budgets");
    }
    let lo = results.iter().map(|r| r.budget).fold(f64::MAX, f64::min);
    let hi = results.iter().map(|r| r.budget).fold(f64::MIN, f64::max);
    if hi / lo < 1e3 {
        return invalid("frontier budgets must span at least 3 decades");
    }
    fit_power_law(&results.iter().map(|r| (r.budget, r.suboptimality)).collect::<Vec<_>>())
}

/// Frontier exponents predicted for direct tuning and for transfer.
pub fn theory_exponents(alpha: f64, beta: f64, h: usize, r: f64) -> (f64, f64) {
    let h = h as f64;
    (2.0 * alpha / (h * alpha + 2.0 * r), (alpha / r).min(2.0 * beta / (h * beta + r)))
}

/// Log-spaced budgets, `per_decade` points per decade over [lo, hi].
pub fn budget_ladder(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let k = ((hi / lo).log10() * per_decade as f64).round() as usize;
    (0..=k).map(|i| lo * 10f64.powf(i as f64 / per_decade as f64)).collect()
}

/// Resolution ladder ρ_k = ρ₀·2^{−k/2}.
pub fn resolution_ladder(rho0: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|k| rho0 * 2f64.powf(-(k as f64) / 2.0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(beta: f64, h: usize) -> SyntheticLossFamily {
        SyntheticLossFamily::new(1.0, beta, 1.0, 1.0, 2.0, h).unwrap()
    }

    #[test]
    fn phi_examples() {
        let f = fam(1.0, 1);
        let n = 16.0;
        assert!((synthetic_phi(&f, n, &f.theta_star(n)) - (f.phi_inf_star + 1.0 / 16.0)).abs() < 1e-15);
        assert!((synthetic_phi(&f, f64::INFINITY, &f.theta_star_inf) - f.phi_inf_star).abs() < 1e-15);
        let c = synthetic_phi(&f, f64::INFINITY, &f.theta_star(n)) - f.phi_inf_star;
        assert!((c - f.suboptimality_gap(n)).abs() < 1e-15);
        assert!((f.suboptimality_gap(n) - 1.0 / 256.0).abs() < 1e-15);
    }

    #[test]
    fn grid_helpers() {
        assert_eq!(points_per_axis(99.0, 2), 9);
        assert_eq!(points_per_axis(100.0, 2), 10);
        assert_eq!(points_per_axis(0.5, 1), 0);
        assert_eq!(nearest_on_grid(&[0.0, 0.99, 1.7], 4), vec![0.125, 0.875, 0.875]);
        let r = resolution_ladder(0.5, 3);
        assert!((r[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn budget_accounting_is_exact() {
        let f = fam(1.0, 2);
        for &b in &[1e5, 3e7, 1e10] {
            for s in [Strategy::Direct, Strategy::Transfer] {
                for p in plans(s, &Budget::new(b, 2.0).unwrap(), 2) {
                    let mut c = (p.per_axis as f64).powi(2) * (p.n as f64).powi(2);
                    if s == Strategy::Transfer {
                        c += (p.m_final as f64).powi(2);
                    }
                    assert_eq!(c, p.cost);
                    assert!(p.cost <= b);
                }
            }
            let r = run_transfer(&f, &Budget::new(b, 2.0).unwrap(), 4).unwrap();
            assert!(r.cost <= b);
        }
        assert!(run_direct(&f, &Budget::new(10.0, 2.0).unwrap(), 0).is_err());
    }

    #[test]
    fn strong_convexity_sandwich() {
        for h in [1usize, 2] {
            let f = fam(1.0, h).placed(9, 3);
            for &n in &[64.0, 1024.0] {
                for m in [3u64, 10, 41] {
                    let ts = f.theta_star(n);
                    let g = nearest_on_grid(&ts, m);
                    let dist2: f64 = g.iter().zip(&ts).map(|(a, b)| (a - b).powi(2)).sum();
                    let excess = synthetic_phi(&f, n, &g) - synthetic_phi(&f, n, &ts);
                    let rho = 0.5 / m as f64;
                    assert!(0.5 * f.tau_sc * dist2 <= excess + 1e-15);
                    assert!(excess <= 0.5 * f.tau_sc * rho * rho * h as f64 + 1e-15);
                }
            }
        }
    }

    fn budgets() -> Vec<f64> {
        budget_ladder(1e6, 1e11, 3)
    }

    #[test]
    fn direct_frontier_exponent_and_width_scaling() {
        let f = fam(1.0, 1);
        let res = frontier(Strategy::Direct, &f, &budgets(), 2.0, 32, 1).unwrap();
        let fit = fit_frontier(&res).unwrap();
        assert!((fit.exponent + 0.4).abs() < 0.05, "{}", fit.exponent);
        let nfit = fit_power_law(&res.iter().map(|r| (r.budget, r.n_star as f64)).collect::<Vec<_>>()).unwrap();
        assert!((nfit.exponent - 1.0 / 3.0).abs() < 0.1, "{}", nfit.exponent);
        let mut f2 = f.clone();
        f2.a *= 2.0;
        let fit2 = fit_frontier(&frontier(Strategy::Direct, &f2, &budgets(), 2.0, 32, 1).unwrap()).unwrap();
        assert!((fit2.exponent - fit.exponent).abs() < 0.05);
        assert!(fit2.log_prefactor > fit.log_prefactor);
    }

    #[test]
    fn transfer_wins_iff_beta_exceeds_half_alpha() {
        for h in [1usize, 2] {
            for &beta in &[0.3, 0.7, 1.0] {
                let f = fam(beta, h);
                let d = frontier(Strategy::Direct, &f, &budgets(), 2.0, 32, 2).unwrap();
                let t = frontier(Strategy::Transfer, &f, &budgets(), 2.0, 32, 2).unwrap();
                let (fd, ft) = (fit_frontier(&d).unwrap(), fit_frontier(&t).unwrap());
                let top = budgets().last().copied().unwrap();
                let (vd, vt) = (fd.predict(top), ft.predict(top));
                assert_eq!(vt < vd, beta > 0.5, "h={h} beta={beta}: direct {} transfer {}", fd.exponent, ft.exponent);
            }
        }
    }
}
