//! Truncation-index selection over top-k loss profiles, and the
//! decomposition-rate quantities ε_inv, ε_flat, 𝒥(κ) and t_n.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub mod planted;

/// Three-point second-derivative estimates at interior grid points.
pub fn second_derivatives(points: &[(f64, f64)]) -> Result<Vec<f64>> {
    if points.len() < 3 {
        return invalid("curvature estimates need at least 3 points");
    }
    Ok(points
        .windows(3)
        .map(|w| {
            let ((x0, y0), (x1, y1), (x2, y2)) = (w[0], w[1], w[2]);
            2.0 * (y0 / ((x0 - x1) * (x0 - x2)) + y1 / ((x1 - x0) * (x1 - x2)) + y2 / ((x2 - x0) * (x2 - x1)))
        })
        .collect())
}

/// Fraction of interior points with a negative curvature estimate.
pub fn conv_err(points: &[(f64, f64)]) -> Result<f64> {
    let d = second_derivatives(points)?;
    Ok(d.iter().filter(|&&v| v < 0.0).count() as f64 / d.len() as f64)
}

/// Minimum of the interior curvature estimates.
pub fn curvature(points: &[(f64, f64)]) -> Result<f64> {
    Ok(second_derivatives(points)?.into_iter().fold(f64::INFINITY, f64::min))
}

/// Largest slope magnitude between adjacent points.
pub fn lipschitz(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return invalid("Lipschitz estimate needs at least 2 points");
    }
    let mut m = 0.0f64;
    for w in points.windows(2) {
        let dx = w[1].0 - w[0].0;
        if dx == 0.0 {
            return invalid("duplicate hp value");
        }
        m = m.max(((w[1].1 - w[0].1) / dx).abs());
    }
    Ok(m)
}

/// φ_n^k(θ_i) for one width: `phi[i][k-1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurveGrid {
    pub hp: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub width: usize,
}

impl LossCurveGrid {
    pub fn new(hp: Vec<f64>, phi: Vec<Vec<f64>>) -> Result<Self> {
        if hp.is_empty() || phi.len() != hp.len() {
            return invalid("one profile row per hp value is required");
        }
        if hp.windows(2).any(|w| !(w[1] > w[0])) {
            return invalid("hp axis must be strictly increasing");
        }
        let width = phi[0].len();
        if width == 0 || phi.iter().any(|r| r.len() != width) {
            return invalid("every profile row must span k = 1..n");
        }
        Ok(Self { hp, phi, width })
    }

    pub fn g(&self) -> usize {
        self.hp.len()
    }

    pub fn total(&self) -> Vec<(f64, f64)> {
        self.hp.iter().zip(&self.phi).map(|(&x, r)| (x, r[self.width - 1])).collect()
    }

    pub fn top(&self, kappa: &[usize]) -> Vec<(f64, f64)> {
        self.hp.iter().zip(&self.phi).zip(kappa).map(|((&x, r), &k)| (x, r[k - 1])).collect()
    }

    pub fn residual(&self, kappa: &[usize]) -> Vec<(f64, f64)> {
        self.hp
            .iter()
            .zip(&self.phi)
            .zip(kappa)
            .map(|((&x, r), &k)| (x, r[self.width - 1] - r[k - 1]))
            .collect()
    }

    fn check_kappa(&self, kappa: &[usize]) -> Result<()> {
        if kappa.len() != self.g() {
            return invalid("truncation vector length differs from the hp grid");
        }
        if let Some(&k) = kappa.iter().find(|&&k| k == 0 || k > self.width) {
            return invalid(format!("truncation index {k} outside [1, {}]", self.width));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToleranceConfig {
    pub eps_cvx: f64,
    pub eps_amin: f64,
    pub tau_grid: Vec<f64>,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { eps_cvx: 0.15, eps_amin: 1.0, tau_grid: vec![0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0] }
    }
}

/// Mean absolute head gap plus weighted residual Lipschitz constants.
pub fn proxy_objective(
    kappa: &[usize],
    tau1: f64,
    tau2: f64,
    pn: &LossCurveGrid,
    pmax: &LossCurveGrid,
) -> Result<f64> {
    if pn.hp != pmax.hp {
        return invalid("profiles use different hp grids");
    }
    pn.check_kappa(kappa)?;
    pmax.check_kappa(kappa)?;
    Ok(objective_unchecked(kappa, tau1, tau2, pn, pmax))
}

fn objective_unchecked(kappa: &[usize], tau1: f64, tau2: f64, pn: &LossCurveGrid, pmax: &LossCurveGrid) -> f64 {
    let g = pn.g();
    let head: f64 =
        (0..g).map(|i| (pn.phi[i][kappa[i] - 1] - pmax.phi[i][kappa[i] - 1]).abs()).sum::<f64>() / g as f64;
    let mut v = head;
    if g >= 2 {
        if tau1 != 0.0 {
            v += tau1 * lipschitz(&pn.residual(kappa)).unwrap_or(0.0);
        }
        if tau2 != 0.0 {
            v += tau2 * lipschitz(&pmax.residual(kappa)).unwrap_or(0.0);
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyMinimum {
    pub kappa: Vec<usize>,
    pub objective: f64,
    pub sweeps: usize,
    pub cap_hit: bool,
    /// Objective after each full sweep.
    pub history: Vec<f64>,
}

pub const SWEEP_CAP: usize = 50;

/// Coordinate descent from κ = ⌊n/2⌋ until no coordinate changes.
pub fn minimize_proxy(pn: &LossCurveGrid, pmax: &LossCurveGrid, tau1: f64, tau2: f64) -> Result<ProxyMinimum> {
    if pn.hp != pmax.hp {
        return invalid("profiles use different hp grids");
    }
    if pn.width > pmax.width {
        return invalid("the reference profile must be at least as wide");
    }
    let n = pn.width;
    let g = pn.g();
    let mut kappa = vec![(n / 2).max(1); g];
    let mut history = Vec::new();
    let mut sweeps = 0;
    loop {
        let mut changed = false;
        for i in 0..g {
            let cur = kappa[i];
            let mut best_k = cur;
            let mut best = f64::INFINITY;
            let mut cur_score = f64::INFINITY;
            for k in 1..=n {
                kappa[i] = k;
                let s = objective_unchecked(&kappa, tau1, tau2, pn, pmax);
                if k == cur {
                    cur_score = s;
                }
                if s < best {
                    best = s;
                    best_k = k;
                }
            }
            kappa[i] = if cur_score <= best { cur } else { best_k };
            changed |= kappa[i] != cur;
        }
        sweeps += 1;
        history.push(objective_unchecked(&kappa, tau1, tau2, pn, pmax));
        if !changed || sweeps >= SWEEP_CAP {
            let objective = *history.last().unwrap();
            return Ok(ProxyMinimum { kappa, objective, sweeps, cap_hit: changed, history });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KhatAttempt {
    pub tau: (f64, f64),
    /// τ after multiplying by (mean |φ|)/(hp range).
    pub tau_effective: (f64, f64),
    pub kappa: Vec<usize>,
    pub e_cvx: f64,
    pub delta: f64,
    pub objective: f64,
    pub cap_hit: bool,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum KhatOutcome {
    Accepted { kappa: Vec<usize>, tau: (f64, f64), attempts: Vec<KhatAttempt> },
    Fail { attempts: Vec<KhatAttempt> },
}

impl KhatOutcome {
    pub fn kappa(&self) -> Option<&[usize]> {
        match self {
            Self::Accepted { kappa, .. } => Some(kappa),
            Self::Fail { .. } => None,
        }
    }
}

/// τ pairs from 𝒯×𝒯 ordered by (τ₁+τ₂, τ₁).
pub fn tau_pairs(grid: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = grid.iter().flat_map(|&a| grid.iter().map(move |&b| (a, b))).collect();
    v.sort_by(|x, y| (x.0 + x.1).total_cmp(&(y.0 + y.1)).then(x.0.total_cmp(&y.0)));
    v
}

fn argmin_idx(curve: &[(f64, f64)]) -> usize {
    let mut b = 0;
    for (i, p) in curve.iter().enumerate() {
        if p.1 < curve[b].1 {
            b = i;
        }
    }
    b
}

/// Select κ̂(n) for every width below the largest.
pub fn compute_khat(profiles: &BTreeMap<usize, LossCurveGrid>, tol: &ToleranceConfig) -> Result<BTreeMap<usize, KhatOutcome>> {
    if tol.tau_grid.iter().any(|&t| t < 0.0) {
        return invalid("tau candidates must be nonnegative");
    }
    let (&nmax, pmax) = profiles.iter().next_back().ok_or_else(|| crate::Error::Invalid("no profiles".into()))?;
    let pairs = tau_pairs(&tol.tau_grid);
    let mut out = BTreeMap::new();
    for (&n, pn) in profiles.range(..nmax) {
        if pn.g() < 3 {
            return invalid("truncation selection needs at least 3 hp points");
        }
        let range = pn.hp[pn.g() - 1] - pn.hp[0];
        let mean_abs = pn.total().iter().chain(pmax.total().iter()).map(|p| p.1.abs()).sum::<f64>() / (2 * pn.g()) as f64;
        let unit = mean_abs / range;
        let tot_n = argmin_idx(&pn.total());
        let tot_max = argmin_idx(&pmax.total());
        let mut attempts = Vec::new();
        let mut accepted = None;
        for &(t1, t2) in &pairs {
            let m = minimize_proxy(pn, pmax, t1 * unit, t2 * unit)?;
            let (top_n, top_max) = (pn.top(&m.kappa), pmax.top(&m.kappa));
            let e_cvx = conv_err(&top_n)?.max(conv_err(&top_max)?);
            let delta = (argmin_idx(&top_n) as f64 - tot_n as f64)
                .abs()
                .max((argmin_idx(&top_max) as f64 - tot_max as f64).abs());
            let ok = e_cvx <= tol.eps_cvx && delta <= tol.eps_amin;
            attempts.push(KhatAttempt {
                tau: (t1, t2),
                tau_effective: (t1 * unit, t2 * unit),
                kappa: m.kappa.clone(),
                e_cvx,
                delta,
                objective: m.objective,
                cap_hit: m.cap_hit,
                accepted: ok,
            });
            if ok {
                accepted = Some((m.kappa, (t1, t2)));
                break;
            }
        }
        out.insert(
            n,
            match accepted {
                Some((kappa, tau)) => KhatOutcome::Accepted { kappa, tau, attempts },
                None => KhatOutcome::Fail { attempts },
            },
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionGaps {
    pub eps_inv: f64,
    pub eps_flat: f64,
    pub j: f64,
    pub feasible: bool,
    pub mu_top_n: f64,
    pub mu_top_max: f64,
}

/// ε_inv, ε_flat and 𝒥 = 2√ε_inv + ε_flat for one truncation vector.
pub fn decomposition_gaps(pn: &LossCurveGrid, pmax: &LossCurveGrid, kappa: &[usize]) -> Result<DecompositionGaps> {
    if pn.hp != pmax.hp {
        return invalid("profiles use different hp grids");
    }
    pn.check_kappa(kappa)?;
    pmax.check_kappa(kappa)?;
    let (top_n, top_max) = (pn.top(kappa), pmax.top(kappa));
    let mu_n = curvature(&top_n)?;
    let mu_max = curvature(&top_max)?;
    let feasible = mu_n > 0.0 && mu_max > 0.0;
    let sup = top_n.iter().zip(&top_max).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max);
    let eps_inv = sup / mu_n.max(mu_max);
    let eps_flat = lipschitz(&pn.residual(kappa))? / curvature(&pn.total())?
        + lipschitz(&pmax.residual(kappa))? / curvature(&pmax.total())?;
    Ok(DecompositionGaps { eps_inv, eps_flat, j: 2.0 * eps_inv.sqrt() + eps_flat, feasible, mu_top_n: mu_n, mu_top_max: mu_max })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TnResult {
    pub t_n: f64,
    pub kappa: Vec<usize>,
    pub gaps: DecompositionGaps,
    pub infeasible: usize,
}

/// t_n = min 𝒥 over the feasible candidates.
pub fn decomposition_hp_gap(pn: &LossCurveGrid, pmax: &LossCurveGrid, candidates: &[Vec<usize>]) -> Result<Option<TnResult>> {
    let mut best: Option<TnResult> = None;
    let mut infeasible = 0;
    for k in candidates {
        let g = decomposition_gaps(pn, pmax, k)?;
        if !g.feasible || !g.j.is_finite() {
            infeasible += 1;
            continue;
        }
        if best.as_ref().is_none_or(|b| g.j < b.t_n) {
            best = Some(TnResult { t_n: g.j, kappa: k.clone(), gaps: g, infeasible: 0 });
        }
    }
    Ok(best.map(|mut b| {
        b.infeasible = infeasible;
        b
    }))
}

/// Constant truncation vectors κ = (k, …, k) for k = 1..n.
pub fn constant_candidates(n: usize, g: usize) -> Vec<Vec<usize>> {
    (1..=n).map(|k| vec![k; g]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pts(ys: &[f64]) -> Vec<(f64, f64)> {
        ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect()
    }

    #[test]
    fn conv_err_examples() {
        assert_eq!(conv_err(&pts(&[0., 1., 4., 9.])).unwrap(), 0.0);
        assert_eq!(conv_err(&pts(&[0., -1., -4., -9.])).unwrap(), 1.0);
        assert!((conv_err(&pts(&[0., 1., 0., 3., 8.])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(conv_err(&pts(&[0., 1.])).is_err());
        let uneven = [(0.0, 0.0), (1.0, 1.0), (3.0, 9.0)];
        assert!((second_derivatives(&uneven).unwrap()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz(&[(0., 0.), (1., 3.), (2., 4.)]).unwrap(), 3.0);
        assert_eq!(lipschitz(&pts(&[2., 2., 2.])).unwrap(), 0.0);
        let aff: Vec<_> = (0..5).map(|i| (i as f64 * 0.3, -2.5 * i as f64 * 0.3 + 1.0)).collect();
        assert!((lipschitz(&aff).unwrap() - 2.5).abs() < 1e-12);
        assert!(lipschitz(&[(1., 0.), (1., 2.)]).is_err());
    }

    fn grid(hp: &[f64], rows: Vec<Vec<f64>>) -> LossCurveGrid {
        LossCurveGrid::new(hp.to_vec(), rows).unwrap()
    }

    #[test]
    fn proxy_objective_examples() {
        let hp = [0.0, 1.0, 2.0];
        let rows = vec![vec![1.0, 2.0, 2.0], vec![0.5, 1.0, 1.0], vec![1.0, 2.0, 2.0]];
        let p = grid(&hp, rows.clone());
        assert_eq!(proxy_objective(&[1, 2, 3], 0.0, 0.0, &p, &p).unwrap(), 0.0);
        // Residuals (1, 0, 0) on both widths: Lipschitz constant 1 each.
        assert_eq!(proxy_objective(&[1, 2, 3], 1.0, 1.0, &p, &p).unwrap(), 2.0);
        let mut other = rows;
        other[1][0] = 0.8;
        let q = grid(&hp, other);
        let v = proxy_objective(&[1, 1, 1], 0.0, 0.0, &p, &q).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
        assert!(proxy_objective(&[1, 4, 1], 0.0, 0.0, &p, &q).is_err());
    }

    #[test]
    fn single_coordinate_is_exhaustive() {
        let p = grid(&[0.0], vec![vec![3.0, 1.0, 4.0, 1.5, 5.0]]);
        let q = grid(&[0.0], vec![vec![0.0, 1.2, 0.0, 1.4, 0.0]]);
        let m = minimize_proxy(&p, &q, 0.0, 0.0).unwrap();
        assert_eq!(m.kappa, vec![4]);
        assert!(!m.cap_hit);
    }

    fn brute_force(pn: &LossCurveGrid, pm: &LossCurveGrid, t1: f64, t2: f64) -> (f64, Vec<usize>) {
        let (g, n) = (pn.g(), pn.width);
        let mut best = (f64::INFINITY, vec![]);
        let total = n.pow(g as u32);
        for code in 0..total {
            let mut c = code;
            let k: Vec<usize> = (0..g)
                .map(|_| {
                    let v = c % n + 1;
                    c /= n;
                    v
                })
                .collect();
            let v = proxy_objective(&k, t1, t2, pn, pm).unwrap();
            if v < best.0 {
                best = (v, k);
            }
        }
        best
    }

    fn random_profile(seed: u64, g: usize, n: usize) -> LossCurveGrid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let hp: Vec<f64> = (0..g).map(|i| i as f64).collect();
        let rows = (0..g)
            .map(|_| {
                let mut acc = 0.0;
                (0..n).map(|_| {
                    acc += rng.random_range(-1.0..1.0);
                    acc
                })
                .collect()
            })
            .collect();
        grid(&hp, rows)
    }

    #[test]
    fn separable_case_matches_brute_force_on_small_instances() {
        for seed in 0..20 {
            let pn = random_profile(seed, 3, 8);
            let pm = random_profile(seed + 100, 3, 8);
            let m = minimize_proxy(&pn, &pm, 0.0, 0.0).unwrap();
            let (best, _) = brute_force(&pn, &pm, 0.0, 0.0);
            assert!((m.objective - best).abs() < 1e-12);
            assert_eq!(m.sweeps, if m.kappa == vec![4; 3] { 1 } else { m.sweeps });
            assert!(m.sweeps <= 2);
        }
    }

    #[test]
    fn coupled_case_is_coordinatewise_optimal() {
        for seed in 0..20 {
            let pn = random_profile(seed, 3, 8);
            let pm = random_profile(seed + 100, 3, 8);
            let m = minimize_proxy(&pn, &pm, 0.3, 0.2).unwrap();
            let (best, _) = brute_force(&pn, &pm, 0.3, 0.2);
            assert!(m.objective >= best - 1e-12);
            for i in 0..3 {
                for k in 1..=8 {
                    let mut kk = m.kappa.clone();
                    kk[i] = k;
                    assert!(proxy_objective(&kk, 0.3, 0.2, &pn, &pm).unwrap() >= m.objective - 1e-12, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn tau_pair_order() {
        let p = tau_pairs(&[0.0, 1.0, 0.5]);
        assert_eq!(p[0], (0.0, 0.0));
        assert_eq!(p[1], (0.0, 0.5));
        assert_eq!(p[2], (0.5, 0.0));
        assert_eq!(*p.last().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn coinciding_curves_accept_first_pair() {
        let hp: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let rows = |n: usize| -> Vec<Vec<f64>> {
            hp.iter().map(|&x| (1..=n).map(|k| (x - 2.0).powi(2) * k as f64 / n as f64 - 1.0).collect()).collect()
        };
        let mut m = BTreeMap::new();
        m.insert(4usize, grid(&hp, rows(4)));
        m.insert(8usize, grid(&hp, rows(8)));
        let out = compute_khat(&m, &ToleranceConfig::default()).unwrap();
        match &out[&4] {
            KhatOutcome::Accepted { tau, .. } => assert_eq!(*tau, (0.0, 0.0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn concave_profiles_fail() {
        let hp: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let rows = |n: usize, s: f64| -> Vec<Vec<f64>> {
            hp.iter().map(|&x| (1..=n).map(|k| -s * (x - 2.5).powi(2) * k as f64).collect()).collect()
        };
        let mut m = BTreeMap::new();
        m.insert(4usize, grid(&hp, rows(4, 1.0)));
        m.insert(8usize, grid(&hp, rows(8, 1.3)));
        let out = compute_khat(&m, &ToleranceConfig::default()).unwrap();
        assert!(matches!(out[&4], KhatOutcome::Fail { .. }));
    }

    #[test]
    fn decomposition_gap_examples() {
        let hp: Vec<f64> = (0..5).map(|i| i as f64 * 0.5).collect();
        let conv = |shift: f64, n: usize| -> Vec<Vec<f64>> {
            hp.iter().map(|&x| vec![(x - 1.0 - shift).powi(2); n]).collect()
        };
        let a = grid(&hp, conv(0.0, 3));
        let g = decomposition_gaps(&a, &a, &[2; 5]).unwrap();
        assert_eq!((g.eps_inv, g.eps_flat, g.j), (0.0, 0.0, 0.0));
        assert!(g.feasible);
        let neg: Vec<Vec<f64>> = hp.iter().map(|&x| vec![-(x - 1.0).powi(2); 3]).collect();
        assert!(!decomposition_gaps(&grid(&hp, neg.clone()), &grid(&hp, neg), &[1; 5]).unwrap().feasible);
        // (x−1.1)² − (x−1)² = −0.2x + 0.21, sup over x ∈ [0, 2] is 0.21; curvature 2.
        let b = grid(&hp, conv(0.1, 3));
        let g = decomposition_gaps(&b, &a, &[3; 5]).unwrap();
        assert!((g.eps_inv - 0.21 / 2.0).abs() < 1e-12);
        assert_eq!(g.eps_flat, 0.0);
    }

    proptest! {
        #[test]
        fn descent_is_monotone(seed in 0u64..500, t1 in 0.0f64..2.0, t2 in 0.0f64..2.0, g in 1usize..5, n in 2usize..10) {
            let pn = random_profile(seed, g, n);
            let pm = random_profile(seed + 7, g, n + 3);
            let m = minimize_proxy(&pn, &pm, t1, t2).unwrap();
            let init = proxy_objective(&vec![(n / 2).max(1); g], t1, t2, &pn, &pm).unwrap();
            prop_assert!(m.history[0] <= init + 1e-12);
            for w in m.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn accepted_pair_is_first_acceptable(seed in 0u64..200) {
            let mut m = BTreeMap::new();
            m.insert(6usize, random_profile(seed, 4, 6));
            m.insert(9usize, random_profile(seed + 1, 4, 9));
            let tol = ToleranceConfig { eps_cvx: 0.5, eps_amin: 1.0, tau_grid: vec![0.0, 0.1, 1.0] };
            let out = compute_khat(&m, &tol).unwrap();
            let attempts = match &out[&6] { KhatOutcome::Accepted { attempts, .. } | KhatOutcome::Fail { attempts } => attempts };
            for a in &attempts[..attempts.len() - 1] {
                prop_assert!(!a.accepted);
            }
            let order = tau_pairs(&tol.tau_grid);
            for (a, p) in attempts.iter().zip(order) {
                prop_assert_eq!(a.tau, p);
            }
        }
    }
}
