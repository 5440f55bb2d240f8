//! Acceptance checks. Each criterion prints one `[PASS]` or `[FAIL]` line and
//! the binary exits nonzero if any fails. Pass substrings as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- c4 c7`.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use hptransfer::decomposition::{decompose_record, sample_components};
use hptransfer::experiment::{rf_surfaces, surface_report, RfConfig};
use hptransfer::gridsim::{budget_ladder, fit_frontier, frontier, theory_exponents, Strategy, SyntheticLossFamily};
use hptransfer::hpcore::{classify_transfer, ArgminMode, TransferVerdict};
use hptransfer::rf::{
    calibrate_lambda_scale, closed_forms_inf, hermite_moments, monte_carlo_rf, rf_rates, risk, risk_fd,
    solve_stieltjes, ActivationMoments, RfActivation, RfSetting,
};
use hptransfer::rng::stream;
use hptransfer::trainer::{
    msgn_exact, newton_schulz, train, Activation, NetworkSpec, NsSchedule, OptimizerConfig, OptimizerKind, Task,
    TaskSpec, ValidationSet,
};
use hptransfer::trajectory::{linearized_total, loss_delta, record_training, EmaSchedule};
use hptransfer::truncation::planted::{invariant_head, linspace, DriftFamily};
use hptransfer::truncation::{
    compute_khat, constant_candidates, decomposition_hp_gap, minimize_proxy, proxy_objective, tau_pairs,
    KhatOutcome, LossCurveGrid, ToleranceConfig,
};

type Verdict = (bool, String);

fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    linspace(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn c1_rf_solver() -> Verdict {
    let t0 = Instant::now();
    let mo = ActivationMoments::tanh_relu();
    let (mut worst_res, mut worst_deriv) = (0.0f64, 0.0f64);
    let mut failures = 0;
    for psi2 in [1.0, 2.0, 4.0, 8.0, 1e6] {
        let s = RfSetting::reference(psi2);
        for l in logspace(1e-2, 1e2, 50) {
            match (solve_stieltjes(l, &s, &mo), risk(l, &s, &mo), risk_fd(l, &s, &mo)) {
                (Ok(sol), Ok(a), Ok(b)) => {
                    worst_res = worst_res.max(sol.residuals[0].abs()).max(sol.residuals[1].abs());
                    worst_deriv = worst_deriv.max(((a.dm1 - b.dm1) / a.dm1).abs()).max(((a.dm2 - b.dm2) / a.dm2).abs());
                }
                _ => failures += 1,
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        failures == 0 && worst_res < 1e-12 && worst_deriv < 1e-6 && secs < 30.0,
        format!("max residual {worst_res:.1e}, max derivative mismatch {worst_deriv:.1e}, {failures} solver failures, {secs:.1}s"),
    )
}

fn c2_rf_rates() -> Verdict {
    let t0 = Instant::now();
    let psi2: Vec<f64> = (2..=10).map(|k| 2f64.powi(k)).collect();
    let r = match rf_rates(&RfSetting::reference(1.0), &ActivationMoments::tanh_relu(), &psi2) {
        Ok(r) => r,
        Err(e) => return (false, format!("rate computation failed: {e}")),
    };
    let (l, h, s) = (r.loss_gap.exponent, r.hp_gap.exponent, r.subopt_gap.exponent);
    let secs = t0.elapsed().as_secs_f64();
    (
        (l + 1.0).abs() <= 0.1 && h <= -0.85 && s <= -1.8 && secs < 60.0,
        format!("loss-gap {l:.3} (want -1±0.1), hp-gap {h:.3} (want ≤ -0.85), subopt {s:.3} (want ≤ -1.8), {secs:.1}s"),
    )
}

fn c3_rf_monte_carlo() -> Verdict {
    let t0 = Instant::now();
    let (st, te) = (hermite_moments(RfActivation::Tanh).unwrap(), hermite_moments(RfActivation::Relu).unwrap());
    let mo = ActivationMoments::from_activations(&st, &te);
    let d = 300;
    let trials = 20;
    let seed = 11;
    let base = RfSetting::reference(2.0);
    let anchor = 10.0 * closed_forms_inf(&base, &mo).unwrap().lambda_star_inf;
    let target = risk(anchor, &base, &mo).unwrap().risk;
    let scale = match calibrate_lambda_scale(d, &base, &st, &te, anchor, target, trials, seed) {
        Ok(c) => c,
        Err(e) => return (false, format!("calibration failed: {e}")),
    };
    let lambdas = [0.1, 0.35, 1.0, 3.0];
    let (mut worst_se, mut worst_rel) = (0.0f64, 0.0f64);
    for psi2 in [2.0, 8.0] {
        let s = base.with_psi2(psi2);
        let est = monte_carlo_rf(d, &s, &st, &te, &lambdas, trials, seed + 1, scale).unwrap();
        for e in est {
            let th = risk(e.lambda, &s, &mo).unwrap().risk;
            worst_se = worst_se.max((th - e.mean).abs() / e.stderr);
            worst_rel = worst_rel.max(((th - e.mean) / e.mean).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        worst_se <= 3.0 && worst_rel <= 0.05 && secs < 600.0,
        format!("scale c={scale:.4}, worst |Δ|/se {worst_se:.2}, worst relative {worst_rel:.4}, {secs:.0}s"),
    )
}

fn c4_frontiers() -> Verdict {
    let t0 = Instant::now();
    let budgets = budget_ladder(1e6, 1e11, 3);
    let fits = |beta: f64| {
        let f = SyntheticLossFamily::new(1.0, beta, 1.0, 1.0, 2.0, 1).unwrap();
        let d = fit_frontier(&frontier(Strategy::Direct, &f, &budgets, 2.0, 32, 1).unwrap()).unwrap();
        let t = fit_frontier(&frontier(Strategy::Transfer, &f, &budgets, 2.0, 32, 1).unwrap()).unwrap();
        (-d.exponent, -t.exponent)
    };
    let (d1, t1) = fits(1.0);
    let (d2, t2) = fits(0.4);
    let (p1, q1) = theory_exponents(1.0, 1.0, 1, 2.0);
    let iff = (t1 > d1) == (classify_transfer(1.0, 1.0).unwrap() == TransferVerdict::FastUseful)
        && (t2 > d2) == (classify_transfer(1.0, 0.4).unwrap() == TransferVerdict::FastUseful);
    let secs = t0.elapsed().as_secs_f64();
    (
        (d1 - 0.40).abs() <= 0.05 && (t1 - 0.50).abs() <= 0.05 && (t2 - 0.33).abs() <= 0.05 && t2 < d2 && iff && secs < 300.0,
        format!(
            "β=1: direct {d1:.3} (theory {p1:.3}), transfer {t1:.3} (theory {q1:.3}); β=0.4: direct {d2:.3}, transfer {t2:.3}; {secs:.0}s"
        ),
    )
}

/// Per-run numbers from the shared desk sweep.
struct DeskRun {
    width: usize,
    lr: f64,
    seed: u64,
    trace_err: f64,
    full_err: f64,
    mci_err: f64,
    ema_err: f64,
    raw_err: f64,
}

struct DeskSweep {
    runs: Vec<DeskRun>,
    /// Time spent on the recorded sweep itself, without the raw-schedule reruns.
    secs: f64,
}

fn desk_sweep() -> &'static DeskSweep {
    static SWEEP: OnceLock<DeskSweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut secs = 0.0;
        let mut ts = TaskSpec::ball_indicator(16);
        ts.val_size = 1024;
        let task = Task::new(&ts, 0).unwrap();
        let mut runs = Vec::new();
        for n in [128, 256, 512] {
            let spec = NetworkSpec::mup(16, n, 1, Activation::Relu, 1, OptimizerKind::Adam);
            let val = ValidationSet::new(&spec, &task);
            for e in -8..=-4 {
                let lr = 2f64.powi(e);
                let opt = OptimizerConfig::new(OptimizerKind::Adam, lr, 500, 64);
                for seed in 0..2u64 {
                    let t0 = Instant::now();
                    let (rec, _) = record_training(&spec, &opt, &task, seed, &EmaSchedule::default(), &val, vec![], "").unwrap();
                    let dec = decompose_record(&rec, None).unwrap();
                    let sc = sample_components(&rec, &val, n, None).unwrap();
                    let phi = linearized_total(&rec).phi;
                    let matrix = phi - dec.vector_part;
                    let dl = loss_delta(&rec);
                    secs += t0.elapsed().as_secs_f64();
                    let (raw, _) = record_training(&spec, &opt, &task, seed, &EmaSchedule::raw(), &val, vec![], "").unwrap();
                    let rdl = loss_delta(&raw);
                    runs.push(DeskRun {
                        width: n,
                        lr,
                        seed,
                        trace_err: dec.max_trace_error,
                        full_err: ((dec.topk(n) - dec.phi) / dec.phi).abs(),
                        mci_err: ((sc.mean_total() - matrix) / matrix).abs(),
                        ema_err: ((phi - dl) / dl).abs(),
                        raw_err: ((linearized_total(&raw).phi - rdl) / rdl).abs(),
                    });
                }
            }
        }
        DeskSweep { runs, secs }
    })
}

fn c5_identities() -> Verdict {
    let s = desk_sweep();
    let max = |f: fn(&DeskRun) -> f64| s.runs.iter().map(f).fold(0.0, f64::max);
    let (t, f, m) = (max(|r| r.trace_err), max(|r| r.full_err), max(|r| r.mci_err));
    (
        t <= 1e-8 && f <= 1e-8 && m <= 1e-6 && s.secs < 1200.0,
        format!("{} runs: trace {t:.1e}, φ^n vs φ {f:.1e}, per-sample sum {m:.1e}; sweep {:.0}s", s.runs.len(), s.secs),
    )
}

fn c6_linearization() -> Verdict {
    let s = desk_sweep();
    let worst = s.runs.iter().max_by(|a, b| a.ema_err.total_cmp(&b.ema_err)).unwrap();
    let ema_med = median(s.runs.iter().map(|r| r.ema_err).collect());
    let raw_med = median(s.runs.iter().map(|r| r.raw_err).collect());
    (
        worst.ema_err <= 0.05 && raw_med > ema_med,
        format!(
            "worst EMA error {:.4} (n={}, lr={}, seed {}); median EMA {ema_med:.4} vs raw {raw_med:.4}",
            worst.ema_err, worst.width, worst.lr, worst.seed
        ),
    )
}

fn all_kappas(g: usize, n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n.pow(g as u32)).map(move |code| {
        let mut c = code;
        (0..g)
            .map(|_| {
                let v = c % n + 1;
                c /= n;
                v
            })
            .collect()
    })
}

/// Global minimum and the smallest value among single-coordinate moves away from it.
fn brute_force(pn: &LossCurveGrid, pm: &LossCurveGrid, t1: f64, t2: f64) -> (f64, f64) {
    let (g, n) = (pn.g(), pn.width);
    let f = |k: &[usize]| proxy_objective(k, t1, t2, pn, pm).unwrap();
    let (best, arg) = all_kappas(g, n).map(|k| (f(&k), k)).min_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
    let mut neighbour = f64::INFINITY;
    for i in 0..g {
        for v in (1..=n).filter(|&v| v != arg[i]) {
            let mut k = arg.clone();
            k[i] = v;
            neighbour = neighbour.min(f(&k));
        }
    }
    (best, neighbour)
}

fn random_profile(seed: u64, g: usize, n: usize) -> LossCurveGrid {
    let mut rng = stream(seed, "acceptance/profile");
    let hp: Vec<f64> = (0..g).map(|i| i as f64).collect();
    let rows = (0..g)
        .map(|_| {
            let mut acc = 0.0;
            (0..n)
                .map(|_| {
                    acc += rng.random_range(-1.0..1.0);
                    acc
                })
                .collect()
        })
        .collect();
    LossCurveGrid::new(hp, rows).unwrap()
}

fn c7_truncation() -> Verdict {
    let t0 = Instant::now();
    let hp = linspace(0.0, 1.0, 9);
    let mut worst_dev = 0usize;
    let mut failed = Vec::new();
    for k0 in [8, 32] {
        let p = invariant_head(&hp, &[64, 128, 256, 512], k0).unwrap();
        for (n, o) in compute_khat(&p, &ToleranceConfig::default()).unwrap() {
            match o.kappa() {
                Some(k) => worst_dev = worst_dev.max(k.iter().map(|&v| v.abs_diff(k0)).max().unwrap()),
                None => failed.push(format!("k0={k0} n={n}")),
            }
        }
    }
    // Separable objectives (τ = 0) must hit the global minimum; coupled ones
    // must do at least as well as every single-coordinate move off it.
    let (mut instances, mut not_global, mut mismatches) = (0, 0, 0);
    for g in 1..=3 {
        for n in 2..=8 {
            for seed in 0..5u64 {
                let pn = random_profile(1000 * g as u64 + 10 * n as u64 + seed, g, n);
                let pm = random_profile(7 + 1000 * g as u64 + 10 * n as u64 + seed, g, n);
                for (t1, t2) in tau_pairs(&ToleranceConfig::default().tau_grid) {
                    instances += 1;
                    let m = minimize_proxy(&pn, &pm, t1, t2).unwrap();
                    let (best, neighbour) = brute_force(&pn, &pm, t1, t2);
                    let global = (m.objective - best).abs() <= 1e-12;
                    not_global += usize::from(!global);
                    let ok = if t1 == 0.0 && t2 == 0.0 { global } else { m.objective <= neighbour + 1e-12 };
                    mismatches += usize::from(!ok);
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        failed.is_empty() && worst_dev <= 2 && mismatches == 0 && secs < 60.0,
        format!(
            "κ̂ worst |κ̂ − k0| {worst_dev}, failures {failed:?}; coordinate descent vs brute force: {mismatches}/{instances} mismatches ({not_global} not at the global minimum); {secs:.1}s"
        ),
    )
}

fn c8_rate_bound() -> Verdict {
    let f = DriftFamily::default();
    let hp = linspace(0.0, 1.0, 17);
    let inf = f.profile(&hp, None, 1024).unwrap();
    let widths = [16usize, 32, 64, 128, 256, 512];
    let mut profiles: BTreeMap<usize, LossCurveGrid> = widths.iter().map(|&n| (n, f.profile(&hp, Some(n), n).unwrap())).collect();
    profiles.insert(1024, inf.clone());
    let khat = compute_khat(&profiles, &ToleranceConfig::default()).unwrap();
    let mut ok = true;
    let mut cols = Vec::new();
    for &n in &widths {
        let mut cands = constant_candidates(n, hp.len());
        if let Some(k) = khat.get(&n).and_then(KhatOutcome::kappa) {
            cands.push(k.to_vec());
        }
        let b = f.hp_gap_on_grid(n, 0.0, 1.0, 100_001);
        match decomposition_hp_gap(&profiles[&n], &inf, &cands).unwrap() {
            Some(t) => {
                ok &= t.t_n >= b;
                cols.push(format!("n={n}: t={:.3} b={b:.3}", t.t_n));
            }
            None => {
                ok = false;
                cols.push(format!("n={n}: no feasible κ"));
            }
        }
    }
    (ok, cols.join(", "))
}

/// Final validation loss surfaces of the reduced slow-transfer sweep.
fn c9_transfer() -> Verdict {
    let t0 = Instant::now();
    let mut ts = TaskSpec::ball_indicator(64);
    ts.val_size = 4096;
    let task = Task::new(&ts, 0).unwrap();
    let lrs: Vec<f64> = (-7..=0).map(|e| 2f64.powi(e)).collect();
    let mut surfaces: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for k in 7..=11 {
        let n = 1usize << k;
        let spec = NetworkSpec::mup(64, n, 1, Activation::Relu, 1, OptimizerKind::Adam);
        let val = ValidationSet::new(&spec, &task);
        let curve = lrs
            .iter()
            .map(|&lr| {
                let opt = OptimizerConfig::new(OptimizerKind::Adam, lr, 4096, 64);
                let loss: f64 = (0..2u64)
                    .map(|seed| {
                        let out = train(&spec, &opt, &task, seed, |_| Ok(())).unwrap();
                        if out.status.is_completed() { val.loss(&out.weights).unwrap() } else { f64::INFINITY }
                    })
                    .sum::<f64>()
                    / 2.0;
                (lr.log2(), loss)
            })
            .collect();
        surfaces.insert(n as u64, curve);
    }
    let mlp = surface_report(&surfaces, ArgminMode::Parabolic);
    let rf_cfg = RfConfig { psi2: (3..=10).map(|k| 2f64.powi(k)).collect(), ..RfConfig::default() };
    let rf = surface_report(&rf_surfaces(&rf_cfg, 161).unwrap(), ArgminMode::Parabolic);
    let secs = t0.elapsed().as_secs_f64();
    let exps = |r: &hptransfer::experiment::SurfaceReport| {
        (r.alpha.as_ref().map(|f| -f.exponent), r.beta.as_ref().map(|f| -f.exponent))
    };
    match (mlp, rf) {
        (Ok(m), Ok(r)) => {
            let ((ma, mb), (ra, rb)) = (exps(&m), exps(&r));
            let slow = matches!((ma, mb), (Some(a), Some(b)) if b <= a / 2.0 + 0.1);
            let fast = matches!((ra, rb), (Some(a), Some(b)) if b > a / 2.0 + 0.1);
            (
                slow && fast && secs < 7200.0,
                format!(
                    "MLP α̂={ma:.3?} β̂={mb:.3?} (argmins {:?}); RF α̂={ra:.3?} β̂={rb:.3?}; {secs:.0}s",
                    m.gaps.theta_star.iter().map(|t| (t * 100.0).round() / 100.0).collect::<Vec<_>>()
                ),
            )
        }
        (m, r) => (false, format!("report failed: mlp {:?}, rf {:?}", m.err(), r.err())),
    }
}

fn c10_muon() -> Verdict {
    let t0 = Instant::now();
    let mut rng = stream(3, "acceptance/ns");
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r, c) = (rng.random_range(2..40), rng.random_range(2..40));
        let g = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let svd = g.svd(true, true);
        let k = r.min(c);
        let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(k, |_, _| rng.random_range(0.3..=1.0)));
        let m = svd.u.unwrap() * s * svd.v_t.unwrap();
        worst = worst.max((newton_schulz(&m, 5, NsSchedule::Default) - msgn_exact(&m)).amax());
    }
    let mut ts = TaskSpec::ball_indicator(16);
    ts.val_size = 1024;
    let task = Task::new(&ts, 0).unwrap();
    let n = 512;
    let share = |kind: OptimizerKind, lrs: &[f64]| -> (f64, f64) {
        let spec = NetworkSpec::mup(16, n, 2, Activation::Relu, 1, kind);
        let val = ValidationSet::new(&spec, &task);
        let best = lrs
            .iter()
            .map(|&lr| {
                let out = train(&spec, &OptimizerConfig::new(kind, lr, 500, 64), &task, 0, |_| Ok(())).unwrap();
                let l = if out.status.is_completed() { val.loss(&out.weights).unwrap() } else { f64::INFINITY };
                (lr, l)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        let opt = OptimizerConfig::new(kind, best, 500, 64);
        let (rec, _) = record_training(&spec, &opt, &task, 0, &EmaSchedule::default(), &val, vec![], "").unwrap();
        let d = decompose_record(&rec, None).unwrap();
        (best, (d.topk(10) / d.phi).abs())
    };
    let grid: Vec<f64> = (-8..=-2).map(|e| 2f64.powi(e)).collect();
    let (la, adam) = share(OptimizerKind::Adam, &grid);
    let (lm, muon) = share(OptimizerKind::Muon, &grid);
    let secs = t0.elapsed().as_secs_f64();
    (
        worst <= 0.05 && muon < adam,
        format!("Newton–Schulz worst entry error {worst:.4}; top-10 share at n={n}: Adam {adam:.3} (lr {la}), Muon {muon:.3} (lr {lm}); {secs:.0}s"),
    )
}

fn main() {
    let checks: [(&str, &str, fn() -> Verdict); 10] = [
        ("c1", "rf solver fidelity", c1_rf_solver),
        ("c2", "rf width rates", c2_rf_rates),
        ("c3", "rf monte carlo", c3_rf_monte_carlo),
        ("c4", "grid-search frontiers", c4_frontiers),
        ("c5", "decomposition identities", c5_identities),
        ("c6", "linearization faithfulness", c6_linearization),
        ("c7", "truncation algorithms", c7_truncation),
        ("c8", "decomposition rate bound", c8_rate_bound),
        ("c9", "slow vs fast transfer", c9_transfer),
        ("c10", "muon orthogonalization", c10_muon),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, f) in checks {
        if !filters.is_empty() && !filters.iter().any(|p| id == p || name.contains(p.as_str())) {
            continue;
        }
        let (pass, detail) = f();
        println!("[{}] {} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, id.to_uppercase());
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
