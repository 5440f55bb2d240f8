//! Random-features, grid-search, fitting and report commands.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::sweep::{csv_surfaces, profile_tn, sweep_surfaces, TnRow};
use super::{write_json, Context, GridsimConfig, Outcome, RfConfig, SurfaceSource};
use crate::error::{Error, Result};
use crate::gridsim::{
    budget_ladder, fit_frontier, frontier, synthetic_phi, theory_exponents, SimResult, Strategy, SyntheticLossFamily,
};
use crate::hpcore::{
    classify_transfer, estimate_gaps_with, fit_power_law, fit_power_law_offset, ArgminMode, GapEstimates, PowerLawFit,
    TransferVerdict,
};
use crate::rf::{
    calibrate_lambda_scale, closed_forms_inf, hermite_moments, monte_carlo_rf, numeric_leading_coefficients, rf_rates,
    risk, ActivationMoments, RfActivation, RfSetting,
};
use crate::table::{fmt_float, read_csv, write_csv};
use crate::truncation::planted::linspace;

fn rf_cfg(ctx: &Context) -> RfConfig {
    ctx.config.rf.clone().unwrap_or_default()
}

fn moments(c: &RfConfig) -> Result<ActivationMoments> {
    ActivationMoments::of(RfActivation::parse(&c.student)?, RfActivation::parse(&c.teacher)?)
}

fn lambdas(c: &RfConfig) -> Vec<f64> {
    linspace(c.lambda_min.ln(), c.lambda_max.ln(), c.lambda_count).into_iter().map(f64::exp).collect()
}

/// Asymptotic risk curves over the ridge grid, one per ψ₂.
pub fn cmd_rf_curve(ctx: &Context) -> Result<Outcome> {
    let c = rf_cfg(ctx);
    let mo = moments(&c)?;
    let ls = lambdas(&c);
    let rows: Vec<Vec<Vec<String>>> = ctx.install(|| {
        c.psi2
            .par_iter()
            .map(|&p| {
                let s = RfSetting::new(c.psi1, p, c.sigma_eps_sq)?;
                ls.iter()
                    .map(|&l| {
                        let r = risk(l, &s, &mo)?;
                        Ok(vec![fmt_float(p), fmt_float(l), fmt_float(r.risk), fmt_float(r.m1), fmt_float(r.m2), fmt_float(r.residual)])
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()
    })?;
    let path = ctx.path("rf/curve.csv");
    write_csv(&path, Some(&ctx.hash), &["psi2", "lambda", "risk", "m1", "m2", "residual"], &rows.concat())?;
    Ok(Outcome { artifacts: vec![path], failed: vec![] })
}

/// Loss, hp and suboptimality gaps against the closed-form infinite-width optimum.
pub fn cmd_rf_rates(ctx: &Context) -> Result<Outcome> {
    let c = rf_cfg(ctx);
    let mo = moments(&c)?;
    let rep = rf_rates(&RfSetting::new(c.psi1, 1.0, c.sigma_eps_sq)?, &mo, &c.psi2)?;
    let csv = ctx.path("rf/rates.csv");
    let rows: Vec<Vec<String>> = rep
        .rows
        .iter()
        .map(|r| {
            [r.psi2, r.lambda_star, r.risk_star, r.loss_gap, r.hp_gap, r.subopt_gap].iter().map(|&v| fmt_float(v)).collect()
        })
        .collect();
    write_csv(&csv, Some(&ctx.hash), &["psi2", "lambda_star", "risk_star", "loss_gap", "hp_gap", "subopt_gap"], &rows)?;
    let json = ctx.path("rf/rates.json");
    write_json(&json, &serde_json::json!({ "config_hash": ctx.hash, "report": rep }))?;
    Ok(Outcome { artifacts: vec![csv, json], failed: vec![] })
}

/// Finite-size ridge regression against the asymptotic curve.
pub fn cmd_rf_mc(ctx: &Context) -> Result<Outcome> {
    let c = rf_cfg(ctx);
    let (st, te) = (hermite_moments(RfActivation::parse(&c.student)?)?, hermite_moments(RfActivation::parse(&c.teacher)?)?);
    let mo = ActivationMoments::from_activations(&st, &te);
    let base = RfSetting::new(c.psi1, c.psi2[0], c.sigma_eps_sq)?;
    let anchor = 10.0 * closed_forms_inf(&base, &mo)?.lambda_star_inf;
    let scale = ctx.install(|| {
        calibrate_lambda_scale(c.mc_d, &base, &st, &te, anchor, risk(anchor, &base, &mo)?.risk, c.mc_trials, ctx.config.seed)
    })?;
    let ls = lambdas(&c);
    let mut rows = Vec::new();
    let mut out = Outcome::default();
    for &p in &c.psi2 {
        let s = base.with_psi2(p);
        match ctx.install(|| monte_carlo_rf(c.mc_d, &s, &st, &te, &ls, c.mc_trials, ctx.config.seed, scale)) {
            Ok(est) => {
                for e in est {
                    let theory = risk(e.lambda, &s, &mo).map(|r| r.risk).unwrap_or(f64::NAN);
                    rows.push(vec![fmt_float(p), fmt_float(e.lambda), fmt_float(e.penalty), fmt_float(e.mean), fmt_float(e.stderr), fmt_float(theory)]);
                }
            }
            Err(e) => out.failed.push(format!("psi2={p}: {e}")),
        }
    }
    let path = ctx.path("rf/mc.csv");
    write_csv(&path, Some(&ctx.hash), &["psi2", "lambda", "penalty", "mc_mean", "mc_stderr", "theory"], &rows)?;
    let cal = ctx.path("rf/mc_calibration.json");
    write_json(&cal, &serde_json::json!({ "config_hash": ctx.hash, "anchor_lambda": anchor, "scale": scale, "d": c.mc_d, "trials": c.mc_trials }))?;
    out.add(path);
    out.add(cal);
    Ok(out)
}

/// Infinite-width closed forms next to numerically derived width coefficients.
pub fn cmd_rf_closed_forms(ctx: &Context) -> Result<Outcome> {
    let c = rf_cfg(ctx);
    let mo = moments(&c)?;
    let s = RfSetting::new(c.psi1, f64::INFINITY, c.sigma_eps_sq)?;
    let cf = closed_forms_inf(&s, &mo)?;
    let num = numeric_leading_coefficients(&s, &mo)?;
    let path = ctx.path("rf/closed_forms.json");
    write_json(
        &path,
        &serde_json::json!({
            "config_hash": ctx.hash,
            "moments": mo,
            "closed_forms": cf,
            "numeric": num,
            "c_eta_discrepancy": cf.c_eta - num.c_eta,
            "c_lambda_discrepancy": cf.c_lambda - num.c_lambda,
        }),
    )?;
    Ok(Outcome { artifacts: vec![path], failed: vec![] })
}

fn family(g: &GridsimConfig, h: usize) -> Result<SyntheticLossFamily> {
    SyntheticLossFamily::new(g.alpha, g.beta, g.a, g.b, g.tau_sc, h)
}

fn frontiers(ctx: &Context) -> Result<(GridsimConfig, Vec<SimResult>, Vec<SimResult>)> {
    let g = ctx.config.gridsim.clone().unwrap_or_default();
    let f = family(&g, g.h)?;
    let budgets = budget_ladder(g.budget_min, g.budget_max, g.per_decade);
    let (d, t) = ctx.install(|| -> Result<_> {
        Ok((
            frontier(Strategy::Direct, &f, &budgets, g.r, g.placements, ctx.config.seed)?,
            frontier(Strategy::Transfer, &f, &budgets, g.r, g.placements, ctx.config.seed)?,
        ))
    })?;
    Ok((g, d, t))
}

fn frontier_rows(rs: &[SimResult]) -> Vec<Vec<String>> {
    rs.iter()
        .map(|r| {
            let s = serde_json::to_value(r.strategy).unwrap();
            vec![
                s.as_str().unwrap_or_default().to_owned(),
                fmt_float(r.budget),
                r.n_star.to_string(),
                r.m_star.to_string(),
                fmt_float(r.suboptimality),
                r.grid_points_per_axis.to_string(),
                fmt_float(r.resolution),
                fmt_float(r.cost),
            ]
        })
        .collect()
}

const FRONTIER_HEADER: [&str; 8] = ["strategy", "budget", "n_star", "m_star", "suboptimality", "points_per_axis", "resolution", "cost"];

/// Expected suboptimality of direct and transfer tuning over a budget ladder.
pub fn cmd_gridsim_run(ctx: &Context) -> Result<Outcome> {
    let (_, d, t) = frontiers(ctx)?;
    let path = ctx.path("gridsim/frontier.csv");
    write_csv(&path, Some(&ctx.hash), &FRONTIER_HEADER, &[frontier_rows(&d), frontier_rows(&t)].concat())?;
    Ok(Outcome { artifacts: vec![path], failed: vec![] })
}

/// Fitted frontier exponents against the predicted ones.
pub fn cmd_gridsim_frontier(ctx: &Context) -> Result<Outcome> {
    let (g, d, t) = frontiers(ctx)?;
    let csv = ctx.path("gridsim/frontier.csv");
    write_csv(&csv, Some(&ctx.hash), &FRONTIER_HEADER, &[frontier_rows(&d), frontier_rows(&t)].concat())?;
    let (fd, ft) = (fit_frontier(&d)?, fit_frontier(&t)?);
    let (pd, pt) = theory_exponents(g.alpha, g.beta, g.h, g.r);
    let json = ctx.path("gridsim/frontier.json");
    write_json(
        &json,
        &serde_json::json!({
            "config_hash": ctx.hash,
            "family": g,
            "direct": { "fit": fd, "predicted_exponent": -pd },
            "transfer": { "fit": ft, "predicted_exponent": -pt },
            "transfer_better_at_max_budget": t.last().map(|r| r.suboptimality) < d.last().map(|r| r.suboptimality),
            "verdict": classify_transfer(g.alpha, g.beta)?,
        }),
    )?;
    Ok(Outcome { artifacts: vec![csv, json], failed: vec![] })
}

/// Power-law fit of two columns of a CSV.
pub fn cmd_fit(ctx: &Context) -> Result<Outcome> {
    let f = ctx.config.fit.clone().ok_or_else(|| Error::Config("config has no [fit] section".into()))?;
    let (header, rows) = read_csv(std::path::Path::new(&f.input))?;
    let col = |n: &str| header.iter().position(|h| h == n).ok_or_else(|| Error::Config(format!("{} has no column `{n}`", f.input)));
    let (cx, cy) = (col(&f.x)?, col(&f.y)?);
    let pts = rows
        .iter()
        .map(|r| Ok((r[cx].trim().parse::<f64>().map_err(|e| Error::Invalid(e.to_string()))?, r[cy].trim().parse::<f64>().map_err(|e| Error::Invalid(e.to_string()))?)))
        .collect::<Result<Vec<_>>>()?;
    let plain = fit_power_law(&pts)?;
    let offset = if f.offset { Some(fit_power_law_offset(&pts)?) } else { None };
    let path = ctx.path("fit/fit.json");
    write_json(&path, &serde_json::json!({ "config_hash": ctx.hash, "input": f.input, "x": f.x, "y": f.y, "fit": plain, "offset_fit": offset }))?;
    Ok(Outcome { artifacts: vec![path], failed: vec![] })
}

/// Loss curves of the synthetic family (h = 1) at the configured widths,
/// plus a reference width 2³⁰ standing in for infinite width.
pub fn gridsim_surfaces(g: &GridsimConfig, widths: &[u64], points: usize) -> Result<BTreeMap<u64, Vec<(f64, f64)>>> {
    let f = family(g, 1)?;
    let hp = linspace(0.0, 1.0, points);
    Ok(widths
        .iter()
        .copied()
        .chain([1u64 << 30])
        .map(|n| (n, hp.iter().map(|&t| (t, synthetic_phi(&f, n as f64, &[t]))).collect()))
        .collect())
}

/// Asymptotic risk over ln λ, one curve per ψ₂, keyed by feature count ψ₂·d,
/// plus a reference at ψ₂ = 10⁶.
pub fn rf_surfaces(c: &RfConfig, points: usize) -> Result<BTreeMap<u64, Vec<(f64, f64)>>> {
    let mo = moments(c)?;
    let l0 = closed_forms_inf(&RfSetting::new(c.psi1, f64::INFINITY, c.sigma_eps_sq)?, &mo)?.lambda_star_inf;
    let hp = linspace((l0 / 8.0).ln(), (l0 * 8.0).ln(), points);
    c.psi2
        .iter()
        .copied()
        .chain([1e6])
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&p| {
            let s = RfSetting::new(c.psi1, p, c.sigma_eps_sq)?;
            let curve = hp.iter().map(|&h| Ok((h, risk(h.exp(), &s, &mo)?.risk))).collect::<Result<Vec<_>>>()?;
            Ok(((p * c.mc_d as f64).round() as u64, curve))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurfaceReport {
    pub proxy_width: u64,
    pub gaps: GapEstimates,
    pub alpha: Option<PowerLawFit>,
    pub beta: Option<PowerLawFit>,
    pub verdict: Option<TransferVerdict>,
    /// Why α or β could not be fitted.
    pub degenerate: Option<String>,
    /// Half the hp grid spacing: grid-level hp gaps below this are unresolved.
    pub resolution: f64,
}

/// Log-log least squares; two points give the exact slope.
fn loglog(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() == 2 {
        let (a, b) = (points[0], points[1]);
        let e = (b.1.ln() - a.1.ln()) / (b.0.ln() - a.0.ln());
        return Ok(PowerLawFit { exponent: e, log_prefactor: a.1.ln() - e * a.0.ln(), r_squared: 1.0, n_points: 2 });
    }
    fit_power_law(points)
}

/// α from loss gaps and β from hp gaps against the largest width, and the verdict.
pub fn surface_report(surfaces: &BTreeMap<u64, Vec<(f64, f64)>>, mode: ArgminMode) -> Result<SurfaceReport> {
    if surfaces.len() < 3 {
        return Err(Error::Invalid(format!("scaling fits need at least 3 widths, got {}", surfaces.len())));
    }
    let proxy = *surfaces.keys().next_back().unwrap();
    let gaps = estimate_gaps_with(surfaces, proxy, mode)?;
    let pick = |v: &[f64]| -> Vec<(f64, f64)> {
        gaps.widths.iter().zip(v).filter(|(&w, &g)| w != proxy && g > 0.0).map(|(&w, &g)| (w as f64, g)).collect()
    };
    let (pa, pb) = (pick(&gaps.a), pick(&gaps.b));
    let mut why = Vec::new();
    let alpha = if pa.len() >= 2 {
        Some(loglog(&pa)?)
    } else {
        why.push("loss gaps vanish: alpha undefined");
        None
    };
    let beta = if pb.len() >= 2 {
        Some(loglog(&pb)?)
    } else {
        why.push("hp gaps vanish: beta undefined");
        None
    };
    let verdict = match (&alpha, &beta) {
        (Some(a), Some(b)) if -a.exponent > 0.0 => Some(classify_transfer(-a.exponent, (-b.exponent).max(0.0))?),
        _ => None,
    };
    let hp = &surfaces[&proxy];
    let resolution = hp.windows(2).map(|w| (w[1].0 - w[0].0).abs()).fold(0.0, f64::max) / 2.0;
    Ok(SurfaceReport {
        proxy_width: proxy,
        gaps,
        alpha,
        beta,
        verdict,
        degenerate: if why.is_empty() { None } else { Some(why.join("; ")) },
        resolution,
    })
}

/// Scaling-law report: α, β, verdict, and t_n against b_n when a profile exists.
pub fn cmd_report(ctx: &Context) -> Result<Outcome> {
    let rc = &ctx.config.report;
    let surfaces = match rc.source {
        SurfaceSource::Sweep => sweep_surfaces(ctx)?,
        SurfaceSource::Csv => {
            let p = rc.path.as_ref().ok_or_else(|| Error::Config("report.path is required for csv surfaces".into()))?;
            csv_surfaces(std::path::Path::new(p))?
        }
        SurfaceSource::Gridsim => gridsim_surfaces(&ctx.config.gridsim.clone().unwrap_or_default(), &rc.widths, rc.grid_points)?,
        SurfaceSource::Rf => ctx.install(|| rf_surfaces(&rf_cfg(ctx), rc.grid_points))?,
    };
    let rep = surface_report(&surfaces, rc.argmin)?;
    let mut out = Outcome::default();
    let tn: Option<Vec<TnRow>> = match (rc.source, profile_tn(ctx)) {
        (SurfaceSource::Sweep, Some(Ok(t))) => Some(t),
        (SurfaceSource::Sweep, Some(Err(e))) => {
            out.failed.push(format!("t_n table: {e}"));
            None
        }
        _ => None,
    };
    let path = ctx.path("report.json");
    write_json(&path, &serde_json::json!({ "config_hash": ctx.hash, "source": rc.source, "report": rep, "tn_vs_bn": tn }))?;
    out.add(path);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_surfaces_are_degenerate() {
        let curve: Vec<(f64, f64)> = (0..9).map(|i| (i as f64, (i as f64 - 4.0).powi(2))).collect();
        let s: BTreeMap<u64, _> = [8u64, 16, 32].iter().map(|&w| (w, curve.clone())).collect();
        let r = surface_report(&s, ArgminMode::Grid).unwrap();
        assert!(r.alpha.is_none() && r.beta.is_none() && r.verdict.is_none());
        assert!(r.degenerate.unwrap().contains("alpha"));
        let two: BTreeMap<u64, _> = [8u64, 16].iter().map(|&w| (w, curve.clone())).collect();
        assert!(surface_report(&two, ArgminMode::Grid).is_err());
    }

    #[test]
    fn planted_family_exponents() {
        for (alpha, beta, verdict) in [(1.0, 1.0, TransferVerdict::FastUseful), (1.0, 0.4, TransferVerdict::NotFast)] {
            let g = GridsimConfig { alpha, beta, b: 0.2, ..GridsimConfig::default() };
            let widths: Vec<u64> = (4..=12).map(|k| 1u64 << k).collect();
            let r = surface_report(&gridsim_surfaces(&g, &widths, 201).unwrap(), ArgminMode::Parabolic).unwrap();
            assert!((r.alpha.as_ref().unwrap().exponent + alpha).abs() < 0.02, "{:?}", r.alpha);
            assert!((r.beta.as_ref().unwrap().exponent + beta).abs() < 0.02, "{:?}", r.beta);
            assert_eq!(r.verdict, Some(verdict));
        }
    }

    #[test]
    fn rf_surfaces_transfer_fast() {
        let c = RfConfig { psi2: vec![8.0, 16.0, 32.0, 64.0, 128.0], ..RfConfig::default() };
        let r = surface_report(&rf_surfaces(&c, 161).unwrap(), ArgminMode::Parabolic).unwrap();
        assert_eq!(r.verdict, Some(TransferVerdict::FastUseful), "{r:?}");
    }
}
