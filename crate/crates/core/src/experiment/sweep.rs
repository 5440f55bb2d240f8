//! Commands that train the sweep and analyse its trajectories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{write_json, CellStatus, Context, LedgerEntry, Outcome, SweepConfig};
use crate::decomposition::{
    build_profile, decompose_record, overlap_consistency, sample_components, topk_series, ProfileCell, Side,
    TopKProfile,
};
use crate::error::{Error, Result};
use crate::hpcore::argmin_index;
use crate::rng::stream;
use crate::table::{fmt_float, read_csv, write_csv};
use crate::trainer::{RunStatus, Task, ValidationSet};
use crate::trajectory::{loss_delta, read_binary, record_training, sidecar_path, write_binary, write_series_csv};
use crate::truncation::{compute_khat, constant_candidates, decomposition_hp_gap, KhatOutcome, LossCurveGrid};

/// One (width, hp, seed) point of the sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub width: usize,
    pub hp_index: usize,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("n{}_h{}_s{}", self.width, self.hp_index, self.seed)
    }

    /// Training seed from the master seed; new cells never shift existing ones.
    pub fn train_seed(&self, master: u64) -> u64 {
        stream(master, &format!("cell/{}", self.id())).random()
    }
}

fn cells(s: &SweepConfig) -> Vec<Cell> {
    let mut v = Vec::new();
    for &width in &s.widths {
        for hp_index in 0..s.lrs.len() {
            for &seed in &s.seeds {
                v.push(Cell { width, hp_index, seed });
            }
        }
    }
    v
}

fn traj_path(ctx: &Context, c: &Cell) -> PathBuf {
    ctx.path(&format!("traj/{}.bin", c.id()))
}

fn task(ctx: &Context) -> Result<Task> {
    Task::new(&ctx.config.sweep()?.task, ctx.config.seed)
}

/// Train every cell not already recorded. A failing cell is logged and skipped.
pub fn cmd_train(ctx: &Context) -> Result<Outcome> {
    let s = ctx.config.sweep()?;
    let task = task(ctx)?;
    let done = ctx.ledger.latest("train")?;
    let all = cells(s);
    let results: Vec<(PathBuf, Option<String>)> = ctx.install(|| {
        all.par_iter()
            .map(|c| {
                let path = traj_path(ctx, c);
                let skip = !ctx.force
                    && path.exists()
                    && done.get(&c.id()).is_some_and(|e| e.status != CellStatus::Failed);
                if skip {
                    return (path, None);
                }
                let t0 = Instant::now();
                let res = train_cell(ctx, s, &task, c, &path);
                let (status, message) = match &res {
                    Ok(RunStatus::Completed) => (CellStatus::Done, None),
                    Ok(RunStatus::Diverged { step }) => (CellStatus::Diverged, Some(format!("diverged at step {step}"))),
                    Err(e) => (CellStatus::Failed, Some(e.to_string())),
                };
                let entry = LedgerEntry {
                    command: "train".into(),
                    cell: c.id(),
                    status,
                    seconds: t0.elapsed().as_secs_f64(),
                    artifacts: vec![path.display().to_string()],
                    message: message.clone(),
                };
                let logged = ctx.ledger.append(&entry);
                let failure = match (status, logged) {
                    (CellStatus::Failed, _) => Some(format!("{}: {}", c.id(), message.unwrap_or_default())),
                    (_, Err(e)) => Some(format!("{}: ledger: {e}", c.id())),
                    _ => None,
                };
                (path, failure)
            })
            .collect()
    });
    let mut out = Outcome::default();
    for (p, f) in results {
        out.add(p);
        out.failed.extend(f);
    }
    Ok(out)
}

fn train_cell(ctx: &Context, s: &SweepConfig, task: &Task, c: &Cell, path: &Path) -> Result<RunStatus> {
    let spec = s.network(c.width);
    let lr = s.lrs[c.hp_index];
    let opt = s.optimizer(lr);
    let val = ValidationSet::new(&spec, task);
    let hps = vec![("lr".to_owned(), lr), ("hp_index".to_owned(), c.hp_index as f64), ("seed".to_owned(), c.seed as f64)];
    let (rec, status) = record_training(&spec, &opt, task, c.train_seed(ctx.config.seed), &s.ema, &val, hps, &ctx.hash)?;
    write_binary(&rec, path)?;
    write_series_csv(&rec, &path.with_extension("csv"))?;
    Ok(status)
}

struct Decomposed {
    cell: Cell,
    run: Option<crate::decomposition::RunDecomposition>,
    summary: Vec<String>,
    series: Vec<Vec<String>>,
    error: Option<String>,
}

fn decompose_cell(ctx: &Context, c: &Cell, k_fixed: usize) -> Decomposed {
    let s = ctx.config.sweep().expect("validated");
    let mut d = Decomposed { cell: *c, run: None, summary: vec![], series: vec![], error: None };
    let rec = match read_binary(&traj_path(ctx, c)) {
        Ok(r) => r,
        Err(e) => {
            d.error = Some(format!("{}: {e}", c.id()));
            return d;
        }
    };
    let lr = s.lrs[c.hp_index];
    let head = vec![c.width.to_string(), c.hp_index.to_string(), fmt_float(lr), c.seed.to_string()];
    if rec.diverged || rec.checkpoints.len() < 2 {
        d.summary = [head, vec!["diverged".into()], vec![String::new(); 5]].concat();
        return d;
    }
    let k = k_fixed.min(c.width);
    let res = decompose_record(&rec, None).and_then(|r| Ok((r, topk_series(&rec, k, None)?)));
    match res {
        Ok((run, series)) => {
            d.summary = [
                head.clone(),
                vec![
                    "done".into(),
                    fmt_float(run.phi),
                    fmt_float(loss_delta(&rec)),
                    fmt_float(run.vector_part),
                    fmt_float(run.max_trace_error),
                    fmt_float(*rec.metrics.last().unwrap()),
                ],
            ]
            .concat();
            d.series = series
                .into_iter()
                .map(|(step, top, total)| {
                    [head.clone(), vec![k.to_string(), step.to_string(), fmt_float(top), fmt_float(total), fmt_float(total - top)]]
                        .concat()
                })
                .collect();
            d.run = Some(run);
        }
        Err(e) => d.error = Some(format!("{}: {e}", c.id())),
    }
    d
}

/// Top-k profile over the whole sweep, its binary cache and the fixed-k split over time.
pub fn cmd_decompose(ctx: &Context) -> Result<Outcome> {
    let s = ctx.config.sweep()?;
    let k_fixed = ctx.config.decompose.k_fixed;
    let all = cells(s);
    let results: Vec<Decomposed> = ctx.install(|| {
        all.par_iter()
            .map(|c| {
                let t0 = Instant::now();
                let d = decompose_cell(ctx, c, k_fixed);
                let status = match (&d.error, &d.run) {
                    (Some(_), _) => CellStatus::Failed,
                    (None, None) => CellStatus::Diverged,
                    (None, Some(_)) => CellStatus::Done,
                };
                let _ = ctx.ledger.append(&LedgerEntry {
                    command: "decompose".into(),
                    cell: c.id(),
                    status,
                    seconds: t0.elapsed().as_secs_f64(),
                    artifacts: vec![],
                    message: d.error.clone(),
                });
                d
            })
            .collect()
    });
    let mut out = Outcome::default();
    let mut summary = Vec::new();
    let mut series = Vec::new();
    let mut profile_cells = Vec::new();
    for d in results {
        if let Some(e) = d.error {
            out.failed.push(e);
            continue;
        }
        summary.push(d.summary);
        series.extend(d.series);
        profile_cells.push(ProfileCell { width: d.cell.width, hp_index: d.cell.hp_index, run: d.run });
    }
    let profile = build_profile(&s.hp(), profile_cells)?;
    let (csv, cache) = (ctx.path("decompose/profile.csv"), ctx.path("decompose/profile.bin"));
    profile.write_csv(&csv, Some(&ctx.hash))?;
    profile.write_cache(&cache, &ctx.hash)?;
    let runs = ctx.path("decompose/runs.csv");
    write_csv(
        &runs,
        Some(&ctx.hash),
        &["width", "hp_index", "lr", "seed", "status", "phi", "loss_delta", "vector_part", "max_trace_error", "final_metric"],
        &summary,
    )?;
    let over_time = ctx.path("decompose/topk_over_time.csv");
    write_csv(
        &over_time,
        Some(&ctx.hash),
        &["width", "hp_index", "lr", "seed", "k", "step", "phi_k", "phi", "residual"],
        &series,
    )?;
    for p in [csv, cache, runs, over_time] {
        out.add(p);
    }
    Ok(out)
}

fn load_profile(ctx: &Context) -> Result<TopKProfile> {
    TopKProfile::read_cache(&ctx.path("decompose/profile.bin"), &ctx.hash)
        .map_err(|e| Error::Missing(format!("profile cache unavailable ({e}); run `decompose` first")))
}

/// One row of the t_n against b_n comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TnRow {
    pub width: usize,
    pub b_n: f64,
    pub t_n: Option<f64>,
    pub kappa: Option<Vec<usize>>,
    pub infeasible: usize,
}

/// t_n over constant κ and κ̂(n), against the grid hp gap to the largest width.
pub fn tn_table(grids: &BTreeMap<usize, LossCurveGrid>, khat: &BTreeMap<usize, KhatOutcome>) -> Result<Vec<TnRow>> {
    let (&nmax, pmax) = grids.iter().next_back().ok_or_else(|| Error::Invalid("no widths".into()))?;
    let amax = argmin_index(&pmax.total())?;
    let mut rows = Vec::new();
    for (&n, pn) in grids.range(..nmax) {
        let mut cands = constant_candidates(n, pn.g());
        if let Some(k) = khat.get(&n).and_then(KhatOutcome::kappa) {
            cands.push(k.to_vec());
        }
        let b_n = (pn.hp[argmin_index(&pn.total())?] - pmax.hp[amax]).abs();
        let t = decomposition_hp_gap(pn, pmax, &cands)?;
        rows.push(TnRow {
            width: n,
            b_n,
            t_n: t.as_ref().map(|t| t.t_n),
            kappa: t.as_ref().map(|t| t.kappa.clone()),
            infeasible: t.map_or(cands.len(), |t| t.infeasible),
        });
    }
    Ok(rows)
}

/// Truncation indices κ̂(n) with the full attempt log, plus the t_n table.
pub fn cmd_truncate(ctx: &Context) -> Result<Outcome> {
    let profile = load_profile(ctx)?;
    let idx = profile.complete_indices();
    if idx.len() < 3 {
        return Err(Error::Invalid(format!("only {} hp values are complete at every width; need 3", idx.len())));
    }
    let grids = profile.loss_curve_grids(&idx)?;
    let khat = compute_khat(&grids, &ctx.config.truncate)?;
    let mut rows = Vec::new();
    for (&n, o) in &khat {
        let g = &grids[&n];
        match o {
            KhatOutcome::Accepted { kappa, tau, .. } => {
                for (i, k) in kappa.iter().enumerate() {
                    rows.push(vec![n.to_string(), fmt_float(g.hp[i]), k.to_string(), fmt_float(tau.0), fmt_float(tau.1), "accepted".into()]);
                }
            }
            KhatOutcome::Fail { .. } => {
                rows.push(vec![n.to_string(), String::new(), String::new(), String::new(), String::new(), "fail".into()]);
            }
        }
    }
    let mut out = Outcome::default();
    let csv = ctx.path("truncate/khat.csv");
    write_csv(&csv, Some(&ctx.hash), &["width", "hp", "kappa", "tau1", "tau2", "status"], &rows)?;
    let diag = ctx.path("truncate/khat.json");
    write_json(&diag, &serde_json::json!({ "config_hash": ctx.hash, "hp": grids.values().next().map(|g| g.hp.clone()), "widths": khat }))?;
    let tn = tn_table(&grids, &khat)?;
    let tn_csv = ctx.path("truncate/tn.csv");
    let tn_rows: Vec<Vec<String>> = tn
        .iter()
        .map(|r| {
            vec![
                r.width.to_string(),
                fmt_float(r.b_n),
                r.t_n.map(fmt_float).unwrap_or_default(),
                r.kappa.as_ref().map(|k| k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")).unwrap_or_default(),
                r.infeasible.to_string(),
            ]
        })
        .collect();
    write_csv(&tn_csv, Some(&ctx.hash), &["width", "b_n", "t_n", "kappa", "infeasible"], &tn_rows)?;
    for p in [csv, diag, tn_csv] {
        out.add(p);
    }
    Ok(out)
}

/// Per-sample component tables at one learning rate, and MCI overlap across widths.
pub fn cmd_mci(ctx: &Context) -> Result<Outcome> {
    let s = ctx.config.sweep()?;
    let mc = &ctx.config.mci;
    let hp_index = mc.hp_index.unwrap_or(s.lrs.len() / 2);
    if hp_index >= s.lrs.len() {
        return Err(Error::Config(format!("mci.hp_index {hp_index} outside the lr grid")));
    }
    let task = task(ctx)?;
    let picked: Vec<Cell> = cells(s).into_iter().filter(|c| c.hp_index == hp_index).collect();
    let results: Vec<(Cell, PathBuf, Result<Option<Vec<Option<f64>>>>)> = ctx.install(|| {
        picked
            .par_iter()
            .map(|c| {
                let path = ctx.path(&format!("mci/{}.csv", c.id()));
                let t0 = Instant::now();
                let r = (|| -> Result<Option<Vec<Option<f64>>>> {
                    let rec = read_binary(&traj_path(ctx, c))?;
                    if rec.diverged {
                        return Ok(None);
                    }
                    let spec = s.network(c.width);
                    let val = ValidationSet::new(&spec, &task);
                    let t = sample_components(&rec, &val, mc.k_max.min(c.width), None)?;
                    t.write_csv(&path, Some(&ctx.hash))?;
                    Ok(Some(t.mci()))
                })();
                let status = match &r {
                    Ok(Some(_)) => CellStatus::Done,
                    Ok(None) => CellStatus::Diverged,
                    Err(_) => CellStatus::Failed,
                };
                let _ = ctx.ledger.append(&LedgerEntry {
                    command: "mci".into(),
                    cell: c.id(),
                    status,
                    seconds: t0.elapsed().as_secs_f64(),
                    artifacts: vec![path.display().to_string()],
                    message: r.as_ref().err().map(|e| e.to_string()),
                });
                (*c, path, r)
            })
            .collect()
    });
    let mut out = Outcome::default();
    let mut tables = BTreeMap::new();
    for (c, path, r) in results {
        match r {
            Ok(Some(m)) => {
                out.add(path);
                tables.insert((c.width, c.seed), m);
            }
            Ok(None) => {}
            Err(e) => out.failed.push(format!("{}: {e}", c.id())),
        }
    }
    let mut rows = Vec::new();
    for (side, name) in [(Side::Top, "top"), (Side::Bottom, "bottom")] {
        match overlap_consistency(&tables, mc.q, side) {
            Ok(o) => rows.extend(o.into_iter().map(|((a, b), v)| vec![name.to_owned(), a.to_string(), b.to_string(), fmt_float(v)])),
            Err(e) => out.failed.push(format!("overlap: {e}")),
        }
    }
    let ov = ctx.path("mci/overlap.csv");
    write_csv(&ov, Some(&ctx.hash), &["side", "width_a", "width_b", "overlap"], &rows)?;
    out.add(ov);
    Ok(out)
}

/// Final EMA validation loss per (width, hp), averaged over seeds, on hp
/// values where no seed diverged at any width. Reads only the sidecars.
pub fn sweep_surfaces(ctx: &Context) -> Result<BTreeMap<u64, Vec<(f64, f64)>>> {
    #[derive(serde::Deserialize)]
    struct Side_ {
        metrics: Vec<f64>,
        diverged: bool,
    }
    let s = ctx.config.sweep()?;
    let hp = s.hp();
    let mut acc: BTreeMap<usize, Vec<Option<Vec<f64>>>> = BTreeMap::new();
    for c in cells(s) {
        let row = acc.entry(c.width).or_insert_with(|| vec![Some(vec![]); hp.len()]);
        let side = std::fs::read_to_string(sidecar_path(&traj_path(ctx, &c)))
            .map_err(|e| Error::Missing(format!("{}: {e}; run `train` first", c.id())))?;
        let sc: Side_ = serde_json::from_str(&side)?;
        match (&mut row[c.hp_index], sc.diverged, sc.metrics.last()) {
            (Some(v), false, Some(&m)) => v.push(m),
            (slot, _, _) => *slot = None,
        }
    }
    let keep: Vec<usize> = (0..hp.len()).filter(|&i| acc.values().all(|r| r[i].is_some())).collect();
    Ok(acc
        .into_iter()
        .map(|(w, r)| {
            let curve = keep
                .iter()
                .map(|&i| {
                    let v = r[i].as_ref().unwrap();
                    (hp[i], v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            (w as u64, curve)
        })
        .collect())
}

/// Surfaces from a CSV with columns width, hp, loss.
pub(super) fn csv_surfaces(path: &std::path::Path) -> Result<BTreeMap<u64, Vec<(f64, f64)>>> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| Error::Invalid(format!("{} lacks a `{name}` column", path.display())))
    };
    let (cw, ch, cl) = (col("width")?, col("hp")?, col("loss")?);
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Invalid(format!("bad number {s}: {e}")));
    let mut m: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        m.entry(parse(&r[cw])? as u64).or_default().push((parse(&r[ch])?, parse(&r[cl])?));
    }
    for v in m.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(m)
}

pub(super) fn profile_tn(ctx: &Context) -> Option<Result<Vec<TnRow>>> {
    let profile = load_profile(ctx).ok()?;
    Some((|| {
        let idx = profile.complete_indices();
        let grids = profile.loss_curve_grids(&idx)?;
        let khat = compute_khat(&grids, &ctx.config.truncate)?;
        tn_table(&grids, &khat)
    })())
}
