//! Spectral decomposition of the linearized loss through alignment matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::table::{fmt_float, write_csv};
use crate::trainer::{ParamInfo, ValidationSet};
use crate::trajectory::TrajectoryRecord;
use crate::truncation::LossCurveGrid;

/// ½(GᵀδW + δWᵀG), or ½(GδWᵀ + δWGᵀ) for the row version.
pub fn alignment_matrix(g: &DMatrix<f64>, dw: &DMatrix<f64>, row_version: bool) -> Result<DMatrix<f64>> {
    if g.shape() != dw.shape() {
        return Err(Error::Shape(format!("G is {:?} but δW is {:?}", g.shape(), dw.shape())));
    }
    let p = if row_version { g * dw.transpose() } else { g.tr_mul(dw) };
    let mut s = &p + p.transpose();
    s *= 0.5;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSpectrum {
    /// Sorted by |λ| descending, then λ descending, then source index.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Option<DMatrix<f64>>,
    pub layer: usize,
    pub step: usize,
}

fn spectral_order(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&i, &j| {
        vals[j].abs().total_cmp(&vals[i].abs()).then(vals[j].total_cmp(&vals[i])).then(i.cmp(&j))
    });
    idx
}

fn sorted(vals: Vec<f64>, vecs: Option<DMatrix<f64>>) -> (Vec<f64>, Option<DMatrix<f64>>) {
    let order = spectral_order(&vals);
    let v = order.iter().map(|&i| vals[i]).collect();
    let u = vecs.map(|m| DMatrix::from_fn(m.nrows(), order.len(), |r, c| m[(r, order[c])]));
    (v, u)
}

fn check_finite(vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver("eigensolver produced non-finite values".into()))
    }
}

/// Full eigendecomposition of a symmetric matrix in spectral order.
pub fn spectrum(s: &DMatrix<f64>) -> Result<AlignmentSpectrum> {
    if !s.is_square() {
        return Err(Error::Shape("alignment matrix must be square".into()));
    }
    let e = SymmetricEigen::new(s.clone());
    let vals: Vec<f64> = e.eigenvalues.iter().copied().collect();
    check_finite(&vals)?;
    let (eigenvalues, eigenvectors) = sorted(vals, Some(e.eigenvectors));
    Ok(AlignmentSpectrum { eigenvalues, eigenvectors, layer: 0, step: 0 })
}

/// Spectrum of the alignment matrix of (G, δW) without forming it when its
/// rank is small: S = ½(ABᵀ + BAᵀ) = Q (R M Rᵀ) Qᵀ with [A B] = QR.
pub fn layer_spectrum(g: &DMatrix<f64>, dw: &DMatrix<f64>, row_version: bool, vectors: bool) -> Result<AlignmentSpectrum> {
    if g.shape() != dw.shape() {
        return Err(Error::Shape(format!("G is {:?} but δW is {:?}", g.shape(), dw.shape())));
    }
    let (a, b) = if row_version { (g.clone(), dw.clone()) } else { (g.transpose(), dw.transpose()) };
    let (dim, q) = a.shape();
    if 2 * q >= dim {
        let mut sp = spectrum(&alignment_matrix(g, dw, row_version)?)?;
        if !vectors {
            sp.eigenvectors = None;
        }
        return Ok(sp);
    }
    let mut ab = DMatrix::zeros(dim, 2 * q);
    ab.columns_mut(0, q).copy_from(&a);
    ab.columns_mut(q, q).copy_from(&b);
    let qr = ab.qr();
    let r = qr.r();
    let mut mr = DMatrix::zeros(2 * q, 2 * q);
    // M Rᵀ swaps the two row blocks of Rᵀ and halves them.
    let rt = r.transpose();
    mr.rows_mut(0, q).copy_from(&(rt.rows(q, q) * 0.5));
    mr.rows_mut(q, q).copy_from(&(rt.rows(0, q) * 0.5));
    let mut small = &r * mr;
    small = (&small + small.transpose()) * 0.5;
    let e = SymmetricEigen::new(small);
    let mut vals: Vec<f64> = e.eigenvalues.iter().copied().collect();
    check_finite(&vals)?;
    vals.resize(dim, 0.0);
    let vecs = if vectors {
        let mut full = DMatrix::<f64>::identity(dim, dim);
        qr.q_tr_mul(&mut full);
        let qfull = full.transpose();
        let mut u = DMatrix::zeros(dim, dim);
        u.columns_mut(0, 2 * q).copy_from(&(qfull.columns(0, 2 * q) * &e.eigenvectors));
        u.columns_mut(2 * q, dim - 2 * q).copy_from(&qfull.columns(2 * q, dim - 2 * q));
        Some(u)
    } else {
        None
    };
    let (eigenvalues, eigenvectors) = sorted(vals, vecs);
    Ok(AlignmentSpectrum { eigenvalues, eigenvectors, layer: 0, step: 0 })
}

/// Sum of the k leading eigenvalues of the alignment matrix.
pub fn topk_step(g: &DMatrix<f64>, dw: &DMatrix<f64>, k: usize, row_version: bool) -> Result<f64> {
    let sp = layer_spectrum(g, dw, row_version, false)?;
    if k == 0 || k > sp.eigenvalues.len() {
        return invalid(format!("k={k} outside [1, {}]", sp.eigenvalues.len()));
    }
    Ok(sp.eigenvalues[..k].iter().sum())
}

/// Row version when the row count is the width and the column count is not.
pub fn default_row_version(p: &ParamInfo, width: usize) -> bool {
    p.rows == width && p.cols != width
}

fn row_flags(rec: &TrajectoryRecord, row_version: Option<&[bool]>) -> Result<Vec<bool>> {
    let params = &rec.manifest.params;
    match row_version {
        Some(v) if v.len() == params.len() => Ok(v.to_vec()),
        Some(_) => invalid("one row-version flag per parameter tensor is required"),
        None => Ok(params.iter().map(|p| default_row_version(p, rec.manifest.width)).collect()),
    }
}

/// φ^k(ω) for k = 1..n of one recorded run, with the matrix/vector split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunDecomposition {
    pub width: usize,
    /// `profile[k-1]` = φ^k, including the full vector-parameter contribution.
    pub profile: Vec<f64>,
    pub phi: f64,
    pub vector_part: f64,
    /// Largest |Σλ − ⟨G, δW⟩| / (‖G‖‖δW‖) over checkpoints and layers.
    pub max_trace_error: f64,
}

impl RunDecomposition {
    pub fn topk(&self, k: usize) -> f64 {
        self.profile[k.clamp(1, self.profile.len()) - 1]
    }
}

pub fn decompose_record(rec: &TrajectoryRecord, row_version: Option<&[bool]>) -> Result<RunDecomposition> {
    let flags = row_flags(rec, row_version)?;
    let n = rec.manifest.width;
    let mut profile = vec![0.0; n];
    let (mut phi, mut vector_part, mut worst) = (0.0, 0.0, 0.0f64);
    for c in &rec.checkpoints {
        for (i, p) in rec.manifest.params.iter().enumerate() {
            let (g, d) = (&c.grad.tensors[i], &c.delta.tensors[i]);
            let inner = g.dot(d);
            phi += inner;
            if !p.matrix {
                vector_part += inner;
                profile.iter_mut().for_each(|v| *v += inner);
                continue;
            }
            let sp = layer_spectrum(g, d, flags[i], false)?;
            let sum: f64 = sp.eigenvalues.iter().sum();
            let scale = g.norm() * d.norm();
            if scale > 0.0 {
                worst = worst.max((sum - inner).abs() / scale);
            }
            let mut acc = 0.0;
            for (k, slot) in profile.iter_mut().enumerate() {
                if k < sp.eigenvalues.len() {
                    acc += sp.eigenvalues[k];
                }
                *slot += acc;
            }
        }
    }
    Ok(RunDecomposition { width: n, profile, phi, vector_part, max_trace_error: worst })
}

/// φ^k(ω) for a single k.
pub fn topk_total(rec: &TrajectoryRecord, k: usize) -> Result<f64> {
    if k == 0 || k > rec.manifest.width {
        return invalid(format!("k={k} outside [1, {}]", rec.manifest.width));
    }
    Ok(decompose_record(rec, None)?.topk(k))
}

/// Cumulative (step, φ^k, φ) after each checkpoint, for one fixed k.
pub fn topk_series(rec: &TrajectoryRecord, k: usize, row_version: Option<&[bool]>) -> Result<Vec<(usize, f64, f64)>> {
    if k == 0 || k > rec.manifest.width {
        return invalid(format!("k={k} outside [1, {}]", rec.manifest.width));
    }
    let flags = row_flags(rec, row_version)?;
    let (mut top, mut total) = (0.0, 0.0);
    let mut out = Vec::with_capacity(rec.checkpoints.len());
    for c in &rec.checkpoints {
        for (i, p) in rec.manifest.params.iter().enumerate() {
            let (g, d) = (&c.grad.tensors[i], &c.delta.tensors[i]);
            let inner = g.dot(d);
            total += inner;
            if !p.matrix {
                top += inner;
            } else {
                top += layer_spectrum(g, d, flags[i], false)?.eigenvalues.iter().take(k).sum::<f64>();
            }
        }
        out.push((c.step, top, total));
    }
    Ok(out)
}

/// φ_n^k over (width, hp index); absent cells are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopKProfile {
    pub hp: Vec<f64>,
    pub values: BTreeMap<usize, Vec<Option<Vec<f64>>>>,
}

/// One decomposed cell of a sweep; `None` marks a diverged run.
pub struct ProfileCell {
    pub width: usize,
    pub hp_index: usize,
    pub run: Option<RunDecomposition>,
}

/// Average seeds per (width, hp). A cell is absent when any of its runs diverged.
pub fn build_profile(hp: &[f64], cells: Vec<ProfileCell>) -> Result<TopKProfile> {
    let mut groups: BTreeMap<(usize, usize), Vec<Option<RunDecomposition>>> = BTreeMap::new();
    for c in cells {
        if c.hp_index >= hp.len() {
            return invalid(format!("hp index {} outside the grid", c.hp_index));
        }
        groups.entry((c.width, c.hp_index)).or_default().push(c.run);
    }
    let mut values: BTreeMap<usize, Vec<Option<Vec<f64>>>> = BTreeMap::new();
    for ((w, i), runs) in groups {
        let row = values.entry(w).or_insert_with(|| vec![None; hp.len()]);
        if runs.iter().any(Option::is_none) {
            continue;
        }
        let runs: Vec<RunDecomposition> = runs.into_iter().flatten().collect();
        let len = runs[0].profile.len();
        if runs.iter().any(|r| r.profile.len() != len) {
            return invalid("runs at one width disagree on profile length");
        }
        let mean = (0..len).map(|k| runs.iter().map(|r| r.profile[k]).sum::<f64>() / runs.len() as f64).collect();
        row[i] = Some(mean);
    }
    Ok(TopKProfile { hp: hp.to_vec(), values })
}

impl TopKProfile {
    /// hp indices present at every width.
    pub fn complete_indices(&self) -> Vec<usize> {
        (0..self.hp.len()).filter(|&i| self.values.values().all(|r| r[i].is_some())).collect()
    }

    /// Truncation grids per width over the given hp indices.
    pub fn loss_curve_grids(&self, indices: &[usize]) -> Result<BTreeMap<usize, LossCurveGrid>> {
        let mut out = BTreeMap::new();
        for (&w, row) in &self.values {
            let mut rows = Vec::new();
            for &i in indices {
                let r = row[i].clone().ok_or_else(|| Error::Missing(format!("profile cell width={w} hp={}", self.hp[i])))?;
                rows.push(r);
            }
            out.insert(w, LossCurveGrid::new(indices.iter().map(|&i| self.hp[i]).collect(), rows)?);
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut rows = Vec::new();
        for (&w, row) in &self.values {
            for (i, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    let total = *v.last().unwrap();
                    for (k, &p) in v.iter().enumerate() {
                        rows.push(vec![w.to_string(), fmt_float(self.hp[i]), (k + 1).to_string(), fmt_float(p), fmt_float(total - p)]);
                    }
                }
            }
        }
        write_csv(path, config_hash, &["width", "hp", "k", "phi_k", "residual"], &rows)
    }

    pub fn write_cache(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut b = Vec::new();
        b.extend_from_slice(PROFILE_MAGIC);
        put_u32(&mut b, config_hash.len() as u32);
        b.extend_from_slice(config_hash.as_bytes());
        put_u32(&mut b, self.hp.len() as u32);
        self.hp.iter().for_each(|v| b.extend_from_slice(&v.to_le_bytes()));
        put_u32(&mut b, self.values.len() as u32);
        for (&w, row) in &self.values {
            b.extend_from_slice(&(w as u64).to_le_bytes());
            for cell in row {
                match cell {
                    None => b.push(0),
                    Some(v) => {
                        b.push(1);
                        put_u32(&mut b, v.len() as u32);
                        v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes()));
                    }
                }
            }
        }
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        std::fs::File::create(path)?.write_all(&b)?;
        Ok(())
    }

    /// Load a cache; `Missing` when it was written under another config hash.
    pub fn read_cache(path: &Path, config_hash: &str) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut r = Cursor { b: &buf, at: 0 };
        if r.take(8)? != PROFILE_MAGIC {
            return invalid(format!("{} is not a profile cache", path.display()));
        }
        let hl = r.u32()? as usize;
        if r.take(hl)? != config_hash.as_bytes() {
            return Err(Error::Missing(format!("cache {} has a different config hash", path.display())));
        }
        let g = r.u32()? as usize;
        let hp = (0..g).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let nw = r.u32()? as usize;
        let mut values = BTreeMap::new();
        for _ in 0..nw {
            let w = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            let mut row = Vec::with_capacity(g);
            for _ in 0..g {
                row.push(if r.take(1)?[0] == 0 {
                    None
                } else {
                    let k = r.u32()? as usize;
                    Some((0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?)
                });
            }
            values.insert(w, row);
        }
        Ok(Self { hp, values })
    }
}

const PROFILE_MAGIC: &[u8; 8] = b"HPPROF01";

fn put_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return invalid("truncated cache file");
        }
        self.at += n;
        Ok(&self.b[self.at - n..self.at])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// ψ_ij accumulated over matrix layers and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleComponentTable {
    pub psi: DMatrix<f64>,
    pub sample_ids: Vec<usize>,
    pub k_max: usize,
}

/// Per-sample contributions (δψ)_ij = u_jᵀ G_iᵀ δW u_j, recomputed from the
/// EMA weights at each checkpoint on the validation set.
pub fn sample_components(
    rec: &TrajectoryRecord,
    val: &ValidationSet,
    k_max: usize,
    row_version: Option<&[bool]>,
) -> Result<SampleComponentTable> {
    let n = rec.manifest.width;
    if k_max == 0 || k_max > n {
        return invalid(format!("K_max={k_max} outside [1, {n}]"));
    }
    let flags = row_flags(rec, row_version)?;
    let p = val.x.ncols();
    let mut psi = DMatrix::zeros(p, k_max);
    for c in &rec.checkpoints {
        if c.delta.tensors.iter().all(|t| t.iter().all(|&v| v == 0.0)) {
            continue;
        }
        let lg = val.loss_and_grad(&c.ema, true)?;
        let ps = lg.per_sample.expect("requested per-sample gradients");
        for (i, prm) in rec.manifest.params.iter().enumerate() {
            if !prm.matrix {
                continue;
            }
            let (g, d) = (&c.grad.tensors[i], &c.delta.tensors[i]);
            let sp = layer_spectrum(g, d, flags[i], true)?;
            let u = sp.eigenvectors.unwrap();
            let kk = k_max.min(u.ncols());
            let u = u.columns(0, kk);
            let (left, right) = (&ps.left[prm.layer], &ps.right[prm.layer]);
            let (x, y) = if flags[i] {
                (left.tr_mul(&u), right.tr_mul(&(d.tr_mul(&u))))
            } else {
                (right.tr_mul(&u), left.tr_mul(&(d * u)))
            };
            let mut view = psi.columns_mut(0, kk);
            view += x.component_mul(&y);
        }
    }
    Ok(SampleComponentTable { psi, sample_ids: (0..p).collect(), k_max })
}

impl SampleComponentTable {
    /// MCI of every row; `None` for all-zero rows.
    pub fn mci(&self) -> Vec<Option<f64>> {
        self.psi.row_iter().map(|r| mci(&r.iter().copied().collect::<Vec<_>>())).collect()
    }

    /// Mean over samples of Σ_j ψ_ij.
    pub fn mean_total(&self) -> f64 {
        self.psi.sum() / self.psi.nrows() as f64
    }

    pub fn write_csv(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let mut header = vec!["sample_id".to_string(), "mci".to_string()];
        header.extend((1..=self.k_max).map(|j| format!("psi_{j}")));
        let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
        let m = self.mci();
        let rows: Vec<Vec<String>> = self
            .psi
            .row_iter()
            .enumerate()
            .map(|(i, r)| {
                let mut v = vec![self.sample_ids[i].to_string(), m[i].map_or("nan".into(), fmt_float)];
                v.extend(r.iter().map(|&x| fmt_float(x)));
                v
            })
            .collect();
        write_csv(path, config_hash, &hdr, &rows)
    }
}

/// Σ_j j·p_j with p_j = |ψ_j| / Σ|ψ|.
pub fn mci(row: &[f64]) -> Option<f64> {
    let total: f64 = row.iter().map(|v| v.abs()).sum();
    if !(total > 0.0) {
        return None;
    }
    Some(row.iter().enumerate().map(|(j, v)| (j + 1) as f64 * v.abs()).sum::<f64>() / total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Top,
    Bottom,
}

fn quantile_set(m: &[Option<f64>], q: f64, side: Side) -> BTreeSet<usize> {
    let mut idx: Vec<usize> = (0..m.len()).filter(|&i| m[i].is_some()).collect();
    idx.sort_by(|&a, &b| {
        let o = m[a].unwrap().total_cmp(&m[b].unwrap());
        (if side == Side::Top { o.reverse() } else { o }).then(a.cmp(&b))
    });
    let size = ((q * m.len() as f64).round() as usize).max(1).min(idx.len());
    idx.into_iter().take(size).collect()
}

/// Average shared fraction of the q-quantile MCI sets for every width pair.
pub fn overlap_consistency(
    tables: &BTreeMap<(usize, u64), Vec<Option<f64>>>,
    q: f64,
    side: Side,
) -> Result<BTreeMap<(usize, usize), f64>> {
    if !(q > 0.0 && q <= 0.5) {
        return invalid("q must lie in (0, 0.5]");
    }
    let p = tables.values().next().map_or(0, Vec::len);
    if tables.values().any(|t| t.len() != p) {
        return invalid("MCI tables must share sample ids");
    }
    let sets: BTreeMap<(usize, u64), BTreeSet<usize>> = tables.iter().map(|(k, m)| (*k, quantile_set(m, q, side))).collect();
    let widths: BTreeSet<usize> = tables.keys().map(|k| k.0).collect();
    let mut out = BTreeMap::new();
    for &w1 in &widths {
        for &w2 in widths.range(w1..) {
            let mut acc = Vec::new();
            for ((a, s1), x) in &sets {
                for ((b, s2), y) in &sets {
                    if *a != w1 || *b != w2 || (w1 == w2 && s1 >= s2) {
                        continue;
                    }
                    let denom = x.len().min(y.len()).max(1) as f64;
                    acc.push(x.intersection(y).count() as f64 / denom);
                }
            }
            if acc.is_empty() {
                return invalid(format!("width {w1} needs at least two seeds for the diagonal"));
            }
            out.insert((w1, w2), acc.iter().sum::<f64>() / acc.len() as f64);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gauss(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut g = stream(seed, "decomp-test");
        DMatrix::from_fn(r, c, |_, _| g.sample::<f64, _>(StandardNormal))
    }

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    #[test]
    fn alignment_examples() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert_eq!(alignment_matrix(&i, &i, false).unwrap(), i);
        let g = diag(&[1.0, 2.0]);
        assert_eq!(alignment_matrix(&g, &(-&g), false).unwrap(), diag(&[-1.0, -4.0]));
        let s = alignment_matrix(&gauss(3, 4, 1), &gauss(3, 4, 2), false).unwrap();
        assert_eq!(s, s.transpose());
        assert!(alignment_matrix(&gauss(3, 4, 1), &gauss(4, 3, 2), false).is_err());
    }

    #[test]
    fn spectrum_order_and_reconstruction() {
        assert_eq!(spectrum(&diag(&[-1.0, -4.0])).unwrap().eigenvalues, vec![-4.0, -1.0]);
        assert_eq!(spectrum(&diag(&[-3.0, 3.0])).unwrap().eigenvalues, vec![3.0, -3.0]);
        let a = gauss(50, 50, 3);
        let s = (&a + a.transpose()) * 0.5;
        let sp = spectrum(&s).unwrap();
        let u = sp.eigenvectors.unwrap();
        let rec = &u * diag(&sp.eigenvalues) * u.transpose();
        assert!((rec - &s).norm() / s.norm() < 1e-10);
        assert!((u.transpose() * &u - DMatrix::identity(50, 50)).amax() < 1e-8);
    }

    #[test]
    fn topk_examples() {
        let g = diag(&[1.0, 2.0]);
        assert_eq!(topk_step(&g, &(-&g), 1, false).unwrap(), -4.0);
        let (g, d) = (gauss(6, 9, 4), gauss(6, 9, 5));
        let full = topk_step(&g, &d, 9, false).unwrap();
        assert!((full - g.dot(&d)).abs() < 1e-10 * g.norm() * d.norm());
        assert!(topk_step(&g, &d, 10, false).is_err());
        // δW = −ηG: the top-k sum is −η times the top-k squared singular values.
        let eta = 0.3;
        let sv = g.clone().svd(false, false).singular_values;
        let mut s2: Vec<f64> = sv.iter().map(|s| s * s).collect();
        s2.sort_by(|a, b| b.total_cmp(a));
        for k in 1..=6 {
            let v = topk_step(&g, &(&g * -eta), k, false).unwrap();
            assert!((v + eta * s2[..k].iter().sum::<f64>()).abs() < 1e-10);
        }
    }

    #[test]
    fn low_rank_path_matches_dense() {
        for (r, c, row) in [(40, 3, true), (1, 30, false), (2, 25, false)] {
            let (g, d) = (gauss(r, c, 7), gauss(r, c, 8));
            let fast = layer_spectrum(&g, &d, row, true).unwrap();
            let dense = spectrum(&alignment_matrix(&g, &d, row).unwrap()).unwrap();
            for (a, b) in fast.eigenvalues.iter().zip(&dense.eigenvalues) {
                assert!((a - b).abs() < 1e-10, "{a} {b}");
            }
            let u = fast.eigenvectors.unwrap();
            let dim = u.nrows();
            assert!((u.transpose() * &u - DMatrix::identity(dim, dim)).amax() < 1e-10);
            let s = alignment_matrix(&g, &d, row).unwrap();
            assert!((&u * diag(&fast.eigenvalues) * u.transpose() - s).amax() < 1e-10);
        }
    }

    #[test]
    fn mci_examples() {
        assert_eq!(mci(&[2.0, 0.0, 0.0]), Some(1.0));
        assert!((mci(&[0.9, 0.1, 0.0]).unwrap() - 1.1).abs() < 1e-15);
        assert!((mci(&[-1.0; 9]).unwrap() - 5.0).abs() < 1e-15);
        assert_eq!(mci(&[0.0; 3]), None);
    }

    #[test]
    fn overlap_examples() {
        let mut r = stream(0, "perm");
        let p = 4000;
        let base: Vec<Option<f64>> = (0..p).map(|i| Some(i as f64)).collect();
        let mut t = BTreeMap::new();
        t.insert((64, 0), base.clone());
        t.insert((64, 1), base.clone());
        assert_eq!(overlap_consistency(&t, 0.05, Side::Top).unwrap()[&(64, 64)], 1.0);
        let mut rnd = BTreeMap::new();
        for s in 0..4u64 {
            rnd.insert((64, s), (0..p).map(|_| Some(r.random::<f64>())).collect::<Vec<_>>());
        }
        let o = overlap_consistency(&rnd, 0.05, Side::Bottom).unwrap()[&(64, 64)];
        assert!((o - 0.05).abs() < 0.015, "{o}");
        let mut single = BTreeMap::new();
        single.insert((64, 0), base);
        assert!(overlap_consistency(&single, 0.05, Side::Top).is_err());
    }

    #[test]
    fn signed_profile_need_not_be_monotone() {
        // Eigenvalues (3, −2, 1): |φ^k| = 3, 1, 2.
        let g = diag(&[3.0, -2.0, 1.0]);
        let d = DMatrix::identity(3, 3);
        let v: Vec<f64> = (1..=3).map(|k| topk_step(&g, &d, k, false).unwrap()).collect();
        assert_eq!(v, vec![3.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn row_and_column_versions_agree_on_square_layers(seed in 0u64..1000, n in 2usize..12, k in 1usize..12) {
            let k = k.min(n);
            let (g, d) = (gauss(n, n, seed), gauss(n, n, seed + 5000));
            let a = topk_step(&g, &d, k, false).unwrap();
            let b = topk_step(&g.transpose(), &d.transpose(), k, true).unwrap();
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }

        #[test]
        fn trace_identity(seed in 0u64..1000, r in 1usize..10, c in 1usize..10, row in any::<bool>()) {
            let (g, d) = (gauss(r, c, seed), gauss(r, c, seed + 77));
            let sp = layer_spectrum(&g, &d, row, false).unwrap();
            let s: f64 = sp.eigenvalues.iter().sum();
            prop_assert!((s - g.dot(&d)).abs() <= 1e-8 * g.norm() * d.norm());
        }

        #[test]
        fn sort_is_deterministic(vals in proptest::collection::vec(-3i32..3, 1..12)) {
            let v: Vec<f64> = vals.iter().map(|&x| x as f64).collect();
            let o = spectral_order(&v);
            for w in o.windows(2) {
                let (a, b) = (v[w[0]], v[w[1]]);
                prop_assert!(a.abs() > b.abs() || (a.abs() == b.abs() && (a > b || (a == b && w[0] < w[1]))));
            }
        }

        #[test]
        fn mci_bounds(row in proptest::collection::vec(-5.0f64..5.0, 1..40)) {
            if let Some(m) = mci(&row) {
                prop_assert!(m >= 1.0 - 1e-12 && m <= row.len() as f64 + 1e-12);
            }
        }
    }
}
