//! AoD/AoA extraction from a beam-pair power map.
//!
//! [`svd_extract`] peels rank-1 terms off the map until the requested share of
//! its energy is explained, keeps the peak of each term, and then thresholds,
//! clusters and refines those peaks. [`cfar_detect`] is the cell-averaging
//! CFAR baseline.

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::wrap;
use crate::simulate::{BrsrpMap, Side};

/// A rank-1 peak: one beam pair and the map power there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleCandidate {
    pub aod: f64,
    pub aoa: f64,
    pub power: f64,
    pub tx_index: usize,
    pub rx_index: usize,
    /// 1-based index of the singular component that produced this peak.
    pub rank_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleEstimate {
    pub aod: f64,
    pub aoa: f64,
    /// Largest member power of the cluster.
    pub power: f64,
    pub cluster_members: Vec<AngleCandidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdParams {
    /// Share of total singular-value energy to explain, in percent.
    pub power_ratio: f64,
    pub power_threshold: f64,
    /// Chebyshev linking distance on the beam-index grid.
    pub cluster_radius: usize,
    /// Half-width of the refinement window in beams.
    pub fit_window: usize,
}

impl SvdParams {
    pub fn new(power_ratio: f64, power_threshold: f64, cluster_radius: usize, fit_window: usize) -> Result<Self> {
        let p = Self {
            power_ratio,
            power_threshold,
            cluster_radius,
            fit_window,
        };
        p.validate()?;
        Ok(p)
    }

    /// `p = 99 %`, threshold 10 % above the map's noise floor, radius 1 and a
    /// window of about one beamwidth.
    pub fn for_map(map: &BrsrpMap) -> Self {
        let cb = &map.codebook;
        let spacing = cb.spacing(Side::Tx).min(cb.spacing(Side::Rx));
        let window = (cb.beamwidth() / spacing).round().max(1.0) as usize;
        Self {
            power_ratio: 99.0,
            power_threshold: 1.1 * map.noise_floor,
            cluster_radius: 1,
            fit_window: window,
        }
    }

    pub fn with_power_ratio(mut self, p: f64) -> Self {
        self.power_ratio = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.power_ratio > 0.0 && self.power_ratio <= 100.0) {
            return Err(Error::InvalidParameter(format!("power ratio {} not in (0, 100]", self.power_ratio)));
        }
        if !(self.power_threshold >= 0.0) {
            return Err(Error::InvalidParameter(format!("power threshold {}", self.power_threshold)));
        }
        if self.cluster_radius == 0 || self.fit_window == 0 {
            return Err(Error::InvalidParameter("cluster radius and fit window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pre-threshold output of the rank selection loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSelection {
    /// One peak per consumed rank, duplicates removed.
    pub candidates: Vec<AngleCandidate>,
    /// Number of rank-1 terms `K` consumed.
    pub ranks_used: usize,
    /// `σ_r²` in descending order.
    pub energies: Vec<f64>,
}

/// Location of the largest entry; ties go to the lowest `(i, j)`.
pub fn rank1_peak(b: &DMatrix<f64>) -> Result<(usize, usize)> {
    if b.is_empty() {
        return Err(Error::EmptyInput("rank-1 matrix"));
    }
    if b.iter().all(|v| *v == 0.0) {
        return Err(Error::InvalidParameter("rank-1 matrix is all zeros".into()));
    }
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            let v = b[(i, j)];
            if v > best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

/// Runs the SVD and consumes rank-1 terms until `power_ratio` percent of the
/// energy is explained.
pub fn svd_candidates(map: &BrsrpMap, power_ratio: f64) -> Result<RankSelection> {
    let b = &map.values;
    if b.is_empty() {
        return Err(Error::EmptyInput("power map"));
    }
    if !(power_ratio > 0.0 && power_ratio <= 100.0) {
        return Err(Error::InvalidParameter(format!("power ratio {power_ratio} not in (0, 100]")));
    }
    let svd = b.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &c| svd.singular_values[c].total_cmp(&svd.singular_values[a]));
    let energies: Vec<f64> = order.iter().map(|&r| svd.singular_values[r].powi(2)).collect();
    let total: f64 = energies.iter().sum();
    if total == 0.0 {
        return Ok(RankSelection {
            candidates: Vec::new(),
            ranks_used: 0,
            energies,
        });
    }
    let target = power_ratio / 100.0;
    let mut candidates: Vec<AngleCandidate> = Vec::new();
    let mut explained = 0.0;
    let mut ranks_used = 0;
    for (k, &r) in order.iter().enumerate() {
        let sigma = svd.singular_values[r];
        if sigma == 0.0 {
            break;
        }
        let mut ur = u.column(r).into_owned();
        let mut vr = vt.row(r).transpose();
        // sign convention: largest-magnitude entry of u positive
        let pivot = ur.iamax();
        if ur[pivot] < 0.0 {
            ur.neg_mut();
            vr.neg_mut();
        }
        let term = &ur * vr.transpose() * sigma;
        let (i, j) = rank1_peak(&term)?;
        ranks_used = k + 1;
        if !candidates.iter().any(|c| c.tx_index == i && c.rx_index == j) {
            candidates.push(AngleCandidate {
                aod: map.codebook.tx_angles[i],
                aoa: map.codebook.rx_angles[j],
                power: b[(i, j)],
                tx_index: i,
                rx_index: j,
                rank_index: k + 1,
            });
        }
        explained += energies[k];
        if explained / total >= target * (1.0 - 1e-12) {
            break;
        }
    }
    Ok(RankSelection {
        candidates,
        ranks_used,
        energies,
    })
}

/// Full extraction: rank selection, thresholding, clustering and polynomial
/// refinement. Estimates are sorted by descending power.
pub fn svd_extract(map: &BrsrpMap, params: &SvdParams) -> Result<Vec<AngleEstimate>> {
    params.validate()?;
    let sel = svd_candidates(map, params.power_ratio)?;
    let kept: Vec<AngleCandidate> = sel
        .candidates
        .into_iter()
        .filter(|c| c.power >= params.power_threshold)
        .collect();
    let mut out = cluster_candidates(&kept, params.cluster_radius);
    for est in &mut out {
        let (aod, aoa) = polyfit_refine(map, (est.aod, est.aoa), params.fit_window);
        est.aod = aod;
        est.aoa = aoa;
    }
    sort_by_power(&mut out);
    Ok(out)
}

fn sort_by_power(v: &mut [AngleEstimate]) {
    v.sort_by(|a, b| b.power.total_cmp(&a.power));
}

/// Power-weighted circular mean, anchored at the first angle.
fn weighted_mean_angle(angles: impl Iterator<Item = (f64, f64)> + Clone) -> f64 {
    let (anchor, _) = angles.clone().next().expect("nonempty");
    let (mut sw, mut s, mut n, mut plain) = (0.0, 0.0, 0.0, 0.0);
    for (a, w) in angles {
        let d = wrap(a - anchor);
        sw += w;
        s += w * d;
        n += 1.0;
        plain += d;
    }
    let off = if sw > 0.0 { s / sw } else { plain / n };
    wrap(anchor + off)
}

/// Single-linkage clustering on the `(tx_index, rx_index)` grid. Clusters keep
/// the order of their first member.
pub fn cluster_candidates(cands: &[AngleCandidate], radius: usize) -> Vec<AngleEstimate> {
    let n = cands.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut a: usize) -> usize {
        while p[a] != a {
            p[a] = p[p[a]];
            a = p[a];
        }
        a
    }
    for a in 0..n {
        for b in a + 1..n {
            let di = cands[a].tx_index.abs_diff(cands[b].tx_index);
            let dj = cands[a].rx_index.abs_diff(cands[b].rx_index);
            if di.max(dj) <= radius {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<AngleCandidate>)> = Vec::new();
    for (k, c) in cands.iter().enumerate() {
        let root = find(&mut parent, k);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, g)) => g.push(*c),
            None => groups.push((root, vec![*c])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| AngleEstimate {
            aod: weighted_mean_angle(members.iter().map(|c| (c.aod, c.power))),
            aoa: weighted_mean_angle(members.iter().map(|c| (c.aoa, c.power))),
            power: members.iter().map(|c| c.power).fold(f64::NEG_INFINITY, f64::max),
            cluster_members: members,
        })
        .collect()
}

/// Fits `β ≈ c₁ + c₂φ + c₃θ + c₄θ² + c₅φθ + c₆φ²` by power-weighted least
/// squares over a `(2w+1)²` beam window around `mean` and returns the vertex.
/// Falls back to `mean` if the surface has no maximum inside the window.
pub fn polyfit_refine(map: &BrsrpMap, mean: (f64, f64), window: usize) -> (f64, f64) {
    try_polyfit(map, mean, window).unwrap_or(mean)
}

fn try_polyfit(map: &BrsrpMap, mean: (f64, f64), window: usize) -> Option<(f64, f64)> {
    let cb = &map.codebook;
    // beams within (w + ½) spacings of the mean, so the window is symmetric
    // about it whether or not the mean sits on a grid point
    let pick = |side: Side, centre: f64| -> Vec<usize> {
        let reach = (window as f64 + 0.5) * cb.spacing(side) * (1.0 + 1e-9);
        let angles = cb.angles(side);
        (0..angles.len()).filter(|&k| wrap(angles[k] - centre).abs() <= reach).collect()
    };
    let rows = pick(Side::Tx, mean.0);
    let cols = pick(Side::Rx, mean.1);
    if rows.len() < 3 || cols.len() < 3 {
        return None;
    }
    // local coordinates keep the normal equations well conditioned
    let mut ata = SMatrix::<f64, 6, 6>::zeros();
    let mut atb = SVector::<f64, 6>::zeros();
    let (mut phi_lo, mut phi_hi, mut th_lo, mut th_hi) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &i in &rows {
        let phi = wrap(cb.tx_angles[i] - mean.0);
        phi_lo = phi_lo.min(phi);
        phi_hi = phi_hi.max(phi);
        for &j in &cols {
            let th = wrap(cb.rx_angles[j] - mean.1);
            th_lo = th_lo.min(th);
            th_hi = th_hi.max(th);
            let beta = map.values[(i, j)];
            let row = SVector::<f64, 6>::from([1.0, phi, th, th * th, phi * th, phi * phi]);
            ata += row * row.transpose() * beta;
            atb += row * (beta * beta);
        }
    }
    let c = ata.cholesky()?.solve(&atb);
    if !c.iter().all(|v| v.is_finite()) {
        return None;
    }
    let hessian = Matrix2::new(2.0 * c[5], c[4], c[4], 2.0 * c[3]);
    let det = 4.0 * c[5] * c[3] - c[4] * c[4];
    if !(c[5] < 0.0 && det > 0.0) {
        return None;
    }
    let vertex = Vector2::new(
        (c[4] * c[2] - 2.0 * c[3] * c[1]) / det,
        (c[4] * c[1] - 2.0 * c[5] * c[2]) / det,
    );
    debug_assert!((hessian * vertex + Vector2::new(c[1], c[2])).norm() <= 1e-6 * (1.0 + c.norm()));
    let inside = vertex.x >= phi_lo && vertex.x <= phi_hi && vertex.y >= th_lo && vertex.y <= th_hi;
    inside.then(|| (wrap(mean.0 + vertex.x), wrap(mean.1 + vertex.y)))
}

/// Scaling factor `α = N (P_FA^{-1/N} - 1)` of cell-averaging CFAR with `N`
/// training cells.
pub fn cfar_threshold_factor(training_cells: usize, pfa: f64) -> f64 {
    let n = training_cells as f64;
    n * (pfa.powf(-1.0 / n) - 1.0)
}

/// Training cells of a square window with `guard` guard cells and `train`
/// training cells on each side.
pub fn cfar_training_cells(train: usize, guard: usize) -> usize {
    let outer = 2 * (guard + train) + 1;
    let inner = 2 * guard + 1;
    outer * outer - inner * inner
}

/// Per-cell detection mask of 2D cell-averaging CFAR. Edge cells whose window
/// does not fit in the map are never tested.
pub fn cfar_mask(values: &DMatrix<f64>, train: usize, guard: usize, pfa: f64) -> Result<DMatrix<bool>> {
    if train == 0 {
        return Err(Error::InvalidParameter("CFAR needs at least one training cell".into()));
    }
    if !(pfa > 0.0 && pfa < 1.0) {
        return Err(Error::InvalidParameter(format!("false-alarm probability {pfa}")));
    }
    let half = guard + train;
    let (rows, cols) = values.shape();
    if rows < 2 * half + 1 || cols < 2 * half + 1 {
        return Err(Error::InvalidParameter(format!(
            "{rows}x{cols} map is smaller than the {0}x{0} CFAR window",
            2 * half + 1
        )));
    }
    // summed-area table with a zero border
    let mut sat = DMatrix::<f64>::zeros(rows + 1, cols + 1);
    for i in 0..rows {
        for j in 0..cols {
            sat[(i + 1, j + 1)] = values[(i, j)] + sat[(i, j + 1)] + sat[(i + 1, j)] - sat[(i, j)];
        }
    }
    let box_sum = |i0: usize, j0: usize, i1: usize, j1: usize| -> f64 {
        sat[(i1 + 1, j1 + 1)] - sat[(i0, j1 + 1)] - sat[(i1 + 1, j0)] + sat[(i0, j0)]
    };
    let n = cfar_training_cells(train, guard);
    let alpha = cfar_threshold_factor(n, pfa);
    let mut mask = DMatrix::from_element(rows, cols, false);
    for i in half..rows - half {
        for j in half..cols - half {
            let outer = box_sum(i - half, j - half, i + half, j + half);
            let inner = box_sum(i - guard, j - guard, i + guard, j + guard);
            let noise = (outer - inner) / n as f64;
            mask[(i, j)] = values[(i, j)] > alpha * noise;
        }
    }
    Ok(mask)
}

/// CA-CFAR detections clustered like the SVD candidates (radius 1).
pub fn cfar_detect(map: &BrsrpMap, train: usize, guard: usize, pfa: f64) -> Result<Vec<AngleEstimate>> {
    let mask = cfar_mask(&map.values, train, guard, pfa)?;
    let mut hits = Vec::new();
    for i in 0..mask.nrows() {
        for j in 0..mask.ncols() {
            if mask[(i, j)] {
                hits.push(AngleCandidate {
                    aod: map.codebook.tx_angles[i],
                    aoa: map.codebook.rx_angles[j],
                    power: map.values[(i, j)],
                    tx_index: i,
                    rx_index: j,
                    rank_index: 0,
                });
            }
        }
    }
    let mut out = cluster_candidates(&hits, 1);
    sort_by_power(&mut out);
    Ok(out)
}

/// Share of the energy explained by the first `k` terms, for diagnostics.
pub fn explained_ratio(energies: &[f64], k: usize) -> f64 {
    let total: f64 = energies.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    energies.iter().take(k).sum::<f64>() / total
}
