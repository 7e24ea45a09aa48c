//! Evaluation: GOSPA over (AoD, AoA) sets, sidelobe false detections and
//! trajectory error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap, UeState};
use crate::toa::PathEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GospaParams {
    /// Cutoff `d_c` in degrees.
    pub cutoff: f64,
    pub exponent: f64,
    pub penalty: f64,
}

impl Default for GospaParams {
    fn default() -> Self {
        Self {
            cutoff: 10.0,
            exponent: 2.0,
            penalty: 2.0,
        }
    }
}

impl GospaParams {
    pub fn new(cutoff: f64, exponent: f64, penalty: f64) -> Result<Self> {
        let p = Self {
            cutoff,
            exponent,
            penalty,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::InvalidParameter(format!("GOSPA cutoff must be positive, got {}", self.cutoff)));
        }
        if !(self.exponent >= 1.0 && self.exponent.is_finite()) {
            return Err(Error::InvalidParameter(format!("GOSPA exponent must be ≥ 1, got {}", self.exponent)));
        }
        if !(self.penalty > 0.0 && self.penalty <= 2.0) {
            return Err(Error::InvalidParameter(format!("GOSPA penalty must be in (0, 2], got {}", self.penalty)));
        }
        Ok(())
    }

    /// `d_c^P / α`, the cost of one unmatched element.
    pub fn unmatched_cost(&self) -> f64 {
        self.cutoff.powf(self.exponent) / self.penalty
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GospaResult {
    /// `γ_GOSPA` in degrees.
    pub value: f64,
    /// Sum of `d^P` over matched pairs.
    pub localization: f64,
    /// Matched `(estimate, truth)` index pairs.
    pub assignment: Vec<(usize, usize)>,
    pub false_detections: usize,
    pub missed_detections: usize,
}

/// Distance in degrees between two `(aod, aoa)` pairs given in radians,
/// with each difference wrapped.
pub fn angle_distance_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    let d0 = wrap(a.0 - b.0).to_degrees();
    let d1 = wrap(a.1 - b.1).to_degrees();
    d0.hypot(d1)
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n×n");
    if n == 0 {
        return Vec::new();
    }
    // Shortest augmenting path with potentials; index 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    row_to_col
}

fn finish(params: &GospaParams, m: usize, n: usize, pairs: Vec<(usize, usize)>, localization: f64) -> GospaResult {
    let matched = pairs.len();
    let fd = m - matched;
    let md = n - matched;
    let total = localization + (fd + md) as f64 * params.unmatched_cost();
    GospaResult {
        value: total.max(0.0).powf(1.0 / params.exponent),
        localization,
        assignment: pairs,
        false_detections: fd,
        missed_detections: md,
    }
}

/// GOSPA between estimated and true `(aod, aoa)` sets (radians in, degrees
/// out). Pairs closer than the cutoff may be matched; everything else is a
/// false or missed detection.
pub fn gospa_angles(estimates: &[(f64, f64)], truth: &[(f64, f64)], params: &GospaParams) -> Result<GospaResult> {
    params.validate()?;
    let (m, n) = (estimates.len(), truth.len());
    let size = m.max(n);
    let pen = 2.0 * params.unmatched_cost();
    // Matching a close pair replaces two unmatched penalties by d^P.
    let mut cost = vec![0.0; size * size];
    let mut dist = vec![f64::INFINITY; size * size];
    for (i, e) in estimates.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let d = angle_distance_deg(*e, *t);
            dist[i * size + j] = d;
            if d < params.cutoff {
                cost[i * size + j] = d.powf(params.exponent) - pen;
            }
        }
    }
    let rows = hungarian(&cost, size);
    let mut pairs = Vec::new();
    let mut loc = 0.0;
    for (i, &j) in rows.iter().enumerate() {
        if i < m && j < n && dist[i * size + j] < params.cutoff && cost[i * size + j] < 0.0 {
            pairs.push((i, j));
            loc += dist[i * size + j].powf(params.exponent);
        }
    }
    Ok(finish(params, m, n, pairs, loc))
}

/// Exhaustive GOSPA over every partial matching; exponential, for testing.
pub fn gospa_brute_force(estimates: &[(f64, f64)], truth: &[(f64, f64)], params: &GospaParams) -> Result<GospaResult> {
    params.validate()?;
    fn rec(
        i: usize,
        est: &[(f64, f64)],
        truth: &[(f64, f64)],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cur_cost: f64,
        params: &GospaParams,
        best: &mut (f64, Vec<(usize, usize)>, f64),
    ) {
        if i == est.len() {
            let total = cur_cost + (est.len() + truth.len() - 2 * cur.len()) as f64 * params.unmatched_cost();
            if total < best.0 {
                *best = (total, cur.clone(), cur_cost);
            }
            return;
        }
        rec(i + 1, est, truth, used, cur, cur_cost, params, best);
        for j in 0..truth.len() {
            if used[j] {
                continue;
            }
            let d = angle_distance_deg(est[i], truth[j]);
            if d >= params.cutoff {
                continue;
            }
            used[j] = true;
            cur.push((i, j));
            rec(i + 1, est, truth, used, cur, cur_cost + d.powf(params.exponent), params, best);
            cur.pop();
            used[j] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new(), 0.0);
    rec(0, estimates, truth, &mut vec![false; truth.len()], &mut Vec::new(), 0.0, params, &mut best);
    Ok(finish(params, estimates.len(), truth.len(), best.1, best.2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlfdResult {
    pub count: usize,
    /// `γ_SLFD` in degrees.
    pub value: f64,
    /// Indices of estimates judged to be sidelobes.
    pub flagged: Vec<usize>,
}

/// Default ToA threshold for declaring two detections the same path.
pub const SLFD_TOA_THRESHOLD: f64 = 0.3e-9;

/// Counts estimates that look like a sidelobe of a stronger one: nearly the
/// same ToA and a TX or RX beam index at most one apart. Each estimate is
/// counted at most once; ties in power go to the higher beam pair.
pub fn slfd_metric(estimates: &[PathEstimate], tau_th: f64, params: &GospaParams) -> Result<SlfdResult> {
    params.validate()?;
    if !(tau_th > 0.0) {
        return Err(Error::InvalidParameter(format!("ToA threshold must be positive, got {tau_th}")));
    }
    let key = |e: &PathEstimate| (e.power, std::cmp::Reverse((e.tx_index, e.rx_index)));
    let mut flagged = Vec::new();
    for (a, ea) in estimates.iter().enumerate() {
        let weaker_of_some_pair = estimates.iter().enumerate().any(|(b, eb)| {
            b != a
                && (ea.toa - eb.toa).abs() <= tau_th
                && (ea.tx_index.abs_diff(eb.tx_index) <= 1 || ea.rx_index.abs_diff(eb.rx_index) <= 1)
                && key(ea).partial_cmp(&key(eb)) == Some(std::cmp::Ordering::Less)
        });
        if weaker_of_some_pair {
            flagged.push(a);
        }
    }
    let count = flagged.len();
    Ok(SlfdResult {
        count,
        value: (count as f64 * params.unmatched_cost()).powf(1.0 / params.exponent),
        flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub rmse: f64,
    pub std: f64,
}

impl ErrorStats {
    /// RMSE and population standard deviation of `errors`.
    pub fn of(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let ms = errors.iter().map(|e| e * e).sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        Self {
            rmse: ms.sqrt(),
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Statistics of the Euclidean position error (m).
    pub position: ErrorStats,
    /// Wrapped heading error (degrees).
    pub heading: ErrorStats,
    /// Bias error (m).
    pub bias: ErrorStats,
    pub evaluated: usize,
    pub missing: usize,
}

/// Per-position errors of an estimate against the truth.
pub fn ue_errors(est: &UeState, truth: &UeState) -> (f64, f64, f64) {
    (
        (est.position - truth.position).norm(),
        wrap(est.heading - truth.heading).to_degrees(),
        est.bias - truth.bias,
    )
}

/// Trajectory RMSE/STD. Positions without any estimate are skipped and
/// counted as missing.
pub fn trajectory_stats(estimates: &[Option<UeState>], truth: &[UeState]) -> Result<TrajectoryStats> {
    if estimates.len() != truth.len() {
        return Err(Error::InvalidParameter(format!(
            "{} estimates for a trajectory of {} positions",
            estimates.len(),
            truth.len()
        )));
    }
    let (mut p, mut h, mut b) = (vec![], vec![], vec![]);
    for (e, t) in estimates.iter().zip(truth) {
        if let Some(e) = e {
            let (dp, dh, db) = ue_errors(e, t);
            p.push(dp);
            h.push(dh);
            b.push(db);
        }
    }
    Ok(TrajectoryStats {
        position: ErrorStats::of(&p),
        heading: ErrorStats::of(&h),
        bias: ErrorStats::of(&b),
        evaluated: p.len(),
        missing: estimates.len() - p.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEval {
    pub index: usize,
    pub gospa: Option<GospaResult>,
    pub slfd: Option<SlfdResult>,
    pub position_error: Option<f64>,
    pub heading_error_deg: Option<f64>,
    pub bias_error: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub positions: Vec<PositionEval>,
    pub trajectory: TrajectoryStats,
    /// Mean per-position SLAM runtime in seconds.
    pub mean_runtime_s: f64,
}

impl EvalReport {
    /// Row in the shape `position, heading, bias, time` (RMSE ± STD).
    pub fn summary_row(&self) -> [(f64, f64); 3] {
        let t = &self.trajectory;
        [(t.position.rmse, t.position.std), (t.heading.rmse, t.heading.std), (t.bias.rmse, t.bias.std)]
    }

    pub fn assemble(
        estimates: &[Option<UeState>],
        truth: &[UeState],
        gospa: Vec<Option<GospaResult>>,
        slfd: Vec<Option<SlfdResult>>,
        runtimes: &[f64],
    ) -> Result<Self> {
        let n = truth.len();
        if gospa.len() != n || slfd.len() != n || runtimes.len() != n {
            return Err(Error::InvalidParameter("per-position inputs differ in length".into()));
        }
        let trajectory = trajectory_stats(estimates, truth)?;
        let positions = gospa
            .into_iter()
            .zip(slfd)
            .enumerate()
            .map(|(k, (g, s))| {
                let errs = estimates[k].as_ref().map(|e| ue_errors(e, &truth[k]));
                PositionEval {
                    index: k,
                    gospa: g,
                    slfd: s,
                    position_error: errs.map(|e| e.0),
                    heading_error_deg: errs.map(|e| e.1),
                    bias_error: errs.map(|e| e.2),
                    runtime_s: runtimes[k],
                }
            })
            .collect();
        let mean_runtime_s = if n == 0 { 0.0 } else { runtimes.iter().sum::<f64>() / n as f64 };
        Ok(Self {
            positions,
            trajectory,
            mean_runtime_s,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deg(a: f64, b: f64) -> (f64, f64) {
        (a.to_radians(), b.to_radians())
    }

    fn est(toa_ns: f64, tx: usize, rx: usize, power: f64) -> PathEstimate {
        PathEstimate {
            aod: 0.0,
            aoa: 0.0,
            power,
            tx_index: tx,
            rx_index: rx,
            toa: toa_ns * 1e-9,
        }
    }

    #[test]
    fn perfect_match_is_zero() {
        let s = vec![deg(10.0, 20.0), deg(-30.0, 100.0)];
        let g = gospa_angles(&s, &s, &GospaParams::default()).unwrap();
        assert_eq!(g.value, 0.0);
        assert_eq!(g.assignment.len(), 2);
    }

    #[test]
    fn one_miss() {
        let g = gospa_angles(&[], &[deg(0.0, 0.0)], &GospaParams::default()).unwrap();
        assert!((g.value - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!((g.false_detections, g.missed_detections), (0, 1));
        assert_eq!(gospa_angles(&[], &[], &GospaParams::default()).unwrap().value, 0.0);
    }

    #[test]
    fn far_pair_is_one_fd_and_one_md() {
        let g = gospa_angles(&[deg(0.0, 0.0)], &[deg(30.0, 0.0)], &GospaParams::default()).unwrap();
        assert!(g.assignment.is_empty());
        assert!((g.value - 100f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wrapped_distance() {
        assert!((angle_distance_deg(deg(179.0, 0.0), deg(-179.0, 0.0)) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_params() {
        assert!(GospaParams::new(0.0, 2.0, 2.0).is_err());
        assert!(GospaParams::new(10.0, 0.5, 2.0).is_err());
        assert!(GospaParams::new(10.0, 2.0, 2.5).is_err());
    }

    #[test]
    fn hungarian_small() {
        let c = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let a = hungarian(&c, 3);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[i * 3 + j]).sum();
        assert_eq!(total, 5.0);
    }

    #[test]
    fn slfd_examples() {
        let p = GospaParams::default();
        assert_eq!(slfd_metric(&[est(10.0, 5, 5, 1.0)], SLFD_TOA_THRESHOLD, &p).unwrap().count, 0);
        let two = slfd_metric(&[est(10.0, 5, 5, 1.0), est(10.0, 6, 40, 0.1)], SLFD_TOA_THRESHOLD, &p).unwrap();
        assert_eq!(two.count, 1);
        assert_eq!(two.flagged, vec![1]);
        assert!((two.value - 50f64.sqrt()).abs() < 1e-12);
        let apart = slfd_metric(&[est(10.0, 5, 5, 1.0), est(15.0, 6, 5, 0.1)], SLFD_TOA_THRESHOLD, &p).unwrap();
        assert_eq!(apart.count, 0);
        assert!(slfd_metric(&[], 0.0, &p).is_err());
    }

    #[test]
    fn slfd_triple_counts_each_once() {
        let e = [est(10.0, 5, 5, 1.0), est(10.1, 6, 5, 0.5), est(10.2, 7, 5, 0.2)];
        let r = slfd_metric(&e, SLFD_TOA_THRESHOLD, &GospaParams::default()).unwrap();
        assert_eq!(r.flagged, vec![1, 2]);
    }

    #[test]
    fn trajectory_examples() {
        let truth: Vec<UeState> = (0..5).map(|k| UeState::new(k as f64, 0.0, 0.1, 2.0)).collect();
        let same: Vec<_> = truth.iter().copied().map(Some).collect();
        let s = trajectory_stats(&same, &truth).unwrap();
        assert_eq!(s.position, ErrorStats::default());
        let shifted: Vec<_> = truth.iter().map(|t| Some(UeState::new(t.position.x + 1.0, 0.0, 0.1, 2.0))).collect();
        let s = trajectory_stats(&shifted, &truth).unwrap();
        assert!((s.position.rmse - 1.0).abs() < 1e-12 && s.position.std.abs() < 1e-12);
        assert!(trajectory_stats(&same[..3], &truth).is_err());
    }

    #[test]
    fn trajectory_hand_computed() {
        let truth = vec![UeState::new(0.0, 0.0, 0.0, 0.0); 5];
        let errs: [(f64, f64, f64, f64); 5] = [(3.0, 4.0, 10.0, 1.0), (0.0, 1.0, -20.0, -1.0), (1.0, 0.0, 0.0, 2.0), (0.0, 0.0, 350.0, 0.0), (6.0, 8.0, 5.0, -2.0)];
        let est: Vec<_> = errs.iter().map(|e| Some(UeState::new(e.0, e.1, e.2.to_radians(), e.3))).collect();
        let s = trajectory_stats(&est, &truth).unwrap();
        // |p| = 5, 1, 1, 0, 10 → mean square 127/5; mean 17/5
        assert!((s.position.rmse - (127.0f64 / 5.0).sqrt()).abs() < 1e-12);
        let var = 127.0 / 5.0 - (17.0f64 / 5.0).powi(2);
        assert!((s.position.std - var.sqrt()).abs() < 1e-12);
        // headings wrap to 10, -20, 0, -10, 5
        assert!((s.heading.rmse - (625.0f64 / 5.0).sqrt()).abs() < 1e-9);
        assert!((s.bias.rmse - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_counts() {
        let truth = vec![UeState::new(0.0, 0.0, 0.0, 0.0); 2];
        let est = vec![None, Some(UeState::new(1.0, 0.0, 0.0, 0.0))];
        let r = EvalReport::assemble(&est, &truth, vec![None, None], vec![None, None], &[0.1, 0.3]).unwrap();
        assert_eq!(r.trajectory.missing, 1);
        assert!((r.mean_runtime_s - 0.2).abs() < 1e-12);
        assert_eq!(r.positions[1].position_error, Some(1.0));
    }

    fn set(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
        prop::collection::vec((-0.3f64..0.3, -0.3f64..0.3), 0..=max)
    }

    proptest! {
        #[test]
        fn matches_brute_force(a in set(6), b in set(6)) {
            let p = GospaParams::default();
            let fast = gospa_angles(&a, &b, &p).unwrap();
            let slow = gospa_brute_force(&a, &b, &p).unwrap();
            prop_assert!((fast.value.powi(2) - slow.value.powi(2)).abs() <= 1e-12 * slow.value.powi(2).max(1.0));
            prop_assert_eq!(fast.assignment.len() + fast.false_detections, a.len());
            prop_assert_eq!(fast.assignment.len() + fast.missed_detections, b.len());
        }

        #[test]
        fn symmetric(a in set(6), b in set(6)) {
            let p = GospaParams::default();
            let ab = gospa_angles(&a, &b, &p).unwrap().value;
            let ba = gospa_angles(&b, &a, &p).unwrap().value;
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn isolated_false_detection_adds_penalty(a in set(5), b in set(5)) {
            let p = GospaParams::default();
            let base = gospa_angles(&a, &b, &p).unwrap().value.powi(2);
            let mut a2 = a.clone();
            a2.push((2.5, -2.5));
            let more = gospa_angles(&a2, &b, &p).unwrap().value.powi(2);
            prop_assert!((more - base - p.unmatched_cost()).abs() < 1e-9);
        }

        #[test]
        fn slfd_order_invariant(
            items in prop::collection::vec((0.0f64..2.0, 0usize..6, 0usize..6, 0.01f64..1.0), 0..7),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let e: Vec<_> = items.iter().map(|&(t, i, j, p)| est(t, i, j, p)).collect();
            let mut shuffled = e.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = GospaParams::default();
            prop_assert_eq!(
                slfd_metric(&e, SLFD_TOA_THRESHOLD, &p).unwrap().count,
                slfd_metric(&shuffled, SLFD_TOA_THRESHOLD, &p).unwrap().count
            );
        }
    }
}
