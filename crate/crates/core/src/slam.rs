//! Snapshot SLAM: joint estimation of the UE state and one landmark per
//! non-line-of-sight path from a single set of `[range, aod, aoa]` measurements.
//!
//! The estimator minimises
//! `L(x) = (x-μ)ᵀΣ⁻¹(x-μ) + Σ_n f(q_n(x))` with `q_n = r_nᵀR_n⁻¹r_n` and either
//! `f(q) = q` or the Cauchy loss `f(q) = log(1+q)`, by Gauss-Newton with
//! inflated covariances `(1+q_n)R_n` and a backtracking line search.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix4, SymmetricEigen, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    jacobian_measurement, path_jacobian, predict_measurement, predict_path, wrap, JointState, Landmark,
    Measurement, PathKind, Pose2, UeState, UE_DIM,
};

/// Gaussian prior in information form. Zero blocks mean "no prior" for that
/// part of the state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mean: DVector<f64>,
    pub information: DMatrix<f64>,
}

impl GaussianPrior {
    pub fn none(n_landmarks: usize) -> Self {
        let n = UE_DIM + 2 * n_landmarks;
        Self {
            mean: DVector::zeros(n),
            information: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_landmarks(&self) -> usize {
        (self.dim() - UE_DIM) / 2
    }

    /// UE prior `N(mean, covariance)` and no map information.
    pub fn from_ue(mean: &Vector4<f64>, covariance: &Matrix4<f64>, n_landmarks: usize) -> Result<Self> {
        let info = covariance
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("UE prior covariance".into()))?
            .inverse();
        let mut p = Self::none(n_landmarks);
        p.mean.fixed_rows_mut::<4>(0).copy_from(mean);
        p.information.fixed_view_mut::<4, 4>(0, 0).copy_from(&info);
        Ok(p)
    }

    /// Same UE block, resized to a different landmark count.
    pub fn resized(&self, n_landmarks: usize) -> Self {
        let mut p = Self::none(n_landmarks);
        p.mean.fixed_rows_mut::<4>(0).copy_from(&self.mean.fixed_rows::<4>(0));
        p.information
            .fixed_view_mut::<4, 4>(0, 0)
            .copy_from(&self.information.fixed_view::<4, 4>(0, 0));
        p
    }

    /// Fuses a tight scalar observation `B = bias` with information `info`.
    pub fn with_known_bias(mut self, bias: f64, info: f64) -> Self {
        let block: Matrix4<f64> = self.information.fixed_view::<4, 4>(0, 0).into_owned();
        let mut fused = block;
        fused[(3, 3)] += info;
        let mut eta = block * self.mean.fixed_rows::<4>(0);
        eta[3] += info * bias;
        let mean = match fused.cholesky() {
            Some(c) => c.solve(&eta),
            None => {
                let mut m: Vector4<f64> = self.mean.fixed_rows::<4>(0).into_owned();
                m[3] = bias;
                m
            }
        };
        self.mean.fixed_rows_mut::<4>(0).copy_from(&mean);
        self.information.fixed_view_mut::<4, 4>(0, 0).copy_from(&fused);
        self
    }

    pub fn has_information(&self) -> bool {
        self.information.iter().any(|v| *v != 0.0)
    }

    /// `x - μ` with the heading component wrapped.
    fn deviation(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut d = x - &self.mean;
        d[2] = wrap(d[2]);
        d
    }
}

/// Which measurement (if any) is treated as the direct path, and whether the
/// prior enters the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub los_measurement: Option<usize>,
    pub uses_prior: bool,
}

impl Hypothesis {
    /// Path role of each measurement; the others get consecutive landmarks.
    pub fn path_kinds(&self, n_measurements: usize) -> Vec<PathKind> {
        let mut k = 0;
        (0..n_measurements)
            .map(|n| {
                if Some(n) == self.los_measurement {
                    PathKind::Los
                } else {
                    k += 1;
                    PathKind::Nlos(k - 1)
                }
            })
            .collect()
    }

    pub fn n_landmarks(&self, n_measurements: usize) -> usize {
        n_measurements - usize::from(self.los_measurement.is_some_and(|l| l < n_measurements))
    }

    pub fn label(&self) -> String {
        let los = match self.los_measurement {
            Some(n) => format!("LoS=z{n}"),
            None => "NLoS-only".to_string(),
        };
        format!("{los}, {}", if self.uses_prior { "prior" } else { "no prior" })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamSolution {
    pub estimate: JointState,
    /// `A⁻¹` at the final iterate.
    pub covariance: DMatrix<f64>,
    pub cost: f64,
    pub hypothesis: Hypothesis,
    pub iterations: usize,
    /// Objective after each accepted iterate, starting with the initial point.
    pub cost_history: Vec<f64>,
    pub path_kinds: Vec<PathKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GnConfig {
    pub robust: bool,
    pub max_iterations: usize,
    /// Stop once `‖Δx‖∞` falls below this.
    pub step_tolerance: f64,
    /// Stop once an accepted step lowers the objective by less than this.
    pub decrease_tolerance: f64,
    pub armijo_alpha: f64,
    pub armijo_beta: f64,
    pub max_backtracks: usize,
}

impl Default for GnConfig {
    fn default() -> Self {
        Self {
            robust: true,
            max_iterations: 100,
            step_tolerance: 1e-6,
            decrease_tolerance: 1e-9,
            armijo_alpha: 0.3,
            armijo_beta: 0.8,
            max_backtracks: 30,
        }
    }
}

fn loss(q: f64, robust: bool) -> f64 {
    if robust {
        q.ln_1p()
    } else {
        q
    }
}

/// `f'(q)`, the scale applied to `R⁻¹`.
fn loss_weight(q: f64, robust: bool) -> f64 {
    if robust {
        1.0 / (1.0 + q)
    } else {
        1.0
    }
}

/// `(1 + q) R`.
pub fn inflate_covariance(r: &Matrix3<f64>, q: f64) -> Matrix3<f64> {
    r * (1.0 + q)
}

fn inverse_covariances(z: &[Measurement]) -> Result<Vec<Matrix3<f64>>> {
    z.iter()
        .enumerate()
        .map(|(n, m)| {
            m.covariance
                .cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::NotPositiveDefinite(format!("covariance of measurement {n}")))
        })
        .collect()
}

fn check_dimensions(x: &JointState, z: &[Measurement], kinds: &[PathKind], prior: &GaussianPrior) -> Result<()> {
    if kinds.len() != z.len() {
        return Err(Error::InvalidParameter(format!("{} path roles for {} measurements", kinds.len(), z.len())));
    }
    if prior.dim() != x.dim() {
        return Err(Error::InvalidParameter(format!(
            "prior has dimension {} but the state has {}",
            prior.dim(),
            x.dim()
        )));
    }
    Ok(())
}

/// Quadratic errors `q_n(x)` of each measurement.
pub fn quadratic_errors(bs: &Pose2, x: &JointState, z: &[Measurement], kinds: &[PathKind]) -> Result<Vec<f64>> {
    let r_inv = inverse_covariances(z)?;
    z.iter()
        .zip(kinds)
        .zip(&r_inv)
        .map(|((m, &k), ri)| {
            let r = m.residual(&predict_measurement(bs, x, k)?);
            Ok((r.transpose() * ri * r)[0])
        })
        .collect()
}

/// `L(x)` for a fixed assignment of measurements to paths.
pub fn objective(
    bs: &Pose2,
    x: &JointState,
    z: &[Measurement],
    kinds: &[PathKind],
    prior: &GaussianPrior,
    robust: bool,
) -> Result<f64> {
    check_dimensions(x, z, kinds, prior)?;
    let d = prior.deviation(&x.to_vector());
    let reg = (d.transpose() * &prior.information * &d)[0];
    let data: f64 = quadratic_errors(bs, x, z, kinds)?.into_iter().map(|q| loss(q, robust)).sum();
    Ok(reg + data)
}

/// Normal equations `A Δx = b` at `x` and the objective value there.
struct Linearization {
    a: DMatrix<f64>,
    b: DVector<f64>,
    cost: f64,
}

fn linearize(
    bs: &Pose2,
    x: &JointState,
    z: &[Measurement],
    kinds: &[PathKind],
    r_inv: &[Matrix3<f64>],
    prior: &GaussianPrior,
    robust: bool,
) -> Result<Linearization> {
    let d = prior.deviation(&x.to_vector());
    let mut a = prior.information.clone();
    let mut b = -(&prior.information * &d);
    let mut cost = (d.transpose() * &prior.information * &d)[0];
    for ((m, &k), ri) in z.iter().zip(kinds).zip(r_inv) {
        let r = m.residual(&predict_measurement(bs, x, k)?);
        let q = (r.transpose() * ri * r)[0];
        cost += loss(q, robust);
        let w = ri * loss_weight(q, robust);
        let h = jacobian_measurement(bs, x, k)?;
        let ht_w = h.transpose() * DMatrix::from_column_slice(3, 3, w.as_slice());
        a += &ht_w * &h;
        b += &ht_w * DVector::from_column_slice(r.as_slice());
    }
    Ok(Linearization { a, b, cost })
}

/// Exact gradient `∂L/∂x = 2Σ⁻¹(x-μ) - 2Σ f'(q_n) H_nᵀR_n⁻¹r_n`.
pub fn objective_gradient(
    bs: &Pose2,
    x: &JointState,
    z: &[Measurement],
    kinds: &[PathKind],
    prior: &GaussianPrior,
    robust: bool,
) -> Result<DVector<f64>> {
    check_dimensions(x, z, kinds, prior)?;
    let r_inv = inverse_covariances(z)?;
    Ok(linearize(bs, x, z, kinds, &r_inv, prior, robust)?.b * -2.0)
}

fn block_name(index: usize) -> String {
    if index < UE_DIM {
        "UE state (x, y, heading, bias)".to_string()
    } else {
        format!("landmark {}", (index - UE_DIM) / 2)
    }
}

/// Detects a (numerically) singular information matrix after Jacobi scaling
/// and names the block carrying most of the null direction.
fn check_rank(a: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    for i in 0..n {
        if !(a[(i, i)] > 0.0) {
            return Err(Error::RankDeficient { block: block_name(i) });
        }
    }
    let scale = DVector::from_fn(n, |i, _| 1.0 / a[(i, i)].sqrt());
    let s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let eig = SymmetricEigen::new(s);
    let (imin, &lmin) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let lmax = eig.eigenvalues.max();
    if lmin <= 1e-12 * lmax {
        let v = eig.eigenvectors.column(imin);
        let mut best = (0, -1.0);
        let ue: f64 = (0..UE_DIM).map(|i| v[i] * v[i]).sum();
        if ue > best.1 {
            best = (0, ue);
        }
        for k in 0..(n - UE_DIM) / 2 {
            let e = v[UE_DIM + 2 * k].powi(2) + v[UE_DIM + 2 * k + 1].powi(2);
            if e > best.1 {
                best = (UE_DIM + 2 * k, e);
            }
        }
        return Err(Error::RankDeficient { block: block_name(best.0) });
    }
    Ok(())
}

fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(c) => Ok(c.solve(b)),
        None => a
            .clone()
            .lu()
            .solve(b)
            .ok_or_else(|| Error::NotPositiveDefinite("Gauss-Newton system".into())),
    }
}

/// `A⁻¹` through the Jacobi-scaled matrix, with one refinement step.
fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let d = DVector::from_fn(n, |i, _| 1.0 / a[(i, i)].abs().sqrt().max(f64::MIN_POSITIVE));
    let s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * d[i] * d[j]);
    let s_inv = match s.clone().cholesky() {
        Some(c) => c.inverse(),
        None => s
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite("final information matrix".into()))?,
    };
    let mut inv = DMatrix::from_fn(n, n, |i, j| s_inv[(i, j)] * d[i] * d[j]);
    let residual = DMatrix::identity(n, n) - a * &inv;
    inv += &inv * residual;
    Ok((&inv + inv.transpose()) * 0.5)
}

fn state_from(v: &DVector<f64>) -> Result<JointState> {
    JointState::from_vector(v)
}

/// Gauss-Newton with inflated covariances and backtracking line search,
/// started from `init`.
pub fn gn_solve(
    bs: &Pose2,
    z: &[Measurement],
    prior: &GaussianPrior,
    hypothesis: Hypothesis,
    init: &JointState,
    config: &GnConfig,
) -> Result<SlamSolution> {
    let kinds = hypothesis.path_kinds(z.len());
    check_dimensions(init, z, &kinds, prior)?;
    if init.landmarks.len() != hypothesis.n_landmarks(z.len()) {
        return Err(Error::InvalidParameter(format!(
            "hypothesis needs {} landmarks, initial state has {}",
            hypothesis.n_landmarks(z.len()),
            init.landmarks.len()
        )));
    }
    let r_inv = inverse_covariances(z)?;
    let robust = config.robust;
    let mut x = init.clone();
    let mut lin = linearize(bs, &x, z, &kinds, &r_inv, prior, robust)?;
    if !lin.cost.is_finite() {
        return Err(Error::NonFinite("initial objective"));
    }
    let mut history = vec![lin.cost];
    let mut iterations = 0;
    while iterations < config.max_iterations {
        check_rank(&lin.a)?;
        let dx = solve_spd(&lin.a, &lin.b)?;
        if dx.amax() < config.step_tolerance {
            break;
        }
        let slope = -2.0 * lin.b.dot(&dx);
        let x0 = x.to_vector();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial = state_from(&(&x0 + &dx * t))?;
            if let Ok(c) = objective(bs, &trial, z, &kinds, prior, robust) {
                if c.is_finite() && c <= lin.cost + config.armijo_alpha * t * slope {
                    accepted = Some((trial, c));
                    break;
                }
            }
            t *= config.armijo_beta;
        }
        let Some((trial, c)) = accepted else {
            break;
        };
        iterations += 1;
        let decrease = lin.cost - c;
        x = trial;
        lin = linearize(bs, &x, z, &kinds, &r_inv, prior, robust)?;
        history.push(lin.cost);
        if decrease < config.decrease_tolerance || (dx.amax() * t) < config.step_tolerance {
            break;
        }
    }
    check_rank(&lin.a)?;
    let covariance = spd_inverse(&lin.a)?;
    Ok(SlamSolution {
        estimate: x,
        covariance,
        cost: lin.cost,
        hypothesis,
        iterations,
        cost_history: history,
        path_kinds: kinds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Bounds on the direct-path length used to bracket the bias.
    pub d_min: f64,
    pub d_max: f64,
    /// Variance of the trial bias in the augmented measurement (m²).
    pub bias_variance: f64,
    pub scan_points: usize,
    pub restarts: usize,
    pub bias_tolerance: f64,
    pub landmark_iterations: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            d_min: 1.0,
            d_max: 20.0,
            bias_variance: 9.0,
            scan_points: 41,
            restarts: 3,
            bias_tolerance: 1e-3,
            landmark_iterations: 50,
        }
    }
}

/// Bias interval implied by `d_min ≤ r + B ≤ d_max` for a direct path
/// observed at biased range `r` (range model `r = d - B`).
pub fn bias_bounds(range: f64, d_min: f64, d_max: f64) -> (f64, f64) {
    (d_min - range, d_max - range)
}

/// Closed-form UE moments from the direct path and a trial bias:
/// position on the AoD ray at distance `r + B`, heading from the AoA.
/// Covariance is `Ȟ blkdiag(R, σ²_B) Ȟᵀ`.
pub fn los_ue_moments(bs: &Pose2, z: &Measurement, bias: f64, bias_variance: f64) -> Result<(Vector4<f64>, Matrix4<f64>)> {
    let rho = z.range + bias;
    if !rho.is_finite() || !bias_variance.is_finite() {
        return Err(Error::NonFinite("direct-path initialisation"));
    }
    let psi = bs.heading + z.aod;
    let (s, c) = psi.sin_cos();
    let mean = Vector4::new(
        bs.position.x + rho * c,
        bs.position.y + rho * s,
        wrap(psi + PI - z.aoa),
        bias,
    );
    #[rustfmt::skip]
    let h = Matrix4::new(
        c, -rho * s,  0.0, c,
        s,  rho * c,  0.0, s,
        0.0, 1.0,    -1.0, 0.0,
        0.0, 0.0,     0.0, 1.0,
    );
    let mut r = Matrix4::zeros();
    r.fixed_view_mut::<3, 3>(0, 0).copy_from(&z.covariance);
    r[(3, 3)] = bias_variance;
    let cov = h * r * h.transpose();
    Ok((mean, (cov + cov.transpose()) * 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkInit {
    pub landmark: Landmark,
    /// Whether the 2-D Gauss-Newton met its step tolerance.
    pub converged: bool,
    pub cost: f64,
}

/// Starting point for the landmark search: the AoD/AoA ray intersection, else
/// the point on the AoD ray consistent with the bistatic range, else the
/// midpoint of that ray segment.
pub fn landmark_seed(bs: &Pose2, ue: &UeState, z: &Measurement) -> Landmark {
    let u = Vector2::new((bs.heading + z.aod).cos(), (bs.heading + z.aod).sin());
    let v = Vector2::new((ue.heading + z.aoa).cos(), (ue.heading + z.aoa).sin());
    let rhs = ue.position - bs.position;
    // t u - s v = ue - bs
    let m = Matrix2::new(u.x, -v.x, u.y, -v.y);
    let d = (z.range + ue.bias).max(0.0);
    if m.determinant().abs() > 1e-3 {
        if let Some(ts) = m.try_inverse().map(|mi| mi * rhs) {
            if ts[0] > 0.0 && ts[1] > 0.0 && ts[0] <= 4.0 * d.max(1.0) {
                let p = bs.position + u * ts[0];
                return Landmark { position: p };
            }
        }
    }
    let w = bs.position - ue.position;
    let denom = 2.0 * (d + w.dot(&u));
    if denom.abs() > 1e-9 {
        let t = (d * d - w.norm_squared()) / denom;
        if t > 0.0 && t < d {
            return Landmark {
                position: bs.position + u * t,
            };
        }
    }
    Landmark {
        position: bs.position + u * (0.5 * d.max(1.0)),
    }
}

/// Landmark position minimising `rᵀW⁻¹r`, `W = H_s Σ_ss H_sᵀ + R`, for a UE
/// distributed as `N(ue_mean, ue_cov)`.
pub fn init_landmark(
    bs: &Pose2,
    z: &Measurement,
    ue_mean: &Vector4<f64>,
    ue_cov: &Matrix4<f64>,
    max_iterations: usize,
) -> Result<LandmarkInit> {
    let ue = UeState::from_slice(ue_mean.as_slice());
    let seed = landmark_seed(bs, &ue, z);
    let cost_at = |m: &Landmark| -> Option<(f64, Vector3<f64>, Matrix3<f64>, nalgebra::Matrix3x2<f64>)> {
        let pred = predict_path(bs, &ue, Some(m)).ok()?;
        let (j_ue, j_m) = path_jacobian(bs, &ue, Some(m)).ok()?;
        let w = j_ue * ue_cov * j_ue.transpose() + z.covariance;
        let w_inv = w.cholesky()?.inverse();
        let r = z.residual(&pred);
        Some(((r.transpose() * w_inv * r)[0], r, w_inv, j_m?))
    };
    let mut m = seed;
    let Some(mut cur) = cost_at(&m) else {
        return Err(Error::DegenerateGeometry {
            what: "landmark seed",
            length: 0.0,
        });
    };
    let mut converged = false;
    for _ in 0..max_iterations {
        let (cost, r, w_inv, j) = cur;
        let a = j.transpose() * w_inv * j;
        let g = j.transpose() * w_inv * r;
        let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
            break;
        };
        if step.amax() < 1e-9 {
            converged = true;
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = Landmark {
                position: m.position + step * t,
            };
            if let Some(next) = cost_at(&cand) {
                if next.0 <= cost - 0.3 * t * 2.0 * g.dot(&step) {
                    m = cand;
                    cur = next;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            converged = cost < 1e-18 || step.amax() * t < 1e-9;
            break;
        }
    }
    Ok(LandmarkInit {
        landmark: m,
        converged,
        cost: cur.0,
    })
}

/// Outcome of the direct-path initialisation: UE moments, landmarks and the
/// selected bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LosInit {
    pub ue_mean: Vector4<f64>,
    pub ue_cov: Matrix4<f64>,
    pub landmarks: Vec<Landmark>,
    pub bias: f64,
    pub cost: f64,
}

impl LosInit {
    pub fn state(&self) -> JointState {
        JointState::new(UeState::from_slice(self.ue_mean.as_slice()), self.landmarks.clone())
    }
}

fn init_landmarks_for(
    bs: &Pose2,
    z: &[Measurement],
    kinds: &[PathKind],
    ue_mean: &Vector4<f64>,
    ue_cov: &Matrix4<f64>,
    iterations: usize,
) -> Result<Vec<Landmark>> {
    let n_landmarks = kinds.iter().filter(|k| matches!(k, PathKind::Nlos(_))).count();
    let mut out = vec![Landmark::new(0.0, 0.0); n_landmarks];
    for (m, k) in z.iter().zip(kinds) {
        if let PathKind::Nlos(i) = *k {
            out[i] = init_landmark(bs, m, ue_mean, ue_cov, iterations)?.landmark;
        }
    }
    Ok(out)
}

/// Initial state for one hypothesis from the direct path: for every trial
/// bias the UE moments and all landmarks are recomputed and `L(x)` is
/// evaluated; the bias is found by a scan over the admissible interval
/// followed by golden-section refinement around the best few minima.
pub fn init_ue_from_los(
    bs: &Pose2,
    z: &[Measurement],
    los: usize,
    prior: &GaussianPrior,
    robust: bool,
    known_bias: Option<f64>,
    config: &InitConfig,
) -> Result<LosInit> {
    let z_los = z.get(los).ok_or(Error::EmptyInput("direct-path measurement"))?;
    let hyp = Hypothesis {
        los_measurement: Some(los),
        uses_prior: false,
    };
    let kinds = hyp.path_kinds(z.len());
    let build = |bias: f64| -> Result<LosInit> {
        let (ue_mean, ue_cov) = los_ue_moments(bs, z_los, bias, config.bias_variance)?;
        let landmarks = init_landmarks_for(bs, z, &kinds, &ue_mean, &ue_cov, config.landmark_iterations)?;
        let x = JointState::new(UeState::from_slice(ue_mean.as_slice()), landmarks.clone());
        let cost = objective(bs, &x, z, &kinds, prior, robust)?;
        Ok(LosInit {
            ue_mean,
            ue_cov,
            landmarks,
            bias,
            cost,
        })
    };
    if let Some(b) = known_bias {
        return build(b);
    }
    let (lo, hi) = bias_bounds(z_los.range, config.d_min, config.d_max);
    if !(lo < hi) {
        return Err(Error::InvalidParameter(format!("empty bias interval [{lo}, {hi}]")));
    }
    let eval = |b: f64| build(b).map(|i| i.cost).unwrap_or(f64::INFINITY);
    let n = config.scan_points.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let grid: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
    let costs: Vec<f64> = grid.iter().map(|&b| eval(b)).collect();
    let mut minima: Vec<usize> = (0..n)
        .filter(|&k| {
            let left = if k > 0 { costs[k - 1] } else { f64::INFINITY };
            let right = if k + 1 < n { costs[k + 1] } else { f64::INFINITY };
            costs[k].is_finite() && costs[k] <= left && costs[k] <= right
        })
        .collect();
    minima.sort_by(|a, b| costs[*a].total_cmp(&costs[*b]));
    minima.truncate(config.restarts.max(1));
    if minima.is_empty() {
        return Err(Error::NonFinite("bias search objective"));
    }
    let mut best = (grid[minima[0]], costs[minima[0]]);
    for &k in &minima {
        let (b, c) = golden_section(&eval, (grid[k] - step).max(lo), (grid[k] + step).min(hi), config.bias_tolerance);
        if c < best.1 {
            best = (b, c);
        }
    }
    build(best.0)
}

/// Bounded golden-section minimisation; returns the best point seen.
pub fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let candidates = [(a, f(a)), (b, f(b)), (c, fc), (d, fd)];
    candidates
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("nonempty")
}

/// Indices of measurements that may be the direct path: within 1 m of the
/// shortest range and within 3 dB of the strongest power.
pub fn los_candidates(z: &[Measurement]) -> Vec<usize> {
    if z.is_empty() {
        return Vec::new();
    }
    let r_min = z.iter().map(|m| m.range).fold(f64::INFINITY, f64::min);
    let p_max = z.iter().map(|m| m.power).fold(f64::NEG_INFINITY, f64::max);
    let floor = p_max * 10f64.powf(-0.3);
    (0..z.len())
        .filter(|&n| z[n].range <= r_min + 1.0 && z[n].power >= floor)
        .collect()
}

/// With a prior: the NLoS-only hypothesis and, for each direct-path
/// candidate, one hypothesis with and one without the prior (`2N + 1`).
/// Without a prior the direct path is needed for initialisation, so only the
/// `N` no-prior hypotheses remain.
pub fn enumerate_hypotheses(z: &[Measurement], prior_available: bool) -> Vec<Hypothesis> {
    let cands = los_candidates(z);
    let mut out = Vec::with_capacity(2 * cands.len() + 1);
    if prior_available {
        out.push(Hypothesis {
            los_measurement: None,
            uses_prior: true,
        });
    }
    for n in cands {
        if prior_available {
            out.push(Hypothesis {
                los_measurement: Some(n),
                uses_prior: true,
            });
        }
        out.push(Hypothesis {
            los_measurement: Some(n),
            uses_prior: false,
        });
    }
    out
}

/// Prior and cost-function combinations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveMode {
    /// No prior, quadratic cost.
    Ofv0,
    /// No prior, Cauchy cost.
    Ofv1,
    /// Prior, quadratic cost.
    Ofv2,
    /// Prior, Cauchy cost.
    Proposed,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 4] = [Self::Ofv0, Self::Ofv1, Self::Ofv2, Self::Proposed];

    pub fn robust(self) -> bool {
        matches!(self, Self::Ofv1 | Self::Proposed)
    }

    pub fn uses_prior(self) -> bool {
        matches!(self, Self::Ofv2 | Self::Proposed)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Ofv0 => "ofv0",
            Self::Ofv1 => "ofv1",
            Self::Ofv2 => "ofv2",
            Self::Proposed => "proposed",
        }
    }
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown ablation mode {s:?}")))
    }
}

/// UE prior carried between trajectory points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UePrior {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
}

impl UePrior {
    /// Previous estimate with covariance `I₄`.
    pub fn chained(previous: &UeState) -> Self {
        Self {
            mean: previous.to_vector(),
            covariance: Matrix4::identity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnapshotConfig {
    pub mode: ObjectiveMode,
    pub known_bias: Option<f64>,
    pub known_bias_information: f64,
    pub gn: GnConfig,
    pub init: InitConfig,
}

impl SnapshotConfig {
    pub fn new(mode: ObjectiveMode) -> Self {
        Self {
            mode,
            known_bias: None,
            known_bias_information: 1e12,
            gn: GnConfig {
                robust: mode.robust(),
                ..GnConfig::default()
            },
            init: InitConfig::default(),
        }
    }

    pub fn with_known_bias(mut self, bias: Option<f64>) -> Self {
        self.known_bias = bias;
        self
    }
}

fn solve_hypothesis(
    bs: &Pose2,
    z: &[Measurement],
    ue_prior: Option<&UePrior>,
    hyp: Hypothesis,
    config: &SnapshotConfig,
) -> Result<SlamSolution> {
    let kinds = hyp.path_kinds(z.len());
    let n_landmarks = hyp.n_landmarks(z.len());
    let robust = config.mode.robust();
    let mut prior = match (hyp.uses_prior, ue_prior) {
        (true, Some(p)) => GaussianPrior::from_ue(&p.mean, &p.covariance, n_landmarks)?,
        (true, None) => return Err(Error::InvalidParameter("hypothesis needs a prior".into())),
        (false, _) => GaussianPrior::none(n_landmarks),
    };
    if let Some(b) = config.known_bias {
        prior = prior.with_known_bias(b, config.known_bias_information);
    }
    let init = if hyp.uses_prior {
        let p = ue_prior.expect("checked above");
        let mean: Vector4<f64> = prior.mean.fixed_rows::<4>(0).into_owned();
        let landmarks = init_landmarks_for(bs, z, &kinds, &mean, &p.covariance, config.init.landmark_iterations)?;
        JointState::new(UeState::from_slice(mean.as_slice()), landmarks)
    } else {
        let los = hyp
            .los_measurement
            .ok_or_else(|| Error::InvalidParameter("no direct path and no prior to initialise from".into()))?;
        init_ue_from_los(bs, z, los, &prior, robust, config.known_bias, &config.init)?.state()
    };
    for (i, lm) in init.landmarks.iter().enumerate() {
        prior.mean[UE_DIM + 2 * i] = lm.position.x;
        prior.mean[UE_DIM + 2 * i + 1] = lm.position.y;
    }
    let gn = GnConfig { robust, ..config.gn };
    gn_solve(bs, z, &prior, hyp, &init, &gn)
}

/// Solves every hypothesis and keeps the lowest-cost solution; on equal cost
/// the earlier hypothesis wins.
pub fn solve_snapshot(
    bs: &Pose2,
    z: &[Measurement],
    ue_prior: Option<&UePrior>,
    config: &SnapshotConfig,
) -> Result<SlamSolution> {
    let prior = if config.mode.uses_prior() { ue_prior } else { None };
    let hyps = enumerate_hypotheses(z, prior.is_some());
    if hyps.is_empty() {
        return Err(Error::AllHypothesesFailed(vec![
            "no direct-path candidate and no prior".to_string(),
        ]));
    }
    let mut best: Option<SlamSolution> = None;
    let mut failures = Vec::new();
    for h in hyps {
        match solve_hypothesis(bs, z, prior, h, config) {
            Ok(sol) if sol.cost.is_finite() => {
                if best.as_ref().is_none_or(|b| sol.cost < b.cost) {
                    best = Some(sol);
                }
            }
            Ok(_) => failures.push(format!("{}: non-finite cost", h.label())),
            Err(e) => failures.push(format!("{}: {e}", h.label())),
        }
    }
    best.ok_or(Error::AllHypothesesFailed(failures))
}

/// Result for one trajectory point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub solution: Option<SlamSolution>,
    pub error: Option<String>,
    /// Reported UE state: the solution, or the last good estimate on failure.
    pub ue: Option<UeState>,
}

/// Sequential pass over a trajectory. The first point has no prior; later
/// points use the last successful estimate with covariance `I₄` as prior.
/// `known_bias`, if given, has one entry per point.
pub fn run_trajectory(
    bs: &Pose2,
    measurements: &[Vec<Measurement>],
    config: &SnapshotConfig,
    known_bias: Option<&[f64]>,
) -> Result<Vec<TrajectoryStep>> {
    if let Some(kb) = known_bias {
        if kb.len() != measurements.len() {
            return Err(Error::InvalidParameter(format!(
                "{} known-bias values for {} positions",
                kb.len(),
                measurements.len()
            )));
        }
    }
    let mut out: Vec<TrajectoryStep> = Vec::with_capacity(measurements.len());
    for (k, z) in measurements.iter().enumerate() {
        let last = out.last().and_then(|s| s.ue);
        out.push(solve_step(bs, z, last.as_ref(), config, known_bias.map(|kb| kb[k])));
    }
    Ok(out)
}

/// One trajectory point given the previous reported estimate (if any).
pub fn solve_step(
    bs: &Pose2,
    z: &[Measurement],
    previous: Option<&UeState>,
    config: &SnapshotConfig,
    known_bias: Option<f64>,
) -> TrajectoryStep {
    let cfg = config.with_known_bias(known_bias);
    let prior = previous.map(UePrior::chained);
    match solve_snapshot(bs, z, prior.as_ref(), &cfg) {
        Ok(sol) => TrajectoryStep {
            ue: Some(sol.estimate.ue),
            solution: Some(sol),
            error: None,
        },
        Err(e) => TrajectoryStep {
            solution: None,
            error: Some(e.to_string()),
            ue: previous.copied(),
        },
    }
}
