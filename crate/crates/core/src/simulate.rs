//! Synthetic scenes: geometric path truth, beam-swept power maps, frequency-domain
//! reference-signal grids, time-domain captures and noisy channel parameters.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{predict_path, wrap, Landmark, Measurement, PathKind, Pose2, UeState};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

fn default_reflection() -> f64 {
    0.5
}

fn default_carrier() -> f64 {
    60e9
}

/// The simulated world: a fixed base station, a UE trajectory, point
/// reflectors and the UE clock-bias history (meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bs: Pose2,
    pub ue_trajectory: Vec<Pose2>,
    pub landmarks: Vec<Landmark>,
    /// One bias value per trajectory point. Left empty in a scene file, it is
    /// drawn as a random walk from `rng_seed` by [`Scene::prepare`].
    #[serde(default)]
    pub bias_trajectory: Vec<f64>,
    pub rng_seed: u64,
    /// Amplitude reflection coefficient per landmark; missing entries use 0.5.
    #[serde(default)]
    pub reflection: Vec<f64>,
    /// Trajectory indices at which the direct path is blocked.
    #[serde(default)]
    pub los_blocked: Vec<usize>,
    #[serde(default = "default_carrier")]
    pub carrier_hz: f64,
    /// Starting value of a generated bias random walk.
    #[serde(default)]
    pub bias_start: f64,
}

impl Scene {
    /// The bundled 45-point indoor trajectory (0.5 m spacing) with five
    /// reflectors and a short stretch where the direct path is blocked.
    pub fn default_indoor(seed: u64) -> Self {
        let mut ue_trajectory = Vec::with_capacity(45);
        for k in 0..25 {
            ue_trajectory.push(Pose2::new(4.0, -8.0 + 0.5 * k as f64, FRAC_PI_2));
        }
        for k in 0..20 {
            ue_trajectory.push(Pose2::new(4.5 + 0.5 * k as f64, 4.0, 0.0));
        }
        let mut scene = Self {
            bs: Pose2::new(0.0, 0.0, 0.0),
            ue_trajectory,
            landmarks: vec![
                Landmark::new(8.0, -5.0),
                Landmark::new(8.0, 7.0),
                Landmark::new(5.0, 8.0),
                Landmark::new(7.0, -11.0),
                Landmark::new(1.0, 6.0),
            ],
            bias_trajectory: Vec::new(),
            rng_seed: seed,
            reflection: vec![1.0, 0.9, 0.9, 0.85, 0.8],
            los_blocked: (30..36).collect(),
            carrier_hz: default_carrier(),
            bias_start: -20.0,
        };
        scene.prepare().expect("bundled scene is valid");
        scene
    }

    /// Validates the scene and fills in a generated bias trajectory if absent.
    pub fn prepare(&mut self) -> Result<()> {
        if self.ue_trajectory.is_empty() {
            return Err(Error::EmptyInput("UE trajectory"));
        }
        if self.bias_trajectory.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            self.bias_trajectory =
                bias_random_walk(self.ue_trajectory.len(), self.bias_start, 1.0, &mut rng);
        }
        if self.bias_trajectory.len() != self.ue_trajectory.len() {
            return Err(Error::InvalidParameter(format!(
                "{} bias values for {} trajectory points",
                self.bias_trajectory.len(),
                self.ue_trajectory.len()
            )));
        }
        if self.bias_trajectory.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("bias trajectory"));
        }
        if let Some(r) = self.reflection.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidParameter(format!(
                "reflection coefficient {r} outside (0, 1]"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ue_trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ue_trajectory.is_empty()
    }

    pub fn ue_state(&self, index: usize) -> UeState {
        UeState::from_pose(&self.ue_trajectory[index], self.bias_trajectory[index])
    }

    fn reflection_of(&self, landmark: usize) -> f64 {
        self.reflection
            .get(landmark)
            .copied()
            .unwrap_or_else(default_reflection)
    }
}

/// Gaussian random walk `B_k = B_{k-1} + w_k`, `w_k ~ N(0, step_var)`.
pub fn bias_random_walk<R: Rng + ?Sized>(n: usize, start: f64, step_var: f64, rng: &mut R) -> Vec<f64> {
    let step = Normal::new(0.0, step_var.sqrt()).expect("finite variance");
    let mut b = start;
    (0..n)
        .map(|k| {
            if k > 0 {
                b += step.sample(rng);
            }
            b
        })
        .collect()
}

/// Ground truth of one propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathTruth {
    pub kind: PathKind,
    /// Physical propagation delay in seconds.
    pub delay: f64,
    /// Geometric path length `c·delay` in meters.
    pub range: f64,
    pub aod: f64,
    pub aoa: f64,
    pub gain: Complex64,
    pub doppler: f64,
}

impl PathTruth {
    pub fn power(&self) -> f64 {
        self.gain.norm_sqr()
    }
}

/// Line-of-sight (unless blocked) plus one single-bounce path per landmark.
/// Gains follow `ρ/d` with carrier phase `-2π f_c τ`.
pub fn true_paths(scene: &Scene, position_index: usize) -> Result<Vec<PathTruth>> {
    let pose = scene.ue_trajectory.get(position_index).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "position {position_index} outside trajectory of {}",
            scene.len()
        ))
    })?;
    let ue = UeState::from_pose(pose, 0.0);
    let mut paths = Vec::with_capacity(scene.landmarks.len() + 1);
    let mut push = |kind: PathKind, landmark: Option<&Landmark>, rho: f64| -> Result<()> {
        let z = predict_path(&scene.bs, &ue, landmark)?;
        let range = z[0];
        let delay = range / SPEED_OF_LIGHT;
        let phase = -TAU * (scene.carrier_hz * delay).fract();
        paths.push(PathTruth {
            kind,
            delay,
            range,
            aod: z[1],
            aoa: z[2],
            gain: Complex64::from_polar(rho / range, phase),
            doppler: 0.0,
        });
        Ok(())
    };
    if !scene.los_blocked.contains(&position_index) {
        push(PathKind::Los, None, 1.0)?;
    }
    for (k, lm) in scene.landmarks.iter().enumerate() {
        push(PathKind::Nlos(k), Some(lm), scene.reflection_of(k))?;
    }
    Ok(paths)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Tx,
    Rx,
}

/// Element amplitude weighting of the beamforming row.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Taper {
    /// Uniform weights, first sidelobe at about -13 dB.
    #[default]
    Uniform,
    Hamming,
}

impl Taper {
    fn weight(self, n: usize, len: usize) -> f64 {
        match self {
            Taper::Uniform => 1.0,
            Taper::Hamming if len > 1 => 0.54 - 0.46 * (TAU * n as f64 / (len - 1) as f64).cos(),
            Taper::Hamming => 1.0,
        }
    }
}

/// Sorted beam pointing angles on each side plus the array row size that
/// sets the beam shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCodebook {
    pub tx_angles: Vec<f64>,
    pub rx_angles: Vec<f64>,
    pub elements_per_row: usize,
    #[serde(default)]
    pub taper: Taper,
}

impl BeamCodebook {
    /// Uniformly spaced beams centred in each field of view (degrees).
    pub fn uniform(l_tx: usize, tx_fov_deg: f64, l_rx: usize, rx_fov_deg: f64, elements_per_row: usize) -> Result<Self> {
        let spread = |l: usize, fov: f64| -> Vec<f64> {
            let fov = fov.to_radians();
            let step = fov / l as f64;
            (0..l).map(|i| -fov / 2.0 + (i as f64 + 0.5) * step).collect()
        };
        let cb = Self {
            tx_angles: spread(l_tx, tx_fov_deg),
            rx_angles: spread(l_rx, rx_fov_deg),
            elements_per_row,
            taper: Taper::Uniform,
        };
        cb.validate()?;
        Ok(cb)
    }

    /// 126 TX beams over 180° and 252 RX beams over 360°, 16-element rows.
    pub fn full_scale() -> Self {
        Self::uniform(126, 180.0, 252, 360.0, 16).expect("valid")
    }

    /// Half the beam count of [`BeamCodebook::full_scale`] on each side.
    pub fn desk_scale() -> Self {
        Self::uniform(63, 180.0, 126, 360.0, 16).expect("valid")
    }

    pub fn with_taper(mut self, taper: Taper) -> Self {
        self.taper = taper;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("tx", &self.tx_angles), ("rx", &self.rx_angles)] {
            if a.len() < 2 {
                return Err(Error::InvalidParameter(format!("{name} codebook needs at least 2 beams")));
            }
            if a.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter(format!("{name} beam angles not strictly increasing")));
            }
        }
        if self.elements_per_row == 0 {
            return Err(Error::InvalidParameter("array row needs at least one element".into()));
        }
        Ok(())
    }

    pub fn l_tx(&self) -> usize {
        self.tx_angles.len()
    }

    pub fn l_rx(&self) -> usize {
        self.rx_angles.len()
    }

    pub fn angles(&self, side: Side) -> &[f64] {
        match side {
            Side::Tx => &self.tx_angles,
            Side::Rx => &self.rx_angles,
        }
    }

    /// Mean spacing between adjacent beams on one side (radians).
    pub fn spacing(&self, side: Side) -> f64 {
        let a = self.angles(side);
        (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64
    }

    /// Approximate half-power beamwidth of the array row (radians).
    pub fn beamwidth(&self) -> f64 {
        let n = self.elements_per_row as f64;
        let widen = match self.taper {
            Taper::Uniform => 1.0,
            Taper::Hamming => 1.47,
        };
        2.0 * (0.443 * 2.0 / n).asin() * widen
    }

    /// Index of the beam whose pointing angle is closest to `angle`.
    pub fn nearest_beam(&self, side: Side, angle: f64) -> usize {
        let a = self.angles(side);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &b) in a.iter().enumerate() {
            let d = wrap(angle - b).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Complex angular response of one beam. The row is mechanically pointed at
/// the beam angle with its phase centre in the middle, so the response is real;
/// a ground plane suppresses the rear half-space.
pub fn beam_response(codebook: &BeamCodebook, side: Side, beam_index: usize, angle: f64) -> f64 {
    let boresight = codebook.angles(side)[beam_index];
    let offset = wrap(angle - boresight);
    if offset.abs() > FRAC_PI_2 {
        return 0.0;
    }
    let n = codebook.elements_per_row;
    let centre = (n as f64 - 1.0) / 2.0;
    let u = PI * offset.sin();
    (0..n)
        .map(|e| codebook.taper.weight(e, n) * (u * (e as f64 - centre)).cos())
        .sum()
}

/// `|G(angle)|²`, equal to `N²` on boresight for an untapered row.
pub fn beam_gain(codebook: &BeamCodebook, side: Side, beam_index: usize, angle: f64) -> f64 {
    beam_response(codebook, side, beam_index, angle).powi(2)
}

/// Beam-pair received power matrix with its codebook.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrsrpMap {
    /// `L_TX × L_RX` linear powers.
    pub values: DMatrix<f64>,
    pub codebook: BeamCodebook,
    pub noise_floor: f64,
}

impl BrsrpMap {
    pub fn new(values: DMatrix<f64>, codebook: BeamCodebook, noise_floor: f64) -> Result<Self> {
        if values.nrows() != codebook.l_tx() || values.ncols() != codebook.l_rx() {
            return Err(Error::InvalidParameter(format!(
                "map is {}x{} but codebook is {}x{}",
                values.nrows(),
                values.ncols(),
                codebook.l_tx(),
                codebook.l_rx()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidParameter("map entries must be nonnegative".into()));
        }
        Ok(Self {
            values,
            codebook,
            noise_floor,
        })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            values: &self.values * c,
            codebook: self.codebook.clone(),
            noise_floor: self.noise_floor * c,
        }
    }
}

/// Beam gain vectors `g[i] = |G_i(angle)|²` over one side of the codebook.
pub fn gain_vector(codebook: &BeamCodebook, side: Side, angle: f64) -> Vec<f64> {
    (0..codebook.angles(side).len())
        .map(|i| beam_gain(codebook, side, i, angle))
        .collect()
}

/// Averaged-noise power map `Σ |ξ|² g_TX g_RXᵀ + N̄`. Each noise entry is the
/// mean of `n_rs` exponential samples with mean `noise_floor`.
pub fn synth_brsrp<R: Rng + ?Sized>(
    paths: &[PathTruth],
    codebook: &BeamCodebook,
    noise_floor: f64,
    n_rs: usize,
    rng: &mut R,
) -> Result<BrsrpMap> {
    if !(noise_floor >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise floor {noise_floor} < 0")));
    }
    codebook.validate()?;
    let mut values = DMatrix::zeros(codebook.l_tx(), codebook.l_rx());
    for p in paths {
        let g_tx = gain_vector(codebook, Side::Tx, p.aod);
        let g_rx = gain_vector(codebook, Side::Rx, p.aoa);
        let w = p.power();
        for (i, gt) in g_tx.iter().enumerate() {
            if *gt == 0.0 {
                continue;
            }
            for (j, gr) in g_rx.iter().enumerate() {
                values[(i, j)] += w * gt * gr;
            }
        }
    }
    if noise_floor > 0.0 {
        if n_rs == 0 {
            return Err(Error::InvalidParameter("n_rs must be positive".into()));
        }
        let gamma = Gamma::new(n_rs as f64, noise_floor / n_rs as f64)
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
        for v in values.iter_mut() {
            *v += gamma.sample(rng);
        }
    }
    BrsrpMap::new(values, codebook.clone(), noise_floor)
}

/// OFDM reference-signal layout. The unit-modulus QPSK grid is generated
/// from `sequence_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformConfig {
    pub subcarriers: usize,
    pub symbols: usize,
    pub scs: f64,
    pub symbol_duration: f64,
    pub carrier: f64,
    pub sequence_id: u64,
    pub rs_symbols: DMatrix<Complex64>,
}

impl WaveformConfig {
    pub fn new(subcarriers: usize, symbols: usize, scs: f64, sequence_id: u64) -> Result<Self> {
        if subcarriers == 0 || symbols == 0 {
            return Err(Error::InvalidParameter("empty resource grid".into()));
        }
        if !(scs > 0.0) {
            return Err(Error::InvalidParameter(format!("subcarrier spacing {scs}")));
        }
        Ok(Self {
            subcarriers,
            symbols,
            scs,
            // useful symbol plus the normal cyclic prefix (144/2048)
            symbol_duration: (1.0 + 144.0 / 2048.0) / scs,
            carrier: default_carrier(),
            sequence_id,
            rs_symbols: qpsk_grid(subcarriers, symbols, sequence_id),
        })
    }

    /// 120 kHz spacing, 3334 active subcarriers (≈400 MHz), 4 symbols.
    pub fn full_band() -> Self {
        Self::new(3334, 4, 120e3, 0).expect("valid")
    }

    /// 256 subcarriers at 120 kHz, 4 symbols.
    pub fn desk() -> Self {
        Self::new(256, 4, 120e3, 0).expect("valid")
    }

    pub fn n_rs(&self) -> usize {
        self.subcarriers * self.symbols
    }

    pub fn bandwidth(&self) -> f64 {
        self.subcarriers as f64 * self.scs
    }
}

fn qpsk_grid(k: usize, m: usize, seed: u64) -> DMatrix<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_535f_4752_4944);
    DMatrix::from_fn(k, m, |_, _| {
        let q: u8 = rng.random_range(0..4);
        Complex64::from_polar(1.0, PI / 4.0 + FRAC_PI_2 * q as f64)
    })
}

fn complex_gaussian<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

/// Frequency-domain received samples of one beam pair:
/// `y[k,m] = Σ ξ e^{-i2πkΔf τ_f} e^{i2πm T f_D} x[k,m] G_TX G_RX + ñ`,
/// where `τ_f = delay - window_delay` is the delay within the FFT window.
#[allow(clippy::too_many_arguments)]
pub fn synth_rs_samples<R: Rng + ?Sized>(
    paths: &[PathTruth],
    codebook: &BeamCodebook,
    wf: &WaveformConfig,
    beam_pair: (usize, usize),
    window_delay: f64,
    noise_var: f64,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    let (i, j) = beam_pair;
    if i >= codebook.l_tx() || j >= codebook.l_rx() {
        return Err(Error::InvalidParameter(format!("beam pair ({i}, {j}) outside codebook")));
    }
    let (k_n, m_n) = (wf.subcarriers, wf.symbols);
    let mut grid = DMatrix::from_element(k_n, m_n, Complex64::new(0.0, 0.0));
    for p in paths {
        let g = beam_response(codebook, Side::Tx, i, p.aod) * beam_response(codebook, Side::Rx, j, p.aoa);
        if g == 0.0 {
            continue;
        }
        let amp = p.gain * g;
        let tau_f = p.delay - window_delay;
        let freq_step = Complex64::from_polar(1.0, -TAU * wf.scs * tau_f);
        let time_step = Complex64::from_polar(1.0, TAU * wf.symbol_duration * p.doppler);
        let mut time_rot = Complex64::new(1.0, 0.0);
        for m in 0..m_n {
            let mut rot = amp * time_rot;
            for k in 0..k_n {
                grid[(k, m)] += rot * wf.rs_symbols[(k, m)];
                rot *= freq_step;
            }
            time_rot *= time_step;
        }
    }
    if noise_var > 0.0 {
        for v in grid.iter_mut() {
            *v += complex_gaussian(noise_var, rng);
        }
    }
    Ok(grid)
}

/// Mean received power over the reference-signal resource elements.
pub fn exact_brsrp(grid: &DMatrix<Complex64>) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyInput("reference-signal grid"));
    }
    Ok(grid.iter().map(|v| v.norm_sqr()).sum::<f64>() / grid.len() as f64)
}

/// Separable-path approximation `Σ |ξ|² |G_TX|² |G_RX|² + σ²` of the beam-pair power.
pub fn approx_brsrp(paths: &[PathTruth], codebook: &BeamCodebook, beam_pair: (usize, usize), noise_var: f64) -> f64 {
    paths
        .iter()
        .map(|p| {
            p.power()
                * beam_gain(codebook, Side::Tx, beam_pair.0, p.aod)
                * beam_gain(codebook, Side::Rx, beam_pair.1, p.aoa)
        })
        .sum::<f64>()
        + noise_var
}

/// Unit-modulus pseudo-random time-domain reference waveform for a sequence id.
pub fn reference_waveform(sequence_id: u64, len: usize) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_id.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7072_735f);
    (0..len)
        .map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..TAU)))
        .collect()
}

/// Delays `signal` by a possibly fractional number of samples using a
/// band-limited (frequency-domain) shift into a zero-padded buffer of
/// `out_len` samples.
pub fn fractional_delay(signal: &[Complex64], delay_samples: f64, out_len: usize) -> Result<Vec<Complex64>> {
    if delay_samples < 0.0 || delay_samples + signal.len() as f64 > out_len as f64 {
        return Err(Error::InvalidParameter(format!(
            "delay of {delay_samples} samples does not fit a {out_len}-sample capture"
        )));
    }
    let n = out_len.next_power_of_two() * 2;
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..signal.len()].copy_from_slice(signal);
    fwd.process(&mut buf);
    for (b, v) in buf.iter_mut().enumerate() {
        // signed frequency bin
        let f = if b <= n / 2 { b as f64 } else { b as f64 - n as f64 };
        *v *= Complex64::from_polar(1.0 / n as f64, -TAU * f * delay_samples / n as f64);
    }
    inv.process(&mut buf);
    buf.truncate(out_len);
    Ok(buf)
}

/// Time-domain capture of one beam pair: every path contributes the reference
/// waveform delayed by its biased delay, scaled by its beamformed gain.
#[allow(clippy::too_many_arguments)]
pub fn synth_time_capture<R: Rng + ?Sized>(
    paths: &[PathTruth],
    codebook: &BeamCodebook,
    beam_pair: (usize, usize),
    reference: &[Complex64],
    sample_rate: f64,
    bias_m: f64,
    capture_len: usize,
    noise_var: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let mut out = vec![Complex64::new(0.0, 0.0); capture_len];
    for p in paths {
        let g = beam_response(codebook, Side::Tx, beam_pair.0, p.aod)
            * beam_response(codebook, Side::Rx, beam_pair.1, p.aoa);
        if g == 0.0 {
            continue;
        }
        let biased = p.delay - bias_m / SPEED_OF_LIGHT;
        let shifted = fractional_delay(reference, biased * sample_rate, capture_len)?;
        for (o, s) in out.iter_mut().zip(shifted) {
            *o += p.gain * g * s;
        }
    }
    if noise_var > 0.0 {
        for v in out.iter_mut() {
            *v += complex_gaussian(noise_var, rng);
        }
    }
    Ok(out)
}

/// Gross-error injection for [`synth_measurements`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierModel {
    /// Probability that a measurement is replaced by an outlier.
    pub rate: f64,
    /// Outlier ranges are off by a uniform amount in `[min_offset, max_offset]`
    /// meters with random sign; their angles are uniform on the circle.
    pub min_offset: f64,
    pub max_offset: f64,
}

impl OutlierModel {
    pub fn none() -> Self {
        Self::with_rate(0.0)
    }

    pub fn with_rate(rate: f64) -> Self {
        Self {
            rate,
            min_offset: 5.0,
            max_offset: 25.0,
        }
    }
}

impl Default for OutlierModel {
    fn default() -> Self {
        Self::none()
    }
}

/// Noisy `[c·τᵇ, φ, θ]` observations of the given paths with clock bias
/// `bias` (meters) and covariance `r`.
pub fn synth_measurements<R: Rng + ?Sized>(
    paths: &[PathTruth],
    r: &Matrix3<f64>,
    bias: f64,
    outliers: &OutlierModel,
    rng: &mut R,
) -> Result<Vec<Measurement>> {
    let chol = if r.iter().all(|v| *v == 0.0) {
        None
    } else {
        Some(
            r.cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("measurement covariance".into()))?
                .l(),
        )
    };
    if !(0.0..=1.0).contains(&outliers.rate) {
        return Err(Error::InvalidParameter(format!("outlier rate {}", outliers.rate)));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let mut z = nalgebra::Vector3::new(p.range - bias, p.aod, p.aoa);
        if let Some(l) = &chol {
            let w = nalgebra::Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            z += l * w;
        }
        if outliers.rate > 0.0 && rng.random_bool(outliers.rate) {
            let mag = rng.random_range(outliers.min_offset..=outliers.max_offset);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            z[0] = p.range - bias + sign * mag;
            z[1] = rng.random_range(-PI..PI);
            z[2] = rng.random_range(-PI..PI);
        }
        out.push(Measurement::new(z[0], z[1], z[2], *r, p.power()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::diagonal_covariance;

    fn simple_scene(landmarks: Vec<Landmark>) -> Scene {
        let mut s = Scene {
            bs: Pose2::new(0.0, 0.0, 0.0),
            ue_trajectory: vec![Pose2::new(3.0, 4.0, 0.0)],
            landmarks,
            bias_trajectory: vec![0.0],
            rng_seed: 1,
            reflection: vec![],
            los_blocked: vec![],
            carrier_hz: 60e9,
            bias_start: 0.0,
        };
        s.prepare().unwrap();
        s
    }

    fn single_path(aod: f64, aoa: f64, delay: f64, gain: f64) -> PathTruth {
        PathTruth {
            kind: PathKind::Los,
            delay,
            range: delay * SPEED_OF_LIGHT,
            aod,
            aoa,
            gain: Complex64::new(gain, 0.0),
            doppler: 0.0,
        }
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let sv = m.clone().svd(false, false).singular_values;
        let top = sv.max();
        sv.iter().filter(|s| **s > top * 1e-10).count()
    }

    #[test]
    fn los_only_scene() {
        let paths = true_paths(&simple_scene(vec![]), 0).unwrap();
        assert_eq!(paths.len(), 1);
        let p = &paths[0];
        assert!((p.range - 5.0).abs() < 1e-12);
        assert!((p.aod - 0.927_295_218).abs() < 1e-9);
        assert!((p.aoa + 2.214_297_436).abs() < 1e-9);
        assert!((p.range - SPEED_OF_LIGHT * p.delay).abs() < 1e-9);
        assert!(p.gain.norm() > 0.0);
    }

    #[test]
    fn landmark_at_bs_is_degenerate() {
        let scene = simple_scene(vec![Landmark::new(0.0, 0.0)]);
        assert!(matches!(true_paths(&scene, 0), Err(Error::DegenerateGeometry { .. })));
    }

    #[test]
    fn midpoint_landmark_has_los_range() {
        let paths = true_paths(&simple_scene(vec![Landmark::new(1.5, 2.0)]), 0).unwrap();
        assert!((paths[0].range - paths[1].range).abs() < 1e-12);
    }

    #[test]
    fn blocked_los_is_dropped() {
        let mut scene = simple_scene(vec![Landmark::new(6.0, 0.0)]);
        scene.los_blocked = vec![0];
        let paths = true_paths(&scene, 0).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].kind, PathKind::Nlos(0));
    }

    #[test]
    fn default_scene_has_45_points() {
        let s = Scene::default_indoor(7);
        assert_eq!(s.len(), 45);
        assert_eq!(s.bias_trajectory.len(), 45);
        for w in s.ue_trajectory.windows(2) {
            assert!(((w[1].position - w[0].position).norm() - 0.5).abs() < 1e-12);
        }
        assert_eq!(s, Scene::default_indoor(7));
    }

    #[test]
    fn beam_gain_peak_null_and_symmetry() {
        let cb = BeamCodebook::desk_scale();
        let b = 30;
        let boresight = cb.tx_angles[b];
        assert!((beam_gain(&cb, Side::Tx, b, boresight) - 256.0).abs() < 1e-9);
        // first null of a 16-element half-wavelength row: sin(offset) = 2/16
        let null = (2.0f64 / 16.0).asin();
        assert!(beam_gain(&cb, Side::Tx, b, boresight + null) < 1e-20);
        for off in [0.01, 0.05, 0.2, 0.7] {
            let a = beam_gain(&cb, Side::Tx, b, boresight + off);
            let c = beam_gain(&cb, Side::Tx, b, boresight - off);
            assert!((a - c).abs() < 1e-9 * a.max(1.0));
        }
        assert_eq!(beam_gain(&cb, Side::Tx, b, boresight + 2.0), 0.0);
    }

    #[test]
    fn uniform_sidelobe_level() {
        let cb = BeamCodebook::desk_scale();
        let peak = beam_gain(&cb, Side::Rx, 60, cb.rx_angles[60]);
        // first sidelobe near sin(offset) = 3/16
        let side = (0..2000)
            .map(|k| 0.13 + 0.1 * k as f64 / 2000.0)
            .map(|o| beam_gain(&cb, Side::Rx, 60, cb.rx_angles[60] + o))
            .fold(0.0, f64::max);
        let db = 10.0 * (side / peak).log10();
        assert!((db + 13.2).abs() < 0.3, "sidelobe {db} dB");
        let tapered = cb.clone().with_taper(Taper::Hamming);
        let side_t = (0..2000)
            .map(|k| 0.26 + 0.3 * k as f64 / 2000.0)
            .map(|o| beam_gain(&tapered, Side::Rx, 60, tapered.rx_angles[60] + o))
            .fold(0.0, f64::max);
        let peak_t = beam_gain(&tapered, Side::Rx, 60, tapered.rx_angles[60]);
        assert!(10.0 * (side_t / peak_t).log10() < -35.0);
    }

    #[test]
    fn noiseless_map_ranks() {
        let cb = BeamCodebook::desk_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = [single_path(0.3, -1.0, 1e-8, 0.1)];
        let m1 = synth_brsrp(&one, &cb, 0.0, 1, &mut rng).unwrap();
        assert_eq!(rank(&m1.values), 1);
        let two = [single_path(0.3, -1.0, 1e-8, 0.1), single_path(-0.9, 2.0, 3e-8, 0.05)];
        let m2 = synth_brsrp(&two, &cb, 0.0, 1, &mut rng).unwrap();
        assert_eq!(rank(&m2.values), 2);
        // entrywise reproduction of the separable model
        for (i, j) in [(10, 20), (40, 60), (5, 100)] {
            let expect = approx_brsrp(&two, &cb, (i, j), 0.0);
            assert!((m2.values[(i, j)] - expect).abs() <= 1e-12 * expect.max(1e-300));
        }
        assert!(synth_brsrp(&[], &cb, 0.0, 1, &mut rng).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn noise_only_map_mean() {
        let cb = BeamCodebook::desk_scale();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = synth_brsrp(&[], &cb, 2.5, 10_000, &mut rng).unwrap();
        let mean = m.values.mean();
        assert!(m.values.iter().all(|v| *v >= 0.0));
        assert!((mean - 2.5).abs() < 0.01, "mean {mean}");
        assert!(synth_brsrp(&[], &cb, -1.0, 1, &mut rng).is_err());
    }

    #[test]
    fn flat_and_ramped_rs_grids() {
        let cb = BeamCodebook::desk_scale();
        let wf = WaveformConfig::new(64, 3, 120e3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pair = (31, 63);
        let path = single_path(cb.tx_angles[31], cb.rx_angles[63], 0.0, 0.2);
        let g = synth_rs_samples(&[path], &cb, &wf, pair, 0.0, 0.0, &mut rng).unwrap();
        let first = g[(0, 0)] / wf.rs_symbols[(0, 0)];
        for k in 0..64 {
            for m in 0..3 {
                let h = g[(k, m)] / wf.rs_symbols[(k, m)];
                assert!((h - first).norm() < 1e-12);
            }
        }
        let tau = 1.0 / (64.0 * wf.scs);
        let path = single_path(cb.tx_angles[31], cb.rx_angles[63], tau, 0.2);
        let g = synth_rs_samples(&[path], &cb, &wf, pair, 0.0, 0.0, &mut rng).unwrap();
        let h0 = g[(0, 1)] / wf.rs_symbols[(0, 1)];
        for k in 0..64 {
            let h = g[(k, 1)] / wf.rs_symbols[(k, 1)];
            let expect = h0 * Complex64::from_polar(1.0, -TAU * k as f64 / 64.0);
            assert!((h - expect).norm() < 1e-10);
        }
        // exact power of a single noiseless path equals |ξ G_TX G_RX|²
        let exact = exact_brsrp(&g).unwrap();
        let direct = (0.2 * beam_response(&cb, Side::Tx, 31, path.aod) * beam_response(&cb, Side::Rx, 63, path.aoa)).powi(2);
        assert!((exact - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn exact_brsrp_basics() {
        let ones = DMatrix::from_element(4, 3, Complex64::new(1.0, 0.0));
        assert_eq!(exact_brsrp(&ones).unwrap(), 1.0);
        let g = DMatrix::from_fn(5, 2, |k, m| Complex64::new(k as f64, m as f64 - 0.5));
        let base = exact_brsrp(&g).unwrap();
        assert!((exact_brsrp(&(g * Complex64::new(2.0, 0.0))).unwrap() - 4.0 * base).abs() < 1e-12);
        assert!(exact_brsrp(&DMatrix::<Complex64>::zeros(0, 0)).is_err());
    }

    #[test]
    fn two_path_lemma_approximation() {
        let cb = BeamCodebook::desk_scale();
        let wf = WaveformConfig::new(2048, 14, 120e3, 3).unwrap();
        let resolution = 1.0 / (2048.0 * wf.scs);
        let a = single_path(cb.tx_angles[30], cb.rx_angles[60], 10e-9, 0.1);
        let mut b = single_path(cb.tx_angles[30] + 0.02, cb.rx_angles[60] - 0.03, 10e-9 + 20.5 * resolution, 0.08);
        b.gain = Complex64::from_polar(0.08, 1.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = synth_rs_samples(&[a, b], &cb, &wf, (30, 60), 0.0, 0.0, &mut rng).unwrap();
        let exact = exact_brsrp(&grid).unwrap();
        let approx = approx_brsrp(&[a, b], &cb, (30, 60), 0.0);
        assert!((exact - approx).abs() / exact < 0.05);
    }

    #[test]
    fn measurement_noise_statistics() {
        let paths = [single_path(0.4, -0.2, 3e-8, 0.1)];
        let r = diagonal_covariance(0.3, 3.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 10_000;
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let z = synth_measurements(&paths, &r, 1.5, &OutlierModel::none(), &mut rng).unwrap()[0];
            let e = [z.range - (paths[0].range - 1.5), wrap(z.aod - 0.4), wrap(z.aoa + 0.2)];
            for c in 0..3 {
                sums[c] += e[c];
                sq[c] += e[c] * e[c];
            }
        }
        let nominal = [0.3, 3f64.to_radians(), 3f64.to_radians()];
        for c in 0..3 {
            let mean = sums[c] / n as f64;
            let std = (sq[c] / n as f64 - mean * mean).sqrt();
            assert!((std / nominal[c] - 1.0).abs() < 0.05, "component {c}: {std}");
        }
    }

    #[test]
    fn noiseless_measurements_equal_truth() {
        let paths = [single_path(0.4, -0.2, 3e-8, 0.1), single_path(-1.0, 2.5, 5e-8, 0.05)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = synth_measurements(&paths, &Matrix3::zeros(), 2.0, &OutlierModel::none(), &mut rng).unwrap();
        for (m, p) in z.iter().zip(&paths) {
            assert_eq!(m.range, p.range - 2.0);
            assert!((m.aod - p.aod).abs() < 1e-12);
            assert!((m.aoa - p.aoa).abs() < 1e-12);
        }
    }

    #[test]
    fn all_outliers_leave_the_3_sigma_band() {
        let paths = [single_path(0.4, -0.2, 3e-8, 0.1)];
        let r = diagonal_covariance(0.3, 3.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let z = synth_measurements(&paths, &r, 0.0, &OutlierModel::with_rate(1.0), &mut rng).unwrap()[0];
            assert!((z.range - paths[0].range).abs() > 0.9);
        }
    }

    #[test]
    fn seeded_synthesis_is_reproducible() {
        let scene = Scene::default_indoor(3);
        let paths = true_paths(&scene, 4).unwrap();
        let cb = BeamCodebook::desk_scale();
        let a = synth_brsrp(&paths, &cb, 0.5, 16, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = synth_brsrp(&paths, &cb, 0.5, 16, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fractional_delay_moves_the_peak() {
        let reference = reference_waveform(1, 64);
        let shifted = fractional_delay(&reference, 7.0, 128).unwrap();
        for q in 0..64 {
            assert!((shifted[q + 7] - reference[q]).norm() < 1e-9);
        }
        assert!(fractional_delay(&reference, -1.0, 128).is_err());
    }
}
