//! Two-stage time of arrival: sample-level delay and sequence identification
//! by time-domain cross-correlation, then a per-path fractional delay from the
//! frequency-domain reference-signal grid of the path's beam pair.

use nalgebra::{DMatrix, Matrix3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::angles::AngleEstimate;
use crate::error::{Error, Result};
use crate::geometry::Measurement;
use crate::simulate::{BeamCodebook, Side, WaveformConfig, SPEED_OF_LIGHT};

/// Oversampling of the fine delay grid relative to the delay resolution `1/(KΔf)`.
pub const FINE_OVERSAMPLING: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseToa {
    /// Index of the detected reference sequence.
    pub sequence_id: usize,
    pub sample_offset: usize,
    /// `sample_offset / sample_rate`, in seconds.
    pub delay: f64,
    pub sample_rate: f64,
}

impl CoarseToa {
    pub fn new(sequence_id: usize, sample_offset: usize, sample_rate: f64) -> Self {
        Self {
            sequence_id,
            sample_offset,
            delay: sample_offset as f64 / sample_rate,
            sample_rate,
        }
    }

    /// Moves the timing reference `samples` earlier (saturating at zero) so
    /// that paths arriving just before the correlation peak still land at a
    /// nonnegative delay inside the FFT window.
    pub fn backed_off(&self, samples: usize) -> Self {
        Self::new(self.sequence_id, self.sample_offset.saturating_sub(samples), self.sample_rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineToa {
    pub path_index: usize,
    /// Delay inside the FFT window, in `[0, 1/Δf)` seconds.
    pub delay: f64,
    pub beam_pair: (usize, usize),
}

/// An angle estimate joined with its biased time of arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub aod: f64,
    pub aoa: f64,
    pub power: f64,
    pub tx_index: usize,
    pub rx_index: usize,
    /// Biased ToA `τ̂ᵇ` in seconds.
    pub toa: f64,
}

impl PathEstimate {
    pub fn new(est: &AngleEstimate, beam_pair: (usize, usize), toa: f64) -> Self {
        Self {
            aod: est.aod,
            aoa: est.aoa,
            power: est.power,
            tx_index: beam_pair.0,
            rx_index: beam_pair.1,
            toa,
        }
    }

    pub fn range(&self) -> f64 {
        SPEED_OF_LIGHT * self.toa
    }

    pub fn to_measurement(&self, covariance: Matrix3<f64>) -> Measurement {
        Measurement::new(self.range(), self.aod, self.aoa, covariance, self.power)
    }
}

/// Beam pair whose pointing angles are closest to the estimate.
pub fn nearest_beam_pair(est: &AngleEstimate, codebook: &BeamCodebook) -> (usize, usize) {
    (
        codebook.nearest_beam(Side::Tx, est.aod),
        codebook.nearest_beam(Side::Rx, est.aoa),
    )
}

/// Joint search over sequence and lag of `|Σ_q Y[q+Δq] X_ν[q]*|²`.
/// Ties go to the lowest sequence index and then the lowest lag.
pub fn coarse_toa(rx: &[Complex64], refs: &[Vec<Complex64>], sample_rate: f64) -> Result<CoarseToa> {
    if rx.is_empty() {
        return Err(Error::EmptyInput("received waveform"));
    }
    if refs.is_empty() || refs.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("reference waveforms"));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidParameter(format!("sample rate {sample_rate}")));
    }
    let mut best = (0usize, 0usize);
    let mut best_v = f64::NEG_INFINITY;
    for (nu, x) in refs.iter().enumerate() {
        if x.len() > rx.len() {
            return Err(Error::InvalidParameter(format!(
                "reference {nu} ({} samples) longer than the capture ({})",
                x.len(),
                rx.len()
            )));
        }
        for dq in 0..=rx.len() - x.len() {
            let c: Complex64 = rx[dq..dq + x.len()]
                .iter()
                .zip(x)
                .map(|(y, x)| y * x.conj())
                .sum();
            let v = c.norm_sqr();
            if v > best_v {
                best_v = v;
                best = (nu, dq);
            }
        }
    }
    Ok(CoarseToa::new(best.0, best.1, sample_rate))
}

/// Matched-filter spectrum `c_k = Σ_m x*_{k,m} y_{k,m}`.
fn matched_spectrum(grid: &DMatrix<Complex64>, wf: &WaveformConfig) -> Result<Vec<Complex64>> {
    if grid.shape() != wf.rs_symbols.shape() {
        return Err(Error::InvalidParameter(format!(
            "grid is {:?} but the waveform has {:?} resource elements",
            grid.shape(),
            wf.rs_symbols.shape()
        )));
    }
    if grid.iter().all(|v| v.norm_sqr() == 0.0) {
        return Err(Error::InvalidParameter("reference-signal grid is all zeros".into()));
    }
    Ok((0..wf.subcarriers)
        .map(|k| (0..wf.symbols).map(|m| wf.rs_symbols[(k, m)].conj() * grid[(k, m)]).sum())
        .collect())
}

/// `|Σ_k c_k e^{i2πkΔfτ}|` evaluated directly, for oracles and diagnostics.
pub fn delay_profile_at(grid: &DMatrix<Complex64>, wf: &WaveformConfig, tau: f64) -> Result<f64> {
    let c = matched_spectrum(grid, wf)?;
    let step = Complex64::from_polar(1.0, std::f64::consts::TAU * wf.scs * tau);
    let mut rot = Complex64::new(1.0, 0.0);
    let mut s = Complex64::new(0.0, 0.0);
    for ck in c {
        s += ck * rot;
        rot *= step;
    }
    Ok(s.norm())
}

/// Fractional delay of the dominant path in a reference-signal grid: the
/// delay profile is evaluated on a grid of step `1/(8KΔf)` by zero-padded
/// IFFT and the peak is refined with a three-point parabola.
pub fn fine_delay(grid: &DMatrix<Complex64>, wf: &WaveformConfig) -> Result<f64> {
    let c = matched_spectrum(grid, wf)?;
    let len = FINE_OVERSAMPLING * wf.subcarriers;
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    buf[..c.len()].copy_from_slice(&c);
    // the inverse transform carries the e^{+i2πkl/L} kernel
    FftPlanner::new().plan_fft_inverse(len).process(&mut buf);
    let mag: Vec<f64> = buf.iter().map(|v| v.norm()).collect();
    let mut peak = 0;
    for (l, m) in mag.iter().enumerate() {
        if *m > mag[peak] {
            peak = l;
        }
    }
    let (a, b, d) = (mag[(peak + len - 1) % len], mag[peak], mag[(peak + 1) % len]);
    let denom = a - 2.0 * b + d;
    let shift = if denom < 0.0 { (0.5 * (a - d) / denom).clamp(-0.5, 0.5) } else { 0.0 };
    let period = 1.0 / wf.scs;
    let tau = (peak as f64 + shift) / (len as f64 * wf.scs);
    Ok(tau.rem_euclid(period))
}

/// Fine ToA of one estimated path from the grid of its nearest beam pair.
pub fn fine_toa(
    grid: &DMatrix<Complex64>,
    wf: &WaveformConfig,
    estimate: &AngleEstimate,
    codebook: &BeamCodebook,
    path_index: usize,
) -> Result<FineToa> {
    Ok(FineToa {
        path_index,
        delay: fine_delay(grid, wf)?,
        beam_pair: nearest_beam_pair(estimate, codebook),
    })
}

/// Biased ToA `τ̂ᵇ = τ̂_c + τ̂_f`.
pub fn combine_toa(coarse: &CoarseToa, fine: &FineToa) -> f64 {
    coarse.delay + fine.delay
}
