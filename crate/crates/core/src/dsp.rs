//! Range FFT, Doppler FFT and single-source MUSIC on echo captures.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::beamspace::{steering_from_wavenumber, steering_vector, to_wavenumber, ArrayGeometry};
use crate::bounds::AngleBounds;
use crate::echo::{echo_amplitude, noise_floor, EchoCapture, EchoConfig, UavState, SPEED_OF_LIGHT};
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DspConfig {
    /// Minimum peak-to-median ratio of the accumulated magnitude spectrum.
    pub peak_threshold: f64,
    /// Minimum ratio of the two largest covariance eigenvalues.
    pub eigen_ratio_threshold: f64,
    pub coarse_step_deg: f64,
    /// Wavenumber step (rad) at which the local peak refinement stops.
    pub refine_tol: f64,
    /// Diagonal loading as a fraction of `trace / N`.
    pub loading: f64,
    /// Region searched by MUSIC.
    pub grid: AngleBounds,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            peak_threshold: 8.0,
            eigen_ratio_threshold: 3.0,
            coarse_step_deg: 1.0,
            refine_tol: 1e-7,
            loading: 1e-6,
            grid: AngleBounds::default(),
        }
    }
}

/// Angle, velocity and range measured from one echo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsiRecord {
    pub theta_e: f64,
    pub phi_e: f64,
    pub v_e: f64,
    pub d_e: f64,
    pub valid: bool,
    pub t: f64,
}

impl EsiRecord {
    pub fn invalid(t: f64) -> Self {
        Self {
            theta_e: f64::NAN,
            phi_e: f64::NAN,
            v_e: f64::NAN,
            d_e: f64::NAN,
            valid: false,
            t,
        }
    }
}

/// Fast-time spectra for every chirp and element, same layout as the capture.
#[derive(Debug, Clone)]
pub struct RangeCube {
    data: Vec<Complex64>,
    pub n_bins: usize,
    pub n_chirps: usize,
    pub n_rx: usize,
}

impl RangeCube {
    pub fn at(&self, bin: usize, chirp: usize, rx: usize) -> Complex64 {
        self.data[(chirp * self.n_rx + rx) * self.n_bins + bin]
    }

    /// Magnitude spectrum summed over chirps and elements.
    pub fn accumulated(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_bins];
        for row in self.data.chunks_exact(self.n_bins) {
            for (a, x) in acc.iter_mut().zip(row) {
                *a += x.norm_sqr().sqrt();
            }
        }
        acc
    }
}

pub fn range_fft(capture: &EchoCapture) -> RangeCube {
    let mut data = capture.samples().to_vec();
    let fft = FftPlanner::new().plan_fft_forward(capture.n_samples);
    fft.process(&mut data);
    RangeCube {
        data,
        n_bins: capture.n_samples,
        n_chirps: capture.n_chirps,
        n_rx: capture.n_rx,
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Index of the global maximum (lowest index on ties) and its ratio to
/// the spectrum median.
fn peak(spec: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in spec.iter().enumerate() {
        if v > spec[best] {
            best = i;
        }
    }
    let med = median(spec);
    let ratio = if med > 0.0 {
        spec[best] / med
    } else if spec[best] > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    (best, ratio)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeEstimate {
    pub d: f64,
    pub bin: usize,
    pub peak_ratio: f64,
}

pub fn estimate_range_cube(
    cube: &RangeCube,
    capture: &EchoCapture,
    cfg: &DspConfig,
) -> Result<RangeEstimate> {
    if cube.n_bins == 0 {
        return Err(CoreError::EmptyInput);
    }
    let (bin, ratio) = peak(&cube.accumulated());
    if ratio < cfg.peak_threshold {
        return Err(CoreError::NoPeak {
            ratio,
            threshold: cfg.peak_threshold,
        });
    }
    let wf = &capture.waveform;
    let f_if = bin as f64 * wf.sample_rate / cube.n_bins as f64;
    Ok(RangeEstimate {
        d: SPEED_OF_LIGHT * f_if / (2.0 * wf.slope()),
        bin,
        peak_ratio: ratio,
    })
}

/// Range of the strongest fast-time tone and its bin.
pub fn estimate_range(capture: &EchoCapture, cfg: &DspConfig) -> Result<(f64, usize)> {
    let cube = range_fft(capture);
    let r = estimate_range_cube(&cube, capture, cfg)?;
    Ok((r.d, r.bin))
}

/// Expected peak-to-median ratio of the accumulated range spectrum for a
/// single target, without synthesizing the capture. Noise bins are taken at
/// their Rayleigh mean and the target bin includes the scalloping loss of
/// an off-bin beat tone.
pub fn predicted_peak_ratio(
    state: &UavState,
    tx_gain: Complex64,
    n_tx: usize,
    cfg: &EchoConfig,
) -> f64 {
    let wf = &cfg.waveform;
    let ns = wf.n_samples() as f64;
    let sigma2 = noise_floor(&cfg.channel);
    let amp = echo_amplitude(state, tx_gain, n_tx, cfg).norm();
    if sigma2 == 0.0 {
        return if amp > 0.0 { f64::INFINITY } else { 0.0 };
    }
    let x = (wf.beat_frequency(state.d) + wf.doppler(state.v_par)) * ns / wf.sample_rate;
    let delta = x - x.round();
    let coherent = if delta.abs() < 1e-12 {
        ns
    } else {
        ((PI * delta).sin() / (PI * delta / ns).sin()).abs()
    };
    let noise_bin = (sigma2 * ns).sqrt();
    let signal = ((amp * coherent).powi(2) + noise_bin * noise_bin).sqrt();
    signal / (noise_bin * PI.sqrt() / 2.0)
}

/// Radial velocity from the slow-time spectrum at `bin`, accumulated over
/// elements.
pub fn estimate_velocity_cube(
    cube: &RangeCube,
    capture: &EchoCapture,
    bin: usize,
    cfg: &DspConfig,
) -> Result<f64> {
    if bin >= cube.n_bins {
        return Err(CoreError::Config(format!(
            "range bin {bin} out of {}",
            cube.n_bins
        )));
    }
    let n = cube.n_chirps;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut acc = vec![0.0; n];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for rx in 0..cube.n_rx {
        for (c, b) in buf.iter_mut().enumerate() {
            *b = cube.at(bin, c, rx);
        }
        fft.process(&mut buf);
        // Shift so index n/2 is zero Doppler.
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[(k + n - n / 2) % n].norm_sqr().sqrt();
        }
    }
    let (k, ratio) = peak(&acc);
    if ratio < cfg.peak_threshold {
        return Err(CoreError::NoPeak {
            ratio,
            threshold: cfg.peak_threshold,
        });
    }
    let wf = &capture.waveform;
    let f_d = (k as f64 - (n / 2) as f64) / (n as f64 * wf.chirp_duration);
    Ok(SPEED_OF_LIGHT * f_d / (2.0 * wf.f_c))
}

pub fn estimate_velocity(capture: &EchoCapture, bin: usize, cfg: &DspConfig) -> Result<f64> {
    estimate_velocity_cube(&range_fft(capture), capture, bin, cfg)
}

/// Eigen-structure of the spatial covariance at one range bin.
#[derive(Debug, Clone)]
pub struct Subspace {
    /// Unit-norm principal eigenvector.
    pub signal: DVector<Complex64>,
    /// Remaining eigenvectors as columns.
    pub noise: DMatrix<Complex64>,
    /// Eigenvalues in descending order.
    pub eigenvalues: Vec<f64>,
}

pub fn spatial_subspace(cube: &RangeCube, bin: usize, cfg: &DspConfig) -> Result<Subspace> {
    let n = cube.n_rx;
    if n < 2 || bin >= cube.n_bins {
        return Err(CoreError::DegenerateCovariance);
    }
    // Snapshots are the chirps at this range bin.
    let snaps = DMatrix::<Complex64>::from_fn(n, cube.n_chirps, |i, c| cube.at(bin, c, i));
    let mut cov = &snaps * snaps.adjoint();
    cov /= Complex64::new(cube.n_chirps as f64, 0.0);
    let trace: f64 = (0..n).map(|i| cov[(i, i)].re).sum();
    if !(trace.is_finite() && trace > 0.0) {
        return Err(CoreError::DegenerateCovariance);
    }
    let load = cfg.loading * trace / n as f64;
    for i in 0..n {
        cov[(i, i)] += Complex64::new(load, 0.0);
    }
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    if !(eigenvalues[0] >= cfg.eigen_ratio_threshold * eigenvalues[1].max(0.0))
        || eigenvalues[0] <= 0.0
    {
        return Err(CoreError::DegenerateCovariance);
    }
    let signal = eig.eigenvectors.column(order[0]).into_owned();
    let noise = DMatrix::from_columns(
        &order[1..]
            .iter()
            .map(|&i| eig.eigenvectors.column(i))
            .collect::<Vec<_>>(),
    );
    Ok(Subspace {
        signal,
        noise,
        eigenvalues,
    })
}

/// `1 / ||E_n^H b||^2` via the signal eigenvector, using
/// `||E_n^H b||^2 = ||b||^2 - |e_1^H b|^2` for an orthonormal basis.
fn pseudo_spectrum(sub: &Subspace, b: &[Complex64]) -> f64 {
    let norm2: f64 = b.iter().map(|v| v.norm_sqr()).sum();
    let proj: Complex64 = sub.signal.iter().zip(b).map(|(e, v)| e.conj() * v).sum();
    1.0 / (norm2 - proj.norm_sqr()).max(1e-15)
}

/// Same spectrum through the explicit noise subspace.
pub fn pseudo_spectrum_noise(sub: &Subspace, b: &[Complex64]) -> f64 {
    let bv = DVector::from_column_slice(b);
    let p = sub.noise.adjoint() * bv;
    1.0 / p.norm_squared().max(1e-15)
}

fn grid_axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MusicEstimate {
    pub theta: f64,
    pub phi: f64,
    pub power: f64,
}

fn argmax_on_grid(
    sub: &Subspace,
    cube_rx: ArrayGeometry,
    thetas: &[f64],
    phis: &[f64],
) -> Result<MusicEstimate> {
    let mut best: Option<MusicEstimate> = None;
    for &phi in phis {
        for &theta in thetas {
            let b = steering_vector(cube_rx, theta, phi)?;
            let p = pseudo_spectrum(sub, b.weights());
            if best.is_none_or(|m| p > m.power) {
                best = Some(MusicEstimate {
                    theta,
                    phi,
                    power: p,
                });
            }
        }
    }
    best.ok_or(CoreError::EmptyInput)
}

/// Squared correlation `|e_1^H b(psi)|^2` between the signal eigenvector
/// and the unit steering vector at a wavenumber. The spectrum is
/// `1 / (1 - corr)`, so both peak at the same place, but the correlation is
/// smooth where the spectrum is a needle.
fn signal_correlation(sub: &Subspace, rx: ArrayGeometry, psi_h: f64, psi_v: f64) -> f64 {
    let b = steering_from_wavenumber(rx, psi_h, psi_v);
    let proj: Complex64 = sub
        .signal
        .iter()
        .zip(b.weights())
        .map(|(e, v)| e.conj() * v)
        .sum();
    proj.norm_sqr()
}

/// Compass search for the correlation maximum starting at `start`.
fn refine_wavenumber(
    sub: &Subspace,
    rx: ArrayGeometry,
    start: (f64, f64),
    step: f64,
    tol: f64,
) -> (f64, f64) {
    let (mut h, mut v) = start;
    let mut best = signal_correlation(sub, rx, h, v);
    let mut step = step;
    while step > tol {
        let mut improved = false;
        for (dh, dv) in [(step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)] {
            let c = signal_correlation(sub, rx, h + dh, v + dv);
            if c > best {
                best = c;
                h += dh;
                v += dv;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    (h, v)
}

/// Angles for a wavenumber, taking the azimuth branch nearest `theta_hint`
/// and clamping into the grid.
fn angles_near(psi_h: f64, psi_v: f64, theta_hint: f64, grid: &AngleBounds) -> (f64, f64) {
    let phi = (psi_v / PI).clamp(-1.0, 1.0).asin();
    let c = phi.cos();
    let sh = if c > 0.0 {
        (psi_h / (PI * c)).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    let a = sh.asin();
    let theta = [a, PI - a, -PI - a]
        .into_iter()
        .min_by(|x, y| (x - theta_hint).abs().total_cmp(&(y - theta_hint).abs()))
        .unwrap_or(a);
    (
        theta.clamp(grid.theta_min, grid.theta_max),
        phi.clamp(grid.phi_min, grid.phi_max),
    )
}

/// MUSIC peak search over `cfg.grid`: a coarse angle grid picks the main
/// lobe, then the peak is polished in wavenumber space where the spectrum
/// is isotropic. A fixed fine angle lattice is not enough near the top of
/// the elevation range, where a small wavenumber error spans degrees of
/// azimuth and the peak falls between lattice points.
pub fn estimate_angles_cube(
    cube: &RangeCube,
    capture: &EchoCapture,
    bin: usize,
    cfg: &DspConfig,
) -> Result<MusicEstimate> {
    let sub = spatial_subspace(cube, bin, cfg)?;
    let g = &cfg.grid;
    let coarse = cfg.coarse_step_deg.to_radians();
    let c = argmax_on_grid(
        &sub,
        capture.rx,
        &grid_axis(g.theta_min, g.theta_max, coarse),
        &grid_axis(g.phi_min, g.phi_max, coarse),
    )?;
    let start = to_wavenumber(c.theta, c.phi);
    // One coarse step never moves a wavenumber by more than pi * step.
    let (h, v) = refine_wavenumber(&sub, capture.rx, start, PI * coarse, cfg.refine_tol);
    let (theta, phi) = angles_near(h, v, c.theta, g);
    let b = steering_vector(capture.rx, theta, phi)?;
    let power = pseudo_spectrum(&sub, b.weights());
    if power >= c.power {
        Ok(MusicEstimate { theta, phi, power })
    } else {
        Ok(c)
    }
}

pub fn estimate_angles_music(
    capture: &EchoCapture,
    bin: usize,
    cfg: &DspConfig,
) -> Result<(f64, f64)> {
    let m = estimate_angles_cube(&range_fft(capture), capture, bin, cfg)?;
    Ok((m.theta, m.phi))
}

/// Full chain: range, Doppler and MUSIC. Any detection failure yields an
/// invalid record rather than an error.
pub fn process_capture(capture: &EchoCapture, cfg: &DspConfig, t: f64) -> EsiRecord {
    let cube = range_fft(capture);
    let run = || -> Result<EsiRecord> {
        let r = estimate_range_cube(&cube, capture, cfg)?;
        let v = estimate_velocity_cube(&cube, capture, r.bin, cfg)?;
        let m = estimate_angles_cube(&cube, capture, r.bin, cfg)?;
        Ok(EsiRecord {
            theta_e: m.theta,
            phi_e: m.phi,
            v_e: v,
            d_e: r.d,
            valid: true,
            t,
        })
    };
    run().unwrap_or_else(|_| EsiRecord::invalid(t))
}

/// Writes the MUSIC spectrum at `bin` on the coarse grid as CSV.
pub fn dump_spectrum<W: Write>(
    capture: &EchoCapture,
    bin: usize,
    cfg: &DspConfig,
    w: W,
) -> Result<()> {
    let cube = range_fft(capture);
    let sub = spatial_subspace(&cube, bin, cfg)?;
    let step = cfg.coarse_step_deg.to_radians();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["theta_deg", "phi_deg", "power"])?;
    for phi in grid_axis(cfg.grid.phi_min, cfg.grid.phi_max, step) {
        for theta in grid_axis(cfg.grid.theta_min, cfg.grid.theta_max, step) {
            let b = steering_vector(capture.rx, theta, phi)?;
            let p = pseudo_spectrum(&sub, b.weights());
            out.write_record([
                format!("{:.4}", theta.to_degrees()),
                format!("{:.4}", phi.to_degrees()),
                format!("{p:.6e}"),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
