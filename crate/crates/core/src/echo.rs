//! De-chirped FMCW echo synthesis for a single point target.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::beamspace::{
    steering_vector, to_wavenumber, ArrayGeometry, BeamIndex, Codebook, SteeringVector,
};
use crate::{CoreError, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Chirp parameters of the transmit waveform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub f_c: f64,
    pub bandwidth: f64,
    pub chirp_duration: f64,
    pub n_chirps: usize,
    /// Complex sampling rate of the de-chirped signal.
    pub sample_rate: f64,
}

impl Default for WaveformConfig {
    /// 28 GHz, 100 MHz sweep in 50 us, 64 chirps, 6 MHz complex sampling:
    /// 1.5 m range bins out to 450 m and about +-53 m/s unambiguous velocity.
    fn default() -> Self {
        Self {
            f_c: 28e9,
            bandwidth: 100e6,
            chirp_duration: 50e-6,
            n_chirps: 64,
            sample_rate: 6e6,
        }
    }
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.f_c > 0.0
            && self.bandwidth > 0.0
            && self.chirp_duration > 0.0
            && self.sample_rate > 0.0
            && self.n_chirps >= 2
            && self.n_samples() >= 2;
        if !ok {
            return Err(CoreError::Config(format!("invalid waveform {self:?}")));
        }
        Ok(())
    }

    /// Chirp slope in Hz/s.
    pub fn slope(&self) -> f64 {
        self.bandwidth / self.chirp_duration
    }

    pub fn n_samples(&self) -> usize {
        (self.sample_rate * self.chirp_duration).round() as usize
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.f_c
    }

    /// Range spanned by one fast-time FFT bin.
    pub fn range_bin(&self) -> f64 {
        SPEED_OF_LIGHT * self.sample_rate / (2.0 * self.slope() * self.n_samples() as f64)
    }

    /// Radial velocity spanned by one Doppler bin.
    pub fn velocity_bin(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.f_c * self.n_chirps as f64 * self.chirp_duration)
    }

    /// Largest range whose beat tone stays below the sampling rate.
    pub fn max_range(&self) -> f64 {
        SPEED_OF_LIGHT * self.sample_rate / (2.0 * self.slope())
    }

    pub fn beat_frequency(&self, d: f64) -> f64 {
        self.slope() * 2.0 * d / SPEED_OF_LIGHT
    }

    pub fn doppler(&self, v_par: f64) -> f64 {
        2.0 * v_par * self.f_c / SPEED_OF_LIGHT
    }
}

/// Kinematic state of the target as seen from the base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    /// Azimuth (rad).
    pub theta: f64,
    /// Elevation (rad).
    pub phi: f64,
    /// Range (m).
    pub d: f64,
    /// Radial velocity (m/s), positive when receding.
    pub v_par: f64,
    /// Tangential speed (m/s).
    pub v_perp: f64,
    /// Time stamp (s).
    pub t: f64,
}

impl UavState {
    pub fn wavenumber(&self) -> (f64, f64) {
        to_wavenumber(self.theta, self.phi)
    }
}

/// Echo channel parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Transmit power (linear).
    pub p: f64,
    /// Magnitude of the complex reflectivity.
    pub epsilon_mag: f64,
    /// Phase of the complex reflectivity (rad).
    pub epsilon_phase: f64,
    /// Transmit SNR `p / sigma^2` in dB; `+inf` disables noise.
    pub snr_db: f64,
    /// Lumped system gain applied to the echo amplitude (element gains,
    /// processing and RCS units); 0 dB gives the bare propagation model.
    pub link_gain_db: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            p: 1.0,
            epsilon_mag: 10.0,
            epsilon_phase: 0.0,
            snr_db: 0.0,
            link_gain_db: DEFAULT_LINK_GAIN_DB,
        }
    }
}

/// Default system gain. Chosen so a matched beam at the far edge of the
/// flight envelope (400 m, smallest array, SNR -2 dB) still clears the
/// range-peak threshold.
pub const DEFAULT_LINK_GAIN_DB: f64 = 85.0;

impl ChannelParams {
    pub fn epsilon(&self) -> Complex64 {
        Complex64::from_polar(self.epsilon_mag, self.epsilon_phase)
    }

    /// `beta = epsilon (2d)^-2`.
    pub fn reflection(&self, d: f64) -> Complex64 {
        self.epsilon() / (4.0 * d * d)
    }

    /// Draws the reflectivity phase once from `rng`.
    pub fn with_random_phase<R: Rng>(mut self, rng: &mut R) -> Self {
        self.epsilon_phase = rng.random_range(0.0..2.0 * PI);
        self
    }
}

/// Noise variance `sigma^2 = p / 10^(snr_db / 10)`.
pub fn noise_floor(channel: &ChannelParams) -> f64 {
    channel.p / 10f64.powf(channel.snr_db / 10.0)
}

/// Complex samples indexed by (fast-time sample, chirp, receive element).
#[derive(Debug, Clone, PartialEq)]
pub struct EchoCapture {
    iq: Vec<Complex64>,
    pub n_samples: usize,
    pub n_chirps: usize,
    pub n_rx: usize,
    pub waveform: WaveformConfig,
    pub rx: ArrayGeometry,
    pub beam_used: Option<BeamIndex>,
}

pub const CAPTURE_MAGIC: &[u8; 8] = b"ISACIQ01";

impl EchoCapture {
    pub fn zeros(waveform: WaveformConfig, rx: ArrayGeometry) -> Self {
        let (n_samples, n_chirps, n_rx) = (waveform.n_samples(), waveform.n_chirps, rx.len());
        Self {
            iq: vec![Complex64::new(0.0, 0.0); n_samples * n_chirps * n_rx],
            n_samples,
            n_chirps,
            n_rx,
            waveform,
            rx,
            beam_used: None,
        }
    }

    fn offset(&self, chirp: usize, rx: usize) -> usize {
        (chirp * self.n_rx + rx) * self.n_samples
    }

    pub fn at(&self, sample: usize, chirp: usize, rx: usize) -> Complex64 {
        self.iq[self.offset(chirp, rx) + sample]
    }

    /// Fast-time samples of one chirp at one element.
    pub fn fast_time(&self, chirp: usize, rx: usize) -> &[Complex64] {
        let o = self.offset(chirp, rx);
        &self.iq[o..o + self.n_samples]
    }

    pub fn fast_time_mut(&mut self, chirp: usize, rx: usize) -> &mut [Complex64] {
        let o = self.offset(chirp, rx);
        &mut self.iq[o..o + self.n_samples]
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.iq
    }

    pub fn samples_mut(&mut self) -> &mut [Complex64] {
        &mut self.iq
    }

    pub fn is_finite(&self) -> bool {
        self.iq.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Binary dump: 8-byte magic, three `u32` dimensions (samples, chirps,
    /// elements), `f64` sample rate, 4 reserved bytes, then interleaved
    /// little-endian `f32` I/Q in storage order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CAPTURE_MAGIC)?;
        for d in [self.n_samples, self.n_chirps, self.n_rx] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&self.waveform.sample_rate.to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for c in &self.iq {
            w.write_all(&(c.re as f32).to_le_bytes())?;
            w.write_all(&(c.im as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dump written by [`EchoCapture::write_to`]. The header carries
    /// only the sample rate, so the remaining waveform fields and the array
    /// shape come from the caller.
    pub fn read_from<R: Read>(
        mut r: R,
        waveform: WaveformConfig,
        rx: ArrayGeometry,
    ) -> Result<Self> {
        let mut head = [0u8; 32];
        r.read_exact(&mut head)?;
        if &head[..8] != CAPTURE_MAGIC {
            return Err(CoreError::Parse("capture magic mismatch".into()));
        }
        let dim =
            |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let (ns, nc, nr) = (dim(0), dim(1), dim(2));
        let fs = f64::from_le_bytes(head[20..28].try_into().unwrap());
        let mut cap = Self::zeros(waveform, rx);
        if (ns, nc, nr) != (cap.n_samples, cap.n_chirps, cap.n_rx) || fs != waveform.sample_rate {
            return Err(CoreError::Parse(format!(
                "capture dims {ns}x{nc}x{nr} at {fs} Hz do not match configuration"
            )));
        }
        let mut buf = vec![0u8; ns * nc * nr * 8];
        r.read_exact(&mut buf)?;
        for (c, b) in cap.iq.iter_mut().zip(buf.chunks_exact(8)) {
            let re = f32::from_le_bytes(b[..4].try_into().unwrap());
            let im = f32::from_le_bytes(b[4..].try_into().unwrap());
            *c = Complex64::new(re as f64, im as f64);
        }
        Ok(cap)
    }
}

/// Fixed parts of the echo model shared by every capture of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoConfig {
    pub waveform: WaveformConfig,
    pub channel: ChannelParams,
    pub rx: ArrayGeometry,
}

impl Default for EchoConfig {
    fn default() -> Self {
        Self {
            waveform: WaveformConfig::default(),
            channel: ChannelParams::default(),
            rx: ArrayGeometry::square(8),
        }
    }
}

/// Complex amplitude of the matched-filtered echo per element and sample:
/// `kappa sqrt(p) beta (a^H f) / sqrt(N_r)` times the link gain.
pub fn echo_amplitude(
    state: &UavState,
    tx_gain: Complex64,
    n_tx: usize,
    cfg: &EchoConfig,
) -> Complex64 {
    let kappa = ((cfg.rx.len() * n_tx) as f64).sqrt();
    let link = 10f64.powf(cfg.channel.link_gain_db / 20.0);
    cfg.channel.reflection(state.d)
        * tx_gain
        * (kappa * cfg.channel.p.sqrt() * link / (cfg.rx.len() as f64).sqrt())
}

/// Per-element SNR of the target tone after the fast-time FFT.
pub fn range_bin_snr(state: &UavState, tx_gain: Complex64, n_tx: usize, cfg: &EchoConfig) -> f64 {
    let a = echo_amplitude(state, tx_gain, n_tx, cfg).norm_sqr();
    let sigma2 = noise_floor(&cfg.channel);
    if sigma2 == 0.0 {
        return f64::INFINITY;
    }
    a * cfg.waveform.n_samples() as f64 / sigma2
}

/// Synthesizes the de-chirped echo for transmit beamformer `f`.
pub fn synthesize_echo(
    state: &UavState,
    f: &SteeringVector,
    tx: ArrayGeometry,
    cfg: &EchoConfig,
    seed: u64,
) -> Result<EchoCapture> {
    if f.weights().len() != tx.len() {
        return Err(CoreError::Config(format!(
            "beamformer has {} weights for a {}-element array",
            f.weights().len(),
            tx.len()
        )));
    }
    let a = steering_vector(tx, state.theta, state.phi)?;
    synthesize_with_gain(state, a.inner(f), tx.len(), cfg, seed)
}

/// Synthesizes the echo when codebook beam `beam` illuminates the target.
pub fn synthesize_for_beam(
    state: &UavState,
    codebook: &Codebook,
    beam: BeamIndex,
    cfg: &EchoConfig,
    seed: u64,
) -> Result<EchoCapture> {
    let (h, v) = state.wavenumber();
    let mut cap = synthesize_with_gain(
        state,
        codebook.gain(beam, h, v),
        codebook.geometry.len(),
        cfg,
        seed,
    )?;
    cap.beam_used = Some(beam);
    Ok(cap)
}

/// Synthesis given the transmit inner product `a^H f` directly.
pub fn synthesize_with_gain(
    state: &UavState,
    tx_gain: Complex64,
    n_tx: usize,
    cfg: &EchoConfig,
    seed: u64,
) -> Result<EchoCapture> {
    let wf = &cfg.waveform;
    wf.validate()?;
    if !(state.d > 0.0) || !state.d.is_finite() {
        return Err(CoreError::Config(format!(
            "range {} must be positive",
            state.d
        )));
    }
    let tau = 2.0 * state.d / SPEED_OF_LIGHT;
    if tau >= wf.chirp_duration {
        return Err(CoreError::Config(format!(
            "round-trip delay {tau:.3e} s exceeds the chirp"
        )));
    }
    let f_if = wf.slope() * tau;
    if f_if >= wf.sample_rate {
        return Err(CoreError::Config(format!(
            "range {:.1} m beyond the {:.1} m sampled span",
            state.d,
            wf.max_range()
        )));
    }
    let mu = wf.doppler(state.v_par);
    let amp = echo_amplitude(state, tx_gain, n_tx, cfg);
    // Residual carrier phase left after de-chirping.
    let residual =
        Complex64::from_polar(1.0, -2.0 * PI * wf.f_c * tau + PI * wf.slope() * tau * tau);
    let rx_resp = steering_vector(cfg.rx, state.theta, state.phi)?;
    let rx_w: Vec<Complex64> = rx_resp
        .weights()
        .iter()
        .map(|w| w * (cfg.rx.len() as f64).sqrt())
        .collect();

    let mut cap = EchoCapture::zeros(*wf, cfg.rx);
    let ns = cap.n_samples;
    let dt = 1.0 / wf.sample_rate;
    // Beat tone with the intra-chirp part of the Doppler term.
    let tone: Vec<Complex64> = (0..ns)
        .map(|n| Complex64::from_polar(1.0, 2.0 * PI * (f_if + mu) * n as f64 * dt))
        .collect();
    let sigma2 = noise_floor(&cfg.channel);
    let noise_std = (sigma2 / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for chirp in 0..wf.n_chirps {
        let slow = Complex64::from_polar(1.0, 2.0 * PI * mu * chirp as f64 * wf.chirp_duration);
        let base = amp * residual * slow;
        for (rx, w) in rx_w.iter().enumerate() {
            let c = base * w;
            let row = cap.fast_time_mut(chirp, rx);
            for (y, t) in row.iter_mut().zip(&tone) {
                *y = c * t;
            }
            if noise_std > 0.0 {
                for y in row.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *y += Complex64::new(re, im) * noise_std;
                }
            }
        }
    }
    Ok(cap)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(d: f64, v: f64) -> UavState {
        UavState {
            theta: 0.3,
            phi: 0.4,
            d,
            v_par: v,
            v_perp: 0.0,
            t: 0.0,
        }
    }

    fn noiseless(gain_db: f64) -> EchoConfig {
        EchoConfig {
            channel: ChannelParams {
                snr_db: f64::INFINITY,
                link_gain_db: gain_db,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn noise_floor_examples() {
        let mut c = ChannelParams::default();
        assert_eq!(noise_floor(&c), 1.0);
        c.snr_db = -2.0;
        assert!((noise_floor(&c) - 1.584_893_192).abs() < 1e-9);
        c.snr_db = 0.0;
        c.p = 4.0;
        assert_eq!(noise_floor(&c), 4.0);
    }

    #[test]
    fn default_waveform_resolution() {
        let wf = WaveformConfig::default();
        assert_eq!(wf.n_samples(), 300);
        assert!((wf.range_bin() - 1.499).abs() < 1e-3);
        assert!(wf.max_range() > 400.0);
        assert!(wf.velocity_bin() * wf.n_chirps as f64 / 2.0 > 27.0);
    }

    #[test]
    fn matched_power_is_kappa_squared_p_beta_squared() {
        let cfg = noiseless(0.0);
        let tx = ArrayGeometry::square(8);
        let st = state(100.0, 3.0);
        let f = steering_vector(tx, st.theta, st.phi).unwrap();
        let cap = synthesize_echo(&st, &f, tx, &cfg, 1).unwrap();
        let per_sample: f64 = cap.samples().iter().map(|c| c.norm_sqr()).sum::<f64>()
            / (cap.n_samples * cap.n_chirps) as f64;
        let kappa2 = (cfg.rx.len() * tx.len()) as f64;
        let want = kappa2 * cfg.channel.p * cfg.channel.reflection(st.d).norm_sqr();
        assert!(
            (per_sample / want - 1.0).abs() < 1e-9,
            "{per_sample} vs {want}"
        );
    }

    #[test]
    fn doubling_range_quarters_amplitude() {
        let cfg = noiseless(0.0);
        let a1 = echo_amplitude(&state(50.0, 0.0), Complex64::new(1.0, 0.0), 64, &cfg);
        let a2 = echo_amplitude(&state(100.0, 0.0), Complex64::new(1.0, 0.0), 64, &cfg);
        assert!((a1.norm() / a2.norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sidelobe_beam_loses_ten_db() {
        let cfg = noiseless(0.0);
        let cb = Codebook::standard(3).unwrap();
        let st = state(100.0, 0.0);
        let (h, v) = st.wavenumber();
        let matched = cb.beam_of_wavenumber(h, v).unwrap();
        let far = BeamIndex::new(3, (matched.m_h + 3) % 8 + 1, (matched.m_v + 3) % 8 + 1).unwrap();
        let pm = synthesize_for_beam(&st, &cb, matched, &cfg, 0).unwrap();
        let pf = synthesize_for_beam(&st, &cb, far, &cfg, 0).unwrap();
        let pow = |c: &EchoCapture| c.samples().iter().map(|x| x.norm_sqr()).sum::<f64>();
        assert!(10.0 * (pow(&pm) / pow(&pf)).log10() >= 10.0);
    }

    #[test]
    fn doppler_phase_advances_per_chirp() {
        let cfg = noiseless(60.0);
        let wf = cfg.waveform;
        let cap = synthesize_with_gain(&state(80.0, 12.0), Complex64::new(1.0, 0.0), 64, &cfg, 0)
            .unwrap();
        let want = 2.0 * PI * wf.doppler(12.0) * wf.chirp_duration;
        for c in 1..cap.n_chirps {
            let d = (cap.at(5, c, 2) / cap.at(5, c - 1, 2)).arg();
            let err = (d - want).rem_euclid(2.0 * PI);
            assert!(err.min(2.0 * PI - err) < 1e-9);
        }
    }

    #[test]
    fn same_seed_same_capture() {
        let cfg = EchoConfig::default();
        let g = Complex64::new(0.7, 0.1);
        let a = synthesize_with_gain(&state(120.0, 1.0), g, 64, &cfg, 9).unwrap();
        let b = synthesize_with_gain(&state(120.0, 1.0), g, 64, &cfg, 9).unwrap();
        let c = synthesize_with_gain(&state(120.0, 1.0), g, 64, &cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_out_of_span_range() {
        let cfg = EchoConfig::default();
        let r = synthesize_with_gain(&state(5000.0, 0.0), Complex64::new(1.0, 0.0), 64, &cfg, 0);
        assert!(matches!(r, Err(CoreError::Config(_))));
    }

    #[test]
    fn dump_round_trip() {
        let cfg = EchoConfig::default();
        let cap =
            synthesize_with_gain(&state(60.0, 2.0), Complex64::new(1.0, 0.0), 64, &cfg, 4).unwrap();
        let mut buf = Vec::new();
        cap.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 32 + cap.samples().len() * 8);
        let back = EchoCapture::read_from(&buf[..], cfg.waveform, cfg.rx).unwrap();
        for (a, b) in cap.samples().iter().zip(back.samples()) {
            assert!((a - b).norm() <= 1e-6 * a.norm().max(1.0));
        }
    }
}
