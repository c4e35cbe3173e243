//! Planar-array steering vectors, the angle to wavenumber map and the
//! uniform hierarchical codebook that tiles wavenumber space.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{AngleBounds, CoreError, Result};

/// Uniform planar array with half-wavelength spacing. Element `(i_h, i_v)`
/// is stored at flat index `i_v * n_h + i_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_h: usize,
    pub n_v: usize,
}

impl ArrayGeometry {
    pub fn new(n_h: usize, n_v: usize) -> Result<Self> {
        if n_h == 0 || n_v == 0 {
            return Err(CoreError::Config(format!(
                "array {n_h}x{n_v} has no elements"
            )));
        }
        Ok(Self { n_h, n_v })
    }

    pub fn square(n: usize) -> Self {
        Self { n_h: n, n_v: n }
    }

    /// Transmit array used with a level-`s` codebook: `2^(s+1)` per side.
    pub fn for_level(s: u32) -> Self {
        Self::square(1 << (s + 1))
    }

    pub fn len(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i_h: usize, i_v: usize) -> usize {
        i_v * self.n_h + i_h
    }
}

/// Unit-norm array response.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    weights: Vec<Complex64>,
}

impl SteeringVector {
    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Hermitian inner product `self^H other`.
    pub fn inner(&self, other: &SteeringVector) -> Complex64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }
}

/// `(psi_h, psi_v) = (pi sin(theta) cos(phi), pi sin(phi))`.
pub fn to_wavenumber(theta: f64, phi: f64) -> (f64, f64) {
    (PI * theta.sin() * phi.cos(), PI * phi.sin())
}

/// Principal-branch inverse of [`to_wavenumber`]; `None` for wavenumbers
/// with no real direction (outside the visible region).
pub fn from_wavenumber(psi_h: f64, psi_v: f64) -> Option<(f64, f64)> {
    let sv = psi_v / PI;
    if !(-1.0..=1.0).contains(&sv) {
        return None;
    }
    let phi = sv.asin();
    let c = phi.cos();
    if c <= 0.0 {
        return (psi_h == 0.0).then_some((0.0, phi));
    }
    let sh = psi_h / (PI * c);
    if !(-1.0..=1.0).contains(&sh) {
        return None;
    }
    Some((sh.asin(), phi))
}

/// Steering vector toward `(theta, phi)`.
///
/// The response depends on the angles only through their wavenumbers, so
/// any finite azimuth is accepted; azimuths mirrored about broadside map to
/// the same vector.
pub fn steering_vector(geometry: ArrayGeometry, theta: f64, phi: f64) -> Result<SteeringVector> {
    if !theta.is_finite() || !phi.is_finite() {
        return Err(CoreError::Config(format!(
            "non-finite angle ({theta}, {phi})"
        )));
    }
    let (psi_h, psi_v) = to_wavenumber(theta, phi);
    Ok(steering_from_wavenumber(geometry, psi_h, psi_v))
}

pub fn steering_from_wavenumber(geometry: ArrayGeometry, psi_h: f64, psi_v: f64) -> SteeringVector {
    let scale = 1.0 / (geometry.len() as f64).sqrt();
    let mut weights = Vec::with_capacity(geometry.len());
    for i_v in 0..geometry.n_v {
        for i_h in 0..geometry.n_h {
            let phase = i_h as f64 * psi_h + i_v as f64 * psi_v;
            weights.push(Complex64::from_polar(scale, phase));
        }
    }
    SteeringVector { weights }
}

/// Normalized uniform-line array factor `(1/n) sum_{i<n} exp(j i x)`.
pub fn array_factor(n: usize, x: f64) -> Complex64 {
    let half = 0.5 * x;
    let den = half.sin();
    if den.abs() < 1e-9 {
        // Near a grating lobe the closed form is 0/0; sum directly.
        return (0..n)
            .map(|i| Complex64::from_polar(1.0, i as f64 * x))
            .sum::<Complex64>()
            / n as f64;
    }
    let mag = (n as f64 * half).sin() / (n as f64 * den);
    Complex64::from_polar(1.0, (n as f64 - 1.0) * half) * mag
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(CoreError::Config(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.lo..=self.hi).contains(&x)
    }
}

/// Wavenumber region tiled by a codebook.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub psi_h: Interval,
    pub psi_v: Interval,
}

impl Default for Coverage {
    /// Full azimuth wavenumber range and the upper elevation half-space
    /// (`phi` in `[0, pi/2]`, hence `psi_v` in `[0, pi]`).
    fn default() -> Self {
        Self {
            psi_h: Interval { lo: -PI, hi: PI },
            psi_v: Interval { lo: 0.0, hi: PI },
        }
    }
}

impl Coverage {
    /// Builds coverage from wavenumber bounds given in degrees.
    pub fn from_degrees(h: [f64; 2], v: [f64; 2]) -> Result<Self> {
        Ok(Self {
            psi_h: Interval::new(h[0].to_radians(), h[1].to_radians())?,
            psi_v: Interval::new(v[0].to_radians(), v[1].to_radians())?,
        })
    }

    /// Wavenumber image of an angular sector: the smallest rectangle holding
    /// `(pi sin(theta) cos(phi), pi sin(phi))` for every angle pair in it.
    pub fn for_sector(bounds: &AngleBounds) -> Result<Self> {
        let range = |lo: f64, hi: f64, f: fn(f64) -> f64, turning: f64| {
            let mut vals = vec![f(lo), f(hi)];
            if lo < turning && turning < hi {
                vals.push(f(turning));
            }
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (min, max)
        };
        let (s_lo, s_hi) = range(bounds.theta_min, bounds.theta_max, f64::sin, PI / 2.0);
        let (c_lo, c_hi) = range(bounds.phi_min, bounds.phi_max, f64::cos, 0.0);
        let products = [s_lo * c_lo, s_lo * c_hi, s_hi * c_lo, s_hi * c_hi];
        let h_lo = products.iter().copied().fold(f64::INFINITY, f64::min);
        let h_hi = products.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (v_lo, v_hi) = range(bounds.phi_min, bounds.phi_max, f64::sin, PI / 2.0);
        Ok(Self {
            psi_h: Interval::new(PI * h_lo, PI * h_hi)?,
            psi_v: Interval::new(PI * v_lo, PI * v_hi)?,
        })
    }

    /// Nearest point of the coverage rectangle.
    pub fn clamp(&self, psi_h: f64, psi_v: f64) -> (f64, f64) {
        (
            psi_h.clamp(self.psi_h.lo, self.psi_h.hi),
            psi_v.clamp(self.psi_v.lo, self.psi_v.hi),
        )
    }
}

/// Beam `(m_h, m_v)` of a level-`s` codebook, both indices 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BeamIndex {
    pub s: u32,
    pub m_h: u32,
    pub m_v: u32,
}

impl fmt::Display for BeamIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})@{}", self.m_h, self.m_v, self.s)
    }
}

/// Child offsets `(b_h, b_v)` in scan order.
pub const CHILD_ORDER: [(u32, u32); 4] = [(1, 1), (2, 1), (1, 2), (2, 2)];

impl BeamIndex {
    pub fn new(s: u32, m_h: u32, m_v: u32) -> Result<Self> {
        let side = side(s);
        if s == 0 || s > 15 || !(1..=side).contains(&m_h) || !(1..=side).contains(&m_v) {
            return Err(CoreError::Config(format!(
                "beam ({m_h},{m_v}) invalid at level {s}"
            )));
        }
        Ok(Self { s, m_h, m_v })
    }

    /// `(k_h, k_v, b_h, b_v)` with `m = 2(k - 1) + b`; `k` indexes the
    /// parent cell at level `s - 1`.
    pub fn decompose(&self) -> (u32, u32, u32, u32) {
        let split = |m: u32| {
            let k = m.div_ceil(2);
            (k, m - 2 * (k - 1))
        };
        let (k_h, b_h) = split(self.m_h);
        let (k_v, b_v) = split(self.m_v);
        (k_h, k_v, b_h, b_v)
    }

    pub fn compose(s: u32, k_h: u32, k_v: u32, b_h: u32, b_v: u32) -> Result<Self> {
        if !(1..=2).contains(&b_h) || !(1..=2).contains(&b_v) || k_h == 0 || k_v == 0 {
            return Err(CoreError::Config(format!(
                "bad split ({k_h},{k_v},{b_h},{b_v})"
            )));
        }
        Self::new(s, 2 * (k_h - 1) + b_h, 2 * (k_v - 1) + b_v)
    }

    pub fn parent(&self) -> Option<BeamIndex> {
        (self.s > 1).then(|| {
            let (k_h, k_v, _, _) = self.decompose();
            BeamIndex {
                s: self.s - 1,
                m_h: k_h,
                m_v: k_v,
            }
        })
    }

    /// The four level-`s+1` beams inside this cell, in scan order.
    pub fn children(&self) -> [BeamIndex; 4] {
        CHILD_ORDER.map(|(b_h, b_v)| BeamIndex {
            s: self.s + 1,
            m_h: 2 * (self.m_h - 1) + b_h,
            m_v: 2 * (self.m_v - 1) + b_v,
        })
    }

    /// Row-major position (`m_v` major, `m_h` minor), 0-based.
    pub fn linear(&self) -> usize {
        (self.m_v as usize - 1) * side(self.s) as usize + self.m_h as usize - 1
    }
}

/// Beams per axis at level `s`.
pub fn side(s: u32) -> u32 {
    1u32 << s
}

/// Level-`s` codebook: `2^s x 2^s` equal cells over the coverage, each beam
/// steered at its cell midpoint. Weights are produced on demand since large
/// arrays make the full table costly to hold.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub s: u32,
    pub coverage: Coverage,
    pub geometry: ArrayGeometry,
}

#[derive(Debug, Serialize)]
struct CenterRow {
    s: u32,
    m_h: u32,
    m_v: u32,
    psi_h: f64,
    psi_v: f64,
    theta_deg: Option<f64>,
    phi_deg: Option<f64>,
}

impl Codebook {
    pub fn new(geometry: ArrayGeometry, s: u32, coverage: Coverage) -> Result<Self> {
        if s == 0 || s > 15 {
            return Err(CoreError::Config(format!(
                "codebook level {s} out of range"
            )));
        }
        Ok(Self {
            s,
            coverage,
            geometry,
        })
    }

    /// Level-`s` codebook with the default transmit array and coverage.
    pub fn standard(s: u32) -> Result<Self> {
        Self::new(ArrayGeometry::for_level(s), s, Coverage::default())
    }

    pub fn side(&self) -> u32 {
        side(self.s)
    }

    /// Number of beams, `4^s`.
    pub fn len(&self) -> usize {
        1usize << (2 * self.s)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cell widths `(d_psi_h, d_psi_v)`.
    pub fn beamwidth(&self) -> (f64, f64) {
        let n = self.side() as f64;
        (
            self.coverage.psi_h.width() / n,
            self.coverage.psi_v.width() / n,
        )
    }

    pub fn center(&self, beam: BeamIndex) -> (f64, f64) {
        let (dh, dv) = self.beamwidth();
        (
            self.coverage.psi_h.lo + (beam.m_h as f64 - 0.5) * dh,
            self.coverage.psi_v.lo + (beam.m_v as f64 - 0.5) * dv,
        )
    }

    pub fn cell(&self, beam: BeamIndex) -> (Interval, Interval) {
        let (dh, dv) = self.beamwidth();
        let lo_h = self.coverage.psi_h.lo + (beam.m_h as f64 - 1.0) * dh;
        let lo_v = self.coverage.psi_v.lo + (beam.m_v as f64 - 1.0) * dv;
        (
            Interval {
                lo: lo_h,
                hi: lo_h + dh,
            },
            Interval {
                lo: lo_v,
                hi: lo_v + dv,
            },
        )
    }

    fn axis_index(&self, lo: f64, width: f64, psi: f64) -> Option<u32> {
        let x = (psi - lo) / width;
        let n = self.side();
        if !x.is_finite() || x < -0.5 || x > n as f64 + 0.5 {
            return None;
        }
        // floor(offset/width + 1/2) with the offset taken from the first beam
        // center is floor(x); the small slack sends boundary ties upward even
        // when rounding lands a hair below the boundary.
        let m = (x + 1e-9).floor() as i64 + 1;
        Some(m.clamp(1, n as i64) as u32)
    }

    /// Beam whose cell contains the wavenumber. Cells are half-open, so a
    /// point on a shared boundary belongs to the higher index.
    pub fn beam_of_wavenumber(&self, psi_h: f64, psi_v: f64) -> Result<BeamIndex> {
        let (dh, dv) = self.beamwidth();
        let m_h = self.axis_index(self.coverage.psi_h.lo, dh, psi_h);
        let m_v = self.axis_index(self.coverage.psi_v.lo, dv, psi_v);
        match (m_h, m_v) {
            (Some(m_h), Some(m_v)) => Ok(BeamIndex {
                s: self.s,
                m_h,
                m_v,
            }),
            _ => Err(CoreError::OutOfCoverage { psi_h, psi_v }),
        }
    }

    pub fn beam_of_angles(&self, theta: f64, phi: f64) -> Result<BeamIndex> {
        let (h, v) = to_wavenumber(theta, phi);
        self.beam_of_wavenumber(h, v)
    }

    /// Beam of the coverage point nearest to the direction; used to center
    /// scans on predictions that may fall outside the coverage.
    pub fn nearest_beam(&self, theta: f64, phi: f64) -> Result<BeamIndex> {
        if !theta.is_finite() || !phi.is_finite() {
            return Err(CoreError::Config(format!(
                "direction ({theta}, {phi}) is not finite"
            )));
        }
        let (h, v) = to_wavenumber(theta, phi);
        let (h, v) = self.coverage.clamp(h, v);
        self.beam_of_wavenumber(h, v)
    }

    /// True when `beam_of_wavenumber` would return `beam`.
    pub fn contains(&self, beam: BeamIndex, psi_h: f64, psi_v: f64) -> bool {
        self.beam_of_wavenumber(psi_h, psi_v)
            .is_ok_and(|b| b == beam)
    }

    pub fn weights(&self, beam: BeamIndex) -> SteeringVector {
        let (h, v) = self.center(beam);
        steering_from_wavenumber(self.geometry, h, v)
    }

    /// `a(psi)^H f_beam` evaluated through the separable array factors.
    pub fn gain(&self, beam: BeamIndex, psi_h: f64, psi_v: f64) -> Complex64 {
        let (ch, cv) = self.center(beam);
        array_factor(self.geometry.n_h, ch - psi_h) * array_factor(self.geometry.n_v, cv - psi_v)
    }

    /// All beams in row-major order.
    pub fn beams(&self) -> impl Iterator<Item = BeamIndex> + '_ {
        let n = self.side();
        let s = self.s;
        (1..=n).flat_map(move |m_v| (1..=n).map(move |m_h| BeamIndex { s, m_h, m_v }))
    }

    /// Writes one CSV row per beam center with its principal-branch angles
    /// (blank where the center has no real direction).
    pub fn export_centers<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for beam in self.beams() {
            let (psi_h, psi_v) = self.center(beam);
            let ang = from_wavenumber(psi_h, psi_v);
            out.serialize(CenterRow {
                s: self.s,
                m_h: beam.m_h,
                m_v: beam.m_v,
                psi_h,
                psi_v,
                theta_deg: ang.map(|a| a.0.to_degrees()),
                phi_deg: ang.map(|a| a.1.to_degrees()),
            })?;
        }
        out.flush()?;
        Ok(())
    }
}
