//! Synthetic UAV trajectories, a pinhole camera with a jittered detector,
//! patch rendering, and impairment plans (SNR, modality loss, echo timing
//! offsets).
//!
//! Positions live in the base-station frame: `x` is array broadside, `y`
//! the horizontal array axis and `z` up, so direction `(theta, phi)` is
//! `(cos phi cos theta, cos phi sin theta, sin phi)`.

use std::io::{Read, Write};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bounds::AngleBounds;
use crate::echo::UavState;
use crate::{CoreError, Result};

pub const PATCH_SIDE: usize = 32;

pub fn direction(theta: f64, phi: f64) -> Vector3<f64> {
    Vector3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin())
}

pub fn position(state: &UavState) -> Vector3<f64> {
    direction(state.theta, state.phi) * state.d
}

/// State seen from the base station for a position and velocity. `v_par`
/// is the range rate (positive when receding).
pub fn state_from_motion(t: f64, pos: Vector3<f64>, vel: Vector3<f64>) -> UavState {
    let d = pos.norm();
    let u = pos / d;
    let v_par = vel.dot(&u);
    UavState {
        theta: pos.y.atan2(pos.x),
        phi: (pos.z / d).clamp(-1.0, 1.0).asin(),
        d,
        v_par,
        v_perp: (vel - u * v_par).norm(),
        t,
    }
}

/// Region the generators keep the UAV in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub bounds: AngleBounds,
    pub d_min: f64,
    pub d_max: f64,
    pub max_speed: f64,
}

impl Default for Envelope {
    /// Camera sector shrunk by 1 degree, 30..400 m, at most 27 m/s.
    fn default() -> Self {
        Self {
            bounds: AngleBounds::default()
                .shrink(1f64.to_radians())
                .expect("sector wider than margin"),
            d_min: 30.0,
            d_max: 400.0,
            max_speed: 27.0,
        }
    }
}

impl Envelope {
    pub fn contains(&self, pos: &Vector3<f64>) -> bool {
        let s = state_from_motion(0.0, *pos, Vector3::zeros());
        (self.d_min..=self.d_max).contains(&s.d) && self.bounds.contains(s.theta, s.phi)
    }

    /// Uniform in angles and range.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        let b = &self.bounds;
        let theta = rng.random_range(b.theta_min..b.theta_max);
        let phi = rng.random_range(b.phi_min..b.phi_max);
        direction(theta, phi) * rng.random_range(self.d_min..self.d_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Profile {
    Hover,
    LinearPass {
        speed: f64,
    },
    /// Circles the base station at constant range and elevation, turning
    /// back at the sector edges.
    Orbit {
        speed: f64,
    },
    /// Straight legs between random waypoints, each leg at a random speed
    /// in `[min_speed, max_speed]`.
    RandomWaypoint {
        min_speed: f64,
        max_speed: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<UavState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at time `t` by linear interpolation of position between
    /// samples (clamped to the ends); velocity is that of the segment.
    pub fn state_at(&self, t: f64) -> UavState {
        let n = self.states.len();
        if n == 1 {
            let mut s = self.states[0];
            s.t = t;
            return s;
        }
        let t0 = self.states[0].t;
        let x = ((t - t0) / self.dt).clamp(0.0, (n - 1) as f64);
        let k = (x.floor() as usize).min(n - 2);
        let frac = x - k as f64;
        let (a, b) = (position(&self.states[k]), position(&self.states[k + 1]));
        let vel = (b - a) / self.dt;
        state_from_motion(t, a + (b - a) * frac, vel)
    }
}

fn from_positions(pos: &[Vector3<f64>], dt: f64) -> Trajectory {
    let n = pos.len();
    let states = (0..n)
        .map(|i| {
            let vel = if n < 2 {
                Vector3::zeros()
            } else if i + 1 < n {
                (pos[i + 1] - pos[i]) / dt
            } else {
                (pos[i] - pos[i - 1]) / dt
            };
            state_from_motion(i as f64 * dt, pos[i], vel)
        })
        .collect();
    Trajectory { states, dt }
}

/// Builds `n_steps` states `dt` apart inside `envelope`.
pub fn generate_trajectory(
    seed: u64,
    profile: Profile,
    n_steps: usize,
    dt: f64,
    envelope: &Envelope,
) -> Result<Trajectory> {
    if n_steps == 0 || !(dt > 0.0) {
        return Err(CoreError::Config(format!(
            "trajectory needs steps and dt > 0 (got {n_steps}, {dt})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pos = match profile {
        Profile::Hover => vec![envelope.sample(&mut rng); n_steps],
        Profile::LinearPass { speed } => {
            check_speed(speed, envelope)?;
            linear_pass(&mut rng, speed, n_steps, dt, envelope)?
        }
        Profile::Orbit { speed } => {
            check_speed(speed, envelope)?;
            orbit(&mut rng, speed, n_steps, dt, envelope)
        }
        Profile::RandomWaypoint {
            min_speed,
            max_speed,
        } => {
            check_speed(max_speed, envelope)?;
            if !(0.0..=max_speed).contains(&min_speed) {
                return Err(CoreError::Config(format!(
                    "speed range [{min_speed}, {max_speed}]"
                )));
            }
            random_waypoint(&mut rng, min_speed, max_speed, n_steps, dt, envelope)
        }
    };
    Ok(from_positions(&pos, dt))
}

fn check_speed(speed: f64, envelope: &Envelope) -> Result<()> {
    if !(0.0..=envelope.max_speed).contains(&speed) {
        return Err(CoreError::Config(format!(
            "speed {speed} outside [0, {}]",
            envelope.max_speed
        )));
    }
    Ok(())
}

fn linear_pass<R: Rng>(
    rng: &mut R,
    speed: f64,
    n: usize,
    dt: f64,
    env: &Envelope,
) -> Result<Vec<Vector3<f64>>> {
    let half = 0.5 * (n - 1) as f64;
    for _ in 0..1000 {
        let mid = env.sample(rng);
        let dir = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let norm = v.norm();
            if norm > 0.1 && norm <= 1.0 {
                break v / norm;
            }
        };
        let pos: Vec<_> = (0..n)
            .map(|i| mid + dir * (speed * dt * (i as f64 - half)))
            .collect();
        if pos.iter().all(|p| env.contains(p)) {
            return Ok(pos);
        }
    }
    Err(CoreError::Config(format!(
        "no straight pass of {n} steps at {speed} m/s fits the envelope"
    )))
}

fn orbit<R: Rng>(rng: &mut R, speed: f64, n: usize, dt: f64, env: &Envelope) -> Vec<Vector3<f64>> {
    let b = &env.bounds;
    let phi = rng.random_range(b.phi_min..b.phi_max);
    let d = rng.random_range(env.d_min..env.d_max);
    let radius = d * phi.cos();
    let omega = speed / radius;
    let mut theta = rng.random_range(b.theta_min..b.theta_max);
    let mut sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(direction(theta, phi) * d);
        let mut next = theta + sign * omega * dt;
        // Reflect at the sector edges.
        if next > b.theta_max {
            next = 2.0 * b.theta_max - next;
            sign = -sign;
        } else if next < b.theta_min {
            next = 2.0 * b.theta_min - next;
            sign = -sign;
        }
        theta = next;
    }
    out
}

fn random_waypoint<R: Rng>(
    rng: &mut R,
    v_lo: f64,
    v_hi: f64,
    n: usize,
    dt: f64,
    env: &Envelope,
) -> Vec<Vector3<f64>> {
    let mut p = env.sample(rng);
    let mut target = env.sample(rng);
    let mut speed = rng.random_range(v_lo..=v_hi);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(p);
        let mut moved = false;
        for _ in 0..16 {
            let to = target - p;
            let step = speed * dt;
            let next = if to.norm() <= step {
                target
            } else {
                p + to / to.norm() * step
            };
            if env.contains(&next) && next != target {
                p = next;
                moved = true;
                break;
            }
            if next == target && env.contains(&next) {
                p = next;
                moved = true;
                target = env.sample(rng);
                speed = rng.random_range(v_lo..=v_hi);
                break;
            }
            // Leg bulges out of the sector; pick another waypoint.
            target = env.sample(rng);
        }
        if !moved {
            // Hold position for one step.
            target = env.sample(rng);
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    theta_deg: f64,
    phi_deg: f64,
    d: f64,
    v_par: f64,
    v_perp: f64,
}

pub fn export_trajectory_csv<W: Write>(traj: &Trajectory, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in &traj.states {
        out.serialize(TrajectoryRow {
            t: s.t,
            theta_deg: s.theta.to_degrees(),
            phi_deg: s.phi.to_degrees(),
            d: s.d,
            v_par: s.v_par,
            v_perp: s.v_perp,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Reads trajectory rows as written by [`export_trajectory_csv`]; `dt` is
/// taken from the first two timestamps.
pub fn import_trajectory_csv<R: Read>(r: R) -> Result<Trajectory> {
    let mut states = Vec::new();
    for row in csv::Reader::from_reader(r).deserialize() {
        let row: TrajectoryRow = row?;
        if !(row.d > 0.0) {
            return Err(CoreError::Parse(format!(
                "non-positive range {} at t = {}",
                row.d, row.t
            )));
        }
        states.push(UavState {
            theta: row.theta_deg.to_radians(),
            phi: row.phi_deg.to_radians(),
            d: row.d,
            v_par: row.v_par,
            v_perp: row.v_perp,
            t: row.t,
        });
    }
    if states.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let dt = if states.len() > 1 {
        states[1].t - states[0].t
    } else {
        1.0 / 30.0
    };
    if !(dt > 0.0) {
        return Err(CoreError::Parse("timestamps must increase".into()));
    }
    Ok(Trajectory { states, dt })
}

/// Normalized detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_c: f64,
    pub y_c: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x_c: f64, y_c: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x_c, y_c, w, h };
        let ok = [x_c, y_c, w, h].iter().all(|v| v.is_finite())
            && w > 0.0
            && h > 0.0
            && w <= 1.0
            && h <= 1.0;
        let overlaps = x_c + w / 2.0 > 0.0
            && x_c - w / 2.0 < 1.0
            && y_c + h / 2.0 > 0.0
            && y_c - h / 2.0 < 1.0;
        if !ok || !overlaps {
            return Err(CoreError::Config(format!("bounding box {b:?}")));
        }
        Ok(b)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_c, self.y_c, self.w, self.h]
    }
}

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Pixel window `[c0, c1) x [r0, r1)` for a box, clamped to the image.
pub fn crop_window(
    b: &BoundingBox,
    width: usize,
    height: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (w, h) = (width as f64, height as f64);
    let c0 = (w * (b.x_c - b.w / 2.0)).floor().max(0.0) as usize;
    let c1 = ((w * (b.x_c + b.w / 2.0)).ceil().min(w)).max(0.0) as usize;
    let r0 = (h * (b.y_c - b.h / 2.0)).floor().max(0.0) as usize;
    let r1 = ((h * (b.y_c + b.h / 2.0)).ceil().min(h)).max(0.0) as usize;
    if c1 <= c0 || r1 <= r0 {
        return Err(CoreError::EmptyCrop);
    }
    Ok((c0, c1, r0, r1))
}

/// Crops the box region and resamples it bilinearly to 32x32.
pub fn crop_patch(image: &Image, b: &BoundingBox) -> Result<Image> {
    let (c0, c1, r0, r1) = crop_window(b, image.width, image.height)?;
    let (cw, ch) = ((c1 - c0) as f64, (r1 - r0) as f64);
    let mut out = Image::new(PATCH_SIDE, PATCH_SIDE);
    for row in 0..PATCH_SIDE {
        for col in 0..PATCH_SIDE {
            // Pixel-center mapping into the crop.
            let x = c0 as f64
                + ((col as f64 + 0.5) * cw / PATCH_SIDE as f64 - 0.5).clamp(0.0, cw - 1.0);
            let y = r0 as f64
                + ((row as f64 + 0.5) * ch / PATCH_SIDE as f64 - 0.5).clamp(0.0, ch - 1.0);
            out.data[row * PATCH_SIDE + col] = bilinear(image, x, y);
        }
    }
    Ok(out)
}

fn bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.at(x0, y0) * (1.0 - fx) + img.at(x1, y0) * fx;
    let bottom = img.at(x0, y1) * (1.0 - fx) + img.at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Pinhole camera looking along `look` from `position` (base-station frame).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: [f64; 3],
    /// Optical axis as base-station angles `(theta, phi)`.
    pub look: (f64, f64),
    pub fov_h: f64,
    pub fov_v: f64,
    pub width: usize,
    pub height: usize,
    /// Std of the box-center jitter in normalized image units.
    pub box_jitter: f64,
    /// Relative std of the box extents.
    pub size_jitter: f64,
    pub pixel_noise: f64,
    /// Camera distance at which the box is `reference_box` wide.
    pub reference_range: f64,
    pub reference_box: f64,
    /// Blob standard deviation in patch pixels at the reference range.
    pub blob_sigma: f64,
    /// Sector the camera is calibrated to report.
    pub bounds: AngleBounds,
}

impl Default for CameraModel {
    /// 100 m behind the base station on the sector axis, 960x540, fields of
    /// view wide enough to see the whole sector beyond 30 m.
    fn default() -> Self {
        let bounds = AngleBounds::default();
        let look = bounds.midpoint();
        let p = -direction(look.0, look.1) * 100.0;
        Self {
            position: [p.x, p.y, p.z],
            look,
            fov_h: 60f64.to_radians(),
            fov_v: 80f64.to_radians(),
            width: 960,
            height: 540,
            box_jitter: 0.002,
            size_jitter: 0.01,
            pixel_noise: 0.05,
            reference_range: 100.0,
            reference_box: 0.2,
            blob_sigma: 6.0,
            bounds,
        }
    }
}

impl CameraModel {
    /// Forward, right and up unit vectors.
    fn frame(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let f = direction(self.look.0, self.look.1);
        let z = Vector3::new(0.0, 0.0, 1.0);
        let right = f.cross(&z).normalize();
        let up = right.cross(&f);
        (f, right, up)
    }

    /// Normalized image coordinates and camera distance, or `None` when the
    /// point is behind the camera.
    pub fn project(&self, pos: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let (f, r, u) = self.frame();
        let rel = pos - Vector3::from(self.position);
        let depth = rel.dot(&f);
        if depth <= 0.0 {
            return None;
        }
        let x = 0.5 + 0.5 * rel.dot(&r) / depth / (self.fov_h / 2.0).tan();
        let y = 0.5 - 0.5 * rel.dot(&u) / depth / (self.fov_v / 2.0).tan();
        Some((x, y, rel.norm()))
    }
}

/// Detector output and rendered patch for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub bbox: BoundingBox,
    pub patch: Image,
}

/// Projects the UAV into the camera and renders its patch. `None` when the
/// jittered box center leaves the image.
pub fn project_to_camera<R: Rng>(
    state: &UavState,
    camera: &CameraModel,
    rng: &mut R,
) -> Option<Observation> {
    let (x, y, dist) = camera.project(&position(state))?;
    let jitter = Normal::new(0.0, camera.box_jitter.max(0.0)).ok()?;
    let size_noise = Normal::new(1.0, camera.size_jitter.max(0.0)).ok()?;
    let (jx, jy): (f64, f64) = (jitter.sample(rng), jitter.sample(rng));
    let (x_c, y_c) = (x + jx, y + jy);
    if !(0.0..=1.0).contains(&x_c) || !(0.0..=1.0).contains(&y_c) {
        return None;
    }
    let scale = camera.reference_range / dist;
    let size = (camera.reference_box * scale * size_noise.sample(rng)).clamp(0.02, 0.5);
    let bbox = BoundingBox {
        x_c,
        y_c,
        w: size,
        h: size,
    };
    // The blob sits where the true projection falls inside the crop, so the
    // patch carries the detector's centering error.
    let off_x = -jx / size * PATCH_SIDE as f64;
    let off_y = -jy / size * PATCH_SIDE as f64;
    let patch = render_patch(
        camera.blob_sigma * scale,
        off_x,
        off_y,
        camera.pixel_noise,
        rng,
    );
    Some(Observation { bbox, patch })
}

/// Gaussian blob of std `sigma` pixels offset from the patch center, plus
/// white pixel noise.
pub fn render_patch<R: Rng>(sigma: f64, off_x: f64, off_y: f64, noise: f64, rng: &mut R) -> Image {
    let mut img = Image::new(PATCH_SIDE, PATCH_SIDE);
    let c = (PATCH_SIDE as f64 - 1.0) / 2.0;
    let s2 = 2.0 * sigma.max(1e-3).powi(2);
    let noise = Normal::new(0.0, noise.max(0.0)).expect("finite noise std");
    for row in 0..PATCH_SIDE {
        for col in 0..PATCH_SIDE {
            let dx = col as f64 - c - off_x;
            let dy = row as f64 - c - off_y;
            img.data[row * PATCH_SIDE + col] =
                (-(dx * dx + dy * dy) / s2).exp() + noise.sample(rng);
        }
    }
    img
}

/// Fraction of echo slots dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPreset {
    None,
    Few,
    Many,
    Fraction(f64),
}

impl LossPreset {
    pub fn fraction(&self) -> f64 {
        match *self {
            LossPreset::None => 0.0,
            LossPreset::Few => 0.05,
            LossPreset::Many => 0.20,
            LossPreset::Fraction(f) => f.clamp(0.0, 1.0),
        }
    }
}

/// Echo timing relative to the frame, as a fraction of the half frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetCase {
    None,
    /// Uniform in `[-t, 0]`.
    Delay,
    /// Uniform in `[-t, t]`.
    Random,
    /// Uniform in `[0, t]`.
    Advance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentPlan {
    pub snr_db: Vec<f64>,
    pub echo_loss: Vec<bool>,
    pub vision_invalid: Vec<bool>,
    /// Echo timestamp minus frame timestamp, seconds.
    pub sync_offset: Vec<f64>,
}

impl ImpairmentPlan {
    /// No loss, no offset, constant SNR.
    pub fn clean(n: usize, snr_db: f64) -> Self {
        Self {
            snr_db: vec![snr_db; n],
            echo_loss: vec![false; n],
            vision_invalid: vec![false; n],
            sync_offset: vec![0.0; n],
        }
    }

    /// Drops exactly `round(fraction * n)` echo slots chosen by `seed` and
    /// draws per-slot offsets within `half_width` seconds.
    pub fn build(
        n: usize,
        snr_db: f64,
        loss: LossPreset,
        offset: OffsetCase,
        half_width: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plan = Self::clean(n, snr_db);
        let k = (loss.fraction() * n as f64).round() as usize;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..k.min(n)] {
            plan.echo_loss[i] = true;
        }
        let (lo, hi) = match offset {
            OffsetCase::None => (0.0, 0.0),
            OffsetCase::Delay => (-half_width, 0.0),
            OffsetCase::Random => (-half_width, half_width),
            OffsetCase::Advance => (0.0, half_width),
        };
        for o in plan.sync_offset.iter_mut() {
            let u: f64 = rng.random_range(0.0..1.0);
            *o = lo + u * (hi - lo);
        }
        plan
    }

    pub fn len(&self) -> usize {
        self.snr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty()
    }
}

/// Everything simulated about one frame slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub t: f64,
    pub truth: UavState,
    /// State at the echo timestamp.
    pub echo_state: UavState,
    pub observation: Option<Observation>,
    pub echo_valid: bool,
    pub snr_db: f64,
}

/// Frames of a trajectory with camera observations and no impairments.
pub fn observe<R: Rng>(
    traj: &Trajectory,
    camera: &CameraModel,
    snr_db: f64,
    rng: &mut R,
) -> Vec<SlotRecord> {
    traj.states
        .iter()
        .map(|s| SlotRecord {
            t: s.t,
            truth: *s,
            echo_state: *s,
            observation: project_to_camera(s, camera, rng),
            echo_valid: true,
            snr_db,
        })
        .collect()
}

/// Applies a plan slot by slot. Echo states are re-evaluated on the
/// trajectory at the offset timestamps.
pub fn apply_impairments(
    records: &[SlotRecord],
    traj: &Trajectory,
    plan: &ImpairmentPlan,
) -> Result<Vec<SlotRecord>> {
    if plan.len() != records.len() {
        return Err(CoreError::Config(format!(
            "plan covers {} slots, stream has {}",
            plan.len(),
            records.len()
        )));
    }
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut out = r.clone();
            out.snr_db = plan.snr_db[i];
            if plan.echo_loss[i] {
                out.echo_valid = false;
            }
            if plan.vision_invalid[i] {
                out.observation = None;
            }
            if plan.sync_offset[i] != 0.0 {
                out.echo_state = traj.state_at(r.t + plan.sync_offset[i]);
            }
            out
        })
        .collect())
}

/// Scenario part of the experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub profiles: Vec<Profile>,
    pub trajectories: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub envelope: Envelope,
    pub camera: CameraModel,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            profiles: vec![
                Profile::LinearPass { speed: 20.0 },
                Profile::Orbit { speed: 15.0 },
                Profile::RandomWaypoint {
                    min_speed: 5.0,
                    max_speed: 27.0,
                },
                Profile::Hover,
            ],
            trajectories: 40,
            steps: 60,
            dt: 1.0 / 30.0,
            seed: 1,
            envelope: Envelope::default(),
            camera: CameraModel::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Trajectory `i`, cycling through the profiles, seeded by
    /// `(seed, i)`.
    pub fn trajectory(&self, i: usize) -> Result<Trajectory> {
        if self.profiles.is_empty() {
            return Err(CoreError::Config("no trajectory profiles".into()));
        }
        let profile = self.profiles[i % self.profiles.len()];
        generate_trajectory(
            derive_seed(self.seed, i as u64),
            profile,
            self.steps,
            self.dt,
            &self.envelope,
        )
    }
}

/// Mixes a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 1.0 / 30.0;

    #[test]
    fn hover_is_still() {
        let t = generate_trajectory(3, Profile::Hover, 50, DT, &Envelope::default()).unwrap();
        assert!(t.states.iter().all(|s| s.v_par == 0.0 && s.v_perp == 0.0));
    }

    #[test]
    fn linear_pass_step_length() {
        let t = generate_trajectory(
            4,
            Profile::LinearPass { speed: 20.0 },
            120,
            DT,
            &Envelope::default(),
        )
        .unwrap();
        for w in t.states.windows(2) {
            let step = (position(&w[1]) - position(&w[0])).norm();
            assert!((step - 20.0 * DT).abs() < 1e-9, "{step}");
        }
    }

    #[test]
    fn waypoint_speeds_respect_envelope() {
        let env = Envelope::default();
        let p = Profile::RandomWaypoint {
            min_speed: 5.0,
            max_speed: 27.0,
        };
        let t = generate_trajectory(5, p, 1000, DT, &env).unwrap();
        for s in &t.states {
            assert!(s.v_par.hypot(s.v_perp) <= 27.0 + 1e-9);
            assert!(env.contains(&position(s)));
        }
    }

    #[test]
    fn tangential_step_matches_arctan() {
        let env = Envelope::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p0 = env.sample(&mut rng);
            // A velocity perpendicular to the line of sight.
            let v = p0.cross(&Vector3::new(0.0, 0.0, 1.0)).normalize() * 18.0;
            let t = from_positions(&[p0, p0 + v * DT], DT);
            let s0 = t.states[0];
            assert!(s0.v_par.abs() < 1e-9);
            let swept = position(&s0).angle(&position(&t.states[1]));
            let want = crate::analysis::angular_step(s0.v_perp, DT, s0.d).unwrap();
            assert!((swept - want).abs() < 1e-9);
        }
    }

    #[test]
    fn crop_examples() {
        let img = Image::new(960, 540);
        let full = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert_eq!(crop_window(&full, 960, 540).unwrap(), (0, 960, 0, 540));
        let center = BoundingBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(
            crop_window(&center, 960, 540).unwrap(),
            (384, 576, 216, 324)
        );
        let corner = BoundingBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        assert_eq!(crop_window(&corner, 960, 540).unwrap(), (0, 96, 0, 54));
        assert_eq!(crop_patch(&img, &corner).unwrap().data.len(), 32 * 32);
    }

    #[test]
    fn crop_preserves_column_order() {
        let mut img = Image::new(64, 48);
        img.data
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i % 64) as f64);
        let full = BoundingBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let p = crop_patch(&img, &full).unwrap();
        // Column ramp stays monotone after resampling.
        for row in 0..PATCH_SIDE {
            for col in 1..PATCH_SIDE {
                assert!(p.at(col, row) > p.at(col - 1, row));
            }
        }
    }

    #[test]
    fn optical_axis_projects_to_center() {
        let cam = CameraModel::default();
        let st = UavState {
            theta: cam.look.0,
            phi: cam.look.1,
            d: 150.0,
            v_par: 0.0,
            v_perp: 0.0,
            t: 0.0,
        };
        let (x, y, dist) = cam.project(&position(&st)).unwrap();
        assert!((x - 0.5).abs() < 1e-12 && (y - 0.5).abs() < 1e-12);
        assert!((dist - 250.0).abs() < 1e-9);
    }

    #[test]
    fn blob_radius_halves_with_double_range() {
        let cam = CameraModel {
            pixel_noise: 0.0,
            box_jitter: 0.0,
            size_jitter: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at = |dist: f64, rng: &mut ChaCha8Rng| {
            // Camera distance = d + 100 on the axis.
            let st = UavState {
                theta: cam.look.0,
                phi: cam.look.1,
                d: dist - 100.0,
                v_par: 0.0,
                v_perp: 0.0,
                t: 0.0,
            };
            project_to_camera(&st, &cam, rng).unwrap()
        };
        let near = at(200.0, &mut rng);
        let far = at(400.0, &mut rng);
        // Blob std from the second moment about the center.
        let sigma = |p: &Image| {
            let c = 15.5;
            let (mut m, mut w) = (0.0, 0.0);
            for row in 0..PATCH_SIDE {
                for col in 0..PATCH_SIDE {
                    let v = p.at(col, row);
                    m += v * ((col as f64 - c).powi(2) + (row as f64 - c).powi(2));
                    w += v;
                }
            }
            (m / w / 2.0).sqrt()
        };
        assert!((sigma(&near.patch) / sigma(&far.patch) - 2.0).abs() < 0.01);
        assert!((near.bbox.w / far.bbox.w - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jitter_past_edge_is_invisible() {
        let cam = CameraModel {
            box_jitter: 0.05,
            ..Default::default()
        };
        // Place the target exactly on the left image edge.
        let (f, r, _) = cam.frame();
        let depth = 300.0;
        let lateral = -depth * (cam.fov_h / 2.0).tan();
        let pos = Vector3::from(cam.position) + f * depth + r * lateral;
        let st = state_from_motion(0.0, pos, Vector3::zeros());
        let (x, _, _) = cam.project(&pos).unwrap();
        assert!(x.abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut invisible = 0;
        for _ in 0..200 {
            if project_to_camera(&st, &cam, &mut rng).is_none() {
                invisible += 1;
            }
        }
        // Outward jitter is half the draws.
        assert!((70..130).contains(&invisible), "{invisible}");
    }

    #[test]
    fn impairment_presets() {
        let few = ImpairmentPlan::build(200, 0.0, LossPreset::Few, OffsetCase::None, 0.0, 1);
        assert_eq!(few.echo_loss.iter().filter(|&&x| x).count(), 10);
        let many = ImpairmentPlan::build(200, 0.0, LossPreset::Many, OffsetCase::None, 0.0, 1);
        assert_eq!(many.echo_loss.iter().filter(|&&x| x).count(), 40);
        let zero_width =
            ImpairmentPlan::build(50, 0.0, LossPreset::None, OffsetCase::Random, 0.0, 2);
        assert!(zero_width.sync_offset.iter().all(|&o| o == 0.0));
        let delay = ImpairmentPlan::build(50, 0.0, LossPreset::None, OffsetCase::Delay, 0.01, 2);
        assert!(delay
            .sync_offset
            .iter()
            .all(|&o| (-0.01..=0.0).contains(&o)));
    }

    #[test]
    fn empty_plan_is_identity() {
        let cfg = ScenarioConfig::default();
        let t = cfg.trajectory(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rec = observe(&t, &cfg.camera, 0.0, &mut rng);
        let same = apply_impairments(&rec, &t, &ImpairmentPlan::clean(rec.len(), 0.0)).unwrap();
        assert_eq!(rec, same);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = ScenarioConfig::default();
        let t = cfg.trajectory(2).unwrap();
        let mut buf = Vec::new();
        export_trajectory_csv(&t, &mut buf).unwrap();
        let back = import_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.states.iter().zip(&back.states) {
            assert!((a.theta - b.theta).abs() < 1e-12 && (a.d - b.d).abs() < 1e-9);
        }
    }

    #[test]
    fn config_json_defaults_fill_in() {
        let c =
            ScenarioConfig::from_json(r#"{"trajectories": 3, "profiles": [{"kind": "hover"}]}"#)
                .unwrap();
        assert_eq!(c.trajectories, 3);
        assert_eq!(c.profiles, vec![Profile::Hover]);
        assert_eq!(c.steps, ScenarioConfig::default().steps);
    }
}
