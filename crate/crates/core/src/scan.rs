//! Diffusive candidate-set scanning around a predicted beam, the
//! hierarchical fallback, and the expected-overhead model.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};

use crate::beamspace::{side, ArrayGeometry, BeamIndex, Codebook, Coverage, CHILD_ORDER};
use crate::dsp::predicted_peak_ratio;
use crate::echo::{EchoConfig, UavState};
use crate::{CoreError, Result};

/// Rings of beams around a center, scanned in order. Entries outside the
/// codebook are dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSets {
    pub center: BeamIndex,
    pub sets: [Vec<BeamIndex>; 4],
}

impl CandidateSets {
    pub fn sizes(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.sets[i].len())
    }

    pub fn total(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// 1-based set number containing `beam`.
    pub fn set_of(&self, beam: BeamIndex) -> Option<usize> {
        self.sets
            .iter()
            .position(|s| s.contains(&beam))
            .map(|i| i + 1)
    }
}

/// Center, its 4-neighbours, its diagonals, then the Chebyshev-distance-2
/// ring, each in row-major order (`m_v` then `m_h`).
pub fn candidate_sets(center: BeamIndex) -> CandidateSets {
    let n = side(center.s) as i64;
    let mut sets: [Vec<BeamIndex>; 4] = Default::default();
    for dv in -2i64..=2 {
        for dh in -2i64..=2 {
            let (m_h, m_v) = (center.m_h as i64 + dh, center.m_v as i64 + dv);
            if !(1..=n).contains(&m_h) || !(1..=n).contains(&m_v) {
                continue;
            }
            let set = match (dh.abs().max(dv.abs()), dh.abs() + dv.abs()) {
                (0, _) => 0,
                (1, 1) => 1,
                (1, _) => 2,
                _ => 3,
            };
            sets[set].push(BeamIndex {
                s: center.s,
                m_h: m_h as u32,
                m_v: m_v as u32,
            });
        }
    }
    CandidateSets { center, sets }
}

/// Decides whether illuminating a beam reveals the target.
pub trait DetectionOracle {
    fn detects(&self, beam: BeamIndex) -> bool;
}

/// Detects iff the target wavenumber lies in the beam's cell.
#[derive(Debug, Clone, Copy)]
pub struct GeometricOracle {
    pub coverage: Coverage,
    pub psi: (f64, f64),
}

impl GeometricOracle {
    pub fn new(coverage: Coverage, psi: (f64, f64)) -> Self {
        Self { coverage, psi }
    }

    pub fn for_state(coverage: Coverage, state: &UavState) -> Self {
        Self::new(coverage, state.wavenumber())
    }
}

/// Target cell at level `s` under `coverage`.
pub fn target_beam(coverage: Coverage, s: u32, psi: (f64, f64)) -> Result<BeamIndex> {
    Codebook::new(ArrayGeometry::for_level(s), s, coverage)?.beam_of_wavenumber(psi.0, psi.1)
}

impl DetectionOracle for GeometricOracle {
    fn detects(&self, beam: BeamIndex) -> bool {
        target_beam(self.coverage, beam.s, self.psi).is_ok_and(|b| b == beam)
    }
}

/// Cell membership plus a link check: the echo through the beam (with the
/// array of the beam's own level) must clear the range-peak threshold.
#[derive(Debug, Clone, Copy)]
pub struct SnrOracle {
    pub geometric: GeometricOracle,
    pub state: UavState,
    pub echo: EchoConfig,
    pub threshold: f64,
}

impl SnrOracle {
    pub fn new(coverage: Coverage, state: UavState, echo: EchoConfig, threshold: f64) -> Self {
        Self {
            geometric: GeometricOracle::for_state(coverage, &state),
            state,
            echo,
            threshold,
        }
    }

    pub fn peak_ratio(&self, beam: BeamIndex) -> f64 {
        let Ok(cb) = Codebook::new(
            ArrayGeometry::for_level(beam.s),
            beam.s,
            self.geometric.coverage,
        ) else {
            return 0.0;
        };
        let (h, v) = self.geometric.psi;
        predicted_peak_ratio(
            &self.state,
            cb.gain(beam, h, v),
            cb.geometry.len(),
            &self.echo,
        )
    }
}

impl DetectionOracle for SnrOracle {
    fn detects(&self, beam: BeamIndex) -> bool {
        self.geometric.detects(beam) && self.peak_ratio(beam) >= self.threshold
    }
}

/// Which candidate set produced the detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SetHit {
    Set(u8),
    End,
}

impl Serialize for SetHit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SetHit::Set(i) => s.serialize_u8(*i),
            SetHit::End => s.serialize_str("end"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTrace {
    /// Every illumination in order, fallback beams included.
    pub beams_tried: Vec<BeamIndex>,
    /// Position in `beams_tried` of the detecting beam.
    pub detected_at: Option<usize>,
    pub fell_back: bool,
    pub scans_used: usize,
    pub set_hit: SetHit,
}

impl ScanTrace {
    pub fn detected_beam(&self) -> Option<BeamIndex> {
        self.detected_at.map(|i| self.beams_tried[i])
    }
}

/// Walks the tree from level 1 to `s`; returns every illumination and the
/// level at which no child detected, if any.
fn descend<O: DetectionOracle + ?Sized>(oracle: &O, s: u32) -> (Vec<BeamIndex>, Option<u32>) {
    let mut tried = Vec::new();
    let mut cell: Option<BeamIndex> = None;
    for level in 1..=s {
        let children = match cell {
            None => CHILD_ORDER.map(|(m_h, m_v)| BeamIndex { s: 1, m_h, m_v }),
            Some(c) => c.children(),
        };
        cell = None;
        for child in children {
            tried.push(child);
            if oracle.detects(child) {
                cell = Some(child);
                break;
            }
        }
        if cell.is_none() {
            return (tried, Some(level));
        }
    }
    (tried, None)
}

/// Scans the four child beams per level from level 1 down to `s`.
pub fn hierarchical_scan<O: DetectionOracle + ?Sized>(oracle: &O, s: u32) -> Result<ScanTrace> {
    let (tried, failed) = descend(oracle, s);
    if let Some(level) = failed {
        return Err(CoreError::ExhaustedTree { level });
    }
    let n = tried.len();
    Ok(ScanTrace {
        beams_tried: tried,
        detected_at: Some(n - 1),
        fell_back: true,
        scans_used: n,
        set_hit: SetHit::End,
    })
}

/// Scans the candidate sets in order and falls back to the hierarchical
/// scan when none detects. A fallback that exhausts its tree leaves
/// `detected_at` empty; the illuminations up to that point still count.
pub fn scan<O: DetectionOracle + ?Sized>(oracle: &O, sets: &CandidateSets) -> ScanTrace {
    let mut tried = Vec::with_capacity(sets.total());
    for (i, set) in sets.sets.iter().enumerate() {
        for &beam in set {
            tried.push(beam);
            if oracle.detects(beam) {
                let n = tried.len();
                return ScanTrace {
                    beams_tried: tried,
                    detected_at: Some(n - 1),
                    fell_back: false,
                    scans_used: n,
                    set_hit: SetHit::Set(i as u8 + 1),
                };
            }
        }
    }
    let (more, failed) = descend(oracle, sets.center.s);
    tried.extend(more);
    let n = tried.len();
    ScanTrace {
        beams_tried: tried,
        detected_at: failed.is_none().then(|| n - 1),
        fell_back: true,
        scans_used: n,
        set_hit: SetHit::End,
    }
}

/// Illuminations the hierarchical scan spends reaching `beam`: at each
/// level, the detecting child's position in the child order.
pub fn hierarchical_cost(beam: BeamIndex) -> usize {
    let mut cost = 0;
    let mut b = Some(beam);
    while let Some(cur) = b {
        let (_, _, b_h, b_v) = cur.decompose();
        cost += CHILD_ORDER
            .iter()
            .position(|&c| c == (b_h, b_v))
            .expect("child offset")
            + 1;
        b = cur.parent();
    }
    cost
}

/// Expected scans of the hierarchical fallback, `H(s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackCost {
    /// `2.5 s`: mean child position 2.5 per level for uniform targets.
    Linear,
    /// `log2 K = 2 s`.
    LogK,
    /// Exact mean of [`hierarchical_cost`] over the cells outside the
    /// candidate sets, all equally likely. Falls back to `Linear` when the
    /// sets cover the codebook.
    Conditional,
    Fixed(f64),
}

/// How the expected position inside a candidate set is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QConvention {
    /// `q_i = sum_{j<i} n_j + n_i / 2` for `i >= 2`.
    HalfSet,
    /// `q_i = sum_{j<i} n_j + (n_i + 1) / 2`, the mean of a uniform 1-based
    /// position among `n_i` beams.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverheadModel {
    pub set_sizes: [usize; 4],
    pub fallback: f64,
    pub convention: QConvention,
}

impl OverheadModel {
    pub fn for_center(center: BeamIndex, fallback: FallbackCost, convention: QConvention) -> Self {
        let sets = candidate_sets(center);
        let s = center.s as f64;
        let fallback = match fallback {
            FallbackCost::Linear => 2.5 * s,
            FallbackCost::LogK => 2.0 * s,
            FallbackCost::Fixed(h) => h,
            FallbackCost::Conditional => conditional_fallback_cost(&sets).unwrap_or(2.5 * s),
        };
        Self {
            set_sizes: sets.sizes(),
            fallback,
            convention,
        }
    }

    /// Untruncated sizes `[1, 4, 4, 16]`.
    pub fn interior(s: u32, fallback: FallbackCost, convention: QConvention) -> Self {
        let mid = side(s).div_ceil(2);
        let mut m = Self::for_center(
            BeamIndex {
                s,
                m_h: mid,
                m_v: mid,
            },
            fallback,
            convention,
        );
        m.set_sizes = [1, 4, 4, 16];
        m
    }

    /// `[q_1, q_2, q_3, q_4, q_end]`.
    pub fn q(&self) -> [f64; 5] {
        let mut q = [0.0; 5];
        let mut before = 0.0;
        for (i, &n) in self.set_sizes.iter().enumerate() {
            let n = n as f64;
            q[i] = match (i, self.convention) {
                (0, _) => 1.0,
                (_, QConvention::HalfSet) => before + n / 2.0,
                (_, QConvention::Exact) => before + (n + 1.0) / 2.0,
            };
            before += n;
        }
        q[4] = before + self.fallback;
        q
    }
}

/// Mean hierarchical cost over the codebook cells no candidate set covers.
pub fn conditional_fallback_cost(sets: &CandidateSets) -> Option<f64> {
    let outside = cells_outside(sets);
    (!outside.is_empty()).then(|| {
        outside
            .iter()
            .map(|&b| hierarchical_cost(b) as f64)
            .sum::<f64>()
            / outside.len() as f64
    })
}

/// Codebook cells not in any candidate set, row-major.
pub fn cells_outside(sets: &CandidateSets) -> Vec<BeamIndex> {
    let s = sets.center.s;
    let n = side(s);
    (1..=n)
        .flat_map(|m_v| (1..=n).map(move |m_h| BeamIndex { s, m_h, m_v }))
        .filter(|b| sets.set_of(*b).is_none())
        .collect()
}

/// Expected scans `sum_i p_i q_i` over `[p_1, p_2, p_3, p_4, p_end]`.
pub fn expected_overhead(p: &[f64; 5], model: &OverheadModel) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidDistribution(format!(
            "{p:?} sums to {total}"
        )));
    }
    Ok(p.iter().zip(model.q()).map(|(p, q)| p * q).sum())
}

/// One scan trial in the JSON Lines trace format.
#[derive(Debug, Clone, Serialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub s: u32,
    pub center: [u32; 2],
    pub set_hit: SetHit,
    pub scans_used: usize,
    pub fell_back: bool,
}

impl TrialRecord {
    pub fn new(seed: u64, trace: &ScanTrace, center: BeamIndex) -> Self {
        Self {
            seed,
            s: center.s,
            center: [center.m_h, center.m_v],
            set_hit: trace.set_hit,
            scans_used: trace.scans_used,
            fell_back: trace.fell_back,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[TrialRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform point inside a beam's cell.
pub fn sample_in_cell<R: Rng>(
    coverage: Coverage,
    beam: BeamIndex,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let cb = Codebook::new(ArrayGeometry::for_level(beam.s), beam.s, coverage)?;
    let (h, v) = cb.cell(beam);
    // Keep away from the upper edge, which belongs to the next cell.
    let u: f64 = rng.random_range(0.0..1.0 - 1e-6);
    let w: f64 = rng.random_range(0.0..1.0 - 1e-6);
    Ok((h.lo + u * h.width(), v.lo + w * v.width()))
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo of the hierarchical scan alone over uniform targets.
pub fn simulate_hierarchical(
    coverage: Coverage,
    s: u32,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, v) = (coverage.psi_h, coverage.psi_v);
    (0..trials)
        .map(|_| {
            let psi = (
                h.lo + rng.random_range(0.0..1.0) * h.width(),
                v.lo + rng.random_range(0.0..1.0) * v.width(),
            );
            let trace = hierarchical_scan(&GeometricOracle::new(coverage, psi), s)?;
            Ok(trace.scans_used as f64)
        })
        .collect()
}

/// Monte Carlo of the candidate-set scan: each trial picks a set by `p`
/// (or the uncovered region for `p_end`), a uniform cell in it and a
/// uniform point in the cell, then scans with the geometric oracle.
pub fn simulate_overhead(
    coverage: Coverage,
    center: BeamIndex,
    p: &[f64; 5],
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sets = candidate_sets(center);
    let outside = cells_outside(&sets);
    let mut pools: Vec<&[BeamIndex]> = sets.sets.iter().map(|s| s.as_slice()).collect();
    pools.push(&outside);
    for (pi, pool) in p.iter().zip(&pools) {
        if *pi > 0.0 && pool.is_empty() {
            return Err(CoreError::InvalidDistribution(format!(
                "probability {pi} on an empty region around {center}"
            )));
        }
    }
    let cdf: Vec<f64> = p
        .iter()
        .scan(0.0, |acc, x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let u: f64 = rng.random_range(0.0..cdf[4]);
        let region = cdf.iter().position(|&c| u < c).unwrap_or(4);
        let pool = pools[region];
        let cell = pool[rng.random_range(0..pool.len())];
        let psi = sample_in_cell(coverage, cell, &mut rng)?;
        let trace = scan(&GeometricOracle::new(coverage, psi), &sets);
        out.push(trace.scans_used as f64);
    }
    Ok(out)
}
