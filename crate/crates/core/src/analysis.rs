//! Coherence time of a beam, NR half-frame sensing/communication budget and
//! error/overhead metrics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{CoreError, Result};

/// Time the target stays within half a level-`s` beamwidth, `tan(2^-(s+1)) d / v_perp`.
/// `None` when the target has no tangential motion.
pub fn coherence_time(s: u32, d: f64, v_perp: f64) -> Result<Option<f64>> {
    if !(d > 0.0) || !d.is_finite() || !(v_perp >= 0.0) || !v_perp.is_finite() {
        return Err(CoreError::Config(format!(
            "coherence needs d > 0, v_perp >= 0 (got {d}, {v_perp})"
        )));
    }
    if v_perp == 0.0 {
        return Ok(None);
    }
    let half_beam = 0.5f64.powi(s as i32 + 1);
    Ok(Some(half_beam.tan() * d / v_perp))
}

/// Angle swept during `dt` by purely tangential motion at range `d`.
pub fn angular_step(v_perp: f64, dt: f64, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(CoreError::Config(format!("range {d} must be positive")));
    }
    Ok((v_perp * dt / d).atan())
}

/// Wavenumber change `pi |sin a2 - sin a1|` between two angles.
pub fn beamspace_step(a1: f64, a2: f64) -> f64 {
    std::f64::consts::PI * (a2.sin() - a1.sin()).abs()
}

/// NR frame numerology used to convert beam illuminations into lost
/// communication time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameBudget {
    pub frame_ms: f64,
    pub slots_per_frame: u32,
    pub symbols_per_slot: u32,
    pub symbols_per_beam: u32,
    pub half_frame_ms: f64,
}

impl Default for FrameBudget {
    fn default() -> Self {
        Self {
            frame_ms: 10.0,
            slots_per_frame: 10,
            symbols_per_slot: 14,
            symbols_per_beam: 4,
            half_frame_ms: 5.0,
        }
    }
}

impl FrameBudget {
    pub fn symbol_ms(&self) -> f64 {
        self.frame_ms / (self.slots_per_frame * self.symbols_per_slot) as f64
    }

    /// Symbols available in a half frame (70 by default).
    pub fn half_frame_symbols(&self) -> f64 {
        (self.slots_per_frame * self.symbols_per_slot) as f64 * self.half_frame_ms / self.frame_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommBudget {
    pub sensing_symbols: f64,
    pub t_comm_ms: f64,
    /// Sweep does not fit in the half frame.
    pub exceeded: bool,
}

/// Communication time left in the half frame after `scans` illuminations.
/// Fractional scans are allowed for expectation-level accounting.
pub fn comm_budget(scans: f64, budget: &FrameBudget) -> Result<CommBudget> {
    if !(scans >= 0.0) || !scans.is_finite() {
        return Err(CoreError::Config(format!(
            "scan count {scans} must be non-negative"
        )));
    }
    let sensing = budget.symbols_per_beam as f64 * scans;
    let cap = budget.half_frame_symbols();
    // Compare in symbols so 17.5 scans land exactly on the 70-symbol cap.
    let left = (cap - sensing).max(0.0);
    Ok(CommBudget {
        sensing_symbols: sensing,
        t_comm_ms: left * budget.frame_ms
            / (budget.slots_per_frame * budget.symbols_per_slot) as f64,
        exceeded: sensing >= cap,
    })
}

/// Root mean square of a sample.
pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

/// Empirical CDF of absolute errors as sorted `(error, probability)` pairs.
pub fn cpf(errors: &[f64]) -> Vec<(f64, f64)> {
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let n = abs.len() as f64;
    abs.into_iter()
        .enumerate()
        .map(|(i, e)| (e, (i + 1) as f64 / n))
        .collect()
}

/// Mean and half-width of the normal-approximation 95% interval.
pub fn mean_ci95(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * (var / n).sqrt()))
}

/// Estimated and true angles for one slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnglePair {
    pub theta: f64,
    pub phi: f64,
}

/// One report row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub case: String,
    pub s: u32,
    pub rmse_az: f64,
    pub rmse_el: f64,
    pub rmse_az_deg: f64,
    pub rmse_el_deg: f64,
    pub overhead_mean: f64,
    pub overhead_ci: f64,
    pub t_comm_ms: f64,
    pub samples: usize,
}

/// Metrics for one `(method, case, s)` cell. `scans` may be empty when only
/// angle errors are reported; angles may be empty for scan-only methods.
pub fn compute_metrics(
    method: &str,
    case: &str,
    s: u32,
    scans: &[f64],
    estimates: &[AnglePair],
    truth: &[AnglePair],
    budget: &FrameBudget,
) -> Result<MetricsRow> {
    if estimates.len() != truth.len() {
        return Err(CoreError::Config(format!(
            "{} estimates for {} truths",
            estimates.len(),
            truth.len()
        )));
    }
    if scans.is_empty() && estimates.is_empty() {
        return Err(CoreError::EmptyInput);
    }
    let (az, el): (Vec<f64>, Vec<f64>) = estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e.theta - t.theta, e.phi - t.phi))
        .unzip();
    let (rmse_az, rmse_el) = if az.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (rmse(&az)?, rmse(&el)?)
    };
    let (overhead_mean, overhead_ci) = if scans.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        mean_ci95(scans)?
    };
    let t_comm_ms = if scans.is_empty() {
        f64::NAN
    } else {
        comm_budget(overhead_mean, budget)?.t_comm_ms
    };
    Ok(MetricsRow {
        method: method.to_string(),
        case: case.to_string(),
        s,
        rmse_az,
        rmse_el,
        rmse_az_deg: rmse_az.to_degrees(),
        rmse_el_deg: rmse_el.to_degrees(),
        overhead_mean,
        overhead_ci,
        t_comm_ms,
        samples: scans.len().max(estimates.len()),
    })
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct CpfRow<'a> {
    method: &'a str,
    case: &'a str,
    s: u32,
    angle: &'a str,
    error_rad: f64,
    probability: f64,
}

/// CPF samples of azimuth and elevation errors for one cell.
pub fn write_cpf_csv<W: Write>(
    cells: &[(String, String, u32, Vec<AnglePair>, Vec<AnglePair>)],
    w: W,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (method, case, s, est, truth) in cells {
        let az: Vec<f64> = est
            .iter()
            .zip(truth)
            .map(|(e, t)| e.theta - t.theta)
            .collect();
        let el: Vec<f64> = est.iter().zip(truth).map(|(e, t)| e.phi - t.phi).collect();
        for (angle, errs) in [("azimuth", az), ("elevation", el)] {
            for (error_rad, probability) in cpf(&errs) {
                out.serialize(CpfRow {
                    method,
                    case,
                    s: *s,
                    angle,
                    error_rad,
                    probability,
                })?;
            }
        }
    }
    out.flush()?;
    Ok(())
}
