//! Finite-difference verification of reverse-mode gradients.

use crate::{Bound, Graph, ParamStore, Result, Var};

/// Relative error `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Entries above this error are re-measured with steps 10x and 100x
    /// smaller; a perturbation that crosses a ReLU or max-pool switch point
    /// is a property of the probe, not of the gradient.
    pub retry_above: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            retry_above: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn eval<F>(params: &ParamStore, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = f(&mut g, &b)?;
    Ok(g.value(loss)[0])
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences for every scalar parameter of `params`.
pub fn check<F>(params: &mut ParamStore, cfg: GradCheckConfig, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let loss = f(&mut g, &b)?;
    g.backward(loss)?;
    params.collect_grads(&g, &b);
    let analytic = params.flatten_grads();
    let base = params.flatten();

    let mut reports = Vec::new();
    let mut off = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let mut worst = 0.0f64;
        for i in off..off + n {
            let mut best = f64::INFINITY;
            for scale in [1.0, 0.1, 0.01] {
                let h = cfg.step * scale;
                let mut x = base.clone();
                x[i] = base[i] + h;
                params.set_flat(&x)?;
                let up = eval(params, &mut f)?;
                x[i] = base[i] - h;
                params.set_flat(&x)?;
                let down = eval(params, &mut f)?;
                let fd = (up - down) / (2.0 * h);
                best = best.min(rel_error(analytic[i], fd));
                if best <= cfg.retry_above {
                    break;
                }
            }
            worst = worst.max(best);
        }
        params.set_flat(&base)?;
        reports.push(ParamReport {
            name: params.name(id).to_string(),
            count: n,
            max_rel_error: worst,
        });
        off += n;
    }
    Ok(GradCheckReport { params: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Init, Tensor};

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn linear_sigmoid_passes() {
        let mut p = ParamStore::new(5);
        let w = p.add("w", vec![3, 2], Init::Linear { fan_in: 3 });
        let bias = p.add("b", vec![2], Init::Uniform(0.5));
        let x =
            Tensor::from_vec(vec![4, 3], (0..12).map(|v| v as f64 * 0.1 - 0.5).collect()).unwrap();
        let report = check(&mut p, GradCheckConfig::default(), |g, b| {
            let xi = g.input(x.clone());
            let h = g.matmul(xi, b[w])?;
            let h = g.add(h, b[bias])?;
            let y = g.sigmoid(h);
            g.mse(y, &[0.1, 0.9, 0.3, 0.2, 0.5, 0.5, 0.7, 0.4])
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
        assert_eq!(report.params.len(), 2);
    }
}
