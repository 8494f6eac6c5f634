//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Above this many coordinates only a random sample is checked.
    pub sample_above: usize,
    pub sample_fraction: f64,
    pub seed: u64,
    /// Rounding resolution of the difference quotient, in units of
    /// `EPSILON * |f|`. Differences below it are indistinguishable from zero.
    pub resolution_ulps: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            sample_above: 10_000,
            sample_fraction: 0.01,
            seed: 0,
            resolution_ulps: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose analytic/numeric gap was below the rounding
    /// resolution of the finite difference (e.g. exactly-invariant biases).
    pub below_resolution: usize,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, for every coordinate of the parameters in `check` (or a
/// random sample of them when there are more than `sample_above`).
///
/// `f` must be deterministic; build it on an evaluation graph.
pub fn grad_check<F>(
    store: &mut ParamStore,
    check: &[ParamId],
    cfg: &GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, |id| check.contains(&id));
    let loss = f(&mut g, &bound)?;
    g.check_finite(loss, "grad_check objective")?;
    g.backward(loss)?;

    let mut coords: Vec<(ParamId, usize)> = check
        .iter()
        .flat_map(|&id| (0..store.value(id).numel()).map(move |k| (id, k)))
        .collect();
    if coords.len() > cfg.sample_above {
        let n = ((coords.len() as f64 * cfg.sample_fraction).ceil() as usize).max(1);
        let mut rng = Stream::new(cfg.seed).derive("grad_check").rng();
        let mut picked: Vec<usize> = sample(&mut rng, coords.len(), n).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, k)| g.grad(bound.var(id)).map_or(0.0, |t| t.data()[k]))
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g, |_| false);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: coords.len(),
        below_resolution: 0,
        worst: None,
    };
    for (&(id, k), &a) in coords.iter().zip(&analytic) {
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + cfg.step;
        let plus = eval(store);
        store.value_mut(id).data_mut()[k] = orig - cfg.step;
        let minus = eval(store);
        store.value_mut(id).data_mut()[k] = orig;
        let (plus, minus) = (plus?, minus?);
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let resolution =
            cfg.resolution_ulps * f64::EPSILON * plus.abs().max(minus.abs()) / (2.0 * cfg.step);
        if !numeric.is_finite() {
            return Err(Error::NonFinite {
                node: format!("finite difference of {}[{k}]", store.name(id)),
            });
        }
        let err = if (a - numeric).abs() <= resolution {
            report.below_resolution += 1;
            0.0
        } else {
            relative_error(a, numeric)
        };
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(Worst {
                param: store.name(id).to_string(),
                coord: k,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0), false);
        let report = grad_check(&mut store, &[x], &GradCheckConfig::default(), |g, b| {
            let v = b.var(x);
            g.mul(v, v)
        })
        .unwrap();
        let w = report.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
        assert!((w.numeric - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(&[1.0, 2.0]).unwrap(), false);
        let report = grad_check(&mut store, &[x], &GradCheckConfig::default(), |g, _| {
            Ok(g.constant(Tensor::scalar(5.0)))
        })
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.worst.unwrap().analytic, 0.0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(&[0.3, -1.2]).unwrap(), false);
        let mut cfg = GradCheckConfig::default();
        cfg.resolution_ulps = 0.0;
        let report = grad_check(&mut store, &[x], &cfg, |g, b| {
            g.inject_fault("gelu");
            let y = g.gelu(b.var(x));
            let z = g.constant(Tensor::zeros(&[2]));
            g.mse(y, z)
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }

    #[test]
    fn samples_large_parameters() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::full(&[200, 60], 0.5), false);
        let report = grad_check(&mut store, &[x], &GradCheckConfig::default(), |g, b| {
            let v = b.var(x);
            let sq = g.mul(v, v)?;
            let t = g.constant(Tensor::zeros(&[200, 60]));
            g.mse(sq, t)
        })
        .unwrap();
        assert_eq!(report.checked, 120);
        assert!(report.passed(1e-4));
    }
}
