//! Finite-difference verification of reverse-mode gradients.
//!
//! `loss_fn` must be deterministic: it is re-evaluated twice per checked
//! coordinate on a fresh graph with one parameter entry nudged by ±step.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::autodiff::{Graph, Var};
use crate::numerics::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter block (sampled
    /// without replacement). `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − fd| / max(1, |fd|)
    pub max_rel_error: f64,
    /// worst (param index, flat coordinate, analytic, fd)
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    /// per-parameter max relative error
    pub per_param: Vec<f64>,
}

/// Maximum relative error between analytic and central-difference gradients
/// over every coordinate of every parameter.
pub fn check_gradients<F>(loss_fn: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    Ok(check_gradients_with(loss_fn, params, &opts)?.max_rel_error)
}

pub fn check_gradients_with<F>(
    loss_fn: F,
    params: &[Matrix],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::parameter(format!(
            "finite-difference step must lie in (0, 1e-2], got {}",
            opts.step
        )));
    }

    let analytic: Vec<Matrix> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        g.backward(loss)?;
        vars.iter().map(|&v| g.grad_or_zeros(v)).collect()
    };

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        per_param: vec![0.0; params.len()],
    };

    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let original = work[pi].data()[c];
            work[pi].data_mut()[c] = original + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = original - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = original;

            let fd = (plus - minus) / (2.0 * opts.step);
            let a = analytic[pi].data()[c];
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            report.per_param[pi] = report.per_param[pi].max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, c, a, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let err = check_gradients(
            |g, p| {
                let sq = g.mul(p[0], p[0])?;
                Ok(g.sum(sq))
            },
            &[Matrix::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rejects_out_of_range_step() {
        let f = |g: &mut Graph, p: &[Var]| Ok(g.sum(p[0]));
        assert!(check_gradients(f, &[Matrix::scalar(1.0)], 0.0).is_err());
        assert!(check_gradients(f, &[Matrix::scalar(1.0)], 0.1).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // stopgrad makes the analytic gradient disagree with plain FD of x·x
        let err = check_gradients(
            |g, p| {
                let frozen = g.stopgrad(p[0]);
                let prod = g.mul(p[0], frozen)?;
                Ok(g.sum(prod))
            },
            &[Matrix::scalar(2.0)],
            1e-5,
        )
        .unwrap();
        assert!((err - 2.0 / 4.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn stopgrad_matches_fd_with_frozen_branch() {
        // hold the severed branch as a constant captured from the base point
        let x0 = 2.0;
        let err = check_gradients(
            move |g, p| {
                let frozen = g.constant(Matrix::scalar(x0));
                let prod = g.mul(p[0], frozen)?;
                Ok(g.sum(prod))
            },
            &[Matrix::scalar(x0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9);
    }
}
