//! Central finite-difference verification of [`Graph::gradient`].

use crate::error::{AutogradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdConfig {
    /// Perturbation `h` of the central difference `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, scale_floor)`; the floor keeps
    /// coordinates with vanishing gradient from dividing by ~0.
    pub scale_floor: f64,
    /// Points closer than this to a non-differentiable point are rejected.
    pub min_kink_distance: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            scale_floor: 1e-3,
            min_kink_distance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub kink_distance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&g, &vars)?;
    if out.shape() != [1, 1] {
        return Err(AutogradError::NonScalarOutput { shape: out.shape() });
    }
    Ok(out.item())
}

/// Compares the analytic gradient of `f` at `params` against central
/// differences, coordinate by coordinate.
///
/// Fails with [`AutogradError::OracleInvalid`] when `f` is not deterministic
/// or when the point lies within `min_kink_distance` of a kink.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], cfg: &FdConfig) -> Result<FdReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if cfg.step <= 0.0 || !cfg.step.is_finite() {
        return Err(AutogradError::InvalidArgument {
            op: "finite_difference_check",
            reason: format!("step must be positive, got {}", cfg.step),
        });
    }
    let g = Graph::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| g.param(p)).collect();
    let out = f(&g, &vars)?;
    let base = out.value().item();
    let again = evaluate(&f, params)?;
    if base.to_bits() != again.to_bits() {
        return Err(AutogradError::OracleInvalid(format!(
            "function is not deterministic ({base} vs {again})"
        )));
    }
    let kink_distance = g.kink_distance();
    if kink_distance < cfg.min_kink_distance {
        return Err(AutogradError::OracleInvalid(format!(
            "evaluation point lies {kink_distance:e} from a non-differentiable point"
        )));
    }
    let grads = g.gradient(out, &vars, false)?;

    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut coordinates = 0;
    let mut probe = params.to_vec();
    for (pi, grad) in grads.grads.iter().enumerate() {
        let analytic = grad.value();
        for k in 0..params[pi].len() {
            let x0 = params[pi].data()[k];
            probe[pi].data_mut()[k] = x0 + cfg.step;
            let plus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = x0 - cfg.step;
            let minus = evaluate(&f, &probe)?;
            probe[pi].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(analytic.data()[k], numeric, cfg.scale_floor);
            coordinates += 1;
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((pi, k));
            }
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst,
        coordinates,
        kink_distance,
        passed: max_rel_error < cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_matches_tightly() {
        // f(x) = x^T A x with A symmetric positive definite
        let a = Tensor::new([2, 2], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let x = Tensor::new([2, 1], vec![0.7, -1.3]).unwrap();
        let report = finite_difference_check(
            |g, p| {
                let a = g.constant(a.clone());
                p[0].t()?.matmul(a)?.matmul(p[0])
            },
            &[x],
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert!(report.passed);
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn relu_away_from_kink_passes() {
        let x = Tensor::row(&[-0.8, 0.4, 1.5, -0.05]);
        let report = finite_difference_check(
            |_, p| p[0].relu()?.mul(p[0])?.sum(),
            &[x],
            &FdConfig::default(),
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn relu_at_kink_is_rejected() {
        let x = Tensor::row(&[0.0, 1.0]);
        let err = finite_difference_check(|_, p| p[0].relu()?.sum(), &[x], &FdConfig::default());
        assert!(matches!(err, Err(AutogradError::OracleInvalid(_))));
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::row(&[1.0]);
        let err = finite_difference_check(
            |g, p| {
                calls.set(calls.get() + 1.0);
                p[0].add(g.scalar(calls.get()))?.sum()
            },
            &[x],
            &FdConfig::default(),
        );
        assert!(matches!(err, Err(AutogradError::OracleInvalid(_))));
    }

    #[test]
    fn nonpositive_step_is_rejected() {
        let cfg = FdConfig {
            step: 0.0,
            ..FdConfig::default()
        };
        let err = finite_difference_check(|_, p| p[0].sum(), &[Tensor::row(&[1.0])], &cfg);
        assert!(matches!(err, Err(AutogradError::InvalidArgument { .. })));
    }
}
