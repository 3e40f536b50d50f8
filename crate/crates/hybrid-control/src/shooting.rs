//! Damped Newton root finding with a finite-difference Jacobian, shared by
//! the minimum-principle and Riccati switch-time solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NewtonOptions {
    /// Convergence threshold on the residual infinity norm.
    pub tol: f64,
    pub max_iterations: usize,
    /// Forward-difference step for the Jacobian columns.
    pub fd_step: f64,
    /// Smallest backtracking factor before the line search gives up.
    pub min_step: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-8,
            max_iterations: 100,
            fd_step: 1e-6,
            min_step: 1.0 / 1024.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonOutcome {
    pub unknowns: DVector<f64>,
    pub residual: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Solve `f(x) = 0` for a square system by damped Newton iteration.
///
/// Residual evaluations may fail (for instance when a trial switch time
/// leaves the horizon); failures during the line search shrink the step,
/// a failure at the initial point propagates.
pub fn damped_newton<F>(
    mut f: F,
    x0: DVector<f64>,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut x = x0;
    let mut r = f(&x)?;
    if r.len() != x.len() {
        return Err(Error::Config(format!(
            "newton needs a square system ({} unknowns, {} residuals)",
            x.len(),
            r.len()
        )));
    }
    let mut norm = r.amax();
    if x.is_empty() || norm <= opts.tol {
        return Ok(NewtonOutcome {
            residual_norm: norm,
            unknowns: x,
            residual: r,
            iterations: 0,
        });
    }

    let n = x.len();
    let mut best = (x.clone(), r.clone(), norm);
    for iter in 1..=opts.max_iterations {
        // Forward-difference Jacobian, column by column.
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut xp = x.clone();
            let h = opts.fd_step * (1.0 + x[j].abs());
            xp[j] += h;
            let rp = f(&xp)?;
            for i in 0..n {
                jac[(i, j)] = (rp[i] - r[i]) / h;
            }
        }
        let lu = jac.lu();
        let dx = lu.solve(&(-&r)).ok_or(Error::SingularJacobian)?;
        if !dx.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularJacobian);
        }

        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= opts.min_step {
            let x_trial = &x + &dx * alpha;
            match f(&x_trial) {
                Ok(r_trial) => {
                    let trial_norm = r_trial.amax();
                    if trial_norm < norm || trial_norm <= opts.tol {
                        x = x_trial;
                        r = r_trial;
                        norm = trial_norm;
                        accepted = true;
                        break;
                    }
                }
                Err(_) => {}
            }
            alpha *= 0.5;
        }
        if norm < best.2 {
            best = (x.clone(), r.clone(), norm);
        }
        if norm <= opts.tol {
            return Ok(NewtonOutcome {
                unknowns: x,
                residual: r,
                residual_norm: norm,
                iterations: iter,
            });
        }
        if !accepted {
            return Err(Error::NonConvergence {
                residual: best.2,
                iterations: iter,
            });
        }
    }
    Err(Error::NonConvergence {
        residual: best.2,
        iterations: opts.max_iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solves_a_two_dimensional_root() {
        let f = |x: &DVector<f64>| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(vec![
                x[0] * x[0] + x[1] - 2.0,
                x[0] - x[1] + 1.0,
            ]))
        };
        let out = damped_newton(
            f,
            DVector::from_vec(vec![2.0, 0.5]),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert!(out.residual_norm <= 1e-8);
        // Roots of x^2 + x - 1 = 0 paired with y = x + 1.
        assert_relative_eq!(out.unknowns[1], out.unknowns[0] + 1.0, epsilon = 1e-8);
    }

    #[test]
    fn empty_system_converges_immediately() {
        let out = damped_newton(
            |_x| Ok(DVector::zeros(0)),
            DVector::zeros(0),
            &NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn reports_nonconvergence_with_best_residual() {
        // f(x) = x^2 + 1 has no real root.
        let err = damped_newton(
            |x: &DVector<f64>| Ok(DVector::from_vec(vec![x[0] * x[0] + 1.0])),
            DVector::from_vec(vec![1.0]),
            &NewtonOptions {
                max_iterations: 20,
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }
}
