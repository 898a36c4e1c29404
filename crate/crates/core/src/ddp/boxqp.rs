//! Projected-Newton solver for `min 1/2 x'Hx + g'x  s.t.  lb <= x <= ub`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpSettings {
    pub max_iterations: usize,
    /// Stop when the free-subspace gradient norm falls below this.
    pub gradient_tolerance: f64,
    /// A coordinate this close to a bound, with outward gradient, is clamped.
    pub bound_tolerance: f64,
    pub armijo: f64,
    pub step_decrease: f64,
    pub min_step: f64,
}

impl Default for BoxQpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            gradient_tolerance: 1e-12,
            bound_tolerance: 1e-12,
            armijo: 0.1,
            step_decrease: 0.6,
            min_step: 1e-22,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxQpResult {
    pub x: DVector<f64>,
    pub free: Vec<usize>,
    pub clamped: Vec<usize>,
    /// Inverse of `H` restricted to the free set (free x free).
    pub hff_inv: DMatrix<f64>,
    pub iterations: usize,
}

fn objective(h: &DMatrix<f64>, g: &DVector<f64>, x: &DVector<f64>) -> f64 {
    0.5 * x.dot(&(h * x)) + g.dot(x)
}

fn clamp(x: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].max(lb[i]).min(ub[i]))
}

fn partition(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    tol: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut free = Vec::new();
    let mut clamped = Vec::new();
    for i in 0..x.len() {
        let at_lower = x[i] <= lb[i] + tol && grad[i] > 0.0;
        let at_upper = x[i] >= ub[i] - tol && grad[i] < 0.0;
        if at_lower || at_upper {
            clamped.push(i);
        } else {
            free.push(i);
        }
    }
    (free, clamped)
}

fn sub_matrix(h: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |r, c| h[(idx[r], idx[c])])
}

fn free_inverse(h: &DMatrix<f64>, free: &[usize]) -> Result<DMatrix<f64>> {
    if free.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let chol = sub_matrix(h, free).cholesky().ok_or_else(|| {
        Error::InvalidArgument("free-subspace Hessian is not positive definite".into())
    })?;
    Ok(chol.inverse())
}

pub fn box_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    x_init: &DVector<f64>,
    settings: &BoxQpSettings,
) -> Result<BoxQpResult> {
    let m = g.len();
    check_dim("box-QP Hessian rows", m, h.nrows())?;
    check_dim("box-QP Hessian cols", m, h.ncols())?;
    check_dim("box-QP lower bound", m, lb.len())?;
    check_dim("box-QP upper bound", m, ub.len())?;
    check_dim("box-QP initial guess", m, x_init.len())?;
    if lb.iter().zip(ub.iter()).any(|(l, u)| !(l <= u)) {
        return Err(Error::InvalidArgument(
            "box-QP bounds must satisfy lb <= ub".into(),
        ));
    }

    let mut x = clamp(x_init, lb, ub);
    let mut value = objective(h, g, &x);
    let mut iterations = 0;
    loop {
        let grad = g + h * &x;
        let (free, _) = partition(&x, &grad, lb, ub, settings.bound_tolerance);
        if free.is_empty() {
            break;
        }
        let gf = DVector::from_fn(free.len(), |r, _| grad[free[r]]);
        if gf.norm() < settings.gradient_tolerance {
            break;
        }
        if iterations >= settings.max_iterations {
            return Err(Error::Internal("box-QP iteration limit reached".into()));
        }
        iterations += 1;

        let chol = sub_matrix(h, &free).cholesky().ok_or_else(|| {
            Error::InvalidArgument("free-subspace Hessian is not positive definite".into())
        })?;
        let step_f = -chol.solve(&gf);
        let mut dir = DVector::zeros(m);
        for (r, &i) in free.iter().enumerate() {
            dir[i] = step_f[r];
        }
        let slope = dir.dot(&grad);
        if slope >= 0.0 {
            break;
        }

        let mut step = 1.0;
        let accepted = loop {
            let candidate = clamp(&(&x + &dir * step), lb, ub);
            let v = objective(h, g, &candidate);
            if (v - value) / (step * slope) >= settings.armijo {
                break Some((candidate, v));
            }
            step *= settings.step_decrease;
            if step < settings.min_step {
                break None;
            }
        };
        match accepted {
            Some((candidate, v)) => {
                let improvement = value - v;
                x = candidate;
                value = v;
                if improvement <= 1e-14 * (1.0 + value.abs()) && step < 1.0 {
                    break;
                }
            }
            None => break,
        }
    }

    let grad = g + h * &x;
    let (free, clamped) = partition(&x, &grad, lb, ub, settings.bound_tolerance);
    let hff_inv = free_inverse(h, &free)?;
    Ok(BoxQpResult {
        x,
        free,
        clamped,
        hff_inv,
        iterations,
    })
}
