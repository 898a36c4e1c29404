//! Residual cost terms with exact gradients and Gauss-Newton Hessians.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::ddp::problem::StageCost;
use crate::error::{check_dim, check_finite, Error, Result};
use crate::rigid::{self, ChainModel};
use crate::soft::{ActuationKind, ActuationSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct CostQuadratic {
    pub value: f64,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    /// `d2l / du dx` (nu x nx).
    pub lux: DMatrix<f64>,
}

impl CostQuadratic {
    pub fn zeros(nx: usize, nu: usize) -> Self {
        Self {
            value: 0.0,
            lx: DVector::zeros(nx),
            lu: DVector::zeros(nu),
            lxx: DMatrix::zeros(nx, nx),
            luu: DMatrix::zeros(nu, nu),
            lux: DMatrix::zeros(nu, nx),
        }
    }

    fn add_scaled(&mut self, other: &CostQuadratic, s: f64) {
        self.value += s * other.value;
        self.lx += &other.lx * s;
        self.lu += &other.lu * s;
        self.lxx += &other.lxx * s;
        self.luu += &other.luu * s;
        self.lux += &other.lux * s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CostKind {
    /// `1/2 sum_i w_i (x_i - r_i)^2`, `w = 1` when absent.
    StateRegularization {
        reference: DVector<f64>,
        weights: Option<DVector<f64>>,
    },
    /// `1/2 sum_i w_i (u_i - r_i)^2`, `w = 1` when absent.
    ControlRegularization {
        reference: DVector<f64>,
        weights: Option<DVector<f64>>,
    },
    /// `1/2 |p(q) - p*|^2` with the planar tip position.
    GoalTracking {
        model: ChainModel,
        target: Vector2<f64>,
    },
    /// `1/2 |J(q) qd - v*|^2` with the planar tip velocity.
    TipVelocity {
        model: ChainModel,
        target: Vector2<f64>,
    },
    /// `lambda * sum_j (sigma_j - sigma_r_j)`; sigma starts at control index `offset`.
    VsaStiffness {
        lambda: f64,
        sigma_ref: DVector<f64>,
        offset: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTerm {
    pub kind: CostKind,
    pub weight: f64,
}

fn check_weight(weight: f64) -> Result<()> {
    if weight >= 0.0 && weight.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "cost weight must be >= 0, got {weight}"
        )))
    }
}

fn check_activation(weights: &Option<DVector<f64>>, len: usize) -> Result<()> {
    if let Some(w) = weights {
        check_dim("activation weights", len, w.len())?;
        if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "activation weights must be >= 0".into(),
            ));
        }
    }
    Ok(())
}

impl CostTerm {
    pub fn state_regularization(
        weight: f64,
        reference: DVector<f64>,
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        check_weight(weight)?;
        check_activation(&weights, reference.len())?;
        Ok(Self {
            kind: CostKind::StateRegularization { reference, weights },
            weight,
        })
    }

    pub fn control_regularization(
        weight: f64,
        reference: DVector<f64>,
        weights: Option<DVector<f64>>,
    ) -> Result<Self> {
        check_weight(weight)?;
        check_activation(&weights, reference.len())?;
        Ok(Self {
            kind: CostKind::ControlRegularization { reference, weights },
            weight,
        })
    }

    pub fn goal_tracking(weight: f64, model: ChainModel, target: Vector2<f64>) -> Result<Self> {
        check_weight(weight)?;
        check_finite("goal target", target.as_slice())?;
        Ok(Self {
            kind: CostKind::GoalTracking { model, target },
            weight,
        })
    }

    pub fn tip_velocity(weight: f64, model: ChainModel, target: Vector2<f64>) -> Result<Self> {
        check_weight(weight)?;
        check_finite("tip velocity target", target.as_slice())?;
        Ok(Self {
            kind: CostKind::TipVelocity { model, target },
            weight,
        })
    }

    /// Linear stiffness cost over the sigma channels of a VSA control, with
    /// the actuation's reference stiffness.
    pub fn vsa_stiffness(weight: f64, act: &ActuationSpec, lambda: f64) -> Result<Self> {
        check_weight(weight)?;
        if act.kind() != ActuationKind::Vsa {
            return Err(Error::InvalidArgument(
                "stiffness cost requires variable stiffness actuation".into(),
            ));
        }
        if !lambda.is_finite() {
            return Err(Error::NonFinite("lambda"));
        }
        Ok(Self {
            kind: CostKind::VsaStiffness {
                lambda,
                sigma_ref: DVector::from_column_slice(act.sigma_ref()),
                offset: act.n_motors(),
            },
            weight,
        })
    }

    pub fn evaluate(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let w = self.weight;
        Ok(match &self.kind {
            CostKind::StateRegularization { reference, weights } => {
                check_dim("state", reference.len(), x.len())?;
                0.5 * w * weighted_sq(&(x - reference), weights)
            }
            CostKind::ControlRegularization { reference, weights } => {
                check_dim("control", reference.len(), u.len())?;
                0.5 * w * weighted_sq(&(u - reference), weights)
            }
            CostKind::GoalTracking { model, target } => {
                let q = positions(model, x)?;
                0.5 * w * (rigid::fk_ee(model, &q)? - target).norm_squared()
            }
            CostKind::TipVelocity { model, target } => {
                let (q, qd) = positions_velocities(model, x)?;
                let (v, _) = rigid::tip_velocity(model, &q, &qd)?;
                0.5 * w * (v - target).norm_squared()
            }
            CostKind::VsaStiffness {
                lambda,
                sigma_ref,
                offset,
            } => {
                let sigma = sigma_slice(u, *offset, sigma_ref.len())?;
                w * lambda * (sigma - sigma_ref).sum()
            }
        })
    }

    pub fn quadratic_approx(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<CostQuadratic> {
        let w = self.weight;
        let mut out = CostQuadratic::zeros(x.len(), u.len());
        out.value = self.evaluate(x, u)?;
        match &self.kind {
            CostKind::StateRegularization { reference, weights } => {
                let act = activation(weights, x.len());
                out.lx = (x - reference).component_mul(&act) * w;
                out.lxx = DMatrix::from_diagonal(&(act * w));
            }
            CostKind::ControlRegularization { reference, weights } => {
                let act = activation(weights, u.len());
                out.lu = (u - reference).component_mul(&act) * w;
                out.luu = DMatrix::from_diagonal(&(act * w));
            }
            CostKind::GoalTracking { model, target } => {
                let n = model.n_links();
                let q = positions(model, x)?;
                let r = rigid::fk_ee(model, &q)? - target;
                let j = rigid::fk_jacobian(model, &q)?;
                let rv = DVector::from_column_slice(r.as_slice());
                out.lx.rows_mut(0, n).copy_from(&(j.transpose() * rv * w));
                out.lxx
                    .view_mut((0, 0), (n, n))
                    .copy_from(&(j.transpose() * &j * w));
            }
            CostKind::TipVelocity { model, target } => {
                let n = model.n_links();
                let (q, qd) = positions_velocities(model, x)?;
                let (v, dv_dq) = rigid::tip_velocity(model, &q, &qd)?;
                let j = rigid::fk_jacobian(model, &q)?;
                let mut jr = DMatrix::zeros(2, x.len());
                jr.view_mut((0, 0), (2, n)).copy_from(&dv_dq);
                jr.view_mut((0, n), (2, n)).copy_from(&j);
                let rv = DVector::from_column_slice((v - target).as_slice());
                out.lx = jr.transpose() * rv * w;
                out.lxx = jr.transpose() * &jr * w;
            }
            CostKind::VsaStiffness {
                lambda,
                sigma_ref,
                offset,
            } => {
                sigma_slice(u, *offset, sigma_ref.len())?;
                for j in 0..sigma_ref.len() {
                    out.lu[offset + j] = w * lambda;
                }
            }
        }
        Ok(out)
    }
}

fn activation(weights: &Option<DVector<f64>>, len: usize) -> DVector<f64> {
    weights
        .clone()
        .unwrap_or_else(|| DVector::from_element(len, 1.0))
}

fn weighted_sq(r: &DVector<f64>, weights: &Option<DVector<f64>>) -> f64 {
    match weights {
        Some(w) => r.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum(),
        None => r.norm_squared(),
    }
}

fn positions(model: &ChainModel, x: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.n_links();
    if x.len() < 2 * n {
        return Err(Error::DimensionMismatch {
            what: "state for tip costs",
            expected: 2 * n,
            got: x.len(),
        });
    }
    Ok(x.rows(0, n).into_owned())
}

fn positions_velocities(
    model: &ChainModel,
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = model.n_links();
    let q = positions(model, x)?;
    Ok((q, x.rows(n, n).into_owned()))
}

fn sigma_slice(u: &DVector<f64>, offset: usize, m: usize) -> Result<DVector<f64>> {
    if u.len() != offset + m {
        return Err(Error::InvalidArgument(format!(
            "stiffness cost expects a control of length {}, got {}",
            offset + m,
            u.len()
        )));
    }
    Ok(u.rows(offset, m).into_owned())
}

/// Linear interpolation slope of the actuator effort `g^2` between the
/// stiffness bounds.
pub fn vsa_lambda(g2_at_min: f64, g2_at_max: f64, sigma_min: f64, sigma_max: f64) -> Result<f64> {
    if !(sigma_max > sigma_min) {
        return Err(Error::InvalidArgument(format!(
            "sigma_max ({sigma_max}) must exceed sigma_min ({sigma_min})"
        )));
    }
    Ok((g2_at_max - g2_at_min) / (sigma_max - sigma_min))
}

/// Weighted sum of terms, multiplied by `scale` (the knot time step for
/// running costs, 1 for the terminal cost).
#[derive(Debug, Clone, PartialEq)]
pub struct CostSum {
    pub terms: Vec<CostTerm>,
    pub scale: f64,
    nx: usize,
    nu: usize,
}

impl CostSum {
    pub fn running(terms: Vec<CostTerm>, nx: usize, nu: usize, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time step must be > 0, got {dt}"
            )));
        }
        Ok(Self {
            terms,
            scale: dt,
            nx,
            nu,
        })
    }

    pub fn terminal(terms: Vec<CostTerm>, nx: usize) -> Self {
        Self {
            terms,
            scale: 1.0,
            nx,
            nu: 0,
        }
    }

    fn check(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        check_dim("cost state", self.nx, x.len())?;
        check_dim("cost control", self.nu, u.len())
    }
}

impl StageCost for CostSum {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        self.check(x, u)?;
        let mut total = 0.0;
        for t in &self.terms {
            total += t.evaluate(x, u)?;
        }
        Ok(self.scale * total)
    }

    fn quadratic(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<CostQuadratic> {
        self.check(x, u)?;
        let mut out = CostQuadratic::zeros(x.len(), u.len());
        let mut total = 0.0;
        for t in &self.terms {
            let q = t.quadratic_approx(x, u)?;
            total += q.value;
            out.add_scaled(&q, self.scale);
        }
        out.value = self.scale * total;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_link() -> ChainModel {
        ChainModel::new(
            vec![0.55, 0.55],
            vec![0.089, 0.089],
            vec![0.085, 0.085],
            9.81,
        )
        .unwrap()
    }

    fn vsa2() -> ActuationSpec {
        ActuationSpec::vsa(2, vec![0, 1], vec![1e-3; 2], vec![0.05; 2], vec![15.0; 2]).unwrap()
    }

    #[test]
    fn closed_form_values() {
        let c = CostTerm::control_regularization(1e-2, DVector::zeros(2), None).unwrap();
        let u = DVector::from_vec(vec![1.0, 2.0]);
        assert_relative_eq!(
            c.evaluate(&DVector::zeros(8), &u).unwrap(),
            0.025,
            epsilon = 1e-15
        );

        let s = CostTerm::vsa_stiffness(1.0, &vsa2(), 10.0).unwrap();
        let u = DVector::from_vec(vec![0.3, -0.2, 15.0, 0.05]);
        assert_relative_eq!(
            s.evaluate(&DVector::zeros(8), &u).unwrap(),
            149.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn goal_at_target_is_zero() {
        let model = two_link();
        let q = DVector::from_vec(vec![0.7, 0.4]);
        let p = rigid::fk_ee(&model, &q).unwrap();
        let c = CostTerm::goal_tracking(0.1, model, p).unwrap();
        let mut x = DVector::zeros(8);
        x.rows_mut(0, 2).copy_from(&q);
        assert_eq!(c.evaluate(&x, &DVector::zeros(2)).unwrap(), 0.0);
        let quad = c.quadratic_approx(&x, &DVector::zeros(2)).unwrap();
        assert_eq!(quad.lx, DVector::zeros(8));
    }

    #[test]
    fn state_regularization_at_reference() {
        let r = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let c = CostTerm::state_regularization(2.5, r.clone(), None).unwrap();
        let q = c.quadratic_approx(&r, &DVector::zeros(1)).unwrap();
        assert_eq!(q.lx, DVector::zeros(4));
        assert_eq!(q.lxx, DMatrix::identity(4, 4) * 2.5);
    }

    #[test]
    fn stiffness_cost_is_linear() {
        let s = CostTerm::vsa_stiffness(0.5, &vsa2(), 10.0).unwrap();
        let q = s
            .quadratic_approx(
                &DVector::zeros(8),
                &DVector::from_vec(vec![0.0, 0.0, 3.0, 4.0]),
            )
            .unwrap();
        assert_eq!(q.lu.as_slice(), &[0.0, 0.0, 5.0, 5.0]);
        assert_eq!(q.luu, DMatrix::zeros(4, 4));
    }

    #[test]
    fn stiffness_cost_rejects_sea() {
        let sea = ActuationSpec::sea(2, vec![0, 1], vec![1e-3; 2], vec![3.0; 2]).unwrap();
        assert!(matches!(
            CostTerm::vsa_stiffness(1.0, &sea, 10.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn lambda_interpolation() {
        assert_relative_eq!(vsa_lambda(0.0, 100.0, 0.0, 10.0).unwrap(), 10.0);
        assert_eq!(vsa_lambda(4.0, 4.0, 0.05, 15.0).unwrap(), 0.0);
        assert!(vsa_lambda(0.0, 1.0, 10.0, 10.0).is_err());
        assert!(vsa_lambda(0.0, 1.0, 10.0, 0.0).is_err());
    }

    fn fd_gradient(
        c: &CostTerm,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let h = 1e-6;
        let gx = DVector::from_fn(x.len(), |i, _| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            (c.evaluate(&p, u).unwrap() - c.evaluate(&m, u).unwrap()) / (2.0 * h)
        });
        let gu = DVector::from_fn(u.len(), |i, _| {
            let (mut p, mut m) = (u.clone(), u.clone());
            p[i] += h;
            m[i] -= h;
            (c.evaluate(x, &p).unwrap() - c.evaluate(x, &m).unwrap()) / (2.0 * h)
        });
        (gx, gu)
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = two_link();
        let terms = vec![
            CostTerm::goal_tracking(0.1, model.clone(), Vector2::new(0.01, 0.2)).unwrap(),
            CostTerm::tip_velocity(0.3, model.clone(), Vector2::new(0.5, -0.2)).unwrap(),
            CostTerm::state_regularization(
                1.0,
                DVector::from_fn(8, |i, _| i as f64 * 0.1),
                Some(DVector::from_fn(8, |i, _| 1.0 + i as f64)),
            )
            .unwrap(),
            CostTerm::control_regularization(
                1e-2,
                DVector::from_vec(vec![0.0, 0.0, 0.05, 0.05]),
                None,
            )
            .unwrap(),
            CostTerm::vsa_stiffness(1.0, &vsa2(), 10.0).unwrap(),
        ];
        for _ in 0..100 {
            let x = DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::from_fn(4, |_, _| rng.random_range(0.05..15.0));
            for t in &terms {
                let q = t.quadratic_approx(&x, &u).unwrap();
                let (gx, gu) = fd_gradient(t, &x, &u);
                let scale = q.lx.amax().max(q.lu.amax()).max(1e-12);
                let err = (&q.lx - gx).amax().max((&q.lu - gu).amax());
                assert!(err / scale <= 1e-5, "{:?}: {}", t.kind, err / scale);
            }
        }
    }

    #[test]
    fn hessians_are_symmetric_psd_and_exact_for_quadratics() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let model = two_link();
        let goal = CostTerm::goal_tracking(0.1, model.clone(), Vector2::new(0.01, 0.2)).unwrap();
        let vel = CostTerm::tip_velocity(0.2, model, Vector2::new(0.0, 0.0)).unwrap();
        let reg = CostTerm::state_regularization(1.0, DVector::zeros(8), None).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(8, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::zeros(2);
            for t in [&goal, &vel] {
                let h = t.quadratic_approx(&x, &u).unwrap().lxx;
                assert_eq!(h, h.transpose());
                assert!(h.symmetric_eigenvalues().min() > -1e-12);
            }
            // exact Hessian of a quadratic: gradient differences recover lxx
            let hq = reg.quadratic_approx(&x, &u).unwrap().lxx;
            for c in 0..8 {
                let mut p = x.clone();
                p[c] += 1e-3;
                let dg = (reg.quadratic_approx(&p, &u).unwrap().lx
                    - reg.quadratic_approx(&x, &u).unwrap().lx)
                    / 1e-3;
                assert!((dg - hq.column(c)).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn sum_equals_sum_of_terms_and_scales_by_dt() {
        let model = two_link();
        let terms = vec![
            CostTerm::goal_tracking(0.1, model, Vector2::new(0.01, 0.2)).unwrap(),
            CostTerm::control_regularization(1e-2, DVector::zeros(2), None).unwrap(),
            CostTerm::state_regularization(1.0, DVector::zeros(8), None).unwrap(),
        ];
        let x = DVector::from_fn(8, |i, _| (i as f64).sin());
        let u = DVector::from_vec(vec![0.2, -0.4]);
        let total: f64 = terms.iter().map(|t| t.evaluate(&x, &u).unwrap()).sum();
        let running = CostSum::running(terms.clone(), 8, 2, 0.01).unwrap();
        assert_eq!(running.value(&x, &u).unwrap(), 0.01 * total);
        let quad = running.quadratic(&x, &u).unwrap();
        assert_eq!(quad.value, 0.01 * total);
        let terminal_terms = vec![terms[0].clone(), terms[2].clone()];
        let t = CostSum::terminal(terminal_terms.clone(), 8);
        let tot: f64 = terminal_terms
            .iter()
            .map(|c| c.evaluate(&x, &DVector::zeros(0)).unwrap())
            .sum();
        assert_eq!(t.value(&x, &DVector::zeros(0)).unwrap(), tot);
    }

    #[test]
    fn non_negative_with_default_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let s = CostTerm::vsa_stiffness(1.0, &vsa2(), 10.0).unwrap();
        for _ in 0..100 {
            let u = DVector::from_fn(4, |_, _| rng.random_range(0.05..15.0));
            assert!(s.evaluate(&DVector::zeros(8), &u).unwrap() >= 0.0);
        }
    }
}
