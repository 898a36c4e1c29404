//! Continuous-time systems and their semi-implicit Euler discretization.

use nalgebra::{DMatrix, DVector};

use crate::ddp::problem::{DiscreteDynamics, Linearization};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::rigid::{self, ChainModel};
use crate::soft::{self, ActuationSpec, ControlInput, SoftState};

/// Second-order system `a = f(x, u)`. Acceleration row `r` integrates velocity
/// coordinate `velocity_index(r)` into position coordinate `position_index(r)`.
pub trait ContinuousDynamics: Send + Sync {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    /// Number of acceleration rows (half the state dimension).
    fn n_accel(&self) -> usize {
        self.nx() / 2
    }
    fn position_index(&self, r: usize) -> usize;
    fn velocity_index(&self, r: usize) -> usize;
    fn accel(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(a, da/dx, da/du)`.
    fn accel_derivatives(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)>;
}

/// Elastic-joint chain, state `[q, qd, theta, thetad]`.
#[derive(Debug, Clone)]
pub struct SoftSystem {
    pub model: ChainModel,
    pub actuation: ActuationSpec,
}

impl SoftSystem {
    pub fn new(model: ChainModel, actuation: ActuationSpec) -> Result<Self> {
        check_dim("actuation joints", model.n_links(), actuation.n_joints())?;
        Ok(Self { model, actuation })
    }

    fn split(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(SoftState, ControlInput)> {
        let n = self.model.n_links();
        let m = self.actuation.n_motors();
        Ok((
            SoftState::from_vector(x, n, m)?,
            ControlInput::from_vector(u, self.actuation.kind(), m)?,
        ))
    }
}

impl ContinuousDynamics for SoftSystem {
    fn nx(&self) -> usize {
        2 * (self.model.n_links() + self.actuation.n_motors())
    }
    fn nu(&self) -> usize {
        self.actuation.control_dim()
    }
    fn position_index(&self, r: usize) -> usize {
        let n = self.model.n_links();
        if r < n {
            r
        } else {
            n + r
        }
    }
    fn velocity_index(&self, r: usize) -> usize {
        let n = self.model.n_links();
        let m = self.actuation.n_motors();
        if r < n {
            n + r
        } else {
            n + m + r
        }
    }
    fn accel(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (xs, us) = self.split(x, u)?;
        Ok(soft::forward_dynamics(&self.model, &self.actuation, &xs, &us)?.to_vector())
    }
    fn accel_derivatives(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (xs, us) = self.split(x, u)?;
        let (a, jac) = soft::fd_derivatives(&self.model, &self.actuation, &xs, &us)?;
        Ok((a.to_vector(), jac.dx, jac.du))
    }
}

/// Rigid chain `M qdd + b + K_p q = S tau`, state `[q, qd]`, control `tau`.
///
/// `K_p` holds springs to zero on passive joints, so the underactuated
/// elastic arm has a rigid-actuator counterpart.
#[derive(Debug, Clone)]
pub struct RigidSystem {
    pub model: ChainModel,
    actuated: Vec<usize>,
    passive_stiffness: Vec<f64>,
}

impl RigidSystem {
    pub fn fully_actuated(model: ChainModel) -> Self {
        let n = model.n_links();
        Self {
            model,
            actuated: (0..n).collect(),
            passive_stiffness: vec![0.0; n],
        }
    }

    pub fn new(
        model: ChainModel,
        actuated: Vec<usize>,
        passive_stiffness: Vec<f64>,
    ) -> Result<Self> {
        let n = model.n_links();
        check_dim("passive stiffness", n, passive_stiffness.len())?;
        if actuated.is_empty()
            || actuated.windows(2).any(|w| w[0] >= w[1])
            || *actuated.last().unwrap() >= n
        {
            return Err(Error::InvalidArgument(
                "actuated joints must be strictly increasing indices below n".into(),
            ));
        }
        check_finite("passive stiffness", &passive_stiffness)?;
        Ok(Self {
            model,
            actuated,
            passive_stiffness,
        })
    }

    pub fn actuated_joints(&self) -> &[usize] {
        &self.actuated
    }

    fn generalized_force(&self, q: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut f = DVector::from_fn(q.len(), |i, _| -self.passive_stiffness[i] * q[i]);
        for (j, &i) in self.actuated.iter().enumerate() {
            f[i] += u[j];
        }
        f
    }

    fn split(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.model.n_links();
        check_dim("rigid state", 2 * n, x.len())?;
        check_dim("rigid control", self.actuated.len(), u.len())?;
        check_finite("rigid control", u.as_slice())?;
        Ok((x.rows(0, n).into_owned(), x.rows(n, n).into_owned()))
    }
}

impl ContinuousDynamics for RigidSystem {
    fn nx(&self) -> usize {
        2 * self.model.n_links()
    }
    fn nu(&self) -> usize {
        self.actuated.len()
    }
    fn position_index(&self, r: usize) -> usize {
        r
    }
    fn velocity_index(&self, r: usize) -> usize {
        self.model.n_links() + r
    }
    fn accel(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let (q, qd) = self.split(x, u)?;
        let b = rigid::bias(&self.model, &q, &qd)?;
        let chol = rigid::mass_matrix_cholesky(&self.model, &q)?;
        Ok(chol.solve(&(self.generalized_force(&q, u) - b)))
    }
    fn accel_derivatives(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        let (q, qd) = self.split(x, u)?;
        let n = q.len();
        let b = rigid::bias(&self.model, &q, &qd)?;
        let chol = rigid::mass_matrix_cholesky(&self.model, &q)?;
        let a = chol.solve(&(self.generalized_force(&q, u) - b));
        let d = rigid::rnea_derivatives(&self.model, &q, &qd, &a)?;
        let kp = DMatrix::from_diagonal(&DVector::from_column_slice(&self.passive_stiffness));
        let mut dx = DMatrix::zeros(n, 2 * n);
        dx.view_mut((0, 0), (n, n))
            .copy_from(&chol.solve(&(-&d.dtau_dq - kp)));
        dx.view_mut((0, n), (n, n))
            .copy_from(&chol.solve(&(-&d.dtau_dqdot)));
        let mut s = DMatrix::zeros(n, self.actuated.len());
        for (j, &i) in self.actuated.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        let du = chol.solve(&s);
        Ok((a, dx, du))
    }
}

/// Semi-implicit Euler discretization of a [`ContinuousDynamics`].
#[derive(Debug, Clone)]
pub struct EulerStep<D> {
    pub system: D,
    pub dt: f64,
}

impl<D: ContinuousDynamics> EulerStep<D> {
    pub fn new(system: D, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "time step must be > 0, got {dt}"
            )));
        }
        Ok(Self { system, dt })
    }

    fn advance(&self, x: &DVector<f64>, a: &DVector<f64>) -> DVector<f64> {
        let mut next = x.clone();
        for r in 0..self.system.n_accel() {
            let (p, v) = (self.system.position_index(r), self.system.velocity_index(r));
            next[v] = x[v] + a[r] * self.dt;
            next[p] = x[p] + next[v] * self.dt;
        }
        next
    }
}

impl<D: ContinuousDynamics> DiscreteDynamics for EulerStep<D> {
    fn nx(&self) -> usize {
        self.system.nx()
    }
    fn nu(&self) -> usize {
        self.system.nu()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.nx(), x.len())?;
        check_dim("control", self.nu(), u.len())?;
        let a = self.system.accel(x, u)?;
        let next = self.advance(x, &a);
        check_finite("discrete step", next.as_slice())?;
        Ok(next)
    }
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        check_dim("state", self.nx(), x.len())?;
        check_dim("control", self.nu(), u.len())?;
        let (a, ax, au) = self.system.accel_derivatives(x, u)?;
        let next = self.advance(x, &a);
        check_finite("discrete step", next.as_slice())?;
        let dt = self.dt;
        let nx = self.nx();
        let mut fx = DMatrix::identity(nx, nx);
        let mut fu = DMatrix::zeros(nx, self.nu());
        for r in 0..self.system.n_accel() {
            let (p, v) = (self.system.position_index(r), self.system.velocity_index(r));
            for c in 0..nx {
                fx[(v, c)] += dt * ax[(r, c)];
                fx[(p, c)] += dt * dt * ax[(r, c)];
            }
            fx[(p, v)] += dt;
            for c in 0..self.nu() {
                fu[(v, c)] = dt * au[(r, c)];
                fu[(p, c)] = dt * dt * au[(r, c)];
            }
        }
        Ok(Linearization { next, fx, fu })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central<F: Fn(&DVector<f64>) -> DVector<f64>>(
        f: F,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let y = f(x);
        let mut j = DMatrix::zeros(y.len(), x.len());
        for c in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[c] += h;
            m[c] -= h;
            j.set_column(c, &((f(&p) - f(&m)) / (2.0 * h)));
        }
        j
    }

    fn check_discrete<D: DiscreteDynamics>(d: &D, x: &DVector<f64>, u: &DVector<f64>) {
        let lin = d.linearize(x, u).unwrap();
        assert_eq!(lin.next, d.step(x, u).unwrap());
        let fx = central(|x| d.step(x, u).unwrap(), x, 1e-6);
        let fu = central(|u| d.step(x, u).unwrap(), u, 1e-6);
        let ex = (&lin.fx - fx).amax() / lin.fx.amax();
        let eu = (&lin.fu - fu).amax() / lin.fu.amax();
        assert!(ex < 1e-6 && eu < 1e-6, "{ex} {eu}");
    }

    fn two_link() -> ChainModel {
        ChainModel::new(
            vec![0.55, 0.55],
            vec![0.089, 0.089],
            vec![0.085, 0.085],
            9.81,
        )
        .unwrap()
    }

    #[test]
    fn soft_step_jacobians_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let act = ActuationSpec::vsa(2, vec![0], vec![1e-3], vec![0.05], vec![15.0])
            .unwrap()
            .with_passive_stiffness(vec![0.0, 2.0])
            .unwrap();
        let d = EulerStep::new(SoftSystem::new(two_link(), act).unwrap(), 1e-2).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_vec(vec![
                rng.random_range(-0.5..0.5),
                rng.random_range(1.0..10.0),
            ]);
            check_discrete(&d, &x, &u);
        }
    }

    #[test]
    fn rigid_step_jacobians_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sys = RigidSystem::new(two_link(), vec![0], vec![0.0, 2.0]).unwrap();
        let d = EulerStep::new(sys, 1e-2).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0));
            check_discrete(&d, &x, &u);
        }
    }

    #[test]
    fn soft_step_matches_state_integrator() {
        let act = ActuationSpec::sea(2, vec![0, 1], vec![1e-3; 2], vec![3.0; 2]).unwrap();
        let model = two_link();
        let d = EulerStep::new(SoftSystem::new(model.clone(), act.clone()).unwrap(), 1e-2).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3, -0.1, 0.0, 0.25, 0.5, 0.4]);
        let u = DVector::from_vec(vec![0.01, -0.02]);
        let xs = SoftState::from_vector(&x, 2, 2).unwrap();
        let us = ControlInput::sea(u.clone());
        let a = soft::forward_dynamics(&model, &act, &xs, &us).unwrap();
        let direct = soft::integrate(&xs, &a, 1e-2).unwrap().to_vector();
        assert_eq!(d.step(&x, &u).unwrap(), direct);
    }

    #[test]
    fn rigid_fully_actuated_matches_inverse_dynamics() {
        let model = two_link();
        let sys = RigidSystem::fully_actuated(model.clone());
        let q = DVector::from_vec(vec![0.4, -1.1]);
        let qd = DVector::from_vec(vec![0.7, 0.2]);
        let qdd = DVector::from_vec(vec![-1.0, 3.0]);
        let tau = rigid::rnea(&model, &q, &qd, &qdd).unwrap();
        let mut x = q.as_slice().to_vec();
        x.extend_from_slice(qd.as_slice());
        let a = sys.accel(&DVector::from_vec(x), &tau).unwrap();
        assert!((a - qdd).amax() < 1e-10);
    }
}
