//! Block forward dynamics of link + motor systems with elastic transmissions
//! and their analytical derivatives.
//!
//! Link side: `M(q) qdd + C(q, qd) qd + G(q) + K (q - S theta) = 0`.
//! Motor side: `B thdd + S^T K (S theta - q) - tau = 0`.
//!
//! `K` is diagonal over all `n` joints. Actuated entries come from the fixed
//! SEA stiffness or from the VSA control `sigma`; unactuated entries come from
//! the passive stiffness. `B` is diagonal and inverted entrywise.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::rigid::{self, ChainModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActuationKind {
    /// Series elastic: fixed spring per actuated joint, `u = tau`.
    Sea,
    /// Variable stiffness: `u = [tau; sigma]` with box-bounded `sigma`.
    Vsa,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StiffnessSpec {
    Fixed(Vec<f64>),
    Variable { min: Vec<f64>, max: Vec<f64> },
}

/// Elastic actuation of a chain: selection, motor inertias and stiffness law.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationSpec {
    n_joints: usize,
    actuated: Vec<usize>,
    motor_inertia: Vec<f64>,
    stiffness: StiffnessSpec,
    passive_stiffness: Vec<f64>,
    sigma_ref: Vec<f64>,
    stiffness_scale: f64,
}

impl ActuationSpec {
    pub fn sea(
        n_joints: usize,
        actuated: Vec<usize>,
        motor_inertia: Vec<f64>,
        stiffness: Vec<f64>,
    ) -> Result<Self> {
        let m = actuated.len();
        check_dim("SEA stiffness", m, stiffness.len())?;
        if stiffness.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("SEA stiffness must be > 0".into()));
        }
        let spec = Self {
            n_joints,
            sigma_ref: stiffness.clone(),
            actuated,
            motor_inertia,
            stiffness: StiffnessSpec::Fixed(stiffness),
            passive_stiffness: vec![0.0; n_joints],
            stiffness_scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// VSA actuation. The no-load reference stiffness defaults to `sigma_min`.
    pub fn vsa(
        n_joints: usize,
        actuated: Vec<usize>,
        motor_inertia: Vec<f64>,
        sigma_min: Vec<f64>,
        sigma_max: Vec<f64>,
    ) -> Result<Self> {
        let m = actuated.len();
        check_dim("VSA sigma_min", m, sigma_min.len())?;
        check_dim("VSA sigma_max", m, sigma_max.len())?;
        for (lo, hi) in sigma_min.iter().zip(&sigma_max) {
            if !(*lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::InvalidArgument(
                    "VSA bounds must satisfy 0 < sigma_min <= sigma_max".into(),
                ));
            }
        }
        let spec = Self {
            n_joints,
            sigma_ref: sigma_min.clone(),
            actuated,
            motor_inertia,
            stiffness: StiffnessSpec::Variable {
                min: sigma_min,
                max: sigma_max,
            },
            passive_stiffness: vec![0.0; n_joints],
            stiffness_scale: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let m = self.actuated.len();
        if m == 0 || m > self.n_joints {
            return Err(Error::InvalidArgument(
                "number of actuated joints must be in 1..=n".into(),
            ));
        }
        if self.actuated.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "actuated joints must be strictly increasing".into(),
            ));
        }
        if *self.actuated.last().unwrap() >= self.n_joints {
            return Err(Error::InvalidArgument(
                "actuated joint index out of range".into(),
            ));
        }
        check_dim("motor inertias", m, self.motor_inertia.len())?;
        if self
            .motor_inertia
            .iter()
            .any(|b| !(*b > 0.0 && b.is_finite()))
        {
            return Err(Error::InvalidArgument("motor inertias must be > 0".into()));
        }
        Ok(())
    }

    /// Stiffness of the springs on unactuated joints (one value per joint;
    /// entries at actuated joints are ignored).
    pub fn with_passive_stiffness(mut self, passive: Vec<f64>) -> Result<Self> {
        check_dim("passive stiffness", self.n_joints, passive.len())?;
        if passive.iter().any(|k| !(*k >= 0.0 && k.is_finite())) {
            return Err(Error::InvalidArgument(
                "passive stiffness must be >= 0".into(),
            ));
        }
        self.passive_stiffness = passive;
        Ok(self)
    }

    pub fn with_sigma_ref(mut self, sigma_ref: Vec<f64>) -> Result<Self> {
        check_dim("sigma_ref", self.n_motors(), sigma_ref.len())?;
        self.sigma_ref = sigma_ref;
        Ok(self)
    }

    /// Multiplies every entry of `K` (fixed, passive and commanded) by `scale`.
    pub fn with_stiffness_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument("stiffness scale must be > 0".into()));
        }
        self.stiffness_scale = scale;
        Ok(self)
    }

    pub fn kind(&self) -> ActuationKind {
        match self.stiffness {
            StiffnessSpec::Fixed(_) => ActuationKind::Sea,
            StiffnessSpec::Variable { .. } => ActuationKind::Vsa,
        }
    }
    pub fn n_joints(&self) -> usize {
        self.n_joints
    }
    pub fn n_motors(&self) -> usize {
        self.actuated.len()
    }
    pub fn actuated_joints(&self) -> &[usize] {
        &self.actuated
    }
    pub fn motor_inertia(&self) -> &[f64] {
        &self.motor_inertia
    }
    pub fn stiffness(&self) -> &StiffnessSpec {
        &self.stiffness
    }
    pub fn passive_stiffness(&self) -> &[f64] {
        &self.passive_stiffness
    }
    pub fn sigma_ref(&self) -> &[f64] {
        &self.sigma_ref
    }
    pub fn stiffness_scale(&self) -> f64 {
        self.stiffness_scale
    }
    pub fn is_fully_actuated(&self) -> bool {
        self.actuated.len() == self.n_joints
    }

    /// Control dimension: `m` for SEA, `2m` for VSA.
    pub fn control_dim(&self) -> usize {
        match self.kind() {
            ActuationKind::Sea => self.n_motors(),
            ActuationKind::Vsa => 2 * self.n_motors(),
        }
    }

    /// `(sigma_min, sigma_max)` for VSA actuation.
    pub fn sigma_bounds(&self) -> Option<(&[f64], &[f64])> {
        match &self.stiffness {
            StiffnessSpec::Variable { min, max } => Some((min, max)),
            StiffnessSpec::Fixed(_) => None,
        }
    }

    /// Dense selection matrix `S` (n x m).
    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.n_joints, self.n_motors());
        for (j, &i) in self.actuated.iter().enumerate() {
            s[(i, j)] = 1.0;
        }
        s
    }

    /// Diagonal of `K` for the given control.
    pub fn stiffness_diagonal(&self, u: &ControlInput) -> Result<Vec<f64>> {
        let mut k: Vec<f64> = self
            .passive_stiffness
            .iter()
            .map(|p| p * self.stiffness_scale)
            .collect();
        let actuated_values: &[f64] = match (&self.stiffness, &u.sigma) {
            (StiffnessSpec::Fixed(s), _) => s,
            (StiffnessSpec::Variable { .. }, Some(sigma)) => {
                if sigma.iter().any(|s| !(*s > 0.0)) {
                    return Err(Error::InvalidArgument("stiffness input must be > 0".into()));
                }
                sigma.as_slice()
            }
            (StiffnessSpec::Variable { .. }, None) => {
                return Err(Error::InvalidArgument("VSA control requires sigma".into()))
            }
        };
        for (j, &i) in self.actuated.iter().enumerate() {
            k[i] = actuated_values[j] * self.stiffness_scale;
        }
        Ok(k)
    }
}

/// `x = [q, qdot, theta, thetadot]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftState {
    pub q: DVector<f64>,
    pub qdot: DVector<f64>,
    pub theta: DVector<f64>,
    pub thetadot: DVector<f64>,
}

impl SoftState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            q: DVector::zeros(n),
            qdot: DVector::zeros(n),
            theta: DVector::zeros(m),
            thetadot: DVector::zeros(m),
        }
    }

    pub fn from_vector(x: &DVector<f64>, n: usize, m: usize) -> Result<Self> {
        check_dim("soft state", 2 * (n + m), x.len())?;
        Ok(Self {
            q: x.rows(0, n).into_owned(),
            qdot: x.rows(n, n).into_owned(),
            theta: x.rows(2 * n, m).into_owned(),
            thetadot: x.rows(2 * n + m, m).into_owned(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(2 * (self.q.len() + self.theta.len()));
        v.extend_from_slice(self.q.as_slice());
        v.extend_from_slice(self.qdot.as_slice());
        v.extend_from_slice(self.theta.as_slice());
        v.extend_from_slice(self.thetadot.as_slice());
        DVector::from_vec(v)
    }
}

/// `u = tau` (SEA) or `u = [tau; sigma]` (VSA).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput {
    pub tau: DVector<f64>,
    pub sigma: Option<DVector<f64>>,
}

impl ControlInput {
    pub fn sea(tau: DVector<f64>) -> Self {
        Self { tau, sigma: None }
    }
    pub fn vsa(tau: DVector<f64>, sigma: DVector<f64>) -> Self {
        Self {
            tau,
            sigma: Some(sigma),
        }
    }

    pub fn from_vector(u: &DVector<f64>, kind: ActuationKind, m: usize) -> Result<Self> {
        match kind {
            ActuationKind::Sea => {
                check_dim("SEA control", m, u.len())?;
                Ok(Self::sea(u.clone()))
            }
            ActuationKind::Vsa => {
                check_dim("VSA control", 2 * m, u.len())?;
                Ok(Self::vsa(
                    u.rows(0, m).into_owned(),
                    u.rows(m, m).into_owned(),
                ))
            }
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        match &self.sigma {
            None => self.tau.clone(),
            Some(s) => {
                let mut v = self.tau.as_slice().to_vec();
                v.extend_from_slice(s.as_slice());
                DVector::from_vec(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAccel {
    pub qddot: DVector<f64>,
    pub thetaddot: DVector<f64>,
}

impl SoftAccel {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = self.qddot.as_slice().to_vec();
        v.extend_from_slice(self.thetaddot.as_slice());
        DVector::from_vec(v)
    }
}

/// Jacobians of `[qdd; thdd]` (rows) with respect to `x = [q, qd, th, thd]`
/// and `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelJacobians {
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
}

fn check_inputs(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<()> {
    let n = model.n_links();
    let m = act.n_motors();
    check_dim("actuation joints", n, act.n_joints())?;
    check_dim("q", n, x.q.len())?;
    check_dim("qdot", n, x.qdot.len())?;
    check_dim("theta", m, x.theta.len())?;
    check_dim("thetadot", m, x.thetadot.len())?;
    check_dim("tau", m, u.tau.len())?;
    for v in [&x.q, &x.qdot, &x.theta, &x.thetadot, &u.tau] {
        check_finite("soft state/control", v.as_slice())?;
    }
    match (act.kind(), &u.sigma) {
        (ActuationKind::Sea, None) => Ok(()),
        (ActuationKind::Sea, Some(_)) => Err(Error::InvalidArgument(
            "SEA actuation takes no stiffness input".into(),
        )),
        (ActuationKind::Vsa, Some(s)) => {
            check_dim("sigma", m, s.len())?;
            check_finite("sigma", s.as_slice())
        }
        (ActuationKind::Vsa, None) => {
            Err(Error::InvalidArgument("VSA control requires sigma".into()))
        }
    }
}

/// Intermediate torques of the block system.
struct BlockTorques {
    stiffness: Vec<f64>,
    tau_link: DVector<f64>,
    tau_motor: DVector<f64>,
}

/// `S = I` route: joint `i` is driven by motor `i`.
fn block_torques_full(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<BlockTorques> {
    let k = act.stiffness_diagonal(u)?;
    let b = rigid::bias(model, &x.q, &x.qdot)?;
    let n = model.n_links();
    let tau_link = DVector::from_fn(n, |i, _| -b[i] - k[i] * (x.q[i] - x.theta[i]));
    let tau_motor = DVector::from_fn(n, |j, _| -(k[j] * (x.theta[j] - x.q[j])) + u.tau[j]);
    Ok(BlockTorques {
        stiffness: k,
        tau_link,
        tau_motor,
    })
}

/// General route through the dense selection matrix.
fn block_torques_selected(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<BlockTorques> {
    let k = act.stiffness_diagonal(u)?;
    let kmat = DMatrix::from_diagonal(&DVector::from_column_slice(&k));
    let s = act.selection_matrix();
    let b = rigid::bias(model, &x.q, &x.qdot)?;
    let s_theta = &s * &x.theta;
    let tau_link = -b - &kmat * (&x.q - &s_theta);
    let tau_motor = -(s.transpose() * &kmat * (&s_theta - &x.q)) + &u.tau;
    Ok(BlockTorques {
        stiffness: k,
        tau_link,
        tau_motor,
    })
}

fn solve_accel(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    torques: &BlockTorques,
) -> Result<(SoftAccel, nalgebra::Cholesky<f64, nalgebra::Dyn>)> {
    let chol = rigid::mass_matrix_cholesky(model, &x.q)?;
    let qddot = chol.solve(&torques.tau_link);
    let thetaddot = DVector::from_fn(act.n_motors(), |j, _| {
        torques.tau_motor[j] / act.motor_inertia[j]
    });
    Ok((SoftAccel { qddot, thetaddot }, chol))
}

/// Link and motor accelerations of the coupled system.
pub fn forward_dynamics(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<SoftAccel> {
    check_inputs(model, act, x, u)?;
    let torques = if act.is_fully_actuated() {
        block_torques_full(model, act, x, u)?
    } else {
        block_torques_selected(model, act, x, u)?
    };
    Ok(solve_accel(model, act, x, &torques)?.0)
}

/// [`forward_dynamics`] forced through the selection-matrix route, whatever `S` is.
pub fn forward_dynamics_selected(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<SoftAccel> {
    check_inputs(model, act, x, u)?;
    let torques = block_torques_selected(model, act, x, u)?;
    Ok(solve_accel(model, act, x, &torques)?.0)
}

/// Analytical Jacobians of [`forward_dynamics`].
pub fn fd_derivatives(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<(SoftAccel, AccelJacobians)> {
    check_inputs(model, act, x, u)?;
    if act.is_fully_actuated() {
        derivatives_full(model, act, x, u)
    } else {
        derivatives_selected(model, act, x, u)
    }
}

/// [`fd_derivatives`] forced through the selection-matrix route.
pub fn fd_derivatives_selected(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<(SoftAccel, AccelJacobians)> {
    check_inputs(model, act, x, u)?;
    derivatives_selected(model, act, x, u)
}

fn derivatives_full(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<(SoftAccel, AccelJacobians)> {
    let n = model.n_links();
    let torques = block_torques_full(model, act, x, u)?;
    let (acc, chol) = solve_accel(model, act, x, &torques)?;
    let k = &torques.stiffness;
    let d = rigid::rnea_derivatives(model, &x.q, &x.qdot, &acc.qddot)?;
    let kmat = DMatrix::from_diagonal(&DVector::from_column_slice(k));
    let nu = act.control_dim();
    let mut dx = DMatrix::zeros(2 * n, 4 * n);
    let mut du = DMatrix::zeros(2 * n, nu);

    dx.view_mut((0, 0), (n, n))
        .copy_from(&chol.solve(&(-&d.dtau_dq - &kmat)));
    dx.view_mut((0, n), (n, n))
        .copy_from(&chol.solve(&(-&d.dtau_dqdot)));
    dx.view_mut((0, 2 * n), (n, n))
        .copy_from(&chol.solve(&kmat));
    for j in 0..n {
        let binv = 1.0 / act.motor_inertia[j];
        dx[(n + j, j)] = k[j] * binv;
        dx[(n + j, 2 * n + j)] = -k[j] * binv;
        du[(n + j, j)] = binv;
    }
    if u.sigma.is_some() {
        let scale = act.stiffness_scale;
        let mut dlink = DMatrix::zeros(n, n);
        for j in 0..n {
            dlink[(j, j)] = -(x.q[j] - x.theta[j]) * scale;
            du[(n + j, n + j)] = 1.0 / act.motor_inertia[j] * (-(x.theta[j] - x.q[j]) * scale);
        }
        du.view_mut((0, n), (n, n)).copy_from(&chol.solve(&dlink));
    }
    Ok((acc, AccelJacobians { dx, du }))
}

fn derivatives_selected(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<(SoftAccel, AccelJacobians)> {
    let n = model.n_links();
    let m = act.n_motors();
    let torques = block_torques_selected(model, act, x, u)?;
    let (acc, chol) = solve_accel(model, act, x, &torques)?;
    let d = rigid::rnea_derivatives(model, &x.q, &x.qdot, &acc.qddot)?;
    let kmat = DMatrix::from_diagonal(&DVector::from_column_slice(&torques.stiffness));
    let s = act.selection_matrix();
    let binv = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        act.motor_inertia.iter().map(|b| 1.0 / b),
    ));
    let nu = act.control_dim();
    let mut dx = DMatrix::zeros(n + m, 2 * (n + m));
    let mut du = DMatrix::zeros(n + m, nu);

    let ks = &kmat * &s;
    let stk = s.transpose() * &kmat;
    dx.view_mut((0, 0), (n, n))
        .copy_from(&chol.solve(&(-&d.dtau_dq - &kmat)));
    dx.view_mut((0, n), (n, n))
        .copy_from(&chol.solve(&(-&d.dtau_dqdot)));
    dx.view_mut((0, 2 * n), (n, m)).copy_from(&chol.solve(&ks));
    dx.view_mut((n, 0), (m, n)).copy_from(&(&binv * &stk));
    dx.view_mut((n, 2 * n), (m, m))
        .copy_from(&(-(&binv * (&stk * &s))));
    du.view_mut((n, 0), (m, m)).copy_from(&binv);

    if u.sigma.is_some() {
        let scale = act.stiffness_scale;
        let s_theta = &s * &x.theta;
        // d(tau_link)/d(sigma_j) = -(q_i - (S theta)_i) e_i, i = actuated[j]
        let deflection = &x.q - &s_theta;
        let dlink = -(DMatrix::from_diagonal(&deflection) * &s) * scale;
        // d(tau_motor)/d(sigma) = -S^T diag(S theta - q) S
        let dmotor = -(s.transpose() * DMatrix::from_diagonal(&(&s_theta - &x.q)) * &s) * scale;
        du.view_mut((0, m), (n, m)).copy_from(&chol.solve(&dlink));
        du.view_mut((n, m), (m, m)).copy_from(&(&binv * dmotor));
    }
    Ok((acc, AccelJacobians { dx, du }))
}

/// Semi-implicit Euler step: velocities first, then positions with the new
/// velocities.
pub fn integrate(x: &SoftState, a: &SoftAccel, dt: f64) -> Result<SoftState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "time step must be > 0, got {dt}"
        )));
    }
    check_dim("qddot", x.q.len(), a.qddot.len())?;
    check_dim("thetaddot", x.theta.len(), a.thetaddot.len())?;
    let qdot = &x.qdot + &a.qddot * dt;
    let thetadot = &x.thetadot + &a.thetaddot * dt;
    Ok(SoftState {
        q: &x.q + &qdot * dt,
        theta: &x.theta + &thetadot * dt,
        qdot,
        thetadot,
    })
}

/// Mechanical energy: link kinetic + motor kinetic + elastic + gravitational.
pub fn total_energy(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
) -> Result<f64> {
    check_inputs(model, act, x, u)?;
    let k = act.stiffness_diagonal(u)?;
    let s_theta = act.selection_matrix() * &x.theta;
    let elastic: f64 = (0..model.n_links())
        .map(|i| 0.5 * k[i] * (x.q[i] - s_theta[i]).powi(2))
        .sum();
    let motor: f64 = (0..act.n_motors())
        .map(|j| 0.5 * act.motor_inertia[j] * x.thetadot[j].powi(2))
        .sum();
    Ok(rigid::kinetic_energy(model, &x.q, &x.qdot)?
        + rigid::potential_energy(model, &x.q)?
        + motor
        + elastic)
}
