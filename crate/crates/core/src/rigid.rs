//! Rigid-body layer for planar serial chains of revolute joints.
//!
//! Conventions: the zero configuration stretches the chain along +x of the
//! base frame, joint angles are relative (link `i` has absolute angle
//! `q[0] + ... + q[i]`), and gravity acts along -y. Inverse dynamics uses a
//! planar recursive Newton-Euler pass with the base accelerated upward by `g`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector2};

use crate::error::{check_dim, check_finite, Error, Result};

/// Rotational inertia model for each link about its centre of mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InertiaMode {
    /// All link mass concentrated at the COM.
    #[default]
    PointMass,
    /// Uniform slender rod of the link length, `m l^2 / 12` about the COM.
    Rod,
}

/// Planar serial chain description. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    masses: Vec<f64>,
    lengths: Vec<f64>,
    com_offsets: Vec<f64>,
    gravity: f64,
    inertia_mode: InertiaMode,
    base: Vector2<f64>,
}

impl ChainModel {
    pub fn new(
        masses: Vec<f64>,
        lengths: Vec<f64>,
        com_offsets: Vec<f64>,
        gravity: f64,
    ) -> Result<Self> {
        let n = masses.len();
        if n == 0 {
            return Err(Error::InvalidArgument(
                "chain needs at least one link".into(),
            ));
        }
        check_dim("link lengths", n, lengths.len())?;
        check_dim("com offsets", n, com_offsets.len())?;
        check_finite("chain parameters", &masses)?;
        check_finite("chain parameters", &lengths)?;
        check_finite("chain parameters", &com_offsets)?;
        if !gravity.is_finite() {
            return Err(Error::NonFinite("gravity"));
        }
        for i in 0..n {
            if masses[i] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "mass of link {i} must be > 0"
                )));
            }
            if lengths[i] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "length of link {i} must be > 0"
                )));
            }
            if com_offsets[i] <= 0.0 || com_offsets[i] > lengths[i] {
                return Err(Error::InvalidArgument(format!(
                    "com offset of link {i} must lie in (0, length]"
                )));
            }
        }
        Ok(Self {
            masses,
            lengths,
            com_offsets,
            gravity,
            inertia_mode: InertiaMode::PointMass,
            base: Vector2::zeros(),
        })
    }

    pub fn with_inertia_mode(mut self, mode: InertiaMode) -> Self {
        self.inertia_mode = mode;
        self
    }

    /// Places the first joint at `base` in the world frame.
    pub fn with_base(mut self, base: Vector2<f64>) -> Self {
        self.base = base;
        self
    }

    /// Copy of the chain with every link mass multiplied by `factor`.
    pub fn with_mass_scale(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::InvalidArgument("mass scale must be > 0".into()));
        }
        let mut out = self.clone();
        out.masses.iter_mut().for_each(|m| *m *= factor);
        Ok(out)
    }

    pub fn n_links(&self) -> usize {
        self.masses.len()
    }
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }
    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }
    pub fn com_offsets(&self) -> &[f64] {
        &self.com_offsets
    }
    pub fn gravity(&self) -> f64 {
        self.gravity
    }
    pub fn inertia_mode(&self) -> InertiaMode {
        self.inertia_mode
    }
    pub fn base(&self) -> Vector2<f64> {
        self.base
    }

    /// Rotational inertia of link `i` about its COM.
    pub fn link_inertia(&self, i: usize) -> f64 {
        match self.inertia_mode {
            InertiaMode::PointMass => 0.0,
            InertiaMode::Rod => self.masses[i] * self.lengths[i] * self.lengths[i] / 12.0,
        }
    }

    fn check_q(&self, q: &DVector<f64>) -> Result<()> {
        check_dim("joint positions", self.n_links(), q.len())?;
        check_finite("joint positions", q.as_slice())
    }

    fn check_state(&self, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<()> {
        self.check_q(q)?;
        check_dim("joint velocities", self.n_links(), qdot.len())?;
        check_finite("joint velocities", qdot.as_slice())
    }
}

#[inline]
fn perp(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

#[inline]
fn cross(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

fn link_directions(q: &DVector<f64>) -> Vec<Vector2<f64>> {
    let mut phi = 0.0;
    q.iter()
        .map(|qi| {
            phi += qi;
            Vector2::new(phi.cos(), phi.sin())
        })
        .collect()
}

/// Quantities of the outward RNEA sweep, kept for the derivative sweeps.
struct Sweep {
    dir: Vec<Vector2<f64>>,
    omega: Vec<f64>,
    alpha: Vec<f64>,
    /// Inertial force of each link and force transmitted through each joint.
    force_link: Vec<Vector2<f64>>,
    force_joint: Vec<Vector2<f64>>,
    tau: DVector<f64>,
}

fn sweep(
    model: &ChainModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
    gravity: f64,
) -> Sweep {
    let n = model.n_links();
    let dir = link_directions(q);
    let mut omega = vec![0.0; n];
    let mut alpha = vec![0.0; n];
    let mut acc_com = vec![Vector2::zeros(); n];

    let mut w = 0.0;
    let mut al = 0.0;
    let mut acc_origin = Vector2::new(0.0, gravity);
    for i in 0..n {
        if i > 0 {
            let r = dir[i - 1] * model.lengths[i - 1];
            acc_origin += perp(r) * alpha[i - 1] - r * (omega[i - 1] * omega[i - 1]);
        }
        w += qdot[i];
        al += qddot[i];
        omega[i] = w;
        alpha[i] = al;
        let c = dir[i] * model.com_offsets[i];
        acc_com[i] = acc_origin + perp(c) * al - c * (w * w);
    }

    let mut force_link = vec![Vector2::zeros(); n];
    let mut force_joint = vec![Vector2::zeros(); n + 1];
    let mut tau = DVector::zeros(n);
    let mut moment_child = 0.0;
    for i in (0..n).rev() {
        let c = dir[i] * model.com_offsets[i];
        let r = dir[i] * model.lengths[i];
        let f_link = acc_com[i] * model.masses[i];
        let f_child = force_joint[i + 1];
        force_link[i] = f_link;
        force_joint[i] = f_link + f_child;
        let moment =
            model.link_inertia(i) * alpha[i] + moment_child + cross(c, f_link) + cross(r, f_child);
        tau[i] = moment;
        moment_child = moment;
    }

    Sweep {
        dir,
        omega,
        alpha,
        force_link,
        force_joint,
        tau,
    }
}

/// Joint-space inertia matrix `M(q)`, assembled from COM velocity Jacobians.
///
/// `M_ij = sum_{k >= max(i,j)} I_k + m_k (c_k - o_i) . (c_k - o_j)` where `o_i`
/// is the position of joint `i` and `c_k` the COM of link `k`.
pub fn mass_matrix(model: &ChainModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let n = model.n_links();
    let dir = link_directions(q);
    let mut origins = Vec::with_capacity(n);
    let mut o = Vector2::zeros();
    for i in 0..n {
        origins.push(o);
        o += dir[i] * model.lengths[i];
    }
    let coms: Vec<Vector2<f64>> = (0..n)
        .map(|k| origins[k] + dir[k] * model.com_offsets[k])
        .collect();

    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for k in j..n {
                let ri = coms[k] - origins[i];
                let rj = coms[k] - origins[j];
                acc += model.link_inertia(k) + model.masses[k] * ri.dot(&rj);
            }
            m[(i, j)] = acc;
            m[(j, i)] = acc;
        }
    }
    Ok(m)
}

/// Cholesky factor of the mass matrix.
pub fn mass_matrix_cholesky(model: &ChainModel, q: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let m = mass_matrix(model, q)?;
    Cholesky::new(m).ok_or_else(|| Error::Internal("mass matrix is not positive definite".into()))
}

/// Inverse dynamics: `M(q) qddot + C(q, qdot) qdot + G(q)`.
pub fn rnea(
    model: &ChainModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
) -> Result<DVector<f64>> {
    model.check_state(q, qdot)?;
    check_dim("joint accelerations", model.n_links(), qddot.len())?;
    Ok(sweep(model, q, qdot, qddot, model.gravity).tau)
}

/// Bias torques `C(q, qdot) qdot + G(q)`.
pub fn bias(model: &ChainModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_state(q, qdot)?;
    let zero = DVector::zeros(model.n_links());
    Ok(sweep(model, q, qdot, &zero, model.gravity).tau)
}

/// Gravity torques `G(q)`.
pub fn gravity_torques(model: &ChainModel, q: &DVector<f64>) -> Result<DVector<f64>> {
    model.check_q(q)?;
    let zero = DVector::zeros(model.n_links());
    Ok(sweep(model, q, &zero, &zero, model.gravity).tau)
}

/// Partial derivatives of the inverse dynamics.
#[derive(Debug, Clone)]
pub struct RneaDerivatives {
    pub dtau_dq: DMatrix<f64>,
    pub dtau_dqdot: DMatrix<f64>,
}

/// Analytical derivatives of [`rnea`] with respect to `q` and `qdot`.
///
/// Each column is obtained by propagating the tangent of the recursion: a
/// change of `q_j` rotates every link distal to joint `j`, a change of
/// `qdot_j` shifts their angular velocity.
pub fn rnea_derivatives(
    model: &ChainModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
    qddot: &DVector<f64>,
) -> Result<RneaDerivatives> {
    model.check_state(q, qdot)?;
    check_dim("joint accelerations", model.n_links(), qddot.len())?;
    let n = model.n_links();
    let s = sweep(model, q, qdot, qddot, model.gravity);
    let mut dtau_dq = DMatrix::zeros(n, n);
    let mut dtau_dqdot = DMatrix::zeros(n, n);

    let mut d_acc_com = vec![Vector2::zeros(); n];
    for j in 0..n {
        // position tangent
        let mut d_acc_origin = Vector2::zeros();
        for i in 0..n {
            if i > 0 && i - 1 >= j {
                let dr = perp(s.dir[i - 1]) * model.lengths[i - 1];
                d_acc_origin += perp(dr) * s.alpha[i - 1] - dr * (s.omega[i - 1] * s.omega[i - 1]);
            }
            d_acc_com[i] = d_acc_origin;
            if i >= j {
                let dc = perp(s.dir[i]) * model.com_offsets[i];
                d_acc_com[i] += perp(dc) * s.alpha[i] - dc * (s.omega[i] * s.omega[i]);
            }
        }
        let mut d_force_child = Vector2::zeros();
        let mut d_moment_child = 0.0;
        for i in (0..n).rev() {
            let c = s.dir[i] * model.com_offsets[i];
            let r = s.dir[i] * model.lengths[i];
            let d_force_link = d_acc_com[i] * model.masses[i];
            let mut d_moment = d_moment_child + cross(c, d_force_link) + cross(r, d_force_child);
            if i >= j {
                let dc = perp(s.dir[i]) * model.com_offsets[i];
                let dr = perp(s.dir[i]) * model.lengths[i];
                d_moment += cross(dc, s.force_link[i]) + cross(dr, s.force_joint[i + 1]);
            }
            dtau_dq[(i, j)] = d_moment;
            d_moment_child = d_moment;
            d_force_child += d_force_link;
        }

        // velocity tangent
        let mut d_acc_origin = Vector2::zeros();
        for i in 0..n {
            if i > 0 && i - 1 >= j {
                let r = s.dir[i - 1] * model.lengths[i - 1];
                d_acc_origin -= r * (2.0 * s.omega[i - 1]);
            }
            d_acc_com[i] = d_acc_origin;
            if i >= j {
                let c = s.dir[i] * model.com_offsets[i];
                d_acc_com[i] -= c * (2.0 * s.omega[i]);
            }
        }
        let mut d_force_child = Vector2::zeros();
        let mut d_moment_child = 0.0;
        for i in (0..n).rev() {
            let c = s.dir[i] * model.com_offsets[i];
            let r = s.dir[i] * model.lengths[i];
            let d_force_link = d_acc_com[i] * model.masses[i];
            let d_moment = d_moment_child + cross(c, d_force_link) + cross(r, d_force_child);
            dtau_dqdot[(i, j)] = d_moment;
            d_moment_child = d_moment;
            d_force_child += d_force_link;
        }
    }
    Ok(RneaDerivatives {
        dtau_dq,
        dtau_dqdot,
    })
}

/// Planar position of the chain tip.
pub fn fk_ee(model: &ChainModel, q: &DVector<f64>) -> Result<Vector2<f64>> {
    model.check_q(q)?;
    let dir = link_directions(q);
    Ok(dir
        .iter()
        .zip(&model.lengths)
        .fold(model.base, |p, (d, l)| p + d * *l))
}

/// Tip position Jacobian (2 x n). Column `j` is `perp(tip - o_j)`.
pub fn fk_jacobian(model: &ChainModel, q: &DVector<f64>) -> Result<DMatrix<f64>> {
    model.check_q(q)?;
    let n = model.n_links();
    let dir = link_directions(q);
    let mut jac = DMatrix::zeros(2, n);
    let mut acc = Vector2::zeros();
    for j in (0..n).rev() {
        acc += perp(dir[j]) * model.lengths[j];
        jac[(0, j)] = acc.x;
        jac[(1, j)] = acc.y;
    }
    Ok(jac)
}

/// Tip linear velocity `J(q) qdot` and its partial derivative with respect to `q`.
pub fn tip_velocity(
    model: &ChainModel,
    q: &DVector<f64>,
    qdot: &DVector<f64>,
) -> Result<(Vector2<f64>, DMatrix<f64>)> {
    model.check_state(q, qdot)?;
    let n = model.n_links();
    let dir = link_directions(q);
    let mut omega = Vec::with_capacity(n);
    let mut w = 0.0;
    for qd in qdot.iter() {
        w += qd;
        omega.push(w);
    }
    let mut vel = Vector2::zeros();
    for k in 0..n {
        vel += perp(dir[k]) * (model.lengths[k] * omega[k]);
    }
    // d/dq_j perp(e_k) = -e_k for k >= j
    let mut dv_dq = DMatrix::zeros(2, n);
    let mut acc = Vector2::zeros();
    for j in (0..n).rev() {
        acc -= dir[j] * (model.lengths[j] * omega[j]);
        dv_dq[(0, j)] = acc.x;
        dv_dq[(1, j)] = acc.y;
    }
    Ok((vel, dv_dq))
}

/// Kinetic energy `0.5 qdot^T M(q) qdot`.
pub fn kinetic_energy(model: &ChainModel, q: &DVector<f64>, qdot: &DVector<f64>) -> Result<f64> {
    let m = mass_matrix(model, q)?;
    Ok(0.5 * qdot.dot(&(m * qdot)))
}

/// Gravitational potential energy of the link COMs (zero at base height).
pub fn potential_energy(model: &ChainModel, q: &DVector<f64>) -> Result<f64> {
    model.check_q(q)?;
    let dir = link_directions(q);
    let mut y = model.base.y;
    let mut u = 0.0;
    for i in 0..model.n_links() {
        u += model.masses[i] * model.gravity * (y + dir[i].y * model.com_offsets[i]);
        y += dir[i].y * model.lengths[i];
    }
    Ok(u)
}
