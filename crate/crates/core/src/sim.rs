//! Closed-loop evaluation: feed-forward and feedback rollouts on perturbed
//! plants, tracking and effort metrics, and qbMove command inversion.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ddp::problem::{ControlBounds, DiscreteDynamics};
use crate::dynamics::{ContinuousDynamics, EulerStep, RigidSystem, SoftSystem};
use crate::error::{check_dim, Error, Result};
use crate::rigid::ChainModel;
use crate::soft::ActuationSpec;

/// Model mismatch and disturbances applied to a simulated plant.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub mass_scale: f64,
    pub stiffness_scale: f64,
    pub x0_offset: Option<DVector<f64>>,
    /// Standard deviation of zero-mean torque noise added each step, N m.
    pub torque_noise_std: f64,
    pub seed: u64,
}

impl Default for Perturbation {
    fn default() -> Self {
        Self {
            mass_scale: 1.0,
            stiffness_scale: 1.0,
            x0_offset: None,
            torque_noise_std: 0.0,
            seed: 0,
        }
    }
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass_scale > 0.0 && self.stiffness_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "perturbation scales must be > 0".into(),
            ));
        }
        if !(self.torque_noise_std >= 0.0 && self.torque_noise_std.is_finite()) {
            return Err(Error::InvalidArgument(
                "torque noise std must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Discretized plant with control bounds and the number of leading torque
/// channels in its control vector.
#[derive(Debug, Clone)]
pub struct Plant<D> {
    pub step: EulerStep<D>,
    pub bounds: Option<ControlBounds>,
    pub torque_channels: usize,
}

impl Plant<SoftSystem> {
    /// Elastic plant with the perturbation's mass and stiffness scaling
    /// applied. VSA stiffness channels are bounded; torques are not.
    pub fn soft(
        model: &ChainModel,
        act: &ActuationSpec,
        pert: &Perturbation,
        dt: f64,
    ) -> Result<Self> {
        pert.validate()?;
        let model = model.clone().with_mass_scale(pert.mass_scale)?;
        let act = act
            .clone()
            .with_stiffness_scale(act.stiffness_scale() * pert.stiffness_scale)?;
        let m = act.n_motors();
        let bounds = match act.sigma_bounds() {
            Some((lo, hi)) => {
                let mut lower = DVector::from_element(2 * m, f64::NEG_INFINITY);
                let mut upper = DVector::from_element(2 * m, f64::INFINITY);
                lower.rows_mut(m, m).copy_from_slice(lo);
                upper.rows_mut(m, m).copy_from_slice(hi);
                Some(ControlBounds::new(lower, upper)?)
            }
            None => None,
        };
        Ok(Self {
            step: EulerStep::new(SoftSystem::new(model, act)?, dt)?,
            bounds,
            torque_channels: m,
        })
    }
}

impl Plant<RigidSystem> {
    pub fn rigid(system: &RigidSystem, pert: &Perturbation, dt: f64) -> Result<Self> {
        pert.validate()?;
        if pert.stiffness_scale != 1.0 {
            return Err(Error::InvalidArgument(
                "stiffness scaling is undefined for a rigid plant".into(),
            ));
        }
        let mut system = system.clone();
        system.model = system.model.clone().with_mass_scale(pert.mass_scale)?;
        let nu = system.nu();
        Ok(Self {
            step: EulerStep::new(system, dt)?,
            bounds: None,
            torque_channels: nu,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub xs: Vec<DVector<f64>>,
    /// Controls actually applied, including feedback, clamping and noise.
    pub us: Vec<DVector<f64>>,
    /// Set when the state became non-finite; `xs` is truncated there.
    pub failed: bool,
}

fn simulate<D: ContinuousDynamics>(
    plant: &Plant<D>,
    pert: &Perturbation,
    x0: &DVector<f64>,
    n: usize,
    mut control: impl FnMut(usize, &DVector<f64>) -> DVector<f64>,
) -> Result<Rollout> {
    pert.validate()?;
    check_dim("initial state", plant.step.nx(), x0.len())?;
    let mut x = x0.clone();
    if let Some(off) = &pert.x0_offset {
        check_dim("initial state offset", x.len(), off.len())?;
        x += off;
    }
    let noise = Normal::new(0.0, pert.torque_noise_std)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(pert.seed);
    let mut xs = vec![x.clone()];
    let mut us = Vec::with_capacity(n);
    for t in 0..n {
        let mut u = control(t, &x);
        check_dim("control", plant.step.nu(), u.len())?;
        if let Some(b) = &plant.bounds {
            u = b.clamp(&u);
        }
        if pert.torque_noise_std > 0.0 {
            for j in 0..plant.torque_channels {
                u[j] += noise.sample(&mut rng);
            }
        }
        match plant.step.step(&x, &u) {
            Ok(next) => x = next,
            Err(Error::NonFinite(_)) => {
                us.push(u);
                return Ok(Rollout {
                    xs,
                    us,
                    failed: true,
                });
            }
            Err(e) => return Err(e),
        }
        us.push(u);
        xs.push(x.clone());
    }
    Ok(Rollout {
        xs,
        us,
        failed: false,
    })
}

/// Open-loop integration of the plant under stored controls.
pub fn rollout_ff<D: ContinuousDynamics>(
    plant: &Plant<D>,
    pert: &Perturbation,
    us: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<Rollout> {
    simulate(plant, pert, x0, us.len(), |t, _| us[t].clone())
}

/// `u_t = us_t + K_t (x_t - xs_ref_t)`, clamped to the plant's bounds.
pub fn rollout_fb<D: ContinuousDynamics>(
    plant: &Plant<D>,
    pert: &Perturbation,
    us: &[DVector<f64>],
    xs_ref: &[DVector<f64>],
    gains: &[DMatrix<f64>],
    x0: &DVector<f64>,
) -> Result<Rollout> {
    check_dim("reference states", us.len() + 1, xs_ref.len())?;
    check_dim("feedback gains", us.len(), gains.len())?;
    simulate(plant, pert, x0, us.len(), |t, x| {
        &us[t] + &gains[t] * (x - &xs_ref[t])
    })
}

/// Per-joint RMS of the first `joints` state coordinates.
pub fn rms_error(xs: &[DVector<f64>], xs_ref: &[DVector<f64>], joints: usize) -> Result<Vec<f64>> {
    if xs.len() != xs_ref.len() || xs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            xs.len(),
            xs_ref.len()
        )));
    }
    let mut acc = vec![0.0; joints];
    for (x, r) in xs.iter().zip(xs_ref) {
        if x.len() < joints || r.len() < joints {
            return Err(Error::InvalidArgument(
                "state shorter than joint count".into(),
            ));
        }
        for j in 0..joints {
            acc[j] += (x[j] - r[j]).powi(2);
        }
    }
    let k = xs.len() as f64;
    Ok(acc.into_iter().map(|s| (s / k).sqrt()).collect())
}

/// Sum over nodes of squared torques in the first `torque_channels` entries.
pub fn energy(us: &[DVector<f64>], torque_channels: usize) -> f64 {
    us.iter()
        .map(|u| u.rows(0, torque_channels.min(u.len())).norm_squared())
        .sum()
}

/// Antagonistic actuator constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QbMoveParams {
    /// rad^-1 scale inside the hyperbolic laws.
    pub alpha: f64,
    /// N m.
    pub beta: f64,
}

impl Default for QbMoveParams {
    fn default() -> Self {
        Self {
            alpha: 6.7328,
            beta: 0.0222,
        }
    }
}

impl QbMoveParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument("alpha and beta must be > 0".into()));
        }
        Ok(Self { alpha, beta })
    }

    /// Stiffness at zero deflection and zero preset, `2 alpha beta`.
    pub fn min_stiffness(&self) -> f64 {
        2.0 * self.alpha * self.beta
    }
}

/// Elastic torque and stiffness for motor commands `(theta_e, theta_s)`.
pub fn qbmove_forward(p: &QbMoveParams, theta_e: f64, theta_s: f64, q: f64) -> Result<(f64, f64)> {
    let c = (p.alpha * theta_s).cosh();
    let d = p.alpha * (q - theta_e);
    let tau = 2.0 * p.beta * c * d.sinh();
    let sigma = 2.0 * p.alpha * p.beta * c * d.cosh();
    if !(tau.is_finite() && sigma.is_finite()) {
        return Err(Error::NonFinite("qbmove forward"));
    }
    Ok((tau, sigma))
}

/// Motor commands realizing `(tau, sigma)` at link position `q`.
pub fn qbmove_invert(p: &QbMoveParams, tau: f64, sigma: f64, q: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "stiffness must be > 0, got {sigma}"
        )));
    }
    let ratio = p.alpha * tau / sigma;
    if !(ratio.abs() < 1.0) {
        return Err(Error::InfeasibleCommand { ratio: ratio.abs() });
    }
    let theta_e = q - ratio.atanh() / p.alpha;
    let arg = sigma / (2.0 * p.alpha * p.beta * (p.alpha * (q - theta_e)).cosh());
    if arg < 1.0 {
        return Err(Error::StiffnessBelowMinimum {
            sigma,
            minimum: sigma / arg,
        });
    }
    Ok((theta_e, arg.acosh() / p.alpha))
}

/// Torques of the two antagonistic motors.
pub fn qbmove_motor_torques(p: &QbMoveParams, theta_e: f64, theta_s: f64, q: f64) -> (f64, f64) {
    let d = q - theta_e;
    (
        p.beta * (p.alpha * (d - theta_s)).sinh(),
        p.beta * (p.alpha * (d + theta_s)).sinh(),
    )
}

/// `tau_1^2 + tau_2^2` with no external load at stiffness `sigma`:
/// `sigma^2 / (2 alpha^2) - 2 beta^2`.
pub fn qbmove_no_load_effort(p: &QbMoveParams, sigma: f64) -> Result<f64> {
    if sigma < p.min_stiffness() {
        return Err(Error::StiffnessBelowMinimum {
            sigma,
            minimum: p.min_stiffness(),
        });
    }
    Ok(sigma * sigma / (2.0 * p.alpha * p.alpha) - 2.0 * p.beta * p.beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::soft::{ControlInput, SoftState};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn two_link(g: f64) -> ChainModel {
        ChainModel::new(vec![0.55, 0.55], vec![0.089, 0.089], vec![0.085, 0.085], g).unwrap()
    }

    fn sea() -> ActuationSpec {
        ActuationSpec::sea(2, vec![0, 1], vec![1e-3; 2], vec![3.0; 2]).unwrap()
    }

    #[test]
    fn equilibrium_without_gravity_stays_put() {
        let plant = Plant::soft(&two_link(0.0), &sea(), &Perturbation::default(), 1e-2).unwrap();
        let x0 = DVector::from_vec(vec![0.3, -0.2, 0.0, 0.0, 0.3, -0.2, 0.0, 0.0]);
        let us = vec![DVector::zeros(2); 50];
        let r = rollout_ff(&plant, &Perturbation::default(), &us, &x0).unwrap();
        assert!(r.xs.iter().all(|x| *x == x0));
    }

    #[test]
    fn feedforward_reproduces_nominal_integration() {
        let model = two_link(9.81);
        let act = sea();
        let plant = Plant::soft(&model, &act, &Perturbation::default(), 1e-2).unwrap();
        let us: Vec<_> = (0..30)
            .map(|t| DVector::from_vec(vec![0.01 * t as f64, -0.02]))
            .collect();
        let x0 = DVector::zeros(8);
        let r = rollout_ff(&plant, &Perturbation::default(), &us, &x0).unwrap();
        let mut x = SoftState::zeros(2, 2);
        for (t, u) in us.iter().enumerate() {
            let a = crate::soft::forward_dynamics(&model, &act, &x, &ControlInput::sea(u.clone()))
                .unwrap();
            x = crate::soft::integrate(&x, &a, 1e-2).unwrap();
            assert_eq!(r.xs[t + 1], x.to_vector());
        }
    }

    #[test]
    fn zero_gain_feedback_equals_feedforward() {
        let pert = Perturbation {
            mass_scale: 1.1,
            torque_noise_std: 0.01,
            seed: 5,
            ..Default::default()
        };
        let plant = Plant::soft(&two_link(9.81), &sea(), &pert, 1e-2).unwrap();
        let us = vec![DVector::from_vec(vec![0.05, 0.01]); 40];
        let x0 = DVector::zeros(8);
        let ff = rollout_ff(&plant, &pert, &us, &x0).unwrap();
        let fb = rollout_fb(
            &plant,
            &pert,
            &us,
            &vec![DVector::from_element(8, 0.3); 41],
            &vec![DMatrix::zeros(2, 8); 40],
            &x0,
        )
        .unwrap();
        assert_eq!(ff, fb);
        // reproducible with the same seed
        assert_eq!(ff, rollout_ff(&plant, &pert, &us, &x0).unwrap());
    }

    #[test]
    fn feedback_on_nominal_plant_matches_feedforward() {
        let plant = Plant::soft(&two_link(9.81), &sea(), &Perturbation::default(), 1e-2).unwrap();
        let us = vec![DVector::from_vec(vec![0.05, 0.01]); 40];
        let x0 = DVector::zeros(8);
        let ff = rollout_ff(&plant, &Perturbation::default(), &us, &x0).unwrap();
        let gains = vec![DMatrix::from_element(2, 8, 0.7); 40];
        let fb = rollout_fb(&plant, &Perturbation::default(), &us, &ff.xs, &gains, &x0).unwrap();
        assert_eq!(ff.xs, fb.xs);
    }

    #[test]
    fn vsa_feedback_is_clamped() {
        let act =
            ActuationSpec::vsa(2, vec![0, 1], vec![1e-3; 2], vec![0.05; 2], vec![15.0; 2]).unwrap();
        let plant = Plant::soft(&two_link(9.81), &act, &Perturbation::default(), 1e-2).unwrap();
        let us = vec![DVector::from_vec(vec![0.0, 0.0, 14.0, 0.1]); 10];
        let gains = vec![DMatrix::from_element(4, 8, 100.0); 10];
        let xs_ref = vec![DVector::from_element(8, -1.0); 11];
        let r = rollout_fb(
            &plant,
            &Perturbation::default(),
            &us,
            &xs_ref,
            &gains,
            &DVector::zeros(8),
        )
        .unwrap();
        for u in &r.us {
            assert!(u[2] >= 0.05 && u[2] <= 15.0 && u[3] >= 0.05 && u[3] <= 15.0);
        }
    }

    #[test]
    fn rms_cases() {
        let a = vec![DVector::from_vec(vec![0.1, 0.2]); 5];
        assert_eq!(rms_error(&a, &a, 2).unwrap(), vec![0.0, 0.0]);
        let b: Vec<_> = a
            .iter()
            .map(|x| x + DVector::from_vec(vec![0.1, 0.0]))
            .collect();
        let r = rms_error(&b, &a, 2).unwrap();
        assert_relative_eq!(r[0], 0.1, epsilon = 1e-15);
        assert_eq!(r[1], 0.0);
        assert!(rms_error(&a, &a[..4], 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<_> = (0..20)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let y: Vec<_> = (0..20)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let r = rms_error(&x, &y, 3).unwrap();
        for j in 0..3 {
            let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a[j] - b[j]).collect();
            let mean_sq = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
            assert_relative_eq!(r[j], mean_sq.sqrt(), max_relative = 1e-14);
        }
    }

    #[test]
    fn energy_cases() {
        let us = vec![DVector::from_element(1, 1.0), DVector::from_element(1, 2.0)];
        assert_eq!(energy(&us, 1), 5.0);
        assert_eq!(energy(&[DVector::zeros(2)], 2), 0.0);
        let a = vec![DVector::from_vec(vec![1.0, 2.0, 0.3, 9.0])];
        let b = vec![DVector::from_vec(vec![1.0, 2.0, 14.0, 0.05])];
        assert_eq!(energy(&a, 2), energy(&b, 2));
    }

    #[test]
    fn qbmove_identity_case() {
        let p = QbMoveParams::default();
        let (tau, sigma) = qbmove_forward(&p, 0.4, 0.0, 0.4).unwrap();
        assert_eq!(tau, 0.0);
        assert_relative_eq!(sigma, 0.298936, epsilon = 1e-6);
        let (te, ts) = qbmove_invert(&p, 0.0, p.min_stiffness(), 0.7).unwrap();
        assert_eq!(te, 0.7);
        assert_eq!(ts, 0.0);
    }

    #[test]
    fn qbmove_parity() {
        let p = QbMoveParams::default();
        let (t1, s1) = qbmove_forward(&p, 0.1, 0.2, 0.35).unwrap();
        let (t2, s2) = qbmove_forward(&p, 0.1, 0.2, -0.15).unwrap();
        assert_relative_eq!(t1, -t2, max_relative = 1e-14);
        assert_relative_eq!(s1, s2, max_relative = 1e-14);
    }

    #[test]
    fn qbmove_infeasible_commands() {
        let p = QbMoveParams::default();
        match qbmove_invert(&p, 10.0, 0.05, 0.0) {
            Err(Error::InfeasibleCommand { ratio }) => {
                assert_relative_eq!(ratio, 1346.56, epsilon = 1e-6)
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            qbmove_invert(&p, 0.0, 0.05, 0.0),
            Err(Error::StiffnessBelowMinimum { .. })
        ));
        assert!(qbmove_forward(&p, 0.0, 0.0, 200.0).is_err());
    }

    #[test]
    fn no_load_effort_matches_motor_torques() {
        let p = QbMoveParams::default();
        for sigma in [p.min_stiffness(), 1.0, 5.0, 15.0] {
            let (te, ts) = qbmove_invert(&p, 0.0, sigma, 0.2).unwrap();
            let (t1, t2) = qbmove_motor_torques(&p, te, ts, 0.2);
            assert_relative_eq!(
                qbmove_no_load_effort(&p, sigma).unwrap(),
                t1 * t1 + t2 * t2,
                max_relative = 1e-9,
                epsilon = 1e-15
            );
            // the elastic torque is the sum of the motor torques
            let (tau, _) = qbmove_forward(&p, te, ts, 0.2).unwrap();
            assert_relative_eq!(tau, t1 + t2, epsilon = 1e-12);
        }
        assert!(qbmove_no_load_effort(&p, 0.05).is_err());
    }

    #[test]
    fn rigid_plant_rejects_stiffness_scaling() {
        let sys = RigidSystem::fully_actuated(two_link(9.81));
        let pert = Perturbation {
            stiffness_scale: 2.0,
            ..Default::default()
        };
        assert!(Plant::rigid(&sys, &pert, 1e-2).is_err());
    }
}
