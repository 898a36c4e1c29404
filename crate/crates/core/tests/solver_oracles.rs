//! Solver checks against independent oracles: a hand-written Riccati
//! recursion, brute-force grid search for the box QP, and exact gap
//! contraction of the nonlinear rollout.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soft_ocp::costs::{CostQuadratic, CostSum, CostTerm};
use soft_ocp::ddp::{
    box_qp, compute_gaps, BoxQpSettings, ControlBounds, DiscreteDynamics, Linearization,
    RunningNode, ShootingProblem, Solver, SolverKind, SolverSettings, StageCost,
};
use soft_ocp::dynamics::{EulerStep, SoftSystem};
use soft_ocp::rigid::ChainModel;
use soft_ocp::soft::ActuationSpec;
use soft_ocp::Result;

struct Linear {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl DiscreteDynamics for Linear {
    fn nx(&self) -> usize {
        self.a.nrows()
    }
    fn nu(&self) -> usize {
        self.b.ncols()
    }
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization> {
        Ok(Linearization {
            next: self.step(x, u)?,
            fx: self.a.clone(),
            fu: self.b.clone(),
        })
    }
}

struct Quadratic {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl StageCost for Quadratic {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
        let mut v = 0.5 * x.dot(&(&self.q * x));
        if !u.is_empty() {
            v += 0.5 * u.dot(&(&self.r * u));
        }
        Ok(v)
    }
    fn quadratic(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<CostQuadratic> {
        let nu = u.len();
        Ok(CostQuadratic {
            value: self.value(x, u)?,
            lx: &self.q * x,
            lu: if nu == 0 {
                DVector::zeros(0)
            } else {
                &self.r * u
            },
            lxx: self.q.clone(),
            luu: if nu == 0 {
                DMatrix::zeros(0, 0)
            } else {
                self.r.clone()
            },
            lux: DMatrix::zeros(nu, x.len()),
        })
    }
}

/// Planar double integrator, state `[px, py, vx, vy]`, control `[ax, ay]`.
fn double_integrator(dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::identity(4, 4);
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let mut b = DMatrix::zeros(4, 2);
    b[(0, 0)] = 0.5 * dt * dt;
    b[(1, 1)] = 0.5 * dt * dt;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    (a, b)
}

fn lqr_problem(
    n: usize,
) -> (
    ShootingProblem,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
    DMatrix<f64>,
) {
    let (a, b) = double_integrator(0.1);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5, 0.3]));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.4, 0.7]));
    let qf = DMatrix::identity(4, 4) * 50.0;
    let node = RunningNode {
        dynamics: Arc::new(Linear {
            a: a.clone(),
            b: b.clone(),
        }),
        cost: Arc::new(Quadratic {
            q: q.clone(),
            r: r.clone(),
        }),
        bounds: None,
    };
    let terminal = Arc::new(Quadratic {
        q: qf.clone(),
        r: DMatrix::zeros(0, 0),
    });
    let x0 = DVector::from_vec(vec![1.0, -0.5, 0.2, 0.8]);
    let p = ShootingProblem::uniform(x0, node, n, terminal).unwrap();
    (p, a, b, q, r, qf)
}

/// Backward Riccati recursion, then the closed-loop rollout.
fn riccati(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qf: &DMatrix<f64>,
    x0: &DVector<f64>,
    n: usize,
) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
    let mut p = qf.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    for t in (0..n).rev() {
        let s = r + b.transpose() * &p * b;
        let k = s.try_inverse().unwrap() * b.transpose() * &p * a;
        p = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        p = (&p + p.transpose()) * 0.5;
        gains[t] = k;
    }
    let mut xs = vec![x0.clone()];
    for k in &gains {
        let x = xs.last().unwrap();
        xs.push(a * x - b * (k * x));
    }
    (gains, xs)
}

#[test]
fn lqr_one_iteration_matches_riccati() {
    let n = 40;
    let (p, a, b, q, r, qf) = lqr_problem(n);
    let (gains, xs_ref) = riccati(&a, &b, &q, &r, &qf, &p.x0, n);
    for kind in [SolverKind::Fddp, SolverKind::BoxFddp] {
        let settings = SolverSettings {
            kind,
            max_iterations: 1,
            ..SolverSettings::default()
        };
        let sol = Solver::new(&p, settings)
            .unwrap()
            .solve(None, None)
            .unwrap();
        assert_eq!(sol.iterations, 1);
        let dev = sol
            .xs
            .iter()
            .zip(&xs_ref)
            .map(|(x, y)| (x - y).amax())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-8, "trajectory deviation {dev:e}");
        assert!(sol.gap_norm <= 1e-12);
        // gains are refreshed at the returned iterate
        for (kfb, k) in sol.k_fb.iter().zip(&gains) {
            assert!((kfb + k).amax() <= 1e-8);
        }
    }
}

#[test]
fn lqr_converges_on_second_check() {
    let (p, ..) = lqr_problem(25);
    let sol = Solver::new(&p, SolverSettings::default())
        .unwrap()
        .solve(None, None)
        .unwrap();
    assert!(sol.converged);
    assert!(sol.iterations <= 2);
}

/// `1/2 x'Hx + g'x` minimized over a 201-point grid per axis.
fn grid_search(h: &DMatrix<f64>, g: &DVector<f64>, lb: &[f64], ub: &[f64]) -> (Vec<f64>, f64) {
    const N: usize = 201;
    let m = g.len();
    let axis = |i: usize, k: usize| lb[i] + (ub[i] - lb[i]) * k as f64 / (N - 1) as f64;
    let hv: Vec<f64> = h.iter().copied().collect();
    let f = |x: &[f64; 3]| {
        let mut v = 0.0;
        for i in 0..m {
            v += g[i] * x[i];
            for j in 0..m {
                v += 0.5 * x[i] * hv[i + j * m] * x[j];
            }
        }
        v
    };
    let counts = [N, if m > 1 { N } else { 1 }, if m > 2 { N } else { 1 }];
    let mut best = (vec![0.0; m], f64::INFINITY);
    let mut x = [0.0; 3];
    for i in 0..counts[0] {
        x[0] = axis(0, i);
        for j in 0..counts[1] {
            if m > 1 {
                x[1] = axis(1, j);
            }
            for k in 0..counts[2] {
                if m > 2 {
                    x[2] = axis(2, k);
                }
                let v = f(&x);
                if v < best.1 {
                    best = (x[..m].to_vec(), v);
                }
            }
        }
    }
    best
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    m: usize,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
    let h = &a * a.transpose() + DMatrix::identity(m, m) * m as f64;
    let g = DVector::from_fn(m, |_, _| rng.random_range(-4.0..4.0));
    let lb = DVector::from_fn(m, |_, _| rng.random_range(-2.0..0.0));
    let ub = DVector::from_fn(m, |i, _| lb[i] + rng.random_range(0.5..2.5));
    (h, g, lb, ub)
}

#[test]
fn box_qp_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let m = 1 + case % 3;
        let (h, g, lb, ub) = random_instance(&mut rng, m);
        let res = box_qp(
            &h,
            &g,
            &lb,
            &ub,
            &DVector::zeros(m),
            &BoxQpSettings::default(),
        )
        .unwrap();
        let (xg, _) = grid_search(&h, &g, lb.as_slice(), ub.as_slice());
        for i in 0..m {
            let cell = (ub[i] - lb[i]) / 200.0;
            assert!(
                (res.x[i] - xg[i]).abs() <= cell,
                "case {case}: axis {i} qp {} grid {} cell {cell}",
                res.x[i],
                xg[i]
            );
        }
        let grad = &g + &h * &res.x;
        for &i in &res.free {
            assert!(
                grad[i].abs() <= 1e-8,
                "case {case}: free gradient {:e}",
                grad[i]
            );
        }
        for &i in &res.clamped {
            let at_lower = res.x[i] == lb[i] && grad[i] >= 0.0;
            let at_upper = res.x[i] == ub[i] && grad[i] <= 0.0;
            assert!(at_lower || at_upper, "case {case}: clamped coordinate {i}");
        }
    }
}

fn pendulum_problem(bounds: Option<ControlBounds>, n: usize) -> ShootingProblem {
    let model = ChainModel::new(vec![0.55], vec![0.089], vec![0.085], 9.81).unwrap();
    let act = ActuationSpec::sea(1, vec![0], vec![1e-3], vec![3.0]).unwrap();
    let dt = 0.01;
    let system = SoftSystem::new(model, act).unwrap();
    let nx = 4;
    let x_ref = DVector::from_vec(vec![1.2, 0.0, 1.2, 0.0]);
    let running = CostSum::running(
        vec![
            CostTerm::state_regularization(1.0, x_ref.clone(), None).unwrap(),
            CostTerm::control_regularization(1e-2, DVector::zeros(1), None).unwrap(),
        ],
        nx,
        1,
        dt,
    )
    .unwrap();
    let terminal = CostSum::terminal(
        vec![CostTerm::state_regularization(1e3, x_ref, None).unwrap()],
        nx,
    );
    let node = RunningNode {
        dynamics: Arc::new(EulerStep::new(system, dt).unwrap()),
        cost: Arc::new(running),
        bounds,
    };
    let x0 = DVector::from_vec(vec![
        -std::f64::consts::FRAC_PI_2,
        0.0,
        -std::f64::consts::FRAC_PI_2,
        0.0,
    ]);
    ShootingProblem::uniform(x0, node, n, Arc::new(terminal)).unwrap()
}

#[test]
fn rollout_contracts_gaps_by_one_minus_alpha() {
    let p = pendulum_problem(None, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<DVector<f64>> = (0..=60)
        .map(|_| &p.x0 + DVector::from_fn(4, |_, _| rng.random_range(-0.3..0.3)))
        .collect();
    let us: Vec<DVector<f64>> = (0..60)
        .map(|_| DVector::from_element(1, rng.random_range(-0.2..0.2)))
        .collect();
    for alpha in [1.0, 0.5, 0.25, 0.0625] {
        let mut s = Solver::new(&p, SolverSettings::default()).unwrap();
        s.set_candidate(xs.clone(), us.clone()).unwrap();
        s.calc_diff().unwrap();
        assert!(s.backward_pass().unwrap());
        let before: Vec<DVector<f64>> = s.gaps().to_vec();
        s.forward_pass(alpha).unwrap();
        let after = compute_gaps(&p, s.xs_try(), s.us_try()).unwrap();
        let norm = |fs: &[DVector<f64>]| fs.iter().map(|f| f.norm_squared()).sum::<f64>().sqrt();
        let (nb, na) = (norm(&before), norm(&after));
        // the remaining curvature term is zero for this rollout up to rounding
        let c = (na - (1.0 - alpha) * nb).max(0.0);
        assert!(
            c <= 1e-12 * (1.0 + nb),
            "alpha {alpha}: before {nb:e} after {na:e}"
        );
        assert!(nb > 0.1);
    }
}

fn same_bits(a: &[DVector<f64>], b: &[DVector<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len()
                && x.iter()
                    .zip(y.iter())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

#[test]
fn box_fddp_without_bounds_is_fddp() {
    let unbounded = ControlBounds::new(
        DVector::from_element(1, f64::NEG_INFINITY),
        DVector::from_element(1, f64::INFINITY),
    )
    .unwrap();
    let reference = {
        let p = pendulum_problem(None, 80);
        Solver::new(&p, SolverSettings::default())
            .unwrap()
            .solve(None, None)
            .unwrap()
    };
    for bounds in [None, Some(unbounded)] {
        let p = pendulum_problem(bounds, 80);
        let sol = Solver::new(&p, SolverSettings::box_fddp())
            .unwrap()
            .solve(None, None)
            .unwrap();
        assert!(same_bits(&sol.xs, &reference.xs));
        assert!(same_bits(&sol.us, &reference.us));
        assert_eq!(sol.history, reference.history);
        assert_eq!(sol.cost.to_bits(), reference.cost.to_bits());
    }
    assert!(reference.converged);
}

#[test]
fn bounded_solution_stays_feasible() {
    let b = ControlBounds::new(
        DVector::from_element(1, -0.3),
        DVector::from_element(1, 0.3),
    )
    .unwrap();
    let p = pendulum_problem(Some(b), 80);
    let sol = Solver::new(&p, SolverSettings::box_fddp())
        .unwrap()
        .solve(None, None)
        .unwrap();
    assert!(sol.us.iter().all(|u| u[0].abs() <= 0.3));
    assert!(sol.us.iter().any(|u| u[0].abs() == 0.3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn box_qp_is_feasible_and_stationary(seed in any::<u64>(), m in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, g, lb, ub) = random_instance(&mut rng, m);
        let x0 = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
        let res = box_qp(&h, &g, &lb, &ub, &x0, &BoxQpSettings::default()).unwrap();
        let grad = &g + &h * &res.x;
        for i in 0..m {
            prop_assert!(res.x[i] >= lb[i] && res.x[i] <= ub[i]);
        }
        for &i in &res.free {
            prop_assert!(grad[i].abs() <= 1e-8);
        }
        prop_assert_eq!(res.free.len() + res.clamped.len(), m);
    }

    #[test]
    fn value_hessian_stays_symmetric(seed in any::<u64>()) {
        let p = pendulum_problem(None, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<DVector<f64>> = (0..=20)
            .map(|_| &p.x0 + DVector::from_fn(4, |_, _| rng.random_range(-0.5..0.5)))
            .collect();
        let us: Vec<DVector<f64>> = (0..20).map(|_| DVector::from_element(1, rng.random_range(-1.0..1.0))).collect();
        let mut s = Solver::new(&p, SolverSettings::default()).unwrap();
        s.set_candidate(xs, us).unwrap();
        s.calc_diff().unwrap();
        prop_assume!(s.backward_pass().unwrap());
        for v in s.value_hessian() {
            prop_assert!((v - v.transpose()).amax() <= 1e-9 * (1.0 + v.amax()));
        }
    }
}
