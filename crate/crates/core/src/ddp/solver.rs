use nalgebra::{DMatrix, DVector};

use super::boxqp::{box_qp, BoxQpSettings};
use super::problem::{Linearization, ShootingProblem};
use crate::costs::CostQuadratic;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    /// Ignores control bounds.
    Fddp,
    /// Solves a box-QP at bounded nodes and clamps the rollout controls.
    BoxFddp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub max_iterations: usize,
    /// Threshold on the expected improvement of a full step.
    pub stop_tolerance: f64,
    /// Threshold on the largest gap entry.
    pub gap_tolerance: f64,
    pub reg_init: f64,
    pub reg_min: f64,
    pub reg_max: f64,
    pub reg_factor: f64,
    /// Also add the regularization to the diagonal of `Vxx`.
    pub regularize_vxx: bool,
    pub alphas: Vec<f64>,
    /// Accept a step when the actual reduction exceeds this fraction of the
    /// expected one.
    pub armijo_threshold: f64,
    /// Acceptance ratio for steps that trade cost for gap reduction.
    pub negative_step_threshold: f64,
    pub grad_threshold: f64,
    pub step_increase_threshold: f64,
    pub step_decrease_threshold: f64,
    pub box_qp: BoxQpSettings,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            kind: SolverKind::Fddp,
            max_iterations: 200,
            stop_tolerance: 1e-9,
            gap_tolerance: 1e-9,
            reg_init: 1e-9,
            reg_min: 1e-9,
            reg_max: 1e9,
            reg_factor: 10.0,
            regularize_vxx: false,
            alphas: (0..=10).map(|i| 0.5f64.powi(i)).collect(),
            armijo_threshold: 0.1,
            negative_step_threshold: 2.0,
            grad_threshold: 1e-12,
            step_increase_threshold: 0.01,
            step_decrease_threshold: 0.5,
            box_qp: BoxQpSettings::default(),
        }
    }
}

impl SolverSettings {
    pub fn box_fddp() -> Self {
        Self {
            kind: SolverKind::BoxFddp,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.stop_tolerance,
            self.gap_tolerance,
            self.reg_init,
            self.reg_min,
            self.reg_max,
            self.armijo_threshold,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.reg_factor <= 1.0 {
            return Err(Error::InvalidArgument(
                "solver settings must be positive".into(),
            ));
        }
        if self.reg_min > self.reg_max {
            return Err(Error::InvalidArgument(
                "reg_min must not exceed reg_max".into(),
            ));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::InvalidArgument(
                "line-search steps must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    RegularizationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub cost: f64,
    pub gap: f64,
    pub regularization: f64,
    /// Accepted step length, 0 when every trial was rejected.
    pub step: f64,
    pub expected_improvement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub k_ff: Vec<DVector<f64>>,
    pub k_fb: Vec<DMatrix<f64>>,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub cost: f64,
    pub gap_norm: f64,
    pub history: Vec<IterationRecord>,
}

/// `fs[0] = x0 - xs[0]`, `fs[t+1] = f(xs[t], us[t]) - xs[t+1]`.
pub fn compute_gaps(
    problem: &ShootingProblem,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    check_dim("states", problem.horizon() + 1, xs.len())?;
    check_dim("controls", problem.horizon(), us.len())?;
    let mut fs = Vec::with_capacity(xs.len());
    fs.push(&problem.x0 - &xs[0]);
    for (t, node) in problem.running.iter().enumerate() {
        fs.push(node.dynamics.step(&xs[t], &us[t])? - &xs[t + 1]);
    }
    Ok(fs)
}

fn max_abs(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

/// Iteration state of FDDP / Box-FDDP on one problem.
pub struct Solver<'a> {
    problem: &'a ShootingProblem,
    settings: SolverSettings,
    xs: Vec<DVector<f64>>,
    us: Vec<DVector<f64>>,
    fs: Vec<DVector<f64>>,
    lin: Vec<Linearization>,
    cost_quad: Vec<CostQuadratic>,
    terminal_quad: CostQuadratic,
    vx: Vec<DVector<f64>>,
    vxx: Vec<DMatrix<f64>>,
    qu: Vec<DVector<f64>>,
    quu: Vec<DMatrix<f64>>,
    k_ff: Vec<DVector<f64>>,
    k_fb: Vec<DMatrix<f64>>,
    xs_try: Vec<DVector<f64>>,
    us_try: Vec<DVector<f64>>,
    cost: f64,
    cost_try: f64,
    reg: f64,
    dg: f64,
    dq: f64,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a ShootingProblem, settings: SolverSettings) -> Result<Self> {
        settings.validate()?;
        let n = problem.horizon();
        let nx = problem.nx();
        let (xs, us) = problem.quasi_static_guess();
        let k_ff = problem
            .running
            .iter()
            .map(|r| DVector::zeros(r.dynamics.nu()))
            .collect();
        let k_fb = problem
            .running
            .iter()
            .map(|r| DMatrix::zeros(r.dynamics.nu(), nx))
            .collect();
        let reg = settings.reg_init.clamp(settings.reg_min, settings.reg_max);
        Ok(Self {
            problem,
            xs_try: xs.clone(),
            us_try: us.clone(),
            xs,
            us,
            fs: vec![DVector::zeros(nx); n + 1],
            lin: Vec::new(),
            cost_quad: Vec::new(),
            terminal_quad: CostQuadratic::zeros(nx, 0),
            vx: vec![DVector::zeros(nx); n + 1],
            vxx: vec![DMatrix::zeros(nx, nx); n + 1],
            qu: Vec::new(),
            quu: Vec::new(),
            k_ff,
            k_fb,
            cost: f64::INFINITY,
            cost_try: f64::INFINITY,
            reg,
            dg: 0.0,
            dq: 0.0,
            settings,
        })
    }

    pub fn set_candidate(&mut self, xs: Vec<DVector<f64>>, us: Vec<DVector<f64>>) -> Result<()> {
        let n = self.problem.horizon();
        check_dim("initial states", n + 1, xs.len())?;
        check_dim("initial controls", n, us.len())?;
        for x in &xs {
            check_dim("initial state", self.problem.nx(), x.len())?;
        }
        for (u, node) in us.iter().zip(&self.problem.running) {
            check_dim("initial control", node.dynamics.nu(), u.len())?;
        }
        self.xs = xs;
        self.us = us;
        Ok(())
    }

    pub fn xs(&self) -> &[DVector<f64>] {
        &self.xs
    }
    pub fn us(&self) -> &[DVector<f64>] {
        &self.us
    }
    pub fn xs_try(&self) -> &[DVector<f64>] {
        &self.xs_try
    }
    pub fn us_try(&self) -> &[DVector<f64>] {
        &self.us_try
    }
    pub fn gaps(&self) -> &[DVector<f64>] {
        &self.fs
    }
    pub fn feedforward(&self) -> &[DVector<f64>] {
        &self.k_ff
    }
    pub fn feedback(&self) -> &[DMatrix<f64>] {
        &self.k_fb
    }
    pub fn value_gradient(&self) -> &[DVector<f64>] {
        &self.vx
    }
    pub fn value_hessian(&self) -> &[DMatrix<f64>] {
        &self.vxx
    }
    pub fn control_gradient(&self) -> &[DVector<f64>] {
        &self.qu
    }
    pub fn cost(&self) -> f64 {
        self.cost
    }
    pub fn regularization(&self) -> f64 {
        self.reg
    }
    pub fn set_regularization(&mut self, reg: f64) {
        self.reg = reg;
    }

    fn is_bounded(&self, t: usize) -> bool {
        self.settings.kind == SolverKind::BoxFddp
            && self.problem.running[t]
                .bounds
                .as_ref()
                .is_some_and(|b| !b.is_unbounded())
    }

    /// Linearizes dynamics and costs at the current iterate and refreshes the gaps.
    pub fn calc_diff(&mut self) -> Result<()> {
        let p = self.problem;
        let n = p.horizon();
        self.lin.clear();
        self.cost_quad.clear();
        self.fs[0] = &p.x0 - &self.xs[0];
        let mut cost = 0.0;
        for t in 0..n {
            let node = &p.running[t];
            let lin = node.dynamics.linearize(&self.xs[t], &self.us[t])?;
            self.fs[t + 1] = &lin.next - &self.xs[t + 1];
            let q = node.cost.quadratic(&self.xs[t], &self.us[t])?;
            cost += q.value;
            self.lin.push(lin);
            self.cost_quad.push(q);
        }
        self.terminal_quad = p.terminal.quadratic(&self.xs[n], &DVector::zeros(0))?;
        self.cost = cost + self.terminal_quad.value;
        Ok(())
    }

    /// Riccati sweep with gap terms. Returns `false` when a control Hessian
    /// is not positive definite at the current regularization.
    pub fn backward_pass(&mut self) -> Result<bool> {
        let n = self.problem.horizon();
        let nx = self.problem.nx();
        let reg = self.reg;
        self.qu.clear();
        self.quu.clear();
        self.vxx[n] = self.terminal_quad.lxx.clone();
        if self.settings.regularize_vxx {
            for i in 0..nx {
                self.vxx[n][(i, i)] += reg;
            }
        }
        self.vx[n] = &self.terminal_quad.lx + &self.vxx[n] * &self.fs[n];

        let mut qu_rev = Vec::with_capacity(n);
        let mut quu_rev = Vec::with_capacity(n);
        for t in (0..n).rev() {
            let lin = &self.lin[t];
            let c = &self.cost_quad[t];
            let vx_next = &self.vx[t + 1];
            let vxx_next = &self.vxx[t + 1];
            let fxt = lin.fx.transpose();
            let fut = lin.fu.transpose();
            let vxx_fx = vxx_next * &lin.fx;
            let qx = &c.lx + &fxt * vx_next;
            let qu = &c.lu + &fut * vx_next;
            let qxx = &c.lxx + &fxt * &vxx_fx;
            let qux = &c.lux + &fut * &vxx_fx;
            let quu = &c.luu + &fut * vxx_next * &lin.fu;
            let nu = qu.len();
            let mut quu_reg = quu.clone();
            for i in 0..nu {
                quu_reg[(i, i)] += reg;
            }

            let (kff, kfb) = if self.is_bounded(t) {
                let b = self.problem.running[t].bounds.as_ref().unwrap();
                let lb = &b.lower - &self.us[t];
                let ub = &b.upper - &self.us[t];
                let res = match box_qp(
                    &quu_reg,
                    &qu,
                    &lb,
                    &ub,
                    &self.k_ff[t],
                    &self.settings.box_qp,
                ) {
                    Ok(r) => r,
                    Err(Error::InvalidArgument(_)) | Err(Error::Internal(_)) => return Ok(false),
                    Err(e) => return Err(e),
                };
                let mut kfb = DMatrix::zeros(nu, nx);
                if !res.free.is_empty() {
                    let qux_free =
                        DMatrix::from_fn(res.free.len(), nx, |r, c| qux[(res.free[r], c)]);
                    let kf = -(&res.hff_inv * qux_free);
                    for (r, &i) in res.free.iter().enumerate() {
                        kfb.set_row(i, &kf.row(r));
                    }
                }
                (res.x, kfb)
            } else {
                let Some(chol) = quu_reg.clone().cholesky() else {
                    return Ok(false);
                };
                (-chol.solve(&qu), -chol.solve(&qux))
            };

            let kfb_t = kfb.transpose();
            let quxt = qux.transpose();
            let vx = &qx + &kfb_t * (&quu * &kff + &qu) + &quxt * &kff;
            let mut vxx = &qxx + &kfb_t * &quu * &kfb + &kfb_t * &qux + &quxt * &kfb;
            vxx = (&vxx + vxx.transpose()) * 0.5;
            if self.settings.regularize_vxx {
                for i in 0..nx {
                    vxx[(i, i)] += reg;
                }
            }
            if !vx.iter().all(|v| v.is_finite()) || !vxx.iter().all(|v| v.is_finite()) {
                return Ok(false);
            }
            self.vx[t] = vx + &vxx * &self.fs[t];
            self.vxx[t] = vxx;
            self.k_ff[t] = kff;
            self.k_fb[t] = kfb;
            qu_rev.push(qu);
            quu_rev.push(quu);
        }
        qu_rev.reverse();
        quu_rev.reverse();
        self.qu = qu_rev;
        self.quu = quu_rev;
        self.update_expected_improvement();
        Ok(true)
    }

    fn update_expected_improvement(&mut self) {
        let n = self.problem.horizon();
        let mut dg = 0.0;
        let mut dq = 0.0;
        for t in 0..n {
            dg -= self.qu[t].dot(&self.k_ff[t]);
            dq -= self.k_ff[t].dot(&(&self.quu[t] * &self.k_ff[t]));
        }
        for t in 0..=n {
            dg -= self.vx[t].dot(&self.fs[t]);
            dq += self.fs[t].dot(&(&self.vxx[t] * &self.fs[t]));
        }
        self.dg = dg;
        self.dq = dq;
    }

    /// `(d0, d1)` of the expected improvement model `alpha (d0 + alpha d1 / 2)`,
    /// using the current trial trajectory for the gap terms.
    pub fn expected_improvement(&self) -> (f64, f64) {
        let mut dv = 0.0;
        for t in 0..self.fs.len() {
            let dx = &self.xs_try[t] - &self.xs[t];
            dv -= self.fs[t].dot(&(&self.vxx[t] * dx));
        }
        (self.dg + dv, self.dq - 2.0 * dv)
    }

    /// Expected improvement of a full step before any trial rollout.
    pub fn stopping_criterion(&self) -> f64 {
        (self.dg + 0.5 * self.dq).abs()
    }

    /// Nonlinear rollout with gap contraction `(1 - alpha)`. Returns the trial cost.
    pub fn forward_pass(&mut self, alpha: f64) -> Result<f64> {
        let p = self.problem;
        let n = p.horizon();
        let mut cost = 0.0;
        let mut xnext = p.x0.clone();
        for t in 0..n {
            let xt = &xnext - &self.fs[t] * (1.0 - alpha);
            let dx = &xt - &self.xs[t];
            let mut ut = &self.us[t] + &self.k_ff[t] * alpha + &self.k_fb[t] * dx;
            if self.is_bounded(t) {
                ut = p.running[t].bounds.as_ref().unwrap().clamp(&ut);
            }
            let node = &p.running[t];
            cost += node.cost.value(&xt, &ut)?;
            xnext = node.dynamics.step(&xt, &ut)?;
            self.xs_try[t] = xt;
            self.us_try[t] = ut;
        }
        let xt = &xnext - &self.fs[n] * (1.0 - alpha);
        cost += p.terminal.value(&xt, &DVector::zeros(0))?;
        self.xs_try[n] = xt;
        if !cost.is_finite() {
            return Err(Error::NonFinite("trial cost"));
        }
        self.cost_try = cost;
        Ok(cost)
    }

    fn increase_reg(&mut self) {
        self.reg = (self.reg * self.settings.reg_factor).min(self.settings.reg_max);
    }

    fn decrease_reg(&mut self) {
        self.reg = (self.reg / self.settings.reg_factor).max(self.settings.reg_min);
    }

    /// Backward pass with regularization retries. `false` when the
    /// regularization limit is hit.
    fn regularized_backward_pass(&mut self) -> Result<bool> {
        loop {
            if self.backward_pass()? {
                return Ok(true);
            }
            if self.reg >= self.settings.reg_max {
                return Ok(false);
            }
            self.increase_reg();
        }
    }

    pub fn solve(
        &mut self,
        xs_init: Option<Vec<DVector<f64>>>,
        us_init: Option<Vec<DVector<f64>>>,
    ) -> Result<Solution> {
        let (xs_default, us_default) = self.problem.quasi_static_guess();
        self.set_candidate(xs_init.unwrap_or(xs_default), us_init.unwrap_or(us_default))?;
        self.calc_diff()?;
        let mut history = Vec::new();
        let mut termination = Termination::MaxIterations;
        let mut iterations = 0;
        let mut recalc = false;
        let mut gains_current = false;

        while iterations < self.settings.max_iterations {
            if recalc {
                self.calc_diff()?;
                recalc = false;
            }
            if !self.regularized_backward_pass()? {
                termination = Termination::RegularizationLimit;
                break;
            }
            gains_current = true;
            let gap = max_abs(&self.fs);
            let feasible = gap <= self.settings.gap_tolerance;
            if feasible && self.stopping_criterion() <= self.settings.stop_tolerance {
                termination = Termination::Converged;
                break;
            }
            iterations += 1;

            let mut accepted = 0.0;
            let mut expected = 0.0;
            for &alpha in &self.settings.alphas.clone() {
                if self.forward_pass(alpha).is_err() {
                    continue;
                }
                let (d0, d1) = self.expected_improvement();
                let dv_exp = alpha * (d0 + 0.5 * alpha * d1);
                let dv = self.cost - self.cost_try;
                let accept = if dv_exp >= 0.0 {
                    d0.abs() < self.settings.grad_threshold
                        || dv > self.settings.armijo_threshold * dv_exp
                } else {
                    !feasible && dv > self.settings.negative_step_threshold * dv_exp
                };
                if accept {
                    std::mem::swap(&mut self.xs, &mut self.xs_try);
                    std::mem::swap(&mut self.us, &mut self.us_try);
                    self.cost = self.cost_try;
                    accepted = alpha;
                    expected = dv_exp;
                    recalc = true;
                    gains_current = false;
                    break;
                }
            }
            if accepted <= self.settings.step_increase_threshold {
                self.increase_reg();
            }
            if accepted >= self.settings.step_decrease_threshold {
                self.decrease_reg();
            }
            history.push(IterationRecord {
                cost: self.cost,
                gap,
                regularization: self.reg,
                step: accepted,
                expected_improvement: expected,
            });
            if accepted == 0.0 && self.reg >= self.settings.reg_max {
                termination = Termination::RegularizationLimit;
                break;
            }
        }

        if recalc {
            self.calc_diff()?;
        }
        if !gains_current {
            // refresh the gains at the returned iterate; keep the old ones on failure
            let saved = (self.k_ff.clone(), self.k_fb.clone(), self.reg);
            if !self.regularized_backward_pass()? {
                self.k_ff = saved.0;
                self.k_fb = saved.1;
            }
            self.reg = saved.2;
        }
        let gap_norm = max_abs(&self.fs);
        Ok(Solution {
            xs: self.xs.clone(),
            us: self.us.clone(),
            k_ff: self.k_ff.clone(),
            k_fb: self.k_fb.clone(),
            converged: termination == Termination::Converged,
            termination,
            iterations,
            cost: self.cost,
            gap_norm,
            history,
        })
    }
}
