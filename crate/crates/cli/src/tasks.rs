//! Problem construction from a task configuration and the task runners.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use soft_ocp::costs::{CostSum, CostTerm};
use soft_ocp::ddp::{
    ControlBounds, RunningNode, ShootingProblem, Solution, Solver, SolverKind, SolverSettings,
};
use soft_ocp::dynamics::{EulerStep, RigidSystem, SoftSystem};
use soft_ocp::numdiff::{self, SampleDiff};
use soft_ocp::rigid::{self, ChainModel, InertiaMode};
use soft_ocp::sim::{self, Perturbation, Plant, Rollout};
use soft_ocp::soft::{ActuationSpec, StiffnessSpec};

use crate::config::{ActuationKindConfig, ConfigError, InertiaConfig, TaskConfig, TaskKind};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("model error: {0}")]
    Model(#[from] soft_ocp::Error),
}

pub type TaskResult<T> = std::result::Result<T, TaskError>;

fn config_error(cfg: &TaskConfig, key: &str, message: &str) -> TaskError {
    TaskError::Config(ConfigError::Invalid {
        path: cfg.name.clone(),
        key: key.to_string(),
        message: message.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Rigid,
    Sea,
    Vsa,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Rigid => "rigid",
            Variant::Sea => "sea",
            Variant::Vsa => "vsa",
        }
    }

    pub fn of(kind: ActuationKindConfig) -> Self {
        match kind {
            ActuationKindConfig::Rigid => Variant::Rigid,
            ActuationKindConfig::Sea => Variant::Sea,
            ActuationKindConfig::Vsa => Variant::Vsa,
        }
    }
}

#[derive(Debug, Clone)]
pub enum System {
    Rigid(RigidSystem),
    Soft(ActuationSpec),
}

/// A shooting problem together with what is needed to simulate its plant.
pub struct BuiltProblem {
    pub variant: Variant,
    pub model: ChainModel,
    pub system: System,
    pub problem: ShootingProblem,
    pub settings: SolverSettings,
    pub dt: f64,
    pub n_links: usize,
    pub n_motors: usize,
    /// Initial control guess; the quasi-static guess when absent.
    pub us_init: Option<Vec<DVector<f64>>>,
}

impl BuiltProblem {
    pub fn solve(&self) -> TaskResult<Solution> {
        let mut solver = Solver::new(&self.problem, self.settings.clone())?;
        Ok(solver.solve(None, self.us_init.clone())?)
    }

    pub fn plant_rollouts(
        &self,
        pert: &Perturbation,
        sol: &Solution,
    ) -> TaskResult<(Rollout, Rollout)> {
        let x0 = &self.problem.x0;
        Ok(match &self.system {
            System::Rigid(sys) => {
                let plant = Plant::rigid(sys, pert, self.dt)?;
                (
                    sim::rollout_ff(&plant, pert, &sol.us, x0)?,
                    sim::rollout_fb(&plant, pert, &sol.us, &sol.xs, &sol.k_fb, x0)?,
                )
            }
            System::Soft(act) => {
                let plant = Plant::soft(&self.model, act, pert, self.dt)?;
                (
                    sim::rollout_ff(&plant, pert, &sol.us, x0)?,
                    sim::rollout_fb(&plant, pert, &sol.us, &sol.xs, &sol.k_fb, x0)?,
                )
            }
        })
    }
}

pub fn chain_model(cfg: &TaskConfig) -> TaskResult<ChainModel> {
    let c = &cfg.chain;
    let mut model = ChainModel::new(
        c.masses.clone(),
        c.lengths.clone(),
        c.com_offsets.clone(),
        c.gravity,
    )?
    .with_inertia_mode(match c.inertia {
        InertiaConfig::PointMass => InertiaMode::PointMass,
        InertiaConfig::Rod => InertiaMode::Rod,
    });
    if let Some([bx, by]) = c.base {
        model = model.with_base(Vector2::new(bx, by));
    }
    Ok(model)
}

fn passive_stiffness(cfg: &TaskConfig) -> Vec<f64> {
    cfg.actuation
        .passive_stiffness
        .clone()
        .unwrap_or_else(|| vec![0.0; cfg.n_links()])
}

pub fn actuation_spec(cfg: &TaskConfig, variant: Variant) -> TaskResult<ActuationSpec> {
    let a = &cfg.actuation;
    let n = cfg.n_links();
    let actuated = cfg.actuated();
    let inertia = a.motor_inertia.clone().ok_or_else(|| {
        config_error(
            cfg,
            "actuation.motor_inertia",
            "required for elastic actuation",
        )
    })?;
    let spec = match variant {
        Variant::Sea => {
            let k = a.stiffness.clone().ok_or_else(|| {
                config_error(cfg, "actuation.stiffness", "required for SEA actuation")
            })?;
            ActuationSpec::sea(n, actuated, inertia, k)?
        }
        Variant::Vsa => {
            let (lo, hi) = match (&a.sigma_min, &a.sigma_max) {
                (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
                _ => {
                    return Err(config_error(
                        cfg,
                        "actuation.sigma_min",
                        "VSA actuation needs sigma_min and sigma_max",
                    ))
                }
            };
            let mut spec = ActuationSpec::vsa(n, actuated, inertia, lo, hi)?;
            if let Some(r) = &a.sigma_ref {
                spec = spec.with_sigma_ref(r.clone())?;
            }
            spec
        }
        Variant::Rigid => {
            return Err(config_error(
                cfg,
                "actuation.kind",
                "rigid variant has no elastic actuation",
            ))
        }
    };
    Ok(spec.with_passive_stiffness(passive_stiffness(cfg))?)
}

/// Soft states start at rest with every actuated spring holding the gravity
/// torque of the initial posture (`stiffness` per motor), unless
/// `initial.theta` is given.
pub fn initial_state(
    cfg: &TaskConfig,
    variant: Variant,
    model: &ChainModel,
    stiffness: &[f64],
) -> TaskResult<DVector<f64>> {
    let init = cfg.initial.as_ref().expect("validated initial state");
    let n = cfg.n_links();
    let actuated = cfg.actuated();
    let qdot = init.qdot.clone().unwrap_or_else(|| vec![0.0; n]);
    let mut x: Vec<f64> = init.q.iter().chain(&qdot).copied().collect();
    if variant != Variant::Rigid {
        let theta = match &init.theta {
            Some(t) => t.clone(),
            None => {
                let g = rigid::gravity_torques(model, &DVector::from_column_slice(&init.q))?;
                actuated
                    .iter()
                    .zip(stiffness)
                    .map(|(&j, k)| init.q[j] + g[j] / k)
                    .collect()
            }
        };
        let thetadot = init
            .thetadot
            .clone()
            .unwrap_or_else(|| vec![0.0; actuated.len()]);
        x.extend(theta);
        x.extend(thetadot);
    }
    Ok(DVector::from_vec(x))
}

/// Stiffness the initial springs are assumed to have.
fn initial_stiffness(cfg: &TaskConfig, act: &ActuationSpec) -> Vec<f64> {
    match act.stiffness() {
        StiffnessSpec::Fixed(k) => k.clone(),
        StiffnessSpec::Variable { .. } => cfg
            .actuation
            .sigma_init
            .clone()
            .unwrap_or_else(|| act.sigma_ref().to_vec()),
    }
}

/// Rest posture (or target posture) with zero velocity when configured,
/// otherwise the initial state.
fn reference_state(cfg: &TaskConfig, variant: Variant, x0: &DVector<f64>) -> DVector<f64> {
    let target = cfg.target.as_ref().expect("validated target");
    match target.rest_posture.as_ref().or(target.posture.as_ref()) {
        Some(p) => {
            let n = p.len();
            let mut x = p.clone();
            x.extend(std::iter::repeat_n(0.0, n));
            if variant != Variant::Rigid {
                let m = cfg.actuated().len();
                x.extend(cfg.actuated().iter().map(|&j| p[j]));
                x.extend(std::iter::repeat_n(0.0, m));
            }
            DVector::from_vec(x)
        }
        None => x0.clone(),
    }
}

pub fn goal_position(cfg: &TaskConfig, model: &ChainModel) -> TaskResult<Vector2<f64>> {
    let target = cfg.target.as_ref().expect("validated target");
    match (target.position, &target.posture) {
        (Some([x, y]), _) => Ok(Vector2::new(x, y)),
        (None, Some(p)) => Ok(rigid::fk_ee(model, &DVector::from_column_slice(p))?),
        (None, None) => Err(config_error(cfg, "target", "needs `position` or `posture`")),
    }
}

fn state_activation(n: usize, m: usize, variant: Variant, w: f64, wv: f64) -> DVector<f64> {
    let mut a = vec![w; n];
    a.extend(std::iter::repeat_n(wv, n));
    if variant != Variant::Rigid {
        a.extend(std::iter::repeat_n(w, m));
        a.extend(std::iter::repeat_n(wv, m));
    }
    DVector::from_vec(a)
}

pub fn build_problem(cfg: &TaskConfig, variant: Variant) -> TaskResult<BuiltProblem> {
    let model = chain_model(cfg)?;
    let n = cfg.n_links();
    let actuated = cfg.actuated();
    let m = actuated.len();
    let h = cfg.horizon();
    let dt = h.dt;
    let w = cfg.weights();
    let act = match variant {
        Variant::Rigid => None,
        _ => Some(actuation_spec(cfg, variant)?),
    };
    let k0 = act
        .as_ref()
        .map(|a| initial_stiffness(cfg, a))
        .unwrap_or_default();
    let x0 = initial_state(cfg, variant, &model, &k0)?;
    let x_ref = reference_state(cfg, variant, &x0);
    let goal = goal_position(cfg, &model)?;
    let nx = x0.len();

    let (system, nu, bounds, dynamics): (
        System,
        usize,
        Option<ControlBounds>,
        Arc<dyn soft_ocp::ddp::DiscreteDynamics>,
    ) = match variant {
        Variant::Rigid => {
            let sys = RigidSystem::new(model.clone(), actuated.clone(), passive_stiffness(cfg))?;
            let step = EulerStep::new(sys.clone(), dt)?;
            (System::Rigid(sys), m, None, Arc::new(step))
        }
        Variant::Sea | Variant::Vsa => {
            let act = act.expect("elastic actuation");
            let nu = act.control_dim();
            let plant = Plant::soft(&model, &act, &Perturbation::default(), dt)?;
            let step = EulerStep::new(SoftSystem::new(model.clone(), act.clone())?, dt)?;
            (System::Soft(act), nu, plant.bounds, Arc::new(step))
        }
    };

    let mut u_ref = DVector::zeros(nu);
    let mut us_init = None;
    if let System::Soft(act) = &system {
        if variant == Variant::Vsa {
            u_ref.rows_mut(m, m).copy_from_slice(act.sigma_ref());
            if let Some(s) = &cfg.actuation.sigma_init {
                let mut u = DVector::zeros(nu);
                u.rows_mut(m, m).copy_from_slice(s);
                let u = bounds.as_ref().map_or(u.clone(), |b| b.clamp(&u));
                us_init = Some(vec![u; h.knots()]);
            }
        }
    }

    let mut running = Vec::new();
    let wv = w.state_velocity.unwrap_or(w.state);
    if w.state > 0.0 || wv > 0.0 {
        running.push(CostTerm::state_regularization(
            1.0,
            x_ref.clone(),
            Some(state_activation(n, m, variant, w.state, wv)),
        )?);
    }
    if w.control > 0.0 {
        running.push(CostTerm::control_regularization(w.control, u_ref, None)?);
    }
    if w.goal > 0.0 {
        running.push(CostTerm::goal_tracking(w.goal, model.clone(), goal)?);
    }
    if let System::Soft(act) = &system {
        if variant == Variant::Vsa && w.stiffness > 0.0 {
            let lambda = cfg.actuation.lambda.unwrap_or(0.0);
            running.push(CostTerm::vsa_stiffness(w.stiffness, act, lambda)?);
        }
    }

    let mut terminal = Vec::new();
    if w.terminal_goal > 0.0 {
        terminal.push(CostTerm::goal_tracking(
            w.terminal_goal,
            model.clone(),
            goal,
        )?);
    }
    if w.terminal_state > 0.0 {
        terminal.push(CostTerm::state_regularization(
            w.terminal_state,
            x_ref,
            None,
        )?);
    }
    if w.terminal_velocity > 0.0 {
        let v = cfg
            .target
            .as_ref()
            .and_then(|t| t.velocity)
            .map(|[vx, vy]| Vector2::new(vx, vy))
            .unwrap_or_else(Vector2::zeros);
        terminal.push(CostTerm::tip_velocity(
            w.terminal_velocity,
            model.clone(),
            v,
        )?);
    }

    let node = RunningNode {
        dynamics,
        cost: Arc::new(CostSum::running(running, nx, nu, dt)?),
        bounds: bounds.clone(),
    };
    let problem = ShootingProblem::uniform(
        x0,
        node,
        h.knots(),
        Arc::new(CostSum::terminal(terminal, nx)),
    )?;

    let mut settings = if bounds.is_some() {
        SolverSettings::box_fddp()
    } else {
        SolverSettings {
            kind: SolverKind::Fddp,
            ..SolverSettings::default()
        }
    };
    let s = &cfg.solver;
    if let Some(v) = s.max_iterations {
        settings.max_iterations = v;
    }
    if let Some(v) = s.stop_tolerance {
        settings.stop_tolerance = v;
    }
    if let Some(v) = s.gap_tolerance {
        settings.gap_tolerance = v;
    }
    if let Some(v) = s.reg_init {
        settings.reg_init = v;
    }
    settings.validate()?;

    Ok(BuiltProblem {
        variant,
        model,
        system,
        problem,
        settings,
        dt,
        n_links: n,
        n_motors: m,
        us_init,
    })
}

/// One solved (or replayed) trajectory written to disk.
pub struct RunRecord {
    pub label: String,
    pub variant: Variant,
    pub n_links: usize,
    pub n_motors: usize,
    pub dt: f64,
    pub xs: Vec<DVector<f64>>,
    pub us: Vec<DVector<f64>>,
    pub solution: Option<Solution>,
}

impl RunRecord {
    fn solved(label: &str, built: &BuiltProblem, sol: Solution) -> Self {
        Self {
            label: label.to_string(),
            variant: built.variant,
            n_links: built.n_links,
            n_motors: built.n_motors,
            dt: built.dt,
            xs: sol.xs.clone(),
            us: sol.us.clone(),
            solution: Some(sol),
        }
    }
}

/// Everything a task produces: trajectories, a flat report and summary lines.
pub struct TaskOutcome {
    pub name: String,
    pub kind: TaskKind,
    pub runs: Vec<RunRecord>,
    pub report: BTreeMap<String, Value>,
    pub summary: Vec<String>,
    /// Extra CSV tables, `(file name, contents)`.
    pub tables: Vec<(String, String)>,
    pub converged: bool,
}

impl TaskOutcome {
    fn new(cfg: &TaskConfig) -> Self {
        let mut report = BTreeMap::new();
        report.insert("task".into(), json!(cfg.name));
        report.insert("kind".into(), json!(kind_label(cfg.kind)));
        report.insert("seed".into(), json!(cfg.seed));
        Self {
            name: cfg.name.clone(),
            kind: cfg.kind,
            runs: Vec::new(),
            report,
            summary: Vec::new(),
            tables: Vec::new(),
            converged: true,
        }
    }

    fn put(&mut self, key: impl Into<String>, value: Value) {
        self.report.insert(key.into(), value);
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.report.get(key).and_then(Value::as_f64)
    }
}

pub fn kind_label(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Regulation => "regulation",
        TaskKind::SwingUp => "swing-up",
        TaskKind::RigidVsSoft => "rigid-vs-soft",
        TaskKind::DerivativeStudy => "derivative-study",
        TaskKind::EnergyStudy => "energy-study",
    }
}

pub fn run(cfg: &TaskConfig) -> TaskResult<TaskOutcome> {
    match cfg.kind {
        TaskKind::Regulation | TaskKind::SwingUp => run_task(cfg),
        TaskKind::RigidVsSoft => run_motivational(cfg),
        TaskKind::DerivativeStudy => run_derivative_study(cfg),
        TaskKind::EnergyStudy => run_energy_study(cfg),
    }
}

fn record_solution(out: &mut TaskOutcome, prefix: &str, sol: &Solution) {
    out.put(format!("{prefix}converged"), json!(sol.converged));
    out.put(format!("{prefix}iterations"), json!(sol.iterations));
    out.put(format!("{prefix}cost"), json!(sol.cost));
    out.put(format!("{prefix}gap_norm"), json!(sol.gap_norm));
    out.put(
        format!("{prefix}termination"),
        json!(format!("{:?}", sol.termination)),
    );
    out.converged &= sol.converged;
}

fn tip_metrics(
    out: &mut TaskOutcome,
    cfg: &TaskConfig,
    built: &BuiltProblem,
    x_final: &DVector<f64>,
) -> TaskResult<()> {
    let n = built.n_links;
    let q = x_final.rows(0, n).into_owned();
    let tip = rigid::fk_ee(&built.model, &q)?;
    let goal = goal_position(cfg, &built.model)?;
    let err = (tip - goal).norm();
    out.put("tip_x", json!(tip.x));
    out.put("tip_y", json!(tip.y));
    out.put("target_x", json!(goal.x));
    out.put("target_y", json!(goal.y));
    out.put("tip_error", json!(err));
    out.summary.push(format!(
        "final tip position [{:.4}, {:.4}] m, target [{:.4}, {:.4}] m, error {:.2} mm",
        tip.x,
        tip.y,
        goal.x,
        goal.y,
        err * 1e3
    ));
    if let Some(p) = cfg.target.as_ref().and_then(|t| t.posture.as_ref()) {
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let e = x_final[j] - p[j];
            worst = worst.max(e.abs());
            out.put(format!("joint_error_{j}"), json!(e));
        }
        out.put("joint_error_max", json!(worst));
        out.summary
            .push(format!("largest terminal joint error {worst:.4} rad"));
    }
    if let Some([vx, vy]) = cfg.target.as_ref().and_then(|t| t.velocity) {
        let qdot = x_final.rows(n, n).into_owned();
        let (v, _) = rigid::tip_velocity(&built.model, &q, &qdot)?;
        out.put("tip_vx", json!(v.x));
        out.put("tip_vy", json!(v.y));
        out.summary.push(format!(
            "final tip velocity [{:.3}, {:.3}] m/s, target [{vx:.3}, {vy:.3}] m/s",
            v.x, v.y
        ));
    }
    Ok(())
}

/// Mean per-joint RMS tracking error of FF and FF+FB rollouts over seeded
/// perturbation draws. A diverged rollout counts as infinite error.
pub fn feedback_study(
    built: &BuiltProblem,
    sol: &Solution,
    trials: usize,
    mass_scale: [f64; 2],
    torque_noise_std: f64,
    stiffness_scale: f64,
    seed: u64,
) -> TaskResult<(Vec<f64>, Vec<f64>)> {
    let n = built.n_links;
    let mut ff = vec![0.0; n];
    let mut fb = vec![0.0; n];
    let rms = |r: &Rollout| -> TaskResult<Vec<f64>> {
        if r.failed {
            Ok(vec![f64::INFINITY; n])
        } else {
            Ok(sim::rms_error(&r.xs, &sol.xs, n)?)
        }
    };
    for i in 0..trials {
        let trial_seed = seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let scale = if mass_scale[0] < mass_scale[1] {
            rng.random_range(mass_scale[0]..=mass_scale[1])
        } else {
            mass_scale[0]
        };
        let pert = Perturbation {
            mass_scale: scale,
            stiffness_scale,
            x0_offset: None,
            torque_noise_std,
            seed: trial_seed,
        };
        let (r_ff, r_fb) = built.plant_rollouts(&pert, sol)?;
        for (acc, e) in ff.iter_mut().zip(rms(&r_ff)?) {
            *acc += e / trials as f64;
        }
        for (acc, e) in fb.iter_mut().zip(rms(&r_fb)?) {
            *acc += e / trials as f64;
        }
    }
    Ok((ff, fb))
}

/// Regulation or swing-up of one configured system.
pub fn run_task(cfg: &TaskConfig) -> TaskResult<TaskOutcome> {
    let mut out = TaskOutcome::new(cfg);
    let variant = Variant::of(cfg.actuation.kind);
    let built = build_problem(cfg, variant)?;
    let sol = built.solve()?;
    record_solution(&mut out, "", &sol);
    out.summary.push(format!(
        "{} ({}) solved with {:?}: converged={} after {} iterations, cost {:.6}",
        cfg.name,
        variant.label(),
        built.settings.kind,
        sol.converged,
        sol.iterations,
        sol.cost
    ));

    // nominal plant replay of the optimal controls
    let (nominal, _) = built.plant_rollouts(&Perturbation::default(), &sol)?;
    if nominal.failed {
        return Err(TaskError::Model(soft_ocp::Error::Internal(
            "nominal replay diverged".into(),
        )));
    }
    tip_metrics(&mut out, cfg, &built, nominal.xs.last().unwrap())?;
    let energy = sim::energy(&sol.us, built.n_motors);
    out.put("energy", json!(energy));
    out.summary
        .push(format!("torque-squared energy {energy:.6}"));
    if variant == Variant::Vsa {
        let m = built.n_motors;
        let sig = sol
            .us
            .iter()
            .flat_map(|u| u.rows(m, m).iter().copied().collect::<Vec<_>>());
        let (lo, hi) = sig.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
            (a.min(s), b.max(s))
        });
        out.put("sigma_min_used", json!(lo));
        out.put("sigma_max_used", json!(hi));
        out.summary.push(format!(
            "stiffness command range [{lo:.4}, {hi:.4}] N m/rad"
        ));
    }

    if let Some(p) = &cfg.perturbation {
        let (ff, fb) = feedback_study(
            &built,
            &sol,
            p.trials,
            p.mass_scale,
            p.torque_noise_std,
            p.stiffness_scale.unwrap_or(1.0),
            cfg.seed,
        )?;
        let mut table = String::from("joint,rms_ff,rms_fb\n");
        for j in 0..built.n_links {
            out.put(format!("rms_ff_{j}"), json!(ff[j]));
            out.put(format!("rms_fb_{j}"), json!(fb[j]));
            table.push_str(&format!("{j},{:.16e},{:.16e}\n", ff[j], fb[j]));
            out.summary.push(format!(
                "joint {j}: mean RMS FF {:.5} rad, FF+FB {:.5} rad",
                ff[j], fb[j]
            ));
        }
        let mean_ff = ff.iter().sum::<f64>() / ff.len() as f64;
        let mean_fb = fb.iter().sum::<f64>() / fb.len() as f64;
        out.put("rms_ff_mean", json!(mean_ff));
        out.put("rms_fb_mean", json!(mean_fb));
        out.put("feedback_dominates", json!(mean_fb <= mean_ff));
        out.summary.push(format!(
            "{} perturbed rollouts: mean RMS FF {mean_ff:.5} rad, FF+FB {mean_fb:.5} rad",
            p.trials
        ));
        out.tables.push(("rms.csv".into(), table));
    }
    out.runs
        .push(RunRecord::solved(variant.label(), &built, sol));
    Ok(out)
}

/// Solves the rigid problem and replays its torques on rigid and soft plants.
pub fn run_motivational(cfg: &TaskConfig) -> TaskResult<TaskOutcome> {
    let mut out = TaskOutcome::new(cfg);
    let built = build_problem(cfg, Variant::Rigid)?;
    let sol = built.solve()?;
    record_solution(&mut out, "", &sol);
    let goal = goal_position(cfg, &built.model)?;
    let n = built.n_links;

    let (rigid_replay, _) = built.plant_rollouts(&Perturbation::default(), &sol)?;
    let mut table = String::from("plant,stiffness,tip_x,tip_y,error_x,error_y,error\n");
    let mut add = |out: &mut TaskOutcome,
                   label: &str,
                   stiffness: f64,
                   xs: &[DVector<f64>],
                   failed: bool|
     -> TaskResult<()> {
        let tip = if failed {
            Vector2::new(f64::NAN, f64::NAN)
        } else {
            rigid::fk_ee(&built.model, &xs.last().unwrap().rows(0, n).into_owned())?
        };
        let e = tip - goal;
        out.put(format!("{label}_tip_x"), json!(tip.x));
        out.put(format!("{label}_tip_y"), json!(tip.y));
        out.put(format!("{label}_error_x"), json!(e.x));
        out.put(format!("{label}_error_y"), json!(e.y));
        out.put(format!("{label}_error"), json!(e.norm()));
        table.push_str(&format!(
            "{label},{stiffness:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            tip.x,
            tip.y,
            e.x,
            e.y,
            e.norm()
        ));
        out.summary.push(format!(
            "{label}: final tip [{:.4}, {:.4}] m, error [{:+.4}, {:+.4}] m ({:.2} mm)",
            tip.x,
            tip.y,
            e.x,
            e.y,
            e.norm() * 1e3
        ));
        Ok(())
    };
    add(
        &mut out,
        "rigid",
        f64::INFINITY,
        &rigid_replay.xs,
        rigid_replay.failed,
    )?;

    let sweep = cfg
        .study
        .as_ref()
        .and_then(|s| s.stiffness_sweep.clone())
        .unwrap_or_default();
    let inertia =
        cfg.actuation.motor_inertia.clone().ok_or_else(|| {
            config_error(cfg, "actuation.motor_inertia", "required for soft plants")
        })?;
    let m = built.n_motors;
    for (i, &k) in sweep.iter().enumerate() {
        let act = ActuationSpec::sea(n, cfg.actuated(), inertia.clone(), vec![k; m])?
            .with_passive_stiffness(passive_stiffness(cfg))?;
        let x0_soft = initial_state(cfg, Variant::Sea, &built.model, &vec![k; m])?;
        let plant = Plant::soft(&built.model, &act, &Perturbation::default(), built.dt)?;
        let r = sim::rollout_ff(&plant, &Perturbation::default(), &sol.us, &x0_soft)?;
        let label = format!("soft_{i}");
        out.put(format!("{label}_stiffness"), json!(k));
        add(&mut out, &label, k, &r.xs, r.failed)?;
        if !r.failed {
            out.runs.push(RunRecord {
                label: format!("sea_k{k}"),
                variant: Variant::Sea,
                n_links: n,
                n_motors: m,
                dt: built.dt,
                xs: r.xs,
                us: r.us,
                solution: None,
            });
        }
    }
    out.put("sweep_size", json!(sweep.len()));
    out.tables.push(("replay.csv".into(), table));
    out.runs.insert(0, RunRecord::solved("rigid", &built, sol));
    Ok(out)
}

fn diff_rows(label: &str, samples: &[SampleDiff], table: &mut String) {
    for (i, s) in samples.iter().enumerate() {
        table.push_str(&format!(
            "{label},{i},{:.16e},{:.16e},{:.16e}\n",
            s.max_abs_diff, s.normalizer, s.ratio
        ));
    }
}

/// Analytical versus finite-difference derivatives on random configurations.
pub fn run_derivative_study(cfg: &TaskConfig) -> TaskResult<TaskOutcome> {
    let mut out = TaskOutcome::new(cfg);
    let model = chain_model(cfg)?;
    let study = cfg.study.clone().unwrap_or_default();
    let samples = study.samples.unwrap_or(20);
    let calls = study.timing_calls.unwrap_or(100);
    let mut table = String::from("actuation,sample,max_abs_diff,max_abs_analytic,ratio\n");
    let mut variants = Vec::new();
    if cfg.actuation.stiffness.is_some() {
        variants.push(Variant::Sea);
    }
    if cfg.actuation.sigma_min.is_some() {
        variants.push(Variant::Vsa);
    }
    for v in variants {
        let act = actuation_spec(cfg, v)?;
        let acc =
            numdiff::compare_accuracy(&model, &act, samples, cfg.seed, numdiff::DEFAULT_STEP)?;
        let timing =
            numdiff::time_derivatives(&model, &act, calls, cfg.seed, numdiff::DEFAULT_STEP)?;
        let l = v.label();
        out.put(format!("{l}_mean_ratio"), json!(acc.mean_ratio));
        out.put(format!("{l}_std_ratio"), json!(acc.std_ratio));
        out.put(format!("{l}_max_ratio"), json!(acc.max_ratio));
        out.put(
            format!("{l}_analytic_seconds"),
            json!(timing.analytic_seconds),
        );
        out.put(
            format!("{l}_numdiff_seconds"),
            json!(timing.numdiff_seconds),
        );
        out.summary.push(format!(
            "{}DoF {}: ratio mean {:.3e} std {:.3e} max {:.3e}; per call analytic {:.3} us, numdiff {:.3} us",
            model.n_links(),
            l.to_uppercase(),
            acc.mean_ratio,
            acc.std_ratio,
            acc.max_ratio,
            timing.analytic_seconds * 1e6,
            timing.numdiff_seconds * 1e6
        ));
        diff_rows(l, &acc.samples, &mut table);
    }
    out.tables.push(("derivatives.csv".into(), table));
    Ok(out)
}

/// The same task solved with rigid, SEA and VSA actuation under identical weights.
pub fn run_energy_study(cfg: &TaskConfig) -> TaskResult<TaskOutcome> {
    let mut out = TaskOutcome::new(cfg);
    let mut energies = Vec::new();
    let mut table = String::from("actuation,energy,converged,iterations\n");
    for v in [Variant::Rigid, Variant::Sea, Variant::Vsa] {
        let built = build_problem(cfg, v)?;
        let sol = built.solve()?;
        let l = v.label();
        record_solution(&mut out, &format!("{l}_"), &sol);
        let e = sim::energy(&sol.us, built.n_motors);
        let tip = rigid::fk_ee(
            &built.model,
            &sol.xs.last().unwrap().rows(0, built.n_links).into_owned(),
        )?;
        let err = (tip - goal_position(cfg, &built.model)?).norm();
        out.put(format!("{l}_energy"), json!(e));
        out.put(format!("{l}_tip_error"), json!(err));
        table.push_str(&format!(
            "{l},{e:.16e},{},{}\n",
            sol.converged, sol.iterations
        ));
        out.summary.push(format!(
            "{}: sum of squared torques {e:.4}, tip error {:.2} mm, converged={}",
            l.to_uppercase(),
            err * 1e3,
            sol.converged
        ));
        energies.push(e);
        out.runs.push(RunRecord::solved(l, &built, sol));
    }
    let ordered = energies[0] > energies[1] && energies[1] > energies[2];
    out.put("ordering_holds", json!(ordered));
    out.summary.push(format!(
        "ordering rigid > SEA > VSA: {}",
        if ordered { "holds" } else { "violated" }
    ));
    out.tables.push(("energy.csv".into(), table));
    Ok(out)
}
