use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::costs::CostQuadratic;
use crate::error::{check_dim, Error, Result};

/// Next state and its Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub next: DVector<f64>,
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
}

pub trait DiscreteDynamics: Send + Sync {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn linearize(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Linearization>;
}

/// Stage cost; the terminal cost receives an empty control.
pub trait StageCost: Send + Sync {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64>;
    fn quadratic(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<CostQuadratic>;
}

/// Elementwise `lower <= u <= upper`; infinite entries are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ControlBounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim("control bounds", lower.len(), upper.len())?;
        if lower
            .iter()
            .zip(upper.iter())
            .any(|(l, u)| !(l < u) || l.is_nan())
        {
            return Err(Error::InvalidArgument(
                "control bounds must satisfy lower < upper".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|v| *v == f64::NEG_INFINITY)
            && self.upper.iter().all(|v| *v == f64::INFINITY)
    }

    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(u.len(), |i, _| u[i].max(self.lower[i]).min(self.upper[i]))
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper[i])
    }
}

#[derive(Clone)]
pub struct RunningNode {
    pub dynamics: Arc<dyn DiscreteDynamics>,
    pub cost: Arc<dyn StageCost>,
    pub bounds: Option<ControlBounds>,
}

#[derive(Clone)]
pub struct ShootingProblem {
    pub x0: DVector<f64>,
    pub running: Vec<RunningNode>,
    pub terminal: Arc<dyn StageCost>,
}

impl ShootingProblem {
    pub fn new(
        x0: DVector<f64>,
        running: Vec<RunningNode>,
        terminal: Arc<dyn StageCost>,
    ) -> Result<Self> {
        if running.is_empty() {
            return Err(Error::InvalidArgument(
                "horizon must have at least one node".into(),
            ));
        }
        for node in &running {
            check_dim("node state", x0.len(), node.dynamics.nx())?;
            if let Some(b) = &node.bounds {
                check_dim("node bounds", node.dynamics.nu(), b.lower.len())?;
            }
        }
        Ok(Self {
            x0,
            running,
            terminal,
        })
    }

    /// Uniform horizon of `n` copies of the same node.
    pub fn uniform(
        x0: DVector<f64>,
        node: RunningNode,
        n: usize,
        terminal: Arc<dyn StageCost>,
    ) -> Result<Self> {
        Self::new(x0, vec![node; n], terminal)
    }

    pub fn horizon(&self) -> usize {
        self.running.len()
    }

    pub fn nx(&self) -> usize {
        self.x0.len()
    }

    /// Sequential rollout from `x0`.
    pub fn rollout(&self, us: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        check_dim("controls", self.horizon(), us.len())?;
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(self.x0.clone());
        for (node, u) in self.running.iter().zip(us) {
            let next = node.dynamics.step(xs.last().unwrap(), u)?;
            xs.push(next);
        }
        Ok(xs)
    }

    pub fn total_cost(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> Result<f64> {
        check_dim("states", self.horizon() + 1, xs.len())?;
        check_dim("controls", self.horizon(), us.len())?;
        let mut c = 0.0;
        for ((node, x), u) in self.running.iter().zip(xs).zip(us) {
            c += node.cost.value(x, u)?;
        }
        Ok(c + self
            .terminal
            .value(&xs[self.horizon()], &DVector::zeros(0))?)
    }

    /// `xs` constant at `x0` and zero controls, each clamped into its bounds.
    pub fn quasi_static_guess(&self) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let xs = vec![self.x0.clone(); self.horizon() + 1];
        let us = self
            .running
            .iter()
            .map(|n| {
                let u = DVector::zeros(n.dynamics.nu());
                match &n.bounds {
                    Some(b) => b.clamp(&u),
                    None => u,
                }
            })
            .collect();
        (xs, us)
    }
}
