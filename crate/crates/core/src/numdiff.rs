//! Central-difference Jacobians of the block forward dynamics, and the
//! analytical-vs-numerical comparison study.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rigid::ChainModel;
use crate::soft::{self, AccelJacobians, ActuationKind, ActuationSpec, ControlInput, SoftState};

pub const DEFAULT_STEP: f64 = 1e-6;

/// Central differences of [`soft::forward_dynamics`] over every state and
/// control coordinate.
pub fn numdiff_dynamics(
    model: &ChainModel,
    act: &ActuationSpec,
    x: &SoftState,
    u: &ControlInput,
    h: f64,
) -> Result<AccelJacobians> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let n = model.n_links();
    let m = act.n_motors();
    let xv = x.to_vector();
    let uv = u.to_vector();
    let eval = |xv: &DVector<f64>, uv: &DVector<f64>| -> Result<DVector<f64>> {
        let xs = SoftState::from_vector(xv, n, m)?;
        let us = ControlInput::from_vector(uv, act.kind(), m)?;
        Ok(soft::forward_dynamics(model, act, &xs, &us)?.to_vector())
    };
    let mut dx = DMatrix::zeros(n + m, xv.len());
    for c in 0..xv.len() {
        let (mut p, mut q) = (xv.clone(), xv.clone());
        p[c] += h;
        q[c] -= h;
        dx.set_column(c, &((eval(&p, &uv)? - eval(&q, &uv)?) / (2.0 * h)));
    }
    let mut du = DMatrix::zeros(n + m, uv.len());
    for c in 0..uv.len() {
        let (mut p, mut q) = (uv.clone(), uv.clone());
        p[c] += h;
        q[c] -= h;
        du.set_column(c, &((eval(&xv, &p)? - eval(&xv, &q)?) / (2.0 * h)));
    }
    Ok(AccelJacobians { dx, du })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockDiff {
    pub name: &'static str,
    pub max_abs_diff: f64,
}

/// Difference between two Jacobian sets at one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleDiff {
    pub blocks: Vec<BlockDiff>,
    pub max_abs_diff: f64,
    pub normalizer: f64,
    pub ratio: f64,
}

pub fn diff_jacobians(analytic: &AccelJacobians, numeric: &AccelJacobians, n: usize) -> SampleDiff {
    let rows = analytic.dx.nrows();
    let m = rows - n;
    let block = |a: &DMatrix<f64>, b: &DMatrix<f64>, r0: usize, nr: usize| {
        if nr == 0 || a.ncols() == 0 {
            0.0
        } else {
            (a.rows(r0, nr) - b.rows(r0, nr)).amax()
        }
    };
    let blocks = vec![
        BlockDiff {
            name: "link/state",
            max_abs_diff: block(&analytic.dx, &numeric.dx, 0, n),
        },
        BlockDiff {
            name: "link/control",
            max_abs_diff: block(&analytic.du, &numeric.du, 0, n),
        },
        BlockDiff {
            name: "motor/state",
            max_abs_diff: block(&analytic.dx, &numeric.dx, n, m),
        },
        BlockDiff {
            name: "motor/control",
            max_abs_diff: block(&analytic.du, &numeric.du, n, m),
        },
    ];
    let max_abs_diff = blocks.iter().map(|b| b.max_abs_diff).fold(0.0, f64::max);
    let normalizer = analytic.dx.amax().max(analytic.du.amax());
    SampleDiff {
        blocks,
        max_abs_diff,
        normalizer,
        ratio: if normalizer > 0.0 {
            max_abs_diff / normalizer
        } else {
            max_abs_diff
        },
    }
}

/// Accuracy part of the comparison; reproducible from the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffAccuracy {
    pub samples: Vec<SampleDiff>,
    pub mean_ratio: f64,
    pub std_ratio: f64,
    pub max_ratio: f64,
}

/// Wall time per Jacobian evaluation, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffTiming {
    pub calls: usize,
    pub analytic_seconds: f64,
    pub numdiff_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffReport {
    pub accuracy: DiffAccuracy,
    pub timing: DiffTiming,
}

/// Random configuration with zero velocities and zero torques. VSA
/// stiffness is drawn uniformly within its bounds.
pub fn random_configuration(
    act: &ActuationSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (SoftState, ControlInput) {
    let m = act.n_motors();
    let mut x = SoftState::zeros(n, m);
    for i in 0..n {
        x.q[i] = rng.random_range(-PI..PI);
    }
    for j in 0..m {
        x.theta[j] = rng.random_range(-PI..PI);
    }
    let tau = DVector::zeros(m);
    let u = match act.kind() {
        ActuationKind::Sea => ControlInput::sea(tau),
        ActuationKind::Vsa => {
            let (lo, hi) = act.sigma_bounds().expect("VSA bounds");
            ControlInput::vsa(
                tau,
                DVector::from_fn(m, |j, _| rng.random_range(lo[j]..=hi[j])),
            )
        }
    };
    (x, u)
}

fn accuracy(samples: Vec<SampleDiff>) -> DiffAccuracy {
    let k = samples.len() as f64;
    let mean = samples.iter().map(|s| s.ratio).sum::<f64>() / k;
    let var = samples
        .iter()
        .map(|s| (s.ratio - mean).powi(2))
        .sum::<f64>()
        / k;
    let max = samples.iter().map(|s| s.ratio).fold(0.0, f64::max);
    DiffAccuracy {
        samples,
        mean_ratio: mean,
        std_ratio: var.sqrt(),
        max_ratio: max,
    }
}

/// Accuracy over `n_samples` seeded configurations.
pub fn compare_accuracy(
    model: &ChainModel,
    act: &ActuationSpec,
    n_samples: usize,
    seed: u64,
    h: f64,
) -> Result<DiffAccuracy> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "at least one sample is required".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (x, u) = random_configuration(act, model.n_links(), &mut rng);
        let (_, analytic) = soft::fd_derivatives(model, act, &x, &u)?;
        let numeric = numdiff_dynamics(model, act, &x, &u, h)?;
        samples.push(diff_jacobians(&analytic, &numeric, model.n_links()));
    }
    Ok(accuracy(samples))
}

/// Mean wall time of both methods over `calls` evaluations (at least 100).
pub fn time_derivatives(
    model: &ChainModel,
    act: &ActuationSpec,
    calls: usize,
    seed: u64,
    h: f64,
) -> Result<DiffTiming> {
    let calls = calls.max(100);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let configs: Vec<_> = (0..16)
        .map(|_| random_configuration(act, model.n_links(), &mut rng))
        .collect();
    let mut sink = 0.0;
    let start = Instant::now();
    for i in 0..calls {
        let (x, u) = &configs[i % configs.len()];
        sink += soft::fd_derivatives(model, act, x, u)?.1.dx[(0, 0)];
    }
    let analytic = start.elapsed().as_secs_f64() / calls as f64;
    let start = Instant::now();
    for i in 0..calls {
        let (x, u) = &configs[i % configs.len()];
        sink += numdiff_dynamics(model, act, x, u, h)?.dx[(0, 0)];
    }
    let numdiff = start.elapsed().as_secs_f64() / calls as f64;
    std::hint::black_box(sink);
    Ok(DiffTiming {
        calls,
        analytic_seconds: analytic,
        numdiff_seconds: numdiff,
    })
}

/// Accuracy over seeded configurations plus per-call timing of both methods.
pub fn compare_derivatives(
    model: &ChainModel,
    act: &ActuationSpec,
    n_samples: usize,
    seed: u64,
) -> Result<DiffReport> {
    Ok(DiffReport {
        accuracy: compare_accuracy(model, act, n_samples, seed, DEFAULT_STEP)?,
        timing: time_derivatives(model, act, 100, seed, DEFAULT_STEP)?,
    })
}
