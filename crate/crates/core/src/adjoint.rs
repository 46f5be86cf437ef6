//! Parameter gradients of ODE solutions.
//!
//! For `dx/dt = f(t, x; θ)` integrated from `t_from` to `t_to` and a loss
//! `L(x(t_to))`, the adjoint method integrates the augmented system
//!
//! ```text
//! dx/dt   =  f
//! da_x/dt = -a_xᵀ ∂f/∂x
//! da_θ/dt = -a_xᵀ ∂f/∂θ
//! ```
//!
//! backward from `(x(t_to), ∂L/∂x(t_to), 0)`. Each right-hand side records
//! one evaluation of `f` on a fresh tape and takes a single vector–Jacobian
//! product, so memory does not grow with the number of steps. The forward
//! trajectory is reconstructed by integrating `x` backward alongside.
//!
//! [`unrolled_gradients`] is the reference: fixed-step RK4 recorded on one
//! tape and differentiated directly, with memory linear in the step count.

use crate::model::{ModelError, ModelScore};
use crate::process::Condition;
use crate::solver::{dopri5, rk4, DynError, SolveError, SolverStats, Tolerance};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum AdjointError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite adjoint state at t={t}")]
    NonFinite { t: f64 },
    #[error("{0}")]
    Shape(String),
}

/// Dynamics `f(t, x; θ)` that can be recorded on a tape.
pub trait Dynamics {
    /// Current parameter values, in the order `build` expects them.
    fn params(&self) -> &[Tensor];
    fn state_shape(&self) -> Vec<usize>;
    /// Records `f(t, x; θ)`; `params` are tape vars for [`params`](Self::params).
    fn build(&self, tape: &mut Tape, t: f64, x: Var, params: &[Var]) -> Result<Var, AdjointError>;
}

/// The probability-flow drift of a network-backed score.
pub struct ProbabilityFlow<'a> {
    pub score: ModelScore<'a>,
    pub cond: &'a Condition,
}

impl Dynamics for ProbabilityFlow<'_> {
    fn params(&self) -> &[Tensor] {
        self.score.net.params()
    }

    fn state_shape(&self) -> Vec<usize> {
        self.cond.mu.shape().to_vec()
    }

    fn build(&self, tape: &mut Tape, t: f64, x: Var, params: &[Var]) -> Result<Var, AdjointError> {
        let lr = tape.constant(self.cond.lr.clone());
        let mu = tape.constant(self.cond.mu.clone());
        let s = self.score.score_var(tape, params, x, lr, mu, t)?;
        let process = self.score.process;
        let beta = process.schedule.beta(t);
        let d = tape.sub(x, mu)?;
        let a = tape.scale(d, -0.5 * beta)?;
        let b = tape.scale(s, -0.5 * beta * process.sigma2())?;
        Ok(tape.add(a, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdjointSolver {
    Adaptive(Tolerance),
    Rk4 { steps: usize },
}

#[derive(Debug, Clone)]
pub struct AdjointResult {
    /// `∂L/∂θ`, one tensor per parameter.
    pub dl_dparams: Vec<Tensor>,
    /// `∂L/∂x(t_from)`.
    pub dl_dx_init: Tensor,
    /// `x(t_from)` as reconstructed by the backward pass.
    pub x_init: Tensor,
    pub stats: SolverStats,
}

/// Evaluates `f` once without recording gradients.
pub fn eval_dynamics(dynamics: &dyn Dynamics, t: f64, x: &[f64]) -> Result<Vec<f64>, AdjointError> {
    let mut tape = Tape::new();
    let params: Vec<Var> = dynamics.params().iter().map(|p| tape.leaf(p.clone(), false)).collect();
    let xv = tape.leaf(Tensor::new(&dynamics.state_shape(), x.to_vec())?, false);
    let f = dynamics.build(&mut tape, t, xv, &params)?;
    Ok(tape.value(f).data().to_vec())
}

/// Integrates the dynamics forward, returning `x(t_to)`.
pub fn integrate(
    dynamics: &dyn Dynamics,
    x_init: &Tensor,
    t_from: f64,
    t_to: f64,
    solver: AdjointSolver,
) -> Result<(Tensor, SolverStats), AdjointError> {
    let mut x = x_init.data().to_vec();
    let f = |t: f64, x: &[f64], dx: &mut [f64]| -> Result<(), DynError> {
        dx.copy_from_slice(&eval_dynamics(dynamics, t, x)?);
        Ok(())
    };
    let stats = match solver {
        AdjointSolver::Adaptive(tol) => dopri5(f, &mut x, t_from, t_to, tol)?,
        AdjointSolver::Rk4 { steps } => rk4(f, &mut x, t_from, t_to, steps)?,
    };
    Ok((Tensor::new(x_init.shape(), x)?, stats))
}

/// Gradients of `L(x(t_to))` by the continuous adjoint, given the forward
/// solution `x_final = x(t_to)` and `dl_dx_final = ∂L/∂x(t_to)`.
pub fn adjoint_gradients(
    dynamics: &dyn Dynamics,
    x_final: &Tensor,
    t_from: f64,
    t_to: f64,
    dl_dx_final: &Tensor,
    solver: AdjointSolver,
) -> Result<AdjointResult, AdjointError> {
    let shape = dynamics.state_shape();
    if x_final.shape() != shape.as_slice() || dl_dx_final.shape() != shape.as_slice() {
        return Err(AdjointError::Shape(format!(
            "state {:?}, cotangent {:?}, expected {shape:?}",
            x_final.shape(),
            dl_dx_final.shape()
        )));
    }
    let n = x_final.len();
    let param_shapes: Vec<Vec<usize>> = dynamics.params().iter().map(|p| p.shape().to_vec()).collect();
    let n_theta: usize = dynamics.params().iter().map(Tensor::len).sum();

    let mut state = Vec::with_capacity(2 * n + n_theta);
    state.extend_from_slice(x_final.data());
    state.extend_from_slice(dl_dx_final.data());
    state.resize(2 * n + n_theta, 0.0);

    let rhs = |t: f64, s: &[f64], ds: &mut [f64]| -> Result<(), DynError> {
        let mut tape = Tape::new();
        let params: Vec<Var> = dynamics.params().iter().map(|p| tape.leaf(p.clone(), true)).collect();
        let x = tape.leaf(Tensor::new(&shape, s[..n].to_vec())?, true);
        let f = dynamics.build(&mut tape, t, x, &params)?;
        ds[..n].copy_from_slice(tape.value(f).data());
        let a = Tensor::new(&shape, s[n..2 * n].to_vec())?;
        let mut wrt = Vec::with_capacity(params.len() + 1);
        wrt.push(x);
        wrt.extend_from_slice(&params);
        let vjps = tape.vjp(f, &a, &wrt)?;
        let mut off = n;
        for g in &vjps {
            for (d, v) in ds[off..off + g.len()].iter_mut().zip(g.data()) {
                *d = -v;
            }
            off += g.len();
        }
        if ds.iter().any(|v| !v.is_finite()) {
            return Err(Box::new(AdjointError::NonFinite { t }));
        }
        Ok(())
    };
    let stats = if t_from == t_to {
        SolverStats::default()
    } else {
        match solver {
            AdjointSolver::Adaptive(tol) => dopri5(rhs, &mut state, t_to, t_from, tol)?,
            AdjointSolver::Rk4 { steps } => rk4(rhs, &mut state, t_to, t_from, steps)?,
        }
    };
    let x_init = Tensor::new(&shape, state[..n].to_vec())?;
    let dl_dx_init = Tensor::new(&shape, state[n..2 * n].to_vec())?;
    let mut off = 2 * n;
    let mut dl_dparams = Vec::with_capacity(param_shapes.len());
    for s in &param_shapes {
        let len: usize = s.iter().product();
        dl_dparams.push(Tensor::new(s, state[off..off + len].to_vec())?);
        off += len;
    }
    Ok(AdjointResult {
        dl_dparams,
        dl_dx_init,
        x_init,
        stats,
    })
}

/// Gradients through `steps` RK4 steps recorded on a single tape. Returns
/// `(∂L/∂θ, ∂L/∂x_init)`.
pub fn unrolled_gradients(
    dynamics: &dyn Dynamics,
    x_init: &Tensor,
    t_from: f64,
    t_to: f64,
    steps: usize,
    dl_dx_final: &Tensor,
) -> Result<(Vec<Tensor>, Tensor), AdjointError> {
    if steps == 0 {
        return Err(SolveError::Config("rk4 needs at least one step".into()).into());
    }
    let shape = dynamics.state_shape();
    if dl_dx_final.shape() != shape.as_slice() || x_init.shape() != shape.as_slice() {
        return Err(AdjointError::Shape(format!("expected state {shape:?}")));
    }
    let mut tape = Tape::new();
    let params: Vec<Var> = dynamics.params().iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let x0 = tape.leaf(x_init.clone(), true);
    let mut x = x0;
    let h = (t_to - t_from) / steps as f64;
    for s in 0..steps {
        let t = t_from + s as f64 * h;
        let k1 = dynamics.build(&mut tape, t, x, &params)?;
        let d = tape.scale(k1, 0.5 * h)?;
        let x2 = tape.add(x, d)?;
        let k2 = dynamics.build(&mut tape, t + 0.5 * h, x2, &params)?;
        let d = tape.scale(k2, 0.5 * h)?;
        let x3 = tape.add(x, d)?;
        let k3 = dynamics.build(&mut tape, t + 0.5 * h, x3, &params)?;
        let d = tape.scale(k3, h)?;
        let x4 = tape.add(x, d)?;
        let k4 = dynamics.build(&mut tape, t + h, x4, &params)?;
        let a = tape.add(k2, k3)?;
        let a = tape.scale(a, 2.0)?;
        let b = tape.add(k1, k4)?;
        let incr = tape.add(a, b)?;
        let incr = tape.scale(incr, h / 6.0)?;
        x = tape.add(x, incr)?;
    }
    let w = tape.constant(dl_dx_final.clone());
    let prod = tape.mul(x, w)?;
    let loss = tape.sum(prod)?;
    let mut g = tape.backward(loss)?;
    let grads = params
        .iter()
        .zip(dynamics.params())
        .map(|(&v, p)| g.take_or_zeros(v, p.shape()))
        .collect();
    let gx = g.take_or_zeros(x0, x_init.shape());
    Ok((grads, gx))
}
