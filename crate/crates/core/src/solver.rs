//! ODE integrators on flat state vectors.
//!
//! Dynamics are `f(t, x, dx)` writing `dx/dt` into `dx`. Both integrators
//! run in either time direction.

/// Error raised by a dynamics callback, boxed so any module's error fits.
pub type DynError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("step size underflow at t={t}: |h|={h:e} below {min:e}")]
    StepUnderflow { t: f64, h: f64, min: f64 },
    #[error("non-finite state at t={t}")]
    NonFinite { t: f64 },
    #[error("invalid solver setting: {0}")]
    Config(String),
    #[error("dynamics failed at t={t}: {source}")]
    Dynamics {
        t: f64,
        #[source]
        source: DynError,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    /// Dynamics evaluations.
    pub nfe: usize,
}

/// Tolerances for [`dopri5`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { atol: 1e-4, rtol: 1e-4 }
    }
}

// Dormand–Prince 5(4) tableau
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// fifth-order weights minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const PI_BETA: f64 = 0.04;
const UNDERFLOW: f64 = 1e-12;

fn call<F>(f: &mut F, t: f64, x: &[f64], dx: &mut [f64], stats: &mut SolverStats) -> Result<(), SolveError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), DynError>,
{
    stats.nfe += 1;
    f(t, x, dx).map_err(|source| SolveError::Dynamics { t, source })
}

/// Adaptive Dormand–Prince 5(4) with PI step control.
///
/// The initial step is `(t_to - t_from) / 100`. A step is accepted when the
/// RMS of `err_i / (atol + rtol max(|x_i|, |x_new_i|))` is at most one.
pub fn dopri5<F>(mut f: F, x: &mut [f64], t_from: f64, t_to: f64, tol: Tolerance) -> Result<SolverStats, SolveError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), DynError>,
{
    if !(tol.atol > 0.0 && tol.rtol > 0.0) {
        return Err(SolveError::Config(format!("tolerances {tol:?} must be positive")));
    }
    let mut stats = SolverStats::default();
    let span = t_to - t_from;
    if span == 0.0 {
        return Ok(stats);
    }
    let n = x.len();
    let dir = span.signum();
    let min_step = UNDERFLOW * span.abs();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut t = t_from;
    let mut h = span / 100.0;
    let mut err_old: f64 = 1e-4;
    let mut rejected_last = false;

    call(&mut f, t, x, &mut k[0], &mut stats)?;
    loop {
        let remaining = t_to - t;
        if remaining * dir <= 0.0 {
            break;
        }
        let last = (h * dir) >= remaining * dir;
        if last {
            h = remaining;
        }
        for s in 1..7 {
            let (done, rest) = k.split_at_mut(s);
            for i in 0..n {
                let acc: f64 = done.iter().enumerate().map(|(j, kj)| A[s][j] * kj[i]).sum();
                stage[i] = x[i] + h * acc;
            }
            call(&mut f, t + C[s] * h, &stage, &mut rest[0], &mut stats)?;
        }
        x_new.copy_from_slice(&stage);
        // stage 6 is the fifth-order solution (FSAL)
        let mut sum = 0.0;
        for i in 0..n {
            let mut e = 0.0;
            for (j, kj) in k.iter().enumerate() {
                e += E[j] * kj[i];
            }
            let sc = tol.atol + tol.rtol * x[i].abs().max(x_new[i].abs());
            let r = h * e / sc;
            sum += r * r;
        }
        let err = if n == 0 { 0.0 } else { (sum / n as f64).sqrt() };
        if !err.is_finite() {
            stats.rejected += 1;
            rejected_last = true;
            h *= FAC_MIN;
            if h.abs() < min_step {
                return Err(SolveError::StepUnderflow {
                    t,
                    h: h.abs(),
                    min: min_step,
                });
            }
            continue;
        }
        let fac11 = err.powf(0.2 - PI_BETA * 0.75);
        if err <= 1.0 {
            let fac = (fac11 / err_old.powf(PI_BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if rejected_last {
                h_new = if dir > 0.0 { h_new.min(h) } else { h_new.max(h) };
            }
            err_old = err.max(1e-4);
            stats.accepted += 1;
            rejected_last = false;
            t = if last { t_to } else { t + h };
            x.copy_from_slice(&x_new);
            k.swap(0, 6);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SolveError::NonFinite { t });
            }
            h = h_new;
        } else {
            stats.rejected += 1;
            rejected_last = true;
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
        if h.abs() < min_step && (t_to - t) * dir > 0.0 {
            return Err(SolveError::StepUnderflow {
                t,
                h: h.abs(),
                min: min_step,
            });
        }
    }
    Ok(stats)
}

/// Classical fourth-order Runge–Kutta with `steps` uniform steps.
pub fn rk4<F>(mut f: F, x: &mut [f64], t_from: f64, t_to: f64, steps: usize) -> Result<SolverStats, SolveError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), DynError>,
{
    if steps == 0 {
        return Err(SolveError::Config("rk4 needs at least one step".into()));
    }
    let mut stats = SolverStats::default();
    let n = x.len();
    let h = (t_to - t_from) / steps as f64;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    for s in 0..steps {
        let t = t_from + s as f64 * h;
        call(&mut f, t, x, &mut k1, &mut stats)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        call(&mut f, t + 0.5 * h, &tmp, &mut k2, &mut stats)?;
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        call(&mut f, t + 0.5 * h, &tmp, &mut k3, &mut stats)?;
        for i in 0..n {
            tmp[i] = x[i] + h * k3[i];
        }
        call(&mut f, t + h, &tmp, &mut k4, &mut stats)?;
        for i in 0..n {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite { t: t + h });
        }
        stats.accepted += 1;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn decay(_: f64, x: &[f64], dx: &mut [f64]) -> Result<(), DynError> {
        dx[0] = -x[0];
        Ok(())
    }

    fn oscillator(_: f64, x: &[f64], dx: &mut [f64]) -> Result<(), DynError> {
        dx[0] = x[1];
        dx[1] = -x[0];
        Ok(())
    }

    #[test]
    fn tableau_is_consistent() {
        for s in 0..7 {
            let row: f64 = A[s].iter().sum();
            assert!((row - C[s]).abs() < 1e-14, "row {s}");
        }
        assert!(E.iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn exponential_decay() {
        let mut x = [1.0];
        let st = dopri5(decay, &mut x, 0.0, 1.0, Tolerance { atol: 1e-8, rtol: 1e-8 }).unwrap();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-6);
        assert!(st.nfe >= 7 && st.accepted >= 1);
        let mut x = [1.0];
        dopri5(decay, &mut x, 0.0, 1.0, Tolerance::default()).unwrap();
        assert!((x[0] - (-1f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn zero_dynamics_is_exact() {
        let x0 = [0.3, -1.7, 5.0];
        let mut x = x0;
        dopri5(
            |_, _, dx: &mut [f64]| {
                dx.fill(0.0);
                Ok(())
            },
            &mut x,
            1.0,
            0.0,
            Tolerance::default(),
        )
        .unwrap();
        assert_eq!(x, x0);
        let mut x = x0;
        rk4(
            |_, _, dx: &mut [f64]| {
                dx.fill(0.0);
                Ok(())
            },
            &mut x,
            1.0,
            0.0,
            10,
        )
        .unwrap();
        assert_eq!(x, x0);
    }

    #[test]
    fn harmonic_period() {
        let mut x = [1.0, 0.0];
        dopri5(oscillator, &mut x, 0.0, 2.0 * PI, Tolerance { atol: 1e-7, rtol: 1e-7 }).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-4 && x[1].abs() < 1e-4, "{x:?}");
        let mut x = [1.0, 0.0];
        rk4(oscillator, &mut x, 0.0, 2.0 * PI, 200).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-4 && x[1].abs() < 1e-4);
    }

    #[test]
    fn backward_integration() {
        let mut x = [(-1f64).exp()];
        dopri5(decay, &mut x, 1.0, 0.0, Tolerance { atol: 1e-9, rtol: 1e-9 }).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn rk4_has_fourth_order() {
        let err = |n: usize| {
            let mut x = [1.0];
            rk4(decay, &mut x, 0.0, 2.0, n).unwrap();
            (x[0] - (-2f64).exp()).abs()
        };
        let slope = (err(10) / err(20)).log2();
        assert!((slope - 4.0).abs() < 0.3, "{slope}");
    }

    #[test]
    fn rk4_counts_four_evaluations_per_step() {
        let mut x = [1.0];
        let st = rk4(decay, &mut x, 0.0, 1.0, 7).unwrap();
        assert_eq!(st.nfe, 28);
        assert_eq!(st.accepted, 7);
    }

    #[test]
    fn tighter_tolerance_is_more_accurate() {
        let mut last = f64::INFINITY;
        for k in 3..9 {
            let tol = 10f64.powi(-k);
            let mut x = [1.0, 0.0];
            dopri5(oscillator, &mut x, 0.0, 10.0, Tolerance { atol: tol, rtol: tol }).unwrap();
            let e = ((x[0] - 10f64.cos()).powi(2) + (x[1] + 10f64.sin()).powi(2)).sqrt();
            assert!(e <= last, "tol {tol}: {e} > {last}");
            last = e;
        }
    }

    #[test]
    fn singular_dynamics_underflow() {
        // finite-time blow-up at t = 1
        let mut x = [1.0];
        let r = dopri5(
            |_, x: &[f64], dx: &mut [f64]| {
                dx[0] = x[0] * x[0];
                Ok(())
            },
            &mut x,
            0.0,
            2.0,
            Tolerance::default(),
        );
        assert!(
            matches!(
                r,
                Err(SolveError::StepUnderflow { .. }) | Err(SolveError::NonFinite { .. })
            ),
            "{r:?}"
        );
    }

    #[test]
    fn dynamics_errors_propagate() {
        let mut x = [1.0];
        let r = rk4(|_, _, _| Err("boom".into()), &mut x, 0.0, 1.0, 3);
        assert!(matches!(r, Err(SolveError::Dynamics { .. })));
        assert!(dopri5(decay, &mut x, 0.0, 1.0, Tolerance { atol: 0.0, rtol: 1e-3 }).is_err());
        assert!(rk4(decay, &mut x, 0.0, 1.0, 0).is_err());
    }
}
