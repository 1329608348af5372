//! Explicit Runge-Kutta integration of autonomous vector fields on a fixed
//! output schedule.
//!
//! Two methods are provided: classical fixed-step RK4 and Dormand-Prince
//! 4(5) with PI step-size control. The adaptive method lands exactly on every
//! requested output time, so results are aligned with the measurement grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Rk4Fixed,
    Dopri45Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Initial step for the adaptive method, fixed step for RK4.
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Dopri45Adaptive,
            rtol: 1e-6,
            atol: 1e-8,
            initial_step: 1e-2,
            max_steps: 100_000,
        }
    }
}

impl IntegratorConfig {
    pub fn dopri(rtol: f64, atol: f64) -> Self {
        Self { rtol, atol, ..Self::default() }
    }

    pub fn rk4(step: f64) -> Self {
        Self { method: Method::Rk4Fixed, initial_step: step, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0 && self.initial_step > 0.0) {
            return Err(Error::Config(format!(
                "integrator tolerances and step must be positive: {self:?}"
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("integrator max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// States at the requested times. `x0` is the state at `t = 0` (or at the
/// start time passed to [`integrate_from`]) and is not part of `states`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub x0: Vec<f64>,
    /// N×d row-major.
    pub states: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.states[i * d..(i + 1) * d]
    }

    /// A trajectory that failed to integrate; its states are NaN.
    pub fn diverged(x0: Vec<f64>, times: Vec<f64>) -> Self {
        let states = vec![f64::NAN; times.len() * x0.len()];
        Self { times, x0, states, diverged: true }
    }
}

fn check_schedule(start: f64, times: &[f64]) -> Result<()> {
    let mut prev = start;
    for (i, &t) in times.iter().enumerate() {
        if !t.is_finite() || t < prev || (i > 0 && t == prev) {
            return Err(Error::Contract(format!(
                "output times must be finite, strictly increasing and ≥ {start}; got {times:?}"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Integrate `dx/dt = rhs(x)` from `x0` at `t = 0`, reporting the state at
/// each of `times`.
pub fn integrate<F>(rhs: F, x0: &[f64], times: &[f64], config: &IntegratorConfig) -> Result<Trajectory>
where
    F: Fn(&[f64], &mut [f64]),
{
    integrate_from(rhs, 0.0, x0, times, config)
}

/// As [`integrate`], starting at `t_start`. A requested time equal to
/// `t_start` reports `x0`.
pub fn integrate_from<F>(
    rhs: F,
    t_start: f64,
    x0: &[f64],
    times: &[f64],
    config: &IntegratorConfig,
) -> Result<Trajectory>
where
    F: Fn(&[f64], &mut [f64]),
{
    let states = run_schedule(&rhs, t_start, x0, times, config, &mut |_| true)?;
    Ok(Trajectory { times: times.to_vec(), x0: x0.to_vec(), states, diverged: false })
}

fn run_schedule<F>(
    rhs: &F,
    t_start: f64,
    x0: &[f64],
    times: &[f64],
    config: &IntegratorConfig,
    keep: Observer<'_>,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    config.validate()?;
    check_schedule(t_start, times)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite initial state {x0:?}")));
    }
    match config.method {
        Method::Rk4Fixed => rk4_schedule(rhs, t_start, x0, times, config, keep),
        Method::Dopri45Adaptive => dopri_schedule(rhs, t_start, x0, times, config, keep),
    }
}

/// True when every state reported on `times` (from `t = 0`) satisfies
/// `inside`. Integration stops at the first state that does not; failed
/// integration counts as not inside.
pub fn stays_within<F, P>(rhs: F, x0: &[f64], times: &[f64], config: &IntegratorConfig, inside: P) -> Result<bool>
where
    F: Fn(&[f64], &mut [f64]),
    P: Fn(&[f64]) -> bool,
{
    let mut ok = true;
    let mut keep = |x: &[f64]| {
        ok = inside(x);
        ok
    };
    match run_schedule(&rhs, 0.0, x0, times, config, &mut keep) {
        Ok(_) => Ok(ok),
        Err(Error::Diverged { .. }) | Err(Error::StepBudget { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Integration that reports divergence and step-budget exhaustion as a flag
/// rather than an error.
pub fn integrate_flagged<F>(rhs: F, x0: &[f64], times: &[f64], config: &IntegratorConfig) -> Result<Trajectory>
where
    F: Fn(&[f64], &mut [f64]),
{
    match integrate(rhs, x0, times, config) {
        Ok(t) => Ok(t),
        Err(Error::Diverged { .. }) | Err(Error::StepBudget { .. }) => {
            Ok(Trajectory::diverged(x0.to_vec(), times.to_vec()))
        }
        Err(e) => Err(e),
    }
}

fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Number of equal RK4 substeps covering an interval of length `span` with
/// steps no longer than `max_step`.
pub fn substeps(span: f64, max_step: f64) -> usize {
    ((span / max_step) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

pub(crate) fn rk4_step<F>(rhs: &F, x: &[f64], h: f64, ws: &mut Rk4Workspace) -> Vec<f64>
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = x.len();
    let Rk4Workspace { k1, k2, k3, k4, tmp } = ws;
    rhs(x, k1);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    rhs(tmp, k2);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    rhs(tmp, k3);
    for i in 0..d {
        tmp[i] = x[i] + h * k3[i];
    }
    rhs(tmp, k4);
    (0..d)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

pub(crate) struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub(crate) fn new(d: usize) -> Self {
        Self { k1: vec![0.0; d], k2: vec![0.0; d], k3: vec![0.0; d], k4: vec![0.0; d], tmp: vec![0.0; d] }
    }
}

type Observer<'a> = &'a mut dyn FnMut(&[f64]) -> bool;

fn rk4_schedule<F>(
    rhs: &F,
    t_start: f64,
    x0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
    keep: Observer<'_>,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = x0.len();
    let mut ws = Rk4Workspace::new(d);
    let mut x = x0.to_vec();
    let mut t = t_start;
    let mut out = Vec::with_capacity(times.len() * d);
    let mut steps = 0usize;
    for &target in times {
        let span = target - t;
        if span > 0.0 {
            let n = substeps(span, cfg.initial_step);
            let h = span / n as f64;
            for _ in 0..n {
                steps += 1;
                if steps > cfg.max_steps {
                    return Err(Error::StepBudget { max_steps: cfg.max_steps, t });
                }
                x = rk4_step(rhs, &x, h, &mut ws);
                t += h;
                if !all_finite(&x) {
                    return Err(Error::Diverged { t });
                }
            }
        }
        t = target;
        out.extend_from_slice(&x);
        if !keep(&x) {
            break;
        }
    }
    Ok(out)
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Error coefficients b - b*.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const MIN_FACTOR: f64 = 0.2;
const MAX_FACTOR: f64 = 10.0;
// PI controller exponents for an order-5 error estimate.
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;

fn dopri_schedule<F>(
    rhs: &F,
    t_start: f64,
    x0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
    keep: Observer<'_>,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let d = x0.len();
    let mut out = Vec::with_capacity(times.len() * d);
    let mut x = x0.to_vec();
    let mut t = t_start;
    let mut h = cfg.initial_step;
    let mut prev_err: f64 = 1e-4;
    let mut steps = 0usize;

    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut k5 = vec![0.0; d];
    let mut k6 = vec![0.0; d];
    let mut k7 = vec![0.0; d];
    let mut tmp = vec![0.0; d];
    let mut x_new = vec![0.0; d];

    rhs(&x, &mut k1);
    if !all_finite(&k1) {
        return Err(Error::Diverged { t });
    }
    for &target in times {
        while t < target {
            steps += 1;
            if steps > cfg.max_steps {
                return Err(Error::StepBudget { max_steps: cfg.max_steps, t });
            }
            let remaining = target - t;
            // Stretch the last step up to 1% instead of leaving a sliver.
            let last = h >= remaining * 0.99;
            let step = if last { remaining } else { h };

            for i in 0..d {
                tmp[i] = x[i] + step * A21 * k1[i];
            }
            rhs(&tmp, &mut k2);
            for i in 0..d {
                tmp[i] = x[i] + step * (A31 * k1[i] + A32 * k2[i]);
            }
            rhs(&tmp, &mut k3);
            for i in 0..d {
                tmp[i] = x[i] + step * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
            }
            rhs(&tmp, &mut k4);
            for i in 0..d {
                tmp[i] = x[i] + step * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
            }
            rhs(&tmp, &mut k5);
            for i in 0..d {
                tmp[i] = x[i]
                    + step * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
            }
            rhs(&tmp, &mut k6);
            for i in 0..d {
                x_new[i] = x[i]
                    + step * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
            }
            rhs(&x_new, &mut k7);

            let mut err = 0.0;
            for i in 0..d {
                let e = step
                    * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
                let sc = cfg.atol + cfg.rtol * x[i].abs().max(x_new[i].abs());
                err += (e / sc) * (e / sc);
            }
            let err = (err / d as f64).sqrt();

            if !err.is_finite() {
                if !all_finite(&x_new) && step < 1e-12 {
                    return Err(Error::Diverged { t });
                }
                h = step * MIN_FACTOR;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::Diverged { t });
                }
                continue;
            }

            if err <= 1.0 {
                let factor = if err == 0.0 {
                    MAX_FACTOR
                } else {
                    (SAFETY * err.powf(-ALPHA) * prev_err.powf(BETA)).clamp(MIN_FACTOR, MAX_FACTOR)
                };
                prev_err = err.max(1e-4);
                t = if last { target } else { t + step };
                std::mem::swap(&mut x, &mut x_new);
                std::mem::swap(&mut k1, &mut k7);
                if !all_finite(&x) {
                    return Err(Error::Diverged { t });
                }
                // Keep the proposed step when the last one was shortened to hit the target.
                let proposed = step * factor;
                h = if last { proposed.max(h.min(proposed * 4.0)) } else { proposed };
            } else {
                let factor = (SAFETY * err.powf(-1.0 / 5.0)).clamp(MIN_FACTOR, 1.0);
                h = step * factor;
                if h < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepBudget { max_steps: steps, t });
                }
            }
        }
        out.extend_from_slice(&x);
        if !keep(&x) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    #[test]
    fn zero_field_conserves_state() {
        let x0 = [0.3, -1.7];
        for cfg in [IntegratorConfig::default(), IntegratorConfig::rk4(0.1)] {
            let tr = integrate(|_, o: &mut [f64]| o.fill(0.0), &x0, &[0.5, 1.0, 3.0], &cfg).unwrap();
            for i in 0..3 {
                assert_eq!(tr.state(i), &x0);
            }
        }
    }

    #[test]
    fn stays_within_stops_at_first_exit() {
        use std::cell::Cell;
        let calls = Cell::new(0usize);
        let rhs = |x: &[f64], o: &mut [f64]| {
            calls.set(calls.get() + 1);
            o[0] = x[0];
        };
        let times: Vec<f64> = (1..=100).map(|i| i as f64 * 0.1).collect();
        let cfg = IntegratorConfig::default();
        assert!(!stays_within(rhs, &[1.0], &times, &cfg, |x| x[0] <= 2.0).unwrap());
        let early = calls.replace(0);
        assert!(stays_within(rhs, &[1.0], &times, &cfg, |x| x[0] <= 1e5).unwrap());
        assert!(calls.get() > 2 * early);
        assert!(!stays_within(|x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0], &[1.0], &[2.0], &cfg, |_| true).unwrap());
    }

    #[test]
    fn dopri_exponential() {
        let tr = integrate(linear, &[1.0], &[1.0], &IntegratorConfig::dopri(1e-8, 1e-12)).unwrap();
        let rel = (tr.state(0)[0] - std::f64::consts::E).abs() / std::f64::consts::E;
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |h: f64| {
            let tr = integrate(linear, &[1.0], &[1.0], &IntegratorConfig::rk4(h)).unwrap();
            (tr.state(0)[0] - std::f64::consts::E).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn output_grid_invariance() {
        let rhs = |x: &[f64], o: &mut [f64]| {
            o[0] = x[1];
            o[1] = 0.5 * (1.0 - x[0] * x[0]) * x[1] - x[0];
        };
        let cfg = IntegratorConfig::dopri(1e-8, 1e-10);
        let coarse = integrate(rhs, &[-1.5, 2.5], &[3.0], &cfg).unwrap();
        let fine_times: Vec<f64> = (1..=30).map(|i| i as f64 * 0.1).collect();
        let fine = integrate(rhs, &[-1.5, 2.5], &fine_times, &cfg).unwrap();
        for k in 0..2 {
            let a = coarse.state(0)[k];
            let b = fine.state(29)[k];
            assert!((a - b).abs() <= 10.0 * 1e-8 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn schedule_must_increase() {
        let cfg = IntegratorConfig::default();
        assert!(integrate(linear, &[1.0], &[1.0, 1.0], &cfg).is_err());
        assert!(integrate(linear, &[1.0], &[-1.0], &cfg).is_err());
        assert!(integrate(linear, &[f64::NAN], &[1.0], &cfg).is_err());
    }

    #[test]
    fn step_budget_is_enforced() {
        let cfg = IntegratorConfig { max_steps: 3, ..IntegratorConfig::rk4(0.01) };
        let err = integrate(linear, &[1.0], &[1.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::StepBudget { .. }));
    }

    #[test]
    fn blow_up_is_flagged() {
        // x' = x², x(0) = 1 blows up at t = 1.
        let rhs = |x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0];
        let cfg = IntegratorConfig { max_steps: 10_000, ..IntegratorConfig::default() };
        let err = integrate(rhs, &[1.0], &[2.0], &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. } | Error::StepBudget { .. }), "{err}");
        let tr = integrate_flagged(rhs, &[1.0], &[0.5, 2.0], &cfg).unwrap();
        assert!(tr.diverged);
        let tr = integrate_flagged(|x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0], &[1.0], &[2.0], &IntegratorConfig::rk4(0.01)).unwrap();
        assert!(tr.diverged);
    }

    #[test]
    fn start_time_offsets_schedule() {
        let cfg = IntegratorConfig::dopri(1e-9, 1e-12);
        let a = integrate_from(linear, 0.5, &[1.0], &[0.5, 1.5], &cfg).unwrap();
        assert_eq!(a.state(0), &[1.0]);
        assert!((a.state(1)[0] - std::f64::consts::E).abs() < 1e-7);
    }
}
