//! Ground-truth dynamical systems standing in for the physical test bench.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acquisition::SafetyBounds;
use crate::error::{check_dim, Error, Result};
use crate::integrator::{integrate, stays_within, IntegratorConfig};
use crate::model::Episode;

/// Which Van der Pol damping term to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VdpForm {
    /// `μ(1 − x₁²)x₂ − x₁`.
    Classical,
    /// `μ(1 − x₁)²x₂ − x₁`.
    Squared,
}

/// Van der Pol oscillator: `(x₂, damping(x₁)·x₂ − x₁)`.
pub fn vdp_rhs(x: &[f64], mu: f64, form: VdpForm) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    let damping = match form {
        VdpForm::Classical => mu * (1.0 - x1 * x1),
        VdpForm::Squared => mu * (1.0 - x1) * (1.0 - x1),
    };
    [x2, damping * x2 - x1]
}

/// Lotka-Volterra predator-prey field `(αx₁ − βx₁x₂, −γx₂ + δx₁x₂)`.
pub fn lv_rhs(x: &[f64], alpha: f64, beta: f64, gamma: f64, delta: f64) -> [f64; 2] {
    let (x1, x2) = (x[0], x[1]);
    [alpha * x1 - beta * x1 * x2, -gamma * x2 + delta * x1 * x2]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Dynamics {
    VanDerPol { mu: f64, form: VdpForm },
    LotkaVolterra { alpha: f64, beta: f64, gamma: f64, delta: f64 },
}

impl Dynamics {
    pub fn dim(&self) -> usize {
        2
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let v = match *self {
            Dynamics::VanDerPol { mu, form } => vdp_rhs(x, mu, form),
            Dynamics::LotkaVolterra { alpha, beta, gamma, delta } => lv_rhs(x, alpha, beta, gamma, delta),
        };
        out.copy_from_slice(&v);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub dynamics: Dynamics,
    pub safety: SafetyBounds,
    pub horizon: f64,
    pub n_obs: usize,
    pub obs_noise: f64,
    /// Candidate box for initial states.
    pub domain: SafetyBounds,
    /// Start of the seed episode every experiment begins with.
    pub initial_state: Vec<f64>,
}

pub const SYSTEM_NAMES: [&str; 3] = ["vdp", "vdp-squared", "lotka-volterra"];

impl SystemSpec {
    pub fn van_der_pol(form: VdpForm) -> Self {
        let bounds = SafetyBounds { lower: vec![-4.0; 2], upper: vec![4.0; 2] };
        Self {
            name: match form {
                VdpForm::Classical => "vdp",
                VdpForm::Squared => "vdp-squared",
            }
            .into(),
            dynamics: Dynamics::VanDerPol { mu: 0.5, form },
            safety: bounds.clone(),
            horizon: 3.0,
            n_obs: 16,
            obs_noise: 0.05,
            domain: bounds,
            initial_state: vec![-1.5, 2.5],
        }
    }

    pub fn lotka_volterra() -> Self {
        Self {
            name: "lotka-volterra".into(),
            dynamics: Dynamics::LotkaVolterra { alpha: 0.5, beta: 0.05, gamma: 0.5, delta: 0.05 },
            safety: SafetyBounds { lower: vec![0.2; 2], upper: vec![25.0; 2] },
            horizon: 10.0,
            n_obs: 20,
            obs_noise: 0.1,
            domain: SafetyBounds { lower: vec![1.0; 2], upper: vec![15.0; 2] },
            initial_state: vec![8.0, 4.0],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vdp" => Ok(Self::van_der_pol(VdpForm::Classical)),
            "vdp-squared" => Ok(Self::van_der_pol(VdpForm::Squared)),
            "lotka-volterra" => Ok(Self::lotka_volterra()),
            other => Err(Error::Config(format!("unknown system '{other}'; known: {}", SYSTEM_NAMES.join(", ")))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dynamics.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 || !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("system needs n_obs ≥ 1 and a positive horizon".into()));
        }
        if !(self.obs_noise >= 0.0 && self.obs_noise.is_finite()) {
            return Err(Error::Config(format!("observation noise must be non-negative, got {}", self.obs_noise)));
        }
        let d = self.dim();
        for b in [&self.safety, &self.domain] {
            check_dim(d, b.dim())?;
            SafetyBounds::new(b.lower.clone(), b.upper.clone())?;
        }
        if !self.domain.lower.iter().chain(&self.domain.upper).all(|v| v.is_finite()) {
            return Err(Error::Config("candidate box must be finite".into()));
        }
        check_dim(d, self.initial_state.len())?;
        Ok(())
    }

    /// Measurement times `t_i = i·T/N`, `i = 1..N`.
    pub fn schedule(&self) -> Vec<f64> {
        uniform_schedule(self.horizon, self.n_obs)
    }

    fn reference(&self, x0: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let dynamics = self.dynamics;
        Ok(integrate(|x, o| dynamics.eval_into(x, o), x0, times, &reference_integrator())?.states)
    }

    /// Noiseless reference states on the measurement schedule.
    pub fn true_trajectory(&self, x0: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x0.len())?;
        self.reference(x0, &self.schedule())
    }

    /// Run one experiment from `x0` and return noisy observations.
    pub fn measure<R: Rng + ?Sized>(&self, x0: &[f64], rng: &mut R) -> Result<Episode> {
        self.measure_with_noise(x0, self.obs_noise, rng)
    }

    pub fn measure_with_noise<R: Rng + ?Sized>(&self, x0: &[f64], sigma: f64, rng: &mut R) -> Result<Episode> {
        check_dim(self.dim(), x0.len())?;
        if !self.domain.contains(x0) {
            return Err(Error::Contract(format!("initial state {x0:?} outside the candidate box")));
        }
        let states = self.true_trajectory(x0).map_err(|e| Error::MeasurementFailed { x0: x0.to_vec(), reason: e.to_string() })?;
        let obs = states.iter().map(|x| x + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        Episode::new(x0.to_vec(), self.schedule(), obs)
    }

    /// Ground-truth safety label: the noiseless trajectory stays inside the
    /// box (inclusive) on a grid ten times finer than the measurement grid.
    /// Failed integration counts as unsafe.
    pub fn is_truly_safe(&self, x0: &[f64]) -> bool {
        if !self.safety.contains(x0) {
            return false;
        }
        let dynamics = self.dynamics;
        let times = uniform_schedule(self.horizon, 10 * self.n_obs);
        stays_within(|x, o| dynamics.eval_into(x, o), x0, &times, &reference_integrator(), |x| self.safety.contains(x))
            .unwrap_or(false)
    }
}

fn reference_integrator() -> IntegratorConfig {
    IntegratorConfig { max_steps: 1_000_000, ..IntegratorConfig::dopri(1e-9, 1e-12) }
}

pub fn uniform_schedule(horizon: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 * horizon / n as f64).collect()
}
