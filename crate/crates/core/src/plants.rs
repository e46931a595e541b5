//! Reference plants, excitation signals, and disturbances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Van der Pol oscillator with an additive sinusoidal disturbance on the
/// velocity equation: `d(t) = amplitude * sin(pi t)`.
pub fn vdp_dynamics(
    x: &DVector<f64>,
    u: f64,
    t: f64,
    eps: f64,
    disturbance_amplitude: f64,
) -> DVector<f64> {
    let d = disturbance_amplitude * (std::f64::consts::PI * t).sin();
    DVector::from_vec(vec![
        x[1],
        eps * (1.0 - x[0] * x[0]) * x[1] - x[0] + u + d,
    ])
}

pub type StateFn = Box<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type RegressorColumn = Box<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type TimeFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// Parametric strict-feedback system: known nonlinearities `f_i`, known
/// regressors `phi_i`, unknown constant parameters `theta`, and a bounded
/// disturbance on the last equation.
pub struct StrictFeedbackForm {
    pub f: Vec<StateFn>,
    pub phi: Vec<RegressorColumn>,
    pub theta: DVector<f64>,
    pub disturbance: TimeFn,
}

/// Evaluates the strict-feedback dynamics:
/// `x_i' = x_{i+1} + f_i + theta' phi_i` for i < n and
/// `x_n' = u + f_n + theta' phi_n + d(t)`.
pub fn strict_feedback_dynamics(
    form: &StrictFeedbackForm,
    x: &DVector<f64>,
    u: f64,
    t: f64,
) -> Result<DVector<f64>> {
    let n = x.len();
    if form.f.len() != n || form.phi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: form.f.len().min(form.phi.len()),
        });
    }
    let p = form.theta.len();
    let mut dx = DVector::zeros(n);
    for i in 0..n {
        let phi_i = (form.phi[i])(x);
        if phi_i.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: phi_i.len(),
            });
        }
        let base = (form.f[i])(x) + form.theta.dot(&phi_i);
        dx[i] = if i + 1 < n {
            x[i + 1] + base
        } else {
            u + base + (form.disturbance)(t)
        };
    }
    Ok(dx)
}

enum PlantKind {
    VanDerPol {
        eps: f64,
        disturbance_amplitude: f64,
    },
    StrictFeedback(StrictFeedbackForm),
    LinearLifted {
        a: DMatrix<f64>,
        b: DVector<f64>,
    },
}

/// A simulated plant: dynamics, true parameters (for diagnostics only), and
/// the declared disturbance bound.
pub struct Plant {
    pub n: usize,
    pub theta_true: DVector<f64>,
    pub d_max: f64,
    kind: PlantKind,
}

impl Plant {
    pub fn van_der_pol(eps: f64, disturbance_amplitude: f64) -> Self {
        Self {
            n: 2,
            theta_true: DVector::from_element(1, eps),
            d_max: disturbance_amplitude.abs(),
            kind: PlantKind::VanDerPol {
                eps,
                disturbance_amplitude,
            },
        }
    }

    /// The Van der Pol oscillator written in strict-feedback form:
    /// `f_2 = -x_1`, `phi_2 = (1 - x_1^2) x_2`, `theta = eps`.
    pub fn vdp_strict_feedback(eps: f64, disturbance_amplitude: f64) -> Self {
        let form = StrictFeedbackForm {
            f: vec![Box::new(|_| 0.0), Box::new(|x: &DVector<f64>| -x[0])],
            phi: vec![
                Box::new(|_| DVector::zeros(1)),
                Box::new(|x: &DVector<f64>| {
                    DVector::from_element(1, (1.0 - x[0] * x[0]) * x[1])
                }),
            ],
            theta: DVector::from_element(1, eps),
            disturbance: Box::new(move |t| {
                disturbance_amplitude * (std::f64::consts::PI * t).sin()
            }),
        };
        Self::strict_feedback(form, disturbance_amplitude.abs())
    }

    pub fn strict_feedback(form: StrictFeedbackForm, d_max: f64) -> Self {
        Self {
            n: form.f.len(),
            theta_true: form.theta.clone(),
            d_max,
            kind: PlantKind::StrictFeedback(form),
        }
    }

    /// A linear plant whose state already lives in the lifted space; used to
    /// exercise the controller with the model error identically zero.
    pub fn linear_lifted(a: DMatrix<f64>, b: DVector<f64>, theta_true: DVector<f64>) -> Self {
        Self {
            n: a.nrows(),
            theta_true,
            d_max: 0.0,
            kind: PlantKind::LinearLifted { a, b },
        }
    }

    pub fn dynamics(&self, x: &DVector<f64>, u: f64, t: f64) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        match &self.kind {
            PlantKind::VanDerPol {
                eps,
                disturbance_amplitude,
            } => Ok(vdp_dynamics(x, u, t, *eps, *disturbance_amplitude)),
            PlantKind::StrictFeedback(form) => strict_feedback_dynamics(form, x, u, t),
            PlantKind::LinearLifted { a, b } => Ok(a * x + b * u),
        }
    }

    /// Known regressor of the last strict-feedback equation, evaluated on the
    /// plant state; the controller uses it through the output map.
    pub fn phi_n(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            PlantKind::VanDerPol { .. } => {
                DVector::from_element(1, (1.0 - x[0] * x[0]) * x[1])
            }
            PlantKind::StrictFeedback(form) => (form.phi[self.n - 1])(x),
            PlantKind::LinearLifted { .. } => DVector::zeros(self.theta_true.len()),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.theta_true.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationKind {
    Prbs,
    Sine,
    Chirp,
}

/// Deterministic excitation signal for data collection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExcitationSignal {
    pub kind: ExcitationKind,
    pub amplitude: f64,
    /// PRBS bit duration, or the sine period, in seconds.
    pub period: f64,
    pub seed: u64,
}

impl ExcitationSignal {
    pub fn prbs_default(seed: u64) -> Self {
        Self {
            kind: ExcitationKind::Prbs,
            amplitude: 2.0,
            period: 0.1,
            seed,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.kind {
            ExcitationKind::Prbs => prbs(t, self),
            ExcitationKind::Sine => {
                self.amplitude * (2.0 * std::f64::consts::PI * t / self.period).sin()
            }
            ExcitationKind::Chirp => {
                // frequency ramps linearly, reaching 1/period at t = 100 period
                let rate = 1.0 / (100.0 * self.period * self.period);
                self.amplitude * (std::f64::consts::PI * rate * t * t).sin()
            }
        }
    }
}

/// Two-level pseudo-random binary sequence from a 16-bit maximal-length
/// Galois LFSR, held constant over each bit duration.
pub fn prbs(t: f64, sig: &ExcitationSignal) -> f64 {
    debug_assert!(t >= 0.0, "PRBS is defined for t >= 0");
    let bit_index = (t.max(0.0) / sig.period).floor() as u64;
    let mut state: u16 = (sig.seed & 0xFFFF) as u16;
    if state == 0 {
        state = 0xACE1;
    }
    for _ in 0..=bit_index {
        let lsb = state & 1;
        state >>= 1;
        if lsb == 1 {
            state ^= 0xB400;
        }
    }
    if state & 1 == 1 {
        sig.amplitude
    } else {
        -sig.amplitude
    }
}
