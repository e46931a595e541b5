//! Prescribed-time adaptive backstepping in companion coordinates.
//!
//! The control law runs on the companion realization of the learned lifted
//! model, where the input enters only the last coordinate. Each row above the
//! last reads `w_i' = w_{i+1} + disturbance`, i.e. the next coordinate is
//! exactly the virtual input and there is no separate drift to cancel; the
//! drift term and the adaptive compensation appear only in the final row,
//! which the physical input reaches through `b_last`. Virtual-control
//! derivatives are total derivatives carried by jets seeded with the gain
//! schedule, the supplied reference derivatives, and the nominal model
//! `w' = A w + B u_prev`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::sysid::CompanionRealization;

/// Which regressor the adaptive term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressorSpec {
    /// The plant's known last-row regressor evaluated on the reconstructed
    /// state, `phi_n(C T_c^-1 w)`.
    PlantPhi,
    /// Identically zero; disables adaptation.
    Zero,
}

/// Controller synthesis parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "schema::ConfigJson", try_from = "schema::ConfigJson")]
pub struct ControllerConfig {
    /// Prescribed time T in seconds.
    pub prescribed_time: f64,
    /// Backstepping gains, one per companion coordinate.
    pub gains: DVector<f64>,
    /// Adaptation gain matrix, symmetric positive definite.
    pub gamma: DMatrix<f64>,
    /// Fraction of T before which the time-varying gain is frozen.
    pub guard_fraction: f64,
    pub regressor: RegressorSpec,
    pub theta_hat0: DVector<f64>,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.prescribed_time.is_finite() || self.prescribed_time <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "prescribed time must be positive, got {}",
                self.prescribed_time
            )));
        }
        if self.gains.is_empty() || self.gains.iter().any(|&c| !c.is_finite() || c <= 0.0) {
            return Err(Error::InvalidConfig(
                "all backstepping gains must be strictly positive".into(),
            ));
        }
        if !(self.guard_fraction > 0.0 && self.guard_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "guard fraction must lie in (0, 1), got {}",
                self.guard_fraction
            )));
        }
        let p = self.gamma.nrows();
        if self.gamma.ncols() != p || self.theta_hat0.len() != p {
            return Err(Error::InvalidConfig(
                "adaptation gain and initial estimate dimensions disagree".into(),
            ));
        }
        if p > 0 {
            let asym = (&self.gamma - self.gamma.transpose()).norm();
            if asym > 1e-12 * self.gamma.norm().max(1.0) {
                return Err(Error::GammaNotPositiveDefinite);
            }
            if nalgebra::Cholesky::new(self.gamma.clone()).is_none() {
                return Err(Error::GammaNotPositiveDefinite);
            }
        }
        Ok(())
    }

    /// Instant at which the gain schedule freezes.
    pub fn clamp_time(&self) -> f64 {
        self.prescribed_time * (1.0 - self.guard_fraction)
    }
}

/// Adaptive state owned by one closed-loop run.
#[derive(Clone, Debug)]
pub struct ControllerState {
    pub theta_hat: DVector<f64>,
    pub last_u: f64,
    pub clamped: bool,
}

impl ControllerState {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            theta_hat: cfg.theta_hat0.clone(),
            last_u: 0.0,
            clamped: false,
        }
    }
}

/// One evaluation of the prescribed-time gain schedule.
#[derive(Clone, Copy, Debug)]
pub struct GainSample {
    pub mu: f64,
    pub rho: f64,
    pub rho_dot: f64,
    pub clamped: bool,
}

/// Time-varying gains `mu = (T/(T-t))^2` and `rho = 2/(T-t)`, frozen at
/// their values at `T (1 - guard_fraction)` from that instant on.
pub fn pts_gain(t: f64, cfg: &ControllerConfig) -> GainSample {
    let t_star = cfg.clamp_time();
    let clamped = t > t_star;
    let rem = cfg.prescribed_time - if clamped { t_star } else { t };
    let ratio = cfg.prescribed_time / rem;
    let rho = 2.0 / rem;
    GainSample {
        mu: ratio * ratio,
        rho,
        rho_dot: if clamped { 0.0 } else { 0.5 * rho * rho },
        clamped,
    }
}

/// Intermediate quantities of one backstepping evaluation.
#[derive(Clone, Debug)]
pub struct BacksteppingWorkspace {
    /// Error coordinates e_1..e_N.
    pub e: DVector<f64>,
    /// Virtual controls alpha_1..alpha_{N-1}.
    pub alpha: DVector<f64>,
    /// Their total derivatives.
    pub alpha_dot: DVector<f64>,
    pub rho: f64,
    pub mu: f64,
    pub clamped: bool,
    /// Regressor value used by this evaluation.
    pub phi: DVector<f64>,
}

/// Evaluates the backstepping recursion and the final control input.
///
/// `w` is the companion-coordinate lifted state, `w_d`/`w_d_dot` the
/// reference and its derivative in the same coordinates (only the first
/// component enters the recursion; the rest of the chain is pinned by the
/// companion structure), and `phi` the regressor value at `w`.
#[allow(clippy::too_many_arguments)]
pub fn backstep(
    w: &DVector<f64>,
    w_d: &DVector<f64>,
    w_d_dot: &DVector<f64>,
    comp: &CompanionRealization,
    phi: &DVector<f64>,
    state: &ControllerState,
    t: f64,
    cfg: &ControllerConfig,
) -> Result<(f64, BacksteppingWorkspace)> {
    let n = comp.dim();
    for (len, name) in [(w.len(), "w"), (w_d.len(), "w_d"), (w_d_dot.len(), "w_d_dot")] {
        if len != n {
            return Err(Error::InvalidConfig(format!(
                "{name} has length {len}, companion dimension is {n}"
            )));
        }
    }
    if cfg.gains.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} gains for a chain of length {n}",
            cfg.gains.len()
        )));
    }
    if phi.len() != state.theta_hat.len() {
        return Err(Error::InvalidConfig(format!(
            "regressor length {} does not match the parameter estimate length {}",
            phi.len(),
            state.theta_hat.len()
        )));
    }
    if comp.b_last == 0.0 || !comp.b_last.is_finite() {
        return Err(Error::InvalidConfig(
            "companion input gain b_last must be nonzero".into(),
        ));
    }

    let gain = pts_gain(t, cfg);
    let len = n + 2; // jet coefficients: value + n+1 derivatives

    // seeds: gain schedule, nominal state derivatives, reference
    let rho_jet = if gain.clamped {
        Jet::constant(gain.rho, len)
    } else {
        let rem = cfg.prescribed_time - t;
        let mut c = vec![0.0; len];
        c[0] = 2.0 / rem;
        for k in 1..len {
            c[k] = c[k - 1] * k as f64 / rem;
        }
        Jet::from_derivs(c)
    };

    // v_k holds the k-th nominal derivative of w
    let mut derivs: Vec<DVector<f64>> = Vec::with_capacity(len - 1);
    let mut v = &comp.a_bar * w;
    v[n - 1] += comp.b_last * state.last_u;
    derivs.push(v);
    for _ in 1..len - 1 {
        let next = &comp.a_bar * derivs.last().unwrap();
        derivs.push(next);
    }
    let w_jet = |i: usize| -> Jet {
        let mut c = vec![0.0; len];
        c[0] = w[i];
        for (k, d) in derivs.iter().enumerate() {
            c[k + 1] = d[i];
        }
        Jet::from_derivs(c)
    };

    let mut ref_coeffs = vec![0.0; len];
    ref_coeffs[0] = w_d[0];
    ref_coeffs[1] = w_d_dot[0];
    let mut alpha_prev = Jet::from_derivs(ref_coeffs); // alpha_0: the reference

    let mut e_prev: Option<Jet> = None;
    let mut e_values = DVector::zeros(n);
    let mut alphas = DVector::zeros(n.saturating_sub(1));
    let mut alpha_dots = DVector::zeros(n.saturating_sub(1));

    for i in 1..=n {
        let e_i = w_jet(i - 1).sub(&alpha_prev);
        if !e_i.is_finite() {
            return Err(Error::NonFinite {
                context: "backstepping error coordinate",
                step: i,
            });
        }
        e_values[i - 1] = e_i.value();

        if i == n {
            let drift = comp.a_bar.row(n - 1).transpose().dot(w);
            let e_n_minus_1 = e_prev.as_ref().map_or(0.0, Jet::value);
            let u = (-cfg.gains[n - 1] * gain.rho * e_i.value() - e_n_minus_1 - drift
                + alpha_prev.d1()
                - state.theta_hat.dot(phi))
                / comp.b_last;
            if !u.is_finite() {
                return Err(Error::NonFinite {
                    context: "control input",
                    step: i,
                });
            }
            let ws = BacksteppingWorkspace {
                e: e_values,
                alpha: alphas,
                alpha_dot: alpha_dots,
                rho: gain.rho,
                mu: gain.mu,
                clamped: gain.clamped,
                phi: phi.clone(),
            };
            return Ok((u, ws));
        }

        let mut a_i = rho_jet.mul(&e_i).scale(-cfg.gains[i - 1]);
        a_i = a_i.add(&alpha_prev.shift());
        if let Some(prev) = &e_prev {
            a_i = a_i.sub(prev);
        }
        if !a_i.is_finite() {
            return Err(Error::NonFinite {
                context: "virtual control",
                step: i,
            });
        }
        alphas[i - 1] = a_i.value();
        alpha_dots[i - 1] = a_i.d1();

        e_prev = Some(e_i);
        alpha_prev = a_i;
    }
    unreachable!("chain dimension is at least one");
}

/// Explicit Euler update of the parameter estimate at the plant step,
/// `theta_hat += dt * Gamma * phi * e_N`.
pub fn adapt_step(
    state: &ControllerState,
    ws: &BacksteppingWorkspace,
    cfg: &ControllerConfig,
    dt: f64,
) -> ControllerState {
    assert!(dt > 0.0, "adaptation step needs dt > 0");
    let e_n = ws.e[ws.e.len() - 1];
    let theta_hat = &state.theta_hat + (&cfg.gamma * &ws.phi) * (e_n * dt);
    ControllerState {
        theta_hat,
        last_u: state.last_u,
        clamped: state.clamped,
    }
}

mod schema {
    use super::*;

    #[derive(Serialize, Deserialize)]
    pub struct ConfigJson {
        #[serde(rename = "T")]
        t: f64,
        c: Vec<f64>,
        #[serde(rename = "Gamma")]
        gamma: Vec<Vec<f64>>,
        guard_fraction: f64,
        theta_hat0: Vec<f64>,
        regressor: RegressorSpec,
    }

    impl From<ControllerConfig> for ConfigJson {
        fn from(cfg: ControllerConfig) -> Self {
            Self {
                t: cfg.prescribed_time,
                c: cfg.gains.iter().copied().collect(),
                gamma: (0..cfg.gamma.nrows())
                    .map(|i| (0..cfg.gamma.ncols()).map(|j| cfg.gamma[(i, j)]).collect())
                    .collect(),
                guard_fraction: cfg.guard_fraction,
                theta_hat0: cfg.theta_hat0.iter().copied().collect(),
                regressor: cfg.regressor,
            }
        }
    }

    impl TryFrom<ConfigJson> for ControllerConfig {
        type Error = String;
        fn try_from(j: ConfigJson) -> std::result::Result<Self, String> {
            let p = j.theta_hat0.len();
            let rows = j.gamma.len();
            if rows != p || j.gamma.iter().any(|r| r.len() != p) {
                return Err("Gamma must be a p x p matrix matching theta_hat0".into());
            }
            let cfg = ControllerConfig {
                prescribed_time: j.t,
                gains: DVector::from_vec(j.c),
                gamma: DMatrix::from_fn(p, p, |i, k| j.gamma[i][k]),
                guard_fraction: j.guard_fraction,
                regressor: j.regressor,
                theta_hat0: DVector::from_vec(j.theta_hat0),
            };
            cfg.validate().map_err(|e| e.to_string())?;
            Ok(cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config(t: f64, gains: Vec<f64>) -> ControllerConfig {
        ControllerConfig {
            prescribed_time: t,
            gains: DVector::from_vec(gains),
            gamma: DMatrix::identity(1, 1),
            guard_fraction: 0.01,
            regressor: RegressorSpec::Zero,
            theta_hat0: DVector::zeros(1),
        }
    }

    fn companion(a_bar: DMatrix<f64>, b_last: f64) -> CompanionRealization {
        let n = a_bar.nrows();
        CompanionRealization {
            t_c: DMatrix::identity(n, n),
            t_c_inv: DMatrix::identity(n, n),
            a_bar,
            b_last,
        }
    }

    #[test]
    fn gain_schedule_hand_values() {
        let cfg = config(5.0, vec![1.0]);
        let g = pts_gain(0.0, &cfg);
        assert_eq!(g.mu, 1.0);
        assert_eq!(g.rho, 0.4);
        assert!(!g.clamped);

        let g = pts_gain(2.5, &cfg);
        assert_eq!(g.mu, 4.0);
        assert_eq!(g.rho, 0.8);

        let g = pts_gain(5.0, &cfg);
        assert!(g.clamped);
        assert_relative_eq!(g.mu, 10_000.0, max_relative = 1e-12);
        assert_relative_eq!(g.rho, 40.0, max_relative = 1e-12);
        assert_eq!(g.rho_dot, 0.0);
    }

    #[test]
    fn clamp_engages_exactly_past_the_guard_instant() {
        let cfg = config(5.0, vec![1.0]);
        let t_star = cfg.clamp_time();
        assert!(!pts_gain(t_star, &cfg).clamped);
        assert!(pts_gain(t_star.next_up(), &cfg).clamped);
        // frozen values are continuous across the boundary
        let before = pts_gain(t_star, &cfg);
        let after = pts_gain(t_star.next_up(), &cfg);
        assert_relative_eq!(before.rho, after.rho, max_relative = 1e-12);
        assert_relative_eq!(before.mu, after.mu, max_relative = 1e-12);
    }

    #[test]
    fn mu_increases_and_rho_identity_holds_before_the_clamp() {
        let cfg = config(5.0, vec![1.0]);
        let t_star = cfg.clamp_time();
        let mut prev = 0.0;
        for k in 0..=1000 {
            let t = t_star * k as f64 / 1000.0;
            let g = pts_gain(t, &cfg);
            assert!(g.mu > prev, "mu not strictly increasing at t = {t}");
            prev = g.mu;
            assert!((g.rho * (cfg.prescribed_time - t) - 2.0).abs() <= 8.0 * f64::EPSILON);
        }
    }

    #[test]
    fn single_stage_chain_collapses_to_the_direct_law() {
        let comp = companion(DMatrix::zeros(1, 1), 2.0);
        let cfg = ControllerConfig {
            gains: DVector::from_element(1, 2.0),
            ..config(5.0, vec![2.0])
        };
        let state = ControllerState {
            theta_hat: DVector::from_element(1, 0.4),
            last_u: 0.0,
            clamped: false,
        };
        let w = DVector::from_element(1, 3.0);
        let zero = DVector::zeros(1);
        let phi = DVector::from_element(1, 1.5);
        let (u, ws) = backstep(&w, &zero, &zero, &comp, &phi, &state, 0.0, &cfg).unwrap();
        // (1/b)(-c rho w - theta phi) = (-2*0.4*3 - 0.6) / 2
        assert_relative_eq!(u, -1.5, max_relative = 1e-15);
        assert_eq!(ws.e[0], 3.0);
        assert!(ws.alpha.is_empty());
    }

    #[test]
    fn two_stage_chain_matches_the_hand_expansion() {
        // T = 4, t = 2: rho = 1 and rho_dot = 1/2 exactly
        let a_bar = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0]);
        let comp = companion(a_bar, 2.0);
        let cfg = config(4.0, vec![2.0, 3.0]);
        let state = ControllerState::new(&cfg);
        let w = DVector::from_vec(vec![1.0, -1.0]);
        let zero = DVector::zeros(2);
        let phi = DVector::zeros(1);
        let (u, ws) = backstep(&w, &zero, &zero, &comp, &phi, &state, 2.0, &cfg).unwrap();

        // alpha_1 = -c1 rho w1 = -2, e2 = w2 - alpha_1 = 1,
        // alpha_1' = -c1 (rho' e1 + rho e1') with e1' = w2: -2(0.5 - 1) = 1,
        // u = (-c2 rho e2 - e1 - (a w)_2 + alpha_1')/b = (-3 - 1 - 1 + 1)/2
        assert_eq!(ws.alpha[0], -2.0);
        assert_eq!(ws.e[1], 1.0);
        assert_eq!(ws.alpha_dot[0], 1.0);
        assert_eq!(u, -2.0);
    }

    #[test]
    fn error_coordinates_reconstruct_the_state() {
        let a_bar = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                -0.5, 0.3, -0.2, -1.0,
            ],
        );
        let comp = companion(a_bar, 1.3);
        let cfg = config(5.0, vec![1.0, 2.0, 1.5, 2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..25 {
            let w = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let mut w_d = DVector::zeros(4);
            w_d[0] = rng.random_range(-1.0..1.0);
            let mut w_d_dot = DVector::zeros(4);
            w_d_dot[0] = rng.random_range(-1.0..1.0);
            let state = ControllerState {
                theta_hat: DVector::from_element(1, rng.random_range(-1.0..1.0)),
                last_u: rng.random_range(-1.0..1.0),
                clamped: false,
            };
            let phi = DVector::from_element(1, rng.random_range(-1.0..1.0));
            let t = rng.random_range(0.0..4.0);
            let (_, ws) = backstep(&w, &w_d, &w_d_dot, &comp, &phi, &state, t, &cfg).unwrap();

            // w_1 = e_1 + w_d1, w_i = e_i + alpha_{i-1}
            assert_relative_eq!(ws.e[0] + w_d[0], w[0], max_relative = 1e-12, epsilon = 1e-12);
            for i in 1..4 {
                assert_relative_eq!(
                    ws.e[i] + ws.alpha[i - 1],
                    w[i],
                    max_relative = 1e-12,
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn control_at_the_consistent_origin_ignores_the_gains() {
        let a_bar = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.4, -0.7]);
        let comp = companion(a_bar, 1.0);
        let state = ControllerState::new(&config(5.0, vec![1.0, 1.0]));
        let w = DVector::zeros(2);
        let zero = DVector::zeros(2);
        let phi = DVector::zeros(1);
        let (u1, ws) = backstep(
            &w, &zero, &zero, &comp, &phi, &state, 1.0,
            &config(5.0, vec![1.0, 1.0]),
        )
        .unwrap();
        let (u2, _) = backstep(
            &w, &zero, &zero, &comp, &phi, &state, 1.0,
            &config(5.0, vec![2.0, 2.0]),
        )
        .unwrap();
        assert_eq!(ws.e.amax(), 0.0);
        assert_eq!(u1, u2);
    }

    #[test]
    fn adaptation_follows_the_sign_of_phi_times_error() {
        let cfg = config(5.0, vec![1.0]);
        let make_ws = |e_n: f64, phi: f64| BacksteppingWorkspace {
            e: DVector::from_element(1, e_n),
            alpha: DVector::zeros(0),
            alpha_dot: DVector::zeros(0),
            rho: 1.0,
            mu: 1.0,
            clamped: false,
            phi: DVector::from_element(1, phi),
        };
        let state = ControllerState::new(&cfg);

        // e_N = 0 leaves the estimate untouched
        let next = adapt_step(&state, &make_ws(0.0, 3.0), &cfg, 0.01);
        assert_eq!(next.theta_hat[0], 0.0);

        // Gamma = I, phi = 1, e_N = 2, dt = 1e-3 -> increment 2e-3
        let next = adapt_step(&state, &make_ws(2.0, 1.0), &cfg, 1e-3);
        assert_relative_eq!(next.theta_hat[0], 2e-3);

        for (e_n, phi) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
            let next = adapt_step(&state, &make_ws(e_n, phi), &cfg, 0.01);
            let inc = next.theta_hat[0];
            assert_eq!(inc.signum(), (phi * e_n).signum());
        }
    }

    #[test]
    fn config_validation_and_schema() {
        let mut cfg = config(5.0, vec![1.0, 2.0]);
        cfg.validate().unwrap();

        let text = serde_json::to_string(&cfg).unwrap();
        for key in ["\"T\"", "\"c\"", "\"Gamma\"", "\"guard_fraction\"", "\"regressor\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        assert!(text.contains("\"zero\""));
        let back: ControllerConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.gains, cfg.gains);

        cfg.gains[0] = -1.0;
        assert!(cfg.validate().is_err());
        cfg.gains[0] = 1.0;
        cfg.guard_fraction = 1.5;
        assert!(cfg.validate().is_err());
        cfg.guard_fraction = 0.01;
        cfg.gamma = DMatrix::from_row_slice(1, 1, &[-2.0]);
        assert!(matches!(
            cfg.validate(),
            Err(Error::GammaNotPositiveDefinite)
        ));
    }
}
