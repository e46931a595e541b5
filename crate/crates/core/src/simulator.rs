//! Fixed-step integration, open-loop data collection, and the closed-loop
//! prescribed-time run.

use std::io::{self, Write};

use nalgebra::DVector;

use crate::analysis;
use crate::controller::{adapt_step, backstep, ControllerConfig, ControllerState, RegressorSpec};
use crate::error::{Error, Result};
use crate::plants::{ExcitationSignal, Plant};
use crate::sysid::{CompanionRealization, KoopmanModel, SnapshotDataset, SplitTag};

/// Divergence guard for simulations; crossing it aborts the run cleanly.
pub const DEFAULT_ESCAPE_RADIUS: f64 = 50.0;

fn rk4_step<F>(f: &F, t: f64, x: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, x);
    let k2 = f(t + 0.5 * h, &(x + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(x + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Grid layout for a span: full steps of `dt` plus an optional shorter final
/// step landing exactly on the end point.
fn grid(t0: f64, t_end: f64, dt: f64) -> (usize, Option<f64>) {
    let span = t_end - t0;
    let n_full = (span / dt + 1e-9).floor() as usize;
    let rem = span - n_full as f64 * dt;
    if rem > 1e-9 * dt {
        (n_full, Some(rem))
    } else {
        (n_full, None)
    }
}

/// Classical fourth-order Runge-Kutta with a fixed step; the final partial
/// step is shortened to land exactly on `t_end`.
pub fn integrate_rk4<F>(
    f: F,
    x0: &DVector<f64>,
    t0: f64,
    t_end: f64,
    dt: f64,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    if !dt.is_finite() || dt <= 0.0 || t_end <= t0 {
        return Err(Error::InvalidConfig(format!(
            "integration needs dt > 0 and t_end > t0, got dt = {dt}, span = {}",
            t_end - t0
        )));
    }
    let (n_full, partial) = grid(t0, t_end, dt);
    let mut times = Vec::with_capacity(n_full + 2);
    let mut states = Vec::with_capacity(n_full + 2);
    times.push(t0);
    states.push(x0.clone());
    for k in 0..n_full {
        let t = t0 + k as f64 * dt;
        let next = rk4_step(&f, t, states.last().unwrap(), dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "integration state",
                step: k + 1,
            });
        }
        times.push(t0 + (k + 1) as f64 * dt);
        states.push(next);
    }
    if let Some(h) = partial {
        let t = t0 + n_full as f64 * dt;
        let next = rk4_step(&f, t, states.last().unwrap(), h);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "integration state",
                step: n_full + 1,
            });
        }
        times.push(t_end);
        states.push(next);
    }
    Ok((times, states))
}

/// Integrates the plant under the excitation signal, sampling states and the
/// zero-order-held input at every `dt`. A trailing remainder of the horizon
/// shorter than `dt` is dropped so the record keeps a uniform step.
pub fn collect_data(
    plant: &Plant,
    sig: &ExcitationSignal,
    horizon: f64,
    dt: f64,
    x0: &DVector<f64>,
    escape_radius: f64,
) -> Result<SnapshotDataset> {
    if !dt.is_finite() || dt <= 0.0 || horizon / dt < 2.0 {
        return Err(Error::InvalidConfig(format!(
            "data collection needs horizon/dt >= 2, got {}",
            horizon / dt
        )));
    }
    // validates dimensions before the hot loop
    plant.dynamics(x0, 0.0, 0.0)?;

    let (n_steps, _) = grid(0.0, horizon, dt);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut inputs = Vec::with_capacity(n_steps);
    states.push(x0.clone());
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let u = sig.eval(t);
        let f = |tt: f64, xx: &DVector<f64>| {
            plant
                .dynamics(xx, u, tt)
                .expect("plant dimensions validated above")
        };
        let next = rk4_step(&f, t, states.last().unwrap(), dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "data collection",
                step: k + 1,
            });
        }
        let norm = next.norm();
        if norm > escape_radius {
            return Err(Error::Escape {
                norm,
                radius: escape_radius,
                t: t + dt,
            });
        }
        states.push(next);
        inputs.push(u);
    }
    SnapshotDataset::new(states, inputs, dt, SplitTag::Train)
}

/// Closed-loop time series with per-step diagnostics.
#[derive(Clone, Debug)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    pub e: Vec<DVector<f64>>,
    pub u: Vec<f64>,
    pub theta_hat: Vec<DVector<f64>>,
    pub v: Vec<f64>,
    /// Regressor values along the run, for the certification checks.
    pub phi: Vec<DVector<f64>>,
    /// First instant at which the gain schedule was frozen.
    pub clamped_from: Option<f64>,
}

impl TrajectoryRecord {
    fn with_capacity(cap: usize) -> Self {
        Self {
            times: Vec::with_capacity(cap),
            x: Vec::with_capacity(cap),
            z: Vec::with_capacity(cap),
            e: Vec::with_capacity(cap),
            u: Vec::with_capacity(cap),
            theta_hat: Vec::with_capacity(cap),
            v: Vec::with_capacity(cap),
            phi: Vec::with_capacity(cap),
            clamped_from: None,
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() >= 2 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn max_abs_u(&self) -> f64 {
        self.u.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_x_norm(&self) -> f64 {
        self.x.iter().fold(0.0_f64, |m, v| m.max(v.norm()))
    }

    pub fn max_theta_norm(&self) -> f64 {
        self.theta_hat.iter().fold(0.0_f64, |m, v| m.max(v.norm()))
    }

    /// CSV export with the header
    /// `t,x1..xn,u,e_norm,V,theta_hat_1..p,clamped`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        let n = self.x.first().map_or(0, |x| x.len());
        let p = self.theta_hat.first().map_or(0, |th| th.len());
        write!(out, "t")?;
        for i in 1..=n {
            write!(out, ",x{i}")?;
        }
        write!(out, ",u,e_norm,V")?;
        for i in 1..=p {
            write!(out, ",theta_hat_{i}")?;
        }
        writeln!(out, ",clamped")?;
        for k in 0..self.len() {
            let clamped = self
                .clamped_from
                .is_some_and(|tc| self.times[k] >= tc);
            write!(out, "{}", self.times[k])?;
            for i in 0..n {
                write!(out, ",{}", self.x[k][i])?;
            }
            write!(out, ",{},{},{}", self.u[k], self.e[k].norm(), self.v[k])?;
            for i in 0..p {
                write!(out, ",{}", self.theta_hat[k][i])?;
            }
            writeln!(out, ",{}", u8::from(clamped))?;
        }
        Ok(())
    }
}

/// Why a closed-loop run stopped early.
#[derive(Clone, Debug)]
pub struct AbortInfo {
    pub step: usize,
    pub t: f64,
    pub reason: String,
}

/// A closed-loop run: the record up to the last completed step, plus abort
/// diagnostics when a non-finite value or an escape cut the run short.
#[derive(Debug)]
pub struct RunResult {
    pub record: TrajectoryRecord,
    pub abort: Option<AbortInfo>,
}

impl RunResult {
    pub fn is_clean(&self) -> bool {
        self.abort.is_none()
    }
}

/// Runs the two-phase loop online: lift the measured state, transform to
/// companion coordinates, evaluate the backstepping law, hold the input over
/// one integration step, and update the parameter estimate with the same
/// step. The reference is origin stabilization: `w_d = T_c psi(0)` constant,
/// with zero derivative.
pub fn run_closed_loop(
    plant: &Plant,
    model: &KoopmanModel,
    comp: &CompanionRealization,
    cfg: &ControllerConfig,
    x0: &DVector<f64>,
    t_end: f64,
    dt: f64,
) -> Result<RunResult> {
    run_closed_loop_with_escape(plant, model, comp, cfg, x0, t_end, dt, DEFAULT_ESCAPE_RADIUS)
}

#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop_with_escape(
    plant: &Plant,
    model: &KoopmanModel,
    comp: &CompanionRealization,
    cfg: &ControllerConfig,
    x0: &DVector<f64>,
    t_end: f64,
    dt: f64,
    escape_radius: f64,
) -> Result<RunResult> {
    cfg.validate()?;
    let max_dt = cfg.prescribed_time * cfg.guard_fraction / 10.0;
    if dt > max_dt {
        return Err(Error::InvalidConfig(format!(
            "dt = {dt} does not resolve the clamp region; need dt <= {max_dt}"
        )));
    }
    let n_steps = (t_end / dt).round() as usize;
    if n_steps == 0 || (n_steps as f64 * dt - t_end).abs() > 1e-9 * dt {
        return Err(Error::InvalidConfig(format!(
            "t_end = {t_end} must be a positive multiple of dt = {dt}"
        )));
    }
    if x0.len() != plant.n || model.dictionary.n != plant.n {
        return Err(Error::DimensionMismatch {
            expected: plant.n,
            got: x0.len().min(model.dictionary.n),
        });
    }
    if comp.dim() != model.lifted_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.lifted_dim(),
            got: comp.dim(),
        });
    }
    if cfg.theta_hat0.len() != plant.theta_true.len() {
        return Err(Error::InvalidConfig(format!(
            "parameter estimate length {} does not match the plant's {}",
            cfg.theta_hat0.len(),
            plant.theta_true.len()
        )));
    }

    // origin reference in companion coordinates
    let dict = &model.dictionary;
    let origin = DVector::zeros(plant.n);
    let w_d = &comp.t_c * dict.lift(&origin)?;
    let w_d_dot = DVector::zeros(comp.dim());

    // reconstruct the plant state from companion coordinates for the regressor
    let state_from_w = &model.c * &comp.t_c_inv;
    let regressor = |w: &DVector<f64>| -> DVector<f64> {
        match cfg.regressor {
            RegressorSpec::Zero => DVector::zeros(cfg.theta_hat0.len()),
            RegressorSpec::PlantPhi => plant.phi_n(&(&state_from_w * w)),
        }
    };

    let mut record = TrajectoryRecord::with_capacity(n_steps + 1);
    let mut state = ControllerState::new(cfg);
    let mut x = x0.clone();

    for k in 0..=n_steps {
        let t = k as f64 * dt;
        let z = dict.lift(&x)?;
        let w = &comp.t_c * &z;
        let phi = regressor(&w);
        let (u, ws) = match backstep(&w, &w_d, &w_d_dot, comp, &phi, &state, t, cfg) {
            Ok(pair) => pair,
            Err(err) => {
                return Ok(RunResult {
                    record,
                    abort: Some(AbortInfo {
                        step: k,
                        t,
                        reason: err.to_string(),
                    }),
                })
            }
        };
        let theta_err = &plant.theta_true - &state.theta_hat;
        let v = analysis::lyapunov_value(&ws.e, &theta_err, &cfg.gamma)
            .expect("gamma validated at entry");

        if ws.clamped && record.clamped_from.is_none() {
            record.clamped_from = Some(t);
        }
        record.times.push(t);
        record.x.push(x.clone());
        record.z.push(z);
        record.e.push(ws.e.clone());
        record.u.push(u);
        record.theta_hat.push(state.theta_hat.clone());
        record.v.push(v);
        record.phi.push(ws.phi.clone());

        if k == n_steps {
            break;
        }

        state = adapt_step(&state, &ws, cfg, dt);
        state.last_u = u;
        state.clamped = ws.clamped;

        let f = |tt: f64, xx: &DVector<f64>| {
            plant
                .dynamics(xx, u, tt)
                .expect("plant dimensions validated at entry")
        };
        let next = rk4_step(&f, t, &x, dt);
        if next.iter().any(|vv| !vv.is_finite()) {
            return Ok(RunResult {
                record,
                abort: Some(AbortInfo {
                    step: k + 1,
                    t: t + dt,
                    reason: Error::NonFinite {
                        context: "plant state",
                        step: k + 1,
                    }
                    .to_string(),
                }),
            });
        }
        let norm = next.norm();
        if norm > escape_radius {
            return Ok(RunResult {
                record,
                abort: Some(AbortInfo {
                    step: k + 1,
                    t: t + dt,
                    reason: Error::Escape {
                        norm,
                        radius: escape_radius,
                        t: t + dt,
                    }
                    .to_string(),
                }),
            });
        }
        x = next;
    }

    Ok(RunResult {
        record,
        abort: None,
    })
}
