//! Residual quantification and the conservative linear uncertainty bound.
//!
//! The bound fit is a two-variable linear program solved exactly: the optimum
//! sits at a vertex of the feasible region, so all pairwise constraint
//! intersections and single-constraint axis intercepts are enumerated and
//! checked. Constraints dominated by another sample (larger residual at
//! smaller state norm) cannot be active and are dropped first, which keeps
//! the enumeration cheap without changing the optimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sysid::{KoopmanModel, SnapshotDataset};

/// One validation residual: the one-step model error rate and the lifted
/// state norm it was observed at.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResidualSample {
    pub norm_delta: f64,
    pub norm_z: f64,
}

/// One-step-ahead prediction error of the continuous model over a validation
/// record: `delta_k = (psi(x_{k+1}) - psi(x_k))/dt - (A psi(x_k) + B u_k)`.
pub fn compute_residuals(
    model: &KoopmanModel,
    val: &SnapshotDataset,
) -> Result<Vec<ResidualSample>> {
    if (val.dt - model.dt).abs() > 1e-9 * model.dt {
        return Err(Error::DtMismatch {
            model_dt: model.dt,
            data_dt: val.dt,
        });
    }
    if val.num_pairs() == 0 {
        return Err(Error::EmptyDataset("residual computation"));
    }
    let mut out = Vec::with_capacity(val.num_pairs());
    let mut z_k = model.dictionary.lift(&val.states[0])?;
    for k in 0..val.num_pairs() {
        let z_next = model.dictionary.lift(&val.states[k + 1])?;
        let delta = (&z_next - &z_k) / val.dt - (&model.a * &z_k + &model.b * val.inputs[k]);
        out.push(ResidualSample {
            norm_delta: delta.norm(),
            norm_z: z_k.norm(),
        });
        z_k = z_next;
    }
    Ok(out)
}

/// Fits the smallest conservative bound `|delta| <= delta0 + delta1 |z|`,
/// minimizing `delta0 + kappa * delta1` with `kappa` the mean lifted-state
/// norm of the samples.
pub fn fit_bound(samples: &[ResidualSample]) -> (f64, f64) {
    assert!(!samples.is_empty(), "fit_bound needs at least one sample");
    let kappa = samples.iter().map(|s| s.norm_z).sum::<f64>() / samples.len() as f64;
    fit_bound_weighted(samples, kappa)
}

/// Same fit with an explicit objective weight; exposed so the trade-off
/// between offset and slope can be tested at a fixed operating scale.
pub fn fit_bound_weighted(samples: &[ResidualSample], kappa: f64) -> (f64, f64) {
    assert!(!samples.is_empty(), "fit_bound needs at least one sample");
    let front = pareto_front(samples);

    let mut candidates: Vec<(f64, f64)> = Vec::new();
    let d_max = front.iter().map(|s| s.norm_delta).fold(0.0_f64, f64::max);
    candidates.push((d_max.max(0.0), 0.0));
    for s in &front {
        candidates.push((s.norm_delta.max(0.0), 0.0));
        if s.norm_z > 0.0 && s.norm_delta >= 0.0 {
            candidates.push((0.0, s.norm_delta / s.norm_z));
        }
    }
    for i in 0..front.len() {
        for j in i + 1..front.len() {
            let (zi, di) = (front[i].norm_z, front[i].norm_delta);
            let (zj, dj) = (front[j].norm_z, front[j].norm_delta);
            if (zi - zj).abs() <= f64::EPSILON * zi.max(zj) {
                continue;
            }
            let slope = (di - dj) / (zi - zj);
            let offset = di - slope * zi;
            if slope >= -1e-15 && offset >= -1e-12 * d_max.max(1.0) {
                candidates.push((offset.max(0.0), slope.max(0.0)));
            }
        }
    }

    let feasible = |d0: f64, d1: f64| {
        front
            .iter()
            .all(|s| d0 + d1 * s.norm_z >= s.norm_delta - 1e-12 * s.norm_delta.max(1.0))
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for &(d0, d1) in &candidates {
        if !feasible(d0, d1) {
            continue;
        }
        let obj = d0 + kappa * d1;
        let better = match best {
            None => true,
            Some((bo, _, bd1)) => obj < bo || (obj == bo && d1 < bd1),
        };
        if better {
            best = Some((obj, d0, d1));
        }
    }
    let (_, mut d0, d1) = best.expect("the vertical candidate (max residual, 0) is feasible");

    // absorb roundoff so the returned pair satisfies every constraint; the
    // bump itself rounds, so iterate until clean
    for _ in 0..4 {
        let worst = samples
            .iter()
            .map(|s| s.norm_delta - d0 - d1 * s.norm_z)
            .fold(f64::NEG_INFINITY, f64::max);
        if worst <= 0.0 {
            break;
        }
        d0 = (d0 + worst).next_up();
    }
    (d0, d1)
}

/// Constraints that can be active in the bound LP: residuals not dominated
/// by a sample with larger residual at a smaller state norm.
fn pareto_front(samples: &[ResidualSample]) -> Vec<ResidualSample> {
    let mut sorted: Vec<ResidualSample> = samples.to_vec();
    sorted.sort_by(|a, b| {
        a.norm_z
            .partial_cmp(&b.norm_z)
            .unwrap()
            .then(b.norm_delta.partial_cmp(&a.norm_delta).unwrap())
    });
    let mut front: Vec<ResidualSample> = Vec::new();
    let mut max_d = f64::NEG_INFINITY;
    for s in sorted {
        if s.norm_delta > max_d {
            max_d = s.norm_delta;
            front.push(s);
        }
    }
    front
}
