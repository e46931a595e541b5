//! Lifted linear model identification.
//!
//! `fit_edmdc` solves the ridge-regularized least squares over lifted
//! snapshots, `to_continuous` converts the discrete model through the
//! principal matrix logarithm (with a documented first-order fallback), and
//! `to_companion` produces the controllable-canonical realization consumed by
//! the backstepping controller.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::matfun;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Validation,
}

/// Uniformly sampled trajectory snapshots: M+1 states and M inputs.
#[derive(Clone, Debug)]
pub struct SnapshotDataset {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<f64>,
    pub dt: f64,
    pub split_tag: SplitTag,
}

impl SnapshotDataset {
    pub fn new(
        states: Vec<DVector<f64>>,
        inputs: Vec<f64>,
        dt: f64,
        split_tag: SplitTag,
    ) -> Result<Self> {
        if inputs.is_empty() || states.len() != inputs.len() + 1 {
            return Err(Error::TooFewSnapshots {
                need: 2,
                got: states.len(),
            });
        }
        if !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sampling interval must be positive, got {dt}"
            )));
        }
        Ok(Self {
            states,
            inputs,
            dt,
            split_tag,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.inputs.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    /// Contiguous split: the leading fraction of snapshot pairs becomes the
    /// training record, the remainder the validation record. The boundary
    /// state belongs to the training record only, so the two state lists
    /// partition the original one.
    pub fn split(&self, train_fraction: f64) -> Result<(Self, Self)> {
        let m = self.num_pairs();
        let k = (train_fraction * m as f64).floor() as usize;
        if k < 1 || k + 2 > m {
            return Err(Error::InvalidConfig(format!(
                "split fraction {train_fraction} leaves an empty record for {m} pairs"
            )));
        }
        let train = Self::new(
            self.states[..=k].to_vec(),
            self.inputs[..k].to_vec(),
            self.dt,
            SplitTag::Train,
        )?;
        let validation = Self::new(
            self.states[k + 1..].to_vec(),
            self.inputs[k + 1..m].to_vec(),
            self.dt,
            SplitTag::Validation,
        )?;
        Ok((train, validation))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConversionPath {
    Logm,
    FirstOrder,
}

/// Result of the EDMDc least squares.
#[derive(Clone, Debug)]
pub struct EdmdcFit {
    pub a_d: DMatrix<f64>,
    pub b_d: DVector<f64>,
    pub c: DMatrix<f64>,
}

/// Learned lifted model: continuous and discrete dynamics, the output map,
/// and the fitted uncertainty bound of the one-step residuals.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(into = "schema::KoopmanModelJson", try_from = "schema::KoopmanModelJson")]
pub struct KoopmanModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub a_d: DMatrix<f64>,
    pub b_d: DVector<f64>,
    pub dt: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub dictionary: Dictionary,
    pub conversion_path: ConversionPath,
}

impl KoopmanModel {
    /// Assembles a model from an EDMDc fit, running the continuous-time
    /// conversion. The uncertainty bound starts at zero and is filled in by
    /// the validation step.
    pub fn assemble(fit: EdmdcFit, dictionary: Dictionary, dt: f64) -> Self {
        let (a, b, conversion_path) = to_continuous(&fit.a_d, &fit.b_d, dt);
        Self {
            a,
            b,
            c: fit.c,
            a_d: fit.a_d,
            b_d: fit.b_d,
            dt,
            delta0: 0.0,
            delta1: 0.0,
            dictionary,
            conversion_path,
        }
    }

    pub fn set_uncertainty_bound(&mut self, delta0: f64, delta1: f64) -> Result<()> {
        if delta0 < 0.0 || delta1 < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "uncertainty bound must be nonnegative, got ({delta0}, {delta1})"
            )));
        }
        self.delta0 = delta0;
        self.delta1 = delta1;
        Ok(())
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Controllable-canonical realization of the continuous lifted model.
///
/// `t_c` maps lifted coordinates `z` to companion coordinates `w = t_c z`
/// where the dynamics matrix has ones on the superdiagonal of its first
/// N-1 rows and the input enters only the last coordinate with gain
/// `b_last`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(
    into = "schema::CompanionJson",
    try_from = "schema::CompanionJson"
)]
pub struct CompanionRealization {
    pub t_c: DMatrix<f64>,
    pub t_c_inv: DMatrix<f64>,
    pub a_bar: DMatrix<f64>,
    pub b_last: f64,
}

impl CompanionRealization {
    pub fn dim(&self) -> usize {
        self.a_bar.nrows()
    }
}

/// Fits the lifted discrete model by regularized least squares over the
/// stacked regressor `[psi(x_k); u_k]`.
///
/// With an identity-prefixed dictionary the output map is the exact selector
/// `[I 0]`; otherwise it is fitted by least squares.
pub fn fit_edmdc(train: &SnapshotDataset, dict: &Dictionary, ridge: f64) -> Result<EdmdcFit> {
    let n_lift = dict.size;
    let m = train.num_pairs();
    if m < n_lift + 1 {
        return Err(Error::TooFewSnapshots {
            need: n_lift + 1,
            got: m,
        });
    }
    let lifted: Vec<DVector<f64>> = train
        .states
        .iter()
        .map(|x| dict.lift(x))
        .collect::<Result<_>>()?;

    let mut g = DMatrix::zeros(n_lift + 1, m);
    let mut z_next = DMatrix::zeros(n_lift, m);
    for k in 0..m {
        g.view_mut((0, k), (n_lift, 1)).copy_from(&lifted[k]);
        g[(n_lift, k)] = train.inputs[k];
        z_next.column_mut(k).copy_from(&lifted[k + 1]);
    }

    let svd = g.svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let sigma = &svd.singular_values;
    let sigma_max = sigma.max();

    if ridge <= 0.0 {
        let rank = sigma.iter().filter(|&&s| s > 1e-10 * sigma_max).count();
        if rank < n_lift + 1 {
            return Err(Error::RankDeficient {
                rank,
                expected: n_lift + 1,
                sigma_min: sigma.min(),
            });
        }
    }

    // X = Z' V diag(s / (s^2 + ridge)) U^T, the ridge-filtered pseudo-inverse
    let filtered: DVector<f64> = sigma.map(|s| {
        if s > 0.0 || ridge > 0.0 {
            s / (s * s + ridge)
        } else {
            0.0
        }
    });
    let zv = &z_next * v_t.transpose(); // N x r
    let mut x = DMatrix::zeros(n_lift, n_lift + 1);
    for r in 0..filtered.len() {
        let col = zv.column(r) * filtered[r];
        x += col * u.column(r).transpose();
    }

    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "EDMDc solution",
            step: 0,
        });
    }

    let a_d = x.columns(0, n_lift).into_owned();
    let b_d = x.column(n_lift).into_owned();

    let n_state = train.state_dim();
    let c = if dict.includes_identity {
        DMatrix::identity(n_state, n_lift)
    } else {
        fit_output_map(&train.states, &lifted, n_state, n_lift)
    };

    Ok(EdmdcFit { a_d, b_d, c })
}

fn fit_output_map(
    states: &[DVector<f64>],
    lifted: &[DVector<f64>],
    n_state: usize,
    n_lift: usize,
) -> DMatrix<f64> {
    let m = states.len();
    let mut xs = DMatrix::zeros(n_state, m);
    let mut zs = DMatrix::zeros(n_lift, m);
    for k in 0..m {
        xs.column_mut(k).copy_from(&states[k]);
        zs.column_mut(k).copy_from(&lifted[k]);
    }
    let svd = zs.svd(true, true);
    let u = svd.u.as_ref().expect("svd requested u");
    let v_t = svd.v_t.as_ref().expect("svd requested v_t");
    let sigma = &svd.singular_values;
    let cut = 1e-12 * sigma.max();
    let filtered: DVector<f64> = sigma.map(|s| if s > cut { 1.0 / s } else { 0.0 });
    let xv = &xs * v_t.transpose();
    let mut c = DMatrix::zeros(n_state, n_lift);
    for r in 0..filtered.len() {
        let col = xv.column(r) * filtered[r];
        c += col * u.column(r).transpose();
    }
    c
}

/// Converts the discrete model to continuous time.
///
/// Primary path: principal matrix logarithm with exact zero-order-hold
/// inversion of the input matrix. Fallback (spectrum on the closed negative
/// real axis, singular `A_d - I`, or a failed convergence check): the
/// first-order rule `A = (A_d - I)/dt`, `B = B_d/dt`, flagged in the result.
pub fn to_continuous(
    a_d: &DMatrix<f64>,
    b_d: &DVector<f64>,
    dt: f64,
) -> (DMatrix<f64>, DVector<f64>, ConversionPath) {
    assert!(dt > 0.0, "dt must be positive");
    let n = a_d.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let a_d_shift = a_d - &eye;

    let first_order = || {
        (
            &a_d_shift / dt,
            b_d / dt,
            ConversionPath::FirstOrder,
        )
    };

    // the ZOH inversion needs (A_d - I) invertible
    let sing = a_d_shift.clone().svd(false, false).singular_values;
    let s_max = sing.max();
    if s_max <= 0.0 || sing.min() <= 1e-12 * s_max {
        return first_order();
    }
    let Some(inv_shift) = a_d_shift.clone().try_inverse() else {
        return first_order();
    };
    let Some(log) = matfun::logm(a_d) else {
        return first_order();
    };
    let a = log / dt;
    let b = &a * (inv_shift * b_d);

    // verify the round trip before committing to the log path
    let defect = ((a.clone() * dt).exp() - a_d).norm();
    if !defect.is_finite() || defect > 1e-8 * a_d.norm() {
        return first_order();
    }
    (a, b, ConversionPath::Logm)
}

/// Similarity transform to controllable canonical form.
///
/// The transform rows are `q, qA, ..., qA^{N-1}` where `q` is the last row of
/// the inverse controllability matrix, which places the input in the last
/// coordinate with unit gain up to solve precision.
pub fn to_companion(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<CompanionRealization> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n, "dynamics matrix must be square");
    assert_eq!(b.len(), n, "input matrix dimension mismatch");

    let mut ctrb = DMatrix::zeros(n, n);
    let mut col = b.clone();
    for j in 0..n {
        ctrb.column_mut(j).copy_from(&col);
        col = a * col;
    }
    let sigma = ctrb.clone().svd(false, false).singular_values;
    let s_max = sigma.max();
    let ratio = if s_max > 0.0 { sigma.min() / s_max } else { 0.0 };
    let rank = if s_max > 0.0 {
        sigma.iter().filter(|&&s| s > 1e-10 * s_max).count()
    } else {
        0
    };
    if rank < n {
        return Err(Error::Uncontrollable { rank, n, ratio });
    }

    let mut e_n = DVector::zeros(n);
    e_n[n - 1] = 1.0;
    let q = ctrb
        .transpose()
        .lu()
        .solve(&e_n)
        .ok_or(Error::Uncontrollable { rank, n, ratio })?;

    let mut t_c = DMatrix::zeros(n, n);
    let mut row = RowDVector::from_iterator(n, q.iter().copied());
    for i in 0..n {
        t_c.row_mut(i).copy_from(&row);
        row = &row * a;
    }
    let t_c_inv = t_c.clone().try_inverse().ok_or(Error::CompanionIllConditioned {
        defect: f64::INFINITY,
        bound: 1e-8 * a.norm(),
    })?;

    let a_sim = &t_c * a * &t_c_inv;
    let mut a_bar = DMatrix::zeros(n, n);
    for i in 0..n.saturating_sub(1) {
        a_bar[(i, i + 1)] = 1.0;
    }
    a_bar.row_mut(n - 1).copy_from(&a_sim.row(n - 1));

    let b_bar = &t_c * b;
    let b_last = b_bar[n - 1];

    let mut defect2 = (&a_sim - &a_bar).norm_squared();
    for i in 0..n - 1 {
        defect2 += b_bar[i] * b_bar[i];
    }
    let defect = defect2.sqrt();
    let bound = 1e-8 * a.norm().max(1e-300);
    if !defect.is_finite() || defect > bound {
        return Err(Error::CompanionIllConditioned { defect, bound });
    }

    Ok(CompanionRealization {
        t_c,
        t_c_inv,
        a_bar,
        b_last,
    })
}

mod schema {
    use super::*;

    pub(super) fn mat_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect()
    }

    pub(super) fn rows_mat(rows: &[Vec<f64>]) -> std::result::Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        if nrows == 0 {
            return Err("matrix with zero rows".into());
        }
        let ncols = rows[0].len();
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub(super) fn col_rows(v: &DVector<f64>) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    pub(super) fn rows_col(rows: &[Vec<f64>]) -> std::result::Result<DVector<f64>, String> {
        let m = rows_mat(rows)?;
        if m.ncols() != 1 {
            return Err(format!("expected a column matrix, got {} columns", m.ncols()));
        }
        Ok(m.column(0).into_owned())
    }

    #[derive(Serialize, Deserialize)]
    pub struct KoopmanModelJson {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        #[serde(rename = "B")]
        b: Vec<Vec<f64>>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
        #[serde(rename = "A_d")]
        a_d: Vec<Vec<f64>>,
        #[serde(rename = "B_d")]
        b_d: Vec<Vec<f64>>,
        dt: f64,
        delta0: f64,
        delta1: f64,
        dictionary: Dictionary,
        conversion_path: ConversionPath,
    }

    impl From<KoopmanModel> for KoopmanModelJson {
        fn from(m: KoopmanModel) -> Self {
            Self {
                a: mat_rows(&m.a),
                b: col_rows(&m.b),
                c: mat_rows(&m.c),
                a_d: mat_rows(&m.a_d),
                b_d: col_rows(&m.b_d),
                dt: m.dt,
                delta0: m.delta0,
                delta1: m.delta1,
                dictionary: m.dictionary,
                conversion_path: m.conversion_path,
            }
        }
    }

    impl TryFrom<KoopmanModelJson> for KoopmanModel {
        type Error = String;
        fn try_from(j: KoopmanModelJson) -> std::result::Result<Self, String> {
            let model = KoopmanModel {
                a: rows_mat(&j.a)?,
                b: rows_col(&j.b)?,
                c: rows_mat(&j.c)?,
                a_d: rows_mat(&j.a_d)?,
                b_d: rows_col(&j.b_d)?,
                dt: j.dt,
                delta0: j.delta0,
                delta1: j.delta1,
                dictionary: j.dictionary,
                conversion_path: j.conversion_path,
            };
            if model.delta0 < 0.0 || model.delta1 < 0.0 {
                return Err("uncertainty bound must be nonnegative".into());
            }
            Ok(model)
        }
    }

    #[derive(Serialize, Deserialize)]
    pub struct CompanionJson {
        #[serde(rename = "T_c")]
        t_c: Vec<Vec<f64>>,
        #[serde(rename = "A_bar")]
        a_bar: Vec<Vec<f64>>,
        b_last: f64,
    }

    impl From<CompanionRealization> for CompanionJson {
        fn from(c: CompanionRealization) -> Self {
            Self {
                t_c: mat_rows(&c.t_c),
                a_bar: mat_rows(&c.a_bar),
                b_last: c.b_last,
            }
        }
    }

    impl TryFrom<CompanionJson> for CompanionRealization {
        type Error = String;
        fn try_from(j: CompanionJson) -> std::result::Result<Self, String> {
            let t_c = rows_mat(&j.t_c)?;
            let t_c_inv = t_c
                .clone()
                .try_inverse()
                .ok_or("companion transform is singular")?;
            Ok(CompanionRealization {
                t_c,
                t_c_inv,
                a_bar: rows_mat(&j.a_bar)?,
                b_last: j.b_last,
            })
        }
    }
}
