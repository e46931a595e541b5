//! Observable dictionaries that lift plant states into the Koopman space.
//!
//! A dictionary stacks scalar observables into the lifted state `z = psi(x)`.
//! When `includes_identity` is set the first `n` observables are the state
//! itself, so the output map can be an exact selector and tracking errors are
//! readable directly from `z`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictionaryKind {
    Identity,
    GaussianRbf,
    Polynomial,
    Composite,
}

/// Build request for [`Dictionary::build`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DictionarySpec {
    pub kind: DictionaryKind,
    /// State dimension.
    pub n: usize,
    /// Lifted dimension N.
    pub size: usize,
    /// Prepend the state itself as the first `n` observables. Defaults to true.
    #[serde(default = "default_true")]
    pub includes_identity: bool,
    /// Explicit RBF centers; learned from data when absent.
    #[serde(default)]
    pub centers: Option<Vec<Vec<f64>>>,
    /// Shared RBF width; learned from center spacing when absent.
    #[serde(default)]
    pub width: Option<f64>,
    /// Number of RBF observables in a composite dictionary.
    #[serde(default)]
    pub rbf_count: Option<usize>,
    /// Seed for the farthest-point center selection.
    #[serde(default)]
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl DictionarySpec {
    pub fn identity(n: usize) -> Self {
        Self {
            kind: DictionaryKind::Identity,
            n,
            size: n,
            includes_identity: true,
            centers: None,
            width: None,
            rbf_count: None,
            seed: 0,
        }
    }

    pub fn gaussian_rbf(n: usize, size: usize, seed: u64) -> Self {
        Self {
            kind: DictionaryKind::GaussianRbf,
            n,
            size,
            includes_identity: true,
            centers: None,
            width: None,
            rbf_count: None,
            seed,
        }
    }

    pub fn polynomial(n: usize, size: usize) -> Self {
        Self {
            kind: DictionaryKind::Polynomial,
            n,
            size,
            includes_identity: true,
            centers: None,
            width: None,
            rbf_count: None,
            seed: 0,
        }
    }
}

/// Observable dictionary with analytic Jacobian.
///
/// Serializes to `{kind, n, N, includes_identity, centers, widths}`; the
/// monomial block of polynomial and composite dictionaries is regenerated
/// from those fields, so the JSON document fully determines the map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub kind: DictionaryKind,
    pub n: usize,
    #[serde(rename = "N")]
    pub size: usize,
    pub includes_identity: bool,
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
}

impl Dictionary {
    /// Builds a dictionary from a spec, learning RBF centers and the shared
    /// width from `data` when they are not given explicitly.
    ///
    /// Centers come from farthest-point sampling over the dataset states
    /// (start chosen by the seeded RNG, ties broken by lowest index); the
    /// width is the median pairwise distance between the chosen centers.
    pub fn build(spec: &DictionarySpec, data: Option<&[DVector<f64>]>) -> Result<Self> {
        let n = spec.n;
        if spec.size == 0 || n == 0 {
            return Err(Error::InvalidConfig(
                "dictionary needs size >= 1 and n >= 1".into(),
            ));
        }
        if spec.includes_identity && spec.size < n {
            return Err(Error::DictionaryTooSmall {
                requested: spec.size,
                n,
            });
        }
        let id_count = if spec.includes_identity { n } else { 0 };
        let extra = spec.size - id_count;

        let (centers, widths) = match spec.kind {
            DictionaryKind::Identity => {
                if spec.size != n || !spec.includes_identity {
                    return Err(Error::InvalidConfig(format!(
                        "identity dictionary must have size == n == {n} with the identity prefix"
                    )));
                }
                (Vec::new(), Vec::new())
            }
            DictionaryKind::Polynomial => (Vec::new(), Vec::new()),
            DictionaryKind::GaussianRbf => Self::resolve_rbf(spec, data, extra)?,
            DictionaryKind::Composite => {
                let rbf_count = match (&spec.centers, spec.rbf_count) {
                    (Some(c), _) => c.len(),
                    (None, Some(k)) => k,
                    (None, None) => {
                        return Err(Error::InvalidConfig(
                            "composite dictionary needs centers or rbf_count".into(),
                        ))
                    }
                };
                if rbf_count > extra {
                    return Err(Error::InvalidConfig(format!(
                        "composite dictionary has {rbf_count} RBFs but only {extra} free slots"
                    )));
                }
                Self::resolve_rbf(spec, data, rbf_count)?
            }
        };

        for c in &centers {
            if c.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: c.len(),
                });
            }
        }
        for &w in &widths {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "RBF widths must be strictly positive, got {w}"
                )));
            }
        }

        Ok(Self {
            kind: spec.kind,
            n,
            size: spec.size,
            includes_identity: spec.includes_identity,
            centers,
            widths,
        })
    }

    fn resolve_rbf(
        spec: &DictionarySpec,
        data: Option<&[DVector<f64>]>,
        count: usize,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let centers = match &spec.centers {
            Some(c) => {
                if c.len() != count {
                    return Err(Error::InvalidConfig(format!(
                        "expected {count} centers, got {}",
                        c.len()
                    )));
                }
                c.clone()
            }
            None => {
                let states = data
                    .filter(|s| !s.is_empty())
                    .ok_or(Error::EmptyDataset("RBF center selection"))?;
                farthest_point_sampling(states, count, spec.seed)?
            }
        };
        let width = match spec.width {
            Some(w) => w,
            None => median_center_distance(&centers)?,
        };
        Ok((centers, vec![width; count]))
    }

    fn rbf_count(&self) -> usize {
        self.centers.len()
    }

    fn monomial_count(&self) -> usize {
        let id = if self.includes_identity { self.n } else { 0 };
        self.size - id - self.rbf_count()
    }

    /// Lifts a state into the N-dimensional observable space.
    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut z = DVector::zeros(self.size);
        let mut row = 0;
        if self.includes_identity {
            z.rows_mut(0, self.n).copy_from(x);
            row = self.n;
        }
        for (c, w) in self.centers.iter().zip(&self.widths) {
            let mut d2 = 0.0;
            for j in 0..self.n {
                let d = x[j] - c[j];
                d2 += d * d;
            }
            z[row] = (-d2 / (w * w)).exp();
            row += 1;
        }
        for exps in monomial_exponents(self.n, self.monomial_count()) {
            let mut v = 1.0;
            for (j, &k) in exps.iter().enumerate() {
                v *= x[j].powi(k as i32);
            }
            z[row] = v;
            row += 1;
        }
        Ok(z)
    }

    /// Analytic Jacobian of the lift, J[i][j] = d psi_i / d x_j.
    pub fn lift_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut jac = DMatrix::zeros(self.size, self.n);
        let mut row = 0;
        if self.includes_identity {
            for j in 0..self.n {
                jac[(j, j)] = 1.0;
            }
            row = self.n;
        }
        for (c, w) in self.centers.iter().zip(&self.widths) {
            let mut d2 = 0.0;
            for j in 0..self.n {
                let d = x[j] - c[j];
                d2 += d * d;
            }
            let v = (-d2 / (w * w)).exp();
            for j in 0..self.n {
                jac[(row, j)] = v * (-2.0 * (x[j] - c[j]) / (w * w));
            }
            row += 1;
        }
        for exps in monomial_exponents(self.n, self.monomial_count()) {
            for j in 0..self.n {
                let k = exps[j];
                if k == 0 {
                    continue;
                }
                let mut v = k as f64 * x[j].powi(k as i32 - 1);
                for (i, &ki) in exps.iter().enumerate() {
                    if i != j {
                        v *= x[i].powi(ki as i32);
                    }
                }
                jac[(row, j)] = v;
            }
            row += 1;
        }
        Ok(jac)
    }
}

/// Multi-indices of the monomial observables, graded lexicographic starting
/// at total degree 2 (degree 1 is covered by the identity prefix).
fn monomial_exponents(n: usize, count: usize) -> Vec<Vec<usize>> {
    fn fill(n: usize, rem: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, count: usize) {
        if out.len() == count {
            return;
        }
        if prefix.len() == n - 1 {
            let mut exps = prefix.clone();
            exps.push(rem);
            out.push(exps);
            return;
        }
        // lex descending: highest power of the current variable first
        for k in (0..=rem).rev() {
            prefix.push(k);
            fill(n, rem - k, prefix, out, count);
            prefix.pop();
            if out.len() == count {
                return;
            }
        }
    }

    let mut out = Vec::with_capacity(count);
    let mut degree = 2;
    while out.len() < count {
        fill(n, degree, &mut Vec::new(), &mut out, count);
        degree += 1;
    }
    out
}

fn farthest_point_sampling(
    states: &[DVector<f64>],
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let m = states.len();
    if count > m {
        return Err(Error::TooFewSnapshots {
            need: count,
            got: m,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.random_range(0..m);
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = states.iter().map(|s| (s - &states[first]).norm()).collect();
    while chosen.len() < count {
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (&states[i] - &states[best]).norm();
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(chosen
        .into_iter()
        .map(|i| states[i].iter().copied().collect())
        .collect())
}

fn median_center_distance(centers: &[Vec<f64>]) -> Result<f64> {
    let mut dists = Vec::new();
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            let d2: f64 = centers[i]
                .iter()
                .zip(&centers[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::InvalidConfig(
            "need at least two RBF centers to infer a width".into(),
        ));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    if median <= 0.0 {
        return Err(Error::InvalidConfig(
            "degenerate dataset: RBF centers coincide".into(),
        ));
    }
    Ok(median)
}
