//! Dense matrix functions backing the discrete-to-continuous conversion.
//!
//! The matrix exponential comes from nalgebra; the principal logarithm is
//! computed here by inverse scaling and squaring: repeated Denman-Beavers
//! square roots bring the matrix close to the identity, where the log series
//! converges, and the result is scaled back by the number of roots taken.

use nalgebra::DMatrix;

/// True when some eigenvalue lies on the closed negative real axis
/// (including zero), where the principal logarithm is undefined.
pub fn spectrum_touches_negative_axis(m: &DMatrix<f64>) -> bool {
    let eig = m.complex_eigenvalues();
    let scale = eig.iter().map(|c| c.norm()).fold(1.0_f64, f64::max);
    eig.iter()
        .any(|c| c.re <= scale * 1e-14 && c.im.abs() <= scale * 1e-12)
}

/// Principal matrix logarithm.
///
/// Returns `None` when the spectrum touches the closed negative real axis or
/// the square-root iteration fails to converge.
pub fn logm(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "logm needs a square matrix");
    if spectrum_touches_negative_axis(m) {
        return None;
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let mut x = m.clone();
    let mut roots = 0i32;
    while (&x - &eye).norm() > 0.25 {
        x = sqrtm(&x)?;
        roots += 1;
        if roots > 60 {
            return None;
        }
    }
    let log_near_identity = log_series(&(x - &eye))?;
    Some(log_near_identity * 2f64.powi(roots))
}

/// Matrix square root by the Denman-Beavers iteration.
///
/// Converges quadratically for matrices with no eigenvalues on the closed
/// negative real axis.
pub fn sqrtm(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut y = a.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    let mut last_diff = f64::INFINITY;
    for _ in 0..100 {
        let y_inv = y.clone().try_inverse()?;
        let z_inv = z.clone().try_inverse()?;
        let y_next = 0.5 * (&y + &z_inv);
        let z_next = 0.5 * (&z + &y_inv);
        let diff = (&y_next - &y).norm();
        y = y_next;
        z = z_next;
        let scale = y.norm().max(1e-300);
        if diff <= 1e-13 * scale {
            return Some(y);
        }
        if diff >= last_diff && diff <= 1e-8 * scale {
            // roundoff plateau
            return Some(y);
        }
        last_diff = diff;
    }
    None
}

/// log(I + E) by the alternating power series; callers must keep |E| < 1.
fn log_series(e: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut power = e.clone();
    let mut acc = e.clone();
    for k in 2..=48u32 {
        power = &power * e;
        let coef = if k % 2 == 0 { -1.0 } else { 1.0 } / f64::from(k);
        acc += coef * &power;
        if power.norm() / f64::from(k) <= 1e-18 * acc.norm().max(1.0) {
            break;
        }
    }
    acc.iter().all(|v| v.is_finite()).then_some(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_of_identity_is_zero() {
        let l = logm(&DMatrix::identity(3, 3)).unwrap();
        assert!(l.norm() < 1e-14);
    }

    #[test]
    fn scalar_log_matches() {
        let dt = 0.1_f64;
        let m = DMatrix::from_element(1, 1, (-dt).exp());
        let l = logm(&m).unwrap();
        assert_relative_eq!(l[(0, 0)] / dt, -1.0, max_relative = 1e-12);
    }

    #[test]
    fn rotation_log_recovers_the_angle() {
        let th = 1.3_f64;
        let r = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let l = logm(&r).unwrap();
        assert_relative_eq!(l[(0, 1)], -th, max_relative = 1e-12);
        assert_relative_eq!(l[(1, 0)], th, max_relative = 1e-12);
        assert!(l[(0, 0)].abs() < 1e-12 && l[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn round_trips_through_the_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 4;
            let mut a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            // push the spectrum left so exp(a * dt) is comfortably away from
            // the negative real axis
            a -= DMatrix::identity(n, n) * 2.0;
            let dt = 0.05;
            let m = (a.clone() * dt).exp();
            let l = logm(&m).unwrap();
            let err = (&l / dt - &a).norm() / a.norm();
            assert!(err < 1e-10, "relative round-trip error {err}");
        }
    }

    #[test]
    fn negative_real_eigenvalue_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.0, 0.3]);
        assert!(spectrum_touches_negative_axis(&m));
        assert!(logm(&m).is_none());
        let singular = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.3]);
        assert!(logm(&singular).is_none());
    }
}
