//! Truncated derivative jets.
//!
//! A jet stores a quantity and its first few time derivatives. The
//! backstepping recursion needs exact total derivatives of each virtual
//! control; carrying jets through the recursion yields them without symbolic
//! manipulation. Products follow the Leibniz rule and differentiation is a
//! coefficient shift, which drops the highest stored order, so seeds must be
//! provided one order deeper than the deepest derivative consumed.

#[derive(Clone, Debug)]
pub(crate) struct Jet {
    /// c[k] is the k-th raw time derivative.
    c: Vec<f64>,
}

impl Jet {
    pub fn constant(value: f64, len: usize) -> Self {
        let mut c = vec![0.0; len];
        c[0] = value;
        Self { c }
    }

    pub fn from_derivs(c: Vec<f64>) -> Self {
        debug_assert!(!c.is_empty());
        Self { c }
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn d1(&self) -> f64 {
        self.c[1]
    }

    /// Time derivative: shifts coefficients down, losing the top order.
    pub fn shift(&self) -> Self {
        debug_assert!(self.c.len() >= 2, "jet too short to differentiate");
        Self {
            c: self.c[1..].to_vec(),
        }
    }

    pub fn add(&self, rhs: &Jet) -> Self {
        let len = self.len().min(rhs.len());
        Self {
            c: (0..len).map(|k| self.c[k] + rhs.c[k]).collect(),
        }
    }

    pub fn sub(&self, rhs: &Jet) -> Self {
        let len = self.len().min(rhs.len());
        Self {
            c: (0..len).map(|k| self.c[k] - rhs.c[k]).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            c: self.c.iter().map(|v| s * v).collect(),
        }
    }

    /// Leibniz product, truncated to the shorter operand.
    pub fn mul(&self, rhs: &Jet) -> Self {
        let len = self.len().min(rhs.len());
        let mut out = vec![0.0; len];
        for (k, slot) in out.iter_mut().enumerate() {
            let mut binom = 1.0;
            let mut acc = 0.0;
            for j in 0..=k {
                acc += binom * self.c[j] * rhs.c[k - j];
                binom *= (k - j) as f64 / (j + 1) as f64;
            }
            *slot = acc;
        }
        Self { c: out }
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
    }
}
