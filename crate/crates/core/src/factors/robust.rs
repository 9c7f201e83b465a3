use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustKind {
    Fair,
    Cauchy,
}

/// Robust loss `rho(a; b)` applied to a squared residual norm `a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustKernel {
    pub kind: RobustKind,
    pub bound: f64,
}

impl RobustKernel {
    pub fn fair(bound: f64) -> Self {
        Self {
            kind: RobustKind::Fair,
            bound,
        }
    }

    pub fn cauchy(bound: f64) -> Self {
        Self {
            kind: RobustKind::Cauchy,
            bound,
        }
    }

    pub fn eval(&self, a: f64) -> Result<f64> {
        if !(a >= 0.0) {
            return Err(Error::Domain(a));
        }
        if !(self.bound > 0.0) {
            return Err(Error::Domain(self.bound));
        }
        Ok(self.value(a))
    }

    /// Unchecked `rho(a)`; `a` must be non-negative.
    #[inline]
    pub fn value(&self, a: f64) -> f64 {
        let b = self.bound;
        match self.kind {
            RobustKind::Fair => {
                let r = (a / b).sqrt();
                2.0 * (r - r.ln_1p())
            }
            RobustKind::Cauchy => (a / b).ln_1p(),
        }
    }

    /// `d rho / d a`.
    #[inline]
    pub fn derivative(&self, a: f64) -> f64 {
        let b = self.bound;
        match self.kind {
            RobustKind::Fair => 1.0 / (b * (1.0 + (a / b).sqrt())),
            RobustKind::Cauchy => 1.0 / (b + a),
        }
    }
}
