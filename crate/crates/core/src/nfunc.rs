//! N-functions: the power law `t^p/p` and its two regularizations.
//!
//! The regularized kinds replace the power law by quadratics below `ε₋` and
//! above `ε₊`. `RegC1` glues value and slope, `RegC2` also glues the second
//! derivative. With `ε₊ = ∞` only the lower quadratic is active.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NFuncError {
    #[error("N-function argument must be nonnegative, got {0}")]
    Domain(f64),
    #[error("invalid N-function parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NKind {
    Power,
    RegC1,
    RegC2,
}

impl NKind {
    pub fn name(self) -> &'static str {
        match self {
            NKind::Power => "power",
            NKind::RegC1 => "reg_c1",
            NKind::RegC2 => "reg_c2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "power" => Some(NKind::Power),
            "reg_c1" => Some(NKind::RegC1),
            "reg_c2" => Some(NKind::RegC2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NFunction {
    kind: NKind,
    p: f64,
    eps_minus: f64,
    eps_plus: f64,
}

/// Value and first two derivatives at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NValues {
    pub phi: f64,
    pub dphi: f64,
    pub ddphi: f64,
}

impl NFunction {
    pub fn power(p: f64) -> Result<Self, NFuncError> {
        Self::new(NKind::Power, p, 0.0, f64::INFINITY)
    }

    pub fn new(kind: NKind, p: f64, eps_minus: f64, eps_plus: f64) -> Result<Self, NFuncError> {
        if !(p > 1.0 && p.is_finite()) {
            return Err(NFuncError::InvalidParameters(format!("p must exceed 1, got {p}")));
        }
        if kind != NKind::Power {
            if !(eps_minus >= 0.0 && eps_minus.is_finite()) {
                return Err(NFuncError::InvalidParameters(format!(
                    "eps_minus must be finite and nonnegative, got {eps_minus}"
                )));
            }
            if !(eps_plus > eps_minus) {
                return Err(NFuncError::InvalidParameters(format!(
                    "eps_plus ({eps_plus}) must exceed eps_minus ({eps_minus})"
                )));
            }
        }
        Ok(Self {
            kind,
            p,
            eps_minus,
            eps_plus,
        })
    }

    /// Regularization whose lower threshold satisfies `ε₋^{p-2} = eps_minus_pow`.
    /// For `p = 2` every kind coincides with `t²/2` and the threshold is unused.
    pub fn regularized(kind: NKind, p: f64, eps_minus_pow: f64, eps_plus: f64) -> Result<Self, NFuncError> {
        if !(eps_minus_pow > 0.0) {
            return Err(NFuncError::InvalidParameters(format!(
                "eps_minus_pow must be positive, got {eps_minus_pow}"
            )));
        }
        let eps_minus = if (p - 2.0).abs() < 1e-15 {
            0.0
        } else {
            eps_minus_pow.powf(1.0 / (p - 2.0))
        };
        Self::new(kind, p, eps_minus, eps_plus)
    }

    /// The default solver model: `RegC1` with `ε₋^{p-2} = 1e-6`, no upper cut.
    pub fn default_regularized(p: f64) -> Result<Self, NFuncError> {
        Self::regularized(NKind::RegC1, p, 1e-6, f64::INFINITY)
    }

    pub fn kind(&self) -> NKind {
        self.kind
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn eps_minus(&self) -> f64 {
        self.eps_minus
    }

    pub fn eps_plus(&self) -> f64 {
        self.eps_plus
    }

    /// `(φ(t), φ′(t), φ″(t))`.
    pub fn eval(&self, t: f64) -> Result<NValues, NFuncError> {
        if !(t >= 0.0) {
            return Err(NFuncError::Domain(t));
        }
        Ok(NValues {
            phi: self.phi(t),
            dphi: self.dphi(t),
            ddphi: self.ddphi(t),
        })
    }

    fn branch(&self, t: f64) -> Branch {
        if self.kind == NKind::Power || self.p == 2.0 {
            Branch::Power
        } else if t <= self.eps_minus {
            Branch::Lower
        } else if t <= self.eps_plus {
            Branch::Power
        } else {
            Branch::Upper
        }
    }

    pub fn phi(&self, t: f64) -> f64 {
        let p = self.p;
        match (self.branch(t), self.kind) {
            (Branch::Power, _) => t.powf(p) / p,
            (Branch::Lower, NKind::RegC1) => {
                let e = self.eps_minus;
                0.5 * e.powf(p - 2.0) * t * t + (1.0 / p - 0.5) * e.powf(p)
            }
            (Branch::Lower, _) => {
                let e = self.eps_minus;
                e.powf(p - 2.0) * t * t / p + (p - 2.0) / (p * p + 2.0 * p) * t.powf(p + 2.0) / (e * e)
                    - (p - 2.0) / (p * (p + 2.0)) * e.powf(p)
            }
            (Branch::Upper, NKind::RegC1) => {
                let e = self.eps_plus;
                0.5 * e.powf(p - 2.0) * t * t + (1.0 / p - 0.5) * e.powf(p)
            }
            (Branch::Upper, _) => {
                let e = self.eps_plus;
                0.5 * (p - 1.0) * e.powf(p - 2.0) * t * t + (2.0 - p) * e.powf(p - 1.0) * t
                    + (p * p - 3.0 * p + 2.0) / (2.0 * p) * e.powf(p)
            }
        }
    }

    pub fn dphi(&self, t: f64) -> f64 {
        let p = self.p;
        match (self.branch(t), self.kind) {
            (Branch::Power, _) => t.powf(p - 1.0),
            (Branch::Lower, NKind::RegC1) => self.eps_minus.powf(p - 2.0) * t,
            (Branch::Lower, _) => {
                let e = self.eps_minus;
                2.0 / p * e.powf(p - 2.0) * t + (p - 2.0) / p * t.powf(p + 1.0) / (e * e)
            }
            (Branch::Upper, NKind::RegC1) => self.eps_plus.powf(p - 2.0) * t,
            (Branch::Upper, _) => {
                let e = self.eps_plus;
                (p - 1.0) * e.powf(p - 2.0) * t + (2.0 - p) * e.powf(p - 1.0)
            }
        }
    }

    pub fn ddphi(&self, t: f64) -> f64 {
        let p = self.p;
        match (self.branch(t), self.kind) {
            (Branch::Power, _) => {
                if p == 2.0 {
                    1.0
                } else {
                    (p - 1.0) * t.powf(p - 2.0)
                }
            }
            (Branch::Lower, NKind::RegC1) => self.eps_minus.powf(p - 2.0),
            (Branch::Lower, _) => {
                let e = self.eps_minus;
                2.0 / p * e.powf(p - 2.0) + (p - 2.0) * (p + 1.0) / p * t.powf(p) / (e * e)
            }
            (Branch::Upper, NKind::RegC1) => self.eps_plus.powf(p - 2.0),
            (Branch::Upper, _) => (p - 1.0) * self.eps_plus.powf(p - 2.0),
        }
    }

    /// `φ′(t)/t`, with the removable singularity at `t = 0` filled in.
    pub fn secant(&self, t: f64) -> f64 {
        if t > 0.0 {
            return self.dphi(t) / t;
        }
        let p = self.p;
        match self.kind {
            _ if p == 2.0 => 1.0,
            NKind::Power => {
                if p > 2.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            _ if self.eps_minus == 0.0 => 0.0,
            NKind::RegC1 => self.eps_minus.powf(p - 2.0),
            NKind::RegC2 => 2.0 / p * self.eps_minus.powf(p - 2.0),
        }
    }

    /// Weight of the rank-one Newton correction, `(φ″(t)t − φ′(t))/t³`,
    /// taken as zero at `t = 0`.
    pub fn newton_weight(&self, t: f64) -> f64 {
        if t > 0.0 {
            (self.ddphi(t) * t - self.dphi(t)) / (t * t * t)
        } else {
            0.0
        }
    }

    /// Shifted N-function `(φ_a(t), φ′_a(t))` with `φ′_a(t) = t φ′(a∨t)/(a∨t)`.
    /// The value is obtained by adaptive quadrature of `φ′_a`; `a = 0` returns
    /// `(φ(t), φ′(t))` directly.
    pub fn eval_shifted(&self, a: f64, t: f64) -> Result<(f64, f64), NFuncError> {
        if !(a >= 0.0) {
            return Err(NFuncError::Domain(a));
        }
        if !(t >= 0.0) {
            return Err(NFuncError::Domain(t));
        }
        if a == 0.0 {
            return Ok((self.phi(t), self.dphi(t)));
        }
        let dshift = |s: f64| s * self.secant(a.max(s));
        // the integrand has a kink at s = a
        let value = if t <= a {
            0.5 * t * t * self.secant(a)
        } else {
            0.5 * a * a * self.secant(a) + adaptive_simpson(&dshift, a, t, 1e-12)
        };
        Ok((value, dshift(t)))
    }
}

#[derive(Clone, Copy)]
enum Branch {
    Lower,
    Power,
    Upper,
}

/// Adaptive Simpson quadrature with absolute tolerance `tol` scaled by the
/// magnitude of the coarse estimate.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    simpson_step(f, a, b, fa, fm, fb, whole, tol * scale, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}
