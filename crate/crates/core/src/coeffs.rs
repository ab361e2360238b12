//! Plant coefficients and the scalar ingredients of the backstepping kernels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cumtrapz, deriv1, deriv2, interp_uniform, nodes};

/// Plant data `lambda`, `beta` (and optionally the first-order coefficient
/// `alpha`) sampled at the nodes `x_i = i L / N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientProfile {
    pub len: f64,
    pub n: usize,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    /// Neumann boundary coefficient, `u_x(L) = gamma u(L) + ...`.
    pub gamma: f64,
}

impl CoefficientProfile {
    pub fn new(len: f64, lambda: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let n = lambda.len().saturating_sub(1);
        let p = Self { len, n, lambda, beta, alpha: None, gamma: 0.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn with_alpha(mut self, alpha: Vec<f64>) -> Result<Self> {
        self.alpha = Some(alpha);
        self.validate()?;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    /// Constant coefficients.
    pub fn constant(len: f64, n: usize, lambda: f64, beta: f64) -> Result<Self> {
        Self::new(len, vec![lambda; n + 1], vec![beta; n + 1])
    }

    /// Samples closed-form coefficient functions on the node grid.
    pub fn from_fns(
        len: f64,
        n: usize,
        lambda: impl Fn(f64) -> f64,
        beta: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let x = nodes(len, n);
        Self::new(len, x.iter().map(|&x| lambda(x)).collect(), x.iter().map(|&x| beta(x)).collect())
    }

    /// The profile `(lambda, beta) = (-d, -d^2)`, for which plant and target coincide.
    pub fn identity_for(len: f64, n: usize, d: f64) -> Result<Self> {
        Self::constant(len, n, -d, -d * d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.len > 0.0 && self.len.is_finite()) {
            return Err(Error::Parameter(format!("length must be positive, got {}", self.len)));
        }
        if self.n < 8 {
            return Err(Error::Grid(format!("profile needs N >= 8 intervals, got {}", self.n)));
        }
        let want = self.n + 1;
        let check = |name: &str, v: &[f64]| -> Result<()> {
            if v.len() != want {
                return Err(Error::Grid(format!("{name} has {} entries, expected {want}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parameter(format!("{name} contains non-finite values")));
            }
            Ok(())
        };
        check("lambda", &self.lambda)?;
        check("beta", &self.beta)?;
        if let Some(a) = &self.alpha {
            check("alpha", a)?;
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.len / self.n as f64
    }

    pub fn x(&self) -> Vec<f64> {
        nodes(self.len, self.n)
    }

    /// Re-samples onto `n` intervals with four-point Lagrange interpolation
    /// (exact at shared nodes).
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n == self.n {
            return Ok(self.clone());
        }
        let dx = self.dx();
        let x = nodes(self.len, n);
        let map = |v: &[f64]| x.iter().map(|&x| interp_uniform(v, dx, x)).collect::<Vec<_>>();
        let p = Self {
            len: self.len,
            n,
            lambda: map(&self.lambda),
            beta: map(&self.beta),
            alpha: self.alpha.as_deref().map(map),
            gamma: self.gamma,
        };
        p.validate()?;
        Ok(p)
    }

    /// Removes the first-order term `alpha u_x` with the multiplier
    /// `exp(1/2 int_0^x alpha)`. Returns the normalized profile and the
    /// multiplier at every node.
    pub fn remove_first_order(&self) -> Result<(Self, Vec<f64>)> {
        let alpha = self
            .alpha
            .as_ref()
            .ok_or_else(|| Error::Precondition("remove_first_order needs an alpha profile".into()))?;
        let dx = self.dx();
        let dalpha = deriv1(alpha, dx);
        let beta = self
            .beta
            .iter()
            .zip(alpha.iter().zip(&dalpha))
            .map(|(b, (a, da))| -0.5 * da - 0.25 * a * a + b)
            .collect();
        let scale = cumtrapz(alpha, dx).into_iter().map(|i| (0.5 * i).exp()).collect();
        let out = Self {
            len: self.len,
            n: self.n,
            lambda: self.lambda.clone(),
            beta,
            alpha: None,
            gamma: 0.5 * alpha[self.n],
        };
        Ok((out, scale))
    }

    /// Compares `alpha'` estimated at spacing `dx` and `2 dx` on the interior
    /// nodes. Returns `false` when the two estimates disagree by more than 10%
    /// anywhere the derivative is significant. `None` without alpha.
    pub fn alpha_derivative_consistent(&self) -> Option<bool> {
        let alpha = self.alpha.as_ref()?;
        let dx = self.dx();
        let fine = deriv1(alpha, dx);
        let scale = fine.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
        let ok = (2..self.n - 1).all(|i| {
            let coarse = (alpha[i + 2] - alpha[i - 2]) / (4.0 * dx);
            let diff = (coarse - fine[i]).abs();
            diff <= 0.1 * fine[i].abs().max(1e-3 * scale)
        });
        Some(ok)
    }
}

/// `a`, `h`, `h'`, `m` and `rho_1..rho_5` sampled on the profile grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacksteppingScalars {
    pub d: f64,
    pub len: f64,
    pub n: usize,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub a: Vec<f64>,
    /// `int_0^x a`.
    pub int_a: Vec<f64>,
    pub h: Vec<f64>,
    pub hprime: Vec<f64>,
    pub m: Vec<f64>,
    pub rho: [Vec<f64>; 5],
}

impl BacksteppingScalars {
    pub fn dx(&self) -> f64 {
        self.len / self.n as f64
    }

    /// Value of the diagonal data of `s`, `-sinh(int_0^x a)`.
    pub fn s_diag(&self) -> Vec<f64> {
        self.int_a.iter().map(|v| -v.sinh()).collect()
    }

    /// CSV with columns `x, lambda, beta, a, h, m, rho1..rho5`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,lambda,beta,a,h,m,rho1,rho2,rho3,rho4,rho5")?;
        for (i, x) in nodes(self.len, self.n).iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                x,
                self.lambda[i],
                self.beta[i],
                self.a[i],
                self.h[i],
                self.m[i],
                self.rho[0][i],
                self.rho[1][i],
                self.rho[2][i],
                self.rho[3][i],
                self.rho[4][i]
            )?;
        }
        Ok(())
    }
}

/// Evaluates the scalar backstepping ingredients for decay rate `d`.
pub fn eval_scalars(p: &CoefficientProfile, d: f64) -> Result<BacksteppingScalars> {
    if p.alpha.is_some() {
        return Err(Error::Precondition(
            "remove the first-order term before evaluating backstepping scalars".into(),
        ));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Parameter(format!("decay rate must be positive, got {d}")));
    }
    p.validate()?;
    let dx = p.dx();
    let lam = &p.lambda;
    let beta = &p.beta;
    let a: Vec<f64> = lam.iter().map(|l| l + d).collect();
    let int_a = cumtrapz(&a, dx);
    let h: Vec<f64> = int_a.iter().map(|v| v.cosh()).collect();
    let hprime: Vec<f64> = a.iter().zip(&int_a).map(|(a, v)| a * v.sinh()).collect();
    // the +d^2 and -d^2 of the integrand cancel
    let integrand: Vec<f64> = lam.iter().zip(beta).map(|(l, b)| -l * l - b).collect();
    let int_m = cumtrapz(&integrand, dx);
    let a0 = a[0];
    let m = (0..=p.n)
        .map(|i| {
            0.5 * int_a[i].sinh() * (2.0 * lam[i] + a[i] + a0) + 0.5 * h[i] * int_m[i]
        })
        .collect();
    let dlam = deriv1(lam, dx);
    let ddlam = deriv2(lam, dx);
    let rho1 = lam.iter().map(|l| 2.0 * l + 2.0 * d).collect();
    let rho2 = beta.iter().map(|b| d * d + b).collect();
    let rho3 = (0..=p.n)
        .map(|i| 2.0 * lam[i] * beta[i] + 2.0 * ddlam[i] + 2.0 * d * beta[i])
        .collect();
    let rho4 = dlam.iter().map(|v| 4.0 * v).collect();
    let rho5 = lam
        .iter()
        .zip(beta)
        .map(|(l, b)| 4.0 * l * l + 4.0 * d * l + d * d + b)
        .collect();
    Ok(BacksteppingScalars {
        d,
        len: p.len,
        n: p.n,
        lambda: lam.clone(),
        beta: beta.clone(),
        a,
        int_a,
        h,
        hprime,
        m,
        rho: [rho1, rho2, rho3, rho4, rho5],
    })
}
