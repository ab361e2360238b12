//! Stationary problems behind the well-posedness of the closed-loop target
//! system: the sign graph with its resolvent, Yosida approximation and Moreau
//! envelope; the regularized boundary-value problems solved for every
//! `sigma > 0`; the `sigma -> 0` limit and the inclusion check; monotonicity
//! of the target operator; and the convex functionals whose minimizers are
//! the regularized solutions.
//!
//! All BVPs are discretized on `N + 1` uniform nodes with the 3-point second
//! difference and a ghost node at `x = L` that carries `s = q'(L)`:
//! `-(2 (q_{N-1} - q_N + dx s) / dx^2) + (1+d)^2 q_N = F_N`. With this
//! closure the discrete functionals are exactly stationary at the discrete
//! solution, so their directional derivatives vanish to rounding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{deriv1, deriv2, nodes, trapz_dot};
use crate::transform::BoundaryCase;

/// Closed interval `[lo, hi]` of the sign graph at `x`.
pub fn sign_set(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (1.0, 1.0)
    } else if x < 0.0 {
        (-1.0, -1.0)
    } else {
        (-1.0, 1.0)
    }
}

/// Resolvent `J_sigma = (I + sigma sign)^{-1}` (soft threshold).
pub fn resolvent_point(x: f64, sigma: f64) -> f64 {
    if x > sigma {
        x - sigma
    } else if x < -sigma {
        x + sigma
    } else {
        0.0
    }
}

/// Yosida approximation `alpha_sigma = (x - J_sigma(x)) / sigma`.
pub fn yosida(x: f64, sigma: f64) -> f64 {
    // clamp form of the same map, exact at saturation
    (x / sigma).clamp(-1.0, 1.0)
}

/// Moreau envelope of `|x|`: `sigma/2 alpha_sigma^2 + |J_sigma(x)|`.
pub fn moreau(x: f64, sigma: f64) -> f64 {
    let a = yosida(x, sigma);
    0.5 * sigma * a * a + resolvent_point(x, sigma).abs()
}

/// Data of one regularized stationary problem `(I + A_sigma)(q, l) = (m, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventProblem {
    pub case: BoundaryCase,
    pub len: f64,
    /// Position data on the grid, `m[0] = 0`.
    pub m: Vec<f64>,
    /// Velocity data on the grid.
    pub n: Vec<f64>,
    pub d: f64,
    #[serde(rename = "P")]
    pub p_bound: f64,
    #[serde(rename = "hL")]
    pub h_l: f64,
    pub sigma: f64,
}

impl ResolventProblem {
    pub fn intervals(&self) -> usize {
        self.m.len() - 1
    }

    pub fn dx(&self) -> f64 {
        self.len / self.intervals() as f64
    }

    pub fn with_sigma(&self, sigma: f64) -> Self {
        Self { sigma, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.len() != self.n.len() {
            return Err(Error::Grid(format!("m has {} samples, n has {}", self.m.len(), self.n.len())));
        }
        if self.m.len() < 9 {
            return Err(Error::Grid(format!("resolvent problems need N >= 8, got {}", self.m.len().saturating_sub(1))));
        }
        let scale = self.data_scale();
        if self.m[0].abs() > 1e-12 * scale {
            return Err(Error::Precondition(format!("m(0) must vanish, got {:e}", self.m[0])));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Parameter(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.len > 0.0 && self.d > 0.0 && self.p_bound >= 0.0 && self.h_l > 0.0) {
            return Err(Error::Parameter("need L > 0, d > 0, P >= 0 and h(L) > 0".into()));
        }
        if self.m.iter().chain(&self.n).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite data".into()));
        }
        Ok(())
    }

    /// `max(1, |m|_inf, |n|_inf)`.
    pub fn data_scale(&self) -> f64 {
        self.m.iter().chain(&self.n).fold(1.0_f64, |a, v| a.max(v.abs()))
    }

    /// Right-hand side `n + (1 + 2d) m`.
    pub fn forcing(&self) -> Vec<f64> {
        let c = 1.0 + 2.0 * self.d;
        self.m.iter().zip(&self.n).map(|(m, n)| n + c * m).collect()
    }

    fn k2(&self) -> f64 {
        (1.0 + self.d) * (1.0 + self.d)
    }

    /// Ghost-node boundary slope implied by the node-`N` equation.
    fn slope_at_l(&self, q: &[f64], f_n: f64) -> f64 {
        let n = q.len() - 1;
        let h = self.dx();
        (q[n] - q[n - 1]) / h + 0.5 * h * (self.k2() * q[n] - f_n)
    }

    /// Argument of the sign graph for a state with end value `q_l` and
    /// slope `s`.
    pub fn sign_argument(&self, q_l: f64, s: f64) -> f64 {
        match self.case {
            BoundaryCase::Dd => s,
            BoundaryCase::Dn => (1.0 + self.d) * q_l - self.m[self.intervals()],
        }
    }

    /// Regularized boundary residual; zero at a solution.
    pub fn boundary_residual(&self, q_l: f64, s: f64) -> f64 {
        let b = yosida(self.sign_argument(q_l, s), self.sigma);
        let m_l = self.m[self.intervals()];
        match self.case {
            BoundaryCase::Dd => (1.0 + self.d) * q_l - m_l + self.d * self.h_l * self.p_bound * b,
            BoundaryCase::Dn => s + self.h_l * self.p_bound * b,
        }
    }
}

/// Solution of one regularized problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedSolution {
    pub sigma: f64,
    pub q: Vec<f64>,
    /// `q'(L)` from the ghost-node closure.
    pub qp_l: f64,
    pub bc_residual: f64,
    /// Sign argument and `b = alpha_sigma(argument)`.
    pub argument: f64,
    pub b: f64,
    /// Max interior residual of the 3-point scheme.
    pub interior_residual: f64,
    pub norm_h2: f64,
}

impl RegularizedSolution {
    pub fn q_l(&self) -> f64 {
        *self.q.last().expect("non-empty solution")
    }

    /// Velocity component `l = q - m` of the resolvent pair.
    pub fn velocity(&self, prob: &ResolventProblem) -> Vec<f64> {
        self.q.iter().zip(&prob.m).map(|(q, m)| q - m).collect()
    }
}

/// Discrete `||q||^2 + ||q'||^2 + ||q''||^2`, square-rooted.
pub fn norm_h2(q: &[f64], dx: f64) -> f64 {
    let d1 = deriv1(q, dx);
    let d2 = deriv2(q, dx);
    (trapz_dot(q, q, dx) + trapz_dot(&d1, &d1, dx) + trapz_dot(&d2, &d2, dx)).sqrt()
}

/// March `q_{i+1} = 2 q_i - q_{i-1} + dx^2 ((1+d)^2 q_i - F_i)` from
/// `q_0 = 0` and the given `q_1`.
fn march(q1: f64, f: Option<&[f64]>, k2: f64, n: usize, h: f64) -> Vec<f64> {
    let mut q = vec![0.0; n + 1];
    q[1] = q1;
    for i in 1..n {
        let fi = f.map_or(0.0, |f| f[i]);
        q[i + 1] = 2.0 * q[i] - q[i - 1] + h * h * (k2 * q[i] - fi);
    }
    q
}

const BC_TOL: f64 = 1e-10;

/// Shooting: the interior recurrence is linear, so `q` is affine in the
/// free slope `q'(0)`, and so is the sign argument. The solve is
/// parametrised by the argument `t` itself, which keeps `alpha_sigma(t)`
/// exact even when `1/sigma` is large. The boundary residual
/// `R(t) = A0 + A1 t + c alpha_sigma(t)` is increasing; its root is
/// bracketed, bisected, and then solved exactly on the piece of
/// `alpha_sigma` that contains it.
pub fn solve_regularized(prob: &ResolventProblem) -> Result<RegularizedSolution> {
    prob.validate()?;
    let n = prob.intervals();
    let h = prob.dx();
    let k2 = prob.k2();
    let f = prob.forcing();
    let d = prob.d;
    let m_l = prob.m[n];
    // q = qa + g qb with g the slope at 0
    let qa = march(0.0, Some(&f), k2, n, h);
    let qb = march(h, None, k2, n, h);
    let (qa_l, qb_l) = (qa[n], qb[n]);
    let sa = prob.slope_at_l(&qa, f[n]);
    let sb = prob.slope_at_l(&qb, 0.0);
    // g as a function of the argument t
    let g_of = |t: f64| match prob.case {
        BoundaryCase::Dd => (t - sa) / sb,
        BoundaryCase::Dn => ((t + m_l) / (1.0 + d) - qa_l) / qb_l,
    };
    let c = match prob.case {
        BoundaryCase::Dd => d * prob.h_l * prob.p_bound,
        BoundaryCase::Dn => prob.h_l * prob.p_bound,
    };
    // affine part of the residual
    let affine = |t: f64| {
        let g = g_of(t);
        match prob.case {
            BoundaryCase::Dd => (1.0 + d) * (qa_l + g * qb_l) - m_l,
            BoundaryCase::Dn => sa + g * sb,
        }
    };
    let sigma = prob.sigma;
    let resid = |t: f64| affine(t) + c * yosida(t, sigma);
    let a0 = affine(0.0);
    let a1 = affine(1.0) - a0;
    if !(a1 > 0.0) || !a1.is_finite() {
        return Err(Error::NoBracket { lo: f64::NAN, hi: f64::NAN });
    }

    let scale = prob.data_scale();
    let (mut lo, mut hi) = (-scale, scale);
    let mut expansions = 0;
    while !(resid(lo) <= 0.0 && resid(hi) >= 0.0) {
        expansions += 1;
        if expansions > 200 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NoBracket { lo, hi });
        }
        if resid(lo) > 0.0 {
            lo *= 2.0;
        }
        if resid(hi) < 0.0 {
            hi *= 2.0;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if resid(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mid = 0.5 * (lo + hi);
    let exact = if mid > sigma {
        -(a0 + c) / a1
    } else if mid < -sigma {
        -(a0 - c) / a1
    } else {
        -a0 / (a1 + c / sigma)
    };
    let t = if resid(exact).abs() <= resid(mid).abs() { exact } else { mid };

    let g = g_of(t);
    let q: Vec<f64> = qa.iter().zip(&qb).map(|(a, b)| a + g * b).collect();
    let (q_l, qp_l) = match prob.case {
        BoundaryCase::Dd => (qa_l + g * qb_l, t),
        BoundaryCase::Dn => ((t + m_l) / (1.0 + d), sa + g * sb),
    };
    let bc_residual = prob.boundary_residual(q_l, qp_l).abs();
    if !(bc_residual <= BC_TOL) {
        return Err(Error::Tolerance { residual: bc_residual, tol: BC_TOL });
    }
    let mut q = q;
    q[n] = q_l;
    let interior_residual = (1..n)
        .map(|i| ((-(q[i + 1] - 2.0 * q[i] + q[i - 1]) / (h * h) + k2 * q[i] - f[i]) / scale).abs())
        .fold(0.0, f64::max);
    Ok(RegularizedSolution {
        sigma,
        norm_h2: norm_h2(&q, h),
        b: yosida(t, sigma),
        q,
        qp_l,
        bc_residual,
        argument: t,
        interior_residual,
    })
}

/// One row of a sigma sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    #[serde(rename = "qL")]
    pub q_l: f64,
    #[serde(rename = "qpL")]
    pub qp_l: f64,
    pub b: f64,
    pub bc_residual: f64,
    #[serde(rename = "norm_H2")]
    pub norm_h2: f64,
}

/// The default schedule `1e-1, 1e-2, ..., 1e-6`.
pub fn default_sigmas() -> Vec<f64> {
    (1..=6).map(|k| 10f64.powi(-k)).collect()
}

/// Result of a sigma sweep with its limit checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventLimit {
    pub rows: Vec<SweepRow>,
    /// Solution at the smallest sigma.
    pub q: Vec<f64>,
    pub b: f64,
    pub argument: f64,
    /// Largest relative change of `qL`, `qpL`, `b` between the last two sigmas.
    pub cauchy_ratio: f64,
    pub inclusion_ok: bool,
    pub h2_bound_ok: bool,
}

pub const CAUCHY_TOL: f64 = 0.1;

/// Is `b` in `sign(argument)` up to the tolerance policy?
pub fn inclusion_holds(argument: f64, b: f64, scale: f64) -> bool {
    let tol_arg = 1e-6 * scale.max(1.0);
    if argument.abs() > tol_arg {
        (b - argument.signum()).abs() <= 1e-3
    } else {
        b.abs() <= 1.0 + 1e-9
    }
}

/// Solve for every sigma (sorted decreasing) and check the limit.
///
/// Convergence is judged by the relative change between the last two sigmas,
/// normalised by `max(|x|, data scale)` for `qL` and `qpL` and by 1 for `b`.
pub fn resolvent_limit(prob: &ResolventProblem, sigmas: &[f64]) -> Result<ResolventLimit> {
    if sigmas.len() < 2 {
        return Err(Error::Parameter("a sigma sweep needs at least two values".into()));
    }
    let mut sig = sigmas.to_vec();
    if sig.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!("sigmas must be positive and finite: {sigmas:?}")));
    }
    sig.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::with_capacity(sig.len());
    let mut last = None;
    for &s in &sig {
        let sol = solve_regularized(&prob.with_sigma(s))?;
        rows.push(SweepRow {
            sigma: s,
            q_l: sol.q_l(),
            qp_l: sol.qp_l,
            b: sol.b,
            bc_residual: sol.bc_residual,
            norm_h2: sol.norm_h2,
        });
        last = Some(sol);
    }
    let sol = last.expect("non-empty sweep");
    let scale = prob.data_scale();
    let k = rows.len() - 1;
    let (a, z) = (&rows[k - 1], &rows[k]);
    let rel = |x1: f64, x0: f64, s: f64| (x1 - x0).abs() / x1.abs().max(s);
    let cauchy_ratio = rel(z.q_l, a.q_l, scale).max(rel(z.qp_l, a.qp_l, scale)).max(rel(z.b, a.b, 1.0));
    if !(cauchy_ratio < CAUCHY_TOL) {
        return Err(Error::Convergence(format!(
            "sigma sweep not Cauchy: relative change {cauchy_ratio:.3e} between sigma = {:e} and {:e}",
            a.sigma, z.sigma
        )));
    }
    // the norm may settle but must not keep growing as sigma shrinks
    let early = rows[..k - 1].iter().map(|r| r.norm_h2).fold(0.0, f64::max);
    let h2_bound_ok = k < 2 || a.norm_h2.max(z.norm_h2) <= 1.01 * early + 1e-12;
    Ok(ResolventLimit {
        inclusion_ok: inclusion_holds(sol.argument, sol.b, scale),
        b: sol.b,
        argument: sol.argument,
        q: sol.q,
        rows,
        cauchy_ratio,
        h2_bound_ok,
    })
}

/// Write sweep rows as CSV.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "sigma,qL,qpL,b,bc_residual,norm_H2")?;
    for r in rows {
        writeln!(w, "{:e},{:e},{:e},{:e},{:e},{:e}", r.sigma, r.q_l, r.qp_l, r.b, r.bc_residual, r.norm_h2)?;
    }
    Ok(())
}

/// Discrete functional whose minimizer is the regularized solution.
///
/// DD: `1/2 sum c_i (D2 q_i)^2 + (1+d)^2/2 int q'^2 + sum c_i D2 q_i F_i`
/// plus `(1+d) (-m(L) s + d hL P phi_sigma(s))`, with `s` the ghost-node slope
/// and `D2 q_N` taken through the ghost node.
/// DN: `1/2 int q'^2 + 1/2 int ((1+d)^2 q^2 - 2 q F)` plus
/// `hL P / (1+d) phi_sigma((1+d) q(L) - m(L))`.
pub fn functional_j(q: &[f64], prob: &ResolventProblem) -> Result<f64> {
    prob.validate()?;
    if q.len() != prob.m.len() {
        return Err(Error::Grid(format!("q has {} samples, data {}", q.len(), prob.m.len())));
    }
    if q[0].abs() > 1e-12 * prob.data_scale() {
        return Err(Error::Precondition(format!("q(0) must vanish, got {:e}", q[0])));
    }
    let n = prob.intervals();
    let h = prob.dx();
    let k2 = prob.k2();
    let f = prob.forcing();
    let grad_sq: f64 = q.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0]) / h).sum();
    let m_l = prob.m[n];
    let d = prob.d;
    Ok(match prob.case {
        BoundaryCase::Dd => {
            let s = prob.slope_at_l(q, f[n]);
            let mut quad = 0.0;
            for i in 1..=n {
                let (d2, c) = if i < n {
                    ((q[i + 1] - 2.0 * q[i] + q[i - 1]) / (h * h), 1.0)
                } else {
                    (2.0 * (q[n - 1] - q[n] + h * s) / (h * h), 0.5)
                };
                quad += c * h * (0.5 * d2 * d2 + d2 * f[i]);
            }
            quad + 0.5 * k2 * grad_sq + (1.0 + d) * (-m_l * s + d * prob.h_l * prob.p_bound * moreau(s, prob.sigma))
        }
        BoundaryCase::Dn => {
            let mut mass = 0.0;
            for i in 1..=n {
                let c = if i < n { 1.0 } else { 0.5 };
                mass += c * h * (k2 * q[i] * q[i] - 2.0 * q[i] * f[i]);
            }
            let arg = (1.0 + d) * q[n] - m_l;
            0.5 * grad_sq + 0.5 * mass + prob.h_l * prob.p_bound / (1.0 + d) * moreau(arg, prob.sigma)
        }
    })
}

/// Change of the sign argument along direction `rho` (linear part only).
pub fn argument_rate(prob: &ResolventProblem, rho: &[f64]) -> f64 {
    let n = rho.len() - 1;
    match prob.case {
        BoundaryCase::Dd => prob.slope_at_l(rho, 0.0),
        BoundaryCase::Dn => (1.0 + prob.d) * rho[n],
    }
}

/// Shrink the boundary component of `rho` so that steps up to `delta_max`
/// keep the sign argument on the current smooth piece of `phi_sigma`.
/// Directional derivatives across a kink are only first-order accurate,
/// which would blur the `O(delta^2)` check.
pub fn project_direction(prob: &ResolventProblem, argument: f64, rho: &[f64], delta_max: f64) -> Vec<f64> {
    let len = prob.len;
    let x = nodes(len, prob.intervals());
    // unit-rate boundary direction
    let basis: Vec<f64> = x.iter().map(|&xi| xi / len).collect();
    let unit = argument_rate(prob, &basis);
    let room = 0.5 * (argument.abs() - prob.sigma).abs() / delta_max;
    let rate = argument_rate(prob, rho);
    let target = rate.clamp(-room, room);
    let c = (target - rate) / unit;
    rho.iter().zip(&basis).map(|(r, b)| r + c * b).collect()
}

/// Smooth random profile on the grid vanishing at 0: a few random sine modes
/// `sin((k - 1/2) pi x / L)` plus a random linear term.
pub fn random_smooth<R: Rng + ?Sized>(rng: &mut R, intervals: usize, len: f64, amp: f64) -> Vec<f64> {
    let x = nodes(len, intervals);
    let coef: Vec<f64> = (0..4).map(|_| rng.gen_range(-amp..=amp)).collect();
    let lin = rng.gen_range(-amp..=amp);
    x.iter()
        .map(|&xi| {
            let modes: f64 = coef
                .iter()
                .enumerate()
                .map(|(k, c)| c * ((k as f64 + 0.5) * std::f64::consts::PI * xi / len).sin())
                .sum();
            modes + lin * xi / len
        })
        .collect()
}

/// State pair `(q, l)` of the target operator's domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorPair {
    pub q: Vec<f64>,
    pub l: Vec<f64>,
}

/// Boundary parameters of the target operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorParams {
    pub case: BoundaryCase,
    pub len: f64,
    pub d: f64,
    #[serde(rename = "P")]
    pub p_bound: f64,
    #[serde(rename = "hL")]
    pub h_l: f64,
}

/// `<A p1 - A p2, p1 - p2>_X` with `A (q, l) = (-l, -q'' + 2 d l + d^2 q)` and
/// the energy inner product `int q1' q2' + int (l1 + d q1)(l2 + d q2)`.
pub fn monotonicity_gap(p1: &OperatorPair, p2: &OperatorPair, op: &OperatorParams) -> Result<f64> {
    let n = p1.q.len();
    if [p1.l.len(), p2.q.len(), p2.l.len()].iter().any(|&k| k != n) || n < 9 {
        return Err(Error::Grid("operator pairs must share a grid with N >= 8".into()));
    }
    let h = op.len / (n - 1) as f64;
    let d = op.d;
    let q: Vec<f64> = p1.q.iter().zip(&p2.q).map(|(a, b)| a - b).collect();
    let l: Vec<f64> = p1.l.iter().zip(&p2.l).map(|(a, b)| a - b).collect();
    let qx = deriv1(&q, h);
    let qxx = deriv2(&q, h);
    let lx = deriv1(&l, h);
    // A applied to the difference
    let a_pos: Vec<f64> = l.iter().map(|v| -v).collect();
    let a_vel: Vec<f64> = (0..n).map(|i| -qxx[i] + 2.0 * d * l[i] + d * d * q[i]).collect();
    let a_posx: Vec<f64> = lx.iter().map(|v| -v).collect();
    let a_mix: Vec<f64> = (0..n).map(|i| a_vel[i] + d * a_pos[i]).collect();
    let mix: Vec<f64> = (0..n).map(|i| l[i] + d * q[i]).collect();
    Ok(trapz_dot(&a_posx, &qx, h) + trapz_dot(&a_mix, &mix, h))
}

/// Random pair satisfying the boundary inclusion of the operator domain with
/// `q(0) = l(0) = 0`. With probability `stick` the sign argument is forced
/// to zero and the selection drawn from `[-1, 1]`.
pub fn random_admissible_pair<R: Rng + ?Sized>(
    rng: &mut R,
    op: &OperatorParams,
    intervals: usize,
    amp: f64,
    stick: f64,
) -> OperatorPair {
    let len = op.len;
    let h = len / intervals as f64;
    let x = nodes(len, intervals);
    let mut q = random_smooth(rng, intervals, len, amp);
    let mut l = random_smooth(rng, intervals, len, amp);
    let slope_end = |q: &[f64]| deriv1(q, h)[intervals];
    // psi = x (x - L) / L has psi(L) = 0 and psi'(L) = 1
    let psi: Vec<f64> = x.iter().map(|&xi| xi * (xi - len) / len).collect();
    let psi_slope = slope_end(&psi);
    let sticking = rng.gen_bool(stick.clamp(0.0, 1.0));
    let c = op.h_l * op.p_bound;
    match op.case {
        BoundaryCase::Dd => {
            if sticking {
                let k = slope_end(&q) / psi_slope;
                q.iter_mut().zip(&psi).for_each(|(v, p)| *v -= k * p);
            }
            let s = slope_end(&q);
            let theta = if sticking || s == 0.0 { rng.gen_range(-1.0..=1.0) } else { s.signum() };
            // l(L) + d q(L) = -d hL P theta
            let want = -op.d * c * theta - op.d * q[intervals];
            let k = want - l[intervals];
            l.iter_mut().zip(&x).for_each(|(v, xi)| *v += k * xi / len);
        }
        BoundaryCase::Dn => {
            if sticking {
                let k = -(l[intervals] + op.d * q[intervals]);
                l.iter_mut().zip(&x).for_each(|(v, xi)| *v += k * xi / len);
            }
            let arg = l[intervals] + op.d * q[intervals];
            let theta = if sticking || arg == 0.0 { rng.gen_range(-1.0..=1.0) } else { arg.signum() };
            // q'(L) = -hL P theta, leaving q(L) and l untouched
            let k = (-c * theta - slope_end(&q)) / psi_slope;
            q.iter_mut().zip(&psi).for_each(|(v, p)| *v += k * p);
        }
    }
    OperatorPair { q, l }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn problem(case: BoundaryCase, m: Vec<f64>, n: Vec<f64>, sigma: f64) -> ResolventProblem {
        ResolventProblem { case, len: 1.0, m, n, d: 1.0, p_bound: 1.0, h_l: 1.0, sigma }
    }

    fn constant_n(case: BoundaryCase, intervals: usize, value: f64, sigma: f64) -> ResolventProblem {
        problem(case, vec![0.0; intervals + 1], vec![value; intervals + 1], sigma)
    }

    fn random_data(case: BoundaryCase, intervals: usize, seed: u64) -> ResolventProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_smooth(&mut rng, intervals, 1.0, 1.0);
        let n = random_smooth(&mut rng, intervals, 1.0, 2.0);
        problem(case, m, n, 1e-2)
    }

    #[test]
    fn scalar_map_examples() {
        let s = 0.3;
        assert!((yosida(2.0 * s, s) - 1.0).abs() < 1e-15);
        assert!((resolvent_point(2.0 * s, s) - s).abs() < 1e-15);
        assert!((moreau(2.0 * s, s) - 1.5 * s).abs() < 1e-15);
        assert_eq!(sign_set(0.0), (-1.0, 1.0));
        assert_eq!(sign_set(-2.0), (-1.0, -1.0));
        assert_eq!(moreau(0.0, s), 0.0);
    }

    proptest! {
        #[test]
        fn resolvent_identity(x in -10.0..10.0f64, e in -6.0..1.0f64) {
            let s = 10f64.powf(e);
            prop_assert!((resolvent_point(x, s) + s * yosida(x, s) - x).abs() <= 1e-12 * (1.0 + x.abs()));
        }

        #[test]
        fn yosida_monotone_lipschitz(x in -3.0..3.0f64, dx in 0.0..1.0f64, e in -4.0..0.0f64) {
            let s = 10f64.powf(e);
            let (a, b) = (yosida(x, s), yosida(x + dx, s));
            prop_assert!(b >= a);
            prop_assert!(b - a <= dx / s * (1.0 + 1e-12) + 1e-12);
            prop_assert!(a.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn moreau_derivative_is_yosida() {
        let s = 0.01;
        let step = 1e-5 * s;
        for k in 0..=200 {
            let x = -5.0 * s + 10.0 * s * k as f64 / 200.0;
            let fd = (moreau(x + step, s) - moreau(x - step, s)) / (2.0 * step);
            assert!((fd - yosida(x, s)).abs() < 1e-5, "x = {x}: {fd} vs {}", yosida(x, s));
        }
    }

    // d = L = 1, m = 0, n = 4: q = 1 + A e^{2x} + B e^{-2x}, A + B = -1. With a
    // large sigma the boundary relation is linear, a q(1) + b q'(1) = 0.
    fn linear_regime_exact(case: BoundaryCase, sigma: f64) -> impl Fn(f64) -> f64 {
        let k = 1.0 / sigma;
        let (a, b) = match case {
            BoundaryCase::Dd => (2.0, k),
            BoundaryCase::Dn => (2.0 * k, 1.0),
        };
        let (e2, ei) = (2f64.exp(), (-2f64).exp());
        let c1 = a * e2 + 2.0 * b * e2;
        let c2 = a * ei - 2.0 * b * ei;
        let aa = (c2 - a) / (c1 - c2);
        let bb = -1.0 - aa;
        move |x: f64| 1.0 + aa * (2.0 * x).exp() + bb * (-2.0 * x).exp()
    }

    #[test]
    fn linear_regime_matches_closed_form_at_second_order() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let exact = linear_regime_exact(case, 10.0);
            let err = |n: usize| {
                let sol = solve_regularized(&constant_n(case, n, 4.0, 10.0)).unwrap();
                assert!(sol.argument.abs() <= 10.0);
                assert!(sol.bc_residual <= 1e-10);
                assert!(sol.interior_residual < 1e-9);
                let x = nodes(1.0, n);
                x.iter().zip(&sol.q).map(|(x, q)| (q - exact(*x)).abs()).fold(0.0, f64::max)
            };
            let (e1, e2) = (err(50), err(100));
            assert!(e1 < 1e-3, "{case:?}: {e1}");
            let order = (e1 / e2).log2();
            assert!(order > 1.8, "{case:?}: order {order}");
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let prob = constant_n(case, 40, 0.0, 1e-2);
            let lim = resolvent_limit(&prob, &default_sigmas()).unwrap();
            assert!(lim.q.iter().all(|v| v.abs() < 1e-14));
            assert!(lim.inclusion_ok && lim.h2_bound_ok);
            assert_eq!(lim.b, 0.0);
            assert_eq!(functional_j(&lim.q, &prob).unwrap(), 0.0);
        }
    }

    #[test]
    fn sweeps_converge_and_satisfy_the_inclusion() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            for prob in [constant_n(case, 100, 3.0, 1.0), random_data(case, 100, 7)] {
                let lim = resolvent_limit(&prob, &default_sigmas()).unwrap();
                assert_eq!(lim.rows.len(), 6);
                assert!(lim.rows.iter().all(|r| r.bc_residual <= 1e-10));
                assert!(lim.cauchy_ratio < CAUCHY_TOL, "{case:?}: {}", lim.cauchy_ratio);
                assert!(lim.inclusion_ok, "{case:?}: arg {} b {}", lim.argument, lim.b);
                assert!(lim.h2_bound_ok);
            }
        }
    }

    #[test]
    fn strong_forcing_saturates_the_selection() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            // pick the sign of n that drives the argument positive
            let probe = solve_regularized(&constant_n(case, 80, 50.0, 1e-3)).unwrap();
            let value = 50.0 * probe.argument.signum();
            let lim = resolvent_limit(&constant_n(case, 80, value, 1.0), &default_sigmas()).unwrap();
            assert!(lim.argument > 1e-3, "{case:?}: {}", lim.argument);
            assert_eq!(lim.b, 1.0);
            assert!(lim.inclusion_ok);
        }
    }

    #[test]
    fn functional_is_stationary_at_the_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            for sigma in [1e-1, 1e-3] {
                let prob = random_data(case, 64, 3).with_sigma(sigma);
                let sol = solve_regularized(&prob).unwrap();
                let j0 = functional_j(&sol.q, &prob).unwrap();
                for _ in 0..20 {
                    let raw = random_smooth(&mut rng, 64, 1.0, 1.0);
                    let rho = project_direction(&prob, sol.argument, &raw, 1e-3);
                    let dj = |delta: f64| {
                        let q: Vec<f64> = sol.q.iter().zip(&rho).map(|(q, r)| q + delta * r).collect();
                        functional_j(&q, &prob).unwrap() - j0
                    };
                    let (a, b) = (dj(1e-3), dj(1e-4));
                    assert!(a >= -1e-12, "{case:?} sigma {sigma}: J decreased by {a}");
                    let ratio = a / b;
                    assert!((ratio - 100.0).abs() < 5.0, "{case:?} sigma {sigma}: ratio {ratio} ({a}, {b})");
                }
            }
        }
    }

    #[test]
    fn functional_is_convex_along_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let prob = random_data(case, 50, 9);
            for _ in 0..50 {
                let q1 = random_smooth(&mut rng, 50, 1.0, 2.0);
                let q2 = random_smooth(&mut rng, 50, 1.0, 2.0);
                let mid: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| 0.5 * (a + b)).collect();
                let (j1, j2, jm) = (
                    functional_j(&q1, &prob).unwrap(),
                    functional_j(&q2, &prob).unwrap(),
                    functional_j(&mid, &prob).unwrap(),
                );
                assert!(jm <= 0.5 * (j1 + j2) + 1e-10 * (j1.abs() + j2.abs()));
            }
        }
    }

    fn op(case: BoundaryCase) -> OperatorParams {
        OperatorParams { case, len: 1.0, d: 1.5, p_bound: 2.0, h_l: 0.8 }
    }

    #[test]
    fn identical_pairs_have_zero_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = op(BoundaryCase::Dd);
        let p = random_admissible_pair(&mut rng, &o, 100, 1.0, 0.3);
        assert_eq!(monotonicity_gap(&p, &p, &o).unwrap(), 0.0);
    }

    #[test]
    fn random_admissible_pairs_have_nonnegative_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let o = op(case);
            let mut lowest = f64::INFINITY;
            for _ in 0..200 {
                let p1 = random_admissible_pair(&mut rng, &o, 200, 1.0, 0.3);
                let p2 = random_admissible_pair(&mut rng, &o, 200, 1.0, 0.3);
                lowest = lowest.min(monotonicity_gap(&p1, &p2, &o).unwrap());
            }
            assert!(lowest >= -1e-6, "{case:?}: {lowest}");
        }
    }

    #[test]
    fn interior_pairs_gap_is_the_dissipation() {
        // compact support: the boundary term vanishes and the gap is
        // d (|q'|^2 + |l + d q|^2)
        let n = 400;
        let x = nodes(1.0, n);
        let bump = |c: f64, x: f64| if (0.2..0.8).contains(&x) { c * ((x - 0.2) * (0.8 - x)).powi(4) * 1e3 } else { 0.0 };
        let q: Vec<f64> = x.iter().map(|&x| bump(1.0, x)).collect();
        let l: Vec<f64> = x.iter().map(|&x| bump(-0.7, x)).collect();
        let zero = OperatorPair { q: vec![0.0; n + 1], l: vec![0.0; n + 1] };
        let p = OperatorPair { q: q.clone(), l: l.clone() };
        let o = op(BoundaryCase::Dn);
        let h = 1.0 / n as f64;
        let qx = deriv1(&q, h);
        let mix: Vec<f64> = l.iter().zip(&q).map(|(l, q)| l + o.d * q).collect();
        let expect = o.d * (trapz_dot(&qx, &qx, h) + trapz_dot(&mix, &mix, h));
        let gap = monotonicity_gap(&p, &zero, &o).unwrap();
        assert!((gap - expect).abs() < 1e-3 * expect, "{gap} vs {expect}");
    }

    #[test]
    fn errors() {
        let mut bad = constant_n(BoundaryCase::Dd, 20, 1.0, 0.0);
        assert!(matches!(solve_regularized(&bad), Err(Error::Parameter(_))));
        bad.sigma = 0.1;
        bad.m[0] = 1.0;
        assert!(matches!(solve_regularized(&bad), Err(Error::Precondition(_))));
        let short = constant_n(BoundaryCase::Dn, 4, 1.0, 0.1);
        assert!(matches!(solve_regularized(&short), Err(Error::Grid(_))));
        let ok = constant_n(BoundaryCase::Dn, 20, 1.0, 0.1);
        assert!(matches!(resolvent_limit(&ok, &[0.1]), Err(Error::Parameter(_))));
        assert!(matches!(resolvent_limit(&ok, &[0.1, -1.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn sweep_csv_columns() {
        let lim = resolvent_limit(&constant_n(BoundaryCase::Dd, 20, 1.0, 0.1), &default_sigmas()).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&lim.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sigma,qL,qpL,b,bc_residual,norm_H2\n"));
        assert_eq!(text.lines().count(), 7);
    }
}
