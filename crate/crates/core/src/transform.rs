//! The backstepping map `(u, u_t) -> (w, w_t)`, its discrete inverse, the
//! boundary traces of the target state and the two control components.
//!
//! ```text
//! w   = h u - int_0^x k(x,y) u dy - int_0^x s(x,y) u_t dy
//! w_t = h u_t + s_y(x,x) u - s(x,x) u_x - int_0^x (2 lambda s + k) u_t dy - int_0^x (beta s + s_yy) u dy
//! ```
//!
//! Integrals use the trapezoid rule on the state grid. `u_x` inside `w_t` is a
//! backward difference so that node `i` only reads nodes `<= i`; the inverse is
//! then an exact forward substitution with a 2x2 solve per node.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelPair;
use crate::numerics::{backward_end, sat, trapz_dot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    Plant,
    Target,
}

/// Boundary configuration at `x = L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundaryCase {
    #[serde(rename = "DD", alias = "dd")]
    Dd,
    #[serde(rename = "DN", alias = "dn")]
    Dn,
}

impl std::fmt::Display for BoundaryCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundaryCase::Dd => "DD",
            BoundaryCase::Dn => "DN",
        })
    }
}

impl std::str::FromStr for BoundaryCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DD" => Ok(BoundaryCase::Dd),
            "DN" => Ok(BoundaryCase::Dn),
            _ => Err(Error::Parameter(format!("unknown boundary case `{s}` (expected DD or DN)"))),
        }
    }
}

/// Position and velocity on the nodes `x_i = i L / N` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveState {
    pub t: f64,
    pub pos: Vec<f64>,
    pub vel: Vec<f64>,
    pub frame: Frame,
}

impl WaveState {
    pub fn new(t: f64, pos: Vec<f64>, vel: Vec<f64>, frame: Frame) -> Result<Self> {
        if pos.len() != vel.len() || pos.len() < 2 {
            return Err(Error::Contract(format!(
                "state arrays must share a length >= 2 (pos {}, vel {})",
                pos.len(),
                vel.len()
            )));
        }
        let scale = pos.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if pos[0].abs() > 1e-12 * scale {
            return Err(Error::Contract(format!("pos[0] must vanish, got {:e}", pos[0])));
        }
        Ok(Self { t, pos, vel, frame })
    }

    pub fn zero(n: usize, frame: Frame) -> Self {
        Self { t: 0.0, pos: vec![0.0; n + 1], vel: vec![0.0; n + 1], frame }
    }

    /// Number of intervals.
    pub fn n(&self) -> usize {
        self.pos.len() - 1
    }

    fn expect(&self, frame: Frame) -> Result<()> {
        if self.frame != frame {
            return Err(Error::Contract(format!("expected a {frame:?} state, got {:?}", self.frame)));
        }
        Ok(())
    }
}

/// Both control components and the regularized sign actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlValue {
    pub u1: f64,
    pub u2: f64,
    pub sign_arg: f64,
    pub selection: f64,
}

/// Kernel data restricted to a state grid of `N` intervals. The kernel grid
/// must have `M = r N` intervals for an integer `r`; nodes are subsampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transform {
    pub n: usize,
    pub len: f64,
    pub d: f64,
    pub h: Vec<f64>,
    pub hprime: Vec<f64>,
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub s_diag: Vec<f64>,
    pub sy_diag: Vec<f64>,
    /// Ragged rows `(i, j)`, `j <= i`, same layout as the kernel grid.
    pub k: Vec<f64>,
    pub s: Vec<f64>,
    pub syy: Vec<f64>,
    pub k_l: Vec<f64>,
    pub s_l: Vec<f64>,
    pub kx_l: Vec<f64>,
    pub sx_l: Vec<f64>,
    pub k_ll: f64,
    pub s_ll: f64,
    pub h_l: f64,
    pub hp_l: f64,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl Transform {
    pub fn new(kp: &KernelPair, n: usize) -> Result<Self> {
        let m = kp.grid.m;
        if n == 0 || !m.is_multiple_of(n) {
            return Err(Error::Grid(format!(
                "state grid N = {n} must divide the kernel grid M = {m}"
            )));
        }
        if n < 2 {
            return Err(Error::Grid("state grid needs at least 2 intervals".into()));
        }
        let r = m / n;
        let sub = |v: &[f64]| (0..=n).map(|i| v[r * i]).collect::<Vec<_>>();
        let mut k = Vec::with_capacity((n + 1) * (n + 2) / 2);
        let mut s = Vec::with_capacity(k.capacity());
        let mut syy = Vec::with_capacity(k.capacity());
        for i in 0..=n {
            for j in 0..=i {
                k.push(kp.k_at(r * i, r * j));
                s.push(kp.s_at(r * i, r * j));
                syy.push(kp.syy_at(r * i, r * j));
            }
        }
        let t = &kp.traces;
        Ok(Self {
            n,
            len: kp.grid.len,
            d: kp.d,
            h: sub(&kp.h),
            hprime: sub(&kp.hprime),
            lambda: sub(&kp.lambda),
            beta: sub(&kp.beta),
            s_diag: (0..=n).map(|i| kp.s_at(r * i, r * i)).collect(),
            sy_diag: sub(&kp.sy_diag),
            k,
            s,
            syy,
            k_l: sub(&t.k_l),
            s_l: sub(&t.s_l),
            kx_l: sub(&t.kx_l),
            sx_l: sub(&t.sx_l),
            k_ll: t.k_ll,
            s_ll: t.s_ll,
            h_l: t.h_l,
            hp_l: t.hp_l,
        })
    }

    pub fn dx(&self) -> f64 {
        self.len / self.n as f64
    }

    fn check(&self, st: &WaveState, frame: Frame) -> Result<()> {
        st.expect(frame)?;
        if st.n() != self.n {
            return Err(Error::Grid(format!("state has N = {}, transform expects {}", st.n(), self.n)));
        }
        Ok(())
    }

    /// Weights `c` of the backward difference `u_x(x_i) ~ sum_k c_k u_{i-k}`.
    fn back_weights(&self, i: usize) -> [f64; 3] {
        let dx = self.dx();
        match i {
            0 => [0.0; 3],
            1 => [1.0 / dx, -1.0 / dx, 0.0],
            _ => [1.5 / dx, -2.0 / dx, 0.5 / dx],
        }
    }

    /// Trapezoid weight of node `j` in `int_0^{x_i}`.
    #[inline]
    fn tw(&self, i: usize, j: usize) -> f64 {
        if i == 0 {
            0.0
        } else if j == 0 || j == i {
            0.5 * self.dx()
        } else {
            self.dx()
        }
    }

    /// `(w_i, w_t,i)` from plant data, reading nodes `0..=i` only.
    fn forward_node(&self, u: &[f64], v: &[f64], i: usize) -> (f64, f64) {
        let mut iw = 0.0;
        let mut iwt = 0.0;
        for j in 0..=i {
            let wt = self.tw(i, j);
            if wt == 0.0 {
                continue;
            }
            let id = tri(i, j);
            let (kk, ss) = (self.k[id], self.s[id]);
            iw += wt * (kk * u[j] + ss * v[j]);
            iwt += wt * ((2.0 * self.lambda[j] * ss + kk) * v[j] + (self.beta[j] * ss + self.syy[id]) * u[j]);
        }
        let c = self.back_weights(i);
        let mut ux = 0.0;
        for (q, ck) in c.iter().enumerate() {
            if q <= i {
                ux += ck * u[i - q];
            }
        }
        let w = self.h[i] * u[i] - iw;
        let wt = self.h[i] * v[i] + self.sy_diag[i] * u[i] - self.s_diag[i] * ux - iwt;
        (w, wt)
    }

    pub fn forward(&self, st: &WaveState) -> Result<WaveState> {
        self.check(st, Frame::Plant)?;
        let (mut w, mut wt) = (vec![0.0; self.n + 1], vec![0.0; self.n + 1]);
        for i in 0..=self.n {
            (w[i], wt[i]) = self.forward_node(&st.pos, &st.vel, i);
        }
        Ok(WaveState { t: st.t, pos: w, vel: wt, frame: Frame::Target })
    }

    /// Forward substitution: at node `i` the map is affine in `(u_i, v_i)`
    /// given the earlier nodes.
    pub fn inverse(&self, st: &WaveState) -> Result<WaveState> {
        self.check(st, Frame::Target)?;
        let n = self.n;
        let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
        for i in 0..=n {
            u[i] = 0.0;
            v[i] = 0.0;
            let (w0, wt0) = self.forward_node(&u, &v, i);
            u[i] = 1.0;
            let (wu, wtu) = self.forward_node(&u, &v, i);
            u[i] = 0.0;
            v[i] = 1.0;
            let (wv, wtv) = self.forward_node(&u, &v, i);
            v[i] = 0.0;
            // columns of the local 2x2 block
            let (a11, a21) = (wu - w0, wtu - wt0);
            let (a12, a22) = (wv - w0, wtv - wt0);
            let (r1, r2) = (st.pos[i] - w0, st.vel[i] - wt0);
            let det = a11 * a22 - a12 * a21;
            if !(det.abs() > 1e-14) {
                return Err(Error::Numerical(format!("singular inverse block at node {i} (det {det:e})")));
            }
            u[i] = (r1 * a22 - a12 * r2) / det;
            v[i] = (a11 * r2 - a21 * r1) / det;
        }
        u[0] = 0.0;
        Ok(WaveState { t: st.t, pos: u, vel: v, frame: Frame::Plant })
    }

    /// `w_t(t, L)`.
    pub fn trace_u3(&self, st: &WaveState) -> Result<f64> {
        self.check(st, Frame::Plant)?;
        Ok(self.forward_node(&st.pos, &st.vel, self.n).1)
    }

    /// `w(t, L)`.
    pub fn trace_u4_dn(&self, st: &WaveState) -> Result<f64> {
        self.check(st, Frame::Plant)?;
        Ok(self.forward_node(&st.pos, &st.vel, self.n).0)
    }

    /// `w_x(t, L)`.
    pub fn trace_u4_dd(&self, st: &WaveState) -> Result<f64> {
        self.check(st, Frame::Plant)?;
        let (u, v) = (&st.pos, &st.vel);
        let n = self.n;
        let dx = self.dx();
        let ux = backward_end(u, dx);
        Ok(self.hp_l * u[n] + self.h_l * ux
            - self.s_ll * v[n]
            - self.k_ll * u[n]
            - trapz_dot(&self.sx_l, v, dx)
            - trapz_dot(&self.kx_l, u, dx))
    }

    pub fn control_u1_dd(&self, st: &WaveState) -> Result<f64> {
        self.check(st, Frame::Plant)?;
        let dx = self.dx();
        Ok((trapz_dot(&self.k_l, &st.pos, dx) + trapz_dot(&self.s_l, &st.vel, dx)) / self.h_l)
    }

    pub fn control_u1_dn(&self, st: &WaveState, gamma: f64) -> Result<f64> {
        self.check(st, Frame::Plant)?;
        let (u, v) = (&st.pos, &st.vel);
        let n = self.n;
        let dx = self.dx();
        let bracket = -self.hp_l * u[n] + self.k_ll * u[n] + trapz_dot(&self.kx_l, u, dx) + self.s_ll * v[n]
            + trapz_dot(&self.sx_l, v, dx);
        Ok(-gamma * u[n] + bracket / self.h_l)
    }

    pub fn traces(&self, case: BoundaryCase, st: &WaveState) -> Result<(f64, f64)> {
        let u3 = self.trace_u3(st)?;
        let u4 = match case {
            BoundaryCase::Dd => self.trace_u4_dd(st)?,
            BoundaryCase::Dn => self.trace_u4_dn(st)?,
        };
        Ok((u3, u4))
    }

    /// Full feedback `U1 + U2` for a plant state.
    pub fn control(&self, case: BoundaryCase, st: &WaveState, gamma: f64, p_bound: f64, eps: f64) -> Result<ControlValue> {
        let (u3, u4) = self.traces(case, st)?;
        let u1 = match case {
            BoundaryCase::Dd => self.control_u1_dd(st)?,
            BoundaryCase::Dn => self.control_u1_dn(st, gamma)?,
        };
        let mut cv = control_u2(case, u3, u4, self.d, p_bound, self.h_l, eps)?;
        cv.u1 = u1;
        Ok(cv)
    }
}

/// Estimated operator norms of the transform and its inverse on the energy
/// space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorNorms {
    /// `||Pi^{-1}||`.
    pub c1: f64,
    /// `||Pi||`.
    pub c2: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl Transform {
    /// Matrix of the discrete map on the degrees of freedom
    /// `(u_1..u_N, v_0..v_N)`.
    fn dof_matrix(&self, inverse: bool) -> Result<DMatrix<f64>> {
        let n = self.n;
        let dim = 2 * n + 1;
        let mut out = DMatrix::zeros(dim, dim);
        let frame = if inverse { Frame::Target } else { Frame::Plant };
        for c in 0..dim {
            let mut st = WaveState::zero(n, frame);
            if c < n {
                st.pos[c + 1] = 1.0;
            } else {
                st.vel[c - n] = 1.0;
            }
            let img = if inverse { self.inverse(&st)? } else { self.forward(&st)? };
            for r in 0..n {
                out[(r, c)] = img.pos[r + 1];
            }
            for r in 0..=n {
                out[(n + r, c)] = img.vel[r];
            }
        }
        Ok(out)
    }

    /// Map `G` with `|G z|_2^2 = int u_x^2 + int (v + d u)^2`, where `u_x` is
    /// the forward difference on each cell and the second integral uses the
    /// trapezoid rule. `G` is invertible on the degrees of freedom.
    fn gram_map(&self) -> DMatrix<f64> {
        let n = self.n;
        let dx = self.dx();
        let mut g = DMatrix::zeros(2 * n + 1, 2 * n + 1);
        let sq = dx.sqrt();
        for i in 0..n {
            // (u_{i+1} - u_i) / sqrt(dx); u_0 is fixed at zero
            g[(i, i)] = 1.0 / sq;
            if i > 0 {
                g[(i, i - 1)] = -1.0 / sq;
            }
        }
        for j in 0..=n {
            let wt = if j == 0 || j == n { 0.5 * dx } else { dx }.sqrt();
            g[(n + j, n + j)] = wt;
            if j > 0 {
                g[(n + j, j - 1)] = wt * self.d;
            }
        }
        g
    }

    /// Power iteration on `B^T B` for `B = G Pi G^{-1}` and `G Pi^{-1} G^{-1}`,
    /// stopped when the norm estimate changes by less than `rel_tol`.
    pub fn operator_norms(&self, rel_tol: f64, max_iter: usize) -> Result<OperatorNorms> {
        let g = self.gram_map();
        let ginv = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("energy-norm Gram map is singular".into()))?;
        let fwd = &g * self.dof_matrix(false)? * &ginv;
        let inv = &g * self.dof_matrix(true)? * &ginv;
        let (c2, it2, ok2) = spectral_norm(&fwd, rel_tol, max_iter);
        let (c1, it1, ok1) = spectral_norm(&inv, rel_tol, max_iter);
        Ok(OperatorNorms { c1, c2, iterations: it1.max(it2), converged: ok1 && ok2 })
    }
}

/// Largest singular value by power iteration on `B^T B`.
fn spectral_norm(b: &DMatrix<f64>, rel_tol: f64, max_iter: usize) -> (f64, usize, bool) {
    let bt = b.transpose();
    let btb = &bt * b;
    let n = b.ncols();
    // deterministic start with every component present
    let mut x = DVector::from_fn(n, |i, _| 1.0 + 0.5 * ((i as f64) * 0.7).sin());
    x /= x.norm();
    let mut est = 0.0;
    for it in 1..=max_iter {
        let y = &btb * &x;
        let lam = x.dot(&y);
        let ny = y.norm();
        if ny == 0.0 {
            return (0.0, it, true);
        }
        x = y / ny;
        let sigma = lam.max(0.0).sqrt();
        if it > 1 && (sigma - est).abs() <= rel_tol * sigma {
            return (sigma, it, true);
        }
        est = sigma;
    }
    (est, max_iter, false)
}

/// The discontinuous component `U2` with the sign regularized as
/// `sat(arg / eps)`. The returned `u1` is zero.
pub fn control_u2(case: BoundaryCase, u3: f64, u4: f64, d: f64, p_bound: f64, h_l: f64, eps: f64) -> Result<ControlValue> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    if !(p_bound >= 0.0) {
        return Err(Error::Parameter(format!("P must be nonnegative, got {p_bound}")));
    }
    let (sign_arg, base) = match case {
        BoundaryCase::Dd => (u4, -u3 / (d * h_l)),
        BoundaryCase::Dn => (u3 + d * u4, 0.0),
    };
    let selection = sat(sign_arg / eps);
    Ok(ControlValue { u1: 0.0, u2: base - p_bound * selection, sign_arg, selection })
}

/// Default sign regularization `1e-3 max(P, 1)`.
pub fn default_eps(p_bound: f64) -> f64 {
    1e-3 * p_bound.max(1.0)
}
