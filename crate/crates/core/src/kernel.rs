//! Gain kernels `k`, `s` on the triangle `0 <= y <= x <= L`.
//!
//! The coupled Goursat problem
//!
//! ```text
//! k_xx - k_yy = rho1 s_yy + rho2 k + rho3 s + rho4 s_y,   k(x,x) = m(x),            k(x,0) = 0
//! s_xx - s_yy = rho1 k + rho5 s,                          s(x,x) = -sinh(int a),    s(x,0) = 0
//! ```
//!
//! is solved by successive approximation in the characteristic coordinates
//! `xi = x + y`, `eta = x - y`, where both operators become `4 d_xi d_eta`.
//! The characteristic lattice has spacing `h = L / M` in `xi` and `eta`; it
//! contains every node of the `(M+1)`-per-side triangular grid plus the
//! staggered cell centres. Each sweep integrates cell by cell from the
//! diagonal (`eta = 0`) and the base (`xi = eta`) with the forcing of the
//! previous iterate averaged over the four cell corners.

use std::io::Write;

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::coeffs::{eval_scalars, BacksteppingScalars, CoefficientProfile};
use crate::error::{Error, Result};
use crate::numerics::{cumtrapz, deriv1, deriv2, interp_uniform, nodes};

/// Uniform triangular grid `{(x_i, y_j) : 0 <= j <= i <= M}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularGrid {
    pub len: f64,
    pub m: usize,
}

impl TriangularGrid {
    pub fn new(len: f64, m: usize) -> Result<Self> {
        if !(len > 0.0) {
            return Err(Error::Parameter(format!("triangle side must be positive, got {len}")));
        }
        if m < 2 {
            return Err(Error::Grid(format!("triangle needs at least 2 intervals, got {m}")));
        }
        Ok(Self { len, m })
    }

    pub fn dx(&self) -> f64 {
        self.len / self.m as f64
    }

    pub fn node_count(&self) -> usize {
        (self.m + 1) * (self.m + 2) / 2
    }

    /// Row-major ragged index of node `(i, j)`, `j <= i`.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i <= self.m);
        i * (i + 1) / 2 + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 200 }
    }
}

/// Boundary traces of the kernels at `x = L` used by the feedback laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTraces {
    pub y: Vec<f64>,
    pub k_l: Vec<f64>,
    pub s_l: Vec<f64>,
    pub kx_l: Vec<f64>,
    pub sx_l: Vec<f64>,
    pub syy_l: Vec<f64>,
    pub k_ll: f64,
    pub s_ll: f64,
    /// `s_y(L, L)`.
    pub sy_ll: f64,
    pub h_l: f64,
    pub hp_l: f64,
}

impl KernelTraces {
    /// CSV: a `# name=value` header block with the endpoint scalars, then
    /// columns `y, kL, sL, kxL, sxL, syyL`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# kLL={}", self.k_ll)?;
        writeln!(w, "# sLL={}", self.s_ll)?;
        writeln!(w, "# syLL={}", self.sy_ll)?;
        writeln!(w, "# hL={}", self.h_l)?;
        writeln!(w, "# hpL={}", self.hp_l)?;
        writeln!(w, "y,kL,sL,kxL,sxL,syyL")?;
        for j in 0..self.y.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.y[j], self.k_l[j], self.s_l[j], self.kx_l[j], self.sx_l[j], self.syy_l[j]
            )?;
        }
        Ok(())
    }
}

/// Solved kernels together with everything the transform and the feedback
/// laws read from them. Node-wise arrays live on the triangular grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelPair {
    pub grid: TriangularGrid,
    pub d: f64,
    pub k: Vec<f64>,
    pub s: Vec<f64>,
    /// `s_yy` at every node, differentiated along lines of constant `x`.
    pub syy: Vec<f64>,
    /// `s_y(x_i, x_i)` on the diagonal.
    pub sy_diag: Vec<f64>,
    /// Plant and scalar data at the grid nodes `x_i`.
    pub lambda: Vec<f64>,
    pub beta: Vec<f64>,
    pub h: Vec<f64>,
    pub hprime: Vec<f64>,
    pub traces: KernelTraces,
    /// `(rk, rs)` from [`kernel_residual`].
    pub residual: (f64, f64),
    pub iterations: usize,
    /// Max-norm update of the final sweep.
    pub last_update: f64,
    /// Gradient `(s_x, s_y)` at the corner `(L, L)` from a local quadratic fit.
    pub corner_grad_s: (f64, f64),
}

/// Scalars resampled onto the fine `x` grid of spacing `h / 2`.
struct FineScalars {
    a: Vec<f64>,
    int_a: Vec<f64>,
    m: Vec<f64>,
    rho: [Vec<f64>; 5],
}

impl FineScalars {
    fn new(sc: &BacksteppingScalars, m: usize) -> Self {
        let dx = sc.dx();
        let xf = nodes(sc.len, 2 * m);
        let map = |v: &[f64]| xf.iter().map(|&x| interp_uniform(v, dx, x)).collect::<Vec<_>>();
        Self {
            a: map(&sc.a),
            int_a: map(&sc.int_a),
            m: map(&sc.m),
            rho: [map(&sc.rho[0]), map(&sc.rho[1]), map(&sc.rho[2]), map(&sc.rho[3]), map(&sc.rho[4])],
        }
    }
}

/// Dense storage for the characteristic lattice `(p, q)`, `0 <= q <= p`,
/// `p + q <= 2M`. Lattice point `(p, q)` sits at `x = (p+q) h/2`,
/// `y = (p-q) h/2`.
struct Lattice {
    m: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Lattice {
    fn new(m: usize) -> Self {
        Self { m, cols: m + 1, data: vec![0.0; (2 * m + 1) * (m + 1)] }
    }

    #[inline]
    fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.cols + q]
    }

    #[inline]
    fn set(&mut self, p: usize, q: usize, v: f64) {
        self.data[p * self.cols + q] = v;
    }

    #[inline]
    fn qmax(&self, p: usize) -> usize {
        p.min(2 * self.m - p)
    }

    /// Values on the line of constant fine-x index `a`, ordered by
    /// increasing `y`, as `(q, value)` pairs.
    fn line(&self, a: usize) -> Vec<(usize, f64)> {
        (0..=a / 2).rev().map(|q| (q, self.get(a - q, q))).collect()
    }
}

/// Solves the kernel equations for the given scalars. The scalars may live on
/// any grid over the same interval; they are interpolated to the lattice
/// (exactly when their grid contains it).
pub fn solve_kernels(
    scalars: &BacksteppingScalars,
    grid: &TriangularGrid,
    opts: &KernelOptions,
) -> Result<KernelPair> {
    if (scalars.len - grid.len).abs() > 1e-12 * grid.len {
        return Err(Error::Grid(format!(
            "kernel grid length {} does not match profile length {}",
            grid.len, scalars.len
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(Error::Parameter("kernel tolerance and max_iter must be positive".into()));
    }
    let m = grid.m;
    let h = grid.dx();
    let fine = FineScalars::new(scalars, m);

    let mut k = Lattice::new(m);
    let mut s = Lattice::new(m);
    for p in 0..=2 * m {
        k.set(p, 0, fine.m[p]);
        s.set(p, 0, -fine.int_a[p].sinh());
    }
    for p in 0..=m {
        k.set(p, p, 0.0);
        s.set(p, p, 0.0);
    }
    // the corner (0,0) belongs to both edges; m(0) = 0 and sinh(0) = 0
    k.set(0, 0, 0.0);
    s.set(0, 0, 0.0);

    let mut fk = Lattice::new(m);
    let mut fs = Lattice::new(m);
    let mut iterations = 0;
    let mut last_update = f64::INFINITY;
    while iterations < opts.max_iter {
        iterations += 1;
        forcing(&k, &s, &fine, h, &mut fk, &mut fs);
        let mut update = 0.0_f64;
        for p in 1..=2 * m {
            for q in 1..=k.qmax(p) {
                if q >= p {
                    continue;
                }
                let avg = |f: &Lattice| {
                    0.25 * (f.get(p, q) + f.get(p - 1, q) + f.get(p, q - 1) + f.get(p - 1, q - 1))
                };
                let cell = 0.25 * h * h;
                let kn = k.get(p - 1, q) + k.get(p, q - 1) - k.get(p - 1, q - 1) + cell * avg(&fk);
                let sn = s.get(p - 1, q) + s.get(p, q - 1) - s.get(p - 1, q - 1) + cell * avg(&fs);
                if !kn.is_finite() || !sn.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite kernel value at lattice point ({p}, {q}) in sweep {iterations}"
                    )));
                }
                update = update.max((kn - k.get(p, q)).abs()).max((sn - s.get(p, q)).abs());
                k.set(p, q, kn);
                s.set(p, q, sn);
            }
        }
        last_update = update;
        if update > 1e150 {
            return Err(Error::Divergence(format!("update {update:e} in sweep {iterations}")));
        }
        if update < opts.tol {
            break;
        }
    }
    if last_update >= opts.tol {
        return Err(Error::IterationLimit { iterations, last_update });
    }

    // node values
    let mut kn = vec![0.0; grid.node_count()];
    let mut sn = vec![0.0; grid.node_count()];
    let mut syy = vec![0.0; grid.node_count()];
    let (_, syy_lat) = s_derivatives(&s, h);
    for i in 0..=m {
        for j in 0..=i {
            let id = grid.idx(i, j);
            kn[id] = k.get(i + j, i - j);
            sn[id] = s.get(i + j, i - j);
            syy[id] = syy_lat.get(i + j, i - j);
        }
    }

    // s_y on the diagonal from the characteristic identity
    // (s_x - s_y)(x,x) = a(0) + int_0^x (rho1 k + rho5 s)(t,t) dt
    let hf = 0.5 * h;
    let diag_force: Vec<f64> = (0..=2 * m)
        .map(|p| fine.rho[0][p] * fine.m[p] - fine.rho[4][p] * fine.int_a[p].sinh())
        .collect();
    let int_force = cumtrapz(&diag_force, hf);
    let sy_fine: Vec<f64> = (0..=2 * m)
        .map(|p| 0.5 * (-fine.a[p] * fine.int_a[p].cosh() - fine.a[0] - int_force[p]))
        .collect();
    let sy_diag: Vec<f64> = (0..=m).map(|i| sy_fine[2 * i]).collect();

    // plant and scalar data at the nodes
    let sdx = scalars.dx();
    let xs = nodes(grid.len, m);
    let at = |v: &[f64]| xs.iter().map(|&x| interp_uniform(v, sdx, x)).collect::<Vec<_>>();
    let lambda = at(&scalars.lambda);
    let beta = at(&scalars.beta);
    let hv = at(&scalars.h);
    let hp = at(&scalars.hprime);

    let traces = build_traces(&k, &s, grid, &kn, &sn, &syy, sy_diag[m], hv[m], hp[m])?;
    let corner_grad_s = quad_fit_gradient(&s, 2 * m, 0, h, &CORNER_STENCIL)?;

    let mut kp = KernelPair {
        grid: *grid,
        d: scalars.d,
        k: kn,
        s: sn,
        syy,
        sy_diag,
        lambda,
        beta,
        h: hv,
        hprime: hp,
        traces,
        residual: (0.0, 0.0),
        iterations,
        last_update,
        corner_grad_s,
    };
    let res = kernel_residual(&kp, scalars);
    kp.residual = (res.rk, res.rs);
    Ok(kp)
}

/// Evaluates the scalars for `profile` and solves the kernels on `m`
/// intervals per side.
pub fn solve_for_profile(
    profile: &CoefficientProfile,
    d: f64,
    m: usize,
    opts: &KernelOptions,
) -> Result<KernelPair> {
    let sc = eval_scalars(profile, d)?;
    let grid = TriangularGrid::new(profile.len, m)?;
    solve_kernels(&sc, &grid, opts)
}

/// `s_y` and `s_yy` at every lattice point, differentiated along lines of
/// constant `x`. Lines with fewer than four points (next to the origin) are
/// filled by quadratic extrapolation along constant `y` from longer lines.
fn s_derivatives(s: &Lattice, h: f64) -> (Lattice, Lattice) {
    let m = s.m;
    let mut sy = Lattice::new(m);
    let mut syy = Lattice::new(m);
    for a in 0..=2 * m {
        let line = s.line(a);
        let vals: Vec<f64> = line.iter().map(|(_, v)| *v).collect();
        let d1 = deriv1(&vals, h);
        let d2 = deriv2(&vals, h);
        for (t, (q, _)) in line.iter().enumerate() {
            sy.set(a - q, *q, d1[t]);
            syy.set(a - q, *q, d2[t]);
        }
    }
    if 2 * m >= 12 {
        for a in (0..=SHORT_LINE_MAX).rev() {
            for q in 0..=a / 2 {
                let p = a - q;
                for f in [&mut sy, &mut syy] {
                    let e = 3.0 * f.get(p + 1, q + 1) - 3.0 * f.get(p + 2, q + 2) + f.get(p + 3, q + 3);
                    f.set(p, q, e);
                }
            }
        }
    }
    (sy, syy)
}

/// Largest fine-x index whose constant-`x` line has fewer than four points.
const SHORT_LINE_MAX: usize = 5;

fn forcing(k: &Lattice, s: &Lattice, fine: &FineScalars, h: f64, fk: &mut Lattice, fs: &mut Lattice) {
    let m = k.m;
    let (sy, syy) = s_derivatives(s, h);
    for p in 0..=2 * m {
        for q in 0..=k.qmax(p) {
            let b = p - q;
            let (kv, sv) = (k.get(p, q), s.get(p, q));
            let r = |i: usize| fine.rho[i][b];
            fk.set(p, q, r(0) * syy.get(p, q) + r(1) * kv + r(2) * sv + r(3) * sy.get(p, q));
            fs.set(p, q, r(0) * kv + r(4) * sv);
        }
    }
}

/// Relative lattice offsets `(dp, dq)` used for the quadratic fit at the
/// corner `(L, L)` and at the node just below it.
const CORNER_STENCIL: [(i64, i64); 6] = [(0, 0), (-1, 0), (-2, 0), (-1, 1), (-2, 1), (-2, 2)];
const NEAR_CORNER_STENCIL: [(i64, i64); 6] = [(0, 0), (-1, 0), (-2, 0), (0, -1), (-1, -1), (-1, 1)];

/// Gradient `(f_x, f_y)` at lattice point `(p, q)` from the quadratic in
/// `(xi, eta)` interpolating the six stencil points.
fn quad_fit_gradient(f: &Lattice, p: usize, q: usize, h: f64, stencil: &[(i64, i64); 6]) -> Result<(f64, f64)> {
    let mut a = Matrix6::<f64>::zeros();
    let mut rhs = Vector6::<f64>::zeros();
    for (r, (dp, dq)) in stencil.iter().enumerate() {
        let (u, v) = (*dp as f64, *dq as f64);
        let row = [1.0, u, v, u * u, u * v, v * v];
        for c in 0..6 {
            a[(r, c)] = row[c];
        }
        let pp = (p as i64 + dp) as usize;
        let qq = (q as i64 + dq) as usize;
        rhs[r] = f.get(pp, qq);
    }
    let coef = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular quadratic fit stencil".into()))?;
    let dxi = coef[1] / h;
    let deta = coef[2] / h;
    Ok((dxi + deta, dxi - deta))
}

#[allow(clippy::too_many_arguments)]
fn build_traces(
    k: &Lattice,
    s: &Lattice,
    grid: &TriangularGrid,
    kn: &[f64],
    sn: &[f64],
    syy: &[f64],
    sy_ll: f64,
    h_l: f64,
    hp_l: f64,
) -> Result<KernelTraces> {
    let m = grid.m;
    if m < 4 {
        return Err(Error::Grid(format!("kernel traces need M >= 4, got {m}")));
    }
    let h = grid.dx();
    let mut kx = vec![0.0; m + 1];
    let mut sx = vec![0.0; m + 1];
    let back = |f: &Lattice, p: usize, q: usize| {
        let dxi = (3.0 * f.get(p, q) - 4.0 * f.get(p - 1, q) + f.get(p - 2, q)) / (2.0 * h);
        let deta = (3.0 * f.get(p, q) - 4.0 * f.get(p, q - 1) + f.get(p, q - 2)) / (2.0 * h);
        dxi + deta
    };
    // j = 0 stays zero: both kernels vanish identically along y = 0
    for j in 1..=m - 2 {
        let (p, q) = (m + j, m - j);
        kx[j] = back(k, p, q);
        sx[j] = back(s, p, q);
    }
    kx[m - 1] = quad_fit_gradient(k, 2 * m - 1, 1, h, &NEAR_CORNER_STENCIL)?.0;
    sx[m - 1] = quad_fit_gradient(s, 2 * m - 1, 1, h, &NEAR_CORNER_STENCIL)?.0;
    kx[m] = quad_fit_gradient(k, 2 * m, 0, h, &CORNER_STENCIL)?.0;
    sx[m] = quad_fit_gradient(s, 2 * m, 0, h, &CORNER_STENCIL)?.0;
    let row = |v: &[f64]| (0..=m).map(|j| v[grid.idx(m, j)]).collect::<Vec<_>>();
    let k_l = row(kn);
    let s_l = row(sn);
    Ok(KernelTraces {
        y: nodes(grid.len, m),
        k_ll: k_l[m],
        s_ll: s_l[m],
        k_l,
        s_l,
        kx_l: kx,
        sx_l: sx,
        syy_l: row(syy),
        sy_ll,
        h_l,
        hp_l,
    })
}

/// PDE residuals of a kernel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelResidual {
    pub rk: f64,
    pub rs: f64,
    /// Set when the grid has no interior nodes; both residuals are then `+inf`.
    pub degenerate: bool,
}

/// Max over interior nodes of the kernel PDE residuals, all derivatives by
/// central differences.
pub fn kernel_residual(kp: &KernelPair, scalars: &BacksteppingScalars) -> KernelResidual {
    let g = &kp.grid;
    let m = g.m;
    if m < 4 {
        return KernelResidual { rk: f64::INFINITY, rs: f64::INFINITY, degenerate: true };
    }
    let h = g.dx();
    let h2 = h * h;
    let sdx = scalars.dx();
    let rho: Vec<Vec<f64>> = scalars
        .rho
        .iter()
        .map(|r| (0..=m).map(|j| interp_uniform(r, sdx, j as f64 * h)).collect())
        .collect();
    let (k, s) = (&kp.k, &kp.s);
    let mut rk = 0.0_f64;
    let mut rs = 0.0_f64;
    for i in 2..m {
        for j in 1..i {
            let c = g.idx(i, j);
            let (xp, xm) = (g.idx(i + 1, j), g.idx(i - 1, j));
            let (yp, ym) = (g.idx(i, j + 1), g.idx(i, j - 1));
            let kxx = (k[xp] - 2.0 * k[c] + k[xm]) / h2;
            let kyy = (k[yp] - 2.0 * k[c] + k[ym]) / h2;
            let sxx = (s[xp] - 2.0 * s[c] + s[xm]) / h2;
            let syy = (s[yp] - 2.0 * s[c] + s[ym]) / h2;
            let sy = (s[yp] - s[ym]) / (2.0 * h);
            let ek = kxx - kyy - rho[0][j] * syy - rho[1][j] * k[c] - rho[2][j] * s[c] - rho[3][j] * sy;
            let es = sxx - syy - rho[0][j] * k[c] - rho[4][j] * s[c];
            rk = rk.max(ek.abs());
            rs = rs.max(es.abs());
        }
    }
    KernelResidual { rk, rs, degenerate: false }
}

impl KernelPair {
    pub fn k_at(&self, i: usize, j: usize) -> f64 {
        self.k[self.grid.idx(i, j)]
    }

    pub fn s_at(&self, i: usize, j: usize) -> f64 {
        self.s[self.grid.idx(i, j)]
    }

    pub fn syy_at(&self, i: usize, j: usize) -> f64 {
        self.syy[self.grid.idx(i, j)]
    }

    pub fn traces(&self) -> &KernelTraces {
        &self.traces
    }

    pub fn max_abs(&self) -> (f64, f64) {
        let f = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        (f(&self.k), f(&self.s))
    }

    /// CSV with columns `x, y, k, s`, one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let h = self.grid.dx();
        writeln!(w, "x,y,k,s")?;
        for i in 0..=self.grid.m {
            for j in 0..=i {
                writeln!(w, "{},{},{},{}", i as f64 * h, j as f64 * h, self.k_at(i, j), self.s_at(i, j))?;
            }
        }
        Ok(())
    }
}

/// One row of a grid-refinement study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementRow {
    pub m: usize,
    pub rk: f64,
    pub rs: f64,
    pub iterations: usize,
    /// Observed orders `log2(r(M/2) / r(M))`, absent on the first row.
    pub order_k: Option<f64>,
    pub order_s: Option<f64>,
    /// Set when an observed order falls below 1.5.
    pub low_order: bool,
}

/// Solves on each grid of the ladder and reports residuals with observed
/// convergence orders. `profile_at(n)` supplies the coefficients sampled on
/// `n` intervals; it is called with `n = 2M` so no interpolation of the
/// scalars is involved.
pub fn refinement_study<F>(
    profile_at: F,
    d: f64,
    ladder: &[usize],
    opts: &KernelOptions,
) -> Result<Vec<RefinementRow>>
where
    F: Fn(usize) -> Result<CoefficientProfile>,
{
    let mut rows: Vec<RefinementRow> = Vec::with_capacity(ladder.len());
    for &m in ladder {
        let kp = solve_for_profile(&profile_at(2 * m)?, d, m, opts)?;
        let (rk, rs) = kp.residual;
        let (order_k, order_s) = match rows.last() {
            Some(prev) => (Some((prev.rk / rk).log2()), Some((prev.rs / rs).log2())),
            None => (None, None),
        };
        let low = |o: Option<f64>| o.is_some_and(|o| o.is_finite() && o < 1.5);
        rows.push(RefinementRow {
            m,
            rk,
            rs,
            iterations: kp.iterations,
            order_k,
            order_s,
            low_order: low(order_k) || low(order_s),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_profile_kernel(m: usize) -> KernelPair {
        let p = CoefficientProfile::constant(1.0, 2 * m, 0.0, 0.0).unwrap();
        solve_for_profile(&p, 1.0, m, &KernelOptions::default()).unwrap()
    }

    #[test]
    fn grid_indexing() {
        let g = TriangularGrid::new(1.0, 5).unwrap();
        assert_eq!(g.node_count(), 21);
        assert_eq!(g.idx(0, 0), 0);
        assert_eq!(g.idx(5, 5), 20);
        assert_eq!(g.idx(3, 0), 6);
    }

    #[test]
    fn identity_profile_gives_zero_kernels_in_one_sweep() {
        let d = 1.3;
        let p = CoefficientProfile::identity_for(1.0, 40, d).unwrap();
        let kp = solve_for_profile(&p, d, 20, &KernelOptions::default()).unwrap();
        assert_eq!(kp.iterations, 1);
        assert_eq!(kp.max_abs(), (0.0, 0.0));
        assert_eq!(kp.residual, (0.0, 0.0));
        let t = kp.traces();
        assert!(t.kx_l.iter().chain(&t.sx_l).chain(&t.syy_l).all(|v| *v == 0.0));
        assert_eq!(t.sy_ll, 0.0);
    }

    #[test]
    fn boundary_data_imposed_exactly() {
        let m = 32;
        let p = CoefficientProfile::from_fns(1.0, 2 * m, |x| 0.3 * x, |x| 2.0 + x).unwrap();
        let sc = eval_scalars(&p, 1.0).unwrap();
        let kp = solve_kernels(&sc, &TriangularGrid::new(1.0, m).unwrap(), &KernelOptions::default()).unwrap();
        for i in 0..=m {
            assert_eq!(kp.k_at(i, i), sc.m[2 * i]);
            assert_eq!(kp.s_at(i, i), -sc.int_a[2 * i].sinh());
            assert_eq!(kp.k_at(i, 0), 0.0);
            assert_eq!(kp.s_at(i, 0), 0.0);
        }
        assert_eq!(kp.traces.k_ll, sc.m[2 * m]);
    }

    #[test]
    fn diagonal_derivative_matches_boundary_data() {
        // d/dx s(x,x) = s_x + s_y = -a cosh(int a); for lambda = beta = 0, d = 1: -cosh(1) at x = 1
        let kp = zero_profile_kernel(64);
        let (sx, sy) = kp.corner_grad_s;
        let want = -(1.0_f64).cosh();
        assert!((sx + sy - want).abs() < 1e-3, "{} vs {want}", sx + sy);
        // the characteristic identity and the local fit agree on s_y(L, L)
        assert!((sy - kp.traces.sy_ll).abs() < 1e-3, "{sy} vs {}", kp.traces.sy_ll);
    }

    #[test]
    fn zero_coefficient_diagonal_slope_in_closed_form() {
        // for lambda = beta = 0, d = 1 the identity gives s_y(x,x) = -cosh(x)
        let kp = zero_profile_kernel(32);
        for (i, sy) in kp.sy_diag.iter().enumerate() {
            let x = i as f64 / 32.0;
            assert!((sy + x.cosh()).abs() < 1e-3, "x={x}: {sy}");
        }
    }

    /// k(1, 0.5) for lambda = beta = 0, d = 1, L = 1: Richardson extrapolation
    /// of lattice solves at M = 512 and M = 1024 (they agree with the
    /// M = 256/512 extrapolate to 1.1e-9).
    const K_MID_GOLDEN: f64 = 0.521_095_305_3;

    #[test]
    fn interior_value_matches_golden() {
        let m = 128;
        let kp = zero_profile_kernel(m);
        let v = kp.k_at(m, m / 2);
        assert!((v - K_MID_GOLDEN).abs() < 1e-6, "{v}");
    }

    #[test]
    fn residuals_converge_at_second_order() {
        let p = |n| CoefficientProfile::from_fns(1.0, n, |x| 0.5 * (3.0 * x).sin(), |x| 1.0 + x * x).unwrap();
        let opts = KernelOptions::default();
        let a = solve_for_profile(&p(64), 1.0, 32, &opts).unwrap();
        let b = solve_for_profile(&p(128), 1.0, 64, &opts).unwrap();
        for (ra, rb) in [(a.residual.0, b.residual.0), (a.residual.1, b.residual.1)] {
            let ratio = rb / ra;
            assert!((0.2..0.3).contains(&ratio), "{ratio}");
        }
        assert!(b.iterations <= opts.max_iter);
    }

    #[test]
    fn refinement_study_reports_orders() {
        let p = |n| CoefficientProfile::constant(1.0, n, 1.0, 2.0);
        let rows = refinement_study(p, 1.0, &[32, 64, 128], &KernelOptions::default()).unwrap();
        assert!(rows[0].order_k.is_none());
        for r in &rows[1..] {
            assert!(r.order_k.unwrap() > 1.8 && r.order_s.unwrap() > 1.8, "{r:?}");
            assert!(!r.low_order);
        }
    }

    #[test]
    fn trace_shapes() {
        let kp = zero_profile_kernel(16);
        let t = kp.traces();
        for v in [&t.y, &t.k_l, &t.s_l, &t.kx_l, &t.sx_l, &t.syy_l] {
            assert_eq!(v.len(), 17);
        }
    }

    #[test]
    fn coarse_grids_rejected() {
        let p = CoefficientProfile::constant(1.0, 16, 0.0, 0.0).unwrap();
        assert!(matches!(solve_for_profile(&p, 1.0, 3, &KernelOptions::default()), Err(Error::Grid(_))));
        let sc = eval_scalars(&p, 1.0).unwrap();
        assert!(matches!(
            solve_kernels(&sc, &TriangularGrid::new(2.0, 8).unwrap(), &KernelOptions::default()),
            Err(Error::Grid(_))
        ));
    }

    #[test]
    fn iteration_limit_reported() {
        let p = CoefficientProfile::constant(1.0, 16, 0.0, 0.0).unwrap();
        let opts = KernelOptions { tol: 1e-10, max_iter: 2 };
        assert!(matches!(solve_for_profile(&p, 1.0, 8, &opts), Err(Error::IterationLimit { iterations: 2, .. })));
    }

    #[test]
    fn residual_detects_planted_perturbation() {
        // zero kernels solve the identity profile exactly; a bump of eps at one
        // node leaves a residual of eps / h^2 at its x-neighbours
        let (m, d) = (16, 1.0);
        let p = CoefficientProfile::identity_for(1.0, 2 * m, d).unwrap();
        let sc = eval_scalars(&p, d).unwrap();
        let mut kp = solve_kernels(&sc, &TriangularGrid::new(1.0, m).unwrap(), &KernelOptions::default()).unwrap();
        let eps = 1e-6;
        let id = kp.grid.idx(8, 4);
        kp.k[id] += eps;
        let h = kp.grid.dx();
        let r = kernel_residual(&kp, &sc);
        assert!((r.rk - eps / (h * h)).abs() < 1e-12, "{}", r.rk);
        assert_eq!(r.rs, 0.0);
    }

    #[test]
    fn degenerate_grid_residual() {
        let p = CoefficientProfile::constant(1.0, 8, 0.0, 0.0).unwrap();
        let sc = eval_scalars(&p, 1.0).unwrap();
        let mut kp = zero_profile_kernel(8);
        kp.grid = TriangularGrid { len: 1.0, m: 3 };
        let r = kernel_residual(&kp, &sc);
        assert!(r.degenerate && r.rk.is_infinite());
    }

    #[test]
    fn csv_exports() {
        let kp = zero_profile_kernel(8);
        let mut buf = vec![];
        kp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,k,s\n"));
        assert_eq!(text.lines().count(), 1 + 45);
        let mut buf = vec![];
        kp.traces.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# kLL="));
        assert!(text.contains("y,kL,sL,kxL,sxL,syyL"));
    }
}
