//! Small finite-difference, quadrature and interpolation kernels shared by
//! every module. All stencils assume a uniform grid.

use crate::error::{Error, Result};

/// Nodes `x_i = i * len / n`, `i = 0..=n`.
pub fn nodes(len: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| len * i as f64 / n as f64).collect()
}

/// Composite trapezoid rule over all samples.
pub fn trapz(f: &[f64], dx: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = f[1..n - 1].iter().sum();
            dx * (inner + 0.5 * (f[0] + f[n - 1]))
        }
    }
}

/// Trapezoid rule of the pointwise product `f * g`.
pub fn trapz_dot(f: &[f64], g: &[f64], dx: f64) -> f64 {
    debug_assert_eq!(f.len(), g.len());
    let n = f.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = (1..n - 1).map(|i| f[i] * g[i]).sum();
    dx * (inner + 0.5 * (f[0] * g[0] + f[n - 1] * g[n - 1]))
}

/// Running trapezoid integral, `out[0] = 0`.
pub fn cumtrapz(f: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    for (i, &v) in f.iter().enumerate() {
        if i > 0 {
            acc += 0.5 * dx * (f[i - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// First derivative: central in the interior, 3-point one-sided at the ends.
pub fn deriv1(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    match n {
        0 | 1 => {}
        2 => {
            let d = (f[1] - f[0]) / dx;
            out[0] = d;
            out[1] = d;
        }
        _ => {
            out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dx);
            for i in 1..n - 1 {
                out[i] = (f[i + 1] - f[i - 1]) / (2.0 * dx);
            }
            out[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dx);
        }
    }
    out
}

/// Second derivative: central in the interior, 4-point one-sided at the ends
/// (second order). Falls back to the 3-point formula on 3-sample lines and to
/// zero on shorter ones.
pub fn deriv2(f: &[f64], dx: f64) -> Vec<f64> {
    let n = f.len();
    let h2 = dx * dx;
    let mut out = vec![0.0; n];
    match n {
        0..=2 => {}
        3 => {
            let d = (f[0] - 2.0 * f[1] + f[2]) / h2;
            out.iter_mut().for_each(|o| *o = d);
        }
        _ => {
            out[0] = (2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]) / h2;
            for i in 1..n - 1 {
                out[i] = (f[i + 1] - 2.0 * f[i] + f[i - 1]) / h2;
            }
            out[n - 1] = (2.0 * f[n - 1] - 5.0 * f[n - 2] + 4.0 * f[n - 3] - f[n - 4]) / h2;
        }
    }
    out
}

/// Second-order backward difference at the last sample.
pub fn backward_end(f: &[f64], dx: f64) -> f64 {
    let n = f.len();
    match n {
        0 | 1 => 0.0,
        2 => (f[1] - f[0]) / dx,
        _ => (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * dx),
    }
}

/// Piecewise-linear saturation onto `[-1, 1]`.
pub fn sat(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Four-point Lagrange interpolation of samples on the uniform grid
/// `x_i = i * dx`. Exact at the nodes.
pub fn interp_uniform(f: &[f64], dx: f64, x: f64) -> f64 {
    let n = f.len();
    assert!(n >= 1);
    if n < 4 {
        let t = (x / dx).clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n.saturating_sub(2));
        if n == 1 {
            return f[0];
        }
        let w = t - i as f64;
        return f[i] * (1.0 - w) + f[i + 1] * w;
    }
    let t = x / dx;
    let r = t.round();
    if (t - r).abs() < 1e-12 && r >= 0.0 && (r as usize) < n {
        return f[r as usize];
    }
    let base = (t.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
    let mut acc = 0.0;
    for a in 0..4 {
        let xa = (base + a) as f64;
        let mut w = 1.0;
        for b in 0..4 {
            if a != b {
                let xb = (base + b) as f64;
                w *= (t - xb) / (xa - xb);
            }
        }
        acc += w * f[base + a];
    }
    acc
}

/// Solves `a0 + a1 z + c * sat(s0 + s1 z) = 0` for a function that is
/// piecewise linear in `z`. Each of the three saturation regimes is tried and
/// the first self-consistent root is returned together with the saturation
/// argument at the root.
pub fn solve_affine_sat(a0: f64, a1: f64, c: f64, s0: f64, s1: f64) -> Result<(f64, f64)> {
    // linear regime: |s0 + s1 z| <= 1
    let lin_slope = a1 + c * s1;
    if lin_slope != 0.0 {
        let z = -(a0 + c * s0) / lin_slope;
        let arg = s0 + s1 * z;
        if arg.abs() <= 1.0 + 1e-12 {
            return Ok((z, arg));
        }
    } else if c == 0.0 || s1 == 0.0 {
        // saturation argument does not depend on z
        if a1 != 0.0 {
            let z = -(a0 + c * sat(s0)) / a1;
            return Ok((z, s0 + s1 * z));
        }
    }
    for side in [1.0, -1.0] {
        if a1 != 0.0 {
            let z = -(a0 + c * side) / a1;
            let arg = s0 + s1 * z;
            if arg * side >= 1.0 - 1e-12 {
                return Ok((z, arg));
            }
        }
    }
    Err(Error::Numerical(format!(
        "no consistent root for boundary equation (a0={a0:e}, a1={a1:e}, c={c:e}, s0={s0:e}, s1={s1:e})"
    )))
}
