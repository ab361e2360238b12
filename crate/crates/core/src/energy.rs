//! Energies, the energy-space norm and inner product, the Lyapunov
//! equivalence constants and exponential decay fits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{deriv1, trapz, trapz_dot};
use crate::transform::{Frame, WaveState};

fn dx_of(st: &WaveState, len: f64) -> f64 {
    len / st.n() as f64
}

/// `E = 1/2 int (u_t^2 + u_x^2)`.
pub fn energy_e(st: &WaveState, len: f64) -> f64 {
    let dx = dx_of(st, len);
    let ux = deriv1(&st.pos, dx);
    0.5 * (trapz_dot(&st.vel, &st.vel, dx) + trapz_dot(&ux, &ux, dx))
}

/// `V = 1/2 int (w_t + d w)^2 + 1/2 int w_x^2` for a target state.
pub fn energy_v(st: &WaveState, len: f64, d: f64) -> Result<f64> {
    if st.frame != Frame::Target {
        return Err(Error::Contract("energy_V needs a target-frame state".into()));
    }
    Ok(0.5 * x_inner(st, st, len, d)?)
}

fn check_origin(st: &WaveState) -> Result<()> {
    let scale = st.pos.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if st.pos[0].abs() > 1e-12 * scale {
        return Err(Error::Contract(format!("pos[0] must vanish, got {:e}", st.pos[0])));
    }
    Ok(())
}

/// `sqrt(int vel^2 + int pos_x^2)`.
pub fn x_norm(st: &WaveState, len: f64) -> Result<f64> {
    check_origin(st)?;
    Ok((2.0 * energy_e(st, len)).sqrt())
}

/// `int q1' q2' + int (l1 + d q1)(l2 + d q2)`.
pub fn x_inner(a: &WaveState, b: &WaveState, len: f64, d: f64) -> Result<f64> {
    check_origin(a)?;
    check_origin(b)?;
    if a.n() != b.n() {
        return Err(Error::Grid(format!("inner product of states with N = {} and {}", a.n(), b.n())));
    }
    let dx = dx_of(a, len);
    let (ax, bx) = (deriv1(&a.pos, dx), deriv1(&b.pos, dx));
    let la: Vec<f64> = a.vel.iter().zip(&a.pos).map(|(l, q)| l + d * q).collect();
    let lb: Vec<f64> = b.vel.iter().zip(&b.pos).map(|(l, q)| l + d * q).collect();
    Ok(trapz_dot(&ax, &bx, dx) + trapz_dot(&la, &lb, dx))
}

/// `(lo, hi)` with `lo (||w_t||^2 + ||w_x||^2) <= 2V <= hi (||w_t||^2 + ||w_x||^2)`.
pub fn equivalence_bounds(len: f64, d: f64) -> Result<(f64, f64)> {
    if !(len > 0.0 && d > 0.0) {
        return Err(Error::Parameter(format!("L and d must be positive (L = {len}, d = {d})")));
    }
    let c = 8.0 * len * len * d * d + 1.0;
    Ok(((1.0 / c).min(0.5), c.max(2.0)))
}

pub fn constant_k(len: f64, d: f64) -> Result<f64> {
    let (lo, hi) = equivalence_bounds(len, d)?;
    Ok(hi / lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EnergyReport {
    pub E0: f64,
    pub V0: f64,
    /// Fitted rate of `log V` per unit time.
    pub slope: f64,
    /// `exp` of the fitted intercept, an estimate of `V(0)`.
    pub prefactor: f64,
    /// RMS residual of the fit in `log V`.
    pub residual: f64,
    pub K: f64,
    /// `max_t E(t) e^{2 d t} / E(0)`.
    pub C_empirical: f64,
    pub window: (f64, f64),
    pub samples: usize,
}

/// Least-squares line through `(t, log V)` on `window`. Samples with
/// `V <= 1e-14 V(0)` are skipped.
pub fn fit_decay(
    times: &[f64],
    v: &[f64],
    e: &[f64],
    len: f64,
    d: f64,
    window: (f64, f64),
) -> Result<EnergyReport> {
    if times.len() != v.len() || times.len() != e.len() || times.is_empty() {
        return Err(Error::Fit("times, V and E must be non-empty and aligned".into()));
    }
    let v0 = v[0];
    let floor = 1e-14 * v0;
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(v)
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && **v > floor && **v > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .collect();
    if pts.len() < 10 {
        return Err(Error::Fit(format!(
            "only {} usable samples in window [{}, {}], need 10",
            pts.len(),
            window.0,
            window.1
        )));
    }
    let nf = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("window contains a single time".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let residual = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / nf).sqrt();
    let e0 = e[0];
    let c_emp = if e0 > 0.0 {
        times.iter().zip(e).map(|(t, e)| e * (2.0 * d * t).exp() / e0).fold(0.0, f64::max)
    } else {
        0.0
    };
    Ok(EnergyReport {
        E0: e0,
        V0: v0,
        slope,
        prefactor: intercept.exp(),
        residual,
        K: constant_k(len, d)?,
        C_empirical: c_emp,
        window,
        samples: pts.len(),
    })
}

/// `||vel||^2 + ||pos_x||^2`, the quantity the equivalence bounds compare to.
pub fn plain_norm_sq(st: &WaveState, len: f64) -> f64 {
    let dx = dx_of(st, len);
    let ux = deriv1(&st.pos, dx);
    let sq = |v: &[f64]| trapz(&v.iter().map(|x| x * x).collect::<Vec<_>>(), dx);
    sq(&st.vel) + sq(&ux)
}
