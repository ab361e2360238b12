//! Time stepping of the closed-loop plant and of the target system.
//!
//! Interior nodes follow the leapfrog scheme
//! `u^{n+1}(1 - lambda dt) = 2u^n - u^{n-1}(1 + lambda dt) + dt^2 (D2 u^n + beta u^n)`
//! with a Taylor first step. The boundary node solves the regularized
//! boundary relation at the new time level. The relation is piecewise linear
//! in the single unknown value once `u_x(L)` is the one-sided 3-point
//! difference and `u_t` the BDF2 velocity. Both boundary cases use this.

use serde::{Deserialize, Serialize};

use crate::coeffs::{eval_scalars, CoefficientProfile};
use crate::energy::{energy_e, energy_v};
use crate::error::{Error, Result};
use crate::kernel::{solve_kernels, KernelOptions, KernelPair, TriangularGrid};
use crate::numerics::{backward_end, nodes, sat, solve_affine_sat};
use crate::transform::{default_eps, BoundaryCase, ControlValue, Frame, Transform, WaveState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    Zero,
    RaisedCosine,
    DecayingSine,
    CustomTable,
}

/// Boundary disturbance `p(t)` with `|p| <= amplitude`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub kind: DisturbanceKind,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub mu: f64,
    /// `(t, p)` samples for `custom_table`, increasing in `t`.
    #[serde(default)]
    pub table: Option<Vec<(f64, f64)>>,
}

fn one() -> f64 {
    1.0
}

impl Disturbance {
    pub fn zero() -> Self {
        Self { kind: DisturbanceKind::Zero, amplitude: 0.0, omega: 1.0, mu: 0.0, table: None }
    }

    pub fn raised_cosine(amplitude: f64, omega: f64) -> Self {
        Self { kind: DisturbanceKind::RaisedCosine, amplitude, omega, mu: 0.0, table: None }
    }

    pub fn decaying_sine(amplitude: f64, omega: f64, mu: f64) -> Self {
        Self { kind: DisturbanceKind::DecayingSine, amplitude, omega, mu, table: None }
    }

    pub fn custom_table(amplitude: f64, table: Vec<(f64, f64)>) -> Self {
        Self { kind: DisturbanceKind::CustomTable, amplitude, omega: 1.0, mu: 0.0, table: Some(table) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) || !self.omega.is_finite() || !(self.mu >= 0.0) {
            return Err(Error::Parameter(format!(
                "disturbance needs amplitude >= 0, finite omega and mu >= 0 (got {}, {}, {})",
                self.amplitude, self.omega, self.mu
            )));
        }
        if self.kind == DisturbanceKind::CustomTable {
            let tab = self
                .table
                .as_ref()
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::Parameter("custom_table disturbance needs a non-empty table".into()))?;
            if tab.windows(2).any(|w| !(w[1].0 > w[0].0)) {
                return Err(Error::Parameter("disturbance table times must increase".into()));
            }
            if tab.iter().any(|(_, p)| p.abs() > self.amplitude) {
                return Err(Error::Parameter("disturbance table exceeds its amplitude".into()));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("disturbance evaluated at t = {t}")));
        }
        let a = self.amplitude;
        let p = match self.kind {
            DisturbanceKind::Zero => 0.0,
            DisturbanceKind::RaisedCosine => a * (1.0 - (self.omega * t).cos()) / 2.0,
            DisturbanceKind::DecayingSine => {
                let ramp = 1.0 - (-t).exp();
                a * (self.omega * t).sin() * ramp * ramp * (-self.mu * t).exp()
            }
            DisturbanceKind::CustomTable => {
                let tab = self.table.as_deref().unwrap_or(&[]);
                match tab.iter().position(|(tt, _)| *tt > t) {
                    None => tab.last().map_or(0.0, |e| e.1),
                    Some(0) => tab[0].1,
                    Some(i) => {
                        let (t0, p0) = tab[i - 1];
                        let (t1, p1) = tab[i];
                        p0 + (p1 - p0) * (t - t0) / (t1 - t0)
                    }
                }
            }
        };
        if p.abs() > a * (1.0 + 1e-12) {
            return Err(Error::Contract(format!("|p({t})| = {} exceeds the bound {a}", p.abs())));
        }
        Ok(p)
    }

    pub fn is_zero(&self) -> bool {
        self.kind == DisturbanceKind::Zero || self.amplitude == 0.0
    }
}

/// Named initial shapes. All vanish at `x = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum InitShape {
    Zero,
    /// `amp sin(mode pi x / 2L)`, velocity `vel_amp sin(mode pi x / 2L)`.
    Sine {
        #[serde(default = "one_u")]
        mode: u32,
        #[serde(default = "one")]
        amp: f64,
        #[serde(default)]
        vel_amp: f64,
    },
    /// `amp cos^2(pi (x - center) / width)` on `|x - center| < width / 2`, zero velocity.
    Bump { center: f64, width: f64, amp: f64 },
    /// Node values on the simulation grid.
    Table { pos: Vec<f64>, vel: Vec<f64> },
}

fn one_u() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    /// Frame the shape is given in. A target-frame shape is mapped back
    /// through the inverse transform for plant runs.
    #[serde(default = "target_frame")]
    pub frame: Frame,
    #[serde(flatten)]
    pub shape: InitShape,
}

fn target_frame() -> Frame {
    Frame::Target
}

impl InitSpec {
    pub fn sine(mode: u32, amp: f64) -> Self {
        Self { frame: Frame::Target, shape: InitShape::Sine { mode, amp, vel_amp: 0.0 } }
    }

    /// Target-frame `w = amp sin(pi x / 2L)`, `w_t = -d w`. Satisfies both
    /// regularized boundary relations at `t = 0` when `p(0) = 0`.
    pub fn compatible(amp: f64, d: f64) -> Self {
        Self { frame: Frame::Target, shape: InitShape::Sine { mode: 1, amp, vel_amp: -d * amp } }
    }

    pub fn sample(&self, len: f64, n: usize) -> Result<WaveState> {
        let x = nodes(len, n);
        let (pos, vel) = match &self.shape {
            InitShape::Zero => (vec![0.0; n + 1], vec![0.0; n + 1]),
            InitShape::Sine { mode, amp, vel_amp } => {
                let k = *mode as f64 * std::f64::consts::PI / (2.0 * len);
                (
                    x.iter().map(|x| amp * (k * x).sin()).collect(),
                    x.iter().map(|x| vel_amp * (k * x).sin()).collect(),
                )
            }
            InitShape::Bump { center, width, amp } => {
                if !(*width > 0.0) || center - width / 2.0 < 0.0 {
                    return Err(Error::Parameter("bump must have positive width and stay inside x >= 0".into()));
                }
                let f = |x: f64| {
                    let r = (x - center) / width;
                    if r.abs() < 0.5 {
                        amp * (std::f64::consts::PI * r).cos().powi(2)
                    } else {
                        0.0
                    }
                };
                (x.iter().map(|&x| f(x)).collect(), vec![0.0; n + 1])
            }
            InitShape::Table { pos, vel } => {
                if pos.len() != n + 1 || vel.len() != n + 1 {
                    return Err(Error::Grid(format!(
                        "initial table has {} / {} entries, grid needs {}",
                        pos.len(),
                        vel.len(),
                        n + 1
                    )));
                }
                (pos.clone(), vel.clone())
            }
        };
        WaveState::new(0.0, pos, vel, self.frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub case: BoundaryCase,
    pub profile: CoefficientProfile,
    pub d: f64,
    /// Disturbance bound used by the controller.
    pub p_bound: f64,
    pub disturbance: Disturbance,
    pub n: usize,
    pub t_end: f64,
    pub cfl: f64,
    /// Sign regularization; `None` means `1e-3 max(P, 1)`.
    pub eps: Option<f64>,
    pub init: InitSpec,
    /// Record every `stride` steps.
    pub stride: usize,
    /// Kernel grid intervals; must be a multiple of `n`. `None` means `n`.
    pub kernel_m: Option<usize>,
    pub kernel: KernelOptions,
    /// Keep the recorded states in the trajectory.
    pub keep_states: bool,
}

impl SimConfig {
    pub fn new(case: BoundaryCase, profile: CoefficientProfile, d: f64, n: usize, t_end: f64) -> Self {
        Self {
            case,
            profile,
            d,
            p_bound: 0.0,
            disturbance: Disturbance::zero(),
            n,
            t_end,
            cfl: 0.5,
            eps: None,
            init: InitSpec::compatible(1.0, d),
            stride: 10,
            kernel_m: None,
            kernel: KernelOptions::default(),
            keep_states: false,
        }
    }

    pub fn eps(&self) -> f64 {
        self.eps.unwrap_or_else(|| default_eps(self.p_bound))
    }

    pub fn dt(&self) -> f64 {
        self.cfl * self.profile.len / self.n as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.disturbance.validate()?;
        if !(self.d > 0.0) {
            return Err(Error::Parameter(format!("decay rate d must be positive, got {}", self.d)));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Parameter(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if !(self.p_bound >= 0.0) {
            return Err(Error::Parameter(format!("controller P must be >= 0, got {}", self.p_bound)));
        }
        if !(self.eps() > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps())));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::Parameter(format!("horizon T must be positive, got {}", self.t_end)));
        }
        if self.n < 8 {
            return Err(Error::Grid(format!("simulation needs N >= 8, got {}", self.n)));
        }
        if self.stride == 0 {
            return Err(Error::Parameter("stride must be at least 1".into()));
        }
        let m = self.kernel_m.unwrap_or(self.n);
        if !m.is_multiple_of(self.n) {
            return Err(Error::Grid(format!("kernel grid M = {m} must be a multiple of N = {}", self.n)));
        }
        Ok(())
    }
}

/// Control and disturbance data at one recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlSample {
    pub u1: f64,
    pub u2: f64,
    pub sign_arg: f64,
    pub selection: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub case: BoundaryCase,
    pub frame: Frame,
    pub dt: f64,
    pub steps: usize,
    pub times: Vec<f64>,
    /// Recorded states; empty unless the config asked to keep them.
    pub states: Vec<WaveState>,
    pub controls: Vec<ControlSample>,
    #[serde(rename = "E")]
    pub e: Vec<f64>,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    /// Violation of the regularized boundary relation by the initial target state.
    pub init_boundary_residual: f64,
    /// Set when the initial boundary residual exceeds `1e-3 max(1, |w|_inf)`.
    pub init_flagged: bool,
}

impl TrajectoryRecord {
    /// CSV with columns `t, E, V, u1, u2, sign_arg, selection, p`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,E,V,u1,u2,sign_arg,selection,p")?;
        for (i, t) in self.times.iter().enumerate() {
            let c = &self.controls[i];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t, self.e[i], self.v[i], c.u1, c.u2, c.sign_arg, c.selection, c.p
            )?;
        }
        Ok(())
    }

    /// Snapshot CSV with columns `t, x, u, ut` for every kept state.
    pub fn write_states_csv<W: std::io::Write>(&self, len: f64, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,u,ut")?;
        for st in &self.states {
            let x = nodes(len, st.n());
            for i in 0..=st.n() {
                writeln!(w, "{},{},{},{}", st.t, x[i], st.pos[i], st.vel[i])?;
            }
        }
        Ok(())
    }
}

/// Boundary law at `x = L`.
#[derive(Clone, Copy)]
enum Law<'a> {
    PlantDd(&'a Transform),
    PlantDn(&'a Transform, f64),
    TargetDd(f64),
    TargetDn(f64),
    /// `u(t, L) = 0` with no control.
    Dirichlet,
}

struct Params {
    n: usize,
    dx: f64,
    dt: f64,
    lambda: Vec<f64>,
    beta: Vec<f64>,
    d: f64,
    p_bound: f64,
    eps: f64,
    case: BoundaryCase,
}

impl Params {
    fn d2(&self, u: &[f64], i: usize) -> f64 {
        (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (self.dx * self.dx)
    }

    fn taylor_interior(&self, u0: &[f64], v0: &[f64], out: &mut [f64]) {
        let dt = self.dt;
        for i in 1..self.n {
            let acc = self.d2(u0, i) + 2.0 * self.lambda[i] * v0[i] + self.beta[i] * u0[i];
            out[i] = u0[i] + dt * v0[i] + 0.5 * dt * dt * acc;
        }
        out[0] = 0.0;
    }

    fn leapfrog_interior(&self, prev: &[f64], cur: &[f64], out: &mut [f64]) {
        let dt = self.dt;
        for i in 1..self.n {
            let ld = self.lambda[i] * dt;
            out[i] = (2.0 * cur[i] - (1.0 + ld) * prev[i] + dt * dt * (self.d2(cur, i) + self.beta[i] * cur[i]))
                / (1.0 - ld);
        }
        out[0] = 0.0;
    }
}

/// Solves `a(z) + c sat(s(z)) = 0` for affine `a`, `s` given as closures.
fn solve_boundary(c: f64, f: impl Fn(f64) -> Result<(f64, f64)>) -> Result<f64> {
    let (a0, s0) = f(0.0)?;
    let (a1, s1) = f(1.0)?;
    let (z, _) = solve_affine_sat(a0, a1 - a0, c, s0, s1 - s0)?;
    Ok(z)
}

fn sample_of(cv: ControlValue, p: f64) -> ControlSample {
    ControlSample { u1: cv.u1, u2: cv.u2, sign_arg: cv.sign_arg, selection: cv.selection, p }
}

fn target_sample(pr: &Params, st: &WaveState, h_l: f64, p: f64) -> ControlSample {
    let n = pr.n;
    let (wl, wtl) = (st.pos[n], st.vel[n]);
    let (sign_arg, base) = match pr.case {
        BoundaryCase::Dd => (backward_end(&st.pos, pr.dx), -wtl / (pr.d * h_l)),
        BoundaryCase::Dn => (wtl + pr.d * wl, 0.0),
    };
    let selection = sat(sign_arg / pr.eps);
    ControlSample { u1: 0.0, u2: base - pr.p_bound * selection, sign_arg, selection, p }
}

fn control_sample(law: Law, pr: &Params, st: &WaveState, p: f64) -> Result<ControlSample> {
    Ok(match law {
        Law::PlantDd(tr) => sample_of(tr.control(BoundaryCase::Dd, st, 0.0, pr.p_bound, pr.eps)?, p),
        Law::PlantDn(tr, gamma) => sample_of(tr.control(BoundaryCase::Dn, st, gamma, pr.p_bound, pr.eps)?, p),
        Law::TargetDd(h) | Law::TargetDn(h) => target_sample(pr, st, h, p),
        Law::Dirichlet => ControlSample { u1: 0.0, u2: 0.0, sign_arg: 0.0, selection: 0.0, p },
    })
}

/// Value at `x = L` on a new level. `vel_of(z)` gives
/// the boundary velocity on that level; `state` holds the level with the
/// interior filled in and is updated in place.
fn solve_new_level(law: Law, pr: &Params, state: &mut WaveState, vel_of: &dyn Fn(f64) -> f64, p: f64) -> Result<f64> {
    let n = pr.n;
    let cell = std::cell::RefCell::new(state);
    let set = |z: f64| {
        let mut s = cell.borrow_mut();
        s.pos[n] = z;
        s.vel[n] = vel_of(z);
    };
    let z = match law {
        Law::Dirichlet => 0.0,
        Law::PlantDd(tr) => {
            let hl = tr.h_l;
            solve_boundary(pr.p_bound, |z| {
                set(z);
                let s = cell.borrow();
                let u1 = tr.control_u1_dd(&s)?;
                let u3 = tr.trace_u3(&s)?;
                let u4 = tr.trace_u4_dd(&s)?;
                Ok((z - p - u1 + u3 / (pr.d * hl), u4 / pr.eps))
            })?
        }
        Law::TargetDd(h) => solve_boundary(h * pr.p_bound, |z| {
            set(z);
            let s = cell.borrow();
            Ok((z + s.vel[n] / pr.d - h * p, backward_end(&s.pos, pr.dx) / pr.eps))
        })?,
        Law::PlantDn(tr, gamma) => solve_boundary(pr.p_bound, |z| {
            set(z);
            let s = cell.borrow();
            let u1 = tr.control_u1_dn(&s, gamma)?;
            let arg = tr.trace_u3(&s)? + pr.d * tr.trace_u4_dn(&s)?;
            Ok((backward_end(&s.pos, pr.dx) - gamma * z - p - u1, arg / pr.eps))
        })?,
        Law::TargetDn(h) => solve_boundary(h * pr.p_bound, |z| {
            set(z);
            let s = cell.borrow();
            Ok((backward_end(&s.pos, pr.dx) - h * p, (s.vel[n] + pr.d * z) / pr.eps))
        })?,
    };
    set(z);
    Ok(z)
}

struct Recorder<'a> {
    law: Law<'a>,
    len: f64,
    d: f64,
    stride: usize,
    steps: usize,
    guard: bool,
    keep: bool,
    rec: TrajectoryRecord,
}

impl Recorder<'_> {
    fn push(&mut self, level: usize, st: &WaveState, ctl: ControlSample) -> Result<()> {
        if !(level.is_multiple_of(self.stride) || level == self.steps) {
            return Ok(());
        }
        if st.pos.iter().chain(&st.vel).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {}", st.t)));
        }
        let e = energy_e(st, self.len);
        let v = match self.law {
            Law::PlantDd(tr) | Law::PlantDn(tr, _) => energy_v(&tr.forward(st)?, self.len, self.d)?,
            _ => {
                let mut w = st.clone();
                w.frame = Frame::Target;
                energy_v(&w, self.len, self.d)?
            }
        };
        if self.guard {
            if let Some(&prev) = self.rec.e.last() {
                if prev > 1e-300 && e > 10.0 * prev {
                    return Err(Error::Instability {
                        t: st.t,
                        reason: format!("energy grew from {prev:e} to {e:e} between records"),
                    });
                }
            }
        }
        self.rec.times.push(st.t);
        self.rec.e.push(e);
        self.rec.v.push(v);
        self.rec.controls.push(ctl);
        if self.keep {
            self.rec.states.push(st.clone());
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn integrate(
    law: Law,
    pr: &Params,
    init: WaveState,
    dist: &Disturbance,
    t_end: f64,
    len: f64,
    stride: usize,
    keep: bool,
    init_residual: f64,
    init_flagged: bool,
) -> Result<TrajectoryRecord> {
    let n = pr.n;
    let dt = pr.dt;
    if pr.lambda.iter().any(|l| l * dt >= 1.0) {
        return Err(Error::Parameter("time step too large for the anti-damping lambda (need lambda dt < 1)".into()));
    }
    let steps = (t_end / dt).ceil() as usize;
    let frame = init.frame;
    let mut recorder = Recorder {
        law,
        len,
        d: pr.d,
        stride,
        steps,
        guard: dist.is_zero(),
        keep,
        rec: TrajectoryRecord {
            case: pr.case,
            frame,
            dt,
            steps,
            times: vec![],
            states: vec![],
            controls: vec![],
            e: vec![],
            v: vec![],
            init_boundary_residual: init_residual,
            init_flagged,
        },
    };

    let p0 = dist.eval(0.0)?;
    let ctl0 = control_sample(law, pr, &init, p0)?;
    recorder.push(0, &init, ctl0)?;

    // level 1
    let mut next = WaveState::zero(n, frame);
    next.t = dt;
    pr.taylor_interior(&init.pos, &init.vel, &mut next.pos);
    // the boundary value of every new level solves the boundary law there,
    // with one-sided u_x and a second-order backward velocity
    let p1 = dist.eval(dt)?;
    for i in 1..n {
        next.vel[i] = 2.0 * (next.pos[i] - init.pos[i]) / dt - init.vel[i];
    }
    let (u0n, v0n) = (init.pos[n], init.vel[n]);
    solve_new_level(law, pr, &mut next, &|z| 2.0 * (z - u0n) / dt - v0n, p1)?;
    let mut ctl_cur = control_sample(law, pr, &next, p1)?;

    let mut prev = init;
    let mut cur = next;
    for level in 1..=steps {
        let t_next = (level + 1) as f64 * dt;
        let mut next = WaveState::zero(n, frame);
        next.t = t_next;
        pr.leapfrog_interior(&prev.pos, &cur.pos, &mut next.pos);
        // centred velocities on the current level
        for i in 1..n {
            cur.vel[i] = (next.pos[i] - prev.pos[i]) / (2.0 * dt);
        }
        cur.vel[0] = 0.0;
        let p_next = dist.eval(t_next)?;
        for i in 1..n {
            next.vel[i] = (3.0 * next.pos[i] - 4.0 * cur.pos[i] + prev.pos[i]) / (2.0 * dt);
        }
        let (c, pv) = (cur.pos[n], prev.pos[n]);
        let z = solve_new_level(law, pr, &mut next, &|z| (3.0 * z - 4.0 * c + pv) / (2.0 * dt), p_next)?;
        cur.vel[n] = (z - prev.pos[n]) / (2.0 * dt);
        let ctl_here = std::mem::replace(&mut ctl_cur, control_sample(law, pr, &next, p_next)?);
        recorder.push(level, &cur, ctl_here)?;
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(recorder.rec)
}

/// Kernels and the transform for a configuration, reusable across runs that
/// share the profile, `d`, `N` and kernel grid.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub kernels: KernelPair,
    pub transform: Transform,
}

pub fn prepare(cfg: &SimConfig) -> Result<Prepared> {
    cfg.validate()?;
    let sc = eval_scalars(&cfg.profile, cfg.d)?;
    let grid = TriangularGrid::new(cfg.profile.len, cfg.kernel_m.unwrap_or(cfg.n))?;
    let kernels = solve_kernels(&sc, &grid, &cfg.kernel)?;
    let transform = Transform::new(&kernels, cfg.n)?;
    Ok(Prepared { kernels, transform })
}

fn plant_params(cfg: &SimConfig, tr: &Transform) -> Params {
    Params {
        n: cfg.n,
        dx: cfg.profile.len / cfg.n as f64,
        dt: cfg.dt(),
        lambda: tr.lambda.clone(),
        beta: tr.beta.clone(),
        d: cfg.d,
        p_bound: cfg.p_bound,
        eps: cfg.eps(),
        case: cfg.case,
    }
}

fn target_params(cfg: &SimConfig) -> Params {
    Params {
        n: cfg.n,
        dx: cfg.profile.len / cfg.n as f64,
        dt: cfg.dt(),
        lambda: vec![-cfg.d; cfg.n + 1],
        beta: vec![-cfg.d * cfg.d; cfg.n + 1],
        d: cfg.d,
        p_bound: cfg.p_bound,
        eps: cfg.eps(),
        case: cfg.case,
    }
}

/// Violation of the target boundary inclusion at `t = 0`: the L1 distance of
/// `(arg, b - h p)` to the graph of `-hP sign`, where `arg` is the sign
/// argument and `b` the other side of the relation. The eps-free graph is used
/// so that an O(dx^2) trace error is not amplified by `1/eps`.
pub fn initial_boundary_residual(cfg: &SimConfig, w: &WaveState, h_l: f64) -> Result<f64> {
    let n = w.n();
    let dx = cfg.profile.len / n as f64;
    let p0 = cfg.disturbance.eval(0.0)?;
    let (wl, wtl, wxl) = (w.pos[n], w.vel[n], backward_end(&w.pos, dx));
    let (arg, b) = match cfg.case {
        BoundaryCase::Dd => (wxl, wl + wtl / cfg.d),
        BoundaryCase::Dn => (wtl + cfg.d * wl, wxl),
    };
    let b = b - h_l * p0;
    let c = h_l * cfg.p_bound;
    let on_segment = arg.abs() + (b.abs() - c).max(0.0);
    let on_ray = if arg == 0.0 { f64::INFINITY } else { (b + c * arg.signum()).abs() };
    Ok(on_segment.min(on_ray))
}

fn residual_flag(res: f64, w: &WaveState) -> bool {
    let scale = w.pos.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    res > 1e-3 * scale
}

/// Closed-loop plant with `U = U1 + U2`.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<TrajectoryRecord> {
    let prep = prepare(cfg)?;
    run_closed_loop_with(cfg, &prep.transform)
}

pub fn run_closed_loop_with(cfg: &SimConfig, tr: &Transform) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    if tr.n != cfg.n {
        return Err(Error::Grid(format!("transform built for N = {}, config has N = {}", tr.n, cfg.n)));
    }
    let init = cfg.init.sample(cfg.profile.len, cfg.n)?;
    let u0 = match init.frame {
        Frame::Plant => init,
        Frame::Target => tr.inverse(&init)?,
    };
    let w0 = tr.forward(&u0)?;
    let res = initial_boundary_residual(cfg, &w0, tr.h_l)?;
    let law = match cfg.case {
        BoundaryCase::Dd => Law::PlantDd(tr),
        BoundaryCase::Dn => Law::PlantDn(tr, cfg.profile.gamma),
    };
    let pr = plant_params(cfg, tr);
    integrate(law, &pr, u0, &cfg.disturbance, cfg.t_end, cfg.profile.len, cfg.stride, cfg.keep_states, res, residual_flag(res, &w0))
}

/// Target system simulated directly with its own boundary relation.
pub fn run_target_direct(cfg: &SimConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let init = cfg.init.sample(cfg.profile.len, cfg.n)?;
    if init.frame == Frame::Plant {
        let prep = prepare(cfg)?;
        return run_target_direct_with(cfg, Some(&prep.transform));
    }
    run_target_direct_with(cfg, None)
}

/// As [`run_target_direct`]; a transform is needed only for plant-frame
/// initial data.
pub fn run_target_direct_with(cfg: &SimConfig, tr: Option<&Transform>) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let h_l = match tr {
        Some(tr) => tr.h_l,
        None => *eval_scalars(&cfg.profile, cfg.d)?.h.last().expect("non-empty scalars"),
    };
    let init = cfg.init.sample(cfg.profile.len, cfg.n)?;
    let w0 = match init.frame {
        Frame::Target => init,
        Frame::Plant => tr
            .ok_or_else(|| Error::Contract("plant-frame initial data needs the transform".into()))?
            .forward(&init)?,
    };
    let res = initial_boundary_residual(cfg, &w0, h_l)?;
    let law = match cfg.case {
        BoundaryCase::Dd => Law::TargetDd(h_l),
        BoundaryCase::Dn => Law::TargetDn(h_l),
    };
    let flag = residual_flag(res, &w0);
    integrate(law, &target_params(cfg), w0, &cfg.disturbance, cfg.t_end, cfg.profile.len, cfg.stride, cfg.keep_states, res, flag)
}

/// Plant with `u(t, L) = 0` and no control, for checking the stepper.
pub fn run_uncontrolled_dirichlet(cfg: &SimConfig) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let sdx = cfg.profile.dx();
    let x = nodes(cfg.profile.len, cfg.n);
    let at = |v: &[f64]| x.iter().map(|&x| crate::numerics::interp_uniform(v, sdx, x)).collect::<Vec<_>>();
    let mut pr = target_params(cfg);
    pr.lambda = at(&cfg.profile.lambda);
    pr.beta = at(&cfg.profile.beta);
    let mut init = cfg.init.sample(cfg.profile.len, cfg.n)?;
    init.frame = Frame::Plant;
    integrate(Law::Dirichlet, &pr, init, &Disturbance::zero(), cfg.t_end, cfg.profile.len, cfg.stride, cfg.keep_states, 0.0, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{fit_decay, x_norm};
    use std::f64::consts::PI;

    fn profile(n: usize, lambda: f64, beta: f64) -> CoefficientProfile {
        CoefficientProfile::constant(1.0, 2 * n, lambda, beta).unwrap()
    }

    fn slope(r: &TrajectoryRecord, window: (f64, f64)) -> f64 {
        fit_decay(&r.times, &r.v, &r.e, 1.0, 1.0, window).unwrap().slope
    }

    fn disturbed(case: BoundaryCase, n: usize, t_end: f64) -> SimConfig {
        let mut cfg = SimConfig::new(case, profile(n, 0.5, 8.0), 1.0, n, t_end);
        cfg.p_bound = 1.0;
        cfg.disturbance = Disturbance::raised_cosine(1.0, 2.0 * PI);
        cfg
    }

    #[test]
    fn disturbance_examples() {
        assert_eq!(Disturbance::zero().eval(3.7).unwrap(), 0.0);
        let rc = Disturbance::raised_cosine(2.0, PI);
        assert_eq!(rc.eval(0.0).unwrap(), 0.0);
        assert!((rc.eval(1.0).unwrap() - 2.0).abs() < 1e-15);
        let h = 1e-6;
        assert!(rc.eval(h).unwrap() / h < 1e-5);
        assert!(matches!(rc.eval(-0.1), Err(Error::Domain(_))));
        let ds = Disturbance::decaying_sine(1.5, 7.0, 0.3);
        for i in 0..2000 {
            assert!(ds.eval(i as f64 * 0.01).unwrap().abs() <= 1.5);
        }
        let tab = Disturbance::custom_table(1.0, vec![(0.0, 0.0), (1.0, 1.0), (2.0, -0.5)]);
        assert!((tab.eval(0.5).unwrap() - 0.5).abs() < 1e-15);
        assert!((tab.eval(1.5).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(tab.eval(9.0).unwrap(), -0.5);
        let bad = Disturbance::custom_table(0.5, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(bad.validate().is_err());
        let unchecked = Disturbance { amplitude: 0.5, ..Disturbance::custom_table(1.0, vec![(0.0, 1.0)]) };
        assert!(matches!(unchecked.eval(0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_state_stays_zero() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let mut cfg = SimConfig::new(case, profile(32, 0.5, 8.0), 1.0, 32, 1.0);
            cfg.p_bound = 1.0;
            cfg.keep_states = true;
            cfg.init = InitSpec { frame: Frame::Plant, shape: InitShape::Zero };
            let r = run_closed_loop(&cfg).unwrap();
            assert!(r.states.iter().all(|s| s.pos.iter().chain(&s.vel).all(|x| *x == 0.0)));
            assert!(r.controls.iter().all(|c| c.u1 == 0.0 && c.u2 == 0.0 && c.selection == 0.0));
            assert!(r.v.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn identity_profile_follows_target_envelope() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let cfg = SimConfig::new(case, profile(64, -1.0, -1.0), 1.0, 64, 5.0);
            let r = run_closed_loop(&cfg).unwrap();
            let scaled: Vec<f64> = r.times.iter().zip(&r.v).map(|(t, v)| v * (2.0 * t).exp()).collect();
            let mut best = scaled[0];
            for s in &scaled {
                assert!(*s <= 1.02 * best, "{case}: V e^(2dt) rose to {s} after {best}");
                best = best.min(*s);
            }
        }
    }

    #[test]
    fn unstable_profile_decays_with_disturbance() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let r = run_closed_loop(&disturbed(case, 64, 6.0)).unwrap();
            let k = slope(&r, (0.6, 5.4));
            assert!(k <= -2.0 + 0.2, "{case}: slope {k}");
        }
    }

    #[test]
    fn undisturbed_target_decays_at_design_rate() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let mut cfg = SimConfig::new(case, profile(100, 0.0, 0.0), 1.0, 100, 5.0);
            cfg.p_bound = 1.0;
            let r = run_target_direct(&cfg).unwrap();
            assert!(!r.init_flagged);
            let k = slope(&r, (0.5, 4.5));
            assert!((k + 2.0).abs() < 0.02, "{case}: slope {k}");
        }
    }

    #[test]
    fn dirichlet_stepper_conserves_energy() {
        let mut cfg = SimConfig::new(BoundaryCase::Dd, profile(200, 0.0, 0.0), 1.0, 200, 2.0);
        cfg.init = InitSpec::sine(2, 1.0);
        cfg.stride = 1;
        let r = run_uncontrolled_dirichlet(&cfg).unwrap();
        let e0 = r.e[0];
        let drift = r.e.iter().map(|e| (e - e0).abs() / e0).fold(0.0, f64::max);
        assert!(drift <= 5e-3, "energy drift {drift}");
    }

    #[test]
    fn closed_loop_matches_target_at_second_order() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let gap = |n: usize| {
                let mut cfg = SimConfig::new(case, profile(n, 0.5, 8.0), 1.0, n, 2.0);
                cfg.p_bound = 1.0;
                cfg.keep_states = true;
                let prep = prepare(&cfg).unwrap();
                let cl = run_closed_loop_with(&cfg, &prep.transform).unwrap();
                let tg = run_target_direct_with(&cfg, Some(&prep.transform)).unwrap();
                cl.states
                    .iter()
                    .zip(&tg.states)
                    .map(|(a, b)| {
                        let w = prep.transform.forward(a).unwrap();
                        let dpos = w.pos.iter().zip(&b.pos).map(|(x, y)| x - y).collect();
                        let dvel = w.vel.iter().zip(&b.vel).map(|(x, y)| x - y).collect();
                        x_norm(&WaveState::new(0.0, dpos, dvel, Frame::Target).unwrap(), 1.0).unwrap()
                    })
                    .fold(0.0, f64::max)
            };
            let (g1, g2) = (gap(50), gap(100));
            let order = (g1 / g2).log2();
            assert!(order > 1.7, "{case}: gaps {g1:e} {g2:e}");
        }
    }

    #[test]
    fn u3_is_the_time_derivative_of_w_at_l() {
        let n = 100;
        let mut cfg = SimConfig::new(BoundaryCase::Dn, profile(n, 0.5, 8.0), 1.0, n, 1.0);
        cfg.p_bound = 1.0;
        cfg.stride = 1;
        cfg.keep_states = true;
        let prep = prepare(&cfg).unwrap();
        let tr = &prep.transform;
        let r = run_closed_loop_with(&cfg, tr).unwrap();
        let wl: Vec<f64> = r.states.iter().map(|s| tr.trace_u4_dn(s).unwrap()).collect();
        let tol = 2.0 * (r.dt + 1.0 / (n * n) as f64);
        for i in (10..r.states.len() - 1).step_by(17) {
            let fd = (wl[i + 1] - wl[i - 1]) / (2.0 * r.dt);
            let u3 = tr.trace_u3(&r.states[i]).unwrap();
            assert!((fd - u3).abs() < tol, "t = {}: {fd} vs {u3}", r.times[i]);
        }
    }

    #[test]
    fn lyapunov_increment_bounded() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            for eps in [1e-3, 1e-2] {
                let mut cfg = SimConfig::new(case, profile(50, 0.0, 0.0), 1.0, 50, 3.0);
                cfg.p_bound = 1.0;
                cfg.eps = Some(eps);
                cfg.stride = 1;
                cfg.disturbance = Disturbance::raised_cosine(1.0, 2.0 * PI);
                let r = run_target_direct(&cfg).unwrap();
                let dt = r.dt;
                let tol = dt * eps + 10.0 * dt.powi(3);
                for w in r.v.windows(2) {
                    assert!(w[1] <= (-2.0 * dt).exp() * w[0] + tol, "{case} eps={eps}: {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn larger_controller_bound_never_hurts() {
        for case in [BoundaryCase::Dd, BoundaryCase::Dn] {
            let mut last = f64::INFINITY;
            for pb in [1.0, 1.5, 2.5] {
                let mut cfg = disturbed(case, 50, 5.0);
                cfg.p_bound = pb;
                let violation = (slope(&run_closed_loop(&cfg).unwrap(), (0.5, 4.5)) + 2.0).max(0.0);
                assert!(violation <= last + 1e-9, "{case} P={pb}: {violation} after {last}");
                last = violation;
            }
        }
    }

    #[test]
    fn incompatible_start_is_flagged() {
        let mut cfg = SimConfig::new(BoundaryCase::Dn, profile(32, 0.0, 0.0), 1.0, 32, 0.1);
        cfg.p_bound = 1.0;
        cfg.init = InitSpec::sine(1, 1.0);
        let r = run_target_direct(&cfg).unwrap();
        assert!(r.init_flagged && r.init_boundary_residual > 0.1);
        cfg.init = InitSpec::compatible(1.0, 1.0);
        assert!(!run_target_direct(&cfg).unwrap().init_flagged);
    }

    #[test]
    fn config_errors() {
        let mut cfg = SimConfig::new(BoundaryCase::Dd, profile(32, 0.0, 0.0), 1.0, 32, 1.0);
        cfg.cfl = 1.5;
        assert!(matches!(run_target_direct(&cfg), Err(Error::Parameter(_))));
        cfg.cfl = 0.5;
        cfg.kernel_m = Some(48);
        assert!(matches!(run_closed_loop(&cfg), Err(Error::Grid(_))));
    }

    #[test]
    fn trajectory_csv_columns() {
        let mut cfg = SimConfig::new(BoundaryCase::Dn, profile(16, 0.0, 0.0), 1.0, 16, 0.2);
        cfg.keep_states = true;
        let r = run_target_direct(&cfg).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,E,V,u1,u2,sign_arg,selection,p");
        assert_eq!(text.lines().count(), r.times.len() + 1);
        let mut buf = Vec::new();
        r.write_states_csv(1.0, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,x,u,ut\n"));
    }
}
