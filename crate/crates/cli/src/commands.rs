use std::fs;
use std::path::{Path, PathBuf};

use backstep::energy::{fit_decay, EnergyReport};
use backstep::kernel::refinement_study;
use backstep::resolvent::{resolvent_limit, write_sweep_csv};
use backstep::simulate::{run_closed_loop, run_target_direct};
use backstep::verify::{run_suite, VerifyOptions};
use backstep::{eval_scalars, solve_for_profile, SimConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, RunConfig, RunKind};
use crate::CliError;

/// Output directory that refuses to overwrite unless forced.
pub struct Output {
    dir: PathBuf,
    force: bool,
}

impl Output {
    pub fn new(dir: PathBuf, force: bool) -> Self {
        Self { dir, force }
    }

    fn path(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.dir)
            .map_err(|e| CliError::Config(format!("cannot create {}: {e}", self.dir.display())))?;
        let p = self.dir.join(name);
        if p.exists() && !self.force {
            return Err(CliError::Config(format!("{} exists; pass --force to overwrite", p.display())));
        }
        Ok(p)
    }

    /// Check every name first so a refused run writes nothing.
    fn reserve(&self, names: &[&str]) -> Result<(), CliError> {
        names.iter().try_for_each(|n| self.path(n).map(|_| ()))
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.path(name)?;
        fs::write(&p, bytes).map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))
    }

    fn write_with(&self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| CliError::Numerical(format!("formatting {name}: {e}")))?;
        self.write(name, &buf)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

pub fn kernel(cfg_path: &Path, overrides: &[String], out: &Output) -> Result<(), CliError> {
    let cfg = config::load(cfg_path, overrides)?;
    out.reserve(&["kernel.csv", "traces.csv", "scalars.csv", "refinement.csv"])?;
    let profile = cfg.profile()?;
    let m = cfg.grid.m.unwrap_or(cfg.grid.n);
    let opts = cfg.kernel_options();
    let kp = solve_for_profile(&profile, cfg.d, m, &opts)?;
    let scalars = eval_scalars(&profile, cfg.d)?;
    let rows = refinement_study(|n| profile.resample(n), cfg.d, &cfg.kernel.ladder, &opts)?;
    out.write_with("kernel.csv", |w| kp.write_csv(w))?;
    out.write_with("traces.csv", |w| kp.traces().write_csv(w))?;
    out.write_with("scalars.csv", |w| scalars.write_csv(w))?;
    out.write_with("refinement.csv", |w| {
        use std::io::Write;
        writeln!(w, "M,rk,rs,iterations,order_k,order_s,low_order")?;
        let opt = |o: Option<f64>| o.map_or(String::new(), |o| format!("{o:.6}"));
        for r in &rows {
            writeln!(w, "{},{:e},{:e},{},{},{},{}", r.m, r.rk, r.rs, r.iterations, opt(r.order_k), opt(r.order_s), r.low_order)?;
        }
        Ok(())
    })?;
    println!("kernel M = {m}: residuals ({:.3e}, {:.3e}), {} iterations", kp.residual.0, kp.residual.1, kp.iterations);
    Ok(())
}

#[derive(Serialize)]
struct SimulationReport {
    case: String,
    run: String,
    steps: usize,
    dt: f64,
    /// `-2d + slack`.
    slope_bound: f64,
    /// Absent when the trajectory is identically zero.
    energy: Option<EnergyReport>,
    passed: bool,
    note: Option<String>,
    init_boundary_residual: f64,
    init_flagged: bool,
}

fn run_one(cfg: &RunConfig) -> Result<(SimConfig, SimulationReport, backstep::TrajectoryRecord), CliError> {
    let sim = cfg.sim_config()?;
    let rec = match cfg.horizon.run {
        RunKind::ClosedLoop => run_closed_loop(&sim)?,
        RunKind::Target => run_target_direct(&sim)?,
    };
    let bound = -2.0 * sim.d + cfg.horizon.slack;
    let window = cfg.horizon.window.unwrap_or((0.0, sim.t_end));
    let (energy, passed, note) = if rec.v[0] == 0.0 {
        (None, true, Some("V(0) = 0: decay slope undefined".to_string()))
    } else {
        let fit = fit_decay(&rec.times, &rec.v, &rec.e, sim.profile.len, sim.d, window)?;
        let ok = fit.slope <= bound;
        (Some(fit), ok, None)
    };
    let report = SimulationReport {
        case: sim.case.to_string(),
        run: match cfg.horizon.run {
            RunKind::ClosedLoop => "closed_loop".into(),
            RunKind::Target => "target".into(),
        },
        steps: rec.steps,
        dt: rec.dt,
        slope_bound: bound,
        energy,
        passed,
        note,
        init_boundary_residual: rec.init_boundary_residual,
        init_flagged: rec.init_flagged,
    };
    Ok((sim, report, rec))
}

pub fn simulate(cfg_path: &Path, overrides: &[String], out: &Output) -> Result<(), CliError> {
    let cfg = config::load(cfg_path, overrides)?;
    out.reserve(&["trajectory.csv", "energy_report.json"])?;
    let (_, report, rec) = run_one(&cfg)?;
    out.write_with("trajectory.csv", |w| rec.write_csv(w))?;
    out.write_json("energy_report.json", &report)?;
    match (&report.energy, &report.note) {
        (Some(e), _) => println!("slope {:.4} (bound {:.4})", e.slope, report.slope_bound),
        (None, Some(n)) => println!("{n}"),
        _ => {}
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!(
            "fitted slope {:.4} exceeds {:.4}",
            report.energy.as_ref().map_or(f64::NAN, |e| e.slope),
            report.slope_bound
        )))
    }
}

#[derive(Serialize)]
struct ResolventVerdict {
    case: String,
    sigmas: Vec<f64>,
    b: f64,
    argument: f64,
    #[serde(rename = "qL")]
    q_l: f64,
    cauchy_ratio: f64,
    inclusion_ok: bool,
    h2_bound_ok: bool,
    max_bc_residual: f64,
    ok: bool,
}

pub fn resolvent(cfg_path: &Path, overrides: &[String], out: &Output) -> Result<(), CliError> {
    let cfg = config::load(cfg_path, overrides)?;
    out.reserve(&["resolvent_sweep.csv", "resolvent_verdict.json"])?;
    let prob = cfg.resolvent_problem()?;
    let lim = resolvent_limit(&prob, &cfg.resolvent.sigmas)?;
    let max_bc = lim.rows.iter().map(|r| r.bc_residual).fold(0.0, f64::max);
    let verdict = ResolventVerdict {
        case: prob.case.to_string(),
        sigmas: lim.rows.iter().map(|r| r.sigma).collect(),
        b: lim.b,
        argument: lim.argument,
        q_l: *lim.q.last().expect("non-empty solution"),
        cauchy_ratio: lim.cauchy_ratio,
        inclusion_ok: lim.inclusion_ok,
        h2_bound_ok: lim.h2_bound_ok,
        max_bc_residual: max_bc,
        ok: lim.inclusion_ok && lim.h2_bound_ok && max_bc <= 1e-10,
    };
    out.write_with("resolvent_sweep.csv", |w| write_sweep_csv(&lim.rows, w))?;
    out.write_json("resolvent_verdict.json", &verdict)?;
    println!("b = {} at argument {:.3e}; inclusion {}", verdict.b, verdict.argument, if verdict.inclusion_ok { "ok" } else { "violated" });
    if verdict.ok {
        Ok(())
    } else {
        Err(CliError::Acceptance("limit fails the inclusion, the H2 bound or the residual bound".into()))
    }
}

pub fn verify(cfg_path: Option<&Path>, out: Option<&Output>, only: &[u32], json: bool) -> Result<(), CliError> {
    let seed = match cfg_path {
        Some(p) => config::load(p, &[])?.seed,
        None => VerifyOptions::default().seed,
    };
    if let Some(o) = out {
        o.reserve(&["verify.json"])?;
    }
    let verdicts = run_suite(only, &VerifyOptions { seed })?;
    if json {
        println!("{}", serde_json::to_string_pretty(&verdicts).map_err(|e| CliError::Numerical(e.to_string()))?);
    } else {
        for v in &verdicts {
            println!("{}", v.line());
        }
    }
    if let Some(o) = out {
        o.write_json("verify.json", &verdicts)?;
    }
    let failed: Vec<String> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id.to_string()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("criteria {} failed", failed.join(", "))))
    }
}

pub fn sweep(cfg_path: &Path, overrides: &[String], out: &Output, jobs: Option<usize>) -> Result<(), CliError> {
    let base = config::load_table(cfg_path, overrides)?;
    let cfg = config::from_table(base.clone())?;
    let sw = cfg.sweep.clone().ok_or_else(|| CliError::Config("missing section `sweep`".into()))?;
    if sw.values.is_empty() {
        return Err(CliError::Config("sweep.values is empty".into()));
    }
    out.reserve(&["sweep.csv"])?;
    let configs = sw
        .values
        .iter()
        .map(|v| {
            let mut t = base.clone();
            config::set_path(&mut t, &sw.key, v.clone())?;
            config::from_table(t)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Numerical(e.to_string()))?;
    let reports = pool.install(|| configs.par_iter().map(|c| run_one(c).map(|r| r.1)).collect::<Vec<_>>());
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    out.write_with("sweep.csv", |w| {
        use std::io::Write;
        writeln!(w, "{},slope,C_empirical,passed", sw.key)?;
        for (v, r) in sw.values.iter().zip(&reports) {
            let (slope, c) = r.energy.as_ref().map_or((String::new(), String::new()), |e| {
                (format!("{:.6}", e.slope), format!("{:.6}", e.C_empirical))
            });
            writeln!(w, "{v},{slope},{c},{}", r.passed)?;
        }
        Ok(())
    })?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} runs, {failed} above the slope bound", reports.len());
    if failed == 0 {
        Ok(())
    } else {
        Err(CliError::Acceptance(format!("{failed} of {} runs exceed the slope bound", reports.len())))
    }
}
