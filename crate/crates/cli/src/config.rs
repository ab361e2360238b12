//! Run configuration: one TOML file with sections, plus `key=value`
//! overrides addressed by dotted paths (`grid.N=100`).

use std::path::Path;

use backstep::resolvent::{default_sigmas, random_smooth, ResolventProblem};
use backstep::{CoefficientProfile, Disturbance, InitSpec, KernelOptions, SimConfig};
use backstep::transform::BoundaryCase;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub case: BoundaryCase,
    pub d: f64,
    #[serde(rename = "P", default)]
    pub p_bound: f64,
    /// Saturation width of the regularized sign; defaults per case.
    pub eps: Option<f64>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub profile: ProfileSection,
    pub grid: GridSection,
    #[serde(default)]
    pub horizon: HorizonSection,
    pub disturbance: Option<Disturbance>,
    /// Initial state; the compatible target-frame sine when absent.
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub resolvent: ResolventSection,
    pub sweep: Option<SweepSection>,
}

fn default_seed() -> u64 {
    20240607
}

/// A coefficient given as one constant or as node samples.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Coefficient {
    Constant(f64),
    Samples(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    #[serde(rename = "L")]
    pub len: f64,
    pub lambda: Coefficient,
    pub beta: Coefficient,
    /// First-order coefficient; removed by a change of variables, which
    /// also fixes the Neumann coefficient.
    pub alpha: Option<Coefficient>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "N")]
    pub n: usize,
    /// Kernel lattice intervals per side; `N` when absent.
    #[serde(rename = "M")]
    pub m: Option<usize>,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_cfl() -> f64 {
    0.5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSection {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub stride: usize,
    /// Allowed excess of the fitted slope over `-2d`.
    pub slack: f64,
    /// Fit window; the whole horizon when absent.
    pub window: Option<(f64, f64)>,
    /// `closed_loop` (plant with feedback) or `target` (target system directly).
    pub run: RunKind,
}

impl Default for HorizonSection {
    fn default() -> Self {
        Self { t_end: 5.0, stride: 10, slack: 0.1, window: None, run: RunKind::ClosedLoop }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    ClosedLoop,
    Target,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub tol: f64,
    pub max_iter: usize,
    /// Lattice sizes of the refinement table.
    pub ladder: Vec<usize>,
}

impl Default for KernelSection {
    fn default() -> Self {
        let o = KernelOptions::default();
        Self { tol: o.tol, max_iter: o.max_iter, ladder: vec![32, 64, 128] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolventData {
    Zero,
    ConstantN,
    Random,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolventSection {
    pub data: ResolventData,
    /// Value of `n` for `constant_n`, amplitude of `n` for `random`.
    pub value: f64,
    pub sigmas: Vec<f64>,
    /// Grid intervals; `grid.N` when absent.
    #[serde(rename = "N")]
    pub n: Option<usize>,
    /// Boundary gain `h(L)`; taken from the profile when absent.
    #[serde(rename = "hL")]
    pub h_l: Option<f64>,
}

impl Default for ResolventSection {
    fn default() -> Self {
        Self { data: ResolventData::ConstantN, value: 3.0, sigmas: default_sigmas(), n: None, h_l: None }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Dotted key overridden in each run, e.g. `P` or `disturbance.amplitude`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

/// Read `path`, apply the overrides in order and deserialize.
pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    from_table(load_table(path, overrides)?)
}

pub fn load_table(path: &Path, overrides: &[String]) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for kv in overrides {
        apply_override(&mut table, kv)?;
    }
    Ok(table)
}

pub fn from_table(table: toml::Table) -> Result<RunConfig, CliError> {
    // through text so that errors carry the offending line and key
    let cfg: RunConfig = toml::from_str(&table.to_string()).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as TOML and falls back to a string.
pub fn apply_override(table: &mut toml::Table, kv: &str) -> Result<(), CliError> {
    let (key, raw) = kv
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{kv}` is not key=value")))?;
    let value = parse_value(raw.trim());
    set_path(table, key.trim(), value)
}

pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.d.is_nan() || self.d <= 0.0 {
            return bad(format!("d must be positive, got {}", self.d));
        }
        if self.grid.n < 8 {
            return bad(format!("grid.N must be at least 8, got {}", self.grid.n));
        }
        if self.resolvent.sigmas.len() < 2 || self.resolvent.sigmas.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad(format!("resolvent.sigmas must hold at least two positive values, got {:?}", self.resolvent.sigmas));
        }
        if self.profile.alpha.is_some() && self.profile.gamma.is_some() {
            return bad("profile.gamma is derived from profile.alpha; give only one".into());
        }
        if self.horizon.stride == 0 {
            return bad("horizon.stride must be positive".into());
        }
        Ok(())
    }

    /// The plant profile, with any first-order term removed.
    pub fn profile(&self) -> Result<CoefficientProfile, CliError> {
        let p = &self.profile;
        let lens: Vec<usize> = [Some(&p.lambda), Some(&p.beta), p.alpha.as_ref()]
            .into_iter()
            .flatten()
            .filter_map(|c| match c {
                Coefficient::Samples(v) => Some(v.len()),
                Coefficient::Constant(_) => None,
            })
            .collect();
        let samples = match lens.first() {
            Some(&k) if lens.iter().all(|&l| l == k) && k >= 2 => k,
            Some(_) => return Err(CliError::Config("profile sample arrays must share a length >= 2".into())),
            None => 2 * self.grid.n + 1,
        };
        let expand = |c: &Coefficient| match c {
            Coefficient::Constant(v) => vec![*v; samples],
            Coefficient::Samples(v) => v.clone(),
        };
        let base = CoefficientProfile::new(p.len, expand(&p.lambda), expand(&p.beta))?;
        Ok(match &p.alpha {
            Some(a) => base.with_alpha(expand(a))?.remove_first_order()?.0,
            None => base.with_gamma(p.gamma.unwrap_or(0.0)),
        })
    }

    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions { tol: self.kernel.tol, max_iter: self.kernel.max_iter }
    }

    pub fn sim_config(&self) -> Result<SimConfig, CliError> {
        let mut cfg = SimConfig::new(self.case, self.profile()?, self.d, self.grid.n, self.horizon.t_end);
        cfg.p_bound = self.p_bound;
        cfg.eps = self.eps;
        cfg.cfl = self.grid.cfl;
        cfg.stride = self.horizon.stride;
        cfg.kernel_m = self.grid.m;
        cfg.kernel = self.kernel_options();
        if let Some(dist) = &self.disturbance {
            cfg.disturbance = dist.clone();
        }
        if let Some(init) = &self.init {
            cfg.init = init.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolvent_problem(&self) -> Result<ResolventProblem, CliError> {
        let r = &self.resolvent;
        let n = r.n.unwrap_or(self.grid.n);
        let h_l = match r.h_l {
            Some(h) => h,
            None => *backstep::eval_scalars(&self.profile()?, self.d)?.h.last().expect("non-empty scalars"),
        };
        let (m, v) = match r.data {
            ResolventData::Zero => (vec![0.0; n + 1], vec![0.0; n + 1]),
            ResolventData::ConstantN => (vec![0.0; n + 1], vec![r.value; n + 1]),
            ResolventData::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (random_smooth(&mut rng, n, self.profile.len, 1.0), random_smooth(&mut rng, n, self.profile.len, r.value))
            }
        };
        let prob = ResolventProblem {
            case: self.case,
            len: self.profile.len,
            m,
            n: v,
            d: self.d,
            p_bound: self.p_bound,
            h_l,
            sigma: r.sigmas[0],
        };
        prob.validate()?;
        Ok(prob)
    }
}
