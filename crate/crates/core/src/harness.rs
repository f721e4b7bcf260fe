//! Config-driven experiments: mediated-potential tables, deficit scaling,
//! transition-sum bounds and the effective-vs-tilde rate.
//!
//! Every experiment writes into `<output_dir>/<experiment>-<hash12>/`. Each
//! grid point is stored under `points/` as soon as it is done; a re-run of
//! the same config reuses those files and only computes what is missing.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    appendix_j_integrals, big_gamma, bound_records, elementary_integral_checks, ratio_band, AppendixJReport,
    BigGamma, BoundRecord, ElementaryCheck, SumId,
};
use crate::effective_dynamics::{
    build_effective_hamiltonian, coupling_rule, evolve_to, EffectiveSetup, ImpurityGrid, ImpurityState, Variant,
};
use crate::effective_potential::{lemma1_summary, scaling_factor, uniform_grid, PotentialTable};
use crate::error::{Error, Result};
use crate::fock::{basis_dimension, theorem1_deficit, DeficitReport, FockProblem, DEFAULT_BASIS_CAP, DEFAULT_TRANSITION_CAP};
use crate::krylov::KrylovOptions;
use crate::lattice::MomentumLattice;
use crate::potentials::{certify_assumptions, AssumptionCertificate, ImpurityCertificate, ImpurityPotential, PotentialSpec, RadialTable};

pub const SCHEMA_VERSION: u32 = 1;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Potential,
    Scaling,
    Bounds,
    Proposition2,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Potential => "potential",
            Experiment::Scaling => "scaling",
            Experiment::Bounds => "bounds",
            Experiment::Proposition2 => "proposition2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaRule {
    Fixed {
        value: f64,
    },
    /// `|λ| = k_F^{(2-d)/2}`.
    #[default]
    Scaled,
}

impl LambdaRule {
    pub fn lambda(&self, d: usize, k_f: f64) -> f64 {
        match *self {
            LambdaRule::Fixed { value } => value,
            LambdaRule::Scaled => coupling_rule(d, k_f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpecConfig {
    Zero,
    Yukawa {
        screening: f64,
    },
    Step {
        #[serde(default = "half")]
        height: f64,
    },
    /// Two-column `k, v(k)` text file.
    Table {
        path: PathBuf,
        envelope_r: f64,
    },
}

fn half() -> f64 {
    0.5
}

impl SpecConfig {
    pub fn build(&self) -> Result<PotentialSpec> {
        match self {
            SpecConfig::Zero => Ok(PotentialSpec::zero()),
            SpecConfig::Yukawa { screening } => PotentialSpec::yukawa(*screening),
            SpecConfig::Step { height } => Ok(PotentialSpec::step_with_height(*height)),
            SpecConfig::Table { path, envelope_r } => PotentialSpec::table(RadialTable::load(path)?, *envelope_r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WConfig {
    #[default]
    Zero,
    /// Radial table; certified by `sup|w| < 1` unless `relative_bound` is given.
    Table {
        radii: Vec<f64>,
        values: Vec<f64>,
        #[serde(default)]
        relative_bound: Option<f64>,
    },
}

impl WConfig {
    pub fn build(&self) -> Result<ImpurityPotential> {
        match self {
            WConfig::Zero => Ok(ImpurityPotential::Zero),
            WConfig::Table {
                radii,
                values,
                relative_bound,
            } => {
                let table = RadialTable::new(radii.clone(), values.clone())?;
                let w = match relative_bound {
                    None => ImpurityPotential::Bounded(table),
                    Some(c) => ImpurityPotential::Uncertified { table, c: *c },
                };
                w.certify()?;
                Ok(w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateConfig {
    /// Wave numbers per impurity axis; empty means all zero.
    PlaneWave {
        #[serde(default)]
        waves: Vec<i32>,
    },
    GaussianProduct {
        centers: Vec<[f64; 3]>,
        sigma: f64,
        #[serde(default)]
        momenta: Vec<[f64; 3]>,
    },
    /// Two impurities, zero total momentum, Gaussian relative coordinate.
    RelativeGaussian {
        #[serde(default)]
        offset: [f64; 3],
        sigma: f64,
    },
    Random {
        k_cut: f64,
    },
}

impl Default for InitialStateConfig {
    fn default() -> Self {
        InitialStateConfig::PlaneWave { waves: Vec::new() }
    }
}

impl InitialStateConfig {
    pub fn build(&self, grid: ImpurityGrid, seed: u64) -> Result<ImpurityState> {
        match self {
            InitialStateConfig::PlaneWave { waves } => {
                if waves.is_empty() {
                    ImpurityState::plane_wave(grid, &vec![0; grid.axes()])
                } else {
                    ImpurityState::plane_wave(grid, waves)
                }
            }
            InitialStateConfig::GaussianProduct { centers, sigma, momenta } => {
                let momenta = if momenta.is_empty() {
                    vec![[0.0; 3]; grid.n]
                } else {
                    momenta.clone()
                };
                ImpurityState::gaussian_product(grid, centers, *sigma, &momenta)
            }
            InitialStateConfig::RelativeGaussian { offset, sigma } => {
                ImpurityState::relative_gaussian(grid, *offset, *sigma)
            }
            InitialStateConfig::Random { k_cut } => ImpurityState::random(grid, *k_cut, seed),
        }
    }
}

/// Fermion momentum cutoff `max(multiplier · k_F, k_F + margin)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffRule {
    pub multiplier: f64,
    #[serde(default)]
    pub margin: f64,
}

impl CutoffRule {
    pub fn cutoff(&self, k_f: f64) -> f64 {
        (self.multiplier * k_f).max(k_f + self.margin)
    }

    /// Fock runs: the hop amplitudes beyond the cutoff depend on the absolute
    /// margin above `k_F`.
    pub const FOCK: CutoffRule = CutoffRule {
        multiplier: 1.5,
        margin: 6.0,
    };
    pub const SUMS: CutoffRule = CutoffRule {
        multiplier: 4.0,
        margin: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Relative tolerance of the continuum quadrature.
    pub rel_tol: f64,
    pub krylov_tol: f64,
    pub krylov_max_dim: usize,
    pub basis_cap: usize,
    pub transition_cap: usize,
    /// `c₀` below `c0_floor · k_F^{2-d} W(0)` counts as "not concentrated".
    pub c0_floor: f64,
    /// Largest `k_F` for the nested sums (8) and (9).
    pub nested_k_f_max: f64,
    /// Ratio band accepted as "stable" across the `k_F` ladder.
    pub ratio_band: f64,
    /// Relative change accepted under the last `L` doubling.
    pub length_change: f64,
    pub certify_samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            rel_tol: 1e-6,
            krylov_tol: 1e-10,
            krylov_max_dim: 20,
            basis_cap: DEFAULT_BASIS_CAP,
            transition_cap: DEFAULT_TRANSITION_CAP,
            c0_floor: 1e-3,
            nested_k_f_max: 8.0,
            ratio_band: 5.0,
            length_change: 0.02,
            certify_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub d: usize,
    /// Box lengths in units of `2π`.
    #[serde(default = "default_lengths")]
    pub length_over_2pi: Vec<f64>,
    pub k_f: Vec<f64>,
    #[serde(default)]
    pub lambda: LambdaRule,
    #[serde(default = "one")]
    pub n: usize,
    pub spec: SpecConfig,
    #[serde(default)]
    pub w: WConfig,
    #[serde(default)]
    pub xi0: InitialStateConfig,
    /// Impurity grid points per axis.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub t_list: Vec<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Defaults to [`CutoffRule::FOCK`] for `scaling` and [`CutoffRule::SUMS`] otherwise.
    #[serde(default)]
    pub cutoff: Option<CutoffRule>,
    /// Weight of the mediated pair term in `h_n` (1 = printed form, 2 = both
    /// orderings of the pair exchange).
    #[serde(default = "default_pair_weight")]
    pub pair_weight: f64,
    /// Radial grid of the potential tables.
    #[serde(default = "default_r_max")]
    pub r_max: f64,
    #[serde(default = "default_r_points")]
    pub r_points: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_lengths() -> Vec<f64> {
    vec![1.0]
}
fn one() -> usize {
    1
}
fn default_grid_points() -> usize {
    64
}
fn default_m_max() -> usize {
    3
}
fn default_pair_weight() -> f64 {
    2.0
}
fn default_r_max() -> f64 {
    4.0
}
fn default_r_points() -> usize {
    201
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(1..=3).contains(&self.d) {
            return Err(config_err(format!("d = {} not in 1..=3", self.d)));
        }
        let positive = |name: &str, v: &[f64]| -> Result<()> {
            if v.is_empty() {
                return Err(config_err(format!("{name} ladder is empty")));
            }
            if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(config_err(format!("{name} entries must be positive")));
            }
            Ok(())
        };
        positive("k_f", &self.k_f)?;
        positive("length_over_2pi", &self.length_over_2pi)?;
        if self.k_f.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("k_f ladder must be strictly increasing"));
        }
        if self.length_over_2pi.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err("length ladder must be strictly increasing"));
        }
        if self.t_list.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || self.t_list.windows(2).any(|w| w[1] < w[0]) {
            return Err(config_err("t_list must be nonnegative and ascending"));
        }
        if matches!(self.experiment, Experiment::Scaling | Experiment::Proposition2) && self.t_list.is_empty() {
            return Err(config_err("t_list is empty"));
        }
        if self.n == 0 {
            return Err(config_err("n must be at least 1"));
        }
        if self.experiment == Experiment::Proposition2 && self.n < 2 {
            return Err(config_err("proposition2 needs n >= 2"));
        }
        if self.grid_points < 2 {
            return Err(config_err("grid_points must be at least 2"));
        }
        if !(self.pair_weight >= 0.0) {
            return Err(config_err("pair_weight must be nonnegative"));
        }
        if let Some(c) = self.cutoff {
            if !(c.multiplier > 1.0) || !(c.margin >= 0.0) {
                return Err(config_err("cutoff multiplier must exceed 1 and margin be nonnegative"));
            }
        }
        if !(self.r_max > 0.0) || self.r_points < 2 {
            return Err(config_err("potential grid needs r_max > 0 and at least 2 points"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cutoff_rule(&self) -> CutoffRule {
        self.cutoff.unwrap_or(match self.experiment {
            Experiment::Scaling => CutoffRule::FOCK,
            _ => CutoffRule::SUMS,
        })
    }

    pub fn lengths(&self) -> Vec<f64> {
        self.length_over_2pi.iter().map(|x| 2.0 * PI * x).collect()
    }

    fn krylov(&self) -> KrylovOptions {
        KrylovOptions {
            tol: self.tolerances.krylov_tol,
            max_dim: self.tolerances.krylov_max_dim,
            ..Default::default()
        }
    }
}

/// One stored grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord<T> {
    pub config_hash: String,
    pub experiment: Experiment,
    pub key: String,
    pub version: String,
    pub wall_time_s: f64,
    pub data: T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub version: String,
    pub experiment: Experiment,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
    pub points_computed: usize,
    pub points_reused: usize,
    pub wall_time_s: f64,
    pub files: Vec<String>,
}

/// Output directory of one run plus its bookkeeping.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    computed: usize,
    reused: usize,
    files: Vec<String>,
    started: Instant,
}

impl RunContext {
    pub fn new(config: &ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        let hash = config.hash();
        let base = out.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
        let dir = base.join(format!("{}-{}", config.experiment.name(), &hash[..12]));
        fs::create_dir_all(dir.join("points"))?;
        Ok(RunContext {
            config: config.clone(),
            hash,
            dir,
            computed: 0,
            reused: 0,
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    /// Loads the point `key` if a previous run stored it, otherwise computes
    /// and stores it.
    pub fn point<T, F>(&mut self, key: &str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let path = self.dir.join("points").join(format!("{key}.json"));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(rec) = serde_json::from_str::<ResultRecord<T>>(&text) {
                if rec.config_hash == self.hash {
                    log::info!("reusing point {key}");
                    self.reused += 1;
                    return Ok(rec.data);
                }
            }
            log::warn!("ignoring stale point file {}", path.display());
        }
        let t0 = Instant::now();
        let data = compute()?;
        let rec = ResultRecord {
            config_hash: self.hash.clone(),
            experiment: self.config.experiment,
            key: key.to_string(),
            version: VERSION.to_string(),
            wall_time_s: t0.elapsed().as_secs_f64(),
            data,
        };
        // Write-then-rename so an interrupted run never leaves half a point.
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&rec)?)?;
        fs::rename(&tmp, &path)?;
        self.computed += 1;
        log::info!("point {key} done in {:.2} s", rec.wall_time_s);
        Ok(rec.data)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        fs::write(self.dir.join(name), serde_json::to_vec_pretty(value)?)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// CSV with a header row; values written with shortest round-trip formatting.
    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.dir.join(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_with<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let mut file = std::io::BufWriter::new(fs::File::create(self.dir.join(name))?);
        f(&mut file)?;
        file.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            version: VERSION.to_string(),
            experiment: self.config.experiment,
            config_hash: self.hash.clone(),
            config: self.config.clone(),
            run_dir: self.dir.clone(),
            points_computed: self.computed,
            points_reused: self.reused,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            files: self.files.clone(),
        };
        fs::write(self.dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

fn key_of(prefix: &str, x: f64) -> String {
    format!("{prefix}{x}")
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.len() != y.len() || x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Fit `y ≈ a t + b t²` (no intercept) by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    pub linear: f64,
    pub quadratic: f64,
    pub rms_residual: f64,
}

pub fn fit_linear_quadratic(t: &[f64], y: &[f64]) -> Result<QuadraticFit> {
    let (mut s2, mut s3, mut s4, mut sy1, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in t.iter().zip(y) {
        s2 += t * t;
        s3 += t * t * t;
        s4 += t * t * t * t;
        sy1 += y * t;
        sy2 += y * t * t;
    }
    let det = s2 * s4 - s3 * s3;
    if !(det.abs() > 1e-300) || t.iter().filter(|&&x| x > 0.0).count() < 2 {
        return Err(Error::InvalidParameter("quadratic fit needs two distinct positive times".into()));
    }
    let linear = (sy1 * s4 - sy2 * s3) / det;
    let quadratic = (s2 * sy2 - s3 * sy1) / det;
    let rms_residual = (t
        .iter()
        .zip(y)
        .map(|(&t, &y)| (y - linear * t - quadratic * t * t).powi(2))
        .sum::<f64>()
        / t.len() as f64)
        .sqrt();
    Ok(QuadraticFit {
        linear,
        quadratic,
        rms_residual,
    })
}

// ---------------------------------------------------------------- potential

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileShape {
    pub k_f: f64,
    pub value_at_origin: f64,
    pub peak_at_origin: bool,
    pub sign_changes: usize,
    /// `max |·|` over the outer half of the grid divided by the value at 0.
    pub outer_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PotentialReport {
    pub d: usize,
    pub spec_id: String,
    pub k_f: Vec<f64>,
    pub sup_abs: Vec<f64>,
    pub sup_spread: f64,
    pub core_inf: Vec<f64>,
    pub c_probe: f64,
    pub core_found: bool,
    pub successive_change: Vec<f64>,
    pub shapes: Vec<ProfileShape>,
}

fn profile_shape(t: &PotentialTable) -> ProfileShape {
    let v0 = t.values[0];
    let half = t.len() / 2;
    let outer = t.values[half..].iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let sign_changes = t.values.windows(2).filter(|w| w[0] * w[1] < 0.0).count();
    ProfileShape {
        k_f: t.k_f,
        value_at_origin: v0,
        peak_at_origin: v0 > 0.0 && t.argmax() == 0,
        sign_changes,
        outer_fraction: if v0 != 0.0 { outer / v0.abs() } else { 0.0 },
    }
}

pub fn run_potential(ctx: &mut RunContext) -> Result<PotentialReport> {
    let cfg = ctx.config.clone();
    let spec = cfg.spec.build()?;
    let grid = uniform_grid(cfg.r_max, cfg.r_points);
    let mut tables = Vec::new();
    for &k in &cfg.k_f {
        let t: PotentialTable = ctx.point(&key_of("kf", k), || {
            PotentialTable::quadrature(cfg.d, k, &spec, &grid, cfg.tolerances.rel_tol)
        })?;
        tables.push(t);
    }
    for t in &tables {
        ctx.write_with(&format!("table_kf{}.csv", t.k_f), |w| t.write_csv(w))?;
    }
    let mut header = vec!["r".to_string()];
    header.extend(cfg.k_f.iter().map(|k| format!("kf{k}")));
    let rows: Vec<Vec<String>> = (0..grid.len())
        .map(|i| std::iter::once(num(grid[i])).chain(tables.iter().map(|t| num(t.values[i]))).collect())
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    ctx.write_csv("scaled_profiles.csv", &header, &rows)?;
    let shapes = tables.iter().map(profile_shape).collect();
    let l1 = lemma1_summary(tables)?;
    let report = PotentialReport {
        d: l1.d,
        spec_id: l1.spec_id,
        k_f: l1.k_f_list,
        sup_abs: l1.sup_abs,
        sup_spread: l1.sup_spread,
        core_inf: l1.core_inf,
        c_probe: l1.c_probe,
        core_found: l1.core_found,
        successive_change: l1.successive_change,
        shapes,
    };
    ctx.write_json("report.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- scaling

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub k_f: f64,
    pub lambda: f64,
    pub cutoff: f64,
    /// `ϱ = N / L^d` of the truncated lattice.
    pub density: f64,
    pub rows: Vec<DeficitReport>,
    /// `Γ(d, k_F, λ, t)` per row; absent for `k_F < 2`.
    pub big_gamma: Vec<Option<BigGamma>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub t: f64,
    pub deficits: Vec<f64>,
    pub monotone_decreasing: bool,
    pub slope: Option<f64>,
    /// Slope of `deficit / (ln k_F)³`, to be read against `-1/2`.
    pub corrected_slope: Option<f64>,
    pub max_dropped_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingReport {
    pub points: Vec<ScalingPoint>,
    pub control: ScalingPoint,
    pub control_max_deficit: f64,
    pub slopes: Vec<SlopeSummary>,
}

fn scaling_point(cfg: &ExperimentConfig, k_f: f64, lambda: f64, length: f64) -> Result<ScalingPoint> {
    let spec = cfg.spec.build()?;
    let w = cfg.w.build()?;
    let grid = ImpurityGrid::new(cfg.n, cfg.d, length, cfg.grid_points)?;
    let xi0 = cfg.xi0.build(grid, cfg.seed)?;
    let cutoff = cfg.cutoff_rule().cutoff(k_f);
    let problem = FockProblem {
        k_f,
        cutoff,
        m_max: cfg.m_max,
        lambda,
        spec: &spec,
        w: &w,
        pair_weight: cfg.pair_weight,
        krylov: cfg.krylov(),
        basis_cap: cfg.tolerances.basis_cap,
        transition_cap: cfg.tolerances.transition_cap,
    };
    let rows = theorem1_deficit(&problem, &xi0, &cfg.t_list)?;
    let lat = MomentumLattice::new(cfg.d, length, cutoff)?;
    let ball = lat.fermi_ball(k_f)?;
    let big_gamma = cfg
        .t_list
        .iter()
        .map(|&t| big_gamma(cfg.d, k_f, lambda, t).ok())
        .collect();
    Ok(ScalingPoint {
        k_f,
        lambda,
        cutoff,
        density: ball.density(&lat),
        rows,
        big_gamma,
    })
}

pub fn run_scaling(ctx: &mut RunContext) -> Result<ScalingReport> {
    let cfg = ctx.config.clone();
    let length = cfg.lengths()[0];
    let mut points = Vec::new();
    for &k in &cfg.k_f {
        let lambda = cfg.lambda.lambda(cfg.d, k);
        points.push(ctx.point(&key_of("kf", k), || scaling_point(&cfg, k, lambda, length))?);
    }
    let k0 = cfg.k_f[0];
    let control: ScalingPoint = ctx.point("control", || scaling_point(&cfg, k0, 0.0, length))?;
    let control_max_deficit = control.rows.iter().map(|r| r.deficit).fold(0.0, f64::max);

    let mut rows = Vec::new();
    for (p, control_flag) in points.iter().map(|p| (p, false)).chain(std::iter::once((&control, true))) {
        for (r, g) in p.rows.iter().zip(&p.big_gamma) {
            rows.push(vec![
                num(p.k_f),
                num(p.lambda),
                num(r.t),
                num(r.deficit),
                num(r.sea_deficit),
                num(r.dropped_weight),
                num(if r.deficit > 0.0 { r.dropped_weight / r.deficit } else { 0.0 }),
                g.map(|g| num(g.total)).unwrap_or_default(),
                r.basis_dim.to_string(),
                num(r.energy_drift),
                num(r.norm),
                num(p.density),
                control_flag.to_string(),
            ]);
        }
    }
    ctx.write_csv(
        "deficit.csv",
        &[
            "k_f", "lambda", "t", "deficit", "sea_deficit", "dropped_weight", "dropped_ratio", "big_gamma",
            "basis_dim", "energy_drift", "norm", "density", "control",
        ],
        &rows,
    )?;

    let ks: Vec<f64> = points.iter().map(|p| p.k_f).collect();
    let slopes = cfg
        .t_list
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0.0)
        .map(|(j, &t)| {
            let deficits: Vec<f64> = points.iter().map(|p| p.rows[j].deficit).collect();
            let corrected: Vec<f64> = ks.iter().zip(&deficits).map(|(k, v)| v / k.ln().powi(3)).collect();
            SlopeSummary {
                t,
                monotone_decreasing: deficits.windows(2).all(|w| w[1] < w[0]),
                slope: log_log_slope(&ks, &deficits),
                corrected_slope: if ks.iter().all(|&k| k > 1.0) {
                    log_log_slope(&ks, &corrected)
                } else {
                    None
                },
                max_dropped_ratio: points
                    .iter()
                    .map(|p| p.rows[j].dropped_weight / p.rows[j].deficit)
                    .fold(0.0, f64::max),
                deficits,
            }
        })
        .collect();
    let report = ScalingReport {
        points,
        control,
        control_max_deficit,
        slopes,
    };
    ctx.write_json("report.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- bounds

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SumSummary {
    pub sum_id: SumId,
    pub envelope: String,
    pub k_f: Vec<f64>,
    /// Ratios at the largest `L`.
    pub ratios: Vec<f64>,
    pub band: f64,
    pub stable: bool,
    /// `max_k |v(L_max) − v(L_prev)| / v(L_max)`; absent with a single `L`.
    pub length_change: Option<f64>,
    pub converged: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsReport {
    pub records: Vec<BoundRecord>,
    pub sums: Vec<SumSummary>,
    pub integrals: Vec<AppendixJReport>,
    pub elementary: Vec<ElementaryCheck>,
}

pub const ELEMENTARY_POINTS: [(f64, f64); 3] = [(2.0, 0.1), (10.0, 0.01), (100.0, 0.001)];

pub fn run_bounds(ctx: &mut RunContext) -> Result<BoundsReport> {
    let cfg = ctx.config.clone();
    let spec = cfg.spec.build()?;
    let rule = cfg.cutoff_rule();
    let lengths = cfg.lengths();
    let mut records = Vec::new();
    for &k in &cfg.k_f {
        for (&mult, &length) in cfg.length_over_2pi.iter().zip(&lengths) {
            let ids: Vec<SumId> = SumId::PAIR
                .iter()
                .chain(SumId::NESTED.iter().filter(|id| {
                    k <= cfg.tolerances.nested_k_f_max || !matches!(id, SumId::Nested8 | SumId::Nested9)
                }))
                .copied()
                .collect();
            let recs: Vec<BoundRecord> = ctx.point(&format!("kf{k}_L{mult}"), || {
                bound_records(cfg.d, k, length, rule.cutoff(k), &spec, &ids)
            })?;
            records.extend(recs);
        }
    }
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                serde_json::to_value(r.sum_id).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                r.d.to_string(),
                num(r.k_f),
                num(r.length),
                num(r.cutoff),
                num(r.value),
                num(r.tail),
                num(r.envelope),
                num(r.ratio),
            ]
        })
        .collect();
    ctx.write_csv(
        "bounds.csv",
        &["sum_id", "d", "k_f", "length", "cutoff", "value", "tail", "envelope", "ratio"],
        &rows,
    )?;

    let l_max = *lengths.last().unwrap();
    let l_prev = (lengths.len() >= 2).then(|| lengths[lengths.len() - 2]);
    let find = |id: SumId, k: f64, l: f64| records.iter().find(|r| r.sum_id == id && r.k_f == k && r.length == l);
    let sums = SumId::PAIR
        .iter()
        .chain(SumId::NESTED.iter())
        .map(|&id| {
            let at_max: Vec<&BoundRecord> = cfg.k_f.iter().filter_map(|&k| find(id, k, l_max)).collect();
            let ratios: Vec<f64> = at_max.iter().map(|r| r.ratio).collect();
            let band = ratio_band(&ratios);
            let length_change = l_prev.map(|lp| {
                at_max
                    .iter()
                    .filter_map(|r| find(id, r.k_f, lp).map(|p| (r.value - p.value).abs() / r.value.abs()))
                    .fold(0.0, f64::max)
            });
            SumSummary {
                sum_id: id,
                envelope: id.envelope_label().to_string(),
                k_f: at_max.iter().map(|r| r.k_f).collect(),
                ratios,
                band,
                stable: band < cfg.tolerances.ratio_band,
                converged: length_change.map(|c| c < cfg.tolerances.length_change),
                length_change,
            }
        })
        .collect();
    let integrals: Vec<AppendixJReport> = cfg
        .k_f
        .iter()
        .filter(|&&k| (2.0..=32.0).contains(&k))
        .map(|&k| ctx.point(&key_of("integrals_kf", k), || appendix_j_integrals(cfg.d, k, &spec)))
        .collect::<Result<_>>()?;
    let elementary = ELEMENTARY_POINTS
        .iter()
        .map(|&(a, e)| elementary_integral_checks(a, e))
        .collect::<Result<_>>()?;
    let report = BoundsReport {
        records,
        sums,
        integrals,
        elementary,
    };
    ctx.write_json("report.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- pair rate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Point {
    pub k_f: f64,
    pub lambda: f64,
    /// `Σ_{i<j} k_F^{2-d} ⟨ξ₀, W(|y_i − y_j|) ξ₀⟩`.
    pub c0: f64,
    /// `‖h⁰_n ξ₀‖`.
    pub big_c0: f64,
    /// `k_F^{2-d} W(0)`.
    pub scaled_w0: f64,
    /// First sign change of `W`; `None` when `W > 0` on the whole grid.
    pub core_radius: Option<f64>,
    /// `⟨|y_1 − y_2|⟩`.
    pub mean_separation: f64,
    /// Linear coefficient implied by the generators: `ω λ² c₀ / k_F^{2-d}`.
    pub expected_rate: f64,
    pub times: Vec<f64>,
    /// `‖(e^{-i h_n t} − e^{-i h̃_n t}) ξ₀‖`.
    pub deficits: Vec<f64>,
    /// `|1 − ⟨e^{-i h̃_n t} ξ₀, e^{-i h_n t} ξ₀⟩|`, the lower bound used in the proof.
    pub overlap_deficits: Vec<f64>,
    pub fit: QuadraticFit,
    pub linear_over_c0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prop2Report {
    pub points: Vec<Prop2Point>,
}

/// `Σ_{i<j} ⟨ξ, f(|y_i − y_j|) ξ⟩` on the position grid.
pub fn pair_expectation<F: FnMut(f64) -> f64>(xi: &ImpurityState, mut f: F) -> f64 {
    let grid = xi.grid;
    let d = grid.d;
    let pos = xi.position_amplitudes();
    let mut axes = vec![0usize; grid.axes()];
    let mut acc = 0.0;
    for (x, a) in pos.iter().enumerate() {
        let p = a.norm_sqr();
        if p == 0.0 {
            continue;
        }
        grid.unflatten(x, &mut axes);
        let mut s = 0.0;
        for i in 0..grid.n {
            for j in i + 1..grid.n {
                s += f(grid.periodic_distance(&axes[i * d..(i + 1) * d], &axes[j * d..(j + 1) * d]));
            }
        }
        acc += p * s;
    }
    acc
}

fn prop2_point(cfg: &ExperimentConfig, k_f: f64) -> Result<Prop2Point> {
    let spec = cfg.spec.build()?;
    let w = cfg.w.build()?;
    let length = cfg.lengths()[0];
    let grid = ImpurityGrid::new(cfg.n, cfg.d, length, cfg.grid_points)?;
    let xi0 = cfg.xi0.build(grid, cfg.seed)?;
    let lambda = cfg.lambda.lambda(cfg.d, k_f);
    // Radial table at four points per grid spacing.
    let r_max = grid.max_separation();
    let points = ((4.0 * r_max / grid.spacing()).ceil() as usize + 1).max(2);
    let table = PotentialTable::quadrature(cfg.d, k_f, &spec, &uniform_grid(r_max, points), cfg.tolerances.rel_tol)?;
    let s = scaling_factor(cfg.d, k_f);
    let scaled_w0 = table.values[0];
    let core_radius = table
        .values
        .iter()
        .position(|&v| v <= 0.0)
        .map(|i| table.r_grid[i]);
    let mut w_err = None;
    let c0 = s * pair_expectation(&xi0, |r| match table.w_at(r) {
        Ok(v) => v,
        Err(e) => {
            w_err.get_or_insert(e);
            0.0
        }
    });
    if let Some(e) = w_err {
        return Err(e);
    }
    if !(c0 > cfg.tolerances.c0_floor * scaled_w0.abs()) {
        return Err(Error::InitialStateInadmissible(c0));
    }
    let setup = |lambda, variant| EffectiveSetup {
        lambda,
        table: &table,
        w: &w,
        variant,
        pair_weight: cfg.pair_weight,
    };
    let h = build_effective_hamiltonian(grid, &setup(lambda, Variant::Full))?;
    let h_tilde = build_effective_hamiltonian(grid, &setup(lambda, Variant::Tilde))?;
    let h0 = build_effective_hamiltonian(grid, &setup(0.0, Variant::Full))?;
    let big_c0 = h0.apply(&xi0)?.norm();
    let mut deficits = Vec::new();
    let mut overlap_deficits = Vec::new();
    for &t in &cfg.t_list {
        let a = evolve_to(&xi0, &h, t)?;
        let b = evolve_to(&xi0, &h_tilde, t)?;
        deficits.push(a.distance(&b));
        overlap_deficits.push((num_complex::Complex64::new(1.0, 0.0) - b.inner(&a)).norm());
    }
    let fit = fit_linear_quadratic(&cfg.t_list, &deficits)?;
    let (mean_separation, _) = crate::effective_dynamics::pair_distance_moments(&xi0);
    Ok(Prop2Point {
        k_f,
        lambda,
        c0,
        big_c0,
        scaled_w0,
        core_radius,
        mean_separation,
        expected_rate: cfg.pair_weight * lambda * lambda * c0 / s,
        times: cfg.t_list.clone(),
        deficits,
        overlap_deficits,
        fit,
        linear_over_c0: fit.linear / c0,
    })
}

pub fn run_proposition2(ctx: &mut RunContext) -> Result<Prop2Report> {
    let cfg = ctx.config.clone();
    let mut points = Vec::new();
    for &k in &cfg.k_f {
        points.push(ctx.point(&key_of("kf", k), || prop2_point(&cfg, k))?);
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .flat_map(|p| {
            p.times.iter().zip(p.deficits.iter().zip(&p.overlap_deficits)).map(move |(t, (d, o))| {
                vec![num(p.k_f), num(*t), num(*d), num(*o), num(p.c0), num(p.fit.linear)]
            })
        })
        .collect();
    ctx.write_csv(
        "prop2.csv",
        &["k_f", "t", "deficit", "overlap_deficit", "c0", "fit_linear"],
        &rows,
    )?;
    let report = Prop2Report { points };
    ctx.write_json("report.json", &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- certify / dry run

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyReport {
    pub spec: AssumptionCertificate,
    pub w: ImpurityCertificate,
}

pub fn certify(cfg: &ExperimentConfig) -> Result<CertifyReport> {
    let spec = cfg.spec.build()?;
    Ok(CertifyReport {
        spec: certify_assumptions(&spec, spec.envelope_r(), cfg.tolerances.certify_samples)?,
        w: cfg.w.build()?.certify()?,
    })
}

/// Basis dimensions and cost estimates, one line per grid point. Fails with
/// [`Error::ResourceLimit`] if a point exceeds its cap.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let rule = cfg.cutoff_rule();
    match cfg.experiment {
        Experiment::Potential => {
            out.push(format!(
                "{} k_F values x {} radii = {} quadratures",
                cfg.k_f.len(),
                cfg.r_points,
                cfg.k_f.len() * cfg.r_points
            ));
        }
        Experiment::Scaling => {
            let length = cfg.lengths()[0];
            let grid = ImpurityGrid::new(cfg.n, cfg.d, length, cfg.grid_points)?;
            for &k in &cfg.k_f {
                let lat = MomentumLattice::new(cfg.d, length, rule.cutoff(k))?;
                let ball = lat.fermi_ball(k)?;
                let dim = basis_dimension(&lat, &ball, cfg.m_max, &grid);
                let bytes = dim as f64 * 16.0 * (cfg.tolerances.krylov_max_dim as f64 + 4.0);
                out.push(format!(
                    "k_F {k}: {} modes ({} in ball), block dim {dim}, Krylov memory ~{:.2} GB",
                    lat.len(),
                    ball.count(),
                    bytes / 1e9
                ));
                if dim > cfg.tolerances.basis_cap as u128 {
                    return Err(Error::ResourceLimit {
                        what: "Fock basis",
                        count: usize::try_from(dim).unwrap_or(usize::MAX),
                        cap: cfg.tolerances.basis_cap,
                    });
                }
            }
        }
        Experiment::Bounds => {
            for &k in &cfg.k_f {
                for &length in &cfg.lengths() {
                    let lat = MomentumLattice::with_cap(cfg.d, length, rule.cutoff(k), usize::MAX)?;
                    let ball = lat.fermi_ball(k)?;
                    let (b, o) = (ball.count() as f64, (lat.len() - ball.count()) as f64);
                    out.push(format!(
                        "k_F {k}, L {length:.4}: |ball| {b}, |outside| {o}, pair terms {:.2e}, nested flops {:.2e}",
                        b * o,
                        o * o * b
                    ));
                }
            }
        }
        Experiment::Proposition2 => {
            let grid = ImpurityGrid::new(cfg.n, cfg.d, cfg.lengths()[0], cfg.grid_points)?;
            out.push(format!(
                "{} grid points, {} k_F values x {} times",
                grid.len(),
                cfg.k_f.len(),
                cfg.t_list.len()
            ));
        }
    }
    Ok(out)
}

/// Runs the configured experiment; returns the manifest.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Manifest> {
    let mut ctx = RunContext::new(cfg, out)?;
    match cfg.experiment {
        Experiment::Potential => {
            run_potential(&mut ctx)?;
        }
        Experiment::Scaling => {
            run_scaling(&mut ctx)?;
        }
        Experiment::Bounds => {
            run_bounds(&mut ctx)?;
        }
        Experiment::Proposition2 => {
            run_proposition2(&mut ctx)?;
        }
    }
    ctx.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            r#"{{"schema_version": 1, "experiment": "bounds", "d": 1, "k_f": [2, 4],
                "spec": {{"kind": "yukawa", "screening": 1.0}}{extra}}}"#
        )
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_json(&minimal("")).unwrap();
        assert_eq!(cfg.lambda, LambdaRule::Scaled);
        assert_eq!(cfg.pair_weight, 2.0);
        assert_eq!(cfg.cutoff_rule(), CutoffRule::SUMS);
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_ladders_rejected() {
        for extra in [
            r#", "k_F": [2]"#,
            r#", "tolerances": {"rel_tol": 1e-6, "typo": 1}"#,
            r#", "lambda": {"rule": "fixed", "value": 1, "extra": 0}"#,
            r#", "length_over_2pi": []"#,
            r#", "xi0": {"family": "relative_gaussian", "sigma": 0.5, "ofset": [0,0,0]}"#,
        ] {
            let err = ExperimentConfig::from_json(&minimal(extra)).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{extra}: {err}");
        }
        let err = ExperimentConfig::from_json(&minimal("").replace("[2, 4]", "[4, 2]")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = ExperimentConfig::from_json(&minimal("").replace("\"schema_version\": 1", "\"schema_version\": 7"))
            .unwrap_err();
        assert!(err.to_string().contains("schema_version"));
    }

    #[test]
    fn lambda_rule() {
        assert_eq!(LambdaRule::Scaled.lambda(1, 4.0), 2.0);
        assert_eq!(LambdaRule::Scaled.lambda(2, 9.0), 1.0);
        assert_eq!(LambdaRule::Fixed { value: 0.3 }.lambda(3, 9.0), 0.3);
    }

    #[test]
    fn fits() {
        let t = [0.01, 0.02, 0.04, 0.08];
        let y: Vec<f64> = t.iter().map(|t| 0.7 * t - 2.0 * t * t).collect();
        let f = fit_linear_quadratic(&t, &y).unwrap();
        assert!((f.linear - 0.7).abs() < 1e-10 && (f.quadratic + 2.0).abs() < 1e-8);
        let k = [2.0, 4.0, 8.0];
        let d: Vec<f64> = k.iter().map(|k: &f64| 3.0 * k.powf(-0.5)).collect();
        assert!((log_log_slope(&k, &d).unwrap() + 0.5).abs() < 1e-12);
        assert!(log_log_slope(&k, &[1.0, 0.0, 1.0]).is_none());
    }

    #[test]
    fn resumable_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_json(&minimal(r#", "k_f": [2]"#).replace(r#""k_f": [2, 4],"#, "")).unwrap();
        let m1 = run(&cfg, Some(dir.path())).unwrap();
        assert!(m1.points_computed > 0 && m1.points_reused == 0);
        let first = fs::read(m1.run_dir.join("bounds.csv")).unwrap();
        let m2 = run(&cfg, Some(dir.path())).unwrap();
        assert_eq!(m2.points_computed, 0);
        assert_eq!(m2.points_reused, m1.points_computed);
        assert_eq!(fs::read(m2.run_dir.join("bounds.csv")).unwrap(), first);
    }

    #[test]
    fn far_apart_pair_is_inadmissible() {
        let cfg = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "experiment": "proposition2", "d": 1, "n": 2, "k_f": [4],
                "length_over_2pi": [4], "grid_points": 128, "t_list": [0.01, 0.02],
                "spec": {"kind": "yukawa", "screening": 1.0},
                "xi0": {"family": "relative_gaussian", "offset": [12.5, 0, 0], "sigma": 0.3},
                "pair_weight": 1}"#,
        )
        .unwrap();
        let err = prop2_point(&cfg, 4.0).unwrap_err();
        assert!(matches!(err, Error::InitialStateInadmissible(_)), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}
