//! Interaction profiles: the Fourier-side impurity–fermion profile
//! `v̂_∞(|k|)` and the impurity–impurity potential `w`, together with
//! sample-based certificates for the envelope assumptions.
//!
//! The finite-volume coefficients are `v̂_L(k) = v̂_∞(k)` on lattice points,
//! so every lattice sum simply evaluates the profile at `|k|`.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper-envelope violations above this are fatal.
pub const ENVELOPE_TOLERANCE: f64 = 1e-12;

/// Default number of radii probed by [`certify_assumptions`].
pub const DEFAULT_SAMPLE_COUNT: usize = 1000;

/// `(|k|^2 + R)^-1`.
pub fn yukawa_hat(k_abs: f64, screening: f64) -> f64 {
    1.0 / (k_abs * k_abs + screening)
}

/// `1/2` on the closed unit ball, zero outside.
pub fn step_hat(k_abs: f64) -> f64 {
    step_hat_with_height(k_abs, 0.5)
}

pub fn step_hat_with_height(k_abs: f64, height: f64) -> f64 {
    // The guard keeps lattice points on the unit sphere inside despite rounding.
    if k_abs * k_abs <= 1.0 + 1e-12 {
        height
    } else {
        0.0
    }
}

/// Piecewise-linear radial table; values below the first radius are held
/// constant and values beyond the last radius are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialTable {
    radii: Vec<f64>,
    values: Vec<f64>,
}

impl RadialTable {
    pub fn new(radii: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if radii.is_empty() || radii.len() != values.len() {
            return Err(Error::InvalidParameter(
                "radial table needs matching, non-empty columns".into(),
            ));
        }
        if radii[0] < 0.0 || radii.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "radial table radii must be non-negative and strictly increasing".into(),
            ));
        }
        if radii.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("radial table contains non-finite entries".into()));
        }
        Ok(RadialTable { radii, values })
    }

    /// Parses whitespace- or comma-separated `(|k|, value)` rows; blank lines
    /// and lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut radii = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .collect();
            if cols.len() != 2 {
                return Err(Error::Config(format!(
                    "table line {}: expected two columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("table line {}: {e}", lineno + 1)))
            };
            radii.push(parse(cols[0])?);
            values.push(parse(cols[1])?);
        }
        Self::new(radii, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn eval(&self, r: f64) -> f64 {
        let n = self.radii.len();
        if r <= self.radii[0] {
            return self.values[0];
        }
        if r > self.radii[n - 1] {
            return 0.0;
        }
        let hi = self.radii.partition_point(|&x| x < r).min(n - 1);
        let lo = hi - 1;
        let t = (r - self.radii[lo]) / (self.radii[hi] - self.radii[lo]);
        self.values[lo] + t * (self.values[hi] - self.values[lo])
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn last_radius(&self) -> f64 {
        *self.radii.last().unwrap()
    }
}

type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Profile {
    Zero,
    Yukawa { screening: f64 },
    Step { height: f64 },
    Table(RadialTable),
    Function { id: String, f: RadialFn },
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Function { id, .. } => write!(f, "Function({id})"),
            Profile::Table(t) => write!(f, "Table({} rows)", t.radii.len()),
            other => write!(f, "{}", ProfileId(other)),
        }
    }
}

struct ProfileId<'a>(&'a Profile);

impl fmt::Display for ProfileId<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Profile::Zero => write!(f, "zero"),
            Profile::Yukawa { screening } => write!(f, "yukawa(R={screening})"),
            Profile::Step { height } => write!(f, "step(h={height})"),
            Profile::Table(_) => write!(f, "table"),
            Profile::Function { id, .. } => write!(f, "{id}"),
        }
    }
}

/// A rotationally invariant impurity–fermion profile `v̂_∞(|k|)` together
/// with the screening constant `R` of its `(k^2 + R)^-1` envelope.
#[derive(Debug, Clone)]
pub struct PotentialSpec {
    profile: Profile,
    envelope_r: f64,
}

impl PotentialSpec {
    pub fn zero() -> Self {
        PotentialSpec {
            profile: Profile::Zero,
            envelope_r: 1.0,
        }
    }

    pub fn yukawa(screening: f64) -> Result<Self> {
        if !(screening > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "screening R = {screening} must be positive"
            )));
        }
        Ok(PotentialSpec {
            profile: Profile::Yukawa { screening },
            envelope_r: screening,
        })
    }

    /// The step profile `1/2 · 1{k^2 ≤ 1}` with envelope `R = 1`.
    pub fn step() -> Self {
        Self::step_with_height(0.5)
    }

    pub fn step_with_height(height: f64) -> Self {
        PotentialSpec {
            profile: Profile::Step { height },
            envelope_r: 1.0,
        }
    }

    pub fn table(table: RadialTable, envelope_r: f64) -> Result<Self> {
        if !(envelope_r > 0.0) {
            return Err(Error::InvalidParameter("envelope R must be positive".into()));
        }
        Ok(PotentialSpec {
            profile: Profile::Table(table),
            envelope_r,
        })
    }

    pub fn from_fn<F>(id: impl Into<String>, envelope_r: f64, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        PotentialSpec {
            profile: Profile::Function {
                id: id.into(),
                f: Arc::new(f),
            },
            envelope_r,
        }
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn envelope_r(&self) -> f64 {
        self.envelope_r
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.profile, Profile::Zero)
            || matches!(self.profile, Profile::Step { height } if height == 0.0)
    }

    /// Largest `|k|` with a nonzero value, if the profile has compact support.
    pub fn support_radius(&self) -> Option<f64> {
        match &self.profile {
            Profile::Zero => Some(0.0),
            Profile::Step { .. } => Some(1.0),
            Profile::Table(t) => Some(t.last_radius()),
            _ => None,
        }
    }

    pub fn eval(&self, k_abs: f64) -> f64 {
        match &self.profile {
            Profile::Zero => 0.0,
            Profile::Yukawa { screening } => yukawa_hat(k_abs, *screening),
            Profile::Step { height } => step_hat_with_height(k_abs, *height),
            Profile::Table(t) => t.eval(k_abs),
            Profile::Function { f, .. } => f(k_abs),
        }
    }

    pub fn id(&self) -> String {
        ProfileId(&self.profile).to_string()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionCertificate {
    pub spec_id: String,
    pub screening: f64,
    pub sample_count: usize,
    /// `max_k (|v̂(k)| - (k^2+R)^-1)`; non-positive when the envelope holds.
    pub envelope_margin: f64,
    pub envelope_worst_k: f64,
    /// `min_{k^2 ≤ 1} (|v̂(k)| - (1+R)^-1)`.
    pub core_margin: f64,
    pub core_bound_holds: bool,
    pub warnings: Vec<String>,
}

fn sample_radii(sample_count: usize) -> Vec<f64> {
    let (lo, hi) = (1e-4_f64, 1e3_f64);
    let n = sample_count.max(2) - 1;
    let mut radii = Vec::with_capacity(n + 2);
    radii.push(0.0);
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        radii.push(lo * (hi / lo).powf(t));
    }
    radii.push(1.0);
    radii.sort_by(f64::total_cmp);
    radii.dedup();
    radii
}

/// Checks `|v̂(k)| ≤ (k^2+R)^-1` on a logarithmic radial grid in `[0, 10^3]`
/// and reports the core lower bound `|v̂(k)| ≥ (1+R)^-1` for `k^2 ≤ 1`.
///
/// A missing core bound only produces a warning.
pub fn certify_assumptions(
    spec: &PotentialSpec,
    screening: f64,
    sample_count: usize,
) -> Result<AssumptionCertificate> {
    if sample_count < 1000 {
        return Err(Error::InvalidParameter(format!(
            "sample_count {sample_count} below the minimum of 1000"
        )));
    }
    if !(screening > 0.0) {
        return Err(Error::InvalidParameter(format!("screening R = {screening} must be positive")));
    }
    let mut envelope_margin = f64::NEG_INFINITY;
    let mut envelope_worst_k = 0.0;
    let mut core_margin = f64::INFINITY;
    let core_floor = 1.0 / (1.0 + screening);
    for k in sample_radii(sample_count) {
        let v = spec.eval(k).abs();
        let margin = v - yukawa_hat(k, screening);
        if margin > envelope_margin {
            envelope_margin = margin;
            envelope_worst_k = k;
        }
        if k * k <= 1.0 {
            core_margin = core_margin.min(v - core_floor);
        }
    }
    if envelope_margin > ENVELOPE_TOLERANCE {
        return Err(Error::AssumptionViolated {
            k: envelope_worst_k,
            excess: envelope_margin,
        });
    }
    let core_bound_holds = core_margin >= -ENVELOPE_TOLERANCE;
    let mut warnings = Vec::new();
    if !core_bound_holds {
        warnings.push(format!(
            "core lower bound |v(k)| >= (1+R)^-1 fails by {:.3e}; core-radius and pair-rate experiments are not covered",
            -core_margin
        ));
        log::warn!("{}: {}", spec.id(), warnings[0]);
    }
    Ok(AssumptionCertificate {
        spec_id: spec.id(),
        screening,
        sample_count,
        envelope_margin,
        envelope_worst_k,
        core_margin,
        core_bound_holds,
        warnings,
    })
}

/// Impurity–impurity potential `w`, a radial function of the separation.
#[derive(Debug, Clone, Default)]
pub enum ImpurityPotential {
    #[default]
    Zero,
    /// Bounded radial table, certified by `c = sup|w|^2 < 1`.
    Bounded(RadialTable),
    /// Table accepted with a user-supplied relative-bound constant.
    Uncertified { table: RadialTable, c: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImpurityCertificate {
    pub sup_abs: f64,
    pub relative_bound_c: f64,
    pub certified: bool,
}

impl ImpurityPotential {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            ImpurityPotential::Zero => 0.0,
            ImpurityPotential::Bounded(t) | ImpurityPotential::Uncertified { table: t, .. } => {
                t.eval(r.abs())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ImpurityPotential::Zero)
    }

    pub fn certify(&self) -> Result<ImpurityCertificate> {
        match self {
            ImpurityPotential::Zero => Ok(ImpurityCertificate {
                sup_abs: 0.0,
                relative_bound_c: 0.0,
                certified: true,
            }),
            ImpurityPotential::Bounded(t) => {
                let sup_abs = t.max_abs();
                if sup_abs >= 1.0 {
                    return Err(Error::ImpurityPotential(format!(
                        "sup|w| = {sup_abs} must be below 1 for the bounded certificate"
                    )));
                }
                Ok(ImpurityCertificate {
                    sup_abs,
                    relative_bound_c: sup_abs * sup_abs,
                    certified: true,
                })
            }
            ImpurityPotential::Uncertified { table, c } => {
                if !(0.0..1.0).contains(c) {
                    return Err(Error::ImpurityPotential(format!(
                        "relative bound constant {c} not in [0, 1)"
                    )));
                }
                Ok(ImpurityCertificate {
                    sup_abs: table.max_abs(),
                    relative_bound_c: *c,
                    certified: false,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_values() {
        assert_eq!(yukawa_hat(0.0, 1.0), 1.0);
        assert_eq!(yukawa_hat(1.0, 1.0), 0.5);
        assert!((yukawa_hat(3.0, 2.0) - 1.0 / 11.0).abs() < 1e-15);
        assert_eq!(step_hat(0.0), 0.5);
        assert_eq!(step_hat(1.0), 0.5);
        assert_eq!(step_hat(1.0001), 0.0);
    }

    #[test]
    fn yukawa_decays_monotonically() {
        let mut prev = f64::INFINITY;
        for i in 0..500 {
            let v = yukawa_hat(i as f64 * 0.05, 0.7);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn certificates() {
        let c = certify_assumptions(&PotentialSpec::yukawa(1.0).unwrap(), 1.0, 1000).unwrap();
        assert_eq!(c.envelope_margin, 0.0);
        assert!(c.core_bound_holds);

        let c = certify_assumptions(&PotentialSpec::step(), 1.0, 1000).unwrap();
        assert!(c.envelope_margin <= 0.0);
        assert!(c.core_bound_holds);
        assert!(c.core_margin.abs() < 1e-15);

        let doubled = PotentialSpec::from_fn("2/(k^2+1)", 1.0, |k| 2.0 / (k * k + 1.0));
        match certify_assumptions(&doubled, 1.0, 1000) {
            Err(Error::AssumptionViolated { k, excess }) => {
                assert_eq!(k, 0.0);
                assert!((excess - 1.0).abs() < 1e-12);
            }
            other => panic!("expected violation, got {other:?}"),
        }

        // envelope fine but core bound missing: warning only
        let weak = PotentialSpec::yukawa(4.0).unwrap();
        let c = certify_assumptions(&weak, 1.0, 1000).unwrap();
        assert!(!c.core_bound_holds);
        assert_eq!(c.warnings.len(), 1);

        assert!(certify_assumptions(&weak, 1.0, 10).is_err());
    }

    #[test]
    fn radial_table_interpolates() {
        let t = RadialTable::parse("# k value\n0 1.0\n1, 0.5\n\n3 0.0\n").unwrap();
        assert_eq!(t.eval(0.0), 1.0);
        assert!((t.eval(0.5) - 0.75).abs() < 1e-15);
        assert!((t.eval(2.0) - 0.25).abs() < 1e-15);
        assert_eq!(t.eval(3.5), 0.0);
        assert!(RadialTable::parse("0 1 2\n").is_err());
        assert!(RadialTable::parse("1 1\n0 1\n").is_err());
    }

    #[test]
    fn impurity_certificates() {
        assert_eq!(ImpurityPotential::Zero.certify().unwrap().relative_bound_c, 0.0);
        let t = RadialTable::new(vec![0.0, 1.0], vec![-0.5, 0.2]).unwrap();
        let c = ImpurityPotential::Bounded(t.clone()).certify().unwrap();
        assert_eq!(c.sup_abs, 0.5);
        assert_eq!(c.relative_bound_c, 0.25);
        let big = RadialTable::new(vec![0.0, 1.0], vec![1.5, 0.0]).unwrap();
        assert!(ImpurityPotential::Bounded(big.clone()).certify().is_err());
        let u = ImpurityPotential::Uncertified { table: big, c: 0.3 }.certify().unwrap();
        assert!(!u.certified);
        // radial evaluation makes w even
        let w = ImpurityPotential::Bounded(t);
        assert_eq!(w.eval(0.3), w.eval(-0.3));
    }
}
