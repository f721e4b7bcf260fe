//! Transition-amplitude sums and error functionals that control the
//! effective description.
//!
//! Lattice sums are normalized as `L^{-2d} Σ_{(l,k)∈T_F}` and truncated at
//! the lattice cutoff; every value carries a tail estimate. The five nested
//! sums are evaluated as dense matrix products over the ball `B` and its
//! complement `O` inside the cutoff, with
//!
//! ```text
//! G[l,k] = |v̂(l-k)| / (l² - k² + 1),   V[l,n] = |v̂(l-n)|,   X = V G
//! (5) ‖X‖²   (6) ‖G V_BB‖²   (7) Σ G∘X   (8) ‖Gᵀ X‖²   (9) ‖X Gᵀ‖²
//! ```
//!
//! up to the powers of `L^{-d}`. In (7) the middle index runs over `B^c`,
//! as in the integral it is estimated by (a middle index inside the ball
//! makes `n² - k² + 1` vanish on the lattice).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective_potential::sphere_area;
use crate::error::{Error, Result};
use crate::lattice::{int_norm2, int_sub, FermiBall, IntVec, MomentumLattice};
use crate::potentials::PotentialSpec;
use crate::quadrature::{integrate, integrate_breaks, integrate_to_infinity, QuadOptions};

/// Largest tail accepted relative to the value.
pub const TAIL_TOLERANCE: f64 = 0.01;
/// Largest `|B^c|` for the dense nested sums.
pub const MAX_NESTED_OUTSIDE: usize = 6000;

fn check_kf(d: usize, k_f: f64) -> Result<()> {
    if !(1..=3).contains(&d) {
        return Err(Error::InvalidParameter(format!("dimension {d} not in 1..=3")));
    }
    if !(k_f >= 2.0) {
        return Err(Error::InvalidParameter(format!("k_F = {k_f} below 2")));
    }
    Ok(())
}

/// `γ(d, k_F)`: `k_F^{2d-5} (ln k_F)³` for `d = 2, 3`, `k_F^{-2} (ln k_F)³` for `d = 1`.
pub fn gamma(d: usize, k_f: f64) -> Result<f64> {
    check_kf(d, k_f)?;
    let p = if d == 1 { -2.0 } else { 2.0 * d as f64 - 5.0 };
    Ok(k_f.powf(p) * k_f.ln().powi(3))
}

/// The three lines of `Γ(d, k_F, λ, t)` (orders `|λ|`, `λ²`, `|λ|³`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BigGamma {
    pub linear: f64,
    pub quadratic: f64,
    pub cubic: f64,
    pub total: f64,
}

pub fn big_gamma(d: usize, k_f: f64, lambda: f64, t: f64) -> Result<BigGamma> {
    let g = gamma(d, k_f)?;
    let df = d as f64;
    let ln = k_f.ln();
    let lam = lambda.abs();
    let at = t.abs();
    let growth = 1.0 + lambda * lambda * k_f.powf(df - 2.0);
    let half = k_f.powf((df - 3.0) / 2.0) * ln.sqrt();
    let full = k_f.powf(df - 3.0) * ln;
    let linear = lam * (1.0 + at * growth) * half;
    let quadratic = lambda * lambda * (full + at * growth * full + at * g.sqrt());
    let cubic = lam.powi(3) * at * (k_f.powf((3.0 * df - 7.0) / 2.0) * ln + g.sqrt() * half + g);
    Ok(BigGamma {
        linear,
        quadratic,
        cubic,
        total: linear + quadratic + cubic,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SumId {
    /// `Σ |v̂|²`
    PairA,
    /// `Σ |v̂|² / (l² - k² + 1)`
    PairB,
    /// `Σ |v̂|² / (l² - k² + 1)²`
    PairC,
    /// `Σ |v̂|² (l-k)² / (l² - k² + (l-k)² + 1)²`
    PairD,
    Nested5,
    Nested6,
    Nested7,
    Nested8,
    Nested9,
}

impl SumId {
    pub const PAIR: [SumId; 4] = [SumId::PairA, SumId::PairB, SumId::PairC, SumId::PairD];
    pub const NESTED: [SumId; 5] = [SumId::Nested5, SumId::Nested6, SumId::Nested7, SumId::Nested8, SumId::Nested9];

    /// Scaling envelope of the sum at large `k_F`.
    pub fn envelope(self, d: usize, k_f: f64) -> Result<f64> {
        check_kf(d, k_f)?;
        let df = d as f64;
        let ln = k_f.ln();
        Ok(match self {
            SumId::PairA => k_f.powf(df - 1.0),
            SumId::PairB => k_f.powf(df - 2.0),
            SumId::PairC => k_f.powf(df - 3.0) * ln,
            SumId::PairD => k_f.powf(df - 3.0) * ln * ln,
            SumId::Nested5 | SumId::Nested6 | SumId::Nested7 => gamma(d, k_f)?,
            SumId::Nested8 | SumId::Nested9 => gamma(d, k_f)?.powi(2),
        })
    }

    pub fn envelope_label(self) -> &'static str {
        match self {
            SumId::PairA => "k_F^(d-1)",
            SumId::PairB => "k_F^(d-2)",
            SumId::PairC => "k_F^(d-3) ln k_F",
            SumId::PairD => "k_F^(d-3) (ln k_F)^2",
            SumId::Nested5 | SumId::Nested6 | SumId::Nested7 => "gamma",
            SumId::Nested8 | SumId::Nested9 => "gamma^2",
        }
    }
}

/// One evaluated sum at one `(d, k_F, L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub sum_id: SumId,
    pub d: usize,
    pub k_f: f64,
    pub length: f64,
    pub cutoff: f64,
    pub value: f64,
    pub tail: f64,
    pub envelope: f64,
    pub ratio: f64,
}

fn v2_table(lat: &MomentumLattice, spec: &PotentialSpec, n2max: i64) -> Vec<f64> {
    let h = lat.spacing();
    (0..=n2max).map(|n2| spec.eval(h * (n2 as f64).sqrt()).abs()).collect()
}

fn max_norm2(zs: &[IntVec], d: usize) -> i64 {
    zs.iter().map(|z| z[..d].iter().map(|&c| (c as i64).abs()).max().unwrap_or(0)).max().unwrap_or(0)
}

/// Raw (unnormalized) sums (a)–(d) over `ks × ls`.
fn pair_terms(ks: &[IntVec], ls: &[IntVec], lat: &MomentumLattice, spec: &PotentialSpec) -> [f64; 4] {
    let d = lat.dim();
    let h2 = lat.spacing().powi(2);
    let zmax = max_norm2(ks, d) + max_norm2(ls, d);
    let vabs = v2_table(lat, spec, d as i64 * zmax * zmax);
    ks.par_iter()
        .map(|zk| {
            let k2 = h2 * int_norm2(zk) as f64;
            let mut acc = [0.0; 4];
            for zl in ls {
                let n2 = int_norm2(&int_sub(zl, zk));
                let v = vabs[n2 as usize];
                if v == 0.0 {
                    continue;
                }
                let v2 = v * v;
                let gap = h2 * int_norm2(zl) as f64 - k2 + 1.0;
                let q2 = h2 * n2 as f64;
                acc[0] += v2;
                acc[1] += v2 / gap;
                acc[2] += v2 / (gap * gap);
                acc[3] += v2 * q2 / ((gap + q2) * (gap + q2));
            }
            acc
        })
        .reduce(|| [0.0; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]])
}

/// Sums (a)–(d) with tails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSums {
    pub values: [f64; 4],
    /// Direct sum over the shell between the cutoff and twice the cutoff
    /// plus an envelope bound beyond.
    pub tails: [f64; 4],
}

pub fn lemma2_sums(lattice: &MomentumLattice, ball: &FermiBall, spec: &PotentialSpec) -> Result<PairSums> {
    let d = lattice.dim();
    let norm = lattice.length().powi(-2 * d as i32);
    let ks: Vec<IntVec> = ball.members().iter().map(|&i| lattice.coords(i)).collect();
    let ls: Vec<IntVec> = lattice.outside_modes(ball).map(|i| lattice.coords(i)).collect();
    if spec.is_zero() {
        return Ok(PairSums {
            values: [0.0; 4],
            tails: [0.0; 4],
        });
    }
    let raw = pair_terms(&ks, &ls, lattice, spec);
    let values = raw.map(|x| x * norm);

    let outer = 2.0 * lattice.cutoff();
    let ext = MomentumLattice::with_cap(d, lattice.length(), outer, usize::MAX)?;
    let shell: Vec<IntVec> = ext.modes().iter().filter(|z| lattice.index_of(z).is_none()).copied().collect();
    let shell_sum = pair_terms(&ks, &shell, lattice, spec).map(|x| x * norm);
    let beyond = envelope_remainder(d, ball.k_f(), lattice.length(), ks.len(), outer, spec)?;
    let mut tails = [0.0; 4];
    for j in 0..4 {
        tails[j] = shell_sum[j] + beyond[j];
        if tails[j] > TAIL_TOLERANCE * values[j] {
            return Err(Error::CutoffTooSmall(format!(
                "tail of sum {:?} is {:.3e} of its value at cutoff {}",
                SumId::PAIR[j],
                tails[j] / values[j],
                lattice.cutoff()
            )));
        }
    }
    Ok(PairSums { values, tails })
}

/// Bound on the terms with `|l| > radius` from the `(k² + R)^{-1}` envelope:
/// for `|k| ≤ k_F` and decreasing `f`, a lattice sum over `|l| > radius` is
/// at most the integral over `|x| > radius − δ` of `f(|x| − δ)`, with `δ`
/// the half cell diagonal.
fn envelope_remainder(d: usize, k_f: f64, length: f64, n_ball: usize, radius: f64, spec: &PotentialSpec) -> Result<[f64; 4]> {
    let delta = 0.5 * (d as f64).sqrt() * 2.0 * PI / length;
    let start = radius - delta;
    if start - delta <= k_f {
        return Ok([f64::INFINITY; 4]);
    }
    if let Some(s) = spec.support_radius() {
        if s < start - delta - k_f {
            return Ok([0.0; 4]);
        }
    }
    let r_env = spec.envelope_r();
    let pref = n_ball as f64 / length.powi(d as i32) * (2.0 * PI).powi(-(d as i32)) * sphere_area(d);
    let mut out = [0.0; 4];
    for (j, slot) in out.iter_mut().enumerate() {
        let f = |r: f64| {
            let rho = r - delta;
            let q = rho - k_f;
            let env = 1.0 / (q * q + r_env);
            let gap = rho * rho - k_f * k_f + 1.0;
            let g = match j {
                0 => 1.0,
                2 => 1.0 / (gap * gap),
                _ => 1.0 / gap,
            };
            r.powi(d as i32 - 1) * env * env * g
        };
        *slot = pref * integrate_to_infinity(f, start, QuadOptions::rel(1e-8))?.value;
    }
    Ok(out)
}

/// Raw nested sums (5)–(9), normalized.
fn nested_values(lat: &MomentumLattice, ball: &FermiBall, spec: &PotentialSpec) -> Result<[f64; 5]> {
    let d = lat.dim();
    let ld = lat.length().powi(d as i32);
    let h2 = lat.spacing().powi(2);
    let ks: Vec<IntVec> = ball.members().iter().map(|&i| lat.coords(i)).collect();
    let ls: Vec<IntVec> = lat.outside_modes(ball).map(|i| lat.coords(i)).collect();
    if ls.len() > MAX_NESTED_OUTSIDE {
        return Err(Error::ResourceLimit {
            what: "outside modes for nested sums",
            count: ls.len(),
            cap: MAX_NESTED_OUTSIDE,
        });
    }
    let zmax = max_norm2(&ls, d);
    let vabs = v2_table(lat, spec, 4 * d as i64 * zmax * zmax);
    let v = |a: &IntVec, b: &IntVec| vabs[int_norm2(&int_sub(a, b)) as usize];
    let (nb, no) = (ks.len(), ls.len());
    let g = DMatrix::from_fn(no, nb, |l, k| {
        v(&ls[l], &ks[k]) / (h2 * (int_norm2(&ls[l]) - int_norm2(&ks[k])) as f64 + 1.0)
    });
    let v_oo = DMatrix::from_fn(no, no, |l, n| v(&ls[l], &ls[n]));
    let v_bb = DMatrix::from_fn(nb, nb, |k, m| v(&ks[k], &ks[m]));
    let x = &v_oo * &g;
    let s5 = x.norm_squared() / ld.powi(4);
    let s6 = (&g * &v_bb).norm_squared() / ld.powi(4);
    let s7 = g.component_mul(&x).sum() / ld.powi(3);
    let s8 = (g.transpose() * &x).norm_squared() / ld.powi(6);
    let s9 = (&x * g.transpose()).norm_squared() / ld.powi(6);
    Ok([s5, s6, s7, s8, s9])
}

/// Sums (5)–(9) with tails.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NestedSums {
    pub values: [f64; 5],
    /// Increase of each sum when the cutoff is doubled. All terms are
    /// nonnegative and the index sets grow, so the sums grow monotonically.
    pub tails: [f64; 5],
}

pub fn lemma_a1_sums(lattice: &MomentumLattice, ball: &FermiBall, spec: &PotentialSpec) -> Result<NestedSums> {
    if spec.is_zero() {
        return Ok(NestedSums {
            values: [0.0; 5],
            tails: [0.0; 5],
        });
    }
    let values = nested_values(lattice, ball, spec)?;
    let ext = MomentumLattice::new(lattice.dim(), lattice.length(), 2.0 * lattice.cutoff())?;
    let ext_ball = ext.fermi_ball(ball.k_f())?;
    let wide = nested_values(&ext, &ext_ball, spec)?;
    let mut tails = [0.0; 5];
    for j in 0..5 {
        tails[j] = (wide[j] - values[j]).max(0.0);
        if tails[j] > TAIL_TOLERANCE * values[j] {
            return Err(Error::CutoffTooSmall(format!(
                "tail of sum {:?} is {:.3e} of its value at cutoff {}",
                SumId::NESTED[j],
                tails[j] / values[j],
                lattice.cutoff()
            )));
        }
    }
    Ok(NestedSums { values, tails })
}

fn record(id: SumId, lat: &MomentumLattice, k_f: f64, value: f64, tail: f64) -> Result<BoundRecord> {
    let envelope = id.envelope(lat.dim(), k_f)?;
    Ok(BoundRecord {
        sum_id: id,
        d: lat.dim(),
        k_f,
        length: lat.length(),
        cutoff: lat.cutoff(),
        value,
        tail,
        envelope,
        ratio: value / envelope,
    })
}

/// Records for the requested sums at one `(d, k_F, L, cutoff)`.
pub fn bound_records(
    d: usize,
    k_f: f64,
    length: f64,
    cutoff: f64,
    spec: &PotentialSpec,
    ids: &[SumId],
) -> Result<Vec<BoundRecord>> {
    check_kf(d, k_f)?;
    let lat = MomentumLattice::with_cap(d, length, cutoff, usize::MAX)?;
    let ball = lat.fermi_ball(k_f)?;
    let mut out = Vec::new();
    if ids.iter().any(|id| SumId::PAIR.contains(id)) {
        let s = lemma2_sums(&lat, &ball, spec)?;
        for (j, id) in SumId::PAIR.iter().enumerate() {
            if ids.contains(id) {
                out.push(record(*id, &lat, k_f, s.values[j], s.tails[j])?);
            }
        }
    }
    if ids.iter().any(|id| SumId::NESTED.contains(id)) {
        let s = lemma_a1_sums(&lat, &ball, spec)?;
        for (j, id) in SumId::NESTED.iter().enumerate() {
            if ids.contains(id) {
                out.push(record(*id, &lat, k_f, s.values[j], s.tails[j])?);
            }
        }
    }
    Ok(out)
}

/// `max / min` of a set of positive ratios (`∞` if any is non-positive).
pub fn ratio_band(ratios: &[f64]) -> f64 {
    let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Both elementary double integrals over `[-a, 0] × [0, a]` and the bounds
/// `5a ln(3a) + ε ln(1/ε)` and `2 ln(2a) + ln(1/ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementaryCheck {
    pub a: f64,
    pub eps: f64,
    pub first: f64,
    pub first_bound: f64,
    pub second: f64,
    pub second_bound: f64,
}

impl ElementaryCheck {
    pub fn first_margin(&self) -> f64 {
        self.first_bound - self.first
    }

    pub fn second_margin(&self) -> f64 {
        self.second_bound - self.second
    }

    pub fn holds(&self) -> bool {
        self.first_margin() > 0.0 && self.second_margin() > 0.0
    }
}

fn double_integral(a: f64, eps: f64, power: i32) -> Result<f64> {
    let inner = QuadOptions::rel(1e-11);
    let mut failure = None;
    let outer = integrate(
        |r| match integrate(|s| (r - s + eps).powi(-power), -a, 0.0, inner) {
            Ok(e) => e.value,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        0.0,
        a,
        QuadOptions::rel(1e-10),
    )?;
    match failure {
        Some(e) => Err(e),
        None => Ok(outer.value),
    }
}

pub fn elementary_integral_checks(a: f64, eps: f64) -> Result<ElementaryCheck> {
    if !(a > 1.0 && 1.0 > 2.0 * eps && eps > 0.0) {
        return Err(Error::InvalidParameter(format!("need a > 1 > 2ε > 0, got a = {a}, ε = {eps}")));
    }
    let check = ElementaryCheck {
        a,
        eps,
        first: double_integral(a, eps, 1)?,
        first_bound: 5.0 * a * (3.0 * a).ln() + eps * (1.0 / eps).ln(),
        second: double_integral(a, eps, 2)?,
        second_bound: 2.0 * (2.0 * a).ln() + (1.0 / eps).ln(),
    };
    if !check.holds() {
        log::warn!("elementary bound violated: {check:?}");
    }
    Ok(check)
}

/// `∫_{S^{d-1}} g(|r ω − s e|) dω`.
fn angular(d: usize, s: f64, r: f64, g: &dyn Fn(f64) -> f64, breaks_q: &[f64]) -> Result<f64> {
    let q_of = |c: f64| (s * s + r * r - 2.0 * s * r * c).max(0.0).sqrt();
    match d {
        1 => Ok(g((r - s).abs()) + g(r + s)),
        _ => {
            // Integrate over c = cos θ ∈ [-1, 1]; in d = 2 with the
            // Jacobian (1 - c²)^{-1/2}, removed by c = cos θ itself.
            let mut cuts = vec![];
            for &qb in breaks_q {
                if s > 0.0 && r > 0.0 {
                    let c = (s * s + r * r - qb * qb) / (2.0 * s * r);
                    if c > -1.0 && c < 1.0 {
                        cuts.push(c);
                    }
                }
            }
            if d == 2 {
                let mut th: Vec<f64> = cuts.iter().map(|c| c.acos()).collect();
                th.push(0.0);
                th.push(PI);
                th.sort_by(f64::total_cmp);
                Ok(2.0 * integrate_breaks(|t| g(q_of(t.cos())), &th, QuadOptions::rel(1e-8))?.value)
            } else {
                cuts.push(-1.0);
                cuts.push(1.0);
                cuts.sort_by(f64::total_cmp);
                Ok(2.0 * PI * integrate_breaks(|c| g(q_of(c)), &cuts, QuadOptions::rel(1e-8))?.value)
            }
        }
    }
}

/// `∫_{|l| ≥ k_F} d^dl f(|l|, |l − k|)` at `|k| = s`.
fn outer_shell(d: usize, k_f: f64, s: f64, f: &(dyn Fn(f64, f64) -> f64 + Sync), breaks_q: &[f64]) -> Result<f64> {
    let mut failure = None;
    let mut rs: Vec<f64> = vec![k_f, k_f + 1.0 / k_f, k_f + 1.0, 2.0 * k_f + 2.0];
    for &qb in breaks_q {
        for r in [s + qb, qb - s] {
            if r > k_f {
                rs.push(r);
            }
        }
    }
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    let last = *rs.last().unwrap();
    let mut radial = |r: f64| -> f64 {
        let g = |q: f64| f(r, q);
        match angular(d, s, r, &g, breaks_q) {
            Ok(v) => r.powi(d as i32 - 1) * v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let opts = QuadOptions::rel(1e-7).with_abs(1e-300);
    let near = integrate_breaks(&mut radial, &rs, opts)?.value;
    let far = integrate_to_infinity(&mut radial, last, opts)?.value;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(near + far)
}

/// `∫_{|k| ≤ k_F} d^dk H(|k|)`.
fn ball_integral(d: usize, k_f: f64, h: &(dyn Fn(f64) -> Result<f64> + Sync)) -> Result<f64> {
    let mut failure = None;
    let ss = [0.0, k_f - 1.0, k_f - 1.0 / k_f, k_f];
    let mut ss: Vec<f64> = ss.iter().copied().filter(|&x| x >= 0.0).collect();
    ss.sort_by(f64::total_cmp);
    ss.dedup();
    let val = integrate_breaks(
        |s| match h(s) {
            Ok(v) => s.powi(d as i32 - 1) * v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        &ss,
        QuadOptions::rel(1e-6).with_abs(1e-300),
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(sphere_area(d) * val.value)
}

/// Continuum integrals behind the pair sums, without the `(2π)^{-2d}`
/// measure factor, and their ratios to the scaling envelopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppendixJReport {
    pub d: usize,
    pub k_f: f64,
    pub spec_id: String,
    /// `∬ (1 + |l-k|²)^{-2}`, envelope `k_F^{d-1}`.
    pub j1: f64,
    /// `∬ |v̂|² / (|l| − |k| + k_F^{-1})`, envelope `k_F^{d-1}`.
    pub j2: f64,
    /// `∬ |v̂|² (l-k)² / (l² − k² + (l-k)² + 1)² · 1{|l-k| ≥ 1}`,
    /// envelope `k_F^{d-3} (ln k_F)²`.
    pub j3: f64,
    /// `∫_{|k|≤k_F} (∫_{|l|≥k_F} |v̂| / (l² − k² + 1))²`, the common
    /// bound of the nested sums; envelope `γ(d, k_F)`.
    pub kernel: f64,
    pub j1_ratio: f64,
    pub j2_ratio: f64,
    pub j3_ratio: f64,
    pub kernel_ratio: f64,
}

pub fn appendix_j_integrals(d: usize, k_f: f64, spec: &PotentialSpec) -> Result<AppendixJReport> {
    check_kf(d, k_f)?;
    if k_f > 32.0 {
        return Err(Error::InvalidParameter(format!("k_F = {k_f} above 32")));
    }
    let inv = 1.0 / k_f;
    let pair = |f: &(dyn Fn(f64, f64, f64) -> f64 + Sync), breaks: &[f64]| -> Result<f64> {
        ball_integral(d, k_f, &|s| outer_shell(d, k_f, s, &|r, q| f(s, r, q), breaks))
    };
    let j1 = pair(&|_, _, q| (1.0 + q * q).powi(-2), &[])?;
    let v2 = |q: f64| spec.eval(q).powi(2);
    let support: Vec<f64> = spec.support_radius().into_iter().filter(|&x| x > 0.0).collect();
    let j2 = if spec.is_zero() {
        0.0
    } else {
        pair(&|s, r, q| v2(q) / (r - s + inv), &support)?
    };
    let mut b3 = support.clone();
    b3.push(1.0);
    let j3 = if spec.is_zero() {
        0.0
    } else {
        pair(
            &|s, r, q| {
                if q < 1.0 {
                    0.0
                } else {
                    v2(q) * q * q / (r * r - s * s + q * q + 1.0).powi(2)
                }
            },
            &b3,
        )?
    };
    let kernel = if spec.is_zero() {
        0.0
    } else {
        ball_integral(d, k_f, &|s| {
            let inner = outer_shell(d, k_f, s, &|r, q| spec.eval(q).abs() / (r * r - s * s + 1.0), &support)?;
            Ok(inner * inner)
        })?
    };
    let df = d as f64;
    let ln = k_f.ln();
    let e1 = k_f.powf(df - 1.0);
    let e3 = k_f.powf(df - 3.0) * ln * ln;
    let ek = gamma(d, k_f)?;
    Ok(AppendixJReport {
        d,
        k_f,
        spec_id: spec.id(),
        j1,
        j2,
        j3,
        kernel,
        j1_ratio: j1 / e1,
        j2_ratio: j2 / e1,
        j3_ratio: j3 / e3,
        kernel_ratio: kernel / ek,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_values() {
        let l3 = 2f64.ln().powi(3);
        assert!((gamma(2, 2.0).unwrap() - 0.5 * l3).abs() < 1e-15);
        assert!((gamma(3, 2.0).unwrap() - 2.0 * l3).abs() < 1e-15);
        assert!((gamma(1, 2.0).unwrap() - 0.25 * l3).abs() < 1e-15);
        assert!((gamma(2, 2.0).unwrap() - 0.166_512_4).abs() < 1e-7);
        assert!(gamma(2, 1.5).is_err());
    }

    #[test]
    fn big_gamma_limits() {
        assert_eq!(big_gamma(2, 4.0, 0.0, 3.0).unwrap().total, 0.0);
        for d in 1..=3 {
            let (k, lam) = (5.0f64, 0.7f64);
            let g = big_gamma(d, k, lam, 0.0).unwrap();
            let df = d as f64;
            let expect = lam * k.powf((df - 3.0) / 2.0) * k.ln().sqrt() + lam * lam * k.powf(df - 3.0) * k.ln();
            assert!((g.total - expect).abs() < 1e-14 * expect);
            assert_eq!(g.cubic, 0.0);
        }
    }

    #[test]
    fn zero_spec_sums_vanish() {
        let lat = MomentumLattice::new(1, 2.0 * PI, 8.0).unwrap();
        let ball = lat.fermi_ball(2.0).unwrap();
        let z = PotentialSpec::zero();
        assert_eq!(lemma2_sums(&lat, &ball, &z).unwrap().values, [0.0; 4]);
        assert_eq!(lemma_a1_sums(&lat, &ball, &z).unwrap().values, [0.0; 5]);
        let j = appendix_j_integrals(1, 2.0, &z).unwrap();
        assert_eq!((j.j2, j.j3, j.kernel), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ratio_band_basics() {
        assert_eq!(ratio_band(&[1.0, 2.0, 4.0]), 4.0);
        assert!(ratio_band(&[0.0, 1.0]).is_infinite());
    }
}
