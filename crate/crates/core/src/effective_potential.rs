//! The fermion-mediated pair potential
//!
//! ```text
//! W(r) = ∬_{|k|≤k_F<|l|} |v̂(l-k)|² cos((l-k)₁ r) / (l² - k² + (l-k)² + 1)
//! ```
//!
//! evaluated either as a continuum integral with measure `(2π)^{-2d} d^dk d^dl`
//! or as the finite-volume Riemann sum `L^{-2d} Σ_{(l,k)∈T_F}`.
//!
//! The continuum integral is reduced with `q = l - k` to
//! `(2π)^{-2d} ∫_0^∞ dq q^{d-1} |v̂(q)|² A_d(qr) F(q)`, where `A_d` is the
//! angular average of the cosine and `F(q)` is the integral of
//! `(2k·q + 2q² + 1)^{-1}` over the lens `{|k| ≤ k_F, |k+q| > k_F}`. The lens
//! integral has closed-form angular part in every dimension, leaving one
//! adaptive radial integral.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{int_norm2, MomentumLattice};
use crate::potentials::PotentialSpec;
use crate::quadrature::{integrate_breaks, integrate_to_infinity, Estimate, QuadOptions};

pub const DEFAULT_REL_TOL: f64 = 1e-6;
/// Transfer split used for the `W^{≤μ}` lower-bound check.
pub const DEFAULT_MU: f64 = 10.0;
/// Relative size of the cutoff tail tolerated by the lattice sum.
pub const LATTICE_TAIL_TOL: f64 = 1e-3;

fn check_dim(d: usize) -> Result<()> {
    if (1..=3).contains(&d) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dimension {d} not in 1..=3")))
    }
}

/// Surface area of the unit sphere in `R^d`.
pub(crate) fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 4.0 * PI,
    }
}

/// `∫_{S^{d-1}} cos(x ω₁) dω`.
fn angular_cos(d: usize, x: f64) -> f64 {
    match d {
        1 => 2.0 * x.cos(),
        2 => 2.0 * PI * libm::j0(x),
        _ => {
            if x.abs() < 1e-4 {
                4.0 * PI * (1.0 - x * x / 6.0)
            } else {
                4.0 * PI * x.sin() / x
            }
        }
    }
}

/// `atan(κt)/κ` (or `atanh` for `hyperbolic`), continuous at `κ = 0`.
fn arc_over(kappa: f64, t: f64, hyperbolic: bool) -> f64 {
    if t.is_infinite() {
        debug_assert!(!hyperbolic);
        return 0.5 * PI / kappa;
    }
    let x = kappa * t;
    if x.abs() < 1e-8 {
        return t * (1.0 + if hyperbolic { x * x / 3.0 } else { -x * x / 3.0 });
    }
    if hyperbolic {
        x.atanh() / kappa
    } else {
        x.atan() / kappa
    }
}

/// `∫_0^φ dφ' / (b + a cos φ')` with `c = cos φ`, assuming a positive
/// denominator on the whole range.
fn planar_angle_integral(a: f64, b: f64, c: f64) -> f64 {
    let t = if c <= -1.0 {
        f64::INFINITY
    } else {
        ((1.0 - c) / (1.0 + c)).max(0.0).sqrt()
    };
    let sum = a + b;
    if b >= a {
        2.0 / sum * arc_over(((b - a) / sum).sqrt(), t, false)
    } else {
        2.0 / sum * arc_over(((a - b) / sum).sqrt(), t, true)
    }
}

/// Lens integral `F(q) = ∫_{|k|≤k_F, |k+q|>k_F} d^dk (2k·q + 2q² + 1)^{-1}`.
pub fn lens_factor(d: usize, k_f: f64, q: f64, opts: QuadOptions) -> Result<Estimate> {
    shell_lens_factor(d, k_f, k_f, q, opts)
}

/// Generalised lens `{|k| ≤ a, |k+q| > c}` with `c ≥ a`; the integrand
/// `(2k·q + 2q² + 1)^{-1} = (l² - k² + q² + 1)^{-1}` stays positive there.
pub fn shell_lens_factor(d: usize, a: f64, c: f64, q: f64, opts: QuadOptions) -> Result<Estimate> {
    if q <= 0.0 {
        return Ok(Estimate::default());
    }
    let b = 2.0 * q * q + 1.0;
    if d == 1 {
        // k ∈ (max(-a, c - q), a]; the mirror q < 0 gives the same value.
        let lo = (-a).max(c - q);
        if lo >= a {
            return Ok(Estimate::default());
        }
        let value = (2.0 * q * (a - lo) / (2.0 * q * lo + b)).ln_1p() / (2.0 * q);
        return Ok(Estimate { value, error: 0.0 });
    }
    // Lower end of the cosine range admitted at |k| = s.
    let u_low = |s: f64| -> f64 {
        if s == 0.0 {
            return if q > c { -1.0 } else { 1.0 };
        }
        ((c * c - s * s - q * q) / (2.0 * s * q)).clamp(-1.0, 1.0)
    };
    let s_lo = (c - q).max(0.0);
    if s_lo >= a {
        return Ok(Estimate::default());
    }
    let mut breaks = vec![s_lo];
    if q - c > s_lo && q - c < a {
        breaks.push(q - c);
    }
    breaks.push(a);
    let integrand = |s: f64| -> f64 {
        let a = 2.0 * s * q;
        let c = u_low(s);
        if c >= 1.0 {
            return 0.0;
        }
        if d == 2 {
            2.0 * s * planar_angle_integral(a, b, c)
        } else {
            let inner = if a == 0.0 {
                (1.0 - c) / b
            } else {
                (a * (1.0 - c) / (a * c + b)).ln_1p() / a
            };
            2.0 * PI * s * s * inner
        }
    };
    integrate_breaks(integrand, &breaks, opts)
}

/// Continuum evaluator bound to one `(d, k_F, spec)`.
pub struct ContinuumPotential<'a> {
    d: usize,
    k_f: f64,
    spec: &'a PotentialSpec,
    rel_tol: f64,
    scale: f64,
}

impl<'a> ContinuumPotential<'a> {
    pub fn new(d: usize, k_f: f64, spec: &'a PotentialSpec, rel_tol: f64) -> Result<Self> {
        check_dim(d)?;
        if !(k_f >= 1.0) {
            return Err(Error::InvalidParameter(format!("k_F = {k_f} must be at least 1")));
        }
        if !(1e-10..=1e-3).contains(&rel_tol) {
            return Err(Error::InvalidParameter(format!(
                "rel_tol {rel_tol} outside [1e-10, 1e-3]"
            )));
        }
        let mut this = ContinuumPotential {
            d,
            k_f,
            spec,
            rel_tol,
            scale: 0.0,
        };
        if !spec.is_zero() {
            // W(0) sets the absolute error scale for r > 0, where W may vanish.
            this.scale = this.integrate(0.0, None, 0.0)?.value.abs();
        }
        Ok(this)
    }

    fn prefactor(&self) -> f64 {
        (2.0 * PI).powi(-2 * self.d as i32)
    }

    /// `(2π)^{-2d} ∫_0^{q_max} dq q^{d-1}|v̂|² A_d(qr) F(q)`, all transfers
    /// when `q_max` is `None`.
    fn integrate(&self, r: f64, q_max: Option<f64>, abs_scale: f64) -> Result<Estimate> {
        let d = self.d;
        let inner = QuadOptions {
            abs_tol: 1e-300,
            rel_tol: self.rel_tol * 0.05,
            max_subdivisions: 200,
        };
        let pre = self.prefactor();
        let mut failure = None;
        let mut f = |q: f64| -> f64 {
            if q <= 0.0 {
                return 0.0;
            }
            let v = self.spec.eval(q);
            if v == 0.0 {
                return 0.0;
            }
            match lens_factor(d, self.k_f, q, inner) {
                Ok(lens) => pre * q.powi(d as i32 - 1) * v * v * angular_cos(d, q * r) * lens.value,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            }
        };
        let support = self.spec.support_radius();
        let soft_end = 60.0 * self.k_f.max(1.0);
        let mut end = soft_end;
        if let Some(s) = support {
            end = end.min(s);
        }
        if let Some(m) = q_max {
            end = end.min(m);
        }
        let mut breaks = vec![0.0];
        if r > 0.0 {
            let width = PI / r;
            let panels = ((end / width).ceil() as usize).min(4000);
            let width = end / panels.max(1) as f64;
            breaks.extend((1..panels).map(|i| i as f64 * width));
        }
        for kink in [self.k_f, 2.0 * self.k_f] {
            if kink < end {
                breaks.push(kink);
            }
        }
        breaks.push(end);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let opts = QuadOptions {
            abs_tol: (self.rel_tol * abs_scale).max(1e-300),
            rel_tol: self.rel_tol * 0.5,
            max_subdivisions: breaks.len() + 400,
        };
        let mut total = integrate_breaks(&mut f, &breaks, opts)?;
        let open_tail = end == soft_end && support.map_or(true, |s| s > soft_end) && q_max.map_or(true, |m| m > soft_end);
        if open_tail {
            let tail_opts = QuadOptions {
                abs_tol: (0.1 * self.rel_tol * total.value.abs().max(abs_scale)).max(1e-300),
                ..opts
            };
            let tail = integrate_to_infinity(&mut f, end, tail_opts)?;
            let tail = match q_max {
                Some(m) => {
                    let beyond = integrate_to_infinity(&mut f, m, tail_opts)?;
                    Estimate {
                        value: tail.value - beyond.value,
                        error: tail.error + beyond.error,
                    }
                }
                None => tail,
            };
            total = total + tail;
        }
        if let Some(e) = failure {
            return Err(e);
        }
        // Inner tolerances propagate linearly into the outer integral.
        total.error += 0.05 * self.rel_tol * total.value.abs().max(abs_scale);
        Ok(total)
    }

    /// `(W(r), error estimate)`.
    pub fn value(&self, r: f64) -> Result<(f64, f64)> {
        if !(r >= 0.0) {
            return Err(Error::InvalidParameter(format!("separation r = {r} must be ≥ 0")));
        }
        if self.spec.is_zero() {
            return Ok((0.0, 0.0));
        }
        let e = self.integrate(r, None, self.scale)?;
        Ok((e.value, e.error))
    }

    /// `(W^{≤μ}(r), W^{≥μ}(r))`: transfers `|l-k|` below and above `μ`.
    pub fn split(&self, r: f64, mu: f64) -> Result<(f64, f64)> {
        if self.spec.is_zero() {
            return Ok((0.0, 0.0));
        }
        let low = self.integrate(r, Some(mu), self.scale)?.value;
        let full = self.integrate(r, None, self.scale)?.value;
        Ok((low, full - low))
    }

    pub fn k_f(&self) -> f64 {
        self.k_f
    }

    pub fn dim(&self) -> usize {
        self.d
    }
}

/// `W_{k_F}(r)` by quadrature, with an error estimate.
pub fn w_quadrature(r: f64, k_f: f64, d: usize, spec: &PotentialSpec, rel_tol: f64) -> Result<(f64, f64)> {
    ContinuumPotential::new(d, k_f, spec, rel_tol)?.value(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeSum {
    pub values: Vec<f64>,
    /// `|Σ sin(...)|` residue per separation; vanishes by `(k,l) → (-k,-l)`.
    pub imag_residue: Vec<f64>,
    /// Estimate of the omitted `|l| > cutoff` part.
    pub tail_bound: f64,
    pub pair_count: usize,
}

/// Estimate of the omitted `|l| > cutoff` part: the continuum integral over
/// `{|k| ≤ k_F + √d h/2, |l| > cutoff - √d h/2}` with the cosine replaced by 1,
/// the cell-widened radii accounting for the lattice.
fn lattice_tail_estimate(d: usize, k_f: f64, length: f64, cutoff: f64, spec: &PotentialSpec) -> Result<f64> {
    let half_cell = 0.5 * (d as f64).sqrt() * 2.0 * PI / length;
    let a = k_f + half_cell;
    let c = cutoff - half_cell;
    if c <= a {
        return Ok(f64::INFINITY);
    }
    let q_min = c - a;
    if let Some(s) = spec.support_radius() {
        if s < q_min {
            return Ok(0.0);
        }
    }
    let inner = QuadOptions::rel(1e-6);
    let mut failure = None;
    let f = |q: f64| -> f64 {
        let v = spec.eval(q);
        if v == 0.0 {
            return 0.0;
        }
        match shell_lens_factor(d, a, c, q, inner) {
            Ok(lens) => q.powi(d as i32 - 1) * v * v * sphere_area(d) * lens.value,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        }
    };
    let est = match spec.support_radius() {
        Some(s) => integrate_breaks(f, &[q_min, s], QuadOptions::rel(1e-4))?,
        None => integrate_to_infinity(f, q_min, QuadOptions::rel(1e-4))?,
    };
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(est.value * (2.0 * PI).powi(-2 * d as i32))
}

/// Finite-volume sum at several separations at once.
/// The pair sum over exactly the lattice modes below `cutoff`, no tail check:
/// `(values, imaginary residues, pair count)`.
fn truncated_sum(
    rs: &[f64],
    k_f: f64,
    length: f64,
    d: usize,
    spec: &PotentialSpec,
    cutoff: f64,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    check_dim(d)?;
    if !(length >= 2.0 * PI - 1e-12) {
        return Err(Error::InvalidParameter(format!("L = {length} below 2π")));
    }
    let lattice = MomentumLattice::new(d, length, cutoff)?;
    let ball = lattice.fermi_ball(k_f)?;
    let h = lattice.spacing();
    let members: Vec<_> = ball.members().iter().map(|&i| lattice.coords(i)).collect();
    let outside: Vec<_> = lattice.outside_modes(&ball).map(|i| lattice.coords(i)).collect();
    let zmax = lattice.modes().iter().map(|z| z[0].abs()).max().unwrap_or(0);
    let n2max = 4 * d as i64 * (zmax as i64).pow(2);
    let v2: Vec<f64> = (0..=n2max)
        .map(|n2| {
            let v = spec.eval(h * (n2 as f64).sqrt());
            v * v
        })
        .collect();
    let span = 2 * zmax as usize;
    let phases: Vec<Vec<(f64, f64)>> = rs
        .iter()
        .map(|&r| {
            (0..=2 * span)
                .map(|m| {
                    let x = (m as f64 - span as f64) * h * r;
                    (x.cos(), x.sin())
                })
                .collect()
        })
        .collect();
    let nr = rs.len();
    let h2 = h * h;
    let (re, im) = outside
        .par_iter()
        .fold(
            || (vec![0.0; nr], vec![0.0; nr]),
            |(mut re, mut im), l| {
                let l2 = int_norm2(l);
                for k in &members {
                    let z = [l[0] - k[0], l[1] - k[1], l[2] - k[2]];
                    let n2 = int_norm2(&z);
                    let w = v2[n2 as usize];
                    if w == 0.0 {
                        continue;
                    }
                    let denom = h2 * (l2 - int_norm2(k) + n2) as f64 + 1.0;
                    let term = w / denom;
                    let m = (z[0] + span as i32) as usize;
                    for (j, ph) in phases.iter().enumerate() {
                        re[j] += term * ph[m].0;
                        im[j] += term * ph[m].1;
                    }
                }
                (re, im)
            },
        )
        .reduce(
            || (vec![0.0; nr], vec![0.0; nr]),
            |(mut a, mut b), (c, e)| {
                for j in 0..nr {
                    a[j] += c[j];
                    b[j] += e[j];
                }
                (a, b)
            },
        );
    let norm = length.powi(-2 * d as i32);
    let values: Vec<f64> = re.iter().map(|v| v * norm).collect();
    let imag_residue = im.iter().map(|v| (v * norm).abs()).collect();
    Ok((values, imag_residue, members.len() * outside.len()))
}

pub fn w_lattice_sum_many(
    rs: &[f64],
    k_f: f64,
    length: f64,
    d: usize,
    spec: &PotentialSpec,
    cutoff: f64,
) -> Result<LatticeSum> {
    let (values, imag_residue, pair_count) = truncated_sum(rs, k_f, length, d, spec, cutoff)?;
    let tail_bound = lattice_tail_estimate(d, k_f, length, cutoff, spec)?;
    if !spec.is_zero() {
        let reference = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if tail_bound > LATTICE_TAIL_TOL * reference {
            return Err(Error::CutoffTooSmall(format!(
                "tail estimate {tail_bound:.3e} exceeds {LATTICE_TAIL_TOL} of the largest value {reference:.3e}"
            )));
        }
    }
    Ok(LatticeSum {
        values,
        imag_residue,
        tail_bound,
        pair_count,
    })
}

/// Single-separation lattice sum.
pub fn w_lattice_sum(r: f64, k_f: f64, length: f64, d: usize, spec: &PotentialSpec, cutoff: f64) -> Result<f64> {
    Ok(w_lattice_sum_many(&[r], k_f, length, d, spec, cutoff)?.values[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Quadrature,
    LatticeSum { length: f64, cutoff: f64 },
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Quadrature => write!(f, "quadrature"),
            Method::LatticeSum { length, cutoff } => write!(f, "lattice_sum(L={length};cutoff={cutoff})"),
        }
    }
}

impl Method {
    fn parse(s: &str) -> Result<Self> {
        if s == "quadrature" {
            return Ok(Method::Quadrature);
        }
        let inner = s
            .strip_prefix("lattice_sum(")
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))?;
        let mut length = None;
        let mut cutoff = None;
        for part in inner.split(';') {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("bad method field {part:?}")))?;
            let val: f64 = val
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("bad number in {part:?}")))?;
            match key {
                "L" => length = Some(val),
                "cutoff" => cutoff = Some(val),
                _ => return Err(Error::InvalidParameter(format!("unknown method field {key:?}"))),
            }
        }
        match (length, cutoff) {
            (Some(length), Some(cutoff)) => Ok(Method::LatticeSum { length, cutoff }),
            _ => Err(Error::InvalidParameter(format!("incomplete method {s:?}"))),
        }
    }
}

/// Scaled values `k_F^{2-d} W(r)` on an increasing grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialTable {
    pub d: usize,
    pub k_f: f64,
    pub method: Method,
    pub spec_id: String,
    pub r_grid: Vec<f64>,
    pub values: Vec<f64>,
    pub err_est: Vec<f64>,
}

/// `k_F^{2-d}`.
pub fn scaling_factor(d: usize, k_f: f64) -> f64 {
    k_f.powi(2 - d as i32)
}

/// `n` uniform points on `[0, r_max]`.
pub fn uniform_grid(r_max: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0];
    }
    (0..n).map(|i| r_max * i as f64 / (n - 1) as f64).collect()
}

impl PotentialTable {
    /// Tabulates by quadrature; grid points run in parallel.
    pub fn quadrature(d: usize, k_f: f64, spec: &PotentialSpec, r_grid: &[f64], rel_tol: f64) -> Result<Self> {
        check_grid(r_grid)?;
        let cp = ContinuumPotential::new(d, k_f, spec, rel_tol)?;
        let s = scaling_factor(d, k_f);
        let points: Vec<(f64, f64)> = r_grid.par_iter().map(|&r| cp.value(r)).collect::<Result<_>>()?;
        Ok(PotentialTable {
            d,
            k_f,
            method: Method::Quadrature,
            spec_id: spec.id(),
            r_grid: r_grid.to_vec(),
            values: points.iter().map(|p| s * p.0).collect(),
            err_est: points.iter().map(|p| s * p.1).collect(),
        })
    }

    /// Tabulates by the lattice sum; `err_est` holds the cutoff tail estimate.
    pub fn lattice_sum(
        d: usize,
        k_f: f64,
        spec: &PotentialSpec,
        r_grid: &[f64],
        length: f64,
        cutoff: f64,
    ) -> Result<Self> {
        check_grid(r_grid)?;
        let sum = w_lattice_sum_many(r_grid, k_f, length, d, spec, cutoff)?;
        let s = scaling_factor(d, k_f);
        Ok(PotentialTable {
            d,
            k_f,
            method: Method::LatticeSum { length, cutoff },
            spec_id: spec.id(),
            r_grid: r_grid.to_vec(),
            values: sum.values.iter().map(|v| s * v).collect(),
            err_est: vec![s * sum.tail_bound; r_grid.len()],
        })
    }

    /// Lattice sum restricted to the modes of a truncated lattice, without
    /// the cutoff-tail check: the mediated potential seen by a Fock space
    /// built on that same lattice. `err_est` is zero.
    pub fn truncated_lattice_sum(
        d: usize,
        k_f: f64,
        spec: &PotentialSpec,
        r_grid: &[f64],
        length: f64,
        cutoff: f64,
    ) -> Result<Self> {
        check_grid(r_grid)?;
        let (values, _, _) = truncated_sum(r_grid, k_f, length, d, spec, cutoff)?;
        let s = scaling_factor(d, k_f);
        Ok(PotentialTable {
            d,
            k_f,
            method: Method::LatticeSum { length, cutoff },
            spec_id: spec.id(),
            r_grid: r_grid.to_vec(),
            values: values.iter().map(|v| s * v).collect(),
            err_est: vec![0.0; r_grid.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.r_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r_grid.is_empty()
    }

    pub fn max_radius(&self) -> f64 {
        self.r_grid.last().copied().unwrap_or(0.0)
    }

    /// Unscaled `W(r)` by linear interpolation.
    pub fn w_at(&self, r: f64) -> Result<f64> {
        let r = r.abs();
        let last = self.max_radius();
        if r > last * (1.0 + 1e-12) {
            return Err(Error::TableIncomplete {
                needed: r,
                available: last,
            });
        }
        let i = self.r_grid.partition_point(|&x| x <= r);
        let v = if i == 0 {
            self.values[0]
        } else if i >= self.len() {
            self.values[self.len() - 1]
        } else {
            let (x0, x1) = (self.r_grid[i - 1], self.r_grid[i]);
            let t = (r - x0) / (x1 - x0);
            self.values[i - 1] * (1.0 - t) + self.values[i] * t
        };
        Ok(v / scaling_factor(self.d, self.k_f))
    }

    /// Violated table invariants, empty when all hold.
    pub fn invariant_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let Some(&v0) = self.values.first() else {
            return vec!["empty table".into()];
        };
        if self.r_grid[0] != 0.0 {
            out.push("grid does not start at r = 0".into());
        }
        if !(v0 > 0.0) {
            out.push(format!("value at r = 0 is {v0}, not positive"));
        }
        for (r, v) in self.r_grid.iter().zip(&self.values) {
            if v.abs() > v0 * (1.0 + 1e-9) {
                out.push(format!("|value({r})| = {} exceeds value(0) = {v0}", v.abs()));
                break;
            }
        }
        out
    }

    /// Index of the largest value.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["d", "k_F", "method", "spec_id"])?;
        w.write_record([
            self.d.to_string(),
            self.k_f.to_string(),
            self.method.to_string(),
            self.spec_id.clone(),
        ])?;
        w.write_record(["r", "scaled_value", "err_est"])?;
        for i in 0..self.len() {
            w.write_record([
                format!("{:.17e}", self.r_grid[i]),
                format!("{:.17e}", self.values[i]),
                format!("{:.6e}", self.err_est[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
        let bad = |m: &str| Error::InvalidParameter(format!("potential table CSV: {m}"));
        if records.len() < 3 {
            return Err(bad("missing header rows"));
        }
        let meta = &records[1];
        if meta.len() != 4 {
            return Err(bad("metadata row needs 4 fields"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("not a number: {s:?}")));
        let d = meta[0].trim().parse::<usize>().map_err(|_| bad("bad dimension"))?;
        let k_f = num(&meta[1])?;
        let method = Method::parse(meta[2].trim())?;
        let spec_id = meta[3].to_string();
        let mut table = PotentialTable {
            d,
            k_f,
            method,
            spec_id,
            r_grid: Vec::new(),
            values: Vec::new(),
            err_est: Vec::new(),
        };
        for rec in &records[3..] {
            if rec.len() != 3 {
                return Err(bad("data rows need 3 fields"));
            }
            table.r_grid.push(num(&rec[0])?);
            table.values.push(num(&rec[1])?);
            table.err_est.push(num(&rec[2])?);
        }
        check_grid(&table.r_grid)?;
        Ok(table)
    }
}

fn check_grid(r_grid: &[f64]) -> Result<()> {
    if r_grid.is_empty() {
        return Err(Error::InvalidParameter("empty r grid".into()));
    }
    if r_grid[0] < 0.0 || r_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "r grid must be non-negative and strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub d: usize,
    pub spec_id: String,
    pub k_f_list: Vec<f64>,
    pub sup_abs: Vec<f64>,
    pub core_inf: Vec<f64>,
    pub c_probe: f64,
    pub core_found: bool,
    /// `max_r |value_{j+1} - value_j| / value_j(0)` for consecutive `k_F`.
    pub successive_change: Vec<f64>,
    /// `max / min` of `sup_abs` over the ladder.
    pub sup_spread: f64,
    pub tables: Vec<PotentialTable>,
}

pub fn lemma1_scan(
    k_f_list: &[f64],
    d: usize,
    spec: &PotentialSpec,
    r_max: f64,
    grid_points: usize,
    rel_tol: f64,
) -> Result<Lemma1Report> {
    if k_f_list.is_empty() {
        return Err(Error::InvalidParameter("empty k_F list".into()));
    }
    let grid = uniform_grid(r_max, grid_points);
    let tables: Vec<PotentialTable> = k_f_list
        .iter()
        .map(|&k| PotentialTable::quadrature(d, k, spec, &grid, rel_tol))
        .collect::<Result<_>>()?;
    lemma1_summary(tables)
}

/// Core diagnostics of already tabulated scaled potentials, all on the
/// same radial grid and in ascending `k_F`.
pub fn lemma1_summary(tables: Vec<PotentialTable>) -> Result<Lemma1Report> {
    let Some(first) = tables.first() else {
        return Err(Error::InvalidParameter("no tables".into()));
    };
    if tables.iter().any(|t| t.r_grid != first.r_grid || t.d != first.d) {
        return Err(Error::GridMismatch("tables differ in radial grid or dimension".into()));
    }
    let d = first.d;
    let spec_id = first.spec_id.clone();
    let k_f_list: Vec<f64> = tables.iter().map(|t| t.k_f).collect();
    let grid = first.r_grid.clone();
    let sup_abs: Vec<f64> = tables
        .iter()
        .map(|t| t.values.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
        .collect();
    let mut prefix = 0;
    while prefix < grid.len() && tables.iter().all(|t| t.values[prefix] > 0.0) {
        prefix += 1;
    }
    let core_found = prefix > 1;
    let c_probe = if core_found { grid[prefix - 1] } else { 0.0 };
    let core_inf = tables
        .iter()
        .map(|t| {
            if prefix == 0 {
                t.values[0]
            } else {
                t.values[..prefix].iter().copied().fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let successive_change = tables
        .windows(2)
        .map(|w| {
            let base = w[0].values[0].abs();
            w[0].values
                .iter()
                .zip(&w[1].values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max)
                / if base > 0.0 { base } else { 1.0 }
        })
        .collect();
    let max = sup_abs.iter().copied().fold(0.0_f64, f64::max);
    let min = sup_abs.iter().copied().fold(f64::INFINITY, f64::min);
    let sup_spread = if min > 0.0 { max / min } else { f64::INFINITY };
    Ok(Lemma1Report {
        d,
        spec_id,
        k_f_list,
        sup_abs,
        core_inf,
        c_probe,
        core_found,
        successive_change,
        sup_spread,
        tables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force 2-D lens integral on a fine grid.
    fn lens_brute_2d(k_f: f64, q: f64, n: usize) -> f64 {
        let h = 2.0 * k_f / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                let kx = -k_f + (i as f64 + 0.5) * h;
                let ky = -k_f + (j as f64 + 0.5) * h;
                if kx * kx + ky * ky > k_f * k_f {
                    continue;
                }
                if (kx + q).powi(2) + ky * ky <= k_f * k_f {
                    continue;
                }
                sum += h * h / (2.0 * kx * q + 2.0 * q * q + 1.0);
            }
        }
        sum
    }

    #[test]
    fn lens_factor_matches_grid_in_2d() {
        let opts = QuadOptions::rel(1e-10);
        for &q in &[0.3, 1.0, 2.5, 5.0] {
            let exact = lens_factor(2, 2.0, q, opts).unwrap().value;
            let brute = lens_brute_2d(2.0, q, 1500);
            assert!((exact / brute - 1.0).abs() < 5e-3, "q={q}: {exact} vs {brute}");
        }
    }

    #[test]
    fn lens_factor_3d_far_transfer() {
        // Whole ball inside the lens: F ≈ ∫_B 1/(2k·q+2q²+1), symmetric expansion.
        let k_f: f64 = 1.0;
        let q: f64 = 50.0;
        let f = lens_factor(3, k_f, q, QuadOptions::rel(1e-12)).unwrap().value;
        let b = 2.0 * q * q + 1.0;
        let vol = 4.0 / 3.0 * PI;
        // ∫_B (k·q̂)^2 = 4π/15 and ∫_B (k·q̂)^4 = 4π/35 on the unit ball.
        let approx = vol / b
            + 4.0 * q * q * (4.0 * PI / 15.0) / b.powi(3)
            + 16.0 * q.powi(4) * (4.0 * PI / 35.0) / b.powi(5);
        assert!((f / approx - 1.0).abs() < 1e-8);
    }

    #[test]
    fn planar_angle_closed_form() {
        for &(a, b, c) in &[(1.0, 3.0, -1.0), (2.0, 2.5, 0.3), (3.0, 1.0, 0.2), (1.0, 1.0, 0.0)] {
            let phi = f64::acos(c);
            let n = 200_000;
            let h = phi / n as f64;
            let brute: f64 = (0..n)
                .map(|i| {
                    let x = (i as f64 + 0.5) * h;
                    h / (b + a * x.cos())
                })
                .sum();
            let exact = planar_angle_integral(a, b, c);
            assert!((exact - brute).abs() < 1e-7 * brute, "{a},{b},{c}");
        }
    }

    #[test]
    fn zero_spec_gives_zero() {
        let z = PotentialSpec::zero();
        assert_eq!(w_quadrature(0.7, 2.0, 2, &z, 1e-6).unwrap().0, 0.0);
        assert_eq!(w_lattice_sum(0.7, 2.0, 4.0 * PI, 2, &z, 8.0).unwrap(), 0.0);
    }

    #[test]
    fn golden_enumeration_d1() {
        // L = 2π: unit spacing, ball {-1,0,1}, outside {±2,±3}.
        let spec = PotentialSpec::yukawa(1.0).unwrap();
        let mut golden = 0.0;
        for l in [-3i32, -2, 2, 3] {
            for k in [-1i32, 0, 1] {
                let q = (l - k) as f64;
                let v = 1.0 / (q * q + 1.0);
                golden += v * v / ((l * l - k * k) as f64 + q * q + 1.0);
            }
        }
        golden /= (2.0 * PI).powi(2);
        // The cutoff tail check is the caller's concern here; use the raw sum.
        let lattice = MomentumLattice::new(1, 2.0 * PI, 3.0).unwrap();
        assert_eq!(lattice.len(), 7);
        let got = w_lattice_sum_many(&[0.0], 1.0, 2.0 * PI, 1, &spec, 3.0);
        match got {
            Ok(s) => assert!((s.values[0] - golden).abs() < 1e-15),
            Err(Error::CutoffTooSmall(_)) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn lattice_sum_is_real_and_positive_at_origin() {
        let spec = PotentialSpec::yukawa(1.0).unwrap();
        let s = w_lattice_sum_many(&[0.0, 0.5, 1.3], 2.0, 4.0 * PI, 2, &spec, 16.0).unwrap();
        assert!(s.values[0] > 0.0);
        for (v, im) in s.values.iter().zip(&s.imag_residue) {
            assert!(*im < 1e-9 * s.values[0], "{v} {im}");
        }
    }

    #[test]
    fn cutoff_too_small_detected() {
        let spec = PotentialSpec::yukawa(1.0).unwrap();
        let r = w_lattice_sum(0.0, 2.0, 4.0 * PI, 2, &spec, 2.5);
        assert!(matches!(r, Err(Error::CutoffTooSmall(_))));
    }

    #[test]
    fn csv_round_trip() {
        let t = PotentialTable {
            d: 2,
            k_f: 4.0,
            method: Method::LatticeSum { length: 8.0 * PI, cutoff: 16.0 },
            spec_id: "yukawa(R=1)".into(),
            r_grid: vec![0.0, 0.5, 1.0],
            values: vec![1.0, 0.25, -0.125],
            err_est: vec![1e-8, 1e-8, 1e-8],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let back = PotentialTable::read_csv(&buf[..]).unwrap();
        assert_eq!(back.method, t.method);
        assert_eq!(back.values, t.values);
        assert!((back.w_at(0.75).unwrap() - 0.0625).abs() < 1e-15);
        assert!(matches!(back.w_at(2.0), Err(Error::TableIncomplete { .. })));
    }
}
