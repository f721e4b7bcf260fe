//! Effective n-impurity dynamics on the periodic box.
//!
//! States live on an `M^{nd}` pseudo-spectral grid: impurity `i`, axis `a`
//! carries wave numbers `z ∈ {-M/2, …, M/2-1}` in FFT order (momentum
//! `2πz/L`) and positions `jL/M`. The kinetic part is diagonal in momentum,
//! pair potentials are diagonal in position, and time stepping is a Strang
//! split with an exact kinetic phase.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::effective_potential::PotentialTable;
use crate::error::{Error, Result};
use crate::lattice::{FermiBall, MomentumLattice};
use crate::potentials::{ImpurityPotential, PotentialSpec};

/// Largest grid accepted by [`ImpurityGrid::new`].
pub const MAX_GRID_POINTS: usize = 1 << 24;
/// Norm drift that aborts a propagation.
pub const NORM_DRIFT_TOL: f64 = 1e-6;

/// `E⁰ + n λ v̂(0) N / L^d`.
pub fn energy_shift(
    lattice: &MomentumLattice,
    ball: &FermiBall,
    lambda: f64,
    n: usize,
    spec: &PotentialSpec,
) -> f64 {
    ball.free_ground_energy(lattice) + n as f64 * lambda * spec.eval(0.0) * ball.density(lattice)
}

/// The coupling rule `λ = k_F^{(2-d)/2}`, i.e. `λ² = k_F^{2-d}`.
pub fn coupling_rule(d: usize, k_f: f64) -> f64 {
    k_f.powf(0.5 * (2.0 - d as f64))
}

/// Wave number of FFT index `j` on an axis with `m` modes.
pub fn wave_number(j: usize, m: usize) -> i32 {
    if j < m / 2 {
        j as i32
    } else {
        j as i32 - m as i32
    }
}

/// FFT index of wave number `z`, if it is on the axis.
pub fn wave_index(z: i32, m: usize) -> Option<usize> {
    let half = (m / 2) as i32;
    if z >= -half && z < half {
        Some(z.rem_euclid(m as i32) as usize)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpurityGrid {
    pub n: usize,
    pub d: usize,
    pub length: f64,
    pub m: usize,
}

impl ImpurityGrid {
    pub fn new(n: usize, d: usize, length: f64, m: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("at least one impurity required".into()));
        }
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidParameter(format!("dimension {d} not in 1..=3")));
        }
        if !(length > 0.0) {
            return Err(Error::InvalidParameter(format!("box length {length} must be positive")));
        }
        if m < 2 || !m.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("M_imp = {m} must be a power of two ≥ 2")));
        }
        let axes = (n * d) as u32;
        let total = (m as u128).checked_pow(axes).unwrap_or(u128::MAX);
        if total > MAX_GRID_POINTS as u128 {
            return Err(Error::ResourceLimit {
                what: "impurity grid points",
                count: total.min(usize::MAX as u128) as usize,
                cap: MAX_GRID_POINTS,
            });
        }
        Ok(ImpurityGrid { n, d, length, m })
    }

    pub fn axes(&self) -> usize {
        self.n * self.d
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.axes() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.m as f64
    }

    pub fn momentum_unit(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// Per-axis indices of a flat index; axis `i·d + a` is impurity `i`,
    /// coordinate `a`, with the last axis fastest.
    pub fn unflatten(&self, mut idx: usize, out: &mut [usize]) {
        for slot in out.iter_mut().rev() {
            *slot = idx % self.m;
            idx /= self.m;
        }
    }

    pub fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &j| acc * self.m + j)
    }

    /// Wave numbers of all impurities at a flat momentum index.
    pub fn wave_numbers(&self, idx: usize) -> Vec<i32> {
        let mut axes = vec![0; self.axes()];
        self.unflatten(idx, &mut axes);
        axes.iter().map(|&j| wave_number(j, self.m)).collect()
    }

    /// Flat index of a wave-number tuple, if every entry is on the grid.
    pub fn index_of_waves(&self, waves: &[i32]) -> Option<usize> {
        let mut idx = 0;
        for &z in waves {
            idx = idx * self.m + wave_index(z, self.m)?;
        }
        Some(idx)
    }

    /// `Σ_i k_i²` at a flat momentum index.
    pub fn kinetic_at(&self, idx: usize) -> f64 {
        let h = self.momentum_unit();
        self.wave_numbers(idx)
            .iter()
            .map(|&z| (h * z as f64).powi(2))
            .sum()
    }

    /// Minimal-image distance between two per-axis position-index tuples of
    /// length `d`.
    pub fn periodic_distance(&self, a: &[usize], b: &[usize]) -> f64 {
        let mut r2 = 0.0;
        for (x, y) in a.iter().zip(b) {
            let diff = (*x as i64 - *y as i64).rem_euclid(self.m as i64);
            let diff = diff.min(self.m as i64 - diff) as f64 * self.spacing();
            r2 += diff * diff;
        }
        r2.sqrt()
    }

    /// Largest minimal-image separation, `√d L/2`.
    pub fn max_separation(&self) -> f64 {
        (self.d as f64).sqrt() * 0.5 * self.length
    }
}

/// Unitary n-dimensional DFT over the grid axes.
struct GridFft {
    m: usize,
    axes: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl GridFft {
    fn new(grid: &ImpurityGrid) -> Self {
        let mut planner = FftPlanner::new();
        GridFft {
            m: grid.m,
            axes: grid.axes(),
            forward: planner.plan_fft_forward(grid.m),
            inverse: planner.plan_fft_inverse(grid.m),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let m = self.m;
        let plan = if inverse { &self.inverse } else { &self.forward };
        let mut line = vec![Complex64::default(); m];
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let total = data.len();
        for axis in 0..self.axes {
            let stride = m.pow((self.axes - 1 - axis) as u32);
            let block = stride * m;
            for start in (0..total).step_by(block) {
                for offset in 0..stride {
                    let base = start + offset;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                }
            }
        }
        let norm = 1.0 / (total as f64).sqrt();
        for v in data.iter_mut() {
            *v *= norm;
        }
    }

    /// Position amplitudes → momentum amplitudes.
    fn to_momentum(&self, data: &mut [Complex64]) {
        self.run(data, false)
    }

    fn to_position(&self, data: &mut [Complex64]) {
        self.run(data, true)
    }
}

/// n-impurity wavefunction in the momentum representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpurityState {
    pub grid: ImpurityGrid,
    pub amps: Vec<Complex64>,
}

impl ImpurityState {
    pub fn new(grid: ImpurityGrid, amps: Vec<Complex64>) -> Result<Self> {
        if amps.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} amplitudes for a grid of {}",
                amps.len(),
                grid.len()
            )));
        }
        Ok(ImpurityState { grid, amps })
    }

    pub fn zeros(grid: ImpurityGrid) -> Self {
        ImpurityState {
            amps: vec![Complex64::default(); grid.len()],
            grid,
        }
    }

    /// Product of momentum eigenstates with the given wave numbers.
    pub fn plane_wave(grid: ImpurityGrid, waves: &[i32]) -> Result<Self> {
        if waves.len() != grid.axes() {
            return Err(Error::GridMismatch(format!(
                "{} wave numbers for {} axes",
                waves.len(),
                grid.axes()
            )));
        }
        let idx = grid
            .index_of_waves(waves)
            .ok_or_else(|| Error::GridMismatch(format!("wave numbers {waves:?} off the grid")))?;
        let mut s = Self::zeros(grid);
        s.amps[idx] = Complex64::new(1.0, 0.0);
        Ok(s)
    }

    /// Product of periodic Gaussian packets with position-space density
    /// width `sigma` (`|ψ|² ∝ exp(-|y-c|²/(2σ²))`), centers and mean momenta
    /// per impurity.
    pub fn gaussian_product(
        grid: ImpurityGrid,
        centers: &[[f64; 3]],
        sigma: f64,
        momenta: &[[f64; 3]],
    ) -> Result<Self> {
        if centers.len() != grid.n || momenta.len() != grid.n {
            return Err(Error::GridMismatch("one center and momentum per impurity required".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("width {sigma} must be positive")));
        }
        let h = grid.momentum_unit();
        let d = grid.d;
        // Per-axis factors, then an outer product.
        let factors: Vec<Vec<Complex64>> = (0..grid.axes())
            .map(|axis| {
                let (i, a) = (axis / d, axis % d);
                (0..grid.m)
                    .map(|j| {
                        let k = h * wave_number(j, grid.m) as f64;
                        let dk = k - momenta[i][a];
                        Complex64::from_polar((-sigma * sigma * dk * dk).exp(), -k * centers[i][a])
                    })
                    .collect()
            })
            .collect();
        Ok(Self::from_axis_factors(grid, &factors))
    }

    /// Two impurities with zero total momentum and a Gaussian relative
    /// wavefunction centered at separation `offset` with density width `sigma`.
    pub fn relative_gaussian(grid: ImpurityGrid, offset: [f64; 3], sigma: f64) -> Result<Self> {
        if grid.n != 2 {
            return Err(Error::InvalidParameter("relative Gaussian needs n = 2".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("width {sigma} must be positive")));
        }
        let d = grid.d;
        let h = grid.momentum_unit();
        let mut s = Self::zeros(grid);
        let mut waves = vec![0i32; 2 * d];
        let mut axes = vec![0usize; d];
        for flat in 0..grid.m.pow(d as u32) {
            let mut rem = flat;
            for slot in axes.iter_mut().rev() {
                *slot = rem % grid.m;
                rem /= grid.m;
            }
            let mut k2 = 0.0;
            let mut phase = 0.0;
            let mut ok = true;
            for a in 0..d {
                let z = wave_number(axes[a], grid.m);
                if wave_index(-z, grid.m).is_none() {
                    ok = false;
                }
                waves[a] = z;
                waves[d + a] = -z;
                let k = h * z as f64;
                k2 += k * k;
                phase -= k * offset[a];
            }
            if !ok {
                continue;
            }
            let idx = grid.index_of_waves(&waves).expect("on grid");
            s.amps[idx] = Complex64::from_polar((-sigma * sigma * k2).exp(), phase);
        }
        s.normalize()?;
        Ok(s)
    }

    /// Seeded random state supported on momenta with every `|k_i| ≤ k_cut`.
    pub fn random(grid: ImpurityGrid, k_cut: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::zeros(grid);
        let h = grid.momentum_unit();
        let d = grid.d;
        for idx in 0..grid.len() {
            let waves = grid.wave_numbers(idx);
            let inside = waves.chunks(d).all(|w| {
                let k2: f64 = w.iter().map(|&z| (h * z as f64).powi(2)).sum();
                k2 <= k_cut * k_cut + 1e-12
            });
            // Draw for every index so the stream does not depend on k_cut.
            let re: f64 = rng.gen_range(-1.0..1.0);
            let im: f64 = rng.gen_range(-1.0..1.0);
            if inside {
                s.amps[idx] = Complex64::new(re, im);
            }
        }
        s.normalize()?;
        Ok(s)
    }

    fn from_axis_factors(grid: ImpurityGrid, factors: &[Vec<Complex64>]) -> Self {
        let mut amps = vec![Complex64::new(1.0, 0.0)];
        for f in factors {
            let mut next = Vec::with_capacity(amps.len() * f.len());
            for a in &amps {
                for b in f {
                    next.push(a * b);
                }
            }
            amps = next;
        }
        let mut s = ImpurityState { grid, amps };
        s.normalize().expect("Gaussian factors are nonzero");
        s
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(Error::InvalidParameter("cannot normalize the zero state".into()));
        }
        for a in &mut self.amps {
            *a /= n;
        }
        Ok(())
    }

    pub fn inner(&self, other: &ImpurityState) -> Complex64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn distance(&self, other: &ImpurityState) -> f64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    /// Position-grid amplitudes (unitary transform, so `Σ|ψ|² = 1`).
    pub fn position_amplitudes(&self) -> Vec<Complex64> {
        let mut data = self.amps.clone();
        GridFft::new(&self.grid).to_position(&mut data);
        data
    }

    pub fn from_position_amplitudes(grid: ImpurityGrid, mut data: Vec<Complex64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::GridMismatch("position array size".into()));
        }
        GridFft::new(&grid).to_momentum(&mut data);
        Ok(ImpurityState { grid, amps: data })
    }
}

/// `q_ξ = Σ |ξ(k)|² Σ_i k_i²`.
pub fn kinetic_functional(xi: &ImpurityState) -> f64 {
    xi.amps
        .iter()
        .enumerate()
        .map(|(idx, a)| a.norm_sqr() * xi.grid.kinetic_at(idx))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `h_n`: kinetic, `w`, mediated attraction and constant shift.
    Full,
    /// `h̃_n`: mediated attraction dropped, constant shift kept.
    Tilde,
}

#[derive(Debug, Clone)]
pub struct EffectiveHamiltonian {
    pub grid: ImpurityGrid,
    pub variant: Variant,
    /// Momentum multipliers `Σ_i k_i²`.
    pub kinetic: Vec<f64>,
    /// Position multipliers `Σ_{i<j} [w - ω λ² W](|y_i - y_j|)`.
    pub pair_terms: Vec<f64>,
    /// `-n λ² W(0)`.
    pub constant: f64,
    /// Weight `ω` of the mediated pair attraction.
    pub pair_weight: f64,
    pub lambda: f64,
}

/// Settings of [`build_effective_hamiltonian`] beyond the grid.
#[derive(Debug, Clone)]
pub struct EffectiveSetup<'a> {
    pub lambda: f64,
    pub table: &'a PotentialTable,
    pub w: &'a ImpurityPotential,
    pub variant: Variant,
    /// `1` reproduces the printed effective Hamiltonian; `2` counts both
    /// orderings `(i,j)`, `(j,i)` of the second-order pair exchange.
    pub pair_weight: f64,
}

pub fn build_effective_hamiltonian(grid: ImpurityGrid, setup: &EffectiveSetup<'_>) -> Result<EffectiveHamiltonian> {
    let table = setup.table;
    if table.d != grid.d {
        return Err(Error::GridMismatch(format!(
            "potential table is for d = {}, grid has d = {}",
            table.d, grid.d
        )));
    }
    let w0 = table.w_at(0.0)?;
    let lam2 = setup.lambda * setup.lambda;
    let constant = -(grid.n as f64) * lam2 * w0;
    let kinetic: Vec<f64> = (0..grid.len()).map(|i| grid.kinetic_at(i)).collect();
    let mut pair_terms = vec![0.0; grid.len()];
    if grid.n >= 2 {
        let needed = grid.max_separation();
        let with_w = setup.variant == Variant::Full && lam2 != 0.0;
        if with_w && table.max_radius() < needed * (1.0 - 1e-12) {
            return Err(Error::TableIncomplete {
                needed,
                available: table.max_radius(),
            });
        }
        // Pair profile on the displacement grid (per-axis index differences).
        let d = grid.d;
        let cells = grid.m.pow(d as u32);
        let origin = vec![0usize; d];
        let mut disp = vec![0usize; d];
        let mut profile = vec![0.0; cells];
        for (c, slot) in profile.iter_mut().enumerate() {
            let mut rem = c;
            for s in disp.iter_mut().rev() {
                *s = rem % grid.m;
                rem /= grid.m;
            }
            let r = grid.periodic_distance(&disp, &origin);
            let mut v = setup.w.eval(r);
            if with_w {
                v -= setup.pair_weight * lam2 * table.w_at(r.min(table.max_radius()))?;
            }
            *slot = v;
        }
        let mut axes = vec![0usize; grid.axes()];
        for (x, slot) in pair_terms.iter_mut().enumerate() {
            grid.unflatten(x, &mut axes);
            let mut v = 0.0;
            for i in 0..grid.n {
                for j in i + 1..grid.n {
                    let mut c = 0;
                    for a in 0..d {
                        let diff = (axes[i * d + a] + grid.m - axes[j * d + a]) % grid.m;
                        c = c * grid.m + diff;
                    }
                    v += profile[c];
                }
            }
            *slot = v;
        }
    }
    Ok(EffectiveHamiltonian {
        grid,
        variant: setup.variant,
        kinetic,
        pair_terms,
        constant,
        pair_weight: setup.pair_weight,
        lambda: setup.lambda,
    })
}

impl EffectiveHamiltonian {
    fn check_grid(&self, xi: &ImpurityState) -> Result<()> {
        if xi.grid != self.grid {
            return Err(Error::GridMismatch("state and Hamiltonian grids differ".into()));
        }
        Ok(())
    }

    /// `H ξ`.
    pub fn apply(&self, xi: &ImpurityState) -> Result<ImpurityState> {
        self.check_grid(xi)?;
        let fft = GridFft::new(&self.grid);
        let mut pos = xi.amps.clone();
        fft.to_position(&mut pos);
        for (p, v) in pos.iter_mut().zip(&self.pair_terms) {
            *p *= *v;
        }
        fft.to_momentum(&mut pos);
        let amps = xi
            .amps
            .iter()
            .zip(&self.kinetic)
            .zip(&pos)
            .map(|((a, k), p)| a * (k + self.constant) + p)
            .collect();
        Ok(ImpurityState {
            grid: self.grid,
            amps,
        })
    }

    pub fn energy(&self, xi: &ImpurityState) -> Result<f64> {
        Ok(xi.inner(&self.apply(xi)?).re)
    }

    /// `max |multiplier|` over kinetic and potential parts.
    pub fn max_multiplier(&self) -> f64 {
        let k = self.kinetic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let p = self.pair_terms.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        k.max(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observables {
    pub t: f64,
    pub norm: f64,
    pub energy: f64,
    pub q_xi: f64,
    /// `⟨|y_1 - y_2|⟩` (minimal image), zero for one impurity.
    pub pair_distance: f64,
    pub pair_distance_sq: f64,
}

/// Minimal-image moments `(⟨r⟩, ⟨r²⟩)` of the first pair separation.
pub fn pair_distance_moments(xi: &ImpurityState) -> (f64, f64) {
    let grid = xi.grid;
    if grid.n < 2 {
        return (0.0, 0.0);
    }
    let pos = xi.position_amplitudes();
    let d = grid.d;
    let mut axes = vec![0usize; grid.axes()];
    let (mut m1, mut m2) = (0.0, 0.0);
    for (x, a) in pos.iter().enumerate() {
        grid.unflatten(x, &mut axes);
        let r = grid.periodic_distance(&axes[..d], &axes[d..2 * d]);
        let p = a.norm_sqr();
        m1 += p * r;
        m2 += p * r * r;
    }
    (m1, m2)
}

pub fn observe(h: &EffectiveHamiltonian, xi: &ImpurityState, t: f64) -> Result<Observables> {
    let (pair_distance, pair_distance_sq) = pair_distance_moments(xi);
    Ok(Observables {
        t,
        norm: xi.norm(),
        energy: h.energy(xi)?,
        q_xi: kinetic_functional(xi),
        pair_distance,
        pair_distance_sq,
    })
}

/// Strang-split propagator `e^{-iHt}` with `ceil(t/dt)` equal steps; calls
/// `observer` after every `observe_every` steps (and at the end).
pub fn evolve_effective_observed<F>(
    xi0: &ImpurityState,
    h: &EffectiveHamiltonian,
    t: f64,
    dt: f64,
    observe_every: usize,
    mut observer: F,
) -> Result<ImpurityState>
where
    F: FnMut(f64, &ImpurityState) -> Result<()>,
{
    h.check_grid(xi0)?;
    if (xi0.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "initial state has norm {}, expected 1",
            xi0.norm()
        )));
    }
    if !(dt > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("need t ≥ 0 and dt > 0, got t={t}, dt={dt}")));
    }
    if t == 0.0 {
        return Ok(xi0.clone());
    }
    let steps = (t / dt).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    if dt * h.max_multiplier() >= 0.5 {
        return Err(Error::UnstableStep(format!(
            "dt·max|multiplier| = {:.3} must stay below 0.5",
            dt * h.max_multiplier()
        )));
    }
    let fft = GridFft::new(&h.grid);
    let half_kin: Vec<Complex64> = h
        .kinetic
        .iter()
        .map(|k| Complex64::from_polar(1.0, -0.5 * k * dt))
        .collect();
    let pot: Vec<Complex64> = h
        .pair_terms
        .iter()
        .map(|v| Complex64::from_polar(1.0, -v * dt))
        .collect();
    let mut amps = xi0.amps.clone();
    let every = observe_every.max(1);
    for step in 1..=steps {
        for (a, p) in amps.iter_mut().zip(&half_kin) {
            *a *= p;
        }
        if h.grid.n >= 2 {
            fft.to_position(&mut amps);
            for (a, p) in amps.iter_mut().zip(&pot) {
                *a *= p;
            }
            fft.to_momentum(&mut amps);
        }
        for (a, p) in amps.iter_mut().zip(&half_kin) {
            *a *= p;
        }
        if step % every == 0 || step == steps {
            let norm = amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_DRIFT_TOL {
                return Err(Error::UnstableStep(format!("norm drifted to {norm}")));
            }
            let time = step as f64 * dt;
            let phase = Complex64::from_polar(1.0, -h.constant * time);
            let snapshot = ImpurityState {
                grid: h.grid,
                amps: amps.iter().map(|a| a * phase).collect(),
            };
            observer(time, &snapshot)?;
        }
    }
    let phase = Complex64::from_polar(1.0, -h.constant * t);
    for a in &mut amps {
        *a *= phase;
    }
    Ok(ImpurityState { grid: h.grid, amps })
}

pub fn evolve_effective(xi0: &ImpurityState, h: &EffectiveHamiltonian, t: f64, dt: f64) -> Result<ImpurityState> {
    evolve_effective_observed(xi0, h, t, dt, usize::MAX, |_, _| Ok(()))
}

/// Default step `t/2048`.
pub fn default_dt(t: f64) -> f64 {
    t / 2048.0
}

/// Evolves with `dt`, `dt/2`, … until two successive results differ by less
/// than `tol` in norm; returns the final state and the step used.
pub fn evolve_converged(
    xi0: &ImpurityState,
    h: &EffectiveHamiltonian,
    t: f64,
    dt: f64,
    tol: f64,
    max_halvings: usize,
) -> Result<(ImpurityState, f64)> {
    let mut dt = dt;
    let mut prev = evolve_effective(xi0, h, t, dt)?;
    for _ in 0..max_halvings {
        dt *= 0.5;
        let next = evolve_effective(xi0, h, t, dt)?;
        if next.distance(&prev) < tol {
            return Ok((next, dt));
        }
        prev = next;
    }
    Ok((prev, dt))
}

/// `e^{-iHt} ξ₀` with Strang steps refined until successive halvings agree
/// to `1e-10`.
pub fn evolve_to(xi0: &ImpurityState, h: &EffectiveHamiltonian, t: f64) -> Result<ImpurityState> {
    if t == 0.0 {
        return Ok(xi0.clone());
    }
    let mut dt = t / 64.0;
    while dt * h.max_multiplier() >= 0.25 {
        dt *= 0.5;
    }
    Ok(evolve_converged(xi0, h, t, dt, 1e-10, 14)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effective_potential::Method;

    fn flat_table(d: usize, w: f64, r_max: f64) -> PotentialTable {
        PotentialTable {
            d,
            k_f: 1.0,
            method: Method::Quadrature,
            spec_id: "test".into(),
            r_grid: vec![0.0, r_max],
            values: vec![w, w],
            err_est: vec![0.0, 0.0],
        }
    }

    fn gauss_table(d: usize, r_max: f64) -> PotentialTable {
        let r: Vec<f64> = (0..=400).map(|i| r_max * i as f64 / 400.0).collect();
        PotentialTable {
            d,
            k_f: 1.0,
            method: Method::Quadrature,
            spec_id: "gauss".into(),
            values: r.iter().map(|x| (-x * x).exp()).collect(),
            err_est: vec![0.0; r.len()],
            r_grid: r,
        }
    }

    #[test]
    fn energy_shift_example() {
        let lattice = MomentumLattice::new(1, 2.0 * PI, 3.0).unwrap();
        let ball = lattice.fermi_ball(1.0).unwrap();
        let spec = PotentialSpec::yukawa(1.0).unwrap();
        let e = energy_shift(&lattice, &ball, 1.0, 2, &spec);
        assert!((e - (2.0 + 2.0 * 3.0 / (2.0 * PI))).abs() < 1e-14);
        assert_eq!(energy_shift(&lattice, &ball, 0.0, 2, &spec), 2.0);
    }

    #[test]
    fn fft_round_trip_and_plane_wave() {
        let grid = ImpurityGrid::new(2, 1, 2.0 * PI, 8).unwrap();
        let s = ImpurityState::plane_wave(grid, &[1, -2]).unwrap();
        let pos = s.position_amplitudes();
        // |ψ(x)|² uniform over the 64 points.
        for p in &pos {
            assert!((p.norm_sqr() - 1.0 / 64.0).abs() < 1e-15);
        }
        let back = ImpurityState::from_position_amplitudes(grid, pos).unwrap();
        assert!(back.distance(&s) < 1e-14);
        assert!((kinetic_functional(&s) - 5.0).abs() < 1e-14);
    }

    #[test]
    fn kinetic_functional_examples() {
        let grid = ImpurityGrid::new(1, 2, 2.0 * PI, 8).unwrap();
        assert_eq!(kinetic_functional(&ImpurityState::plane_wave(grid, &[0, 0]).unwrap()), 0.0);
        assert!((kinetic_functional(&ImpurityState::plane_wave(grid, &[1, 0]).unwrap()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kinetic_matches_finite_difference() {
        let grid = ImpurityGrid::new(1, 1, 8.0 * PI, 256).unwrap();
        let sigma = 0.7;
        let s = ImpurityState::gaussian_product(grid, &[[3.0, 0.0, 0.0]], sigma, &[[0.5, 0.0, 0.0]]).unwrap();
        let q = kinetic_functional(&s);
        assert!((q - (1.0 / (4.0 * sigma * sigma) + 0.25)).abs() < 1e-6, "{q}");
        // Second-order finite differences of the position amplitudes.
        let pos = s.position_amplitudes();
        let h = grid.spacing();
        let m = grid.m;
        let mut fd = 0.0;
        for j in 0..m {
            let lap = (pos[(j + 1) % m] - 2.0 * pos[j] + pos[(j + m - 1) % m]) / (h * h);
            fd += -(pos[j].conj() * lap).re;
        }
        assert!((fd / q - 1.0).abs() < 1e-2, "{fd} vs {q}");
    }

    #[test]
    fn free_evolution_is_exact() {
        let grid = ImpurityGrid::new(2, 1, 2.0 * PI, 16).unwrap();
        let xi = ImpurityState::gaussian_product(grid, &[[1.0, 0.0, 0.0], [4.0, 0.0, 0.0]], 0.5, &[[0.0; 3]; 2]).unwrap();
        let table = flat_table(1, 0.0, 10.0);
        let w = ImpurityPotential::Zero;
        let setup = EffectiveSetup {
            lambda: 0.0,
            table: &table,
            w: &w,
            variant: Variant::Full,
            pair_weight: 1.0,
        };
        let h = build_effective_hamiltonian(grid, &setup).unwrap();
        let t = 0.37;
        let out = evolve_effective(&xi, &h, t, t / 400.0).unwrap();
        for (idx, (a, b)) in xi.amps.iter().zip(&out.amps).enumerate() {
            let exact = a * Complex64::from_polar(1.0, -grid.kinetic_at(idx) * t);
            assert!((exact - b).norm() < 1e-12);
        }
        assert_eq!(evolve_effective(&xi, &h, 0.0, 0.1).unwrap(), xi);
    }

    #[test]
    fn tilde_variant_is_a_global_phase() {
        let grid = ImpurityGrid::new(2, 1, 2.0 * PI, 16).unwrap();
        let xi = ImpurityState::random(grid, 3.0, 7).unwrap();
        let table = gauss_table(1, 4.0);
        let w = ImpurityPotential::Zero;
        let lambda = 0.8;
        let mk = |variant, lambda| {
            build_effective_hamiltonian(
                grid,
                &EffectiveSetup {
                    lambda,
                    table: &table,
                    w: &w,
                    variant,
                    pair_weight: 1.0,
                },
            )
            .unwrap()
        };
        let tilde = mk(Variant::Tilde, lambda);
        let free = mk(Variant::Full, 0.0);
        let t = 0.5;
        let a = evolve_effective(&xi, &tilde, t, 1e-3).unwrap();
        let b = evolve_effective(&xi, &free, t, 1e-3).unwrap();
        let phase = Complex64::from_polar(1.0, 2.0 * lambda * lambda * t);
        for (x, y) in a.amps.iter().zip(&b.amps) {
            assert!((x - y * phase).norm() < 1e-12);
        }
    }

    #[test]
    fn pair_term_at_contact_is_attractive() {
        let grid = ImpurityGrid::new(2, 1, 2.0 * PI, 8).unwrap();
        let table = gauss_table(1, 4.0);
        let w = ImpurityPotential::Zero;
        let h = build_effective_hamiltonian(
            grid,
            &EffectiveSetup {
                lambda: 1.0,
                table: &table,
                w: &w,
                variant: Variant::Full,
                pair_weight: 1.0,
            },
        )
        .unwrap();
        // y_1 = y_2 = 0 is flat index 0.
        assert!((h.pair_terms[0] + 1.0).abs() < 1e-15);
        assert!((h.constant + 2.0).abs() < 1e-15);
    }

    #[test]
    fn table_coverage_checked() {
        let grid = ImpurityGrid::new(2, 2, 2.0 * PI, 8).unwrap();
        let table = gauss_table(2, 3.0);
        let w = ImpurityPotential::Zero;
        let r = build_effective_hamiltonian(
            grid,
            &EffectiveSetup {
                lambda: 1.0,
                table: &table,
                w: &w,
                variant: Variant::Full,
                pair_weight: 1.0,
            },
        );
        assert!(matches!(r, Err(Error::TableIncomplete { .. })));
    }

    #[test]
    fn strang_is_second_order_and_conserves() {
        let grid = ImpurityGrid::new(2, 1, 2.0 * PI, 16).unwrap();
        let table = gauss_table(1, 4.0);
        let w = ImpurityPotential::Zero;
        let h = build_effective_hamiltonian(
            grid,
            &EffectiveSetup {
                lambda: 3.0,
                table: &table,
                w: &w,
                variant: Variant::Full,
                pair_weight: 1.0,
            },
        )
        .unwrap();
        let xi = ImpurityState::gaussian_product(grid, &[[2.0, 0.0, 0.0], [3.0, 0.0, 0.0]], 0.4, &[[0.0; 3]; 2]).unwrap();
        let t = 0.5;
        let obs = |dt: f64| {
            let s = evolve_effective(&xi, &h, t, dt).unwrap();
            assert!((s.norm() - 1.0).abs() < 1e-9);
            pair_distance_moments(&s).0
        };
        let (a, b, c) = (obs(t / 256.0), obs(t / 512.0), obs(t / 1024.0));
        let ratio = (a - b) / (b - c);
        assert!((ratio - 4.0).abs() < 0.3, "Richardson ratio {ratio}");
        let e0 = h.energy(&xi).unwrap();
        let e1 = h.energy(&evolve_effective(&xi, &h, t, t / 1024.0).unwrap()).unwrap();
        assert!((e1 - e0).abs() < 1e-3 * e0.abs().max(1.0));
    }
}
