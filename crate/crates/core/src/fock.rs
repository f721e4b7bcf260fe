//! Truncated particle-hole Fock space for `n` impurities in the Fermi sea.
//!
//! A basis state is a particle-hole configuration (holes in the Fermi ball,
//! particles outside it, at most `m_max` of each) times a tuple of impurity
//! momenta. The fermion part is the occupation-ordered product
//! `a*_{j_1} ⋯ a*_{j_N} |0⟩` with `j_1 < ⋯ < j_N` in lattice order, so the
//! configuration without holes is `Ω₀` with sign `+1`.
//!
//! Impurities live on the same `M^{nd}` pseudo-spectral grid as the
//! effective dynamics, i.e. on the discrete torus `(L/M) Z_M^d`. On that
//! grid `e^{i(k-l)y}` shifts the impurity wave index by `-(l-k)` modulo `M`,
//! and the generator conserves the total momentum (impurity wave indices
//! summed modulo `M`, plus the fermion momentum) per axis. Each block of
//! fixed total momentum is stored as `config × slot`, where the slot holds
//! the momenta of impurities `1..n-1` and the last one is determined.
//!
//! Configurations are ordered by hole count `m`, then by the holes and
//! the particles, each in colexicographic order of the sorted index sets, so
//! the `m_max` basis is a prefix of the `m_max + 1` basis.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effective_dynamics::{
    build_effective_hamiltonian, evolve_to, wave_number, EffectiveSetup, ImpurityGrid, ImpurityState,
    Variant,
};
use crate::effective_potential::PotentialTable;
use crate::error::{Error, Result};
use crate::krylov::{expm_multiply, HermitianOperator, KrylovOptions, KrylovStats};
use crate::lattice::{int_norm2, int_sub, FermiBall, IntVec, MomentumLattice};
use crate::potentials::{ImpurityPotential, PotentialSpec};

/// Occupations are `u128` bitmasks over lattice modes.
pub const MAX_FOCK_MODES: usize = 128;
pub const MAX_HOLES: usize = 3;
pub const DEFAULT_BASIS_CAP: usize = 20_000_000;
pub const DEFAULT_TRANSITION_CAP: usize = 150_000_000;

type C64 = Complex64;

/// Total momentum label: per-axis wave index modulo `M`.
pub type Block = [usize; 3];

fn binomials(n: usize) -> Vec<[u64; MAX_HOLES + 2]> {
    let mut b = vec![[0u64; MAX_HOLES + 2]; n + 1];
    for (i, row) in b.iter_mut().enumerate() {
        row[0] = 1;
        for k in 1..MAX_HOLES + 2 {
            row[k] = if k > i { 0 } else { binom(i as u64, k as u64) };
        }
    }
    b
}

fn binom(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, j| acc * (n - j) / (j + 1))
}

/// Holes and particles of one configuration as positions in the ball and
/// the outside list (both in lattice order), ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PHConfig {
    pub m: u8,
    pub holes: [u16; MAX_HOLES],
    pub particles: [u16; MAX_HOLES],
}

impl PHConfig {
    pub fn holes(&self) -> &[u16] {
        &self.holes[..self.m as usize]
    }

    pub fn particles(&self) -> &[u16] {
        &self.particles[..self.m as usize]
    }
}

#[derive(Debug, Clone)]
pub struct FockBasis {
    lattice: MomentumLattice,
    ball: FermiBall,
    grid: ImpurityGrid,
    m_max: usize,
    block: Block,
    inside: Vec<usize>,
    outside: Vec<usize>,
    /// Position of a lattice mode in `inside` or `outside`.
    local: Vec<u16>,
    binom: Vec<[u64; MAX_HOLES + 2]>,
    offsets: Vec<usize>,
    configs: Vec<PHConfig>,
    occ: Vec<u128>,
    momentum: Vec<IntVec>,
    /// `Σ_particles l² − Σ_holes k²`.
    t_exc: Vec<f64>,
    slots: usize,
    /// Per slot, per-axis sums of the free impurities' wave indices mod M.
    slot_sums: Vec<Block>,
}

/// Dimension of the block basis without building it.
pub fn basis_dimension(lattice: &MomentumLattice, ball: &FermiBall, m_max: usize, grid: &ImpurityGrid) -> u128 {
    let nb = ball.count() as u64;
    let no = (lattice.len() - ball.count()) as u64;
    let configs: u128 = (0..=m_max as u64)
        .map(|m| binom(nb, m.min(nb)) as u128 * binom(no, m.min(no)) as u128 * (m <= nb.min(no)) as u128)
        .sum();
    configs * (grid.m as u128).pow(((grid.n - 1) * grid.d) as u32)
}

impl FockBasis {
    pub fn new(
        lattice: MomentumLattice,
        ball: FermiBall,
        grid: ImpurityGrid,
        m_max: usize,
        block: Block,
        cap: usize,
    ) -> Result<Self> {
        if m_max > MAX_HOLES {
            return Err(Error::InvalidParameter(format!("m_max = {m_max} exceeds {MAX_HOLES}")));
        }
        if lattice.len() > MAX_FOCK_MODES {
            return Err(Error::ResourceLimit {
                what: "fermion modes",
                count: lattice.len(),
                cap: MAX_FOCK_MODES,
            });
        }
        if grid.d != lattice.dim() || (grid.length - lattice.length()).abs() > 1e-12 * lattice.length() {
            return Err(Error::GridMismatch("impurity grid and fermion lattice differ in d or L".into()));
        }
        if block.iter().take(grid.d).any(|&b| b >= grid.m) {
            return Err(Error::InvalidParameter(format!("block label {block:?} not reduced mod {}", grid.m)));
        }
        let dim = basis_dimension(&lattice, &ball, m_max, &grid);
        if dim > cap as u128 {
            return Err(Error::ResourceLimit {
                what: "Fock basis states",
                count: dim.min(usize::MAX as u128) as usize,
                cap,
            });
        }
        let inside: Vec<usize> = ball.members().to_vec();
        let outside: Vec<usize> = lattice.outside_modes(&ball).collect();
        let mut local = vec![0u16; lattice.len()];
        for (j, &i) in inside.iter().enumerate() {
            local[i] = j as u16;
        }
        for (j, &i) in outside.iter().enumerate() {
            local[i] = j as u16;
        }
        let binom = binomials(lattice.len());
        let sea: u128 = inside.iter().fold(0u128, |acc, &i| acc | (1u128 << i));
        let mut offsets = vec![0usize];
        let mut configs = Vec::new();
        for m in 0..=m_max {
            let nh = binom[inside.len()][m] as usize;
            let np = binom[outside.len()][m] as usize;
            for rh in 0..nh {
                let mut holes = [0u16; MAX_HOLES];
                unrank(&binom, rh as u64, m, &mut holes);
                for rp in 0..np {
                    let mut particles = [0u16; MAX_HOLES];
                    unrank(&binom, rp as u64, m, &mut particles);
                    configs.push(PHConfig {
                        m: m as u8,
                        holes,
                        particles,
                    });
                }
            }
            offsets.push(configs.len());
        }
        let h2 = lattice.spacing().powi(2);
        let mut occ = Vec::with_capacity(configs.len());
        let mut momentum = Vec::with_capacity(configs.len());
        let mut t_exc = Vec::with_capacity(configs.len());
        for c in &configs {
            let mut o = sea;
            let mut k: IntVec = [0; 3];
            let mut e = 0i64;
            for &h in c.holes() {
                let i = inside[h as usize];
                o &= !(1u128 << i);
                let z = lattice.coords(i);
                k = int_sub(&k, &z);
                e -= int_norm2(&z);
            }
            for &p in c.particles() {
                let i = outside[p as usize];
                o |= 1u128 << i;
                let z = lattice.coords(i);
                k = [k[0] + z[0], k[1] + z[1], k[2] + z[2]];
                e += int_norm2(&z);
            }
            occ.push(o);
            momentum.push(k);
            t_exc.push(h2 * e as f64);
        }
        let free_axes = (grid.n - 1) * grid.d;
        let slots = grid.m.pow(free_axes as u32);
        let mut slot_sums = vec![[0usize; 3]; slots];
        let mut axes = vec![0usize; free_axes];
        for (s, sum) in slot_sums.iter_mut().enumerate() {
            let mut rem = s;
            for a in axes.iter_mut().rev() {
                *a = rem % grid.m;
                rem /= grid.m;
            }
            for (j, &a) in axes.iter().enumerate() {
                sum[j % grid.d] = (sum[j % grid.d] + a) % grid.m;
            }
        }
        Ok(FockBasis {
            lattice,
            ball,
            grid,
            m_max,
            block,
            inside,
            outside,
            local,
            binom,
            offsets,
            configs,
            occ,
            momentum,
            t_exc,
            slots,
            slot_sums,
        })
    }

    pub fn lattice(&self) -> &MomentumLattice {
        &self.lattice
    }

    pub fn ball(&self) -> &FermiBall {
        &self.ball
    }

    pub fn grid(&self) -> &ImpurityGrid {
        &self.grid
    }

    pub fn m_max(&self) -> usize {
        self.m_max
    }

    pub fn block(&self) -> Block {
        self.block
    }

    pub fn configs(&self) -> &[PHConfig] {
        &self.configs
    }

    pub fn config_count(&self) -> usize {
        self.configs.len()
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn dim(&self) -> usize {
        self.configs.len() * self.slots
    }

    /// Configuration range of the `m`-hole sector.
    pub fn sector(&self, m: usize) -> std::ops::Range<usize> {
        if m > self.m_max {
            return 0..0;
        }
        self.offsets[m]..self.offsets[m + 1]
    }

    pub fn occupation(&self, c: usize) -> u128 {
        self.occ[c]
    }

    /// Lattice indices of the holes of configuration `c`.
    pub fn hole_modes(&self, c: usize) -> Vec<usize> {
        self.configs[c].holes().iter().map(|&h| self.inside[h as usize]).collect()
    }

    pub fn particle_modes(&self, c: usize) -> Vec<usize> {
        self.configs[c].particles().iter().map(|&p| self.outside[p as usize]).collect()
    }

    /// Fermion momentum `Σ particles − Σ holes` in lattice units.
    pub fn fermion_momentum(&self, c: usize) -> IntVec {
        self.momentum[c]
    }

    pub fn excitation_energy(&self, c: usize) -> f64 {
        self.t_exc[c]
    }

    /// Index of a configuration given by sorted hole/particle lattice modes.
    pub fn index_of(&self, holes: &[usize], particles: &[usize]) -> Option<usize> {
        let m = holes.len();
        if m != particles.len() || m > self.m_max {
            return None;
        }
        let mut hs = [0u16; MAX_HOLES];
        let mut ps = [0u16; MAX_HOLES];
        for (j, &h) in holes.iter().enumerate() {
            if !self.ball.contains(h) {
                return None;
            }
            hs[j] = self.local[h];
        }
        for (j, &p) in particles.iter().enumerate() {
            if p >= self.lattice.len() || self.ball.contains(p) {
                return None;
            }
            ps[j] = self.local[p];
        }
        hs[..m].sort_unstable();
        ps[..m].sort_unstable();
        if hs[..m].windows(2).any(|w| w[0] == w[1]) || ps[..m].windows(2).any(|w| w[0] == w[1]) {
            return None;
        }
        Some(self.index_of_local(m, &hs, &ps))
    }

    fn index_of_local(&self, m: usize, holes: &[u16; MAX_HOLES], particles: &[u16; MAX_HOLES]) -> usize {
        let rh = rank(&self.binom, &holes[..m]);
        let rp = rank(&self.binom, &particles[..m]);
        self.offsets[m] + (rh * self.binom[self.outside.len()][m] + rp) as usize
    }

    /// Index of the configuration reached by `a*_l a_k` (lattice modes, `k`
    /// occupied and `l` empty in `c`), or `None` beyond `m_max`.
    fn target_of(&self, c: usize, k: usize, l: usize) -> Option<usize> {
        let cfg = &self.configs[c];
        let m = cfg.m as usize;
        let mut holes = [0u16; MAX_HOLES + 1];
        let mut parts = [0u16; MAX_HOLES + 1];
        holes[..m].copy_from_slice(cfg.holes());
        parts[..m].copy_from_slice(cfg.particles());
        let (mut nh, mut np) = (m, m);
        if self.ball.contains(k) {
            insert_sorted(&mut holes, &mut nh, self.local[k]);
        } else {
            remove_sorted(&mut parts, &mut np, self.local[k]);
        }
        if self.ball.contains(l) {
            remove_sorted(&mut holes, &mut nh, self.local[l]);
        } else {
            insert_sorted(&mut parts, &mut np, self.local[l]);
        }
        debug_assert_eq!(nh, np);
        if nh > self.m_max {
            return None;
        }
        let mut hs = [0u16; MAX_HOLES];
        let mut ps = [0u16; MAX_HOLES];
        hs[..nh].copy_from_slice(&holes[..nh]);
        ps[..nh].copy_from_slice(&parts[..nh]);
        Some(self.index_of_local(nh, &hs, &ps))
    }

    /// Flat index on the full impurity grid of slot `s` in configuration `c`.
    pub fn impurity_index(&self, c: usize, s: usize) -> usize {
        let g = &self.grid;
        let mm = g.m as i64;
        let k = self.momentum[c];
        let mut last = 0usize;
        for a in 0..g.d {
            let v = (self.block[a] as i64 - k[a] as i64 - self.slot_sums[s][a] as i64).rem_euclid(mm);
            last = last * g.m + v as usize;
        }
        s * g.m.pow(g.d as u32) + last
    }
}

/// Colex rank of an ascending set.
fn rank(binom: &[[u64; MAX_HOLES + 2]], set: &[u16]) -> u64 {
    set.iter().enumerate().map(|(j, &x)| binom[x as usize][j + 1]).sum()
}

fn unrank(binom: &[[u64; MAX_HOLES + 2]], mut r: u64, m: usize, out: &mut [u16; MAX_HOLES]) {
    for j in (1..=m).rev() {
        let mut c = j - 1;
        while binom[c + 1][j] <= r {
            c += 1;
        }
        out[j - 1] = c as u16;
        r -= binom[c][j];
    }
}

fn remove_sorted(set: &mut [u16; MAX_HOLES + 1], len: &mut usize, x: u16) {
    let pos = set[..*len].iter().position(|&v| v == x).expect("element present");
    set.copy_within(pos + 1..*len, pos);
    *len -= 1;
}

fn insert_sorted(set: &mut [u16; MAX_HOLES + 1], len: &mut usize, x: u16) {
    let pos = set[..*len].partition_point(|&v| v < x);
    set.copy_within(pos..*len, pos + 1);
    set[pos] = x;
    *len += 1;
}

/// Sign of `a*_l a_k` on an occupation: `(−1)^{# occupied strictly between}`.
pub fn hop_sign(occ: u128, k: usize, l: usize) -> f64 {
    let (lo, hi) = if k < l { (k, l) } else { (l, k) };
    let between = if hi - lo <= 1 {
        0
    } else {
        let upper = if hi >= 128 { u128::MAX } else { (1u128 << hi) - 1 };
        upper & !((1u128 << (lo + 1)) - 1)
    };
    if (occ & between).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// A block state: amplitudes laid out as `config × slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct FockState {
    pub block: Block,
    pub amps: Vec<C64>,
}

impl FockState {
    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &FockState) -> C64 {
        self.amps.iter().zip(&other.amps).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn distance(&self, other: &FockState) -> f64 {
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }
}

/// Total-momentum block of a flat impurity index.
pub fn block_of_index(grid: &ImpurityGrid, idx: usize) -> Block {
    let mut axes = vec![0usize; grid.axes()];
    grid.unflatten(idx, &mut axes);
    let mut b = [0usize; 3];
    for (j, &a) in axes.iter().enumerate() {
        b[j % grid.d] = (b[j % grid.d] + a) % grid.m;
    }
    b
}

/// Blocks carrying weight above `1e-28`, with their squared norms.
pub fn impurity_blocks(xi: &ImpurityState) -> Vec<(Block, f64)> {
    let mut out: Vec<(Block, f64)> = Vec::new();
    for (idx, a) in xi.amps.iter().enumerate() {
        let w = a.norm_sqr();
        if w == 0.0 {
            continue;
        }
        let b = block_of_index(&xi.grid, idx);
        match out.iter_mut().find(|(x, _)| *x == b) {
            Some(e) => e.1 += w,
            None => out.push((b, w)),
        }
    }
    out.retain(|&(_, w)| w > 1e-28);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// `ξ ⊗ Ω₀` restricted to the basis block.
pub fn fermi_sea_state(basis: &FockBasis, xi: &ImpurityState) -> Result<FockState> {
    if xi.grid != basis.grid {
        return Err(Error::GridMismatch("impurity state and Fock basis grids differ".into()));
    }
    let mut amps = vec![C64::default(); basis.dim()];
    for s in 0..basis.slots {
        amps[s] = xi.amps[basis.impurity_index(0, s)];
    }
    Ok(FockState {
        block: basis.block,
        amps,
    })
}

/// The `m = 0` component of a block state as an impurity state (other
/// blocks zero).
pub fn sea_component(basis: &FockBasis, psi: &FockState) -> ImpurityState {
    let mut xi = ImpurityState::zeros(basis.grid);
    for s in 0..basis.slots {
        xi.amps[basis.impurity_index(0, s)] = psi.amps[s];
    }
    xi
}

/// `P^{(m)} Ψ`.
pub fn project_holes(basis: &FockBasis, psi: &FockState, m: usize) -> FockState {
    let r = basis.sector(m);
    let (lo, hi) = (r.start * basis.slots, r.end * basis.slots);
    let amps = psi
        .amps
        .iter()
        .enumerate()
        .map(|(i, a)| if i >= lo && i < hi { *a } else { C64::default() })
        .collect();
    FockState {
        block: psi.block,
        amps,
    }
}

/// `‖P^{(m)} Ψ‖²` for `m = 0..=m_max`.
pub fn sector_weights(basis: &FockBasis, psi: &FockState) -> Vec<f64> {
    (0..=basis.m_max)
        .map(|m| {
            let r = basis.sector(m);
            psi.amps[r.start * basis.slots..r.end * basis.slots]
                .iter()
                .map(|a| a.norm_sqr())
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Move {
    target: u32,
    /// `q index << 1 | sign bit`.
    code: u32,
}

/// `ℍ = h⁰_n + (T − E⁰) + 𝕍` on one block of a [`FockBasis`].
#[derive(Debug)]
pub struct MicroHamiltonian {
    pub basis: FockBasis,
    pub lambda: f64,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    moves: Vec<Move>,
    /// `λ L^{-d} v̂(|q|)` per distinct `q`.
    q_coef: Vec<f64>,
    /// Flat wave-index shift `(−q) mod M` per distinct `q`.
    q_shift: Vec<usize>,
    /// `shift_maps[i][u][s]`: slot `s` with free impurity `i` moved by `+u`.
    shift_maps: Vec<Vec<Vec<u32>>>,
    /// `ŵ(u)` with the source-slot map of each pair transfer.
    w_terms: Vec<(f64, Vec<u32>)>,
    drop_pair: Vec<f64>,
    drop_cutoff: Vec<f64>,
}

/// Settings of [`MicroHamiltonian::new`].
#[derive(Debug, Clone)]
pub struct MicroSetup<'a> {
    pub lambda: f64,
    pub spec: &'a PotentialSpec,
    pub w: &'a ImpurityPotential,
    pub transition_cap: usize,
}

impl MicroHamiltonian {
    pub fn new(basis: FockBasis, setup: &MicroSetup<'_>) -> Result<Self> {
        let lat = &basis.lattice;
        let g = basis.grid;
        let d = g.d;
        let h = lat.spacing();
        let ld = lat.length().powi(d as i32);
        let zmax = lat.modes().iter().map(|z| z.iter().map(|c| c.abs()).max().unwrap_or(0)).max().unwrap_or(0);
        // q = l − k has components in [−2 zmax, 2 zmax].
        let span = 4 * zmax + 1;
        let q_count = (span as usize).pow(d as u32);
        let q_of = |qi: usize| -> IntVec {
            let mut z = [0i32; 3];
            let mut rem = qi;
            for a in (0..d).rev() {
                z[a] = (rem % span as usize) as i32 - 2 * zmax;
                rem /= span as usize;
            }
            z
        };
        let q_index = |z: &IntVec| -> usize { (0..d).fold(0, |acc, a| acc * span as usize + (z[a] + 2 * zmax) as usize) };
        let mm = g.m as i64;
        let mut q_coef = Vec::with_capacity(q_count);
        let mut q_shift = Vec::with_capacity(q_count);
        for qi in 0..q_count {
            let z = q_of(qi);
            q_coef.push(setup.lambda / ld * setup.spec.eval(h * (int_norm2(&z) as f64).sqrt()));
            let mut flat = 0usize;
            for &c in z.iter().take(d) {
                flat = flat * g.m + (-(c as i64)).rem_euclid(mm) as usize;
            }
            q_shift.push(flat);
        }

        // Fermion moves, gathered per configuration.
        let nconf = basis.configs.len();
        let n_modes = lat.len();
        let rows: Vec<(Vec<Move>, f64)> = (0..nconf)
            .into_par_iter()
            .map(|c| {
                let occ = basis.occ[c];
                let mut out = Vec::new();
                let mut dropped = 0.0;
                if setup.lambda == 0.0 {
                    return (out, dropped);
                }
                for k in 0..n_modes {
                    if occ >> k & 1 == 0 {
                        continue;
                    }
                    let zk = lat.coords(k);
                    for l in 0..n_modes {
                        if occ >> l & 1 == 1 {
                            continue;
                        }
                        let q = int_sub(&lat.coords(l), &zk);
                        let qi = q_index(&q);
                        let coef = q_coef[qi];
                        if coef == 0.0 {
                            continue;
                        }
                        let Some(target) = basis.target_of(c, k, l) else {
                            let gap = lat.k2(l) - lat.k2(k) + 1.0;
                            dropped += (coef / gap).powi(2);
                            continue;
                        };
                        let sign = hop_sign(occ, k, l);
                        out.push(Move {
                            target: target as u32,
                            code: (qi as u32) << 1 | (sign < 0.0) as u32,
                        });
                    }
                }
                (out, dropped)
            })
            .collect();
        let total: usize = rows.iter().map(|r| r.0.len()).sum();
        if total > setup.transition_cap {
            return Err(Error::ResourceLimit {
                what: "Fock transitions",
                count: total,
                cap: setup.transition_cap,
            });
        }
        let mut row_ptr = Vec::with_capacity(nconf + 1);
        let mut moves = Vec::with_capacity(total);
        let mut drop_pair = Vec::with_capacity(nconf);
        row_ptr.push(0);
        for (r, dp) in rows {
            moves.extend_from_slice(&r);
            row_ptr.push(moves.len());
            drop_pair.push(dp);
        }

        // Per-mode weight of hops out of the lattice (beyond the cutoff).
        let tail = cutoff_tail(lat, setup.spec, setup.lambda)?;
        let drop_cutoff: Vec<f64> = basis
            .occ
            .iter()
            .map(|&o| (0..n_modes).filter(|&k| o >> k & 1 == 1).map(|k| tail[k]).sum())
            .collect();

        // Slot shift maps for the free impurities.
        let cells = g.m.pow(d as u32);
        let free = g.n - 1;
        let slots = basis.slots;
        let shift_maps: Vec<Vec<Vec<u32>>> = (0..free)
            .map(|i| {
                (0..cells)
                    .map(|u| {
                        let uw = unflatten_d(u, g.m, d);
                        (0..slots)
                            .map(|s| {
                                let mut axes = unflatten_d(s, g.m, free * d);
                                for a in 0..d {
                                    axes[i * d + a] = (axes[i * d + a] + uw[a]) % g.m;
                                }
                                axes.iter().fold(0usize, |acc, &x| acc * g.m + x) as u32
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();

        // Impurity pair potential as momentum transfers ŵ(u).
        let mut w_terms = Vec::new();
        if g.n >= 2 && !setup.w.is_zero() {
            let what = pair_profile_hat(&g, setup.w);
            let scale = what.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for i in 0..g.n {
                for j in i + 1..g.n {
                    for (u, &coef) in what.iter().enumerate() {
                        if coef.abs() <= 1e-15 * scale {
                            continue;
                        }
                        let neg = neg_flat(u, g.m, d);
                        // out(p_i, p_j) = Σ_u ŵ(u) in(p_i − u, p_j + u)
                        let map: Vec<u32> = (0..slots)
                            .map(|s| {
                                let mut s2 = s;
                                if i < free {
                                    s2 = shift_maps[i][neg][s2] as usize;
                                }
                                if j < free {
                                    s2 = shift_maps[j][u][s2] as usize;
                                }
                                s2 as u32
                            })
                            .collect();
                        w_terms.push((coef, map));
                    }
                }
            }
        }

        // Diagonal: excitation energy plus impurity kinetic energy.
        let mut diag = vec![0.0; basis.dim()];
        let unit = g.momentum_unit();
        diag.par_chunks_mut(slots).enumerate().for_each(|(c, dc)| {
            for (s, v) in dc.iter_mut().enumerate() {
                let idx = basis.impurity_index(c, s);
                let mut axes = vec![0usize; g.axes()];
                g.unflatten(idx, &mut axes);
                let kin: f64 = axes
                    .iter()
                    .map(|&j| (unit * wave_number(j, g.m) as f64).powi(2))
                    .sum();
                *v = basis.t_exc[c] + kin;
            }
        });

        Ok(MicroHamiltonian {
            basis,
            lambda: setup.lambda,
            diag,
            row_ptr,
            moves,
            q_coef,
            q_shift,
            shift_maps,
            w_terms,
            drop_pair,
            drop_cutoff,
        })
    }

    pub fn transition_count(&self) -> usize {
        self.moves.len()
    }

    pub fn apply_state(&self, psi: &FockState) -> FockState {
        let mut out = vec![C64::default(); psi.amps.len()];
        self.apply(&psi.amps, &mut out);
        FockState {
            block: psi.block,
            amps: out,
        }
    }

    pub fn energy(&self, psi: &FockState) -> f64 {
        psi.inner(&self.apply_state(psi)).re
    }

    /// Estimate of the amplitude the truncated generator fails to create:
    /// `2 ‖R (1 − P) ℍ Ψ‖` with `R = (l² − k² + 1)^{-1}` per dropped hop
    /// `a*_l a_k` (first-order adiabatic amplitude). Coherent sums over the
    /// sources of one dropped target are bounded by Cauchy–Schwarz with
    /// `(m_max + 1)²` pair channels for hole-number overflow and `m + 1`
    /// channels for hops beyond the cutoff.
    pub fn dropped_weight(&self, psi: &FockState) -> f64 {
        let b = &self.basis;
        let s = b.slots;
        let mult = ((b.m_max + 1) * (b.m_max + 1)) as f64;
        let sum: f64 = (0..b.configs.len())
            .map(|c| {
                let w: f64 = psi.amps[c * s..(c + 1) * s].iter().map(|a| a.norm_sqr()).sum();
                let m = b.configs[c].m as f64;
                w * (mult * self.drop_pair[c] + (m + 1.0) * self.drop_cutoff[c])
            })
            .sum();
        2.0 * (b.grid.n as f64 * sum).sqrt()
    }
}

impl HermitianOperator for MicroHamiltonian {
    fn dim(&self) -> usize {
        self.basis.dim()
    }

    fn apply(&self, x: &[C64], y: &mut [C64]) {
        let s_n = self.basis.slots;
        let free = self.basis.grid.n - 1;
        y.par_chunks_mut(s_n).enumerate().for_each(|(c, yc)| {
            let base = c * s_n;
            for (s, v) in yc.iter_mut().enumerate() {
                *v = x[base + s] * self.diag[base + s];
            }
            for (coef, map) in &self.w_terms {
                for (v, &src) in yc.iter_mut().zip(map) {
                    *v += x[base + src as usize] * coef;
                }
            }
            for mv in &self.moves[self.row_ptr[c]..self.row_ptr[c + 1]] {
                let qi = (mv.code >> 1) as usize;
                let coef = if mv.code & 1 == 1 { -self.q_coef[qi] } else { self.q_coef[qi] };
                let tb = mv.target as usize * s_n;
                let xt = &x[tb..tb + s_n];
                // Last impurity: the slot is unchanged.
                for (v, a) in yc.iter_mut().zip(xt) {
                    *v += a * coef;
                }
                let sh = self.q_shift[qi];
                for maps in self.shift_maps.iter().take(free) {
                    for (v, &src) in yc.iter_mut().zip(&maps[sh]) {
                        *v += xt[src as usize] * coef;
                    }
                }
            }
        });
    }
}

fn unflatten_d(mut idx: usize, m: usize, len: usize) -> Vec<usize> {
    let mut out = vec![0usize; len];
    for slot in out.iter_mut().rev() {
        *slot = idx % m;
        idx /= m;
    }
    out
}

fn neg_flat(u: usize, m: usize, d: usize) -> usize {
    unflatten_d(u, m, d).iter().fold(0, |acc, &x| acc * m + (m - x) % m)
}

/// `ŵ(u) = M^{-d} Σ_r w(|r|) e^{-2πi u·r/M}` on the displacement grid
/// (minimal-image distances; real because `w` is even).
fn pair_profile_hat(g: &ImpurityGrid, w: &ImpurityPotential) -> Vec<f64> {
    let d = g.d;
    let cells = g.m.pow(d as u32);
    let origin = vec![0usize; d];
    let profile: Vec<f64> = (0..cells)
        .map(|c| w.eval(g.periodic_distance(&unflatten_d(c, g.m, d), &origin)))
        .collect();
    let tau = 2.0 * std::f64::consts::PI / g.m as f64;
    (0..cells)
        .map(|u| {
            let uw = unflatten_d(u, g.m, d);
            let s: f64 = profile
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let r = unflatten_d(c, g.m, d);
                    let phase: f64 = uw.iter().zip(&r).map(|(&a, &b)| (a * b) as f64).sum::<f64>() * tau;
                    v * phase.cos()
                })
                .sum();
            s / cells as f64
        })
        .collect()
}

/// Per lattice mode `k`: `Σ_{l ∉ lattice} (λ L^{-d} v̂(l−k))² / (l² − k² + 1)²`
/// over an extended lattice of four times the cutoff.
fn cutoff_tail(lat: &MomentumLattice, spec: &PotentialSpec, lambda: f64) -> Result<Vec<f64>> {
    if lambda == 0.0 || spec.is_zero() {
        return Ok(vec![0.0; lat.len()]);
    }
    let d = lat.dim();
    let h = lat.spacing();
    let ld = lat.length().powi(d as i32);
    let ext = MomentumLattice::new(d, lat.length(), 4.0 * lat.cutoff() + h)?;
    let beyond: Vec<IntVec> = ext
        .modes()
        .iter()
        .filter(|z| lat.index_of(z).is_none())
        .copied()
        .collect();
    Ok((0..lat.len())
        .into_par_iter()
        .map(|k| {
            let zk = lat.coords(k);
            let k2 = lat.k2(k);
            beyond
                .iter()
                .map(|zl| {
                    let q = int_sub(zl, &zk);
                    let v = lambda / ld * spec.eval(h * (int_norm2(&q) as f64).sqrt());
                    let gap = lat.k2_of(zl) - k2 + 1.0;
                    (v / gap).powi(2)
                })
                .sum()
        })
        .collect())
}

/// Everything that defines one comparison between the truncated microscopic
/// dynamics and the effective dynamics.
#[derive(Debug, Clone)]
pub struct FockProblem<'a> {
    pub k_f: f64,
    pub cutoff: f64,
    pub m_max: usize,
    pub lambda: f64,
    pub spec: &'a PotentialSpec,
    pub w: &'a ImpurityPotential,
    /// Weight of the mediated pair term in `h_n`, see [`EffectiveSetup`].
    pub pair_weight: f64,
    pub krylov: KrylovOptions,
    pub basis_cap: usize,
    pub transition_cap: usize,
}

impl FockProblem<'_> {
    fn lattice(&self, grid: &ImpurityGrid) -> Result<(MomentumLattice, FermiBall)> {
        let lat = MomentumLattice::new(grid.d, grid.length, self.cutoff)?;
        let ball = lat.fermi_ball(self.k_f)?;
        Ok((lat, ball))
    }

    pub fn hamiltonian(&self, grid: &ImpurityGrid, block: Block) -> Result<MicroHamiltonian> {
        let (lat, ball) = self.lattice(grid)?;
        let basis = FockBasis::new(lat, ball, *grid, self.m_max, block, self.basis_cap)?;
        MicroHamiltonian::new(
            basis,
            &MicroSetup {
                lambda: self.lambda,
                spec: self.spec,
                w: self.w,
                transition_cap: self.transition_cap,
            },
        )
    }

    /// Mediated potential of the same truncated lattice, tabulated at every
    /// minimal-image distance of the impurity grid.
    pub fn potential_table(&self, grid: &ImpurityGrid) -> Result<PotentialTable> {
        let d = grid.d;
        let cells = grid.m.pow(d as u32);
        let origin = vec![0usize; d];
        let mut rs: Vec<f64> = (0..cells)
            .map(|c| grid.periodic_distance(&unflatten_d(c, grid.m, d), &origin))
            .collect();
        rs.sort_by(|a, b| a.total_cmp(b));
        rs.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
        if *rs.last().unwrap_or(&0.0) < grid.max_separation() {
            rs.push(grid.max_separation());
        }
        PotentialTable::truncated_lattice_sum(d, self.k_f, self.spec, &rs, grid.length, self.cutoff)
    }

    pub fn effective_hamiltonian(
        &self,
        grid: &ImpurityGrid,
        table: &PotentialTable,
        variant: Variant,
    ) -> Result<crate::effective_dynamics::EffectiveHamiltonian> {
        build_effective_hamiltonian(
            *grid,
            &EffectiveSetup {
                lambda: self.lambda,
                table,
                w: self.w,
                variant,
                pair_weight: self.pair_weight,
            },
        )
    }
}

/// Result of [`evolve_full`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FullStats {
    pub krylov: KrylovStats,
    pub energy_start: f64,
    pub energy_end: f64,
    pub norm_end: f64,
    /// Largest [`MicroHamiltonian::dropped_weight`] over the accepted substeps.
    pub dropped_weight: f64,
}

/// `e^{-iℍt} Ψ₀` by Krylov substeps.
pub fn evolve_full(h: &MicroHamiltonian, psi0: &FockState, t: f64, opts: &KrylovOptions) -> Result<(FockState, FullStats)> {
    if (psi0.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("initial state has norm {}", psi0.norm())));
    }
    evolve_block(h, psi0, t, opts)
}

fn evolve_block(h: &MicroHamiltonian, psi0: &FockState, t: f64, opts: &KrylovOptions) -> Result<(FockState, FullStats)> {
    if psi0.block != h.basis.block || psi0.amps.len() != h.basis.dim() {
        return Err(Error::GridMismatch("state is not on the Hamiltonian's block".into()));
    }
    let energy_start = h.energy(psi0);
    let mut dropped = h.dropped_weight(psi0);
    let (amps, krylov) = expm_multiply(h, &psi0.amps, t, opts, |_, state| {
        let st = FockState {
            block: psi0.block,
            amps: state.to_vec(),
        };
        dropped = dropped.max(h.dropped_weight(&st));
        Ok(())
    })?;
    let psi = FockState {
        block: psi0.block,
        amps,
    };
    let energy_end = h.energy(&psi);
    let norm_end = psi.norm();
    Ok((
        psi,
        FullStats {
            krylov,
            energy_start,
            energy_end,
            norm_end,
            dropped_weight: dropped,
        },
    ))
}

/// One row of a deficit measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeficitReport {
    pub t: f64,
    pub deficit: f64,
    /// `‖P^{(0)} Ψ(t) − ξ(t) ⊗ Ω₀‖`: the part of the deficit inside the
    /// unexcited sector.
    pub sea_deficit: f64,
    /// Dropped-weight estimates of the blocks combined in quadrature.
    pub dropped_weight: f64,
    pub basis_dim: usize,
    pub blocks: usize,
    pub transitions: usize,
    pub energy_drift: f64,
    pub norm: f64,
    /// `‖P^{(m)} Ψ(t)‖²` summed over blocks.
    pub sector_weights: Vec<f64>,
    pub krylov_substeps: usize,
    pub krylov_applies: usize,
}

/// `‖Ψ(t) − ξ(t) ⊗ Ω₀‖` in the `ℍ = H − E` picture for every `t` in `times`
/// (ascending), where `ξ(t) = e^{-i h_n t} ξ₀`.
pub fn theorem1_deficit(problem: &FockProblem<'_>, xi0: &ImpurityState, times: &[f64]) -> Result<Vec<DeficitReport>> {
    if (xi0.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!("ξ₀ has norm {}", xi0.norm())));
    }
    if times.windows(2).any(|w| w[1] < w[0]) || times.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidParameter("times must be nonnegative and ascending".into()));
    }
    let grid = xi0.grid;
    let table = problem.potential_table(&grid)?;
    let h_eff = problem.effective_hamiltonian(&grid, &table, Variant::Full)?;
    let xis: Vec<ImpurityState> = times
        .iter()
        .map(|&t| evolve_to(xi0, &h_eff, t))
        .collect::<Result<_>>()?;
    let mut reports: Vec<DeficitReport> = times
        .iter()
        .map(|&t| DeficitReport {
            t,
            deficit: 0.0,
            sea_deficit: 0.0,
            dropped_weight: 0.0,
            basis_dim: 0,
            blocks: 0,
            transitions: 0,
            energy_drift: 0.0,
            norm: 0.0,
            sector_weights: vec![0.0; problem.m_max + 1],
            krylov_substeps: 0,
            krylov_applies: 0,
        })
        .collect();
    for (block, _) in impurity_blocks(xi0) {
        let h = problem.hamiltonian(&grid, block)?;
        let mut psi = fermi_sea_state(&h.basis, xi0)?;
        let e0 = h.energy(&psi);
        let mut t_prev = 0.0;
        for (rep, xi_t) in reports.iter_mut().zip(&xis) {
            let (next, stats) = evolve_block(&h, &psi, rep.t - t_prev, &problem.krylov)?;
            psi = next;
            t_prev = rep.t;
            let target = fermi_sea_state(&h.basis, xi_t)?;
            rep.deficit += psi.distance(&target).powi(2);
            rep.sea_deficit += project_holes(&h.basis, &psi, 0).distance(&target).powi(2);
            rep.dropped_weight += stats.dropped_weight.powi(2);
            rep.basis_dim = rep.basis_dim.max(h.basis.dim());
            rep.blocks += 1;
            rep.transitions = rep.transitions.max(h.transition_count());
            let scale = e0.abs().max(1.0);
            rep.energy_drift = rep.energy_drift.max((stats.energy_end - e0).abs() / scale);
            rep.norm += psi.norm().powi(2);
            for (acc, w) in rep.sector_weights.iter_mut().zip(sector_weights(&h.basis, &psi)) {
                *acc += w;
            }
            rep.krylov_substeps += stats.krylov.substeps;
            rep.krylov_applies += stats.krylov.applies;
        }
    }
    for rep in &mut reports {
        rep.deficit = rep.deficit.sqrt();
        rep.sea_deficit = rep.sea_deficit.sqrt();
        rep.dropped_weight = rep.dropped_weight.sqrt();
        rep.norm = rep.norm.sqrt();
    }
    Ok(reports)
}

/// The first Duhamel integrand at `s = 0`: `‖(𝕍 + h⁰_n − h_n)(ξ₀ ⊗ Ω₀)‖`.
/// The two pieces are orthogonal (one and zero holes).
pub fn duhamel_rate(problem: &FockProblem<'_>, xi0: &ImpurityState) -> Result<f64> {
    let grid = xi0.grid;
    let table = problem.potential_table(&grid)?;
    let h_n = problem.effective_hamiltonian(&grid, &table, Variant::Full)?;
    let free = FockProblem {
        lambda: 0.0,
        ..problem.clone()
    };
    let h0 = free.effective_hamiltonian(&grid, &table, Variant::Full)?;
    let a = h0.apply(xi0)?;
    let b = h_n.apply(xi0)?;
    let mut total = a.distance(&b).powi(2);
    for (block, _) in impurity_blocks(xi0) {
        let h = problem.hamiltonian(&grid, block)?;
        let psi = fermi_sea_state(&h.basis, xi0)?;
        let v = project_holes(&h.basis, &h.apply_state(&psi), 1);
        total += v.norm().powi(2);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_basis(m_max: usize, n: usize, m: usize) -> FockBasis {
        let lat = MomentumLattice::new(1, 2.0 * std::f64::consts::PI, 3.0).unwrap();
        let ball = lat.fermi_ball(1.0).unwrap();
        let grid = ImpurityGrid::new(n, 1, 2.0 * std::f64::consts::PI, m).unwrap();
        FockBasis::new(lat, ball, grid, m_max, [0; 3], 1 << 20).unwrap()
    }

    #[test]
    fn rank_roundtrip() {
        let b = binomials(20);
        for m in 0..=3 {
            let total = b[12][m];
            for r in 0..total {
                let mut set = [0u16; MAX_HOLES];
                unrank(&b, r, m, &mut set);
                assert!(set[..m].windows(2).all(|w| w[0] < w[1]));
                assert!(set[..m].iter().all(|&x| x < 12));
                assert_eq!(rank(&b, &set[..m]), r);
            }
        }
    }

    #[test]
    fn prefix_property() {
        let b2 = small_basis(2, 1, 8);
        let b3 = small_basis(3, 1, 8);
        assert_eq!(&b3.configs()[..b2.config_count()], b2.configs());
    }

    #[test]
    fn sign_counts_modes_between() {
        // Occupied modes 1, 2, 4, 5, 7.
        let occ = 0b1011_0110u128;
        assert_eq!(hop_sign(occ, 1, 3), -1.0);
        assert_eq!(hop_sign(occ, 3, 1), -1.0);
        assert_eq!(hop_sign(occ, 1, 6), -1.0);
        assert_eq!(hop_sign(occ, 2, 6), 1.0);
        assert_eq!(hop_sign(occ, 0, 1), 1.0);
    }

    #[test]
    fn hermitian_and_block_preserving() {
        for (lam, wv) in [(0.0, 0.3), (0.7, 0.0), (0.7, 0.3)] {
        let basis = small_basis(2, 2, 4);
        let spec = PotentialSpec::yukawa(1.0).unwrap();
        let w = if wv == 0.0 { ImpurityPotential::Zero } else { ImpurityPotential::Bounded(crate::potentials::RadialTable::new(vec![0.0, 10.0], vec![wv, -0.2]).unwrap()) };
        let h = MicroHamiltonian::new(
            basis,
            &MicroSetup {
                lambda: lam,
                spec: &spec,
                w: &w,
                transition_cap: 1 << 24,
            },
        )
        .unwrap();
        let n = h.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let y: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let mut hx = vec![C64::default(); n];
            let mut hy = vec![C64::default(); n];
            h.apply(&x, &mut hx);
            h.apply(&y, &mut hy);
            let a: C64 = y.iter().zip(&hx).map(|(u, v)| u.conj() * v).sum();
            let b: C64 = x.iter().zip(&hy).map(|(u, v)| u.conj() * v).sum();
            assert!((a - b.conj()).norm() < 1e-10 * a.norm().max(1.0), "{lam} {wv} {a} {b}");
        }
        }
    }
}
