//! Finite-volume momentum lattice `(2π/L) Z^d`, the Fermi ball and the
//! particle-hole pair set `T_F = B_F^c × B_F`.
//!
//! Modes are stored by their integer coordinates `z` (so `k = (2π/L) z`)
//! in lexicographic order. Ball membership is decided on the exact integer
//! norm `|z|^2` against `(k_F L / 2π)^2` with a relative guard of `1e-12`,
//! so boundary points are resolved identically on every run.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on the number of lattice modes.
pub const DEFAULT_MODE_CAP: usize = 10_000_000;

const BOUNDARY_GUARD: f64 = 1e-12;

/// Integer lattice coordinates; unused axes are zero.
pub type IntVec = [i32; 3];

/// Density constant `V_d` with `N / L^d -> V_d k_F^d`.
pub fn density_constant(dim: usize) -> f64 {
    match dim {
        1 => 1.0 / PI,
        2 => 1.0 / (4.0 * PI),
        3 => 1.0 / (6.0 * PI * PI),
        _ => f64::NAN,
    }
}

pub(crate) fn int_norm2(z: &IntVec) -> i64 {
    z.iter().map(|&c| (c as i64) * (c as i64)).sum()
}

#[inline]
pub(crate) fn int_sub(a: &IntVec, b: &IntVec) -> IntVec {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn radius_in_units(momentum: f64, length: f64) -> f64 {
    momentum * length / (2.0 * PI)
}

fn inside(z2: i64, radius_units: f64) -> bool {
    (z2 as f64) <= radius_units * radius_units * (1.0 + BOUNDARY_GUARD)
}

#[derive(Debug, Clone)]
pub struct MomentumLattice {
    dim: usize,
    length: f64,
    cutoff: f64,
    modes: Vec<IntVec>,
    zmax: i32,
    /// Dense lookup over the cube `[-zmax, zmax]^d`.
    lookup: Vec<u32>,
}

const NO_MODE: u32 = u32::MAX;

impl MomentumLattice {
    pub fn new(dim: usize, length: f64, cutoff: f64) -> Result<Self> {
        Self::with_cap(dim, length, cutoff, DEFAULT_MODE_CAP)
    }

    pub fn with_cap(dim: usize, length: f64, cutoff: f64, mode_cap: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidParameter(format!("dimension {dim} not in 1..=3")));
        }
        if !(length > 0.0) || !length.is_finite() {
            return Err(Error::InvalidParameter(format!("box length {length} must be positive")));
        }
        if !(cutoff > 0.0) || !cutoff.is_finite() {
            return Err(Error::InvalidParameter(format!("cutoff {cutoff} must be positive")));
        }
        let rho = radius_in_units(cutoff, length);
        let zmax = (rho * (1.0 + BOUNDARY_GUARD)).floor() as i64;
        let side = (2 * zmax + 1) as f64;
        let cube = side.powi(dim as i32);
        let ball_estimate = match dim {
            1 => 2.0 * rho + 1.0,
            2 => PI * (rho + 1.0).powi(2),
            _ => 4.0 / 3.0 * PI * (rho + 1.0).powi(3),
        };
        if ball_estimate > mode_cap as f64 || cube > (u32::MAX as f64) / 2.0 {
            return Err(Error::ResourceLimit {
                what: "momentum lattice modes",
                count: ball_estimate.min(usize::MAX as f64) as usize,
                cap: mode_cap,
            });
        }
        let zmax = zmax as i32;
        let range = -zmax..=zmax;
        let axis = |active: bool| if active { range.clone() } else { 0..=0 };
        let mut modes = Vec::new();
        for z0 in range.clone() {
            for z1 in axis(dim >= 2) {
                for z2 in axis(dim >= 3) {
                    let z = [z0, z1, z2];
                    if inside(int_norm2(&z), rho) {
                        modes.push(z);
                    }
                }
            }
        }
        if modes.len() > mode_cap {
            return Err(Error::ResourceLimit {
                what: "momentum lattice modes",
                count: modes.len(),
                cap: mode_cap,
            });
        }
        let mut lookup = vec![NO_MODE; cube as usize];
        let mut lattice = MomentumLattice {
            dim,
            length,
            cutoff,
            modes,
            zmax,
            lookup: Vec::new(),
        };
        for (idx, z) in lattice.modes.iter().enumerate() {
            let slot = lattice.slot(z).expect("mode inside cube");
            lookup[slot] = idx as u32;
        }
        lattice.lookup = lookup;
        Ok(lattice)
    }

    fn slot(&self, z: &IntVec) -> Option<usize> {
        let side = (2 * self.zmax + 1) as usize;
        let mut slot = 0usize;
        for axis in 0..self.dim {
            let c = z[axis];
            if c < -self.zmax || c > self.zmax {
                return None;
            }
            slot = slot * side + (c + self.zmax) as usize;
        }
        for axis in self.dim..3 {
            if z[axis] != 0 {
                return None;
            }
        }
        Some(slot)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Lattice spacing `2π/L`.
    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.length
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[IntVec] {
        &self.modes
    }

    pub fn coords(&self, idx: usize) -> IntVec {
        self.modes[idx]
    }

    pub fn momentum(&self, idx: usize) -> [f64; 3] {
        let h = self.spacing();
        let z = self.modes[idx];
        [h * z[0] as f64, h * z[1] as f64, h * z[2] as f64]
    }

    /// `|k|^2` of a mode.
    pub fn k2(&self, idx: usize) -> f64 {
        let h = self.spacing();
        h * h * int_norm2(&self.modes[idx]) as f64
    }

    /// `|k|^2` for an arbitrary integer vector.
    pub fn k2_of(&self, z: &IntVec) -> f64 {
        let h = self.spacing();
        h * h * int_norm2(z) as f64
    }

    pub fn index_of(&self, z: &IntVec) -> Option<usize> {
        let slot = self.slot(z)?;
        match self.lookup[slot] {
            NO_MODE => None,
            idx => Some(idx as usize),
        }
    }

    pub fn fermi_ball(&self, k_f: f64) -> Result<FermiBall> {
        if !(k_f > 0.0) {
            return Err(Error::InvalidParameter(format!("Fermi momentum {k_f} must be positive")));
        }
        if k_f > self.cutoff * (1.0 + BOUNDARY_GUARD) {
            return Err(Error::CutoffTooSmall(format!(
                "Fermi momentum {k_f} exceeds lattice cutoff {}",
                self.cutoff
            )));
        }
        let rho = radius_in_units(k_f, self.length);
        let membership: Vec<bool> = self.modes.iter().map(|z| inside(int_norm2(z), rho)).collect();
        let members = membership
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect();
        Ok(FermiBall {
            k_f,
            members,
            membership,
        })
    }

    /// Iterates `T_F` restricted to the lattice: `l` outside the ball (outer
    /// loop, lattice order) and `k` inside (inner loop, lattice order).
    pub fn excitation_pairs<'a>(&'a self, ball: &'a FermiBall) -> impl Iterator<Item = (usize, usize)> + 'a {
        (0..self.len())
            .filter(move |&l| !ball.contains(l))
            .flat_map(move |l| ball.members.iter().map(move |&k| (l, k)))
    }

    pub fn outside_modes<'a>(&'a self, ball: &'a FermiBall) -> impl Iterator<Item = usize> + 'a {
        (0..self.len()).filter(move |&l| !ball.contains(l))
    }
}

#[derive(Debug, Clone)]
pub struct FermiBall {
    k_f: f64,
    members: Vec<usize>,
    membership: Vec<bool>,
}

impl FermiBall {
    pub fn k_f(&self) -> f64 {
        self.k_f
    }

    /// Number of fermions `N(k_F, L)`.
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.membership[idx]
    }

    /// `E^0 = Σ_{k∈B_F} k^2`.
    pub fn free_ground_energy(&self, lattice: &MomentumLattice) -> f64 {
        self.members.iter().map(|&k| lattice.k2(k)).sum()
    }

    /// `N / L^d`.
    pub fn density(&self, lattice: &MomentumLattice) -> f64 {
        self.count() as f64 / lattice.length().powi(lattice.dim() as i32)
    }
}

/// Compact summary serialized with experiment results.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LatticeSummary {
    pub d: usize,
    pub length: f64,
    pub cutoff: f64,
    pub k_f: f64,
    pub n_fermions: usize,
}

impl LatticeSummary {
    pub fn new(lattice: &MomentumLattice, ball: &FermiBall) -> Self {
        LatticeSummary {
            d: lattice.dim(),
            length: lattice.length(),
            cutoff: lattice.cutoff(),
            k_f: ball.k_f(),
            n_fermions: ball.count(),
        }
    }
}
