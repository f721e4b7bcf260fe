//! Truncated Fock dynamics against an independently built dense model:
//! fermions as sorted mode lists with explicit anticommutation signs,
//! impurities as grid plane waves, `w` through a brute-force DFT.

use std::collections::HashMap;
use std::f64::consts::PI;

use impurity_fermi::effective_dynamics::*;
use impurity_fermi::effective_potential::PotentialTable;
use impurity_fermi::fock::*;
use impurity_fermi::krylov::{HermitianOperator, KrylovOptions};
use impurity_fermi::lattice::{FermiBall, MomentumLattice};
use impurity_fermi::potentials::{ImpurityPotential, PotentialSpec, RadialTable};
use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const L: f64 = 2.0 * PI;

fn setup(cutoff: f64, k_f: f64, n: usize, m: usize) -> (MomentumLattice, FermiBall, ImpurityGrid) {
    let lat = MomentumLattice::new(1, L, cutoff).unwrap();
    let ball = lat.fermi_ball(k_f).unwrap();
    let grid = ImpurityGrid::new(n, 1, L, m).unwrap();
    (lat, ball, grid)
}

fn bump() -> ImpurityPotential {
    ImpurityPotential::Bounded(RadialTable::new(vec![0.0, 1.0, 4.0], vec![0.4, 0.1, -0.15]).unwrap())
}

/// Every occupation with `N` fermions and at most `m_max` holes, as sorted
/// lists, paired with every impurity index whose total momentum matches.
struct Brute {
    states: Vec<(Vec<usize>, usize)>,
    lookup: HashMap<(Vec<usize>, usize), usize>,
}

fn subsets(items: &[usize], m: usize) -> Vec<Vec<usize>> {
    if m == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in subsets(&items[i + 1..], m - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn block_label(lat: &MomentumLattice, grid: &ImpurityGrid, occ: &[usize], ball: &FermiBall, imp: usize) -> usize {
    let mm = grid.m as i64;
    let fermion: i64 = occ.iter().map(|&i| lat.coords(i)[0] as i64).sum::<i64>()
        - ball.members().iter().map(|&i| lat.coords(i)[0] as i64).sum::<i64>();
    let waves: i64 = grid.wave_numbers(imp).iter().map(|&z| z as i64).sum();
    (fermion + waves).rem_euclid(mm) as usize
}

fn brute(lat: &MomentumLattice, ball: &FermiBall, grid: &ImpurityGrid, m_max: usize, block: usize) -> Brute {
    let inside = ball.members().to_vec();
    let outside: Vec<usize> = (0..lat.len()).filter(|&i| !ball.contains(i)).collect();
    let mut states = Vec::new();
    for m in 0..=m_max {
        for holes in subsets(&inside, m) {
            for parts in subsets(&outside, m) {
                let mut occ: Vec<usize> = inside.iter().copied().filter(|i| !holes.contains(i)).collect();
                occ.extend(&parts);
                occ.sort_unstable();
                for imp in 0..grid.len() {
                    if block_label(lat, grid, &occ, ball, imp) == block {
                        states.push((occ.clone(), imp));
                    }
                }
            }
        }
    }
    let lookup = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
    Brute { states, lookup }
}

/// `a*_l a_k` on a sorted occupation list, with the sign of moving the
/// operators through the ordered product.
fn hop(occ: &[usize], k: usize, l: usize) -> Option<(Vec<usize>, f64)> {
    let pk = occ.iter().position(|&x| x == k)?;
    if occ.contains(&l) {
        return None;
    }
    let mut v = occ.to_vec();
    v.remove(pk);
    let mut sign = if pk % 2 == 0 { 1.0 } else { -1.0 };
    let pl = v.partition_point(|&x| x < l);
    v.insert(pl, l);
    if pl % 2 == 1 {
        sign = -sign;
    }
    Some((v, sign))
}

/// Dense `ℍ` on the brute-force basis.
fn dense_h(
    lat: &MomentumLattice,
    ball: &FermiBall,
    grid: &ImpurityGrid,
    b: &Brute,
    m_max: usize,
    lambda: f64,
    spec: &PotentialSpec,
    w: &ImpurityPotential,
) -> Vec<Vec<C64>> {
    let dim = b.states.len();
    let mut h = vec![vec![C64::default(); dim]; dim];
    let unit = 2.0 * PI / L;
    let sea: f64 = ball.members().iter().map(|&i| lat.k2(i)).sum();
    let mm = grid.m as i32;
    let n = grid.n;
    // ⟨p'| Σ_{i<j} w(|y_i − y_j|) |p⟩ by explicit sums over positions.
    let cells = grid.len();
    let mut wmat = vec![vec![C64::default(); cells]; cells];
    if !w.is_zero() {
        for y in 0..cells {
            let mut pos = vec![0usize; n];
            grid.unflatten(y, &mut pos);
            let mut wy = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    wy += w.eval(grid.periodic_distance(&pos[i..=i], &pos[j..=j]));
                }
            }
            for (p2, row) in wmat.iter_mut().enumerate() {
                let z2 = grid.wave_numbers(p2);
                for (p1, e) in row.iter_mut().enumerate() {
                    let z1 = grid.wave_numbers(p1);
                    let ph: f64 = (0..n).map(|i| ((z1[i] - z2[i]) * pos[i] as i32) as f64).sum::<f64>() * 2.0 * PI / mm as f64;
                    *e += C64::from_polar(wy, ph) / cells as f64;
                }
            }
        }
    }
    for (col, (occ, imp)) in b.states.iter().enumerate() {
        let t: f64 = occ.iter().map(|&i| lat.k2(i)).sum::<f64>() - sea;
        let kin: f64 = grid.wave_numbers(*imp).iter().map(|&z| (unit * z as f64).powi(2)).sum();
        h[col][col] += t + kin;
        for (p2, row) in wmat.iter().enumerate() {
            if let Some(&r) = b.lookup.get(&(occ.clone(), p2)) {
                h[r][col] += row[*imp];
            }
        }
        for &k in occ {
            for l in 0..lat.len() {
                if l == k {
                    continue;
                }
                let Some((occ2, sign)) = hop(occ, k, l) else { continue };
                let q = lat.coords(l)[0] - lat.coords(k)[0];
                let coef = lambda / L * spec.eval(lat.spacing() * (q as f64).abs());
                let z = grid.wave_numbers(*imp);
                for i in 0..n {
                    let mut z2 = z.clone();
                    z2[i] = wave_number((z2[i] - q).rem_euclid(mm) as usize, grid.m);
                    let imp2 = grid.index_of_waves(&z2).unwrap();
                    if let Some(&r) = b.lookup.get(&(occ2.clone(), imp2)) {
                        h[r][col] += C64::new(sign * coef, 0.0);
                    } else {
                        // Only hole-number overflow may leave the basis.
                        let holes = ball.members().iter().filter(|i| !occ2.contains(i)).count();
                        assert!(holes > m_max, "momentum leak");
                    }
                }
            }
        }
    }
    h
}

/// Position of a brute-force state in the library basis.
fn library_index(basis: &FockBasis, ball: &FermiBall, occ: &[usize], imp: usize) -> usize {
    let holes: Vec<usize> = ball.members().iter().copied().filter(|i| !occ.contains(i)).collect();
    let parts: Vec<usize> = occ.iter().copied().filter(|&i| !ball.contains(i)).collect();
    let c = basis.index_of(&holes, &parts).expect("config in basis");
    let cells = basis.grid().m.pow(basis.grid().d as u32);
    let s = imp / cells;
    assert_eq!(basis.impurity_index(c, s), imp, "slot maps back to the impurity index");
    c * basis.slots() + s
}

fn compare_dense(m_max: usize, n: usize, m: usize, block: usize, lambda: f64, w: &ImpurityPotential) {
    let (lat, ball, grid) = setup(3.0, 1.0, n, m);
    let spec = PotentialSpec::yukawa(1.0).unwrap();
    let b = brute(&lat, &ball, &grid, m_max, block);
    let basis = FockBasis::new(lat.clone(), ball.clone(), grid, m_max, [block, 0, 0], 1 << 20).unwrap();
    assert_eq!(basis.dim(), b.states.len(), "golden basis count");
    assert_eq!(basis_dimension(&lat, &ball, m_max, &grid), b.states.len() as u128);
    let perm: Vec<usize> = b.states.iter().map(|(o, i)| library_index(&basis, &ball, o, *i)).collect();
    let mut seen = perm.clone();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), perm.len(), "library indices are distinct");
    let dense = dense_h(&lat, &ball, &grid, &b, m_max, lambda, &spec, w);
    let h = MicroHamiltonian::new(basis, &MicroSetup { lambda, spec: &spec, w, transition_cap: 1 << 24 }).unwrap();
    let dim = h.dim();
    let mut worst = 0.0_f64;
    for (col, &pc) in perm.iter().enumerate() {
        let mut x = vec![C64::default(); dim];
        x[pc] = C64::new(1.0, 0.0);
        let mut y = vec![C64::default(); dim];
        h.apply(&x, &mut y);
        for (row, &pr) in perm.iter().enumerate() {
            worst = worst.max((y[pr] - dense[row][col]).norm());
        }
    }
    assert!(worst < 1e-12, "max matrix-element mismatch {worst:e}");
}

#[test]
fn golden_count_and_matrix_single_impurity() {
    for block in [0, 3] {
        compare_dense(1, 1, 8, block, 0.8, &ImpurityPotential::Zero);
        compare_dense(3, 1, 8, block, 0.8, &ImpurityPotential::Zero);
    }
}

#[test]
fn golden_count_and_matrix_two_impurities() {
    compare_dense(2, 2, 4, 0, 0.8, &bump());
    compare_dense(3, 2, 4, 1, 0.6, &bump());
}

#[test]
fn free_generator_is_diagonal_without_w() {
    let (lat, ball, grid) = setup(3.0, 1.0, 2, 4);
    let spec = PotentialSpec::yukawa(1.0).unwrap();
    let basis = FockBasis::new(lat, ball, grid, 2, [0; 3], 1 << 20).unwrap();
    let h = MicroHamiltonian::new(
        basis,
        &MicroSetup { lambda: 0.0, spec: &spec, w: &ImpurityPotential::Zero, transition_cap: 1 << 24 },
    )
    .unwrap();
    for i in (0..h.dim()).step_by(7) {
        let mut x = vec![C64::default(); h.dim()];
        x[i] = C64::new(1.0, 0.0);
        let mut y = vec![C64::default(); h.dim()];
        h.apply(&x, &mut y);
        let off: f64 = y.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.norm()).sum();
        assert_eq!(off, 0.0);
        assert!(y[i].im == 0.0 && y[i].re >= 0.0);
    }
}

fn permutation_sign(p: &[usize]) -> f64 {
    let mut s = 1.0;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            if p[i] > p[j] {
                s = -s;
            }
        }
    }
    s
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Sign of `Π_i a*_{l_i} a_{k_i} Ω₀` relative to the ordered product, by the
/// library's parity rule.
fn library_pair_sign(ball: &FermiBall, ks: &[usize], ls: &[usize]) -> f64 {
    let mut occ: u128 = ball.members().iter().fold(0, |a, &i| a | 1u128 << i);
    let mut sign = 1.0;
    for (&k, &l) in ks.iter().zip(ls).rev() {
        sign *= hop_sign(occ, k, l);
        occ = occ & !(1u128 << k) | 1u128 << l;
    }
    sign
}

#[test]
fn wick_overlaps_of_up_to_three_pairs() {
    let (lat, ball, _) = setup(3.0, 1.0, 1, 2);
    let inside = ball.members().to_vec();
    let outside: Vec<usize> = (0..lat.len()).filter(|&i| !ball.contains(i)).collect();
    let mut checked = 0;
    for m in 1..=3 {
        let perms = permutations(m);
        for ks in subsets(&inside, m) {
            for ls in subsets(&outside, m) {
                let base = library_pair_sign(&ball, &ks, &ls);
                // Same state via the list oracle.
                let mut occ: Vec<usize> = inside.clone();
                let mut s_list = 1.0;
                for (&k, &l) in ks.iter().zip(&ls).rev() {
                    let (o, s) = hop(&occ, k, l).unwrap();
                    occ = o;
                    s_list *= s;
                }
                assert_eq!(base, s_list);
                for pk in &perms {
                    for pl in &perms {
                        let k2: Vec<usize> = pk.iter().map(|&i| ks[i]).collect();
                        let l2: Vec<usize> = pl.iter().map(|&i| ls[i]).collect();
                        let overlap = base * library_pair_sign(&ball, &k2, &l2);
                        let wick = permutation_sign(pk) * permutation_sign(pl);
                        assert_eq!(overlap, wick, "k {ks:?}→{k2:?} l {ls:?}→{l2:?}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert_eq!(checked, 12 + 72 + 144);
}

#[test]
fn anticommutation_round_trip() {
    let (lat, ball, _) = setup(3.0, 1.0, 1, 2);
    let sea: u128 = ball.members().iter().fold(0, |a, &i| a | 1u128 << i);
    for &k in ball.members() {
        for l in (0..lat.len()).filter(|&i| !ball.contains(i)) {
            let s1 = hop_sign(sea, k, l);
            let occ = sea & !(1u128 << k) | 1u128 << l;
            let s2 = hop_sign(occ, l, k);
            assert_eq!(s1 * s2, 1.0, "a*_k a_l a*_l a_k Ω₀ = Ω₀");
        }
    }
}

fn micro(lambda: f64, w: &ImpurityPotential, n: usize, m: usize, block: usize) -> MicroHamiltonian {
    let (lat, ball, grid) = setup(4.0, 2.0, n, m);
    let spec = PotentialSpec::yukawa(1.0).unwrap();
    let basis = FockBasis::new(lat, ball, grid, 3, [block, 0, 0], 1 << 22).unwrap();
    MicroHamiltonian::new(basis, &MicroSetup { lambda, spec: &spec, w, transition_cap: 1 << 26 }).unwrap()
}

fn random_block_xi(grid: ImpurityGrid, block: usize, seed: u64) -> ImpurityState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xi = ImpurityState::zeros(grid);
    for (idx, a) in xi.amps.iter_mut().enumerate() {
        if block_of_index(&grid, idx)[0] == block {
            *a = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
    }
    xi.normalize().unwrap();
    xi
}

#[test]
fn fermi_sea_state_properties() {
    let w = bump();
    let h = micro(1.3, &w, 2, 8, 2);
    let xi = random_block_xi(*h.basis.grid(), 2, 5);
    let psi = fermi_sea_state(&h.basis, &xi).unwrap();
    assert!((psi.norm() - 1.0).abs() < 1e-12);
    assert_eq!(project_holes(&h.basis, &psi, 0), psi);
    assert_eq!(sea_component(&h.basis, &psi), xi);

    let table = PotentialTable::truncated_lattice_sum(1, 2.0, &PotentialSpec::yukawa(1.0).unwrap(), &[0.0, PI], L, 4.0).unwrap();
    let h0 = build_effective_hamiltonian(
        xi.grid,
        &EffectiveSetup { lambda: 0.0, table: &table, w: &w, variant: Variant::Full, pair_weight: 2.0 },
    )
    .unwrap();
    let e_micro = h.energy(&psi);
    let e_eff = h0.energy(&xi).unwrap();
    assert!((e_micro - e_eff).abs() < 1e-10 * e_eff.abs().max(1.0), "{e_micro} vs {e_eff}");

    // 𝕍 Ψ₀ lives entirely in the one-hole sector.
    let free = micro(0.0, &w, 2, 8, 2);
    let hv = h.apply_state(&psi);
    let h0v = free.apply_state(&psi);
    let v = FockState { block: psi.block, amps: hv.amps.iter().zip(&h0v.amps).map(|(a, b)| a - b).collect() };
    let p1 = project_holes(&h.basis, &v, 1);
    assert!(v.norm() > 0.1);
    assert!(v.distance(&p1) < 1e-13 * v.norm());
    let sw = sector_weights(&h.basis, &v);
    assert!((sw.iter().sum::<f64>() - v.norm().powi(2)).abs() < 1e-12);
}

#[test]
fn hermitian_on_random_pairs() {
    let h = micro(1.3, &bump(), 2, 8, 1);
    let n = h.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let x: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let y: Vec<C64> = (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let (mut hx, mut hy) = (vec![C64::default(); n], vec![C64::default(); n]);
        h.apply(&x, &mut hx);
        h.apply(&y, &mut hy);
        let a: C64 = y.iter().zip(&hx).map(|(u, v)| u.conj() * v).sum();
        let b: C64 = x.iter().zip(&hy).map(|(u, v)| u.conj() * v).sum();
        worst = worst.max((a - b.conj()).norm() / a.norm());
    }
    assert!(worst < 1e-10, "{worst:e}");
}

#[test]
fn evolution_conserves_norm_and_energy() {
    let h = micro(1.3, &bump(), 2, 8, 0);
    let xi = random_block_xi(*h.basis.grid(), 0, 9);
    let psi0 = fermi_sea_state(&h.basis, &xi).unwrap();
    let (psi, stats) = evolve_full(&h, &psi0, 1.0, &KrylovOptions::default()).unwrap();
    assert!((psi.norm() - 1.0).abs() < 1e-9);
    assert!((stats.energy_end - stats.energy_start).abs() < 1e-8 * stats.energy_start.abs().max(1.0));
    let (same, _) = evolve_full(&h, &psi0, 0.0, &KrylovOptions::default()).unwrap();
    assert_eq!(same, psi0);
    assert!(sector_weights(&h.basis, &psi)[1] > 1e-4, "the coupling excites pairs");
}

fn problem<'a>(spec: &'a PotentialSpec, w: &'a ImpurityPotential, lambda: f64) -> FockProblem<'a> {
    FockProblem {
        k_f: 2.0,
        cutoff: 5.0,
        m_max: 3,
        lambda,
        spec,
        w,
        pair_weight: 2.0,
        krylov: KrylovOptions::default(),
        basis_cap: DEFAULT_BASIS_CAP,
        transition_cap: DEFAULT_TRANSITION_CAP,
    }
}

#[test]
fn decoupled_dynamics_factorize() {
    let spec = PotentialSpec::yukawa(1.0).unwrap();
    let w = bump();
    let grid = ImpurityGrid::new(2, 1, L, 8).unwrap();
    let xi0 = ImpurityState::relative_gaussian(grid, [1.0, 0.0, 0.0], 0.6).unwrap();
    let reports = theorem1_deficit(&problem(&spec, &w, 0.0), &xi0, &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(reports[0].deficit, 0.0);
    for r in &reports {
        assert!(r.deficit < 1e-8, "t = {}: {:e}", r.t, r.deficit);
        assert!((r.norm - 1.0).abs() < 1e-9);
        assert_eq!(r.dropped_weight, 0.0);
    }
}

#[test]
fn coupled_deficit_starts_at_zero_and_grows() {
    let spec = PotentialSpec::yukawa(1.0).unwrap();
    let grid = ImpurityGrid::new(1, 1, L, 8).unwrap();
    let xi0 = ImpurityState::plane_wave(grid, &[1]).unwrap();
    let reports =
        theorem1_deficit(&problem(&spec, &ImpurityPotential::Zero, 2.0f64.sqrt()), &xi0, &[0.0, 0.05, 0.2]).unwrap();
    assert_eq!(reports[0].deficit, 0.0);
    assert!(reports[1].deficit > 0.0 && reports[2].deficit > reports[1].deficit);
    assert!(reports.iter().all(|r| r.energy_drift < 1e-8 && (r.norm - 1.0).abs() < 1e-9));
}
