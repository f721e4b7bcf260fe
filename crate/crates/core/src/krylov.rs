//! Lanczos approximation of `e^{-iHt} v` for a Hermitian operator given
//! only through its action.
//!
//! Each substep builds an orthonormal Krylov basis (with full
//! reorthogonalization), exponentiates the tridiagonal projection exactly and
//! accepts the substep when the a-posteriori residual estimate
//! `β_m |e_mᵀ e^{-iTτ} e₁| ‖v‖` is below the tolerance; otherwise the substep
//! is halved on the same basis.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub trait HermitianOperator {
    fn dim(&self) -> usize;
    /// `y = H x`; `y` is overwritten.
    fn apply(&self, x: &[C64], y: &mut [C64]);
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KrylovOptions {
    pub tol: f64,
    pub max_dim: usize,
    pub min_substep: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            tol: 1e-10,
            max_dim: 30,
            min_substep: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct KrylovStats {
    pub substeps: usize,
    pub applies: usize,
    pub max_residual: f64,
    pub min_substep: f64,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `Q diag(e^{-iθτ}) Qᵀ e₁` for the eigen-decomposed tridiagonal matrix.
fn exp_tridiag_e1(eig: &SymmetricEigen<f64, nalgebra::Dyn>, tau: f64) -> Vec<C64> {
    let m = eig.eigenvalues.len();
    let q = &eig.eigenvectors;
    let coeffs: Vec<C64> = (0..m)
        .map(|j| C64::from_polar(q[(0, j)], -eig.eigenvalues[j] * tau))
        .collect();
    (0..m)
        .map(|i| (0..m).map(|j| coeffs[j] * q[(i, j)]).sum())
        .collect()
}

/// One Krylov substep of at most `tau`; returns the step actually taken.
fn substep<O: HermitianOperator>(
    op: &O,
    v: &mut Vec<C64>,
    tau: f64,
    opts: &KrylovOptions,
    stats: &mut KrylovStats,
) -> Result<f64> {
    let n = op.dim();
    let beta0 = norm(v);
    if beta0 == 0.0 {
        return Ok(tau);
    }
    let mut basis: Vec<Vec<C64>> = Vec::with_capacity(opts.max_dim + 1);
    basis.push(v.iter().map(|x| x / beta0).collect());
    let mut alpha = Vec::with_capacity(opts.max_dim);
    let mut beta = Vec::with_capacity(opts.max_dim);
    let mut w = vec![C64::default(); n];
    let mut breakdown = false;
    let scale_guard;
    loop {
        let j = alpha.len();
        op.apply(&basis[j], &mut w);
        stats.applies += 1;
        let a = dot(&basis[j], &w).re;
        alpha.push(a);
        for (wi, bi) in w.iter_mut().zip(&basis[j]) {
            *wi -= bi * a;
        }
        if j > 0 {
            let b: f64 = beta[j - 1];
            for (wi, bi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= bi * b;
            }
        }
        // Full reorthogonalization (twice is enough).
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                for (wi, bi) in w.iter_mut().zip(b) {
                    *wi -= bi * c;
                }
            }
        }
        let b = norm(&w);
        beta.push(b);
        let spectral = alpha.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
        if b <= 1e-13 * spectral {
            breakdown = true;
            scale_guard = spectral;
            break;
        }
        if alpha.len() == opts.max_dim {
            scale_guard = spectral;
            break;
        }
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let _ = scale_guard;
    let m = alpha.len();
    let mut t = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alpha[i];
        if i + 1 < m {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut step = tau;
    loop {
        let y = exp_tridiag_e1(&eig, step);
        let residual = if breakdown {
            0.0
        } else {
            beta[m - 1] * y[m - 1].norm() * beta0
        };
        if residual <= opts.tol {
            stats.max_residual = stats.max_residual.max(residual);
            let mut out = vec![C64::default(); n];
            for (coef, b) in y.iter().zip(&basis) {
                for (o, bi) in out.iter_mut().zip(b) {
                    *o += bi * coef;
                }
            }
            for o in &mut out {
                *o *= beta0;
            }
            *v = out;
            stats.substeps += 1;
            stats.min_substep = if stats.min_substep == 0.0 {
                step
            } else {
                stats.min_substep.min(step)
            };
            return Ok(step);
        }
        if step * 0.5 < opts.min_substep {
            return Err(Error::PropagationStalled {
                residual,
                substep: step,
            });
        }
        step *= 0.5;
    }
}

/// `e^{-iHt} v`, calling `on_step(time, state)` after every accepted substep.
pub fn expm_multiply<O, F>(
    op: &O,
    v: &[C64],
    t: f64,
    opts: &KrylovOptions,
    mut on_step: F,
) -> Result<(Vec<C64>, KrylovStats)>
where
    O: HermitianOperator,
    F: FnMut(f64, &[C64]) -> Result<()>,
{
    if v.len() != op.dim() {
        return Err(Error::GridMismatch(format!(
            "vector of length {} for an operator of dimension {}",
            v.len(),
            op.dim()
        )));
    }
    if !(opts.tol > 0.0) || opts.max_dim < 2 {
        return Err(Error::InvalidParameter("Krylov tolerance must be positive and dimension ≥ 2".into()));
    }
    let mut stats = KrylovStats::default();
    let mut state = v.to_vec();
    let sign = t.signum();
    let mut remaining = t.abs();
    let mut elapsed = 0.0;
    let mut guess = remaining;
    while remaining > 0.0 {
        let tau = guess.min(remaining);
        let taken = substep(op, &mut state, sign * tau, opts, &mut stats)?.abs();
        elapsed += taken;
        remaining = (t.abs() - elapsed).max(0.0);
        if remaining < 1e-15 * t.abs() {
            remaining = 0.0;
        }
        // Grow cautiously after a full step, keep the accepted size otherwise.
        guess = if taken >= tau { taken * 1.5 } else { taken };
        on_step(sign * elapsed, &state)?;
    }
    Ok((state, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Dense(DMatrix<f64>);

    impl HermitianOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &[C64], y: &mut [C64]) {
            for i in 0..self.dim() {
                y[i] = (0..self.dim()).map(|j| x[j] * self.0[(i, j)]).sum();
            }
        }
    }

    #[test]
    fn matches_dense_exponential() {
        let n = 60;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.gen_range(-1.0..1.0);
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
            h[(i, i)] += (i as f64) * 0.5;
        }
        let v: Vec<C64> = (0..n)
            .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let nv = norm(&v);
        let v: Vec<C64> = v.iter().map(|x| x / nv).collect();
        let t = 0.8;
        let op = Dense(h.clone());
        let (out, stats) = expm_multiply(&op, &v, t, &KrylovOptions::default(), |_, _| Ok(())).unwrap();
        // Oracle: many tiny Taylor steps of the exponential series.
        let steps = 2000;
        let dt = t / steps as f64;
        let mut exact = v.clone();
        for _ in 0..steps {
            let mut term = exact.clone();
            let mut acc = exact.clone();
            for k in 1..20 {
                let mut y = vec![C64::default(); n];
                op.apply(&term, &mut y);
                term = y.iter().map(|x| x * C64::new(0.0, -dt / k as f64)).collect();
                for (a, b) in acc.iter_mut().zip(&term) {
                    *a += b;
                }
            }
            exact = acc;
        }
        let err: f64 = out.iter().zip(&exact).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        assert!(err < 1e-9, "err {err}, stats {stats:?}");
        assert!((norm(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_time_is_identity() {
        let op = Dense(DMatrix::identity(3, 3));
        let v = vec![C64::new(1.0, 0.0), C64::default(), C64::default()];
        let (out, _) = expm_multiply(&op, &v, 0.0, &KrylovOptions::default(), |_, _| Ok(())).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn stalls_when_substep_floor_is_hit() {
        let n = 40;
        let h = DMatrix::from_fn(n, n, |i, j| if i == j { 1e4 * i as f64 } else if i.abs_diff(j) == 1 { 1e3 } else { 0.0 });
        let v: Vec<C64> = (0..n).map(|i| C64::new(1.0 / (n as f64).sqrt(), i as f64 * 0.0)).collect();
        let opts = KrylovOptions {
            tol: 1e-14,
            max_dim: 3,
            min_substep: 0.01,
        };
        let r = expm_multiply(&Dense(h), &v, 1.0, &opts, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::PropagationStalled { .. })));
    }
}
