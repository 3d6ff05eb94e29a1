//! IID quantum sources, n-block states, ε-typical subspace projectors and
//! equipartition-mass curves.
//!
//! Two evaluation routes coexist. The matrix path materializes ρ^{⊗n},
//! diagonalizes it and classifies eigenvalues into the typicality window —
//! honest, but capped by the dimension guard. The spectral path never
//! builds a matrix: the n-block spectrum of a product source is the
//! multiset of products of base eigenvalues with multinomial
//! multiplicities, so typicality masses are sums over type classes,
//! feasible to n in the thousands. Within the guard the two paths see the
//! same eigenvalue multiset and must agree.

use serde::Serialize;

use crate::layout::{Subsystem, SystemLayout};
use crate::tensor::{DensityOperator, NormFlag, Operator};
use crate::{tol, Error, Result};

/// A memoryless source emitting copies of `base`.
#[derive(Debug, Clone)]
pub struct IIDSource {
    base: DensityOperator,
    entropy: f64,
}

impl IIDSource {
    pub fn new(base: DensityOperator) -> Result<Self> {
        if base.norm_flag() != NormFlag::Normalized {
            return Err(Error::SubnormalizedInput);
        }
        let entropy = base.von_neumann_entropy();
        Ok(IIDSource { base, entropy })
    }

    pub fn base(&self) -> &DensityOperator {
        &self.base
    }

    /// S(Σ) in bits, cached at construction.
    pub fn entropy(&self) -> f64 {
        self.entropy
    }

    /// ρ^{⊗n}, with per-copy relabeled factors. Errors if the total
    /// dimension exceeds the guard — use the spectral path beyond that.
    pub fn block_state(&self, n: usize) -> Result<DensityOperator> {
        if n == 0 {
            return Err(Error::ParamOutOfRange {
                name: "n",
                value: 0.0,
            });
        }
        let mut subs = Vec::new();
        for copy in 0..n {
            for s in self.base.layout().subsystems() {
                subs.push(Subsystem::new(
                    format!("{}.{copy}", s.label),
                    s.dim,
                    s.role,
                ));
            }
        }
        let layout = SystemLayout::new(subs)?; // guard applies here
        let mut m = self.base.matrix().clone();
        for _ in 1..n {
            m = m.kronecker(self.base.matrix());
        }
        DensityOperator::new(m, layout, NormFlag::Normalized)
    }

    /// Base spectrum above the eigenvalue floor, descending.
    fn base_spectrum(&self) -> Result<Vec<f64>> {
        let s = self.base.eig_desc()?;
        Ok(s.eigenvalues
            .iter()
            .copied()
            .filter(|&l| l > tol::EIG)
            .collect())
    }
}

/// Typicality data for one (n, ε) point.
#[derive(Debug, Clone, Serialize)]
pub struct TypicalReport {
    pub n: usize,
    pub epsilon: f64,
    /// Closed window [2^{−n(S+ε)}, 2^{−n(S−ε)}] in log₂: (lo, hi).
    pub log2_window: (f64, f64),
    /// Count of n-block eigenvalues inside the window. Exact as a float for
    /// small n; for large n it is the rounded type-class sum.
    pub typical_dim: f64,
    pub log2_typical_dim: f64,
    /// Spectral weight tr(Λ ρ^{⊗n} Λ) inside the window.
    pub mass: f64,
}

/// Compositions of n into d nonnegative parts.
fn compositions(n: usize, d: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, d: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if d == 1 {
            prefix.push(n);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=n {
            prefix.push(k);
            rec(n - k, d - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, d, &mut Vec::new(), &mut out);
    out
}

#[allow(clippy::excessive_precision)] // published Lanczos g=7 coefficients
fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7; accurate to ~1e-13 for x ≥ 1
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEFFS[0];
    let t = x + 7.5;
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn log2_multinomial(n: usize, ks: &[usize]) -> f64 {
    let ln = ln_gamma(n as f64 + 1.0) - ks.iter().map(|&k| ln_gamma(k as f64 + 1.0)).sum::<f64>();
    ln / std::f64::consts::LN_2
}

/// Spectral-path typicality report: type-class enumeration of the n-block
/// spectrum, no matrix materialized.
pub fn spectral_typical_report(src: &IIDSource, n: usize, epsilon: f64) -> Result<TypicalReport> {
    if n == 0 {
        return Err(Error::ParamOutOfRange {
            name: "n",
            value: 0.0,
        });
    }
    if epsilon < 0.0 {
        return Err(Error::ParamOutOfRange {
            name: "epsilon",
            value: epsilon,
        });
    }
    let probs = src.base_spectrum()?;
    let s = src.entropy();
    let lo = -(n as f64) * (s + epsilon);
    let hi = -(n as f64) * (s - epsilon);
    // direct products below n=32 keep boundary classification identical to
    // the matrix path; log-space beyond that avoids underflow
    let direct = n <= 32;
    let mut mass = 0.0;
    let mut dim = 0.0f64;
    for ks in compositions(n, probs.len()) {
        let log2_lambda: f64 = ks
            .iter()
            .zip(&probs)
            .map(|(&k, &p)| k as f64 * p.log2())
            .sum();
        let log2_l = if direct {
            ks.iter()
                .zip(&probs)
                .map(|(&k, &p)| p.powi(k as i32))
                .product::<f64>()
                .log2()
        } else {
            log2_lambda
        };
        if lo <= log2_l && log2_l <= hi {
            let log2_mult = log2_multinomial(n, &ks);
            mass += (log2_mult + log2_lambda).exp2();
            dim += log2_mult.exp2();
        }
    }
    Ok(TypicalReport {
        n,
        epsilon,
        log2_window: (lo, hi),
        typical_dim: dim.round(),
        log2_typical_dim: if dim > 0.0 {
            dim.log2()
        } else {
            f64::NEG_INFINITY
        },
        mass,
    })
}

/// Matrix-path typical projector: diagonalize ρ^{⊗n}, keep eigenvectors
/// whose eigenvalue lies in the closed window, return the projector and the
/// report. Capped by the dimension guard.
pub fn typical_projector(
    src: &IIDSource,
    n: usize,
    epsilon: f64,
) -> Result<(Operator, TypicalReport)> {
    if epsilon < 0.0 {
        return Err(Error::ParamOutOfRange {
            name: "epsilon",
            value: epsilon,
        });
    }
    let block = src.block_state(n)?;
    let s = src.entropy();
    let lo = -(n as f64) * (s + epsilon);
    let hi = -(n as f64) * (s - epsilon);
    let lo_val = lo.exp2();
    let hi_val = hi.exp2();
    let spectrum = block.eig_desc()?;
    let d = block.layout().total_dim();
    let mut projector = nalgebra::DMatrix::<num_complex::Complex64>::zeros(d, d);
    let mut mass = 0.0;
    let mut count = 0usize;
    for (&l, v) in spectrum.eigenvalues.iter().zip(&spectrum.eigenvectors) {
        if lo_val <= l && l <= hi_val {
            projector += v.vector() * v.vector().adjoint();
            mass += l;
            count += 1;
        }
    }
    let report = TypicalReport {
        n,
        epsilon,
        log2_window: (lo, hi),
        typical_dim: count as f64,
        log2_typical_dim: if count > 0 {
            (count as f64).log2()
        } else {
            f64::NEG_INFINITY
        },
        mass,
    };
    let op = Operator::new(projector, block.layout().clone(), block.layout().clone())?;
    Ok((op, report))
}

/// Mass curve over a list of block lengths, spectral path.
pub fn qaep_mass_curve(
    src: &IIDSource,
    epsilon: f64,
    n_list: &[usize],
) -> Result<Vec<TypicalReport>> {
    n_list
        .iter()
        .map(|&n| spectral_typical_report(src, n, epsilon))
        .collect()
}

/// Smallest n ≤ `n_max` whose typical mass exceeds 1 − δ, scanning upward.
pub fn qaep_crossing(
    src: &IIDSource,
    epsilon: f64,
    delta: f64,
    n_max: usize,
) -> Result<Option<usize>> {
    for n in 1..=n_max {
        if spectral_typical_report(src, n, epsilon)?.mass > 1.0 - delta {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::Role;
    use crate::rng::{random_density, rng_for};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use num_complex::Complex64 as C64;

    fn qubit_source(p0: f64) -> IIDSource {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::new(p0, 0.0),
            C64::new(1.0 - p0, 0.0),
        ]));
        let rho = DensityOperator::new(
            m,
            SystemLayout::single("q", 2, Role::SenderLeg { party: 0, slot: 0 }).unwrap(),
            NormFlag::Normalized,
        )
        .unwrap();
        IIDSource::new(rho).unwrap()
    }

    #[test]
    fn block_state_base_and_diagonal_square() {
        let src = qubit_source(0.9);
        let b1 = src.block_state(1).unwrap();
        assert_eq!(b1.matrix(), src.base().matrix());
        let b2 = src.block_state(2).unwrap();
        let diag: Vec<f64> = (0..4).map(|i| b2.matrix()[(i, i)].re).collect();
        // diag(a,b) ⊗ diag(a,b) = diag(a², ab, ba, b²) with b = 1 − 0.9
        let b = 1.0 - 0.9;
        assert_eq!(diag, vec![0.9 * 0.9, 0.9 * b, b * 0.9, b * b]);
    }

    #[test]
    fn block_state_trace_is_one_for_random_base() {
        let mut rng = rng_for(80, 0, 0);
        let rho = random_density(
            &mut rng,
            SystemLayout::single("q", 2, Role::Reference).unwrap(),
            2,
        );
        let src = IIDSource::new(rho).unwrap();
        let b3 = src.block_state(3).unwrap();
        assert_abs_diff_eq!(b3.trace(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pure_base_has_full_mass_at_any_n() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![
            C64::new(1.0, 0.0),
            C64::new(0.0, 0.0),
        ]));
        let rho = DensityOperator::new(
            m,
            SystemLayout::single("q", 2, Role::Reference).unwrap(),
            NormFlag::Normalized,
        )
        .unwrap();
        let src = IIDSource::new(rho).unwrap();
        assert_abs_diff_eq!(src.entropy(), 0.0, epsilon = 1e-12);
        for n in [1usize, 5, 50, 500] {
            let r = spectral_typical_report(&src, n, 0.05).unwrap();
            assert_eq!(r.mass, 1.0); // single type class, λ = 1 exactly
            assert_eq!(r.typical_dim, 1.0);
        }
    }

    #[test]
    fn flat_base_has_full_mass_even_at_zero_epsilon() {
        let src = qubit_source(0.5);
        for n in [1usize, 4, 16, 200] {
            let r = spectral_typical_report(&src, n, 0.0).unwrap();
            assert_abs_diff_eq!(r.mass, 1.0, epsilon = 1e-9);
            // dimension counts come through lgamma sums at large n, so
            // compare in the log domain
            assert_abs_diff_eq!(r.log2_typical_dim, n as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn skewed_base_n4_eps01_has_empty_window() {
        // window [2^-2.276, 2^-1.476] ≈ [0.2065, 0.3595] misses every
        // product eigenvalue: 0.6561 above it, 0.0729 and smaller below
        let src = qubit_source(0.9);
        let r = spectral_typical_report(&src, 4, 0.1).unwrap();
        assert_eq!(r.mass, 0.0);
        assert_eq!(r.typical_dim, 0.0);
        let (_, mr) = typical_projector(&src, 4, 0.1).unwrap();
        assert_eq!(mr.mass, 0.0);
        assert_eq!(mr.typical_dim, 0.0);
    }

    #[test]
    fn matrix_and_spectral_paths_agree_within_the_guard() {
        let src = qubit_source(0.9);
        for n in [1usize, 2, 4, 7, 10] {
            for eps in [0.05, 0.15, 0.3] {
                let spectral = spectral_typical_report(&src, n, eps).unwrap();
                let (proj, matrix) = typical_projector(&src, n, eps).unwrap();
                assert_eq!(spectral.typical_dim, matrix.typical_dim, "n={n} eps={eps}");
                assert_abs_diff_eq!(spectral.mass, matrix.mass, epsilon = 1e-12);
                // projector is idempotent and carries the mass
                let p = proj.matrix();
                assert!(crate::tensor::max_abs_entry(&(p * p - p)) < 1e-10);
                let block = src.block_state(n).unwrap();
                let sandwiched = (p * block.matrix() * p).trace().re;
                assert_abs_diff_eq!(sandwiched, matrix.mass, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matrix_and_spectral_paths_agree_for_nondiagonal_base() {
        let mut rng = rng_for(81, 0, 0);
        let rho = random_density(
            &mut rng,
            SystemLayout::single("q", 2, Role::Reference).unwrap(),
            2,
        );
        let src = IIDSource::new(rho).unwrap();
        for n in [2usize, 5, 8] {
            let spectral = spectral_typical_report(&src, n, 0.12).unwrap();
            let (_, matrix) = typical_projector(&src, n, 0.12).unwrap();
            assert_eq!(spectral.typical_dim, matrix.typical_dim, "n={n}");
            assert_abs_diff_eq!(spectral.mass, matrix.mass, epsilon = 1e-12);
        }
    }

    #[test]
    fn mass_is_monotone_in_epsilon() {
        let src = qubit_source(0.8);
        for n in [3usize, 9, 27] {
            let mut prev = -1.0;
            for eps in [0.01, 0.05, 0.1, 0.2, 0.4] {
                let r = spectral_typical_report(&src, n, eps).unwrap();
                assert!(r.mass >= prev - 1e-12, "n={n} eps={eps}");
                prev = r.mass;
            }
        }
    }

    #[test]
    fn window_bounds_sandwich_the_mass() {
        let src = qubit_source(0.85);
        for n in [5usize, 20, 60] {
            let r = spectral_typical_report(&src, n, 0.1).unwrap();
            if r.typical_dim == 0.0 {
                continue;
            }
            let (lo, hi) = r.log2_window;
            let lower = r.log2_typical_dim + lo;
            let upper = r.log2_typical_dim + hi;
            assert!(r.mass.log2() >= lower - 1e-6, "n={n}");
            assert!(r.mass.log2() <= upper + 1e-6, "n={n}");
        }
    }

    #[test]
    fn qaep_crossing_regression() {
        // frozen from the binomial-enumeration oracle: diag(0.9, 0.1),
        // ε = 0.15, δ = 0.01 first exceeds 0.99 at n = 258
        let src = qubit_source(0.9);
        let crossing = qaep_crossing(&src, 0.15, 0.01, 400).unwrap();
        assert_eq!(crossing, Some(258));
        let at = spectral_typical_report(&src, 258, 0.15).unwrap();
        assert_abs_diff_eq!(at.mass, 0.990856061732, epsilon = 1e-9);
        let before = spectral_typical_report(&src, 257, 0.15).unwrap();
        assert!(before.mass <= 0.99);
    }

    #[test]
    fn product_of_qaep_sources_dominates_product_of_masses() {
        // joint typicality at split budgets ε/2 + ε/2 contains the product
        // of the marginal typical sets, so joint mass ≥ product of masses
        let a = qubit_source(0.9);
        let b = qubit_source(0.8);
        let joint = {
            let m = a.base().matrix().kronecker(b.base().matrix());
            let layout = SystemLayout::new(vec![
                Subsystem::new("x", 2, Role::Reference),
                Subsystem::new("y", 2, Role::Reference),
            ])
            .unwrap();
            IIDSource::new(DensityOperator::new(m, layout, NormFlag::Normalized).unwrap())
                .unwrap()
        };
        let eps = 0.2;
        for n in [4usize, 10, 25, 60] {
            let ma = spectral_typical_report(&a, n, eps / 2.0).unwrap().mass;
            let mb = spectral_typical_report(&b, n, eps / 2.0).unwrap().mass;
            let mj = spectral_typical_report(&joint, n, eps).unwrap().mass;
            assert!(
                mj >= ma * mb - 1e-9,
                "n={n}: joint {mj} < product {}",
                ma * mb
            );
        }
    }

    #[test]
    fn curve_runs_to_large_n() {
        let src = qubit_source(0.9);
        let reports = qaep_mass_curve(&src, 0.15, &[100, 1000, 5000]).unwrap();
        assert!(reports[0].mass < reports[1].mass);
        assert!(reports[2].mass > 0.999999);
    }

    #[test]
    fn guard_stops_the_matrix_path() {
        let src = qubit_source(0.9);
        assert!(matches!(
            src.block_state(13),
            Err(Error::DimensionGuard { .. })
        ));
    }
}
