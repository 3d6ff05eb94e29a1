//! Property tests for the tensor-core invariants: purification round trips,
//! the contraction/partial-trace identity, spectral determinism, and
//! bit-faithful JSON round trips on arbitrary finite doubles.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use proptest::prelude::*;

use qcomm::layout::{Role, Subsystem, SystemLayout};
use qcomm::tensor::{partial_inner_product, DensityOperator, NormFlag, Operator, PureState};

fn complex_entry() -> impl Strategy<Value = C64> {
    (prop::num::f64::NORMAL, prop::num::f64::NORMAL)
        .prop_map(|(re, im)| C64::new(re % 4.0, im % 4.0))
}

/// Random density operator of the given dimension: GG†/tr from arbitrary
/// finite entries.
fn density(dim: usize) -> impl Strategy<Value = DensityOperator> {
    prop::collection::vec(complex_entry(), dim * dim).prop_filter_map(
        "degenerate gram matrix",
        move |entries| {
            let g = DMatrix::from_vec(dim, dim, entries);
            let mut m = &g * g.adjoint();
            let tr = m.trace().re;
            if !tr.is_finite() || tr < 1e-6 {
                return None;
            }
            m /= C64::new(tr, 0.0);
            let layout = SystemLayout::single("s", dim, Role::Reference).unwrap();
            DensityOperator::new(m, layout, NormFlag::Normalized).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(160))]

    /// Tracing out the purifying factor of any purification recovers ρ.
    #[test]
    fn purification_round_trips(rho in (2usize..=4).prop_flat_map(density)) {
        let psi = rho.purify("env").unwrap();
        let back = psi.reduced(&["s"]).unwrap();
        let dev = (back.matrix() - rho.matrix()).norm();
        prop_assert!(dev < 1e-9, "frobenius deviation {dev}");
    }

    /// Contracting with a complete orthonormal basis on one factor equals
    /// the partial trace over that factor.
    #[test]
    fn basis_contraction_is_partial_trace(
        rho_a in density(2),
        rho_b in density(3),
    ) {
        let joint = {
            let m = rho_a.matrix().kronecker(rho_b.matrix());
            let layout = SystemLayout::new(vec![
                Subsystem::new("a", 2, Role::Reference),
                Subsystem::new("b", 3, Role::Reference),
            ]).unwrap();
            DensityOperator::new(m, layout, NormFlag::Normalized).unwrap()
        };
        let op = Operator::new(
            joint.matrix().clone(),
            joint.layout().clone(),
            joint.layout().clone(),
        ).unwrap();
        let mut acc = DMatrix::<C64>::zeros(2, 2);
        for k in 0..3 {
            let mut e = DVector::<C64>::zeros(3);
            e[k] = C64::new(1.0, 0.0);
            let piece = partial_inner_product(&op, &[("b", e.clone())], &[("b", e)]).unwrap();
            acc += piece.matrix();
        }
        let traced = joint.partial_trace(&["b"]).unwrap();
        let dev = (&acc - traced.matrix()).norm();
        prop_assert!(dev < 1e-10, "deviation {dev}");
    }

    /// Spectral decomposition is deterministic: two calls on the same
    /// operator return bitwise-identical spectra.
    #[test]
    fn eig_desc_is_bitwise_deterministic(rho in (2usize..=4).prop_flat_map(density)) {
        let s1 = rho.eig_desc().unwrap();
        let s2 = rho.eig_desc().unwrap();
        prop_assert_eq!(&s1.eigenvalues, &s2.eigenvalues);
        for (a, b) in s1.eigenvectors.iter().zip(&s2.eigenvectors) {
            prop_assert_eq!(a.vector().as_slice(), b.vector().as_slice());
        }
        // descending up to the deliberate reordering inside degenerate
        // blocks (ties broken by largest-component index, not by value)
        for w in s1.eigenvalues.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-10);
        }
    }

    /// JSON round trips are bit-faithful for finite doubles.
    #[test]
    fn density_json_round_trip_is_bit_faithful(rho in (2usize..=4).prop_flat_map(density)) {
        let json = serde_json::to_string(&rho).unwrap();
        let back: DensityOperator = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(rho.matrix(), back.matrix());
    }

    /// Pure-state JSON round trips are bit-faithful too.
    #[test]
    fn pure_state_json_round_trip(entries in prop::collection::vec(complex_entry(), 4)) {
        let v = DVector::from_vec(entries);
        prop_assume!(v.norm() > 1e-6);
        let layout = SystemLayout::new(vec![
            Subsystem::new("a", 2, Role::Reference),
            Subsystem::new("b", 2, Role::Reference),
        ]).unwrap();
        let psi = PureState::normalized(v, layout).unwrap();
        let json = serde_json::to_string(&psi).unwrap();
        let back: PureState = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(psi.vector(), back.vector());
    }
}
