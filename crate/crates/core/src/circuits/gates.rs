//! Dense unitaries for the native and intermediate gate sets, plus the
//! parameter extraction used when runs of single-qubit gates are fused
//! into a single `PhasedXZ`.

use nalgebra::DMatrix;

use crate::C64;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity2() -> DMatrix<C64> {
    DMatrix::identity(2, 2)
}

/// Pauli matrix by index: 0 = I, 1 = X, 2 = Y, 3 = Z.
pub fn pauli(k: u8) -> DMatrix<C64> {
    match k {
        0 => identity2(),
        1 => DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)]),
        2 => DMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)]),
        3 => DMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)]),
        _ => panic!("pauli index {k} out of range"),
    }
}

pub fn cz_matrix() -> DMatrix<C64> {
    let mut m = DMatrix::identity(4, 4);
    m[(3, 3)] = c(-1., 0.);
    m
}

/// Number-conserving two-qubit block
/// `[[1,0,0,0],[0,cos θ,-i sin θ,0],[0,-i sin θ,cos θ,0],[0,0,0,1]]`,
/// i.e. `exp(-i θ (c†_a c_b + c†_b c_a))` on Jordan-Wigner adjacent modes.
pub fn fsim_matrix(theta: f64) -> DMatrix<C64> {
    let mut m = DMatrix::identity(4, 4);
    m[(1, 1)] = c(theta.cos(), 0.);
    m[(2, 2)] = c(theta.cos(), 0.);
    m[(1, 2)] = c(0., -theta.sin());
    m[(2, 1)] = c(0., -theta.sin());
    m
}

/// Fermionic swap: exchange the qubits and flip the sign of |11⟩.
pub fn fswap_matrix() -> DMatrix<C64> {
    let mut m = DMatrix::zeros(4, 4);
    m[(0, 0)] = c(1., 0.);
    m[(1, 2)] = c(1., 0.);
    m[(2, 1)] = c(1., 0.);
    m[(3, 3)] = c(-1., 0.);
    m
}

/// Hop merged with the fermionic swap that retires the pair:
/// `FSWAP · fsim(θ)` up to global phase. Equal to
/// `fsim(θ - π/2) · (Rz(3π/2) ⊗ Rz(3π/2))` times a phase, which is how the
/// native pass decomposes it.
pub fn hop_fswap_matrix(theta: f64) -> DMatrix<C64> {
    fswap_matrix() * fsim_matrix(theta)
}

pub fn rz_matrix(theta: f64) -> DMatrix<C64> {
    let mut m = DMatrix::zeros(2, 2);
    m[(0, 0)] = (-C64::i() * theta / 2.0).exp();
    m[(1, 1)] = (C64::i() * theta / 2.0).exp();
    m
}

/// Independent Z rotations on the two qubits of a pair, one angle each.
pub fn rz_pair_matrix(theta_a: f64, theta_b: f64) -> DMatrix<C64> {
    crate::linalg::kron(&rz_matrix(theta_a), &rz_matrix(theta_b))
}

/// `PhasedXZ(x, z, a)` with exponents in half turns, defined as
/// `Z^(z+a) X^x Z^(-a)`.
pub fn phased_xz_matrix(x: f64, z: f64, a: f64) -> DMatrix<C64> {
    use std::f64::consts::PI;
    let co = (PI * x / 2.0).cos();
    let s = (PI * x / 2.0).sin();
    let g = (C64::i() * PI * x / 2.0).exp();
    let mut m = DMatrix::zeros(2, 2);
    m[(0, 0)] = g * co;
    m[(0, 1)] = g * c(0., -s) * (-C64::i() * PI * a).exp();
    m[(1, 0)] = g * c(0., -s) * (C64::i() * PI * (z + a)).exp();
    m[(1, 1)] = g * co * (C64::i() * PI * z).exp();
    m
}

fn wrap_half_turns(t: f64) -> f64 {
    let mut t = t % 2.0;
    if t <= -1.0 {
        t += 2.0;
    } else if t > 1.0 {
        t -= 2.0;
    }
    // Avoid the signed zero produced by wrapping exactly ±2.
    if t == 0.0 {
        0.0
    } else {
        t
    }
}

/// Recover `(x, z, a)` such that `phased_xz_matrix(x, z, a)` equals `u` up to
/// global phase. `x` lands in [0, 1]; `z` and `a` in (-1, 1].
pub fn phased_xz_from_unitary(u: &DMatrix<C64>) -> (f64, f64, f64) {
    use std::f64::consts::PI;
    assert_eq!((u.nrows(), u.ncols()), (2, 2));
    let co = u[(0, 0)].norm();
    let s = u[(0, 1)].norm();
    let norm = (co * co + s * s).sqrt();
    let (co, s) = (co / norm, s / norm);
    let x = 2.0 * s.atan2(co) / PI;
    if s < 1e-12 {
        // Diagonal: the axis phase is unobservable, keep a = 0.
        let z = (u[(1, 1)] / u[(0, 0)]).arg() / PI;
        return (x, wrap_half_turns(z), 0.0);
    }
    if co < 1e-12 {
        // Antidiagonal: only z + 2a is observable, keep z = 0.
        let a = (u[(1, 0)] / u[(0, 1)]).arg() / (2.0 * PI);
        return (x, 0.0, wrap_half_turns(a));
    }
    let g = u[(0, 0)] / c(co, 0.);
    let z = (u[(1, 1)] / (g * co)).arg() / PI;
    // u01 = g * (-i s) e^{-iπa}
    let a = -(u[(0, 1)] / (g * c(0., -s))).arg() / PI;
    (x, wrap_half_turns(z), wrap_half_turns(a))
}

pub fn rx_params(theta: f64) -> (f64, f64, f64) {
    (theta / std::f64::consts::PI, 0.0, 0.0)
}

pub fn ry_params(theta: f64) -> (f64, f64, f64) {
    (theta / std::f64::consts::PI, 0.0, 0.5)
}

pub fn rz_params(theta: f64) -> (f64, f64, f64) {
    (0.0, theta / std::f64::consts::PI, 0.0)
}

pub fn hadamard_params() -> (f64, f64, f64) {
    // H = Z X^(1/2) Z up to phase; extraction keeps it exact.
    let h = DMatrix::from_row_slice(
        2,
        2,
        &[
            c(1., 0.) / c(2f64.sqrt(), 0.),
            c(1., 0.) / c(2f64.sqrt(), 0.),
            c(1., 0.) / c(2f64.sqrt(), 0.),
            c(-1., 0.) / c(2f64.sqrt(), 0.),
        ],
    );
    phased_xz_from_unitary(&h)
}

/// Conjugate a two-qubit Pauli through CZ: returns `(pa', pb', sign)` with
/// `CZ (Pa ⊗ Pb) CZ = sign · (Pa' ⊗ Pb')`. Used by the twirling pass.
pub fn conjugate_pauli_by_cz(pa: u8, pb: u8) -> (u8, u8, f64) {
    let cz = cz_matrix();
    let target = &cz * crate::linalg::kron(&pauli(pa), &pauli(pb)) * &cz;
    for qa in 0..4u8 {
        for qb in 0..4u8 {
            let cand = crate::linalg::kron(&pauli(qa), &pauli(qb));
            for sign in [1.0f64, -1.0] {
                let diff: f64 = (&target - &cand * c(sign, 0.))
                    .iter()
                    .map(|v| v.norm_sqr())
                    .sum();
                if diff < 1e-18 {
                    return (qa, qb, sign);
                }
            }
        }
    }
    unreachable!("CZ conjugation of a Pauli pair is always a signed Pauli pair");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{kron, phase_aligned_distance, unitarity_defect};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn fswap_is_swap_times_cz() {
        let mut swap = DMatrix::zeros(4, 4);
        swap[(0, 0)] = c(1., 0.);
        swap[(1, 2)] = c(1., 0.);
        swap[(2, 1)] = c(1., 0.);
        swap[(3, 3)] = c(1., 0.);
        let prod = swap * cz_matrix();
        assert!((prod - fswap_matrix()).iter().all(|v| v.norm() < 1e-15));
    }

    #[test]
    fn fswap_from_fsim_and_rz() {
        // FSWAP = fsim(π/2) · (Rz(π/2) ⊗ Rz(π/2)) up to global phase.
        let built = fsim_matrix(FRAC_PI_2) * rz_pair_matrix(FRAC_PI_2, FRAC_PI_2);
        assert!(phase_aligned_distance(&built, &fswap_matrix()) < 1e-14);
    }

    #[test]
    fn merged_gate_from_fsim_and_rz() {
        for theta in [0.3, -0.7, 1.2] {
            let built =
                fsim_matrix(theta - FRAC_PI_2) * rz_pair_matrix(3.0 * FRAC_PI_2, 3.0 * FRAC_PI_2);
            assert!(phase_aligned_distance(&built, &hop_fswap_matrix(theta)) < 1e-13);
        }
    }

    #[test]
    fn fsim_cz_decomposition() {
        // fsim(θ) = [Rx(π/2)⊗Rx(π/2)] [Ry(π/2)⊗I] CZ [Rx(-θ)⊗Rx(θ)] CZ
        //           [Ry(-π/2)⊗I] [Rx(-π/2)⊗Rx(-π/2)], reading right to left.
        for theta in [0.0, 0.4, -1.1, FRAC_PI_2] {
            let rx = |t: f64| {
                let (x, z, a) = rx_params(t);
                phased_xz_matrix(x, z, a)
            };
            let ry = |t: f64| {
                let (x, z, a) = ry_params(t);
                phased_xz_matrix(x, z, a)
            };
            let built = kron(&rx(FRAC_PI_2), &rx(FRAC_PI_2))
                * kron(&ry(FRAC_PI_2), &identity2())
                * cz_matrix()
                * kron(&rx(-theta), &rx(theta))
                * cz_matrix()
                * kron(&ry(-FRAC_PI_2), &identity2())
                * kron(&rx(-FRAC_PI_2), &rx(-FRAC_PI_2));
            assert!(
                phase_aligned_distance(&built, &fsim_matrix(theta)) < 1e-13,
                "theta = {theta}"
            );
        }
    }

    #[test]
    fn onsite_block_matches_zz_phase() {
        // Ry(-π/2)_a CZ Rx(φ)_a CZ Ry(π/2)_a = exp(-i φ Z⊗Z / 2) up to phase,
        // which with the Rz pair gives exp(-i 2φ n⊗n).
        let phi = 0.37;
        let ry = |t: f64| {
            let (x, z, a) = ry_params(t);
            phased_xz_matrix(x, z, a)
        };
        let rx = |t: f64| {
            let (x, z, a) = rx_params(t);
            phased_xz_matrix(x, z, a)
        };
        let block = kron(&ry(-FRAC_PI_2), &identity2())
            * cz_matrix()
            * kron(&rx(phi), &identity2())
            * cz_matrix()
            * kron(&ry(FRAC_PI_2), &identity2())
            * rz_pair_matrix(-phi, -phi);
        let mut target = DMatrix::identity(4, 4);
        target[(3, 3)] = (-C64::i() * 2.0 * phi).exp();
        assert!(phase_aligned_distance(&block, &target) < 1e-13);
    }

    #[test]
    fn phased_xz_known_points() {
        let x = phased_xz_matrix(1.0, 0.0, 0.0);
        assert!(phase_aligned_distance(&x, &pauli(1)) < 1e-15);
        let z = phased_xz_matrix(0.0, 1.0, 0.0);
        assert!(phase_aligned_distance(&z, &pauli(3)) < 1e-15);
        let (hx, hz, ha) = hadamard_params();
        let h = phased_xz_matrix(hx, hz, ha);
        let mut target = DMatrix::zeros(2, 2);
        let r = 1.0 / 2f64.sqrt();
        target[(0, 0)] = c(r, 0.);
        target[(0, 1)] = c(r, 0.);
        target[(1, 0)] = c(r, 0.);
        target[(1, 1)] = c(-r, 0.);
        assert!(phase_aligned_distance(&h, &target) < 1e-14);
    }

    #[test]
    fn cz_pauli_conjugation_table() {
        assert_eq!(conjugate_pauli_by_cz(1, 0), (1, 3, 1.0));
        assert_eq!(conjugate_pauli_by_cz(0, 1), (3, 1, 1.0));
        assert_eq!(conjugate_pauli_by_cz(3, 0), (3, 0, 1.0));
        assert_eq!(conjugate_pauli_by_cz(3, 3), (3, 3, 1.0));
        let (qa, qb, s) = conjugate_pauli_by_cz(1, 1);
        assert_eq!((qa, qb), (2, 2));
        assert!((s - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn phased_xz_roundtrip(x in 0.0..1.0f64, z in -0.99..1.0f64, a in -0.99..1.0f64) {
            let u = phased_xz_matrix(x, z, a);
            prop_assert!(unitarity_defect(&u) < 1e-12);
            let (x2, z2, a2) = phased_xz_from_unitary(&u);
            let u2 = phased_xz_matrix(x2, z2, a2);
            prop_assert!(phase_aligned_distance(&u, &u2) < 1e-10);
        }

        #[test]
        fn fsim_composes_additively(a in -1.5..1.5f64, b in -1.5..1.5f64) {
            let prod = fsim_matrix(a) * fsim_matrix(b);
            prop_assert!(phase_aligned_distance(&prod, &fsim_matrix(a + b)) < 1e-12);
        }

        #[test]
        fn rotations_match_phased_xz(theta in -PI..PI) {
            let (x, z, a) = rz_params(theta);
            prop_assert!(phase_aligned_distance(&phased_xz_matrix(x, z, a), &rz_matrix(theta)) < 1e-12);
            let (x, z, a) = rx_params(theta);
            let rx = crate::linalg::expm_hermitian(&pauli(1), theta / 2.0);
            prop_assert!(phase_aligned_distance(&phased_xz_matrix(x, z, a), &rx) < 1e-10);
            let (x, z, a) = ry_params(theta);
            let ry = crate::linalg::expm_hermitian(&pauli(2), theta / 2.0);
            prop_assert!(phase_aligned_distance(&phased_xz_matrix(x, z, a), &ry) < 1e-10);
        }
    }
}
