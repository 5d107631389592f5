//! Pauli twirling of the CZ layers plus randomized readout flips.
//!
//! Each CZ is conjugated by a uniformly random Pauli pair: the pair `P` goes
//! in front, and `CZ P CZ` (again a Pauli pair, up to a sign that only moves
//! the global phase) goes behind, leaving the circuit's action unchanged
//! while randomizing how coherent errors on the CZ compose. Readout is
//! randomized by a uniform X mask ahead of the measurement; recorded shots
//! must be XORed with the mask before use.

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::native::repack;
use super::{decompose_to_native, gates, CircuitIR, GateKind, GateOp};

/// What a twirled circuit needs to be interpreted: the Pauli pair drawn for
/// each CZ (enumerated in packed layer order) and the readout flip mask.
/// Pauli indices follow 0 = I, 1 = X, 2 = Y, 3 = Z.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwirlRecord {
    pub seed: u64,
    pub cz_paulis: Vec<(u8, u8)>,
    pub mask: Vec<bool>,
}

fn pauli_params(p: u8) -> Option<(f64, f64, f64)> {
    match p {
        0 => None,
        1 => Some((1.0, 0.0, 0.0)),
        2 => Some((1.0, 1.0, 0.0)),
        3 => Some((0.0, 1.0, 0.0)),
        _ => panic!("pauli index {p} out of range"),
    }
}

fn push_pauli(stream: &mut Vec<GateOp>, q: usize, p: u8) {
    if let Some((x, z, a)) = pauli_params(p) {
        stream.push(GateOp::phased_xz(q, x, z, a));
    }
}

/// Twirl the native form of `ir` with the given seed. The returned circuit
/// equals the original up to the readout mask and a global phase.
pub fn twirl(ir: &CircuitIR, seed: u64) -> (CircuitIR, TwirlRecord) {
    let native = decompose_to_native(ir);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cz_paulis = Vec::new();
    let mut stream: Vec<GateOp> = Vec::new();
    let mut measures: Vec<GateOp> = Vec::new();
    for layer in &native.layers {
        for g in &layer.gates {
            match g.kind {
                GateKind::Measure => measures.push(g.clone()),
                GateKind::CZ => {
                    let (pa, pb) = (rng.gen_range(0..4u8), rng.gen_range(0..4u8));
                    let (qa, qb, _sign) = gates::conjugate_pauli_by_cz(pa, pb);
                    cz_paulis.push((pa, pb));
                    push_pauli(&mut stream, g.qubits[0], pa);
                    push_pauli(&mut stream, g.qubits[1], pb);
                    stream.push(g.clone());
                    push_pauli(&mut stream, g.qubits[0], qa);
                    push_pauli(&mut stream, g.qubits[1], qb);
                }
                _ => stream.push(g.clone()),
            }
        }
    }
    let mask: Vec<bool> = (0..native.n_qubits).map(|_| rng.gen_bool(0.5)).collect();
    for (q, &flip) in mask.iter().enumerate() {
        if flip {
            push_pauli(&mut stream, q, 1);
        }
    }
    stream.extend(measures);
    let mut twirled = repack(native.n_qubits, stream.into_iter(), native.meta);
    patch_mode_maps(&mut twirled, &native);
    (twirled, TwirlRecord { seed, cz_paulis, mask })
}

/// The repacked stream contains no mode-swapping gate kinds, so carry the
/// mode maps over from the untwirled native circuit, CZ layer by CZ layer.
fn patch_mode_maps(twirled: &mut CircuitIR, native: &CircuitIR) {
    let cz_maps: Vec<&Vec<usize>> = native
        .layers
        .iter()
        .filter(|l| l.gates.iter().any(|g| g.kind == GateKind::CZ))
        .map(|l| &l.mode_map)
        .collect();
    let final_map = native.final_mode_map();
    let mut cur: Vec<usize> = (0..twirled.n_qubits).collect();
    let mut ci = 0;
    for layer in &mut twirled.layers {
        if layer.gates.iter().any(|g| g.kind == GateKind::CZ) {
            cur = cz_maps[ci].clone();
            ci += 1;
        } else if ci == cz_maps.len() {
            cur = final_map.clone();
        }
        layer.mode_map = cur.clone();
    }
    assert_eq!(ci, cz_maps.len(), "twirling must preserve the CZ layer structure");
}
