//! Circuit generation for Trotterized Hubbard dynamics on the double-snake
//! qubit chain.
//!
//! The up sector occupies qubits `0..L` and the down sector `L..2L`, both in
//! snake order. Hopping terms are scheduled by a swap network that keeps every
//! gate on chain-adjacent qubits, so no Jordan-Wigner strings ever appear
//! explicitly. Each Trotter step runs the hop schedule forward at half the
//! step duration, applies the on-site interaction, and runs the schedule in
//! reverse; neighbouring steps share their boundary hop layer.
//!
//! Two views of the same circuit are produced: a qubit-level [`CircuitIR`]
//! for state-vector simulation, compilation and export, and a mode-level
//! [`FermiCircuit`] for the free-fermion and Heisenberg-picture engines.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Flux;

mod builder;
mod gates;
mod native;
mod schedule;
mod twirl;

pub use builder::{build_fermi_circuit, build_singlet_prep, build_trotter_circuit};
pub use gates::{
    cz_matrix, fsim_matrix, fswap_matrix, hop_fswap_matrix, pauli, phased_xz_from_unitary,
    phased_xz_matrix, rz_pair_matrix,
};
pub use native::{decompose_to_native, gate_stats, GateStats};
pub use twirl::{twirl, TwirlRecord};

#[derive(Debug, Error, PartialEq)]
pub enum CircuitError {
    #[error("trotter plan has no steps")]
    EmptyPlan,
    #[error("trotter step {0} has non-positive duration {1}")]
    NonPositiveDuration(usize, f64),
    #[error("initial state describes {state} sites but the lattice has {lattice}")]
    StateMismatch { state: usize, lattice: usize },
    #[error("time {0} exceeds the supported schedule range")]
    TimeOutOfRange(f64),
    #[error(
        "singlet pair ({0}, {1}) cannot be made adjacent without crossing an entangled pair"
    )]
    SingletRouting(usize, usize),
    #[error("circuit json: {0}")]
    Json(String),
}

/// Trotter step durations plus the merge policy at interior step boundaries.
///
/// When `merge_junctions[j]` is set, the reversed hop schedule of step `j`
/// and the forward schedule of step `j + 1` share their common boundary
/// layer, which then runs at the mean of the two half-durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrotterPlan {
    pub durations: Vec<f64>,
    pub merge_junctions: Vec<bool>,
}

impl TrotterPlan {
    pub fn uniform(n_steps: usize, total_time: f64) -> Self {
        let dt = if n_steps == 0 { 0.0 } else { total_time / n_steps as f64 };
        TrotterPlan {
            durations: vec![dt; n_steps],
            merge_junctions: vec![true; n_steps.saturating_sub(1)],
        }
    }

    /// Step count schedule used by the experiments: one step up to `t = 0.1`,
    /// two up to `t = 0.2`, three beyond that, never exceeding a step
    /// duration of 0.4.
    pub fn for_time(t: f64) -> Result<Self, CircuitError> {
        const EPS: f64 = 1e-9;
        if !(t > 0.0) {
            return Err(CircuitError::TimeOutOfRange(t));
        }
        let n = if t <= 0.1 + EPS {
            1
        } else if t <= 0.2 + EPS {
            2
        } else if t <= 1.2 + EPS {
            3
        } else {
            return Err(CircuitError::TimeOutOfRange(t));
        };
        Ok(TrotterPlan::uniform(n, t))
    }

    pub fn validate(&self) -> Result<(), CircuitError> {
        if self.durations.is_empty() {
            return Err(CircuitError::EmptyPlan);
        }
        for (j, &dt) in self.durations.iter().enumerate() {
            if !(dt > 0.0) {
                return Err(CircuitError::NonPositiveDuration(j, dt));
            }
        }
        Ok(())
    }

    pub fn total_time(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn n_steps(&self) -> usize {
        self.durations.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    CZ,
    PhasedXZ,
    Fsim,
    FSWAP,
    HopFswapMerged,
    RzPair,
    Measure,
}

/// One gate instance. Parameter meaning by kind:
/// `PhasedXZ(x, z, a)` exponents in half turns, `Fsim(theta)`,
/// `HopFswapMerged(theta)` with theta the hop angle before the swap,
/// `RzPair(theta_a, theta_b)` independent Z rotations. CZ, FSWAP and Measure
/// take no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOp {
    pub kind: GateKind,
    pub qubits: Vec<usize>,
    pub params: Vec<f64>,
}

impl GateOp {
    pub fn cz(a: usize, b: usize) -> Self {
        GateOp { kind: GateKind::CZ, qubits: vec![a, b], params: vec![] }
    }

    pub fn phased_xz(q: usize, x: f64, z: f64, a: f64) -> Self {
        GateOp { kind: GateKind::PhasedXZ, qubits: vec![q], params: vec![x, z, a] }
    }

    pub fn fsim(a: usize, b: usize, theta: f64) -> Self {
        GateOp { kind: GateKind::Fsim, qubits: vec![a, b], params: vec![theta] }
    }

    pub fn fswap(a: usize, b: usize) -> Self {
        GateOp { kind: GateKind::FSWAP, qubits: vec![a, b], params: vec![] }
    }

    pub fn hop_fswap(a: usize, b: usize, theta: f64) -> Self {
        GateOp { kind: GateKind::HopFswapMerged, qubits: vec![a, b], params: vec![theta] }
    }

    pub fn rz_pair(a: usize, b: usize, theta_a: f64, theta_b: f64) -> Self {
        GateOp { kind: GateKind::RzPair, qubits: vec![a, b], params: vec![theta_a, theta_b] }
    }

    pub fn measure(qubits: Vec<usize>) -> Self {
        GateOp { kind: GateKind::Measure, qubits, params: vec![] }
    }

    /// Dense unitary of this gate on its own qubits. Panics on `Measure`.
    pub fn unitary(&self) -> nalgebra::DMatrix<crate::C64> {
        match self.kind {
            GateKind::CZ => gates::cz_matrix(),
            GateKind::PhasedXZ => {
                gates::phased_xz_matrix(self.params[0], self.params[1], self.params[2])
            }
            GateKind::Fsim => gates::fsim_matrix(self.params[0]),
            GateKind::FSWAP => gates::fswap_matrix(),
            GateKind::HopFswapMerged => gates::hop_fswap_matrix(self.params[0]),
            GateKind::RzPair => gates::rz_pair_matrix(self.params[0], self.params[1]),
            GateKind::Measure => panic!("measurement has no unitary"),
        }
    }

    /// Whether the gate exchanges the fermionic modes sitting on its qubits.
    pub fn swaps_modes(&self) -> bool {
        matches!(self.kind, GateKind::FSWAP | GateKind::HopFswapMerged)
    }
}

/// A set of gates with pairwise disjoint supports, plus the qubit-to-mode
/// assignment in force after the layer has executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub gates: Vec<GateOp>,
    pub mode_map: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitMeta {
    pub lx: usize,
    pub ly: usize,
    pub u: f64,
    pub flux: Flux,
    pub total_time: f64,
    pub n_steps: usize,
}

/// Qubit-level circuit. Layers execute in order; qubit `q < L` is chain
/// position `q` of the up sector and `q >= L` position `q - L` of the down
/// sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitIR {
    pub n_qubits: usize,
    pub layers: Vec<Layer>,
    pub meta: CircuitMeta,
}

impl CircuitIR {
    pub fn iter_gates(&self) -> impl Iterator<Item = &GateOp> {
        self.layers.iter().flat_map(|l| l.gates.iter())
    }

    /// The identity assignment: qubit `q` holds mode `q`.
    pub fn home_mode_map(&self) -> Vec<usize> {
        (0..self.n_qubits).collect()
    }

    pub fn final_mode_map(&self) -> Vec<usize> {
        self.layers
            .last()
            .map(|l| l.mode_map.clone())
            .unwrap_or_else(|| self.home_mode_map())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("circuit serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, CircuitError> {
        serde_json::from_str(s).map_err(|e| CircuitError::Json(e.to_string()))
    }

    /// Checks the structural invariants: disjoint supports within each
    /// layer, qubit indices in range, and mode maps that are permutations.
    /// While the circuit still carries mode-swapping gate kinds the maps are
    /// also re-derived from them; in lowered form the swaps are spread over
    /// CZ pairs and the recorded maps are authoritative.
    pub fn check_invariants(&self) -> Result<(), String> {
        let derivable = self.iter_gates().any(|g| g.swaps_modes())
            || self.iter_gates().all(|g| !matches!(g.kind, GateKind::CZ));
        let mut map: Vec<usize> = (0..self.n_qubits).collect();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut seen = vec![false; self.n_qubits];
            for g in &layer.gates {
                for &q in &g.qubits {
                    if q >= self.n_qubits {
                        return Err(format!("layer {li}: qubit {q} out of range"));
                    }
                    if seen[q] {
                        return Err(format!("layer {li}: qubit {q} used twice"));
                    }
                    seen[q] = true;
                }
                if g.swaps_modes() {
                    map.swap(g.qubits[0], g.qubits[1]);
                }
            }
            if layer.mode_map.len() != self.n_qubits {
                return Err(format!("layer {li}: mode map has wrong length"));
            }
            let mut hit = vec![false; self.n_qubits];
            for &m in &layer.mode_map {
                if m >= self.n_qubits || hit[m] {
                    return Err(format!("layer {li}: mode map is not a permutation"));
                }
                hit[m] = true;
            }
            if derivable && layer.mode_map != map {
                return Err(format!("layer {li}: mode map out of sync"));
            }
        }
        Ok(())
    }
}

/// Mode-level gate on global mode labels: up modes `0..L`, down modes
/// `L..2L`, both snake-ordered. `theta` is the applied coupling angle (flux
/// sign included) and `dt` the Trotter duration the gate implements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FermiGate {
    Hop { a: usize, b: usize, theta: f64, dt: f64 },
    Swap { a: usize, b: usize },
    HopSwap { a: usize, b: usize, theta: f64, dt: f64 },
    /// `exp(-i phi n_up n_down)` on one lattice site.
    Onsite { site: usize, phi: f64 },
}

impl FermiGate {
    /// Mode labels the gate touches, lowest first.
    pub fn modes(&self, n_sites: usize) -> Vec<usize> {
        match *self {
            FermiGate::Hop { a, b, .. }
            | FermiGate::Swap { a, b }
            | FermiGate::HopSwap { a, b, .. } => vec![a.min(b), a.max(b)],
            FermiGate::Onsite { site, .. } => vec![site, site + n_sites],
        }
    }
}

/// Mode-level view of the evolution part of a circuit (no state preparation
/// or measurement). Gate order matches the qubit-level circuit exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FermiCircuit {
    pub n_sites: usize,
    pub gates: Vec<FermiGate>,
    pub meta: CircuitMeta,
}

impl FermiCircuit {
    pub fn n_modes(&self) -> usize {
        2 * self.n_sites
    }
}
