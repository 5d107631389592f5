//! Lowering to the native gate set (CZ plus PhasedXZ) with greedy
//! as-soon-as-possible packing of the CZ layers.
//!
//! Runs of single-qubit gates are fused into one `PhasedXZ` and dropped when
//! the product is the identity up to phase. `Fsim(0)` disappears entirely.

use nalgebra::DMatrix;

use crate::linalg::phase_aligned_distance;
use crate::C64;

use super::gates;
use super::{CircuitIR, GateKind, GateOp, Layer};

use std::f64::consts::{FRAC_PI_2, PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateStats {
    pub two_qubit_gates: usize,
    /// Packed CZ layer count.
    pub cz_layers: usize,
    /// Alternating-layer depth: one single-qubit layer ahead of each CZ
    /// layer plus the trailing measurement-basis layer, so
    /// `2 * cz_layers + 2` for any non-empty circuit.
    pub depth: usize,
    pub n_qubits: usize,
}

struct Pass {
    n: usize,
    pending: Vec<DMatrix<C64>>,
    dirty: Vec<bool>,
    avail: Vec<usize>,
    cz_layers: Vec<Vec<GateOp>>,
    pre_1q: Vec<Vec<GateOp>>,
    /// Mode swaps keyed by the CZ layer after which they take effect.
    swap_events: Vec<(usize, usize, usize)>,
    measured: Option<Vec<usize>>,
}

impl Pass {
    fn new(n: usize) -> Self {
        Pass {
            n,
            pending: vec![DMatrix::identity(2, 2); n],
            dirty: vec![false; n],
            avail: vec![0; n],
            cz_layers: Vec::new(),
            pre_1q: Vec::new(),
            swap_events: Vec::new(),
            measured: None,
        }
    }

    fn fold(&mut self, q: usize, u: &DMatrix<C64>) {
        self.pending[q] = u * &self.pending[q];
        self.dirty[q] = true;
    }

    fn fold_params(&mut self, q: usize, p: (f64, f64, f64)) {
        self.fold(q, &gates::phased_xz_matrix(p.0, p.1, p.2));
    }

    fn flush(&mut self, q: usize, layer: usize) {
        if !self.dirty[q] {
            return;
        }
        let u = std::mem::replace(&mut self.pending[q], DMatrix::identity(2, 2));
        self.dirty[q] = false;
        if phase_aligned_distance(&u, &DMatrix::identity(2, 2)) < 1e-12 {
            return;
        }
        let (x, z, a) = gates::phased_xz_from_unitary(&u);
        self.pre_1q[layer].push(GateOp::phased_xz(q, x, z, a));
    }

    fn place_cz(&mut self, a: usize, b: usize) {
        let l = self.avail[a].max(self.avail[b]);
        while self.cz_layers.len() <= l {
            self.cz_layers.push(Vec::new());
            self.pre_1q.push(Vec::new());
        }
        self.flush(a, l);
        self.flush(b, l);
        self.cz_layers[l].push(GateOp::cz(a, b));
        self.avail[a] = l + 1;
        self.avail[b] = l + 1;
    }

    /// The two-CZ realization of `fsim`, fused with whatever single-qubit
    /// content is already pending.
    fn expand_fsim(&mut self, a: usize, b: usize, theta: f64) {
        self.fold_params(a, gates::rx_params(-FRAC_PI_2));
        self.fold_params(b, gates::rx_params(-FRAC_PI_2));
        self.fold_params(a, gates::ry_params(-FRAC_PI_2));
        self.place_cz(a, b);
        self.fold_params(a, gates::rx_params(-theta));
        self.fold_params(b, gates::rx_params(theta));
        self.place_cz(a, b);
        self.fold_params(a, gates::ry_params(FRAC_PI_2));
        self.fold_params(a, gates::rx_params(FRAC_PI_2));
        self.fold_params(b, gates::rx_params(FRAC_PI_2));
    }

    fn process(&mut self, g: &GateOp) {
        match g.kind {
            GateKind::PhasedXZ => {
                let u = gates::phased_xz_matrix(g.params[0], g.params[1], g.params[2]);
                self.fold(g.qubits[0], &u);
            }
            GateKind::RzPair => {
                self.fold_params(g.qubits[0], gates::rz_params(g.params[0]));
                self.fold_params(g.qubits[1], gates::rz_params(g.params[1]));
            }
            GateKind::CZ => self.place_cz(g.qubits[0], g.qubits[1]),
            GateKind::Fsim => {
                let theta = wrap_angle(g.params[0]);
                if theta.abs() > 1e-12 {
                    self.expand_fsim(g.qubits[0], g.qubits[1], theta);
                }
            }
            GateKind::FSWAP => {
                let (a, b) = (g.qubits[0], g.qubits[1]);
                self.fold_params(a, gates::rz_params(FRAC_PI_2));
                self.fold_params(b, gates::rz_params(FRAC_PI_2));
                self.expand_fsim(a, b, FRAC_PI_2);
                self.swap_events.push((self.avail[a].max(self.avail[b]) - 1, a, b));
            }
            GateKind::HopFswapMerged => {
                let (a, b) = (g.qubits[0], g.qubits[1]);
                self.fold_params(a, gates::rz_params(3.0 * FRAC_PI_2));
                self.fold_params(b, gates::rz_params(3.0 * FRAC_PI_2));
                let theta = wrap_angle(g.params[0] - FRAC_PI_2);
                if theta.abs() > 1e-12 {
                    self.expand_fsim(a, b, theta);
                    self.swap_events.push((self.avail[a].max(self.avail[b]) - 1, a, b));
                } else {
                    // Swap content degenerated away; the mode exchange still
                    // happens, ahead of anything not yet placed.
                    self.swap_events
                        .push((self.avail[a].max(self.avail[b]).max(1) - 1, a, b));
                }
            }
            GateKind::Measure => {
                let mut qs = self.measured.take().unwrap_or_default();
                qs.extend_from_slice(&g.qubits);
                self.measured = Some(qs);
            }
        }
    }

    fn finish(mut self, meta: super::CircuitMeta) -> CircuitIR {
        // Trailing single-qubit content forms the measurement-basis layer.
        let mut final_1q = Vec::new();
        for q in 0..self.n {
            if !self.dirty[q] {
                continue;
            }
            let u = std::mem::replace(&mut self.pending[q], DMatrix::identity(2, 2));
            if phase_aligned_distance(&u, &DMatrix::identity(2, 2)) < 1e-12 {
                continue;
            }
            let (x, z, a) = gates::phased_xz_from_unitary(&u);
            final_1q.push(GateOp::phased_xz(q, x, z, a));
        }
        let mut map: Vec<usize> = (0..self.n).collect();
        let mut events = self.swap_events;
        events.sort_by_key(|e| e.0);
        let mut next_event = 0;
        let mut layers = Vec::new();
        for (l, (czs, pre)) in
            self.cz_layers.into_iter().zip(self.pre_1q.into_iter()).enumerate()
        {
            if !pre.is_empty() {
                layers.push(Layer { gates: pre, mode_map: map.clone() });
            }
            while next_event < events.len() && events[next_event].0 <= l {
                map.swap(events[next_event].1, events[next_event].2);
                next_event += 1;
            }
            debug_assert!(!czs.is_empty(), "packing never leaves an empty CZ layer");
            layers.push(Layer { gates: czs, mode_map: map.clone() });
        }
        while next_event < events.len() {
            map.swap(events[next_event].1, events[next_event].2);
            next_event += 1;
        }
        if !final_1q.is_empty() {
            layers.push(Layer { gates: final_1q, mode_map: map.clone() });
        }
        if let Some(mut qs) = self.measured {
            qs.sort_unstable();
            qs.dedup();
            layers.push(Layer { gates: vec![GateOp::measure(qs)], mode_map: map.clone() });
        }
        CircuitIR { n_qubits: self.n, layers, meta }
    }
}

fn wrap_angle(t: f64) -> f64 {
    let mut t = t % (2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    } else if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Lower a circuit to CZ and PhasedXZ layers (plus the final measurement),
/// packing CZs greedily and fusing single-qubit runs.
pub fn decompose_to_native(ir: &CircuitIR) -> CircuitIR {
    repack(ir.n_qubits, ir.iter_gates().cloned(), ir.meta)
}

/// Run the lowering pass over a bare gate stream.
pub(crate) fn repack(
    n_qubits: usize,
    gates: impl Iterator<Item = GateOp>,
    meta: super::CircuitMeta,
) -> CircuitIR {
    let mut pass = Pass::new(n_qubits);
    for g in gates {
        pass.process(&g);
    }
    pass.finish(meta)
}

/// Two-qubit count, packed CZ layer count and alternating-layer depth of the
/// native form of `ir`. The circuit is always lowered first so the layer
/// count reflects greedy packing, not however the input happened to be
/// laid out.
pub fn gate_stats(ir: &CircuitIR) -> GateStats {
    let native = decompose_to_native(ir);
    let two_qubit_gates =
        native.iter_gates().filter(|g| g.kind == GateKind::CZ).count();
    let cz_layers = native
        .layers
        .iter()
        .filter(|l| l.gates.iter().any(|g| g.kind == GateKind::CZ))
        .count();
    let depth = if native.layers.iter().all(|l| l.gates.is_empty()) || native.layers.is_empty()
    {
        0
    } else {
        2 * cz_layers + 2
    };
    GateStats { two_qubit_gates, cz_layers, depth, n_qubits: ir.n_qubits }
}
