//! Assembly of Trotter-step circuits and their mode-level view.

use crate::model::{InitialStateSpec, ModelSpec, SitePattern};

use super::gates;
use super::schedule::{layout_overhead, swap_network_round, PosGate, PosKind};
use super::{
    CircuitError, CircuitIR, CircuitMeta, FermiCircuit, FermiGate, GateOp, Layer, TrotterPlan,
};

/// One scheduled layer with resolved durations, or an interaction block.
enum SemLayer {
    TwoQ(Vec<SemGate>),
    Onsite { dt: f64 },
}

#[derive(Clone, Copy)]
struct SemGate {
    p1: usize,
    p2: usize,
    kind: PosKind,
    edge: Option<(usize, usize)>,
    dt: f64,
}

fn sem(layer: &[PosGate], dt: f64) -> SemLayer {
    SemLayer::TwoQ(
        layer
            .iter()
            .map(|g| SemGate { p1: g.p1, p2: g.p2, kind: g.kind, edge: g.edge, dt })
            .collect(),
    )
}

/// Expands the plan into the full step stream. Each step runs the hop
/// schedule forward at half duration, the interaction at full duration, and
/// the schedule reversed; merged junctions fold the leading boundary layer
/// of a step into the trailing one of its predecessor, summing durations.
fn assemble_steps(model: &ModelSpec, plan: &TrotterPlan) -> Result<Vec<SemLayer>, CircuitError> {
    plan.validate()?;
    let round = swap_network_round(model.lattice.lx, model.lattice.ly);
    debug_assert!(round[0].iter().all(|g| g.kind == PosKind::Hop));
    let mut out: Vec<SemLayer> = Vec::new();
    for (j, &dt) in plan.durations.iter().enumerate() {
        let half = dt / 2.0;
        let merge_in = j > 0 && plan.merge_junctions.get(j - 1).copied().unwrap_or(false);
        for (li, layer) in round.iter().enumerate() {
            if li == 0 && merge_in {
                match out.last_mut() {
                    Some(SemLayer::TwoQ(gs)) => {
                        for g in gs.iter_mut() {
                            g.dt += half;
                        }
                    }
                    _ => unreachable!("merged junction must follow a boundary hop layer"),
                }
                continue;
            }
            out.push(sem(layer, half));
        }
        out.push(SemLayer::Onsite { dt });
        for layer in round.iter().rev() {
            out.push(sem(layer, half));
        }
    }
    Ok(out)
}

/// Coupling angle for a hop of duration `dt` on `edge`: the gate applies
/// `exp(-i theta (c†c + c†c))`, and the Hamiltonian term is
/// `-(e^{i phi} c†c + h.c.)` with `phi` either 0 or pi.
fn hop_theta(model: &ModelSpec, edge: (usize, usize), dt: f64) -> f64 {
    let phase = model.edge_phase(edge.0, edge.1).expect("scheduled edge is a lattice bond");
    if phase > 1.0 {
        dt
    } else {
        -dt
    }
}

/// Mode-level evolution circuit: hop schedule plus on-site phases, no state
/// preparation, no measurement, and no layout bookkeeping swaps.
pub fn build_fermi_circuit(
    model: &ModelSpec,
    plan: &TrotterPlan,
) -> Result<FermiCircuit, CircuitError> {
    let steps = assemble_steps(model, plan)?;
    let l = model.lattice.n_sites();
    let mut pos_mode: Vec<usize> = (0..l).collect();
    let mut gates = Vec::new();
    for layer in &steps {
        match layer {
            SemLayer::TwoQ(gs) => {
                for g in gs {
                    let (m1, m2) = (pos_mode[g.p1], pos_mode[g.p2]);
                    match g.kind {
                        PosKind::Hop => {
                            let theta = hop_theta(model, g.edge.unwrap(), g.dt);
                            gates.push(FermiGate::Hop { a: m1, b: m2, theta, dt: g.dt });
                            gates.push(FermiGate::Hop { a: l + m1, b: l + m2, theta, dt: g.dt });
                        }
                        PosKind::Swap => {
                            gates.push(FermiGate::Swap { a: m1, b: m2 });
                            gates.push(FermiGate::Swap { a: l + m1, b: l + m2 });
                            pos_mode.swap(g.p1, g.p2);
                        }
                        PosKind::MergedHopSwap => {
                            let theta = hop_theta(model, g.edge.unwrap(), g.dt);
                            gates.push(FermiGate::HopSwap { a: m1, b: m2, theta, dt: g.dt });
                            gates.push(FermiGate::HopSwap {
                                a: l + m1,
                                b: l + m2,
                                theta,
                                dt: g.dt,
                            });
                            pos_mode.swap(g.p1, g.p2);
                        }
                    }
                }
            }
            SemLayer::Onsite { dt } => {
                for site in 0..l {
                    gates.push(FermiGate::Onsite { site, phi: model.u * dt });
                }
            }
        }
    }
    debug_assert!(pos_mode.iter().enumerate().all(|(i, &m)| i == m));
    Ok(FermiCircuit {
        n_sites: l,
        gates,
        meta: CircuitMeta {
            lx: model.lattice.lx,
            ly: model.lattice.ly,
            u: model.u,
            flux: model.flux,
            total_time: plan.total_time(),
            n_steps: plan.n_steps(),
        },
    })
}

struct IrBuilder {
    n_qubits: usize,
    layers: Vec<Layer>,
    map: Vec<usize>,
}

impl IrBuilder {
    fn new(n_qubits: usize) -> Self {
        IrBuilder { n_qubits, layers: Vec::new(), map: (0..n_qubits).collect() }
    }

    fn push_layer(&mut self, gates: Vec<GateOp>) {
        for g in &gates {
            if g.swaps_modes() {
                self.map.swap(g.qubits[0], g.qubits[1]);
            }
        }
        self.layers.push(Layer { gates, mode_map: self.map.clone() });
    }

    /// Qubit currently holding each mode.
    fn mode_positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.n_qubits];
        for (q, &m) in self.map.iter().enumerate() {
            pos[m] = q;
        }
        pos
    }
}

fn x_params() -> (f64, f64, f64) {
    (1.0, 0.0, 0.0)
}

fn render_evolution(b: &mut IrBuilder, model: &ModelSpec, steps: &[SemLayer]) {
    let l = model.lattice.n_sites();
    let (bring, _) = layout_overhead(model.lattice.lx, model.lattice.ly);
    let bring_gates: Vec<GateOp> =
        (0..bring).map(|i| GateOp::fswap(l + 2 * i, l + 2 * i + 1)).collect();
    for layer in steps {
        match layer {
            SemLayer::TwoQ(gs) => {
                let mut gates = Vec::with_capacity(2 * gs.len());
                for g in gs {
                    for (a, bq) in [(g.p1, g.p2), (l + g.p1, l + g.p2)] {
                        gates.push(match g.kind {
                            PosKind::Hop => {
                                GateOp::fsim(a, bq, hop_theta(model, g.edge.unwrap(), g.dt))
                            }
                            PosKind::Swap => GateOp::fswap(a, bq),
                            PosKind::MergedHopSwap => {
                                GateOp::hop_fswap(a, bq, hop_theta(model, g.edge.unwrap(), g.dt))
                            }
                        });
                    }
                }
                b.push_layer(gates);
            }
            SemLayer::Onsite { dt } => {
                let phi = model.u * dt;
                if !bring_gates.is_empty() {
                    b.push_layer(bring_gates.clone());
                }
                let pos = b.mode_positions();
                let pairs: Vec<(usize, usize)> = (0..l).map(|s| (pos[s], pos[l + s])).collect();
                let (ryx, ryz, rya) = gates::ry_params(std::f64::consts::FRAC_PI_2);
                let (ryxm, ryzm, ryam) = gates::ry_params(-std::f64::consts::FRAC_PI_2);
                let (rxx, rxz, rxa) = gates::rx_params(phi / 2.0);
                b.push_layer(
                    pairs.iter().map(|&(u, d)| GateOp::rz_pair(u, d, -phi / 2.0, -phi / 2.0)).collect(),
                );
                b.push_layer(
                    pairs.iter().map(|&(u, _)| GateOp::phased_xz(u, ryx, ryz, rya)).collect(),
                );
                b.push_layer(pairs.iter().map(|&(u, d)| GateOp::cz(u, d)).collect());
                b.push_layer(
                    pairs.iter().map(|&(u, _)| GateOp::phased_xz(u, rxx, rxz, rxa)).collect(),
                );
                b.push_layer(pairs.iter().map(|&(u, d)| GateOp::cz(u, d)).collect());
                b.push_layer(
                    pairs.iter().map(|&(u, _)| GateOp::phased_xz(u, ryxm, ryzm, ryam)).collect(),
                );
                if !bring_gates.is_empty() {
                    b.push_layer(bring_gates.clone());
                }
            }
        }
    }
}

/// Routes each singlet pair adjacent, applies the four-qubit preparation
/// block, and routes back. Pairs are processed widest first so that nested
/// pairs stay unentangled while an enclosing pair is routed across them.
fn push_singlet_prep(b: &mut IrBuilder, state: &InitialStateSpec) -> Result<(), CircuitError> {
    let l = state.pattern.len();
    debug_assert!(b.map.iter().enumerate().all(|(q, &m)| q == m));
    let mut prepared = vec![false; l];
    let mut pairs = state.singlet_pairs.clone();
    pairs.sort_by_key(|&(a, c)| std::cmp::Reverse(c - a));
    let (hx, hz, ha) = gates::hadamard_params();
    let (xx, xz, xa) = x_params();
    for (a, c) in pairs {
        for m in (a + 1)..c {
            if prepared[m] {
                return Err(CircuitError::SingletRouting(a, c));
            }
        }
        let route: Vec<usize> = ((a + 1)..c).rev().collect();
        for &p in &route {
            b.push_layer(vec![GateOp::fswap(p, p + 1), GateOp::fswap(l + p, l + p + 1)]);
        }
        let (au, ad, bu, bd) = (a, l + a, a + 1, l + a + 1);
        b.push_layer(
            [au, ad, bu, bd].iter().map(|&q| GateOp::phased_xz(q, hx, hz, ha)).collect(),
        );
        b.push_layer(vec![GateOp::cz(ad, bu)]);
        b.push_layer(vec![GateOp::phased_xz(bu, hx, hz, ha)]);
        b.push_layer(vec![GateOp::cz(au, ad), GateOp::cz(bu, bd)]);
        b.push_layer(vec![
            GateOp::phased_xz(au, hx, hz, ha),
            GateOp::phased_xz(bd, hx, hz, ha),
        ]);
        b.push_layer(vec![GateOp::phased_xz(au, xx, xz, xa), GateOp::phased_xz(bd, xx, xz, xa)]);
        for &p in route.iter().rev() {
            b.push_layer(vec![GateOp::fswap(p, p + 1), GateOp::fswap(l + p, l + p + 1)]);
        }
        prepared[a] = true;
        prepared[c] = true;
    }
    // Any plain occupied sites alongside the singlets.
    let mut xs = Vec::new();
    for (s, p) in state.pattern.iter().enumerate() {
        match p {
            SitePattern::Up => xs.push(GateOp::phased_xz(s, xx, xz, xa)),
            SitePattern::Down => xs.push(GateOp::phased_xz(l + s, xx, xz, xa)),
            _ => {}
        }
    }
    if !xs.is_empty() {
        b.push_layer(xs);
    }
    Ok(())
}

fn meta_for(model: &ModelSpec, plan: Option<&TrotterPlan>) -> CircuitMeta {
    CircuitMeta {
        lx: model.lattice.lx,
        ly: model.lattice.ly,
        u: model.u,
        flux: model.flux,
        total_time: plan.map(|p| p.total_time()).unwrap_or(0.0),
        n_steps: plan.map(|p| p.n_steps()).unwrap_or(0),
    }
}

/// Full circuit: layout alignment swaps, state preparation, the Trotterized
/// evolution, and a terminal measurement of every qubit.
pub fn build_trotter_circuit(
    model: &ModelSpec,
    state: &InitialStateSpec,
    plan: &TrotterPlan,
) -> Result<CircuitIR, CircuitError> {
    plan.validate()?;
    let l = model.lattice.n_sites();
    if state.pattern.len() != l {
        return Err(CircuitError::StateMismatch { state: state.pattern.len(), lattice: l });
    }
    let steps = assemble_steps(model, plan)?;
    let mut b = IrBuilder::new(2 * l);
    let (_, align) = layout_overhead(model.lattice.lx, model.lattice.ly);
    if align > 0 {
        let g: Vec<GateOp> =
            (0..align).map(|i| GateOp::fswap(l + 2 * i, l + 2 * i + 1)).collect();
        b.push_layer(g.clone());
        b.push_layer(g);
    }
    if state.is_product() {
        let mut xs = Vec::new();
        let (xx, xz, xa) = x_params();
        for m in state.up_modes().expect("product state has up modes") {
            xs.push(GateOp::phased_xz(m, xx, xz, xa));
        }
        for m in state.down_modes().expect("product state has down modes") {
            xs.push(GateOp::phased_xz(l + m, xx, xz, xa));
        }
        if !xs.is_empty() {
            b.push_layer(xs);
        }
    } else {
        push_singlet_prep(&mut b, state)?;
    }
    render_evolution(&mut b, model, &steps);
    b.push_layer(vec![GateOp::measure((0..2 * l).collect())]);
    debug_assert!(b.map.iter().enumerate().all(|(q, &m)| q == m));
    Ok(CircuitIR { n_qubits: 2 * l, layers: b.layers, meta: meta_for(model, Some(plan)) })
}

/// State-preparation circuit alone, without evolution or measurement.
pub fn build_singlet_prep(
    model: &ModelSpec,
    state: &InitialStateSpec,
) -> Result<CircuitIR, CircuitError> {
    let l = model.lattice.n_sites();
    if state.pattern.len() != l {
        return Err(CircuitError::StateMismatch { state: state.pattern.len(), lattice: l });
    }
    let mut b = IrBuilder::new(2 * l);
    push_singlet_prep(&mut b, state)?;
    Ok(CircuitIR { n_qubits: 2 * l, layers: b.layers, meta: meta_for(model, None) })
}
