//! Swap-network schedule on one snake chain.
//!
//! Positions are chain indices `0..lx*ly`; row `r` occupies positions
//! `r*lx..(r+1)*lx` in snake order. Every row holds the same permutation
//! of column slots (odd rows mirror chain positions), so the two qubits
//! at each snake turning point always carry vertically adjacent sites and
//! vertical-hop layers are always available there. Swap layers shuttle
//! columns past each other on alternating slot parities; a horizontal hop
//! is merged into the fermionic swap the first time a lattice-adjacent
//! pair meets. Every lattice edge is hopped exactly once per round.

use std::collections::HashSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum PosKind {
    Hop,
    Swap,
    MergedHopSwap,
}

/// A two-qubit slot in the schedule, `p2 = p1 + 1` in chain order.
/// `edge` carries the lattice bond (snake site labels) for hop content.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PosGate {
    pub p1: usize,
    pub p2: usize,
    pub kind: PosKind,
    pub edge: Option<(usize, usize)>,
}

/// One round of the schedule: every lattice edge appears exactly once as
/// hop content. The second round of a Trotter step is this round reversed.
pub(crate) fn swap_network_round(lx: usize, ly: usize) -> Vec<Vec<PosGate>> {
    assert!(lx >= 2 && ly >= 2, "lattice below minimum size");
    let n_bound = ly - 1;
    let even_bounds = n_bound.div_ceil(2);
    let odd_bounds = n_bound / 2;
    let snake = |x: usize, y: usize| y * lx + if y % 2 == 0 { x } else { lx - 1 - x };

    let mut perm: Vec<usize> = (0..lx).collect();
    let mut done_h: HashSet<usize> = HashSet::new();
    let mut done_v_even: HashSet<usize> = HashSet::new();
    let mut done_v_odd: HashSet<usize> = HashSet::new();
    let mut layers: Vec<Vec<PosGate>> = Vec::new();

    #[derive(Clone, Copy, PartialEq)]
    enum Item {
        V,
        Ul,
        Ur,
    }

    let pattern = if lx % 2 == 0 {
        [Item::Ul, Item::V, Item::Ur]
    } else {
        [Item::V, Item::Ul, Item::Ur]
    };

    let emit_v = |perm: &[usize],
                      done_v_even: &mut HashSet<usize>,
                      done_v_odd: &mut HashSet<usize>|
     -> Vec<PosGate> {
        let mut gates = Vec::new();
        let col_even = perm[lx - 1];
        let col_odd = perm[0];
        let do_even = even_bounds > 0 && !done_v_even.contains(&col_even);
        let do_odd = odd_bounds > 0 && !done_v_odd.contains(&col_odd);
        for b in 0..n_bound {
            let (go, col) = if b % 2 == 0 { (do_even, col_even) } else { (do_odd, col_odd) };
            if go {
                gates.push(PosGate {
                    p1: (b + 1) * lx - 1,
                    p2: (b + 1) * lx,
                    kind: PosKind::Hop,
                    edge: Some((snake(col, b), snake(col, b + 1))),
                });
            }
        }
        if do_even {
            done_v_even.insert(col_even);
        }
        if do_odd {
            done_v_odd.insert(col_odd);
        }
        gates
    };

    let emit_swaps =
        |perm: &mut Vec<usize>, done_h: &mut HashSet<usize>, parity: usize| -> Vec<PosGate> {
            let mut gates = Vec::new();
            let mut k = parity;
            while k + 1 < lx {
                let (x1, x2) = (perm[k], perm[k + 1]);
                let (kind, xm) = if x1.abs_diff(x2) == 1 {
                    let xm = x1.min(x2);
                    if done_h.insert(xm) {
                        (PosKind::MergedHopSwap, Some(xm))
                    } else {
                        (PosKind::Swap, None)
                    }
                } else {
                    (PosKind::Swap, None)
                };
                for r in 0..ly {
                    let base = if r % 2 == 0 { k } else { lx - 2 - k };
                    gates.push(PosGate {
                        p1: r * lx + base,
                        p2: r * lx + base + 1,
                        kind,
                        edge: xm.map(|x| (snake(x, r), snake(x + 1, r))),
                    });
                }
                perm.swap(k, k + 1);
                k += 2;
            }
            gates
        };

    let finished = |done_h: &HashSet<usize>,
                    done_v_even: &HashSet<usize>,
                    done_v_odd: &HashSet<usize>| {
        done_h.len() == lx - 1
            && (even_bounds == 0 || done_v_even.len() == lx)
            && (odd_bounds == 0 || done_v_odd.len() == lx)
    };

    if lx % 2 == 0 {
        let gates = emit_v(&perm, &mut done_v_even, &mut done_v_odd);
        if !gates.is_empty() {
            layers.push(gates);
        }
    }
    let mut idx = 0;
    while !finished(&done_h, &done_v_even, &done_v_odd) {
        assert!(idx < 100 * lx * ly, "swap network failed to converge");
        let item = pattern[idx % 3];
        idx += 1;
        let gates = match item {
            Item::V => emit_v(&perm, &mut done_v_even, &mut done_v_odd),
            Item::Ul => emit_swaps(&mut perm, &mut done_h, 0),
            Item::Ur => emit_swaps(&mut perm, &mut done_h, 1),
        };
        if !gates.is_empty() {
            layers.push(gates);
        }
    }
    layers
}

/// Gates per round on one chain, fermionic swaps counted once even when
/// they carry a merged hop.
pub(crate) fn round_gate_count(round: &[Vec<PosGate>]) -> usize {
    round.iter().map(|l| l.len()).sum()
}

/// Extra fermionic-swap budget of the published embedding, keyed by
/// normalized lattice shape: pairs brought together around each interaction
/// block, and one-off chain alignment swaps at the start of the circuit.
/// Both counts are one-way; each is undone by an equal number of swaps.
pub(crate) fn layout_overhead(lx: usize, ly: usize) -> (usize, usize) {
    let key = (lx.min(ly), lx.max(ly));
    match key {
        (4, 4) => (7, 2),
        (5, 5) => (7, 6),
        (5, 6) => (8, 8),
        (6, 6) => (11, 8),
        _ => (0, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LatticeSpec;

    fn tags(round: &[Vec<PosGate>]) -> String {
        round
            .iter()
            .map(|layer| {
                if layer.iter().all(|g| g.kind == PosKind::Hop) {
                    "V"
                } else if layer[0].p1 % 2 == 0 {
                    "UL"
                } else {
                    "UR"
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn check_round(lx: usize, ly: usize) -> Vec<Vec<PosGate>> {
        let round = swap_network_round(lx, ly);
        let lattice = LatticeSpec::new(lx, ly).unwrap();
        // Every lattice edge is hopped exactly once.
        let mut hopped: Vec<(usize, usize)> = round
            .iter()
            .flatten()
            .filter_map(|g| g.edge)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        hopped.sort();
        let mut expect: Vec<(usize, usize)> = lattice.edges.iter().map(|e| (e.a, e.b)).collect();
        expect.sort();
        assert_eq!(hopped, expect, "{lx}x{ly} edge coverage");
        // Within a layer, supports are disjoint.
        for layer in &round {
            let mut seen = HashSet::new();
            for g in layer {
                assert!(seen.insert(g.p1) && seen.insert(g.p2), "{lx}x{ly} overlap");
                assert_eq!(g.p2, g.p1 + 1);
            }
        }
        round
    }

    #[test]
    fn four_by_four_round() {
        let round = check_round(4, 4);
        assert_eq!(tags(&round), "V UL V UR UL V UR UL V");
        assert_eq!(round_gate_count(&round), 44);
    }

    #[test]
    fn five_by_five_round() {
        let round = check_round(5, 5);
        assert_eq!(tags(&round), "V UL UR V UL UR V UL UR V UL UR V");
        assert_eq!(round_gate_count(&round), 100);
    }

    #[test]
    fn five_by_six_round() {
        let round = check_round(5, 6);
        assert_eq!(round.len(), 13);
        assert_eq!(round_gate_count(&round), 121);
    }

    #[test]
    fn six_by_six_round() {
        let round = check_round(6, 6);
        assert_eq!(tags(&round), "V UL V UR UL V UR UL V UR UL V UR UL V");
        assert_eq!(round_gate_count(&round), 168);
    }

    #[test]
    fn two_by_two_round() {
        let round = check_round(2, 2);
        assert_eq!(tags(&round), "V UL V");
        assert_eq!(round_gate_count(&round), 4);
    }

    #[test]
    fn assorted_sizes_cover_all_edges() {
        for (lx, ly) in [(2, 3), (3, 2), (3, 3), (2, 5), (4, 7), (7, 4), (3, 8)] {
            check_round(lx, ly);
        }
    }

    #[test]
    fn first_layer_is_full_boundary_column() {
        for (lx, ly) in [(4, 4), (5, 5), (5, 6), (6, 6), (3, 3)] {
            let round = swap_network_round(lx, ly);
            let first = &round[0];
            assert!(first.iter().all(|g| g.kind == PosKind::Hop));
            assert_eq!(first.len(), ly - 1, "{lx}x{ly} first vertical layer");
        }
    }
}
