//! Dense state-vector reference engine.
//!
//! Three exact backends live here: a dense circuit simulator (the ground
//! truth for every gate-level question up to 26 qubits), a sector-restricted
//! Krylov propagator for the continuous-time dynamics on lattices up to nine
//! sites, and a trajectory sampler with synthetic depolarizing plus readout
//! noise. On top of them sits the Trotter-error report comparing the
//! discretised circuit against the exact evolution, state overlap and
//! Pauli-Z observables alike.
//!
//! All supported initial states live in one (N_up, N_down) occupation sector;
//! singlet coverings are superpositions within a single sector, so the
//! sector-restricted propagator covers them too.

use std::collections::HashMap;

use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuits::{
    build_trotter_circuit, CircuitError, CircuitIR, CircuitMeta, GateKind, TrotterPlan,
    TwirlRecord,
};
use crate::model::{
    build_initial_state, build_model, Flux, InitialStateSpec, ModelError, ModelSpec,
    SitePattern, StateKind, StateParams,
};
use crate::shots::{bits_to_string, ShotRecord, ShotTable};
use crate::C64;

/// Hard cap on dense simulation; 2^26 amplitudes is the largest register the
/// engine will allocate.
pub const MAX_DENSE_QUBITS: usize = 26;

/// Largest site count with exact continuous-time dynamics (3x3).
pub const MAX_EXACT_SITES: usize = 9;

#[derive(Debug, Error)]
pub enum StatevecError {
    #[error("{0} qubits exceeds the dense simulation cap of {MAX_DENSE_QUBITS}")]
    TooManyQubits(usize),
    #[error("input occupation list has {got} entries for {want} qubits")]
    InputLength { want: usize, got: usize },
    #[error("sampling requires at least one shot")]
    ZeroShots,
    #[error("noise probabilities must lie in [0, 1]")]
    BadNoise,
    #[error("{0}x{1} lattice exceeds the exact-dynamics cap of {MAX_EXACT_SITES} sites")]
    LatticeTooLarge(usize, usize),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Dense register state, amplitude per computational basis index. Bit `q`
/// of the index is qubit `q`'s occupation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub n_qubits: usize,
    pub amps: Vec<C64>,
}

impl StateVector {
    pub fn zero(n_qubits: usize) -> Result<Self, StatevecError> {
        Self::basis(&vec![false; n_qubits])
    }

    /// The computational basis state with the given occupations.
    pub fn basis(bits: &[bool]) -> Result<Self, StatevecError> {
        let n = bits.len();
        if n > MAX_DENSE_QUBITS {
            return Err(StatevecError::TooManyQubits(n));
        }
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n];
        let idx = bits
            .iter()
            .enumerate()
            .fold(0usize, |acc, (q, &b)| acc | ((b as usize) << q));
        amps[idx] = C64::new(1.0, 0.0);
        Ok(StateVector { n_qubits: n, amps })
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.amps.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `|<self|other>|`, phase-insensitive overlap.
    pub fn overlap(&self, other: &StateVector) -> f64 {
        debug_assert_eq!(self.n_qubits, other.n_qubits);
        self.amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum::<C64>()
            .norm()
    }

    /// Expectation of the Z product over the qubits set in `mask`.
    pub fn z_product(&self, mask: usize) -> f64 {
        self.amps
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let sign = if (i & mask).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                sign * a.norm_sqr()
            })
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Dense circuit execution.

fn apply_1q(amps: &mut [C64], q: usize, m: &[C64; 4]) {
    let stride = 1usize << q;
    amps.par_chunks_mut(stride << 1).for_each(|chunk| {
        for i in 0..stride {
            let x0 = chunk[i];
            let x1 = chunk[i + stride];
            chunk[i] = m[0] * x0 + m[1] * x1;
            chunk[i + stride] = m[2] * x0 + m[3] * x1;
        }
    });
}

/// Applies a two-qubit gate; `a` is the high bit of the gate-local index.
fn apply_2q(amps: &mut [C64], a: usize, b: usize, m: &[C64; 16]) {
    let sa = 1usize << a;
    let sb = 1usize << b;
    let block = 1usize << (a.max(b) + 1);
    amps.par_chunks_mut(block).for_each(|chunk| {
        for i in 0..block {
            if i & (sa | sb) != 0 {
                continue;
            }
            let idx = [i, i | sb, i | sa, i | sa | sb];
            let x = [chunk[idx[0]], chunk[idx[1]], chunk[idx[2]], chunk[idx[3]]];
            for (r, &target) in idx.iter().enumerate() {
                chunk[target] =
                    m[4 * r] * x[0] + m[4 * r + 1] * x[1] + m[4 * r + 2] * x[2] + m[4 * r + 3] * x[3];
            }
        }
    });
}

fn apply_cz(amps: &mut [C64], a: usize, b: usize) {
    let mask = (1usize << a) | (1usize << b);
    amps.par_iter_mut().enumerate().for_each(|(i, amp)| {
        if i & mask == mask {
            *amp = -*amp;
        }
    });
}

fn apply_gate(amps: &mut [C64], g: &crate::circuits::GateOp) {
    match g.kind {
        GateKind::Measure => {}
        GateKind::CZ => apply_cz(amps, g.qubits[0], g.qubits[1]),
        _ => {
            let u = g.unitary();
            if g.qubits.len() == 1 {
                let m = [u[(0, 0)], u[(0, 1)], u[(1, 0)], u[(1, 1)]];
                apply_1q(amps, g.qubits[0], &m);
            } else {
                let mut m = [C64::new(0.0, 0.0); 16];
                for r in 0..4 {
                    for c in 0..4 {
                        m[4 * r + c] = u[(r, c)];
                    }
                }
                apply_2q(amps, g.qubits[0], g.qubits[1], &m);
            }
        }
    }
}

/// Runs `ir` exactly on the basis state given by `input_occupations`.
/// Measurement layers are transparent; sampling is a separate step.
pub fn run_circuit(
    ir: &CircuitIR,
    input_occupations: &[bool],
) -> Result<StateVector, StatevecError> {
    if input_occupations.len() != ir.n_qubits {
        return Err(StatevecError::InputLength {
            want: ir.n_qubits,
            got: input_occupations.len(),
        });
    }
    let mut state = StateVector::basis(input_occupations)?;
    for g in ir.iter_gates() {
        apply_gate(&mut state.amps, g);
    }
    debug_assert!((state.norm() - 1.0).abs() < 1e-10);
    Ok(state)
}

// ---------------------------------------------------------------------------
// Synthetic noise.

/// Depolarizing-plus-readout noise strengths. Defaults are plausible for the
/// targeted hardware class but explicitly synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Two-qubit depolarizing probability per gate.
    pub p2: f64,
    /// Single-qubit depolarizing probability per gate.
    pub p1: f64,
    /// Independent readout bitflip probability per qubit.
    pub p_ro: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { p2: 3e-3, p1: 1e-4, p_ro: 1e-2, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        NoiseSpec { p2: 0.0, p1: 0.0, p_ro: 0.0, seed }
    }

    pub fn validate(&self) -> Result<(), StatevecError> {
        for p in [self.p2, self.p1, self.p_ro] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(StatevecError::BadNoise);
            }
        }
        Ok(())
    }
}

/// One deterministic stream per shot index, so shot k is reproducible
/// independent of how work is batched.
pub(crate) fn shot_rng(seed: u64, shot: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((shot + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn draw_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn index_bits(i: usize, n: usize) -> Vec<bool> {
    (0..n).map(|q| (i >> q) & 1 == 1).collect()
}

fn readout_flips(bits: &mut [bool], p_ro: f64, rng: &mut ChaCha8Rng) {
    if p_ro > 0.0 {
        for b in bits.iter_mut() {
            if rng.gen_bool(p_ro) {
                *b = !*b;
            }
        }
    }
}

fn shot_record(bits: &[bool], meta: &CircuitMeta, twirl: Option<&TwirlRecord>) -> ShotRecord {
    ShotRecord {
        bits: bits_to_string(bits),
        t: meta.total_time,
        u: meta.u,
        flux: meta.flux,
        twirl_id: twirl.map(|tw| tw.seed),
        mask: twirl.map(|tw| bits_to_string(&tw.mask)),
    }
}

/// I.i.d. computational-basis samples from an exact state, with optional
/// readout flips. Metadata for the records comes from the circuit that
/// produced the state.
pub fn sample(
    state: &StateVector,
    n_shots: usize,
    noise: Option<&NoiseSpec>,
    meta: &CircuitMeta,
) -> Result<ShotTable, StatevecError> {
    if n_shots == 0 {
        return Err(StatevecError::ZeroShots);
    }
    let noise = noise.copied().unwrap_or_else(|| NoiseSpec::noiseless(0));
    noise.validate()?;
    let probs = state.probabilities();
    let records = (0..n_shots as u64)
        .map(|k| {
            let mut rng = shot_rng(noise.seed, k);
            let mut bits = index_bits(draw_index(&probs, &mut rng), state.n_qubits);
            readout_flips(&mut bits, noise.p_ro, &mut rng);
            shot_record(&bits, meta, None)
        })
        .collect();
    Ok(ShotTable { records })
}

fn pauli_1q(code: u8) -> [C64; 4] {
    let z = C64::new(0.0, 0.0);
    let one = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    match code {
        1 => [z, one, one, z],
        2 => [z, -i, i, z],
        3 => [one, z, z, -one],
        _ => unreachable!("identity is never applied"),
    }
}

/// Trajectory sampling through `ir` under depolarizing noise: after every
/// gate a uniformly random non-identity Pauli lands on its support with the
/// corresponding probability. One trajectory per shot. A twirl record is
/// carried into the shot metadata; its mask is stored, not applied, since
/// the mask's X gates are already part of a twirled circuit.
pub fn run_noisy(
    ir: &CircuitIR,
    input_occupations: &[bool],
    noise: &NoiseSpec,
    n_shots: usize,
    twirl: Option<&TwirlRecord>,
) -> Result<ShotTable, StatevecError> {
    if n_shots == 0 {
        return Err(StatevecError::ZeroShots);
    }
    noise.validate()?;
    if input_occupations.len() != ir.n_qubits {
        return Err(StatevecError::InputLength {
            want: ir.n_qubits,
            got: input_occupations.len(),
        });
    }
    let records: Vec<ShotRecord> = (0..n_shots as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = shot_rng(noise.seed, k);
            let mut state = StateVector::basis(input_occupations).expect("checked above");
            for g in ir.iter_gates() {
                apply_gate(&mut state.amps, g);
                match g.qubits.len() {
                    2 if noise.p2 > 0.0 && rng.gen_bool(noise.p2) => {
                        let pick = rng.gen_range(1..16u8);
                        for (q, code) in [(g.qubits[0], pick / 4), (g.qubits[1], pick % 4)] {
                            if code != 0 {
                                apply_1q(&mut state.amps, q, &pauli_1q(code));
                            }
                        }
                    }
                    1 if g.kind != GateKind::Measure
                        && noise.p1 > 0.0
                        && rng.gen_bool(noise.p1) =>
                    {
                        let code = rng.gen_range(1..4u8);
                        apply_1q(&mut state.amps, g.qubits[0], &pauli_1q(code));
                    }
                    _ => {}
                }
            }
            let probs = state.probabilities();
            let mut bits = index_bits(draw_index(&probs, &mut rng), ir.n_qubits);
            readout_flips(&mut bits, noise.p_ro, &mut rng);
            shot_record(&bits, &ir.meta, twirl)
        })
        .collect();
    Ok(ShotTable { records })
}

// ---------------------------------------------------------------------------
// Exact sector dynamics.

/// All `l`-bit masks with `k` bits set, ascending.
fn combinations(l: usize, k: usize) -> Vec<u32> {
    let mut out = Vec::new();
    for c in 0..(1u32 << l) {
        if c.count_ones() as usize == k {
            out.push(c);
        }
    }
    out
}

fn config_index(configs: &[u32], c: u32) -> usize {
    configs.binary_search(&c).expect("config outside enumerated sector")
}

/// Hamiltonian restricted to one (N_up, N_down) sector, stored as one-spin
/// hopping adjacency (shared structure for both spins apart from the
/// occupation lists) plus the diagonal interaction.
struct SectorSim {
    l: usize,
    configs_up: Vec<u32>,
    configs_down: Vec<u32>,
    hops_up: Vec<Vec<(usize, f64)>>,
    hops_down: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

/// Edges as (site, site, peierls phase) triples.
fn model_edges(model: &ModelSpec) -> Vec<(usize, usize, f64)> {
    model
        .lattice
        .edges
        .iter()
        .zip(&model.peierls)
        .map(|(e, &phi)| (e.a, e.b, phi))
        .collect()
}

/// One-spin hopping rows: for each source configuration, the reachable
/// configurations with amplitude. The hop coefficient is -cos(phi) and the
/// matrix element carries the chain-ordering parity between the two modes.
fn spin_hops(
    l: usize,
    edges: &[(usize, usize, f64)],
    configs: &[u32],
) -> Vec<Vec<(usize, f64)>> {
    configs
        .iter()
        .map(|&c| {
            let mut row = Vec::new();
            for &(a, b, phi) in edges {
                let occ_a = (c >> a) & 1 == 1;
                let occ_b = (c >> b) & 1 == 1;
                if occ_a == occ_b {
                    continue;
                }
                let (lo, hi) = (a.min(b), a.max(b));
                let between = ((c >> (lo + 1)) & ((1 << (hi - lo - 1)) - 1)).count_ones();
                let jw = if between % 2 == 0 { 1.0 } else { -1.0 };
                let moved = c ^ (1 << a) ^ (1 << b);
                row.push((config_index(configs, moved), -phi.cos() * jw));
            }
            let _ = l;
            row
        })
        .collect()
}

impl SectorSim {
    fn new(l: usize, edges: &[(usize, usize, f64)], u: f64, n_up: usize, n_down: usize) -> Self {
        let configs_up = combinations(l, n_up);
        let configs_down = combinations(l, n_down);
        let hops_up = spin_hops(l, edges, &configs_up);
        let hops_down = spin_hops(l, edges, &configs_down);
        let mut diag = vec![0.0; configs_up.len() * configs_down.len()];
        for (iu, &cu) in configs_up.iter().enumerate() {
            for (id, &cd) in configs_down.iter().enumerate() {
                diag[iu * configs_down.len() + id] = u * (cu & cd).count_ones() as f64;
            }
        }
        SectorSim { l, configs_up, configs_down, hops_up, hops_down, diag }
    }

    fn for_state(model: &ModelSpec, state: &InitialStateSpec) -> Result<Self, StatevecError> {
        let l = model.lattice.n_sites();
        if l > MAX_EXACT_SITES {
            return Err(StatevecError::LatticeTooLarge(model.lattice.lx, model.lattice.ly));
        }
        Ok(SectorSim::new(l, &model_edges(model), model.u, state.n_up, state.n_down))
    }

    fn dim(&self) -> usize {
        self.configs_up.len() * self.configs_down.len()
    }

    fn apply(&self, v: &[C64], out: &mut [C64]) {
        let nd = self.configs_down.len();
        out.iter_mut().zip(&self.diag).zip(v).for_each(|((o, &d), &x)| *o = d * x);
        for (iu, row) in self.hops_up.iter().enumerate() {
            for &(ju, w) in row {
                let src = &v[ju * nd..(ju + 1) * nd];
                let dst = &mut out[iu * nd..(iu + 1) * nd];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        for block in 0..self.configs_up.len() {
            let base = block * nd;
            for (id, row) in self.hops_down.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for &(jd, w) in row {
                    acc += w * v[base + jd];
                }
                out[base + id] += acc;
            }
        }
    }

    /// Dense register index of sector coordinates (up config, down config).
    fn full_index(&self, iu: usize, id: usize) -> usize {
        self.configs_up[iu] as usize | ((self.configs_down[id] as usize) << self.l)
    }

    fn scatter(&self, v: &[C64]) -> Result<StateVector, StatevecError> {
        let n = 2 * self.l;
        if n > MAX_DENSE_QUBITS {
            return Err(StatevecError::TooManyQubits(n));
        }
        let nd = self.configs_down.len();
        let mut amps = vec![C64::new(0.0, 0.0); 1 << n];
        for iu in 0..self.configs_up.len() {
            for id in 0..nd {
                amps[self.full_index(iu, id)] = v[iu * nd + id];
            }
        }
        Ok(StateVector { n_qubits: n, amps })
    }

    /// Sector amplitudes of an initial-state spec. Product states are one
    /// basis vector; each singlet pair contributes its two assignments with
    /// equal magnitude and the fermionic reordering sign of that assignment,
    /// so the result is the product of singlet blocks for any covering. For
    /// coverings without interleaved pairs the sign is a global phase and
    /// every amplitude comes out positive up to that phase.
    fn initial_vector(&self, state: &InitialStateSpec) -> Vec<C64> {
        let nd = self.configs_down.len();
        let mut base_up = 0u32;
        let mut base_down = 0u32;
        for (s, p) in state.pattern.iter().enumerate() {
            match p {
                SitePattern::Up => base_up |= 1 << s,
                SitePattern::Down => base_down |= 1 << s,
                _ => {}
            }
        }
        let pairs = &state.singlet_pairs;
        let amp = C64::new((1.0 / 2f64.sqrt()).powi(pairs.len() as i32), 0.0);
        let mut v = vec![C64::new(0.0, 0.0); self.dim()];
        for choice in 0..(1usize << pairs.len()) {
            let mut up = base_up;
            let mut down = base_down;
            for (k, &(a, b)) in pairs.iter().enumerate() {
                if (choice >> k) & 1 == 0 {
                    up |= 1 << a;
                    down |= 1 << b;
                } else {
                    up |= 1 << b;
                    down |= 1 << a;
                }
            }
            let iu = config_index(&self.configs_up, up);
            let id = config_index(&self.configs_down, down);
            v[iu * nd + id] = amp * state.assignment_sign(choice);
        }
        v
    }
}

/// Krylov propagation of `v` by `exp(-i t H)`; falls back to halving the
/// time when the space does not converge within the iteration budget.
fn krylov_propagate(sim: &SectorSim, v: Vec<C64>, t: f64, depth: usize) -> Vec<C64> {
    assert!(depth < 40, "time-splitting recursion runaway");
    match lanczos_exp(sim, &v, t) {
        Some(out) => out,
        None => {
            let half = krylov_propagate(sim, v, t / 2.0, depth + 1);
            krylov_propagate(sim, half, t / 2.0, depth + 1)
        }
    }
}

const KRYLOV_TOL: f64 = 1e-12;

fn lanczos_exp(sim: &SectorSim, v0: &[C64], t: f64) -> Option<Vec<C64>> {
    let dim = sim.dim();
    let m_max = dim.min(120);
    let mut basis: Vec<Vec<C64>> = vec![v0.to_vec()];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![C64::new(0.0, 0.0); dim];
    loop {
        let j = alphas.len();
        sim.apply(&basis[j], &mut w);
        if j > 0 {
            let b = betas[j - 1];
            for (wi, vi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b * vi;
            }
        }
        let alpha: f64 = basis[j].iter().zip(&w).map(|(v, w)| (v.conj() * w).re).sum();
        alphas.push(alpha);
        for (wi, vi) in w.iter_mut().zip(&basis[j]) {
            *wi -= alpha * vi;
        }
        // Full reorthogonalization keeps the recurrence honest at these
        // dimensions; cost is negligible next to the matrix applies.
        for prev in &basis {
            let overlap: C64 = prev.iter().zip(&w).map(|(p, w)| p.conj() * w).sum();
            for (wi, pi) in w.iter_mut().zip(prev) {
                *wi -= overlap * pi;
            }
        }
        let beta = w.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
        let coeffs = small_exp_column(&alphas, &betas, t);
        let err = if beta < 1e-14 { 0.0 } else { beta * coeffs[j].norm() };
        if err < KRYLOV_TOL || beta < 1e-14 || j + 1 == m_max {
            if err < KRYLOV_TOL || beta < 1e-14 {
                let mut out = vec![C64::new(0.0, 0.0); dim];
                for (c, vk) in coeffs.iter().zip(&basis) {
                    for (o, x) in out.iter_mut().zip(vk) {
                        *o += c * x;
                    }
                }
                return Some(out);
            }
            return None;
        }
        betas.push(beta);
        let mut next = w.clone();
        for x in next.iter_mut() {
            *x /= beta;
        }
        basis.push(next);
    }
}

/// First column of exp(-i t T) for the tridiagonal (alphas, betas).
fn small_exp_column(alphas: &[f64], betas: &[f64], t: f64) -> Vec<C64> {
    let m = alphas.len();
    let mut tm = nalgebra::DMatrix::<f64>::zeros(m, m);
    for (i, &a) in alphas.iter().enumerate() {
        tm[(i, i)] = a;
    }
    for (i, &b) in betas.iter().enumerate().take(m.saturating_sub(1)) {
        tm[(i, i + 1)] = b;
        tm[(i + 1, i)] = b;
    }
    let eig = nalgebra::SymmetricEigen::new(tm);
    let mut out = vec![C64::new(0.0, 0.0); m];
    for k in 0..m {
        let lam = eig.eigenvalues[k];
        let phase = C64::new(0.0, -lam * t).exp();
        let c0 = eig.eigenvectors[(0, k)];
        for (j, o) in out.iter_mut().enumerate() {
            *o += eig.eigenvectors[(j, k)] * phase * c0;
        }
    }
    out
}

/// Exact `exp(-i t H) |state>` in the state's occupation sector, returned as
/// a dense register state.
pub fn evolve_exact(
    model: &ModelSpec,
    state: &InitialStateSpec,
    t: f64,
) -> Result<StateVector, StatevecError> {
    let sim = SectorSim::for_state(model, state)?;
    let v0 = sim.initial_vector(state);
    let vt = if t == 0.0 { v0 } else { krylov_propagate(&sim, v0, t, 0) };
    sim.scatter(&vt)
}

/// `<psi|H|psi>` for any register state on the model's lattice (grouped by
/// occupation sector, so superpositions across sectors are fine).
pub fn hamiltonian_expectation(
    model: &ModelSpec,
    state: &StateVector,
) -> Result<f64, StatevecError> {
    let l = model.lattice.n_sites();
    if l > MAX_EXACT_SITES {
        return Err(StatevecError::LatticeTooLarge(model.lattice.lx, model.lattice.ly));
    }
    debug_assert_eq!(state.n_qubits, 2 * l);
    let mask = (1usize << l) - 1;
    let mut sectors: HashMap<(usize, usize), Vec<(usize, C64)>> = HashMap::new();
    for (i, &a) in state.amps.iter().enumerate() {
        if a.norm_sqr() > 0.0 {
            let key = ((i & mask).count_ones() as usize, (i >> l).count_ones() as usize);
            sectors.entry(key).or_default().push((i, a));
        }
    }
    let edges = model_edges(model);
    let mut total = 0.0;
    for ((n_up, n_down), entries) in sectors {
        let sim = SectorSim::new(l, &edges, model.u, n_up, n_down);
        let nd = sim.configs_down.len();
        let mut v = vec![C64::new(0.0, 0.0); sim.dim()];
        for (i, a) in entries {
            let iu = config_index(&sim.configs_up, (i & mask) as u32);
            let id = config_index(&sim.configs_down, (i >> l) as u32);
            v[iu * nd + id] = a;
        }
        let mut hv = vec![C64::new(0.0, 0.0); sim.dim()];
        sim.apply(&v, &mut hv);
        total += v.iter().zip(&hv).map(|(a, b)| (a.conj() * b).re).sum::<f64>();
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Trotter-error report.

/// In-place Walsh-Hadamard transform; on a probability vector the result at
/// index `mask` is the expectation of the Z product over `mask`.
fn walsh_hadamard(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for chunk in v.chunks_mut(2 * h) {
            let (a, b) = chunk.split_at_mut(h);
            for i in 0..h {
                let (x, y) = (a[i], b[i]);
                a[i] = x + y;
                b[i] = x - y;
            }
        }
        h *= 2;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrotterErrorRow {
    pub lx: usize,
    pub ly: usize,
    pub t: f64,
    pub u: f64,
    pub flux: Flux,
    /// Mean/max over the initial-state set of 2 sqrt(1 - overlap^2).
    pub state_err_mean: f64,
    pub state_err_max: f64,
    /// Mean/max over states and all weight-1..=4 Z products of the
    /// expectation-value deviation.
    pub obs_err_mean: f64,
    pub obs_err_max: f64,
    /// Same metric with the weight cap scaled to the lattice (4/6/8 for
    /// 2x2, 2x3, 3x3).
    pub scaled_weight: usize,
    pub obs_scaled_mean: f64,
    pub obs_scaled_max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrotterErrorReport {
    pub rows: Vec<TrotterErrorRow>,
}

impl TrotterErrorReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lx,ly,t,u,flux,state_err_mean,state_err_max,obs_err_mean,obs_err_max,\
             scaled_weight,obs_scaled_mean,obs_scaled_max\n",
        );
        for r in &self.rows {
            let flux = match r.flux {
                Flux::Zero => "zero",
                Flux::Pi => "pi",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.lx,
                r.ly,
                r.t,
                r.u,
                flux,
                r.state_err_mean,
                r.state_err_max,
                r.obs_err_mean,
                r.obs_err_max,
                r.scaled_weight,
                r.obs_scaled_mean,
                r.obs_scaled_max
            ));
        }
        out
    }
}

fn scaled_weight_for(l: usize) -> usize {
    match l {
        4 => 4,
        6 => 6,
        _ => 8,
    }
}

/// The initial-state set the error sweep averages over: a plain Neel state,
/// holes at the centre and upper-left corner, holes on the upper and lower
/// sides, and a vertical holon stripe.
pub fn error_sweep_states(model: &ModelSpec) -> Result<Vec<InitialStateSpec>, ModelError> {
    let (lx, ly) = (model.lattice.lx, model.lattice.ly);
    let neel = |holes: Vec<(usize, usize)>| {
        build_initial_state(model, StateKind::NeelWithHoles, &StateParams::NeelWithHoles { holes })
    };
    Ok(vec![
        neel(vec![])?,
        neel(vec![((lx - 1) / 2, (ly - 1) / 2), (0, ly - 1)])?,
        neel(vec![(lx / 2, ly - 1), (lx / 2, 0)])?,
        build_initial_state(
            model,
            StateKind::HolonStripe,
            &StateParams::HolonStripe { column: None },
        )?,
    ])
}

struct ErrAccum {
    sum: f64,
    max: f64,
    count: usize,
}

impl ErrAccum {
    fn new() -> Self {
        ErrAccum { sum: 0.0, max: 0.0, count: 0 }
    }

    fn push(&mut self, e: f64) {
        self.sum += e;
        self.max = self.max.max(e);
        self.count += 1;
    }

    fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Compares three second-order Trotter steps against the exact dynamics on
/// small lattices: state error 2 sqrt(1 - |<phi|phi'>|^2) and Z-observable
/// deviations up to weight 4 plus the scaled weight cap, mean and max over
/// the initial-state set.
pub fn trotter_error_report(
    sizes: &[(usize, usize)],
    times: &[f64],
    u_list: &[f64],
    flux_list: &[Flux],
) -> Result<TrotterErrorReport, StatevecError> {
    let mut combos = Vec::new();
    for &(lx, ly) in sizes {
        if lx * ly > MAX_EXACT_SITES {
            return Err(StatevecError::LatticeTooLarge(lx, ly));
        }
        for &t in times {
            for &u in u_list {
                for &flux in flux_list {
                    combos.push((lx, ly, t, u, flux));
                }
            }
        }
    }
    let rows: Result<Vec<TrotterErrorRow>, StatevecError> = combos
        .into_par_iter()
        .map(|(lx, ly, t, u, flux)| trotter_error_row(lx, ly, t, u, flux))
        .collect();
    Ok(TrotterErrorReport { rows: rows? })
}

fn trotter_error_row(
    lx: usize,
    ly: usize,
    t: f64,
    u: f64,
    flux: Flux,
) -> Result<TrotterErrorRow, StatevecError> {
    let model = build_model(lx, ly, u, flux)?;
    let l = model.lattice.n_sites();
    let n = 2 * l;
    let scaled_weight = scaled_weight_for(l);
    let mut state_err = ErrAccum::new();
    let mut obs_err = ErrAccum::new();
    let mut obs_scaled = ErrAccum::new();
    for state in error_sweep_states(&model)? {
        if t == 0.0 {
            state_err.push(0.0);
            obs_err.push(0.0);
            obs_scaled.push(0.0);
            continue;
        }
        let exact = evolve_exact(&model, &state, t)?;
        let plan = TrotterPlan::uniform(3, t);
        let ir = build_trotter_circuit(&model, &state, &plan)?;
        let trotter = run_circuit(&ir, &vec![false; n])?;
        let overlap = exact.overlap(&trotter);
        state_err.push(2.0 * (1.0 - (overlap * overlap).min(1.0)).max(0.0).sqrt());
        let mut ze = exact.probabilities();
        let mut zt = trotter.probabilities();
        walsh_hadamard(&mut ze);
        walsh_hadamard(&mut zt);
        for mask in 1..(1usize << n) {
            let w = mask.count_ones() as usize;
            if w > scaled_weight {
                continue;
            }
            let d = (ze[mask] - zt[mask]).abs();
            if w <= 4 {
                obs_err.push(d);
            }
            obs_scaled.push(d);
        }
    }
    Ok(TrotterErrorRow {
        lx,
        ly,
        t,
        u,
        flux,
        state_err_mean: state_err.mean(),
        state_err_max: state_err.max,
        obs_err_mean: obs_err.mean(),
        obs_err_max: obs_err.max,
        scaled_weight,
        obs_scaled_mean: obs_scaled.mean(),
        obs_scaled_max: obs_scaled.max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::{build_singlet_prep, twirl};
    use crate::linalg::expm_hermitian;
    use approx::assert_abs_diff_eq;

    fn meta22() -> CircuitMeta {
        CircuitMeta { lx: 2, ly: 2, u: 0.0, flux: Flux::Zero, total_time: 0.0, n_steps: 0 }
    }

    fn neel(model: &ModelSpec, holes: Vec<(usize, usize)>) -> InitialStateSpec {
        build_initial_state(model, StateKind::NeelWithHoles, &StateParams::NeelWithHoles { holes })
            .unwrap()
    }

    #[test]
    fn empty_circuit_leaves_input_alone() {
        let ir = CircuitIR { n_qubits: 3, layers: vec![], meta: meta22() };
        let input = [true, false, true];
        let out = run_circuit(&ir, &input).unwrap();
        let expect = StateVector::basis(&input).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn qubit_cap_enforced() {
        assert!(matches!(
            StateVector::zero(MAX_DENSE_QUBITS + 1),
            Err(StatevecError::TooManyQubits(_))
        ));
    }

    #[test]
    fn singlet_prep_amplitudes_match_hand_expansion() {
        // One pair on adjacent sites 0 and 1 of a 2x2 lattice with the other
        // two sites empty: the only configurations are up(0) down(1) and
        // up(1) down(0), each at weight 1/2.
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = build_initial_state(
            &model,
            StateKind::SingletCoveringWithHoles,
            &StateParams::SingletCoveringWithHoles {
                holes: vec![(1, 1), (0, 1)],
                pairs: Some(vec![((0, 0), (1, 0))]),
            },
        )
        .unwrap();
        let prep = build_singlet_prep(&model, &state).unwrap();
        let psi = run_circuit(&prep, &vec![false; 8]).unwrap();
        let l = 4;
        let idx_a = 1 | (2 << l); // up mode 0, down mode 1
        let idx_b = 2 | (1 << l); // up mode 1, down mode 0
        for (i, amp) in psi.amps.iter().enumerate() {
            if i == idx_a || i == idx_b {
                assert!((amp.norm() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
            } else {
                assert!(amp.norm() < 1e-12, "stray amplitude at {i}");
            }
        }
        assert!((psi.amps[idx_a] - psi.amps[idx_b]).norm() < 1e-12);
    }

    #[test]
    fn prep_circuit_matches_exact_singlet_state() {
        // Both the adjacent covering and one that needs routing; overlap is
        // phase-insensitive and must be exactly 1.
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        for pairs in [None, Some(vec![((0, 0), (0, 1)), ((1, 0), (1, 1))])] {
            let state = build_initial_state(
                &model,
                StateKind::SingletCoveringWithHoles,
                &StateParams::SingletCoveringWithHoles { holes: vec![], pairs },
            )
            .unwrap();
            let prep = build_singlet_prep(&model, &state).unwrap();
            let circuit = run_circuit(&prep, &vec![false; 8]).unwrap();
            let exact = evolve_exact(&model, &state, 0.0).unwrap();
            assert!((circuit.overlap(&exact) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_mode_hop_density_oscillates_as_cosine_squared() {
        // Single fermion on a bare two-site chain, phase 0. The sign
        // convention fixes n_0(t) = cos^2 t exactly.
        let sim = SectorSim::new(2, &[(0, 1, 0.0)], 0.0, 1, 0);
        let mut v = vec![C64::new(0.0, 0.0); sim.dim()];
        v[config_index(&sim.configs_up, 0b01) * sim.configs_down.len()] = C64::new(1.0, 0.0);
        // Independent oracle: dense exponential of the one-particle block.
        let mut h = nalgebra::DMatrix::<C64>::zeros(2, 2);
        h[(0, 1)] = C64::new(-1.0, 0.0);
        h[(1, 0)] = C64::new(-1.0, 0.0);
        for t in [0.0, 0.3, 0.7, 1.2, 2.5] {
            let out = krylov_propagate(&sim, v.clone(), t, 0);
            let n0 = out[config_index(&sim.configs_up, 0b01)].norm_sqr();
            assert_abs_diff_eq!(n0, t.cos().powi(2), epsilon = 1e-12);
            let u = expm_hermitian(&h, t);
            // Sector order is (mode0) then (mode1); the dense oracle uses the
            // same ordering.
            let a0 = u[(0, 0)];
            assert!((out[0] - a0).norm() < 1e-12);
        }
    }

    #[test]
    fn evolve_at_zero_time_is_identity() {
        let model = build_model(2, 3, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![(0, 0)]);
        let sv = evolve_exact(&model, &state, 0.0).unwrap();
        let up = state.up_modes().unwrap();
        let down = state.down_modes().unwrap();
        let mut bits = vec![false; 12];
        for m in up {
            bits[m] = true;
        }
        for m in down {
            bits[6 + m] = true;
        }
        assert_eq!(sv, StateVector::basis(&bits).unwrap());
    }

    #[test]
    fn norm_and_energy_conserved_under_exact_evolution() {
        let model = build_model(2, 2, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![]);
        let e0 = hamiltonian_expectation(&model, &evolve_exact(&model, &state, 0.0).unwrap())
            .unwrap();
        for t in [0.4, 1.2] {
            let sv = evolve_exact(&model, &state, t).unwrap();
            assert!((sv.norm() - 1.0).abs() < 1e-10);
            let e = hamiltonian_expectation(&model, &sv).unwrap();
            assert!((e - e0).abs() < 1e-8, "energy drifted: {e0} -> {e}");
        }
    }

    #[test]
    fn basis_state_sampling_is_constant() {
        let bits = [true, false, true, false];
        let sv = StateVector::basis(&bits).unwrap();
        let table = sample(&sv, 20, None, &meta22()).unwrap();
        for r in &table.records {
            assert_eq!(r.bits, "1010");
        }
    }

    #[test]
    fn half_probability_readout_noise_scrambles_marginals() {
        let sv = StateVector::zero(4).unwrap();
        let noise = NoiseSpec { p2: 0.0, p1: 0.0, p_ro: 0.5, seed: 11 };
        let n = 4000;
        let table = sample(&sv, n, Some(&noise), &meta22()).unwrap();
        let sigma = 0.5 / (n as f64).sqrt();
        for q in 0..4 {
            let ones = table.records.iter().filter(|r| r.bit(q)).count() as f64;
            assert!((ones / n as f64 - 0.5).abs() < 5.0 * sigma, "qubit {q} marginal");
        }
    }

    #[test]
    fn noiseless_singlet_sampling_hits_only_the_two_strings() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = build_initial_state(
            &model,
            StateKind::SingletCoveringWithHoles,
            &StateParams::SingletCoveringWithHoles {
                holes: vec![(1, 1), (0, 1)],
                pairs: Some(vec![((0, 0), (1, 0))]),
            },
        )
        .unwrap();
        let prep = build_singlet_prep(&model, &state).unwrap();
        let psi = run_circuit(&prep, &vec![false; 8]).unwrap();
        let table = sample(&psi, 200, Some(&NoiseSpec::noiseless(3)), &prep.meta).unwrap();
        for r in &table.records {
            assert!(r.bits == "10000100" || r.bits == "01001000", "unexpected {}", r.bits);
        }
    }

    #[test]
    fn zero_shot_requests_are_rejected() {
        let sv = StateVector::zero(2).unwrap();
        assert!(matches!(sample(&sv, 0, None, &meta22()), Err(StatevecError::ZeroShots)));
    }

    #[test]
    fn zero_noise_trajectories_reproduce_exact_sampling() {
        let model = build_model(2, 2, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![(0, 0)]);
        let plan = TrotterPlan::uniform(2, 0.5);
        let ir = build_trotter_circuit(&model, &state, &plan).unwrap();
        let noise = NoiseSpec::noiseless(42);
        let noisy = run_noisy(&ir, &vec![false; 8], &noise, 64, None).unwrap();
        let exact = run_circuit(&ir, &vec![false; 8]).unwrap();
        let direct = sample(&exact, 64, Some(&noise), &ir.meta).unwrap();
        assert_eq!(noisy, direct);
    }

    #[test]
    fn strong_depolarizing_noise_kills_z_expectations() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = neel(&model, vec![]);
        let plan = TrotterPlan::uniform(2, 0.6);
        let ir = build_trotter_circuit(&model, &state, &plan).unwrap();
        let noise = NoiseSpec { p2: 0.9, p1: 0.0, p_ro: 0.0, seed: 5 };
        let n = 4000;
        let table = run_noisy(&ir, &vec![false; 8], &noise, n, None).unwrap();
        let sigma = 1.0 / (n as f64).sqrt();
        for q in 0..8 {
            let ones = table.records.iter().filter(|r| r.bit(q)).count() as f64;
            let z = 1.0 - 2.0 * ones / n as f64;
            assert!(z.abs() < 5.0 * sigma, "qubit {q}: <Z> = {z}");
        }
    }

    #[test]
    fn twirl_metadata_lands_in_shot_records() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = neel(&model, vec![]);
        let ir = build_trotter_circuit(&model, &state, &TrotterPlan::uniform(1, 0.3)).unwrap();
        let (twirled, record) = twirl(&ir, 9);
        let noise = NoiseSpec::noiseless(1);
        let table = run_noisy(&twirled, &vec![false; 8], &noise, 3, Some(&record)).unwrap();
        for r in &table.records {
            assert_eq!(r.twirl_id, Some(9));
            assert_eq!(r.mask.as_deref(), Some(bits_to_string(&record.mask).as_str()));
        }
    }

    #[test]
    fn noiseless_sampling_conserves_sector_occupation() {
        let model = build_model(2, 3, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![(1, 1)]);
        let ir = build_trotter_circuit(&model, &state, &TrotterPlan::uniform(2, 0.8)).unwrap();
        let psi = run_circuit(&ir, &vec![false; 12]).unwrap();
        let table = sample(&psi, 300, Some(&NoiseSpec::noiseless(7)), &ir.meta).unwrap();
        for r in &table.records {
            let up = (0..6).filter(|&q| r.bit(q)).count();
            let down = (6..12).filter(|&q| r.bit(q)).count();
            assert_eq!((up, down), (state.n_up, state.n_down));
        }
    }

    #[test]
    fn walsh_hadamard_matches_direct_z_products() {
        let model = build_model(2, 2, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![]);
        let sv = evolve_exact(&model, &state, 0.7).unwrap();
        let mut w = sv.probabilities();
        walsh_hadamard(&mut w);
        for mask in [0usize, 1, 5, 0b1011, 0b1111_0000] {
            assert_abs_diff_eq!(w[mask], sv.z_product(mask), epsilon = 1e-12);
        }
    }

    #[test]
    fn trotter_error_vanishes_at_time_zero() {
        let report =
            trotter_error_report(&[(2, 2)], &[0.0], &[4.0], &[Flux::Pi]).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.state_err_max, 0.0);
        assert_eq!(row.obs_err_max, 0.0);
    }

    #[test]
    fn second_order_error_scales_inverse_quadratically_in_step_count() {
        let model = build_model(2, 2, 4.0, Flux::Pi).unwrap();
        let state = neel(&model, vec![]);
        let t = 0.8;
        let exact = evolve_exact(&model, &state, t).unwrap();
        let errs: Vec<f64> = [1usize, 2, 4, 8]
            .iter()
            .map(|&n| {
                let ir =
                    build_trotter_circuit(&model, &state, &TrotterPlan::uniform(n, t)).unwrap();
                let approx = run_circuit(&ir, &vec![false; 8]).unwrap();
                let o = exact.overlap(&approx);
                2.0 * (1.0 - (o * o).min(1.0)).max(0.0).sqrt()
            })
            .collect();
        // Global log-log slope over the 1 -> 8 span.
        let slope = (errs[3] / errs[0]).ln() / (8f64 / 1f64).ln();
        assert!(
            (-2.35..=-1.65).contains(&slope),
            "expected second-order scaling, slope {slope}, errors {errs:?}"
        );
    }

    #[test]
    fn weak_coupling_observable_error_stays_below_ten_percent() {
        let times = [0.4, 0.8, 1.2];
        let report = trotter_error_report(
            &[(2, 2), (2, 3)],
            &times,
            &[0.0, 4.0],
            &[Flux::Zero, Flux::Pi],
        )
        .unwrap();
        for row in &report.rows {
            assert!(
                row.obs_err_mean < 0.1,
                "{}x{} t={} u={}: mean error {}",
                row.lx,
                row.ly,
                row.t,
                row.u,
                row.obs_err_mean
            );
        }
    }

    #[test]
    fn strong_coupling_error_grows_at_late_times() {
        let report = trotter_error_report(
            &[(2, 3)],
            &[1.2],
            &[4.0, 8.0],
            &[Flux::Zero],
        )
        .unwrap();
        let at = |u: f64| {
            report
                .rows
                .iter()
                .find(|r| r.u == u)
                .map(|r| r.obs_err_mean)
                .unwrap()
        };
        assert!(at(8.0) > 2.0 * at(4.0), "u=8 {} vs u=4 {}", at(8.0), at(4.0));
        assert!(at(8.0) < 0.5);
    }

    #[test]
    fn report_csv_has_a_row_per_combination() {
        let report =
            trotter_error_report(&[(2, 2)], &[0.0, 0.6], &[0.0, 8.0], &[Flux::Pi]).unwrap();
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 4);
        assert!(csv.lines().next().unwrap().starts_with("lx,ly,t,"));
    }
}
