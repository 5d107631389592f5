//! Fermionic linear optics at zero interaction.
//!
//! The hopping evolution is quadratic, so everything reduces to the
//! single-particle propagator `R = exp(-i h t)` on one spin sector (both
//! sectors share it). Slater-determinant initial states stay Gaussian and
//! get Wick-style correlators, exact determinant amplitudes and chain-rule
//! sampling. Singlet coverings are not Gaussian; their one- and two-body
//! correlators come from a per-unit case analysis over the product
//! structure, and amplitudes from a 2^n_singlets determinant expansion.

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::circuits::{build_fermi_circuit, CircuitError, FermiGate, TrotterPlan};
use crate::linalg::{det, expm_hermitian, unitarity_defect};
use crate::model::{Flux, InitialStateSpec, ModelSpec, SitePattern};
use crate::shots::{bits_to_string, ShotRecord, ShotTable};
use crate::statevec::shot_rng;
use crate::C64;

/// Determinant expansion cap; the largest covering in use (6x6) has 17
/// singlets, one below it.
pub const MAX_SINGLETS: usize = 18;

/// Largest sector dimension collision enumeration will walk.
pub const MAX_ENUMERATION: usize = 10_000_000;

#[derive(Debug, Error)]
pub enum FloError {
    #[error("exact sampling requires a Slater-determinant initial state")]
    SingletSampling,
    #[error("{0} singlets exceeds the determinant-expansion cap of {MAX_SINGLETS}")]
    TooManySinglets(usize),
    #[error("sector dimension {0} exceeds the enumeration cap of {MAX_ENUMERATION}")]
    EnumerationTooLarge(usize),
    #[error("sampling requires at least one shot")]
    ZeroShots,
    #[error("occupation list has {got} entries for {want} modes")]
    InputLength { want: usize, got: usize },
    #[error(transparent)]
    Circuit(#[from] CircuitError),
}

/// Single-particle propagator of one spin sector. Orientation: `r[(i, a)]`
/// is the amplitude for a particle created in mode `a` to be found in mode
/// `i` after the evolution, so densities are rows of squared moduli over the
/// initially occupied columns.
#[derive(Debug, Clone)]
pub struct Propagator {
    /// Site-basis matrix, identical for both spin sectors.
    pub r: DMatrix<C64>,
    pub t: f64,
    pub u: f64,
    pub flux: Flux,
    pub n_sites: usize,
}

#[derive(Debug, Clone)]
pub enum PropagatorMode {
    /// Exact `exp(-i h t)` of the hopping matrix.
    Continuous,
    /// Product of the single-particle rotations of every hop layer in the
    /// Trotterised circuit; interaction layers are ignored, so this equals
    /// the circuit action only at U = 0.
    Trotter(TrotterPlan),
}

pub fn propagator(
    model: &ModelSpec,
    t: f64,
    mode: PropagatorMode,
) -> Result<Propagator, FloError> {
    let l = model.lattice.n_sites();
    let r = match mode {
        PropagatorMode::Continuous => {
            let mut h = DMatrix::<C64>::zeros(l, l);
            for (e, &phi) in model.lattice.edges.iter().zip(&model.peierls) {
                let w = C64::new(-phi.cos(), 0.0);
                h[(e.a, e.b)] = w;
                h[(e.b, e.a)] = w;
            }
            expm_hermitian(&h, t)
        }
        PropagatorMode::Trotter(plan) => {
            debug_assert!((plan.total_time() - t).abs() < 1e-9);
            let fc = build_fermi_circuit(model, &plan)?;
            let mut r = DMatrix::<C64>::identity(l, l);
            for g in &fc.gates {
                if let FermiGate::Hop { a, b, theta, .. }
                | FermiGate::HopSwap { a, b, theta, .. } = *g
                {
                    if a < l {
                        rotate_rows(&mut r, a, b, theta);
                    }
                }
            }
            r
        }
    };
    debug_assert!(unitarity_defect(&r) < 1e-12);
    Ok(Propagator { r, t, u: model.u, flux: model.flux, n_sites: l })
}

/// Left-multiplies by exp(-i theta X) on the (a, b) row pair.
fn rotate_rows(r: &mut DMatrix<C64>, a: usize, b: usize, theta: f64) {
    let cos = C64::new(theta.cos(), 0.0);
    let misin = C64::new(0.0, -theta.sin());
    for c in 0..r.ncols() {
        let (x, y) = (r[(a, c)], r[(b, c)]);
        r[(a, c)] = cos * x + misin * y;
        r[(b, c)] = cos * y + misin * x;
    }
}

impl Propagator {
    pub fn n_modes(&self) -> usize {
        2 * self.n_sites
    }

    /// Mode-basis entry; the two sectors never mix.
    fn entry(&self, i: usize, a: usize) -> C64 {
        let l = self.n_sites;
        match (i < l, a < l) {
            (true, true) => self.r[(i, a)],
            (false, false) => self.r[(i - l, a - l)],
            _ => C64::new(0.0, 0.0),
        }
    }
}

/// Initial states the engine handles. Modes are site index for spin up and
/// site + L for spin down, matching the register layout elsewhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FLOInitial {
    Slater { up: Vec<usize>, down: Vec<usize> },
    /// Product of two-site singlets and independently occupied lonely
    /// sites, each singlet carrying an implicit 1/sqrt(2) pair of
    /// assignments.
    Covering { pairs: Vec<(usize, usize)>, lonely_up: Vec<usize>, lonely_down: Vec<usize> },
}

impl FLOInitial {
    pub fn from_state(state: &InitialStateSpec) -> Self {
        if state.is_product() {
            FLOInitial::Slater {
                up: state.up_modes().expect("product state"),
                down: state.down_modes().expect("product state"),
            }
        } else {
            let mut lonely_up = Vec::new();
            let mut lonely_down = Vec::new();
            for (s, p) in state.pattern.iter().enumerate() {
                match p {
                    SitePattern::Up => lonely_up.push(s),
                    SitePattern::Down => lonely_down.push(s),
                    _ => {}
                }
            }
            FLOInitial::Covering { pairs: state.singlet_pairs.clone(), lonely_up, lonely_down }
        }
    }

    pub fn n_singlets(&self) -> usize {
        match self {
            FLOInitial::Slater { .. } => 0,
            FLOInitial::Covering { pairs, .. } => pairs.len(),
        }
    }

    pub fn particle_numbers(&self) -> (usize, usize) {
        match self {
            FLOInitial::Slater { up, down } => (up.len(), down.len()),
            FLOInitial::Covering { pairs, lonely_up, lonely_down } => {
                (pairs.len() + lonely_up.len(), pairs.len() + lonely_down.len())
            }
        }
    }

    /// Initial occupation probability per mode.
    fn mode_density(&self, n_sites: usize) -> Vec<f64> {
        let mut p = vec![0.0; 2 * n_sites];
        match self {
            FLOInitial::Slater { up, down } => {
                for &s in up {
                    p[s] = 1.0;
                }
                for &s in down {
                    p[n_sites + s] = 1.0;
                }
            }
            FLOInitial::Covering { pairs, lonely_up, lonely_down } => {
                for &(a, b) in pairs {
                    for m in [a, b, n_sites + a, n_sites + b] {
                        p[m] = 0.5;
                    }
                }
                for &s in lonely_up {
                    p[s] = 1.0;
                }
                for &s in lonely_down {
                    p[n_sites + s] = 1.0;
                }
            }
        }
        p
    }

    /// Expansion into Slater terms: per-term (up modes, down modes, sign),
    /// modes ascending, every coefficient sign * (1/sqrt 2)^n_singlets. The
    /// sign is the fermionic reordering parity of the assignment relative to
    /// the product of singlet blocks; it varies between terms only for
    /// coverings whose pairs interleave in snake order.
    fn slater_terms(
        &self,
        n_sites: usize,
    ) -> Result<Vec<(Vec<usize>, Vec<usize>, f64)>, FloError> {
        match self {
            FLOInitial::Slater { up, down } => Ok(vec![(sorted(up), sorted(down), 1.0)]),
            FLOInitial::Covering { pairs, lonely_up, lonely_down } => {
                if pairs.len() > MAX_SINGLETS {
                    return Err(FloError::TooManySinglets(pairs.len()));
                }
                let mut terms = Vec::with_capacity(1 << pairs.len());
                for choice in 0..(1usize << pairs.len()) {
                    let mut up = lonely_up.clone();
                    let mut down = lonely_down.clone();
                    let mut seq =
                        Vec::with_capacity(2 * pairs.len() + lonely_up.len() + lonely_down.len());
                    for (k, &(a, b)) in pairs.iter().enumerate() {
                        if (choice >> k) & 1 == 0 {
                            up.push(a);
                            down.push(b);
                            seq.push(a);
                            seq.push(n_sites + b);
                        } else {
                            up.push(b);
                            down.push(a);
                            seq.push(b);
                            seq.push(n_sites + a);
                        }
                    }
                    seq.extend(sorted(lonely_up));
                    seq.extend(sorted(lonely_down).iter().map(|&m| n_sites + m));
                    let mut inversions = 0usize;
                    for i in 0..seq.len() {
                        for j in (i + 1)..seq.len() {
                            if seq[i] > seq[j] {
                                inversions += 1;
                            }
                        }
                    }
                    up.sort_unstable();
                    down.sort_unstable();
                    let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
                    terms.push((up, down, sign));
                }
                Ok(terms)
            }
        }
    }
}

fn sorted(v: &[usize]) -> Vec<usize> {
    let mut out = v.to_vec();
    out.sort_unstable();
    out
}

/// Mode densities `<n_i(t)>`. Cross terms of the expansion vanish for every
/// supported initial state (moving one particle leaves an orthogonal
/// configuration), leaving a weighted row sum of squared propagator entries.
pub fn densities(prop: &Propagator, initial: &FLOInitial) -> Vec<f64> {
    let n = prop.n_modes();
    let p = initial.mode_density(prop.n_sites);
    (0..n)
        .map(|i| (0..n).map(|a| p[a] * prop.entry(i, a).norm_sqr()).sum())
        .collect()
}

/// One-body correlation matrix `K[k][l] = <c+_k(t) c_l(t)>`.
pub fn one_body(prop: &Propagator, initial: &FLOInitial) -> DMatrix<C64> {
    let n = prop.n_modes();
    let p = initial.mode_density(prop.n_sites);
    DMatrix::from_fn(n, n, |k, l| {
        (0..n).map(|a| p[a] * prop.entry(k, a).conj() * prop.entry(l, a)).sum()
    })
}

/// Independent product units of a covering, for the correlator case split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitId {
    Singlet(usize),
    Lonely(usize),
    Empty,
}

struct CoveringStructure {
    /// Unit owning each mode.
    unit: Vec<UnitId>,
    /// Initial density per mode.
    p: Vec<f64>,
    /// Within each singlet: the four global modes, ascending.
    singlet_modes: Vec<[usize; 4]>,
}

impl CoveringStructure {
    fn new(initial: &FLOInitial, l: usize) -> Self {
        let p = initial.mode_density(l);
        let mut unit = vec![UnitId::Empty; 2 * l];
        let mut singlet_modes = Vec::new();
        match initial {
            FLOInitial::Slater { up, down } => {
                for &s in up {
                    unit[s] = UnitId::Lonely(s);
                }
                for &s in down {
                    unit[l + s] = UnitId::Lonely(s);
                }
            }
            FLOInitial::Covering { pairs, lonely_up, lonely_down } => {
                for (k, &(a, b)) in pairs.iter().enumerate() {
                    for m in [a, b, l + a, l + b] {
                        unit[m] = UnitId::Singlet(k);
                    }
                    singlet_modes.push([a, b, l + a, l + b]);
                }
                for &s in lonely_up {
                    unit[s] = UnitId::Lonely(s);
                }
                for &s in lonely_down {
                    unit[l + s] = UnitId::Lonely(s);
                }
            }
        }
        CoveringStructure { unit, p, singlet_modes }
    }

    /// `<n_a n_g>` over the initial state.
    fn pair_density(&self, a: usize, g: usize) -> f64 {
        if a == g {
            return self.p[a];
        }
        if let (UnitId::Singlet(x), UnitId::Singlet(y)) = (self.unit[a], self.unit[g]) {
            if x == y {
                let m = &self.singlet_modes[x];
                // Occupied mode sets are {m0, m3} and {m1, m2}, half each.
                let same_config = (a == m[0] || a == m[3]) == (g == m[0] || g == m[3]);
                return if same_config { 0.5 } else { 0.0 };
            }
        }
        self.p[a] * self.p[g]
    }
}

/// Sign table of `<c+_a c_b c+_g c_e>` on one singlet for the four-distinct
/// index case, computed in the unit's own four-mode Fock space.
fn singlet_four_mode_terms(modes: [usize; 4]) -> Vec<([usize; 4], f64)> {
    let amp = 1.0 / 2f64.sqrt();
    let mut psi = [0.0f64; 16];
    psi[0b1001] = amp;
    psi[0b0110] = amp;
    let create = |v: &mut [f64; 16], m: usize, out: &mut [f64; 16]| {
        out.fill(0.0);
        for (i, &x) in v.iter().enumerate() {
            if x != 0.0 && i & (1 << m) == 0 {
                let sgn = if (i & ((1 << m) - 1)).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                out[i | (1 << m)] += sgn * x;
            }
        }
    };
    let annihilate = |v: &mut [f64; 16], m: usize, out: &mut [f64; 16]| {
        out.fill(0.0);
        for (i, &x) in v.iter().enumerate() {
            if x != 0.0 && i & (1 << m) != 0 {
                let sgn = if (i & ((1 << m) - 1)).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                out[i & !(1 << m)] += sgn * x;
            }
        }
    };
    let mut terms = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            for g in 0..4 {
                for e in 0..4 {
                    if a == b || a == g || a == e || b == g || b == e || g == e {
                        continue;
                    }
                    let mut v = psi;
                    let mut w = [0.0; 16];
                    annihilate(&mut v, e, &mut w);
                    create(&mut w, g, &mut v);
                    annihilate(&mut v, b, &mut w);
                    create(&mut w, a, &mut v);
                    let val: f64 = psi.iter().zip(&v).map(|(x, y)| x * y).sum();
                    if val.abs() > 1e-15 {
                        terms.push(([modes[a], modes[b], modes[g], modes[e]], val));
                    }
                }
            }
        }
    }
    terms
}

/// All `<n_i n_j>` pairs. The expectation splits by how many distinct modes
/// the expansion term touches: diagonal pieces weighted by initial pair
/// densities, an exchange piece, and for singlets the four-distinct piece
/// confined to one unit. Slater inputs reduce to Wick's theorem (checked in
/// tests), but the same path serves both.
pub fn density_density(prop: &Propagator, initial: &FLOInitial) -> DMatrix<f64> {
    let n = prop.n_modes();
    let s = CoveringStructure::new(initial, prop.n_sites);
    let four: Vec<([usize; 4], f64)> = s
        .singlet_modes
        .iter()
        .flat_map(|&m| singlet_four_mode_terms(m))
        .collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut acc = C64::new(0.0, 0.0);
                    for a in 0..n {
                        let eia = prop.entry(i, a);
                        if eia.norm_sqr() == 0.0 {
                            continue;
                        }
                        for g in 0..n {
                            let ejg = prop.entry(j, g);
                            if ejg.norm_sqr() == 0.0 {
                                continue;
                            }
                            // alpha = beta, gamma = eta
                            acc += eia.norm_sqr() * ejg.norm_sqr() * s.pair_density(a, g);
                            // alpha = eta, beta = gamma, alpha != beta
                            if a != g {
                                let exch = s.p[a] - s.pair_density(a, g);
                                acc += eia.conj()
                                    * prop.entry(i, g)
                                    * ejg.conj()
                                    * prop.entry(j, a)
                                    * exch;
                            }
                        }
                    }
                    for &([a, b, g, e], val) in &four {
                        acc += prop.entry(i, a).conj()
                            * prop.entry(i, b)
                            * prop.entry(j, g).conj()
                            * prop.entry(j, e)
                            * val;
                    }
                    debug_assert!(acc.im.abs() < 1e-9);
                    acc.re
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// Pauli-Z one- and two-point functions derived from the densities.
#[derive(Debug, Clone)]
pub struct ZExpectations {
    pub z: Vec<f64>,
    pub zz: DMatrix<f64>,
}

pub fn z_expectations(prop: &Propagator, initial: &FLOInitial) -> ZExpectations {
    let dens = densities(prop, initial);
    let nn = density_density(prop, initial);
    let n = dens.len();
    let zz = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            1.0 - 2.0 * dens[i] - 2.0 * dens[j] + 4.0 * nn[(i, j)]
        }
    });
    ZExpectations { z: dens.iter().map(|d| 1.0 - 2.0 * d).collect(), zz }
}

/// Probability of observing occupation pattern `bits` (mode order, length
/// 2L): squared modulus of the determinant expansion over Slater terms.
pub fn amplitude(
    prop: &Propagator,
    initial: &FLOInitial,
    bits: &[bool],
) -> Result<f64, FloError> {
    let l = prop.n_sites;
    if bits.len() != 2 * l {
        return Err(FloError::InputLength { want: 2 * l, got: bits.len() });
    }
    if initial.n_singlets() > MAX_SINGLETS {
        return Err(FloError::TooManySinglets(initial.n_singlets()));
    }
    let z_up: Vec<usize> = (0..l).filter(|&m| bits[m]).collect();
    let z_down: Vec<usize> = (0..l).filter(|&m| bits[l + m]).collect();
    let (n_up, n_down) = initial.particle_numbers();
    if z_up.len() != n_up || z_down.len() != n_down {
        return Ok(0.0);
    }
    let terms = initial.slater_terms(l)?;
    let coeff = (1.0 / 2f64.sqrt()).powi(initial.n_singlets() as i32);
    let mut sum = C64::new(0.0, 0.0);
    for (up, down, sign) in &terms {
        sum += coeff * sign * sector_det(&prop.r, &z_up, up) * sector_det(&prop.r, &z_down, down);
    }
    Ok(sum.norm_sqr())
}

/// det of the propagator submatrix with rows at the observed modes and
/// columns at the initially occupied ones, both ascending.
fn sector_det(r: &DMatrix<C64>, rows: &[usize], cols: &[usize]) -> C64 {
    match rows.len() {
        0 => C64::new(1.0, 0.0),
        1 => r[(rows[0], cols[0])],
        w => det(&DMatrix::from_fn(w, w, |j, i| r[(rows[j], cols[i])])),
    }
}

/// Exact computational-basis samples from a Slater state via chain-rule
/// conditionals on the one-body correlations, one independent draw per spin
/// sector.
pub fn sample_flo(
    prop: &Propagator,
    initial: &FLOInitial,
    n_shots: usize,
    seed: u64,
) -> Result<ShotTable, FloError> {
    let (up, down) = match initial {
        FLOInitial::Slater { up, down } => (up, down),
        FLOInitial::Covering { .. } => return Err(FloError::SingletSampling),
    };
    if n_shots == 0 {
        return Err(FloError::ZeroShots);
    }
    let l = prop.n_sites;
    let kernel = |occ: &[usize]| {
        DMatrix::<C64>::from_fn(l, l, |k, m| {
            occ.iter().map(|&a| prop.r[(k, a)].conj() * prop.r[(m, a)]).sum()
        })
    };
    let k_up = kernel(up);
    let k_down = kernel(down);
    let records: Vec<ShotRecord> = (0..n_shots as u64)
        .into_par_iter()
        .map(|shot| {
            let mut rng = shot_rng(seed, shot);
            let mut bits = sample_sector(&k_up, &mut rng);
            bits.extend(sample_sector(&k_down, &mut rng));
            ShotRecord {
                bits: bits_to_string(&bits),
                t: prop.t,
                u: prop.u,
                flux: prop.flux,
                twirl_id: None,
                mask: None,
            }
        })
        .collect();
    Ok(ShotTable { records })
}

/// Walks the modes in order, sampling each occupation from the running
/// conditional kernel and folding the outcome back in as a rank-one update.
fn sample_sector(kernel: &DMatrix<C64>, rng: &mut impl rand::Rng) -> Vec<bool> {
    let l = kernel.nrows();
    let mut k = kernel.clone();
    let mut bits = vec![false; l];
    for m in 0..l {
        let p = k[(m, m)].re.clamp(0.0, 1.0);
        let occupied = rng.gen_bool(p);
        bits[m] = occupied;
        if m + 1 == l {
            break;
        }
        let denom = if occupied { k[(m, m)] } else { k[(m, m)] - C64::new(1.0, 0.0) };
        if denom.norm() < 1e-14 {
            continue;
        }
        for r in m + 1..l {
            for c in m + 1..l {
                let delta = k[(r, m)] * k[(m, c)] / denom;
                k[(r, c)] -= delta;
            }
        }
    }
    bits
}

#[derive(Debug, Clone, Copy)]
pub enum CollisionMethod {
    ExactEnumeration,
    MonteCarlo { n_shots: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy)]
pub struct CollisionEstimate {
    pub value: f64,
    /// Standard error of the Monte Carlo mean; absent for enumeration.
    pub std_err: Option<f64>,
    /// Sector dimension, the floor 1/D of the collision probability.
    pub sector_dim: usize,
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut out = 1usize;
    for i in 0..k {
        out = out * (n - i) / (i + 1);
    }
    out
}

fn sector_configs(l: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for c in 0..(1u32 << l) {
        if c.count_ones() as usize == k {
            out.push((0..l).filter(|&m| (c >> m) & 1 == 1).collect());
        }
    }
    out
}

/// Collision probability `C = sum_z p(z)^2` of the output distribution.
pub fn collision_probability(
    prop: &Propagator,
    initial: &FLOInitial,
    method: CollisionMethod,
) -> Result<CollisionEstimate, FloError> {
    let l = prop.n_sites;
    let (n_up, n_down) = initial.particle_numbers();
    let dim = binomial(l, n_up) * binomial(l, n_down);
    match method {
        CollisionMethod::ExactEnumeration => {
            if dim > MAX_ENUMERATION {
                return Err(FloError::EnumerationTooLarge(dim));
            }
            let value = match initial {
                FLOInitial::Slater { up, down } => {
                    // Sectors are independent, so the collision probability
                    // factorises.
                    let sector = |occ: &[usize], k: usize| -> f64 {
                        sector_configs(l, k)
                            .par_iter()
                            .map(|z| sector_det(&prop.r, z, &sorted(occ)).norm_sqr().powi(2))
                            .sum()
                    };
                    sector(up, n_up) * sector(down, n_down)
                }
                FLOInitial::Covering { .. } => {
                    let ups = sector_configs(l, n_up);
                    let downs = sector_configs(l, n_down);
                    ups.par_iter()
                        .map(|zu| {
                            let mut acc = 0.0;
                            let mut bits = vec![false; 2 * l];
                            for &m in zu {
                                bits[m] = true;
                            }
                            for zd in &downs {
                                let mut bits = bits.clone();
                                for &m in zd {
                                    bits[l + m] = true;
                                }
                                let p = amplitude(prop, initial, &bits).expect("checked sizes");
                                acc += p * p;
                            }
                            acc
                        })
                        .sum()
                }
            };
            Ok(CollisionEstimate { value, std_err: None, sector_dim: dim })
        }
        CollisionMethod::MonteCarlo { n_shots, seed } => {
            let table = sample_flo(prop, initial, n_shots, seed)?;
            let ps: Vec<f64> = table
                .records
                .par_iter()
                .map(|rec| {
                    let bits: Vec<bool> = rec.bits.chars().map(|c| c == '1').collect();
                    amplitude(prop, initial, &bits).expect("sampled widths are valid")
                })
                .collect();
            let mean = ps.iter().sum::<f64>() / ps.len() as f64;
            let var = ps.iter().map(|p| (p - mean).powi(2)).sum::<f64>()
                / (ps.len().saturating_sub(1)).max(1) as f64;
            Ok(CollisionEstimate {
                value: mean,
                std_err: Some((var / ps.len() as f64).sqrt()),
                sector_dim: dim,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::build_trotter_circuit;
    use crate::model::{build_initial_state, build_model, StateKind, StateParams};
    use crate::statevec::{evolve_exact, run_circuit, StateVector};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_site_prop(t: f64) -> Propagator {
        let mut h = DMatrix::<C64>::zeros(2, 2);
        h[(0, 1)] = C64::new(-1.0, 0.0);
        h[(1, 0)] = C64::new(-1.0, 0.0);
        Propagator { r: expm_hermitian(&h, t), t, u: 0.0, flux: Flux::Zero, n_sites: 2 }
    }

    fn neel_state(model: &ModelSpec, holes: Vec<(usize, usize)>) -> InitialStateSpec {
        build_initial_state(model, StateKind::NeelWithHoles, &StateParams::NeelWithHoles { holes })
            .unwrap()
    }

    fn covering_state(model: &ModelSpec, pairs: Option<Vec<((usize, usize), (usize, usize))>>) -> InitialStateSpec {
        build_initial_state(
            model,
            StateKind::SingletCoveringWithHoles,
            &StateParams::SingletCoveringWithHoles { holes: vec![], pairs },
        )
        .unwrap()
    }

    /// Densities read straight off a dense register state.
    fn state_densities(sv: &StateVector) -> Vec<f64> {
        (0..sv.n_qubits).map(|q| (1.0 - sv.z_product(1 << q)) / 2.0).collect()
    }

    fn state_pair_density(sv: &StateVector, i: usize, j: usize) -> f64 {
        let mask = (1usize << i) | (1usize << j);
        sv.amps
            .iter()
            .enumerate()
            .filter(|(idx, _)| idx & mask == mask)
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    #[test]
    fn zero_time_continuous_propagator_is_identity() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        assert!((prop.r.clone() - DMatrix::<C64>::identity(6, 6)).norm() < 1e-14);
    }

    #[test]
    fn both_modes_are_unitary_at_late_times() {
        let model = build_model(3, 3, 0.0, Flux::Pi).unwrap();
        for mode in [
            PropagatorMode::Continuous,
            PropagatorMode::Trotter(TrotterPlan::uniform(3, 1.2)),
        ] {
            let prop = propagator(&model, 1.2, mode).unwrap();
            assert!(unitarity_defect(&prop.r) < 1e-12);
        }
    }

    #[test]
    fn two_site_density_oscillates_as_cosine_squared() {
        for t in [0.0, 0.4, 1.1] {
            let prop = two_site_prop(t);
            let dens = densities(&prop, &FLOInitial::Slater { up: vec![0], down: vec![] });
            assert_abs_diff_eq!(dens[0], t.cos().powi(2), epsilon = 1e-12);
            assert_abs_diff_eq!(dens[1], t.sin().powi(2), epsilon = 1e-12);
        }
    }

    #[test]
    fn densities_at_zero_time_reproduce_the_occupations() {
        let model = build_model(2, 3, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![(1, 1)]);
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let dens = densities(&prop, &initial);
        let p = initial.mode_density(6);
        for (d, want) in dens.iter().zip(&p) {
            assert_abs_diff_eq!(d, want, epsilon = 1e-14);
        }
    }

    #[test]
    fn particle_number_is_conserved_on_neel_three_by_three() {
        let model = build_model(3, 3, 0.0, Flux::Pi).unwrap();
        let initial = FLOInitial::from_state(&neel_state(&model, vec![]));
        for t in [0.3, 0.9, 1.2] {
            let prop = propagator(&model, t, PropagatorMode::Continuous).unwrap();
            let dens = densities(&prop, &initial);
            assert!(dens.iter().all(|&d| (-1e-12..=1.0 + 1e-12).contains(&d)));
            assert_abs_diff_eq!(dens.iter().sum::<f64>(), 9.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn trotter_mode_densities_match_the_circuit_on_two_by_three() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = neel_state(&model, vec![(0, 1)]);
        let plan = TrotterPlan::uniform(3, 1.2);
        let ir = build_trotter_circuit(&model, &state, &plan).unwrap();
        let sv = run_circuit(&ir, &vec![false; 12]).unwrap();
        let prop = propagator(&model, 1.2, PropagatorMode::Trotter(plan)).unwrap();
        let dens = densities(&prop, &FLOInitial::from_state(&state));
        for (d, want) in dens.iter().zip(state_densities(&sv)) {
            assert_abs_diff_eq!(d, &want, epsilon = 1e-10);
        }
    }

    #[test]
    fn trotter_mode_densities_match_the_circuit_on_two_by_two() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![]);
        let plan = TrotterPlan::uniform(2, 0.8);
        let ir = build_trotter_circuit(&model, &state, &plan).unwrap();
        let sv = run_circuit(&ir, &vec![false; 8]).unwrap();
        let prop = propagator(&model, 0.8, PropagatorMode::Trotter(plan)).unwrap();
        let dens = densities(&prop, &FLOInitial::from_state(&state));
        for (d, want) in dens.iter().zip(state_densities(&sv)) {
            assert_abs_diff_eq!(d, &want, epsilon = 1e-10);
        }
    }

    #[test]
    fn continuous_densities_match_exact_evolution() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = neel_state(&model, vec![(1, 2)]);
        let sv = evolve_exact(&model, &state, 0.9).unwrap();
        let prop = propagator(&model, 0.9, PropagatorMode::Continuous).unwrap();
        let dens = densities(&prop, &FLOInitial::from_state(&state));
        for (d, want) in dens.iter().zip(state_densities(&sv)) {
            assert_abs_diff_eq!(d, &want, epsilon = 1e-10);
        }
    }

    #[test]
    fn product_pair_densities_factorise_at_zero_time() {
        let model = build_model(2, 3, 0.0, Flux::Zero).unwrap();
        let initial = FLOInitial::from_state(&neel_state(&model, vec![(0, 0)]));
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let dens = densities(&prop, &initial);
        let nn = density_density(&prop, &initial);
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { dens[i] } else { dens[i] * dens[j] };
                assert_abs_diff_eq!(nn[(i, j)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_singlet_pair_densities_at_zero_time() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let initial = FLOInitial::Covering {
            pairs: vec![(0, 1)],
            lonely_up: vec![],
            lonely_down: vec![],
        };
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let nn = density_density(&prop, &initial);
        let l = 4;
        assert_abs_diff_eq!(nn[(0, l + 1)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nn[(1, l)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(nn[(0, l)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nn[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn singlet_correlators_match_the_state_vector() {
        let model = build_model(2, 2, 0.0, Flux::Pi).unwrap();
        let state = covering_state(&model, None);
        let sv = evolve_exact(&model, &state, 0.7).unwrap();
        let prop = propagator(&model, 0.7, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let dens = densities(&prop, &initial);
        let nn = density_density(&prop, &initial);
        for i in 0..8 {
            assert_abs_diff_eq!(dens[i], (1.0 - sv.z_product(1 << i)) / 2.0, epsilon = 1e-10);
            for j in 0..8 {
                assert_abs_diff_eq!(nn[(i, j)], state_pair_density(&sv, i, j), epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn z_expectations_match_the_state_vector_on_two_by_three() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = covering_state(&model, None);
        let plan = TrotterPlan::uniform(3, 1.2);
        let ir = build_trotter_circuit(&model, &state, &plan).unwrap();
        let sv = run_circuit(&ir, &vec![false; 12]).unwrap();
        let prop = propagator(&model, 1.2, PropagatorMode::Trotter(plan)).unwrap();
        let ze = z_expectations(&prop, &FLOInitial::from_state(&state));
        for i in 0..12 {
            assert_abs_diff_eq!(ze.z[i], sv.z_product(1 << i), epsilon = 1e-10);
            for j in 0..12 {
                if i != j {
                    let want = sv.z_product((1 << i) | (1 << j));
                    assert_abs_diff_eq!(ze.zz[(i, j)], want, epsilon = 1e-10);
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        /// Wick's theorem as an independent route for Slater inputs.
        #[test]
        fn wick_consistency_for_slater_states(
            seed in 0u64..1000,
            t in 0.0f64..1.5,
            pi_flux in proptest::bool::ANY,
        ) {
            use rand::{Rng as _, SeedableRng as _};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let flux = if pi_flux { Flux::Pi } else { Flux::Zero };
            let model = build_model(2, 3, 0.0, flux).unwrap();
            let up: Vec<usize> = (0..6).filter(|_| rng.gen_bool(0.5)).collect();
            let down: Vec<usize> = (0..6).filter(|_| rng.gen_bool(0.5)).collect();
            let initial = FLOInitial::Slater { up, down };
            let prop = propagator(&model, t, PropagatorMode::Continuous).unwrap();
            let nn = density_density(&prop, &initial);
            let dens = densities(&prop, &initial);
            let k = one_body(&prop, &initial);
            for i in 0..12 {
                for j in 0..12 {
                    let wick = dens[i] * dens[j] - k[(i, j)].norm_sqr()
                        + if i == j { dens[i] } else { 0.0 };
                    prop_assert!((nn[(i, j)] - wick).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn amplitude_is_one_for_the_initial_slater_pattern() {
        let model = build_model(2, 3, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![(1, 0)]);
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let mut bits = vec![false; 12];
        for m in state.up_modes().unwrap() {
            bits[m] = true;
        }
        for m in state.down_modes().unwrap() {
            bits[6 + m] = true;
        }
        assert_abs_diff_eq!(amplitude(&prop, &initial, &bits).unwrap(), 1.0, epsilon = 1e-12);
        let mut wrong = bits.clone();
        wrong[0] = !wrong[0];
        assert_eq!(amplitude(&prop, &initial, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn amplitudes_sum_to_one_over_the_sector() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = neel_state(&model, vec![(0, 1)]);
        let prop = propagator(&model, 0.9, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let (n_up, n_down) = initial.particle_numbers();
        let mut total = 0.0;
        for zu in sector_configs(6, n_up) {
            for zd in sector_configs(6, n_down) {
                let mut bits = vec![false; 12];
                for &m in &zu {
                    bits[m] = true;
                }
                for &m in &zd {
                    bits[6 + m] = true;
                }
                total += amplitude(&prop, &initial, &bits).unwrap();
            }
        }
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn singlet_amplitudes_match_the_state_vector() {
        let model = build_model(2, 2, 0.0, Flux::Pi).unwrap();
        let state = covering_state(&model, None);
        let sv = evolve_exact(&model, &state, 0.7).unwrap();
        let prop = propagator(&model, 0.7, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        for idx in 0..256usize {
            let bits: Vec<bool> = (0..8).map(|q| (idx >> q) & 1 == 1).collect();
            let want = sv.amps[idx].norm_sqr();
            let got = amplitude(&prop, &initial, &bits).unwrap();
            assert!((got - want).abs() < 1e-10, "pattern {idx}: {got} vs {want}");
        }
    }

    #[test]
    fn interleaved_covering_amplitudes_match_the_state_vector() {
        // Pairs (0,5)/(3,8) and (1,4)/(3,8) interleave in snake order, so
        // the assignment signs differ between expansion terms and a uniform
        // sign convention would get the interference wrong.
        let model = build_model(3, 3, 0.0, Flux::Pi).unwrap();
        let pairs = vec![
            ((0, 0), (0, 1)),
            ((1, 0), (1, 1)),
            ((2, 1), (2, 2)),
            ((0, 2), (1, 2)),
        ];
        let state = build_initial_state(
            &model,
            StateKind::SingletCoveringWithHoles,
            &StateParams::SingletCoveringWithHoles { holes: vec![(2, 0)], pairs: Some(pairs) },
        )
        .unwrap();
        assert_eq!(state.singlet_pairs, vec![(0, 5), (1, 4), (3, 8), (6, 7)]);
        let sv = evolve_exact(&model, &state, 0.6).unwrap();
        let prop = propagator(&model, 0.6, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        for zu in sector_configs(9, 4) {
            for zd in sector_configs(9, 4) {
                let mut bits = vec![false; 18];
                let mut idx = 0usize;
                for &m in &zu {
                    bits[m] = true;
                    idx |= 1 << m;
                }
                for &m in &zd {
                    bits[9 + m] = true;
                    idx |= 1 << (9 + m);
                }
                let got = amplitude(&prop, &initial, &bits).unwrap();
                worst = worst.max((got - sv.amps[idx].norm_sqr()).abs());
                total += got;
            }
        }
        assert!(worst < 1e-10, "largest probability mismatch {worst}");
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8);
        let dens = densities(&prop, &initial);
        let nn = density_density(&prop, &initial);
        for i in 0..18 {
            assert_abs_diff_eq!(dens[i], (1.0 - sv.z_product(1 << i)) / 2.0, epsilon = 1e-10);
            for j in 0..18 {
                if i != j {
                    assert_abs_diff_eq!(
                        nn[(i, j)],
                        state_pair_density(&sv, i, j),
                        epsilon = 1e-10
                    );
                }
            }
        }
    }

    #[test]
    fn oversized_coverings_are_rejected() {
        let pairs: Vec<(usize, usize)> = (0..19).map(|k| (2 * k, 2 * k + 1)).collect();
        let initial =
            FLOInitial::Covering { pairs, lonely_up: vec![], lonely_down: vec![] };
        let prop = two_site_prop(0.0);
        let bits = vec![false; 4];
        assert!(matches!(
            amplitude(&prop, &initial, &bits),
            Err(FloError::TooManySinglets(19))
        ));
    }

    #[test]
    fn sampling_a_frozen_state_returns_the_occupations() {
        let model = build_model(2, 3, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![(1, 1)]);
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let table = sample_flo(&prop, &initial, 50, 3).unwrap();
        let mut want = vec![false; 12];
        for m in state.up_modes().unwrap() {
            want[m] = true;
        }
        for m in state.down_modes().unwrap() {
            want[6 + m] = true;
        }
        let want = bits_to_string(&want);
        for rec in &table.records {
            assert_eq!(rec.bits, want);
        }
    }

    #[test]
    fn sampling_rejects_singlet_initial_states() {
        let prop = two_site_prop(0.3);
        let initial =
            FLOInitial::Covering { pairs: vec![(0, 1)], lonely_up: vec![], lonely_down: vec![] };
        assert!(matches!(sample_flo(&prop, &initial, 5, 0), Err(FloError::SingletSampling)));
    }

    #[test]
    fn sampled_marginals_match_the_densities() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = neel_state(&model, vec![(0, 0)]);
        let prop = propagator(&model, 0.8, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let dens = densities(&prop, &initial);
        let n = 10_000;
        let table = sample_flo(&prop, &initial, n, 11).unwrap();
        for (q, &d) in dens.iter().enumerate() {
            let freq =
                table.records.iter().filter(|r| r.bit(q)).count() as f64 / n as f64;
            let sigma = (d * (1.0 - d) / n as f64).sqrt().max(1e-4);
            assert!(
                (freq - d).abs() < 5.0 * sigma,
                "mode {q}: frequency {freq} vs density {d}"
            );
        }
    }

    #[test]
    fn sampled_pair_frequencies_match_the_correlators() {
        let model = build_model(2, 2, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![]);
        let prop = propagator(&model, 0.6, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let nn = density_density(&prop, &initial);
        let n = 10_000;
        let table = sample_flo(&prop, &initial, n, 23).unwrap();
        for i in 0..8 {
            for j in (i + 1)..8 {
                let freq = table
                    .records
                    .iter()
                    .filter(|r| r.bit(i) && r.bit(j))
                    .count() as f64
                    / n as f64;
                let want = nn[(i, j)];
                let sigma = (want * (1.0 - want) / n as f64).sqrt().max(1e-4);
                assert!(
                    (freq - want).abs() < 5.0 * sigma,
                    "pair ({i},{j}): {freq} vs {want}"
                );
            }
        }
    }

    #[test]
    fn collision_probability_is_one_at_zero_time() {
        let model = build_model(2, 3, 0.0, Flux::Zero).unwrap();
        let state = neel_state(&model, vec![(1, 0)]);
        let prop = propagator(&model, 0.0, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let c = collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
            .unwrap();
        assert_abs_diff_eq!(c.value, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn monte_carlo_collision_agrees_with_enumeration() {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = neel_state(&model, vec![(0, 1)]);
        let prop = propagator(&model, 1.0, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let exact = collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
            .unwrap();
        let mc = collision_probability(
            &prop,
            &initial,
            CollisionMethod::MonteCarlo { n_shots: 4000, seed: 7 },
        )
        .unwrap();
        let err = mc.std_err.unwrap();
        assert!(
            (mc.value - exact.value).abs() < 3.0 * err,
            "mc {} +- {err} vs exact {}",
            mc.value,
            exact.value
        );
        assert!(exact.value >= 1.0 / exact.sector_dim as f64 - 1e-12);
        assert!(exact.value <= 1.0 + 1e-12);
    }

    #[test]
    fn singlet_collision_enumeration_stays_normalised() {
        let model = build_model(2, 2, 0.0, Flux::Pi).unwrap();
        let state = covering_state(&model, None);
        let prop = propagator(&model, 0.5, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        let c = collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
            .unwrap();
        assert!(c.value > 1.0 / c.sector_dim as f64 - 1e-12 && c.value <= 1.0 + 1e-12);
    }

    #[test]
    fn uniform_distribution_collides_at_the_sector_floor() {
        // Identity on the accumulation: a flat distribution over D outcomes
        // has collision probability exactly 1/D.
        let d = 300usize;
        let c: f64 = (0..d).map(|_| (1.0 / d as f64).powi(2)).sum();
        assert_abs_diff_eq!(c, 1.0 / d as f64, epsilon = 1e-15);
    }
}
