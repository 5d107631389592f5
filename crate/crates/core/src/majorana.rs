//! Heisenberg-picture propagation of fermionic observables.
//!
//! Observables are tracked as polynomials in Majorana operators, keyed by
//! packed label sets. Hopping and swap gates act as single-particle
//! rotations and relabelings that keep the Majorana weight fixed; the
//! onsite gate branches a monomial into up to four. Polynomials are
//! truncated after every gate by weight and coefficient magnitude, which
//! keeps the term count bounded at the price of a recorded ℓ² norm loss.
//!
//! Label convention: mode `m` owns labels `2m` and `2m + 1`, with
//! `n_m = (1 - i g_{2m} g_{2m+1}) / 2`. Modes are site index for spin up
//! and site + L for spin down, as everywhere else.

use rayon::prelude::*;
use thiserror::Error;

use crate::circuits::{FermiCircuit, FermiGate};
use crate::model::{Flux, InitialStateSpec, SitePattern};
use crate::C64;

/// Packed-bitset capacity: four words hold 256 labels, 128 modes.
pub const MAX_PACKED_LABELS: usize = 256;
const WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum MajoranaError {
    #[error("mode {0} outside the register of {1} modes")]
    ModeOutOfRange(usize, usize),
    #[error("{0} Majorana labels exceed the packed capacity of {MAX_PACKED_LABELS}")]
    TooManyLabels(usize),
    #[error("weight threshold {0} must be even to close over particle-conserving observables")]
    OddWeightThreshold(usize),
    #[error("coefficient threshold {0} must be finite and non-negative")]
    BadCoeffThreshold(f64),
    #[error("polynomial is over {got} modes but the register has {want}")]
    RegisterMismatch { want: usize, got: usize },
}

/// Product of Majorana operators, stored as the sorted label set plus the
/// implicit ascending ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial([u64; WORDS]);

impl Monomial {
    pub const IDENTITY: Monomial = Monomial([0; WORDS]);

    pub fn contains(&self, label: usize) -> bool {
        self.0[label / 64] >> (label % 64) & 1 == 1
    }

    pub fn weight(&self) -> usize {
        self.0.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.weight());
        for (w, &word) in self.0.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                out.push(64 * w + bits.trailing_zeros() as usize);
                bits &= bits - 1;
            }
        }
        out
    }

    /// Right-multiplies by one Majorana operator: the label toggles in or
    /// out and the sign is the parity of the labels it moves past, namely
    /// everything currently above it.
    pub fn mul_label(&self, label: usize) -> (Monomial, f64) {
        let word = label / 64;
        let mut above = (self.0[word] & !((1u64 << (label % 64)) | ((1u64 << (label % 64)) - 1)))
            .count_ones();
        for w in (word + 1)..WORDS {
            above += self.0[w].count_ones();
        }
        let mut out = *self;
        out.0[word] ^= 1u64 << (label % 64);
        (out, if above % 2 == 0 { 1.0 } else { -1.0 })
    }

    fn mul_pair(&self, p: usize, q: usize) -> (Monomial, f64) {
        let (m1, s1) = self.mul_label(p);
        let (m2, s2) = m1.mul_label(q);
        (m2, s1 * s2)
    }
}

/// Weight and coefficient thresholds applied after every gate.
#[derive(Debug, Clone, Copy)]
pub struct TruncationSpec {
    pub max_weight: usize,
    pub min_coeff: f64,
}

impl Default for TruncationSpec {
    fn default() -> Self {
        TruncationSpec { max_weight: 10, min_coeff: 3e-5 }
    }
}

impl TruncationSpec {
    /// Thresholds that never discard anything.
    pub fn none() -> Self {
        TruncationSpec { max_weight: MAX_PACKED_LABELS, min_coeff: 0.0 }
    }

    pub fn validate(&self) -> Result<(), MajoranaError> {
        if self.max_weight % 2 != 0 {
            return Err(MajoranaError::OddWeightThreshold(self.max_weight));
        }
        if !self.min_coeff.is_finite() || self.min_coeff < 0.0 {
            return Err(MajoranaError::BadCoeffThreshold(self.min_coeff));
        }
        Ok(())
    }
}

/// Operator expansion over Majorana monomials, kept sorted by key.
#[derive(Debug, Clone)]
pub struct MajoranaPolynomial {
    terms: Vec<(Monomial, C64)>,
    pub n_modes: usize,
    /// ℓ² norm at construction time.
    pub initial_norm: f64,
    /// Squared-coefficient mass dropped by truncation so far.
    pub discarded_mass: f64,
}

impl MajoranaPolynomial {
    pub fn new(n_modes: usize) -> Result<Self, MajoranaError> {
        if 2 * n_modes > MAX_PACKED_LABELS {
            return Err(MajoranaError::TooManyLabels(2 * n_modes));
        }
        Ok(MajoranaPolynomial { terms: Vec::new(), n_modes, initial_norm: 0.0, discarded_mass: 0.0 })
    }

    /// Builds from (label sequence, coefficient) products. Labels may appear
    /// in any order and repeat; each sequence is reduced to its canonical
    /// sorted monomial with the anticommutation sign folded in.
    pub fn from_terms(
        n_modes: usize,
        products: &[(Vec<usize>, C64)],
    ) -> Result<Self, MajoranaError> {
        let mut poly = Self::new(n_modes)?;
        let mut raw = Vec::with_capacity(products.len());
        for (labels, coeff) in products {
            let mut mono = Monomial::IDENTITY;
            let mut sign = 1.0;
            for &l in labels {
                if l >= 2 * n_modes {
                    return Err(MajoranaError::ModeOutOfRange(l / 2, n_modes));
                }
                let (next, s) = mono.mul_label(l);
                mono = next;
                sign *= s;
            }
            raw.push((mono, coeff * sign));
        }
        poly.merge_branches(raw);
        poly.initial_norm = poly.l2_norm();
        Ok(poly)
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &C64)> {
        self.terms.iter().map(|(m, c)| (m, c))
    }

    pub fn coeff(&self, mono: &Monomial) -> C64 {
        match self.terms.binary_search_by(|(m, _)| m.cmp(mono)) {
            Ok(i) => self.terms[i].1,
            Err(_) => C64::new(0.0, 0.0),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.terms.iter().map(|(_, c)| c.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn norm_loss(&self) -> f64 {
        if self.initial_norm == 0.0 {
            return 0.0;
        }
        (1.0 - self.l2_norm() / self.initial_norm).max(0.0)
    }

    /// ℓ² mass per Majorana weight, indexed by weight.
    pub fn weight_mass(&self) -> Vec<f64> {
        let top = self.terms.iter().map(|(m, _)| m.weight()).max().unwrap_or(0);
        let mut mass = vec![0.0; top + 1];
        for (m, c) in &self.terms {
            mass[m.weight()] += c.norm_sqr();
        }
        mass
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, c) in &mut self.terms {
            *c *= factor;
        }
        self.initial_norm = self.l2_norm();
    }

    pub fn add_scaled(&mut self, other: &Self, factor: f64) {
        let branches: Vec<(Monomial, C64)> =
            other.terms.iter().map(|&(m, c)| (m, c * factor)).collect();
        self.merge_branches(branches);
        self.initial_norm = self.l2_norm();
    }

    /// Folds new (monomial, coefficient) contributions into the sorted term
    /// list, combining duplicates and dropping exact zeros.
    fn merge_branches(&mut self, mut branches: Vec<(Monomial, C64)>) {
        if branches.is_empty() {
            return;
        }
        branches.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        let old = std::mem::take(&mut self.terms);
        let mut out = Vec::with_capacity(old.len() + branches.len());
        let (mut i, mut j) = (0, 0);
        while i < old.len() || j < branches.len() {
            let take_old = j >= branches.len() || (i < old.len() && old[i].0 <= branches[j].0);
            let key = if take_old { old[i].0 } else { branches[j].0 };
            let mut acc = C64::new(0.0, 0.0);
            while i < old.len() && old[i].0 == key {
                acc += old[i].1;
                i += 1;
            }
            while j < branches.len() && branches[j].0 == key {
                acc += branches[j].1;
                j += 1;
            }
            if acc.norm_sqr() > 0.0 {
                out.push((key, acc));
            }
        }
        self.terms = out;
    }

    fn truncate(&mut self, trunc: &TruncationSpec) {
        let mut dropped = 0.0;
        self.terms.retain(|(m, c)| {
            if m.weight() > trunc.max_weight || c.norm() < trunc.min_coeff {
                dropped += c.norm_sqr();
                false
            } else {
                true
            }
        });
        self.discarded_mass += dropped;
    }

    /// Conjugation by exp(angle/2 g_p g_q): monomials holding exactly one of
    /// the two labels pick up a rotated partner, everything else commutes.
    fn apply_plane_rotation(&mut self, p: usize, q: usize, angle: f64) {
        let (sin, cos) = angle.sin_cos();
        if sin == 0.0 {
            if cos < 0.0 {
                // Half-turn: touched monomials only flip sign.
                for (m, c) in &mut self.terms {
                    if m.contains(p) != m.contains(q) {
                        *c = -*c;
                    }
                }
            }
            return;
        }
        let mut branches = Vec::new();
        for (m, c) in &mut self.terms {
            if m.contains(p) != m.contains(q) {
                let (partner, sign) = m.mul_pair(p, q);
                branches.push((partner, *c * (sin * sign)));
                *c *= cos;
            }
        }
        self.merge_branches(branches);
    }

    /// Conjugation by exp(-i theta (c+_a c_b + c+_b c_a)): two commuting
    /// plane rotations on the interleaved label pairs.
    fn apply_hop(&mut self, a: usize, b: usize, theta: f64) {
        self.apply_plane_rotation(2 * a + 1, 2 * b, theta);
        self.apply_plane_rotation(2 * a, 2 * b + 1, -theta);
    }

    /// Conjugation by the fermionic swap: labels of the two modes trade
    /// places and each monomial re-sorts with its permutation parity.
    fn apply_fswap(&mut self, a: usize, b: usize) {
        let rename = |l: usize| -> usize {
            if l == 2 * a {
                2 * b
            } else if l == 2 * a + 1 {
                2 * b + 1
            } else if l == 2 * b {
                2 * a
            } else if l == 2 * b + 1 {
                2 * a + 1
            } else {
                l
            }
        };
        for (m, c) in &mut self.terms {
            if !(m.contains(2 * a)
                || m.contains(2 * a + 1)
                || m.contains(2 * b)
                || m.contains(2 * b + 1))
            {
                continue;
            }
            let mut mono = Monomial::IDENTITY;
            let mut sign = 1.0;
            for l in m.labels() {
                let (next, s) = mono.mul_label(rename(l));
                mono = next;
                sign *= s;
            }
            *m = mono;
            *c *= sign;
        }
        self.terms.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    }

    /// Conjugation by exp(-i phi n_a n_b). With A and B the Z operators of
    /// the two modes, a monomial anticommuting with one of them branches
    /// into {M, MA, MB, MAB}; anticommuting with both into {M, MA, MB, MAB}
    /// with the double-flip weights. Everything commuting passes through.
    fn apply_onsite(&mut self, a: usize, b: usize, phi: f64) {
        let (sin, cos) = phi.sin_cos();
        if sin == 0.0 && cos == 1.0 {
            return;
        }
        let keep = C64::new((1.0 + cos) / 2.0, 0.0);
        let attach = C64::new((1.0 - cos) / 2.0, 0.0);
        let rotate = C64::new(0.0, sin / 2.0);
        let (a0, a1) = (2 * a, 2 * a + 1);
        let (b0, b1) = (2 * b, 2 * b + 1);
        let mut branches = Vec::new();
        for (m, c) in &mut self.terms {
            let anti_a = m.contains(a0) != m.contains(a1);
            let anti_b = m.contains(b0) != m.contains(b1);
            if !anti_a && !anti_b {
                continue;
            }
            let c0 = *c;
            *c = c0 * keep;
            let (ma, sa) = m.mul_pair(a0, a1);
            let fa = C64::new(0.0, sa);
            let (mb, sb) = m.mul_pair(b0, b1);
            let fb = C64::new(0.0, sb);
            let (mab, sab) = ma.mul_pair(b0, b1);
            let fab = C64::new(0.0, sa) * C64::new(0.0, sab);
            if anti_a && anti_b {
                branches.push((ma, c0 * rotate * fa));
                branches.push((mb, c0 * rotate * fb));
                branches.push((mab, c0 * -attach * fab));
            } else if anti_a {
                branches.push((mb, c0 * attach * fb));
                branches.push((ma, c0 * rotate * fa));
                branches.push((mab, c0 * -rotate * fab));
            } else {
                branches.push((ma, c0 * attach * fa));
                branches.push((mb, c0 * rotate * fb));
                branches.push((mab, c0 * -rotate * fab));
            }
        }
        self.merge_branches(branches);
    }
}

/// Gates of the fermionic circuit language, in Heisenberg conjugation form.
#[derive(Debug, Clone, Copy)]
pub enum MpGate {
    /// exp(-i theta (c+_a c_b + c+_b c_a)).
    Hop { a: usize, b: usize, theta: f64 },
    /// Fermionic swap of the two modes.
    Fswap { a: usize, b: usize },
    /// Hop followed by the swap of its own modes; conjugation composes the
    /// two factors in reverse.
    Merged { a: usize, b: usize, theta: f64 },
    /// exp(-i phi n_a n_b).
    Onsite { a: usize, b: usize, phi: f64 },
}

/// One Heisenberg conjugation step followed by truncation.
pub fn heisenberg_step(
    gate: &MpGate,
    poly: &MajoranaPolynomial,
    trunc: &TruncationSpec,
) -> MajoranaPolynomial {
    let mut out = poly.clone();
    match *gate {
        MpGate::Hop { a, b, theta } => out.apply_hop(a, b, theta),
        MpGate::Fswap { a, b } => out.apply_fswap(a, b),
        MpGate::Merged { a, b, theta } => {
            out.apply_fswap(a, b);
            out.apply_hop(a, b, theta);
        }
        MpGate::Onsite { a, b, phi } => out.apply_onsite(a, b, phi),
    }
    out.truncate(trunc);
    out
}

/// Observables the encoder understands: sums are assembled from these via
/// [`MajoranaPolynomial::add_scaled`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Observable {
    Identity,
    /// Pauli Z of one mode.
    Z(usize),
    /// Product of Pauli Z over the listed modes.
    ZString(Vec<usize>),
    /// Occupation of one mode.
    Number(usize),
    /// Occupation product n_j n_k.
    NumberPair(usize, usize),
}

/// Exact Majorana expansion of a Z-string or occupation observable.
pub fn encode_observable(
    obs: &Observable,
    n_modes: usize,
) -> Result<MajoranaPolynomial, MajoranaError> {
    let check = |m: usize| {
        if m >= n_modes {
            Err(MajoranaError::ModeOutOfRange(m, n_modes))
        } else {
            Ok(())
        }
    };
    let one = C64::new(1.0, 0.0);
    let i = C64::new(0.0, 1.0);
    match obs {
        Observable::Identity => MajoranaPolynomial::from_terms(n_modes, &[(vec![], one)]),
        Observable::Z(m) => {
            check(*m)?;
            MajoranaPolynomial::from_terms(n_modes, &[(vec![2 * m, 2 * m + 1], i)])
        }
        Observable::ZString(modes) => {
            let mut labels = Vec::with_capacity(2 * modes.len());
            for &m in modes {
                check(m)?;
                labels.push(2 * m);
                labels.push(2 * m + 1);
            }
            let coeff = i.powu(modes.len() as u32);
            MajoranaPolynomial::from_terms(n_modes, &[(labels, coeff)])
        }
        Observable::Number(m) => {
            check(*m)?;
            MajoranaPolynomial::from_terms(
                n_modes,
                &[(vec![], 0.5 * one), (vec![2 * m, 2 * m + 1], -0.5 * i)],
            )
        }
        Observable::NumberPair(j, k) => {
            check(*j)?;
            check(*k)?;
            if j == k {
                return encode_observable(&Observable::Number(*j), n_modes);
            }
            let (ja, jb) = (2 * j, 2 * j + 1);
            let (ka, kb) = (2 * k, 2 * k + 1);
            MajoranaPolynomial::from_terms(
                n_modes,
                &[
                    (vec![], 0.25 * one),
                    (vec![ja, jb], -0.25 * i),
                    (vec![ka, kb], -0.25 * i),
                    (vec![ja, jb, ka, kb], -0.25 * one),
                ],
            )
        }
    }
}

/// Which independent factor of the initial state a mode belongs to.
#[derive(Debug, Clone, Copy)]
enum ModeUnit {
    Empty,
    Occupied,
    /// Member of a two-site singlet block, at the given position in the
    /// block's ascending mode order.
    Singlet { slot: u8 },
}

/// Evaluates monomial expectations against a product of occupied modes,
/// empty modes and two-site singlet blocks. A monomial splits into per-unit
/// blocks with the parity sign of the regrouping; odd blocks vanish on the
/// fixed-parity unit states and even blocks evaluate locally.
struct InitialEval {
    units: Vec<ModeUnit>,
    rank: Vec<u32>,
}

const SINGLET_DIM: usize = 16;

impl InitialEval {
    fn new(state: &InitialStateSpec) -> Self {
        let l = state.pattern.len();
        let mut units = vec![ModeUnit::Empty; 2 * l];
        let mut rank: Vec<u32> = (0..2 * l as u32).collect();
        for (s, p) in state.pattern.iter().enumerate() {
            match p {
                SitePattern::Up => units[s] = ModeUnit::Occupied,
                SitePattern::Down => units[l + s] = ModeUnit::Occupied,
                _ => {}
            }
        }
        for &(a, b) in &state.singlet_pairs {
            for (slot, m) in [a, b, l + a, l + b].into_iter().enumerate() {
                units[m] = ModeUnit::Singlet { slot: slot as u8 };
                rank[m] = a as u32;
            }
        }
        InitialEval { units, rank }
    }

    fn expectation(&self, poly: &MajoranaPolynomial) -> C64 {
        poly.terms.iter().map(|(m, c)| c * self.term_value(m)).sum()
    }

    fn term_value(&self, mono: &Monomial) -> C64 {
        let labels = mono.labels();
        let mut sign = 1.0f64;
        // Group labels by unit, counting the inversions the stable regroup
        // moves them through.
        let mut groups: Vec<(u32, Vec<usize>)> = Vec::new();
        for &l in &labels {
            let r = self.rank[l / 2];
            for g in &groups {
                if g.0 > r && g.1.len() % 2 == 1 {
                    sign = -sign;
                }
            }
            match groups.iter_mut().find(|g| g.0 == r) {
                Some(g) => g.1.push(l),
                None => groups.push((r, vec![l])),
            }
        }
        let mut value = C64::new(sign, 0.0);
        for (_, block) in &groups {
            let unit = self.units[block[0] / 2];
            let factor = match unit {
                ModeUnit::Empty | ModeUnit::Occupied => {
                    if block.len() != 2 {
                        return C64::new(0.0, 0.0);
                    }
                    let occupied = matches!(unit, ModeUnit::Occupied);
                    C64::new(0.0, if occupied { 1.0 } else { -1.0 })
                }
                ModeUnit::Singlet { .. } => self.singlet_block(block),
            };
            if factor.norm_sqr() == 0.0 {
                return C64::new(0.0, 0.0);
            }
            value *= factor;
        }
        value
    }

    /// Expectation of a label block confined to one singlet unit, computed
    /// in the unit's own four-mode Fock space.
    fn singlet_block(&self, block: &[usize]) -> C64 {
        if block.len() % 2 == 1 {
            return C64::new(0.0, 0.0);
        }
        let amp = 1.0 / 2f64.sqrt();
        let mut state = [C64::new(0.0, 0.0); SINGLET_DIM];
        state[0b1001] = C64::new(amp, 0.0);
        state[0b0110] = C64::new(amp, 0.0);
        let mut vec = state;
        let mut next = [C64::new(0.0, 0.0); SINGLET_DIM];
        for &label in block.iter().rev() {
            let slot = match self.units[label / 2] {
                ModeUnit::Singlet { slot } => slot as usize,
                _ => unreachable!("block spans one unit"),
            };
            let local = 2 * slot + (label & 1);
            let m = local / 2;
            next.fill(C64::new(0.0, 0.0));
            for (idx, &x) in vec.iter().enumerate() {
                if x.norm_sqr() == 0.0 {
                    continue;
                }
                let jw = if (idx & ((1 << m) - 1)).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
                let factor = if local % 2 == 0 {
                    C64::new(jw, 0.0)
                } else if idx >> m & 1 == 1 {
                    C64::new(0.0, jw)
                } else {
                    C64::new(0.0, -jw)
                };
                next[idx ^ (1 << m)] += factor * x;
            }
            std::mem::swap(&mut vec, &mut next);
        }
        state.iter().zip(&vec).map(|(s, v)| s.conj() * v).sum()
    }
}

/// Result of one Heisenberg propagation: the expectation against the
/// initial state, the ℓ² norm lost to truncation, and the final expansion
/// shape.
#[derive(Debug, Clone)]
pub struct MpRun {
    pub expectation: f64,
    pub norm_loss: f64,
    pub n_monomials: usize,
    /// ℓ² mass of the final polynomial per Majorana weight.
    pub weight_mass: Vec<f64>,
}

/// Propagates `observable` backwards through `circuit` with per-gate
/// truncation and evaluates it against the initial state. Swap bookkeeping
/// gates are identities in the fixed mode labeling and the merged gate
/// contributes its hop factor only.
pub fn run_mp(
    circuit: &FermiCircuit,
    observable: &MajoranaPolynomial,
    state: &InitialStateSpec,
    trunc: &TruncationSpec,
) -> Result<MpRun, MajoranaError> {
    trunc.validate()?;
    let l = circuit.n_sites;
    if 4 * l > MAX_PACKED_LABELS {
        return Err(MajoranaError::TooManyLabels(4 * l));
    }
    if observable.n_modes != 2 * l || state.pattern.len() != l {
        return Err(MajoranaError::RegisterMismatch { want: 2 * l, got: observable.n_modes });
    }
    let mut poly = observable.clone();
    poly.initial_norm = poly.l2_norm();
    poly.discarded_mass = 0.0;
    for gate in circuit.gates.iter().rev() {
        match *gate {
            FermiGate::Hop { a, b, theta, .. } | FermiGate::HopSwap { a, b, theta, .. } => {
                poly.apply_hop(a, b, theta);
            }
            FermiGate::Swap { .. } => continue,
            FermiGate::Onsite { site, phi } => poly.apply_onsite(site, l + site, phi),
        }
        poly.truncate(trunc);
    }
    let value = InitialEval::new(state).expectation(&poly);
    debug_assert!(value.im.abs() < 1e-7 * value.re.abs().max(1.0));
    Ok(MpRun {
        expectation: value.re,
        norm_loss: poly.norm_loss(),
        n_monomials: poly.n_terms(),
        weight_mass: poly.weight_mass(),
    })
}

/// Propagates several observables through the same circuit, one rayon task
/// each; a single propagation stays single-threaded.
pub fn run_mp_batch(
    circuit: &FermiCircuit,
    observables: &[MajoranaPolynomial],
    state: &InitialStateSpec,
    trunc: &TruncationSpec,
) -> Result<Vec<MpRun>, MajoranaError> {
    observables.par_iter().map(|obs| run_mp(circuit, obs, state, trunc)).collect()
}

/// One point of a propagated time series.
#[derive(Debug, Clone)]
pub struct MpSeriesRow {
    pub t: f64,
    pub u: f64,
    pub flux: Flux,
    pub observable: String,
    pub value: f64,
    pub norm_loss: f64,
    pub n_monomials: usize,
}

pub fn mp_series_csv(rows: &[MpSeriesRow]) -> String {
    let mut out = String::from("t,u,flux,observable,value,norm_loss,n_monomials\n");
    for r in rows {
        let flux = match r.flux {
            Flux::Zero => "zero",
            Flux::Pi => "pi",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.t, r.u, flux, r.observable, r.value, r.norm_loss, r.n_monomials
        ));
    }
    out
}
