//! Physics estimators over shot tables and Pauli-Z expectation tables.
//!
//! Everything downstream of the simulators and the mitigation pipeline
//! lands here: site classification of bitstrings, spin and charge
//! observables, stripe diagnostics, percolation, string correlators
//! between charge carriers, participation ratios, pair distances, and
//! magnetisation distributions.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::flo::ZExpectations;
use crate::model::{Flux, InitialStateSpec, LatticeSpec, SitePattern};
use crate::shots::{ShotError, ShotTable};
use crate::statevec::StateVector;

#[derive(Debug, Error)]
pub enum ObservablesError {
    #[error("expected {want} values, got {got}")]
    WidthMismatch { want: usize, got: usize },
    #[error("estimator needs an initial state with exactly one hole, found {0}")]
    NotASingleHole(usize),
    #[error("estimator needs a single-column holon stripe initial state")]
    NotAStripe,
    #[error("no shots satisfy the estimator's requirements")]
    NoAcceptedShots,
    #[error("marginal over {0} sites exceeds the statistical limit of 8")]
    RegionTooLarge(usize),
    #[error("bad marginal region: site {0} repeated or out of range")]
    BadRegion(usize),
    #[error("distance {m} outside the reachable range 1..={max}")]
    DistanceOutOfRange { m: usize, max: usize },
    #[error("need at least {want} shots, got {got}")]
    TooFewShots { want: usize, got: usize },
    #[error("denominator vanishes")]
    ZeroDenominator,
    #[error("coupling {0} must be positive here")]
    BadCoupling(f64),
    #[error("rescaled time grids do not overlap")]
    InsufficientOverlap,
    #[error("results csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Shots(#[from] ShotError),
}

// ---------------------------------------------------------------------------
// Site classification.

/// Local Fock content of one site in one shot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteClass {
    Holon,
    Up,
    Down,
    Doublon,
}

impl SiteClass {
    pub fn from_bits(up: bool, down: bool) -> Self {
        match (up, down) {
            (false, false) => SiteClass::Holon,
            (true, false) => SiteClass::Up,
            (false, true) => SiteClass::Down,
            (true, true) => SiteClass::Doublon,
        }
    }

    /// z spin of the site: +1 for a lone up, -1 for a lone down, 0 for the
    /// spinless holon and doublon.
    pub fn sz(self) -> i32 {
        match self {
            SiteClass::Up => 1,
            SiteClass::Down => -1,
            SiteClass::Holon | SiteClass::Doublon => 0,
        }
    }

    /// Symbol in the four-letter occupation alphabet.
    fn fock_symbol(self) -> usize {
        match self {
            SiteClass::Holon => 0,
            SiteClass::Up => 1,
            SiteClass::Down => 2,
            SiteClass::Doublon => 3,
        }
    }

    /// Symbol after merging the two singly occupied states.
    fn charge_symbol(self) -> usize {
        match self {
            SiteClass::Holon => 0,
            SiteClass::Up | SiteClass::Down => 1,
            SiteClass::Doublon => 2,
        }
    }

    /// Symbol after merging the two spinless states.
    fn spin_symbol(self) -> usize {
        match self {
            SiteClass::Holon | SiteClass::Doublon => 0,
            SiteClass::Up => 1,
            SiteClass::Down => 2,
        }
    }
}

/// Per-site classification of a decoded shot. `bits` holds the up sector in
/// the first `n_sites` entries and the down sector after it.
pub fn classify_shot(bits: &[bool], n_sites: usize) -> Vec<SiteClass> {
    debug_assert_eq!(bits.len(), 2 * n_sites);
    (0..n_sites)
        .map(|s| SiteClass::from_bits(bits[s], bits[n_sites + s]))
        .collect()
}

pub fn count_class(classes: &[SiteClass], class: SiteClass) -> usize {
    classes.iter().filter(|&&c| c == class).count()
}

/// Staggered magnetisation of one classified shot; the hole-free
/// checkerboard with up spins on the even sublattice scores +1.
pub fn shot_staggered_magnetisation(classes: &[SiteClass], lattice: &LatticeSpec) -> f64 {
    let total: i32 = classes
        .iter()
        .enumerate()
        .map(|(s, c)| {
            let (x, y) = lattice.coords(s);
            if (x + y) % 2 == 0 {
                c.sz()
            } else {
                -c.sz()
            }
        })
        .sum();
    f64::from(total) / classes.len() as f64
}

/// Antiferromagnetic order of one classified shot: the mean of
/// `sz_i * sz_j` over the nearest-neighbour pairs where both sites carry a
/// spin. A perfect checkerboard scores -1; `None` when no pair qualifies.
pub fn afm_order(classes: &[SiteClass], lattice: &LatticeSpec) -> Option<f64> {
    let mut total = 0i32;
    let mut active = 0u32;
    for e in &lattice.edges {
        let p = classes[e.a].sz() * classes[e.b].sz();
        if p != 0 {
            total += p;
            active += 1;
        }
    }
    (active > 0).then(|| f64::from(total) / f64::from(active))
}

// ---------------------------------------------------------------------------
// Expectation tables.

/// Single- and two-mode Pauli-Z expectation values over the full register,
/// the common input format for the expectation-based estimators. Mode `s`
/// is the up sector of site `s`, mode `n_sites + s` the down sector.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectationTable {
    pub z: Vec<f64>,
    pub zz: DMatrix<f64>,
}

impl ExpectationTable {
    pub fn n_modes(&self) -> usize {
        self.z.len()
    }

    pub fn n_sites(&self) -> usize {
        self.z.len() / 2
    }

    fn check(&self) -> Result<(), ObservablesError> {
        let n = self.z.len();
        if n % 2 != 0 || self.zz.nrows() != n || self.zz.ncols() != n {
            return Err(ObservablesError::WidthMismatch { want: n, got: self.zz.nrows() });
        }
        Ok(())
    }

    /// Exact table from a dense state.
    pub fn from_statevector(sv: &StateVector) -> Self {
        let n = sv.n_qubits;
        let z: Vec<f64> = (0..n).map(|m| sv.z_product(1 << m)).collect();
        let zz = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else {
                sv.z_product((1 << i) | (1 << j))
            }
        });
        ExpectationTable { z, zz }
    }

    /// Empirical table of sample means.
    pub fn from_shots(table: &ShotTable) -> Result<Self, ObservablesError> {
        let rows = table.bit_rows()?;
        if rows.is_empty() {
            return Err(ObservablesError::TooFewShots { want: 1, got: 0 });
        }
        let n = rows[0].len();
        let mut z = vec![0.0; n];
        let mut zz = DMatrix::zeros(n, n);
        for bits in &rows {
            let signs: Vec<f64> = bits.iter().map(|&b| if b { -1.0 } else { 1.0 }).collect();
            for i in 0..n {
                z[i] += signs[i];
                for j in (i + 1)..n {
                    zz[(i, j)] += signs[i] * signs[j];
                }
            }
        }
        let count = rows.len() as f64;
        for v in &mut z {
            *v /= count;
        }
        for i in 0..n {
            zz[(i, i)] = 1.0;
            for j in (i + 1)..n {
                zz[(i, j)] /= count;
                zz[(j, i)] = zz[(i, j)];
            }
        }
        Ok(ExpectationTable { z, zz })
    }

    pub fn occupation(&self, mode: usize) -> f64 {
        (1.0 - self.z[mode]) / 2.0
    }

    /// Joint occupation of two distinct modes.
    pub fn pair_occupation(&self, m: usize, n: usize) -> f64 {
        (1.0 - self.z[m] - self.z[n] + self.zz[(m, n)]) / 4.0
    }

    /// Probability that the site holds neither spin.
    pub fn holon_density(&self, site: usize) -> f64 {
        let l = self.n_sites();
        (1.0 + self.z[site] + self.z[l + site] + self.zz[(site, l + site)]) / 4.0
    }

    /// Probability that the site holds both spins.
    pub fn doublon_density_site(&self, site: usize) -> f64 {
        let l = self.n_sites();
        self.pair_occupation(site, l + site)
    }

    /// Spin along z at one site: occupation difference of the two sectors.
    pub fn local_spin_site(&self, site: usize) -> f64 {
        let l = self.n_sites();
        (self.z[l + site] - self.z[site]) / 2.0
    }

    /// Two-site spin correlator; the diagonal reduces to the expectation
    /// of the squared on-site spin.
    pub fn spin_corr(&self, i: usize, j: usize) -> f64 {
        let l = self.n_sites();
        if i == j {
            return self.occupation(i) + self.occupation(l + i)
                - 2.0 * self.pair_occupation(i, l + i);
        }
        (self.zz[(l + i, l + j)] - self.zz[(l + i, j)] - self.zz[(i, l + j)]
            + self.zz[(i, j)])
            / 4.0
    }
}

impl From<&ZExpectations> for ExpectationTable {
    fn from(zx: &ZExpectations) -> Self {
        ExpectationTable { z: zx.z.clone(), zz: zx.zz.clone() }
    }
}

// ---------------------------------------------------------------------------
// Spin maps and the global suite.

/// Per-site z spin from an expectation table.
pub fn local_spin(table: &ExpectationTable) -> Vec<f64> {
    (0..table.n_sites()).map(|s| table.local_spin_site(s)).collect()
}

/// Spin correlators on the lattice edges, in edge order.
pub fn nn_spin_corr(
    table: &ExpectationTable,
    lattice: &LatticeSpec,
) -> Result<Vec<f64>, ObservablesError> {
    table.check()?;
    if table.n_sites() != lattice.n_sites() {
        return Err(ObservablesError::WidthMismatch {
            want: 2 * lattice.n_sites(),
            got: table.n_modes(),
        });
    }
    Ok(lattice.edges.iter().map(|e| table.spin_corr(e.a, e.b)).collect())
}

fn stagger_sign(lattice: &LatticeSpec, site: usize) -> f64 {
    let (x, y) = lattice.coords(site);
    if (x + y) % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// The site of the unique hole of the initial state, the reference point
/// for spread observables.
pub fn single_hole_site(state: &InitialStateSpec) -> Result<usize, ObservablesError> {
    let holes: Vec<usize> = state
        .pattern
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p, SitePattern::Hole))
        .map(|(s, _)| s)
        .collect();
    if holes.len() == 1 {
        Ok(holes[0])
    } else {
        Err(ObservablesError::NotASingleHole(holes.len()))
    }
}

/// Root-mean-squared spread of the holon density about a reference site,
/// with Euclidean site distances.
pub fn holon_rms(table: &ExpectationTable, lattice: &LatticeSpec, reference: usize) -> f64 {
    let (x0, y0) = lattice.coords(reference);
    let total: f64 = (0..lattice.n_sites())
        .map(|s| {
            let (x, y) = lattice.coords(s);
            let dx = x as f64 - x0 as f64;
            let dy = y as f64 - y0 as f64;
            (dx * dx + dy * dy) * table.holon_density(s)
        })
        .sum();
    total.max(0.0).sqrt()
}

/// Lattice-wide observables shared by every initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSuite {
    /// Mean doublon density over sites.
    pub doublon_density: f64,
    /// Holon spread about the single initial hole; absent when the state
    /// does not define one.
    pub holon_rms: Option<f64>,
    pub staggered_magnetisation: f64,
    /// Staggered two-point spin correlations averaged over all site pairs.
    pub staggered_spin_spin: f64,
    /// Per-site holon density minus its lattice mean.
    pub holon_deviation: Vec<f64>,
}

pub fn global_suite(
    table: &ExpectationTable,
    lattice: &LatticeSpec,
    initial: &InitialStateSpec,
) -> Result<GlobalSuite, ObservablesError> {
    table.check()?;
    let l = lattice.n_sites();
    if table.n_sites() != l {
        return Err(ObservablesError::WidthMismatch { want: 2 * l, got: table.n_modes() });
    }
    let lf = l as f64;
    let doublon_density =
        (0..l).map(|s| table.doublon_density_site(s)).sum::<f64>() / lf;
    let staggered_magnetisation = (0..l)
        .map(|s| stagger_sign(lattice, s) * table.local_spin_site(s))
        .sum::<f64>()
        / lf;
    let mut staggered_spin_spin = 0.0;
    for i in 0..l {
        for j in 0..l {
            staggered_spin_spin +=
                stagger_sign(lattice, i) * stagger_sign(lattice, j) * table.spin_corr(i, j);
        }
    }
    staggered_spin_spin /= lf * lf;
    let holons: Vec<f64> = (0..l).map(|s| table.holon_density(s)).collect();
    let mean_holon = holons.iter().sum::<f64>() / lf;
    let holon_deviation = holons.iter().map(|h| h - mean_holon).collect();
    let holon_rms =
        single_hole_site(initial).ok().map(|site| holon_rms(table, lattice, site));
    Ok(GlobalSuite {
        doublon_density,
        holon_rms,
        staggered_magnetisation,
        staggered_spin_spin,
        holon_deviation,
    })
}

// ---------------------------------------------------------------------------
// Stripe diagnostics.

/// Locates the all-hole column of a stripe initial state and checks that
/// no hole sits outside it.
pub fn stripe_column(
    state: &InitialStateSpec,
    lattice: &LatticeSpec,
) -> Result<usize, ObservablesError> {
    let mut column = None;
    for (s, p) in state.pattern.iter().enumerate() {
        if matches!(p, SitePattern::Hole) {
            let (x, _) = lattice.coords(s);
            match column {
                None => column = Some(x),
                Some(c) if c != x => return Err(ObservablesError::NotAStripe),
                Some(_) => {}
            }
        }
    }
    let x0 = column.ok_or(ObservablesError::NotAStripe)?;
    let full = (0..lattice.ly)
        .all(|y| matches!(state.pattern[lattice.site_index(x0, y)], SitePattern::Hole));
    if full {
        Ok(x0)
    } else {
        Err(ObservablesError::NotAStripe)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripeSuite {
    /// Root-mean-squared holon spread perpendicular to the stripe.
    pub stripe_rms: f64,
    /// Staggered magnetisation signed by the side of the stripe, so the
    /// bipartition flip across the initial stripe counts coherently.
    pub stripe_staggered_magnetisation: f64,
}

pub fn stripe_suite(
    table: &ExpectationTable,
    lattice: &LatticeSpec,
    x0: usize,
) -> Result<StripeSuite, ObservablesError> {
    table.check()?;
    let l = lattice.n_sites();
    if table.n_sites() != l {
        return Err(ObservablesError::WidthMismatch { want: 2 * l, got: table.n_modes() });
    }
    let mut spread = 0.0;
    let mut stag = 0.0;
    for s in 0..l {
        let (x, _) = lattice.coords(s);
        let d = x as f64 - x0 as f64;
        // Sites on the stripe column itself carry no side and drop out of
        // the staggered sum; f64::signum would give them weight 1.
        let side = if x == x0 { 0.0 } else { d.signum() };
        spread += d * d * table.holon_density(s);
        stag += stagger_sign(lattice, s) * side * table.local_spin_site(s);
    }
    Ok(StripeSuite {
        stripe_rms: spread.max(0.0).sqrt(),
        stripe_staggered_magnetisation: stag / l as f64,
    })
}

// ---------------------------------------------------------------------------
// Percolation.

/// Direction in which a holon path must cross the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Y,
}

/// Whether an 8-connected chain of holons links the two boundaries that
/// the axis runs between.
pub fn percolates(classes: &[SiteClass], lattice: &LatticeSpec, axis: Axis) -> bool {
    let (lx, ly) = (lattice.lx, lattice.ly);
    let holon = |x: usize, y: usize| classes[lattice.site_index(x, y)] == SiteClass::Holon;
    let mut seen = vec![false; classes.len()];
    let mut frontier = Vec::new();
    for k in 0..match axis {
        Axis::X => ly,
        Axis::Y => lx,
    } {
        let (x, y) = match axis {
            Axis::X => (0, k),
            Axis::Y => (k, 0),
        };
        if holon(x, y) {
            let s = lattice.site_index(x, y);
            seen[s] = true;
            frontier.push((x, y));
        }
    }
    while let Some((x, y)) = frontier.pop() {
        let reached = match axis {
            Axis::X => x == lx - 1,
            Axis::Y => y == ly - 1,
        };
        if reached {
            return true;
        }
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                if nx < 0 || ny < 0 || nx >= lx as i64 || ny >= ly as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let s = lattice.site_index(nx, ny);
                if !seen[s] && holon(nx, ny) {
                    seen[s] = true;
                    frontier.push((nx, ny));
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PercolationReport {
    pub fraction: f64,
    /// Wilson score interval at one standard deviation.
    pub ci: (f64, f64),
    pub n_shots: usize,
    pub n_percolating: usize,
}

/// Wilson score interval for a binomial fraction.
fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / (1.0 + z2 / n);
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Fraction of shots whose holons percolate along the axis. Filters such
/// as doublon or antiferromagnetic windows are applied to the table before
/// this call.
pub fn percolation_fraction(
    table: &ShotTable,
    lattice: &LatticeSpec,
    axis: Axis,
) -> Result<PercolationReport, ObservablesError> {
    let rows = table.bit_rows()?;
    if rows.is_empty() {
        return Err(ObservablesError::NoAcceptedShots);
    }
    let l = lattice.n_sites();
    let mut n_percolating = 0;
    for bits in &rows {
        if bits.len() != 2 * l {
            return Err(ObservablesError::WidthMismatch { want: 2 * l, got: bits.len() });
        }
        if percolates(&classify_shot(bits, l), lattice, axis) {
            n_percolating += 1;
        }
    }
    let n_shots = rows.len();
    Ok(PercolationReport {
        fraction: n_percolating as f64 / n_shots as f64,
        ci: wilson_interval(n_percolating, n_shots, 1.0),
        n_shots,
        n_percolating,
    })
}

// ---------------------------------------------------------------------------
// String correlators between charge carriers.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChargonKind {
    Holon,
    Doublon,
}

impl ChargonKind {
    fn class(self) -> SiteClass {
        match self {
            ChargonKind::Holon => SiteClass::Holon,
            ChargonKind::Doublon => SiteClass::Doublon,
        }
    }
}

/// Configuration of the path-averaged spin correlator between two charge
/// carriers at fixed Manhattan distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WilsonConfig {
    pub kinds: (ChargonKind, ChargonKind),
    /// Manhattan distance between the carrier pair.
    pub distance: usize,
    /// Divide per-shot sums by the number of site pairs at this distance
    /// instead of the number of detected carrier pairs.
    pub geometric_normalisation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilsonValue {
    pub value: f64,
    pub n_contributing_shots: usize,
    pub n_pairs_total: usize,
}

/// Number of monotone lattice paths spanning a displacement of `dx` by
/// `dy` steps.
pub fn monotone_path_count(dx: usize, dy: usize) -> u64 {
    // binomial(dx + dy, dx) by the multiplicative rule.
    let mut c = 1u64;
    for k in 0..dx.min(dy) {
        c = c * (dx + dy - k) as u64 / (k + 1) as u64;
    }
    c
}

/// All orderings of unit steps reaching the signed displacement.
fn monotone_step_sequences(dx: i64, dy: i64) -> Vec<Vec<(i64, i64)>> {
    let (ax, ay) = (dx.unsigned_abs() as usize, dy.unsigned_abs() as usize);
    let (sx, sy) = (dx.signum(), dy.signum());
    let mut out = Vec::with_capacity(monotone_path_count(ax, ay) as usize);
    let mut steps = Vec::with_capacity(ax + ay);
    fn rec(
        rx: usize,
        ry: usize,
        sx: i64,
        sy: i64,
        steps: &mut Vec<(i64, i64)>,
        out: &mut Vec<Vec<(i64, i64)>>,
    ) {
        if rx == 0 && ry == 0 {
            out.push(steps.clone());
            return;
        }
        if rx > 0 {
            steps.push((sx, 0));
            rec(rx - 1, ry, sx, sy, steps, out);
            steps.pop();
        }
        if ry > 0 {
            steps.push((0, sy));
            rec(rx, ry - 1, sx, sy, steps, out);
            steps.pop();
        }
    }
    rec(ax, ay, sx, sy, &mut steps, &mut out);
    out
}

/// Mean over all monotone shortest paths between two sites of the summed
/// link correlator `sz * sz` along the path, endpoints included.
fn path_averaged_links(
    sz: &[i32],
    lattice: &LatticeSpec,
    from: (usize, usize),
    to: (usize, usize),
    memo: &mut HashMap<(i64, i64), Vec<Vec<(i64, i64)>>>,
) -> f64 {
    let dx = to.0 as i64 - from.0 as i64;
    let dy = to.1 as i64 - from.1 as i64;
    let sequences =
        memo.entry((dx, dy)).or_insert_with(|| monotone_step_sequences(dx, dy));
    let mut total = 0.0;
    for seq in sequences.iter() {
        let (mut x, mut y) = (from.0 as i64, from.1 as i64);
        let mut prev = sz[lattice.site_index(x as usize, y as usize)];
        let mut path_sum = 0i32;
        for &(ex, ey) in seq {
            x += ex;
            y += ey;
            let cur = sz[lattice.site_index(x as usize, y as usize)];
            path_sum += prev * cur;
            prev = cur;
        }
        total += f64::from(path_sum);
    }
    total / sequences.len() as f64
}

/// Path-averaged spin correlations between carrier pairs at the configured
/// Manhattan distance, averaged within each shot and then over the shots
/// that contain at least one such pair.
pub fn wilson_lines(
    table: &ShotTable,
    lattice: &LatticeSpec,
    config: &WilsonConfig,
) -> Result<WilsonValue, ObservablesError> {
    let max = lattice.lx + lattice.ly - 2;
    if config.distance == 0 || config.distance > max {
        return Err(ObservablesError::DistanceOutOfRange { m: config.distance, max });
    }
    let rows = table.bit_rows()?;
    let l = lattice.n_sites();
    let same_kind = config.kinds.0 == config.kinds.1;
    let manhattan = |a: usize, b: usize| {
        let (xa, ya) = lattice.coords(a);
        let (xb, yb) = lattice.coords(b);
        xa.abs_diff(xb) + ya.abs_diff(yb)
    };
    // Occupancy-independent pair count for the geometric normalisation:
    // unordered site pairs at the right distance, doubled when the two
    // carrier roles are distinguishable.
    let mut geometric_pairs = 0usize;
    for a in 0..l {
        for b in (a + 1)..l {
            if manhattan(a, b) == config.distance {
                geometric_pairs += if same_kind { 1 } else { 2 };
            }
        }
    }
    if config.geometric_normalisation && geometric_pairs == 0 {
        return Err(ObservablesError::DistanceOutOfRange { m: config.distance, max });
    }

    let mut memo = HashMap::new();
    let mut total = 0.0;
    let mut n_contributing_shots = 0;
    let mut n_pairs_total = 0;
    for bits in &rows {
        if bits.len() != 2 * l {
            return Err(ObservablesError::WidthMismatch { want: 2 * l, got: bits.len() });
        }
        let classes = classify_shot(bits, l);
        let sz: Vec<i32> = classes.iter().map(|c| c.sz()).collect();
        let first: Vec<usize> = (0..l)
            .filter(|&s| classes[s] == config.kinds.0.class())
            .collect();
        let second: Vec<usize> = (0..l)
            .filter(|&s| classes[s] == config.kinds.1.class())
            .collect();
        let mut shot_sum = 0.0;
        let mut detected = 0usize;
        let mut handle = |a: usize, b: usize| {
            if manhattan(a, b) == config.distance {
                shot_sum += path_averaged_links(
                    &sz,
                    lattice,
                    lattice.coords(a),
                    lattice.coords(b),
                    &mut memo,
                );
                detected += 1;
            }
        };
        if same_kind {
            for (k, &a) in first.iter().enumerate() {
                for &b in &first[k + 1..] {
                    handle(a, b);
                }
            }
        } else {
            for &a in &first {
                for &b in &second {
                    handle(a, b);
                }
            }
        }
        if detected > 0 {
            let denom = if config.geometric_normalisation {
                geometric_pairs as f64
            } else {
                detected as f64
            };
            total += shot_sum / denom;
            n_contributing_shots += 1;
            n_pairs_total += detected;
        }
    }
    if n_contributing_shots == 0 {
        return Err(ObservablesError::NoAcceptedShots);
    }
    Ok(WilsonValue {
        value: total / n_contributing_shots as f64,
        n_contributing_shots,
        n_pairs_total,
    })
}

// ---------------------------------------------------------------------------
// Participation ratios.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IprBasis {
    /// Four-letter occupation alphabet per site.
    Full,
    /// Holon, singly occupied, doublon.
    Charge,
    /// Up, down, spinless.
    Spin,
}

impl IprBasis {
    fn alphabet(self) -> usize {
        match self {
            IprBasis::Full => 4,
            IprBasis::Charge | IprBasis::Spin => 3,
        }
    }

    fn symbol(self, class: SiteClass) -> usize {
        match self {
            IprBasis::Full => class.fock_symbol(),
            IprBasis::Charge => class.charge_symbol(),
            IprBasis::Spin => class.spin_symbol(),
        }
    }
}

/// Participation ratio of the uniform distribution over the basis
/// alphabet, the floor that thermalising dynamics approaches.
pub fn ipr_floor(basis: IprBasis, m: usize) -> f64 {
    let per_site: f64 = match basis {
        IprBasis::Full => 0.25,
        // Uniform occupation gives the merged classes weights 1/4, 1/2,
        // 1/4, whose squares sum to 3/8.
        IprBasis::Charge | IprBasis::Spin => 0.375,
    };
    per_site.powi(m as i32)
}

/// The 2x2 block of sites at the lattice centre, the default marginal
/// region.
pub fn central_region(lattice: &LatticeSpec) -> Vec<usize> {
    let x0 = (lattice.lx - 1) / 2;
    let y0 = (lattice.ly - 1) / 2;
    let mut region: Vec<usize> = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
        .iter()
        .map(|&(x, y)| lattice.site_index(x, y))
        .collect();
    region.sort_unstable();
    region
}

const IPR_REGION_LIMIT: usize = 8;

fn check_region(region: &[usize], n_sites: usize) -> Result<(), ObservablesError> {
    if region.is_empty() || region.len() > IPR_REGION_LIMIT {
        return Err(ObservablesError::RegionTooLarge(region.len()));
    }
    for (k, &s) in region.iter().enumerate() {
        if s >= n_sites || region[..k].contains(&s) {
            return Err(ObservablesError::BadRegion(s));
        }
    }
    Ok(())
}

fn region_key(classes: &[SiteClass], region: &[usize], basis: IprBasis) -> usize {
    let base = basis.alphabet();
    region
        .iter()
        .fold(0usize, |key, &s| key * base + basis.symbol(classes[s]))
}

/// Empirical marginal participation ratio: the probability that two
/// independent shots agree on the region in the chosen alphabet.
pub fn ipr_marginal(
    table: &ShotTable,
    n_sites: usize,
    region: &[usize],
    basis: IprBasis,
) -> Result<f64, ObservablesError> {
    check_region(region, n_sites)?;
    let rows = table.bit_rows()?;
    if rows.is_empty() {
        return Err(ObservablesError::TooFewShots { want: 1, got: 0 });
    }
    let mut counts: HashMap<usize, u64> = HashMap::new();
    for bits in &rows {
        if bits.len() != 2 * n_sites {
            return Err(ObservablesError::WidthMismatch {
                want: 2 * n_sites,
                got: bits.len(),
            });
        }
        let classes = classify_shot(bits, n_sites);
        *counts.entry(region_key(&classes, region, basis)).or_insert(0) += 1;
    }
    let n = rows.len() as f64;
    Ok(counts.values().map(|&c| (c as f64 / n).powi(2)).sum())
}

/// Exact marginal participation ratio of a dense state, for desk-scale
/// cross-checks of the shot estimator.
pub fn ipr_from_statevector(
    sv: &StateVector,
    region: &[usize],
    basis: IprBasis,
) -> Result<f64, ObservablesError> {
    let n_sites = sv.n_qubits / 2;
    check_region(region, n_sites)?;
    let mut marginal: HashMap<usize, f64> = HashMap::new();
    for (index, p) in sv.probabilities().into_iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let key = region.iter().fold(0usize, |key, &s| {
            let up = (index >> s) & 1 == 1;
            let down = (index >> (n_sites + s)) & 1 == 1;
            key * basis.alphabet() + basis.symbol(SiteClass::from_bits(up, down))
        });
        *marginal.entry(key).or_insert(0.0) += p;
    }
    Ok(marginal.values().map(|p| p * p).sum())
}

/// Closed-form participation estimates from the doublon number under the
/// approximation that sites are independent and identically distributed.
#[derive(Debug, Clone, PartialEq)]
pub struct IprIidEstimates {
    pub full: Vec<f64>,
    pub charge: Vec<f64>,
    pub spin: Vec<f64>,
}

pub fn ipr_iid_estimates(
    doublon_numbers: &[f64],
    n_up: usize,
    n_down: usize,
    n_sites: usize,
    m: usize,
) -> IprIidEstimates {
    let l = n_sites as f64;
    let mut full = Vec::with_capacity(doublon_numbers.len());
    let mut charge = Vec::with_capacity(doublon_numbers.len());
    let mut spin = Vec::with_capacity(doublon_numbers.len());
    for &nd in doublon_numbers {
        let holons = l - n_up as f64 - n_down as f64 + nd;
        let ups = n_up as f64 - nd;
        let downs = n_down as f64 - nd;
        let sq = |x: f64| (x / l) * (x / l);
        full.push((sq(holons) + sq(ups) + sq(downs) + sq(nd)).powi(m as i32));
        charge.push((sq(holons) + sq(ups + downs) + sq(nd)).powi(m as i32));
        spin.push((sq(holons + nd) + sq(ups) + sq(downs)).powi(m as i32));
    }
    IprIidEstimates { full, charge, spin }
}

/// Conditional match probabilities between the fine and coarse alphabets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IprRatios {
    /// Probability that the spins match given that the charges match.
    pub full_over_charge: f64,
    /// Probability that the charges match given that the spins match.
    pub full_over_spin: f64,
    pub spin_over_charge: f64,
}

pub fn ipr_ratios(full: f64, charge: f64, spin: f64) -> Result<IprRatios, ObservablesError> {
    if charge == 0.0 || spin == 0.0 {
        return Err(ObservablesError::ZeroDenominator);
    }
    Ok(IprRatios {
        full_over_charge: full / charge,
        full_over_spin: full / spin,
        spin_over_charge: spin / charge,
    })
}

// ---------------------------------------------------------------------------
// Pairwise carrier distances.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDistance {
    /// Ratio of the mean summed pair distance to the mean pair count.
    pub mean: f64,
    pub numerator: f64,
    pub denominator: f64,
    /// Shots carrying at least two carriers of the kind.
    pub n_shots: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseDistanceSuite {
    pub holon: Option<PairDistance>,
    pub doublon: Option<PairDistance>,
}

fn pair_distance(
    rows: &[Vec<bool>],
    lattice: &LatticeSpec,
    kind: ChargonKind,
) -> Option<PairDistance> {
    let l = lattice.n_sites();
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    let mut n_shots = 0;
    for bits in rows {
        let classes = classify_shot(bits, l);
        let sites: Vec<usize> =
            (0..l).filter(|&s| classes[s] == kind.class()).collect();
        if sites.len() < 2 {
            continue;
        }
        for (k, &a) in sites.iter().enumerate() {
            for &b in &sites[k + 1..] {
                let (xa, ya) = lattice.coords(a);
                let (xb, yb) = lattice.coords(b);
                let dx = xa as f64 - xb as f64;
                let dy = ya as f64 - yb as f64;
                numerator += (dx * dx + dy * dy).sqrt();
                denominator += 1.0;
            }
        }
        n_shots += 1;
    }
    (n_shots > 0).then(|| {
        let scale = n_shots as f64;
        PairDistance {
            mean: numerator / denominator,
            numerator: numerator / scale,
            denominator: denominator / scale,
            n_shots,
        }
    })
}

/// Mean Euclidean distance between pairs of holons and pairs of doublons,
/// as ratio-of-means estimators over shots that contain at least one pair.
pub fn pairwise_distance_suite(
    table: &ShotTable,
    lattice: &LatticeSpec,
) -> Result<PairwiseDistanceSuite, ObservablesError> {
    let rows = table.bit_rows()?;
    let l = lattice.n_sites();
    for bits in &rows {
        if bits.len() != 2 * l {
            return Err(ObservablesError::WidthMismatch { want: 2 * l, got: bits.len() });
        }
    }
    Ok(PairwiseDistanceSuite {
        holon: pair_distance(&rows, lattice, ChargonKind::Holon),
        doublon: pair_distance(&rows, lattice, ChargonKind::Doublon),
    })
}

// ---------------------------------------------------------------------------
// Staggered magnetisation distribution.

#[derive(Debug, Clone, PartialEq)]
pub struct MsDistribution {
    /// Magnetisation value of each histogram bin.
    pub values: Vec<f64>,
    pub pmf: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    /// Total variation distance to the moment-matched Gaussian integrated
    /// over the bins.
    pub tvd: f64,
    pub n_shots: usize,
}

const MS_MIN_SHOTS: usize = 100;

/// Histogram of the per-shot staggered magnetisation on its discrete
/// spectrum, with a moment-matched Gaussian comparison.
pub fn ms_distribution(
    table: &ShotTable,
    lattice: &LatticeSpec,
) -> Result<MsDistribution, ObservablesError> {
    let rows = table.bit_rows()?;
    if rows.len() < MS_MIN_SHOTS {
        return Err(ObservablesError::TooFewShots { want: MS_MIN_SHOTS, got: rows.len() });
    }
    let l = lattice.n_sites();
    let li = l as i64;
    let mut sums = Vec::with_capacity(rows.len());
    for bits in &rows {
        if bits.len() != 2 * l {
            return Err(ObservablesError::WidthMismatch { want: 2 * l, got: bits.len() });
        }
        let classes = classify_shot(bits, l);
        let total: i32 = classes
            .iter()
            .enumerate()
            .map(|(s, c)| if stagger_sign(lattice, s) > 0.0 { c.sz() } else { -c.sz() })
            .sum();
        sums.push(i64::from(total));
    }
    // Within a fixed particle-number sector the staggered sum has fixed
    // parity, so the spectrum steps by 2; mixed-parity data falls back to
    // unit steps.
    let parity = sums[0].rem_euclid(2);
    let pure = sums.iter().all(|s| s.rem_euclid(2) == parity);
    let step = if pure { 2i64 } else { 1 };
    let start = if pure { -li + (li + parity).rem_euclid(2) } else { -li };
    let bins: Vec<i64> = (0..).map(|k| start + k * step).take_while(|&v| v <= li).collect();
    let mut pmf = vec![0.0; bins.len()];
    let weight = 1.0 / sums.len() as f64;
    for s in &sums {
        let k = ((s - start) / step) as usize;
        pmf[k] += weight;
    }
    let values: Vec<f64> = bins.iter().map(|&b| b as f64 / l as f64).collect();
    let mean: f64 = sums.iter().map(|&s| s as f64 / l as f64).sum::<f64>() * weight;
    let variance: f64 = sums
        .iter()
        .map(|&s| (s as f64 / l as f64 - mean).powi(2))
        .sum::<f64>()
        * weight;

    let half = step as f64 / (2.0 * l as f64);
    let gaussian: Vec<f64> = if variance > 1e-14 {
        let normal = Normal::new(mean, variance.sqrt()).expect("positive variance");
        values
            .iter()
            .map(|&c| normal.cdf(c + half) - normal.cdf(c - half))
            .collect()
    } else {
        // Degenerate fit: all Gaussian mass lands in the bin holding the
        // mean.
        let mut g = vec![0.0; values.len()];
        let k = values
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - mean).abs().total_cmp(&(*b - mean).abs()))
            .map(|(k, _)| k)
            .unwrap_or(0);
        g[k] = 1.0;
        g
    };
    let covered: f64 = gaussian.iter().sum();
    let tvd = 0.5
        * (pmf
            .iter()
            .zip(&gaussian)
            .map(|(p, g)| (p - g).abs())
            .sum::<f64>()
            + (1.0 - covered).max(0.0));
    Ok(MsDistribution { values, pmf, mean, variance, tvd, n_shots: sums.len() })
}

// ---------------------------------------------------------------------------
// Doublon scaling collapse.

/// Doublon number as a function of time at one coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublonSeries {
    pub u: f64,
    pub t: Vec<f64>,
    pub doublon_number: Vec<f64>,
}

fn interpolate(t: &[f64], v: &[f64], at: f64) -> Option<f64> {
    if t.len() < 2 || at < t[0] || at > *t.last().unwrap() {
        return None;
    }
    let k = t.partition_point(|&x| x < at).min(t.len() - 1).max(1);
    let (t0, t1) = (t[k - 1], t[k]);
    let w = if t1 > t0 { (at - t0) / (t1 - t0) } else { 0.0 };
    Some(v[k - 1] * (1.0 - w) + v[k] * w)
}

/// Largest early-time deviation from the quadratic coupling collapse: the
/// doublon number at one coupling is compared against the rescaled series
/// of the other, with the second series linearly interpolated at the
/// rescaled times.
pub fn doublon_scaling_check(
    a: &DoublonSeries,
    b: &DoublonSeries,
    t_max: f64,
) -> Result<f64, ObservablesError> {
    for series in [a, b] {
        if series.u <= 0.0 {
            return Err(ObservablesError::BadCoupling(series.u));
        }
        if series.t.len() != series.doublon_number.len() {
            return Err(ObservablesError::WidthMismatch {
                want: series.t.len(),
                got: series.doublon_number.len(),
            });
        }
    }
    let ratio = (b.u / a.u).powi(2);
    let mut residual: Option<f64> = None;
    for (k, &t) in a.t.iter().enumerate() {
        if t > t_max {
            continue;
        }
        if let Some(rescaled) = interpolate(&b.t, &b.doublon_number, a.u * t / b.u) {
            let dev = (a.doublon_number[k] - ratio * rescaled).abs();
            residual = Some(residual.map_or(dev, |r: f64| r.max(dev)));
        }
    }
    residual.ok_or(ObservablesError::InsufficientOverlap)
}

// ---------------------------------------------------------------------------
// Results tables.

/// Provenance of a value in a results table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Raw,
    Tflo,
    Mesr,
    Flo,
    Mp,
    Exact,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Tflo => "tflo",
            Method::Mesr => "mesr",
            Method::Flo => "flo",
            Method::Mp => "mp",
            Method::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ObservablesError> {
        match s {
            "raw" => Ok(Method::Raw),
            "tflo" => Ok(Method::Tflo),
            "mesr" => Ok(Method::Mesr),
            "flo" => Ok(Method::Flo),
            "mp" => Ok(Method::Mp),
            "exact" => Ok(Method::Exact),
            other => Err(ObservablesError::Csv(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub observable: String,
    pub t: f64,
    pub u: f64,
    pub flux: Flux,
    pub value: f64,
    pub error: Option<f64>,
    pub method: Method,
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("observable,t,u,flux,value,error,method\n");
    for r in rows {
        let flux = match r.flux {
            Flux::Zero => "zero",
            Flux::Pi => "pi",
        };
        let error = r.error.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.observable,
            r.t,
            r.u,
            flux,
            r.value,
            error,
            r.method.as_str()
        ));
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, ObservablesError> {
    let bad = |line: usize, what: &str| {
        ObservablesError::Csv(format!("line {}: {what}", line + 1))
    };
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(bad(k, "expected 7 fields"));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| bad(k, &format!("bad {what} {s:?}")))
        };
        let flux = match fields[3] {
            "zero" => Flux::Zero,
            "pi" => Flux::Pi,
            other => return Err(bad(k, &format!("bad flux {other:?}"))),
        };
        rows.push(ResultRow {
            observable: fields[0].to_string(),
            t: num(fields[1], "time")?,
            u: num(fields[2], "coupling")?,
            flux,
            value: num(fields[4], "value")?,
            error: if fields[5].is_empty() { None } else { Some(num(fields[5], "error")?) },
            method: Method::parse(fields[6])?,
        });
    }
    Ok(rows)
}
