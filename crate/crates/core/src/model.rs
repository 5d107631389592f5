//! Lattice geometry, flux patterns, Hamiltonian parameters, and the initial
//! states used throughout the toolkit.
//!
//! The Hamiltonian is the 2D Fermi-Hubbard model on an open rectangle,
//!
//! ```text
//! H = -J  sum_{<ij>,s} (e^{i phi_ij} c^dag_{i,s} c_{j,s} + h.c.)
//!     + U sum_i n_{i,up} n_{i,down}
//! ```
//!
//! with `J = 1` fixed and Peierls phases `phi_ij` restricted to `{0, pi}`.
//! A `pi` flux through every plaquette is realised in a canonical gauge:
//! every horizontal edge in an odd row carries phase `pi`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from model and initial-state construction.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("lattice must be at least 2x2, got {0}x{1}")]
    LatticeTooSmall(usize, usize),
    #[error("site ({0}, {1}) is outside the lattice")]
    SiteOutsideLattice(usize, usize),
    #[error("site ({0}, {1}) used twice in the state description")]
    OverlappingSites(usize, usize),
    #[error("random hole placement requires a seed")]
    MissingSeed,
    #[error("singlet pair (({0}, {1}), ({2}, {3})) is not a nearest-neighbour pair of free sites")]
    BadSingletPair(usize, usize, usize, usize),
    #[error("no nearest-neighbour singlet covering exists for the requested holes")]
    NoSingletCovering,
    #[error("expected_pair_distance needs at least two cells, got {0}x{1}")]
    PairDistanceTooSmall(usize, usize),
    #[error("{0} holes requested but the lattice has {1} sites")]
    TooManyHoles(usize, usize),
}

/// Magnetic flux through each plaquette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flux {
    Zero,
    Pi,
}

/// Edge orientation on the rectangular lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
}

/// A nearest-neighbour bond, endpoints given as snake indices with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub orientation: Orientation,
}

/// Open-boundary rectangular lattice with its snake ordering.
///
/// Sites are listed in snake order: row `iy` occupies indices
/// `iy*Lx .. (iy+1)*Lx`, left-to-right in even rows and right-to-left in
/// odd rows. All mode and qubit labels in the crate derive from this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub lx: usize,
    pub ly: usize,
    /// Site coordinates `(ix, iy)` indexed by snake label.
    pub sites: Vec<(usize, usize)>,
    pub edges: Vec<Edge>,
}

impl LatticeSpec {
    pub fn new(lx: usize, ly: usize) -> Result<Self, ModelError> {
        if lx < 2 || ly < 2 {
            return Err(ModelError::LatticeTooSmall(lx, ly));
        }
        let mut sites = Vec::with_capacity(lx * ly);
        for iy in 0..ly {
            for k in 0..lx {
                let ix = if iy % 2 == 0 { k } else { lx - 1 - k };
                sites.push((ix, iy));
            }
        }
        let snake = |ix: usize, iy: usize| -> usize {
            if iy % 2 == 0 {
                iy * lx + ix
            } else {
                iy * lx + (lx - 1 - ix)
            }
        };
        let mut edges = Vec::new();
        for iy in 0..ly {
            for ix in 0..lx {
                if ix + 1 < lx {
                    let (a, b) = ordered(snake(ix, iy), snake(ix + 1, iy));
                    edges.push(Edge { a, b, orientation: Orientation::Horizontal });
                }
                if iy + 1 < ly {
                    let (a, b) = ordered(snake(ix, iy), snake(ix, iy + 1));
                    edges.push(Edge { a, b, orientation: Orientation::Vertical });
                }
            }
        }
        Ok(LatticeSpec { lx, ly, sites, edges })
    }

    /// Number of sites.
    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    /// Snake index of a site.
    pub fn site_index(&self, ix: usize, iy: usize) -> usize {
        debug_assert!(ix < self.lx && iy < self.ly);
        if iy % 2 == 0 {
            iy * self.lx + ix
        } else {
            iy * self.lx + (self.lx - 1 - ix)
        }
    }

    /// Coordinates of a snake index.
    pub fn coords(&self, index: usize) -> (usize, usize) {
        self.sites[index]
    }

    /// Plaquettes as `(lower-left ix, iy)` anchors.
    pub fn plaquettes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let lx = self.lx;
        let ly = self.ly;
        (0..ly.saturating_sub(1)).flat_map(move |iy| (0..lx - 1).map(move |ix| (ix, iy)))
    }

    /// Edge lookup by unordered endpoint pair.
    pub fn edge_index(&self, i: usize, j: usize) -> Option<usize> {
        let (a, b) = ordered(i, j);
        self.edges.iter().position(|e| e.a == a && e.b == b)
    }
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Full Hamiltonian description: lattice, interaction `U` (in units of the
/// hopping `J = 1`), flux sector, and the per-edge Peierls phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub lattice: LatticeSpec,
    pub u: f64,
    pub flux: Flux,
    /// Phase per edge, parallel to `lattice.edges`; each entry is 0 or pi.
    pub peierls: Vec<f64>,
}

impl ModelSpec {
    /// Signed phase sum around the plaquette anchored at `(ix, iy)`.
    pub fn plaquette_phase(&self, ix: usize, iy: usize) -> f64 {
        let l = &self.lattice;
        let corners = [
            l.site_index(ix, iy),
            l.site_index(ix + 1, iy),
            l.site_index(ix + 1, iy + 1),
            l.site_index(ix, iy + 1),
        ];
        let mut sum = 0.0;
        for k in 0..4 {
            let e = l.edge_index(corners[k], corners[(k + 1) % 4]).expect("plaquette edge");
            // Phases are 0 or pi, so traversal direction does not matter
            // modulo 2 pi.
            sum += self.peierls[e];
        }
        sum % (2.0 * std::f64::consts::PI)
    }

    /// Hopping phase on the edge between snake indices `i` and `j`.
    pub fn edge_phase(&self, i: usize, j: usize) -> Option<f64> {
        self.lattice.edge_index(i, j).map(|e| self.peierls[e])
    }
}

/// Builds the Hubbard model on an `lx` x `ly` open rectangle.
///
/// Lattices are stored with the snake axis along the shorter side: a
/// `6x5` request yields the transposed, physically identical `5x6`
/// lattice. This pins down mode ordering (and with it circuit structure)
/// uniquely per geometry.
pub fn build_model(lx: usize, ly: usize, u: f64, flux: Flux) -> Result<ModelSpec, ModelError> {
    if lx < 2 || ly < 2 {
        return Err(ModelError::LatticeTooSmall(lx, ly));
    }
    let (lx, ly) = if lx <= ly { (lx, ly) } else { (ly, lx) };
    let lattice = LatticeSpec::new(lx, ly)?;
    let peierls = lattice
        .edges
        .iter()
        .map(|e| match (flux, e.orientation) {
            (Flux::Zero, _) | (Flux::Pi, Orientation::Vertical) => 0.0,
            (Flux::Pi, Orientation::Horizontal) => {
                let (_, iy) = lattice.coords(e.a);
                if iy % 2 == 1 {
                    std::f64::consts::PI
                } else {
                    0.0
                }
            }
        })
        .collect();
    Ok(ModelSpec { lattice, u, flux, peierls })
}

/// Initial-state families used by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    NeelWithHoles,
    HolonStripe,
    SingletCoveringWithHoles,
    RandomHoles,
}

/// Per-site content of an initial state at `t = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SitePattern {
    Hole,
    Up,
    Down,
    /// Member of the singlet whose partner is the given snake index.
    Singlet(usize),
}

/// Parameters for [`build_initial_state`], by state family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateParams {
    NeelWithHoles {
        holes: Vec<(usize, usize)>,
    },
    /// Empty column of holons; defaults to the middle column.
    HolonStripe {
        column: Option<usize>,
    },
    SingletCoveringWithHoles {
        holes: Vec<(usize, usize)>,
        /// Explicit nearest-neighbour pairing; a covering is computed when
        /// omitted.
        pairs: Option<Vec<((usize, usize), (usize, usize))>>,
    },
    RandomHoles {
        n_holes: usize,
        seed: Option<u64>,
    },
}

/// A fully resolved initial state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitialStateSpec {
    pub kind: StateKind,
    /// Per-site pattern, indexed by snake label.
    pub pattern: Vec<SitePattern>,
    /// Hole positions, snake indices, sorted.
    pub hole_sites: Vec<usize>,
    /// Singlet pairs, snake indices `(a, b)` with `a < b`, disjoint.
    pub singlet_pairs: Vec<(usize, usize)>,
    pub n_up: usize,
    pub n_down: usize,
    pub seed: Option<u64>,
}

impl InitialStateSpec {
    /// Occupied up-sector modes for product states, snake-ordered.
    /// Singlet coverings have no per-sector product description.
    pub fn up_modes(&self) -> Option<Vec<usize>> {
        if self.kind == StateKind::SingletCoveringWithHoles && !self.singlet_pairs.is_empty() {
            return None;
        }
        Some(
            self.pattern
                .iter()
                .enumerate()
                .filter(|(_, p)| matches!(p, SitePattern::Up))
                .map(|(i, _)| i)
                .collect(),
        )
    }

    /// Occupied down-sector modes for product states.
    pub fn down_modes(&self) -> Option<Vec<usize>> {
        if self.kind == StateKind::SingletCoveringWithHoles && !self.singlet_pairs.is_empty() {
            return None;
        }
        Some(
            self.pattern
                .iter()
                .enumerate()
                .filter(|(_, p)| matches!(p, SitePattern::Down))
                .map(|(i, _)| i)
                .collect(),
        )
    }

    pub fn is_product(&self) -> bool {
        self.singlet_pairs.is_empty()
    }

    /// Sign relating the ascending-mode basis state of one singlet
    /// assignment to the defining creation order of the state: each pair's
    /// two-mode block (bit `k` of `choice` picks up-at-`a` or up-at-`b`),
    /// then the lonely fermions in ascending mode order. The sign is the
    /// same for every assignment exactly when no two pairs interleave in
    /// snake order, which makes it a global phase for such coverings.
    pub fn assignment_sign(&self, choice: usize) -> f64 {
        let l = self.pattern.len();
        let mut seq = Vec::with_capacity(2 * self.singlet_pairs.len() + self.n_up + self.n_down);
        for (k, &(a, b)) in self.singlet_pairs.iter().enumerate() {
            if (choice >> k) & 1 == 0 {
                seq.push(a);
                seq.push(l + b);
            } else {
                seq.push(b);
                seq.push(l + a);
            }
        }
        for (s, p) in self.pattern.iter().enumerate() {
            if matches!(p, SitePattern::Up) {
                seq.push(s);
            }
        }
        for (s, p) in self.pattern.iter().enumerate() {
            if matches!(p, SitePattern::Down) {
                seq.push(l + s);
            }
        }
        let mut inversions = 0usize;
        for i in 0..seq.len() {
            for j in (i + 1)..seq.len() {
                if seq[i] > seq[j] {
                    inversions += 1;
                }
            }
        }
        if inversions % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Builds one of the experiment's initial states on `model`'s lattice.
pub fn build_initial_state(
    model: &ModelSpec,
    kind: StateKind,
    params: &StateParams,
) -> Result<InitialStateSpec, ModelError> {
    let l = &model.lattice;
    let n = l.n_sites();
    match (kind, params) {
        (StateKind::NeelWithHoles, StateParams::NeelWithHoles { holes }) => {
            let hole_idx = resolve_distinct_sites(l, holes)?;
            let mut pattern = neel_pattern(l, |_, _| false);
            for &h in &hole_idx {
                pattern[h] = SitePattern::Hole;
            }
            Ok(finish_state(kind, pattern, None))
        }
        (StateKind::HolonStripe, StateParams::HolonStripe { column }) => {
            let x0 = column.unwrap_or(l.lx / 2);
            if x0 >= l.lx {
                return Err(ModelError::SiteOutsideLattice(x0, 0));
            }
            // Squeezing out the stripe column must leave a bipartite Neel
            // background, so the pattern parity is shifted past the stripe.
            let mut pattern = neel_pattern(l, move |ix, _| ix > x0);
            for iy in 0..l.ly {
                pattern[l.site_index(x0, iy)] = SitePattern::Hole;
            }
            Ok(finish_state(kind, pattern, None))
        }
        (StateKind::RandomHoles, StateParams::RandomHoles { n_holes, seed }) => {
            let seed = seed.ok_or(ModelError::MissingSeed)?;
            if *n_holes > n {
                return Err(ModelError::TooManyHoles(*n_holes, n));
            }
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut rng);
            let mut pattern = neel_pattern(l, |_, _| false);
            for &h in all.iter().take(*n_holes) {
                pattern[h] = SitePattern::Hole;
            }
            let mut state = finish_state(kind, pattern, None);
            state.seed = Some(seed);
            Ok(state)
        }
        (StateKind::SingletCoveringWithHoles, StateParams::SingletCoveringWithHoles { holes, pairs }) => {
            let hole_idx = resolve_distinct_sites(l, holes)?;
            let pair_idx = match pairs {
                Some(pairs) => {
                    let mut out = Vec::with_capacity(pairs.len());
                    for &((ax, ay), (bx, by)) in pairs {
                        let a = checked_site(l, ax, ay)?;
                        let b = checked_site(l, bx, by)?;
                        if l.edge_index(a, b).is_none() {
                            return Err(ModelError::BadSingletPair(ax, ay, bx, by));
                        }
                        out.push(ordered(a, b));
                    }
                    out
                }
                None => singlet_covering(l, &hole_idx)?,
            };
            let mut pattern = vec![SitePattern::Hole; n];
            let mut used = vec![false; n];
            for &h in &hole_idx {
                used[h] = true;
            }
            for &(a, b) in &pair_idx {
                for &s in &[a, b] {
                    if used[s] {
                        let (x, y) = l.coords(s);
                        return Err(ModelError::OverlappingSites(x, y));
                    }
                    used[s] = true;
                }
                pattern[a] = SitePattern::Singlet(b);
                pattern[b] = SitePattern::Singlet(a);
            }
            if used.iter().any(|u| !u) {
                return Err(ModelError::NoSingletCovering);
            }
            let mut state = finish_state(kind, pattern, Some(pair_idx));
            state.n_up = state.singlet_pairs.len();
            state.n_down = state.singlet_pairs.len();
            Ok(state)
        }
        // Kind and parameter variant must match; treat a mismatch as a
        // missing-seed style caller bug.
        _ => Err(ModelError::MissingSeed),
    }
}

fn neel_pattern(l: &LatticeSpec, flip: impl Fn(usize, usize) -> bool) -> Vec<SitePattern> {
    (0..l.n_sites())
        .map(|s| {
            let (ix, iy) = l.coords(s);
            let parity = (ix + iy + usize::from(flip(ix, iy))) % 2;
            if parity == 0 {
                SitePattern::Up
            } else {
                SitePattern::Down
            }
        })
        .collect()
}

fn checked_site(l: &LatticeSpec, ix: usize, iy: usize) -> Result<usize, ModelError> {
    if ix >= l.lx || iy >= l.ly {
        return Err(ModelError::SiteOutsideLattice(ix, iy));
    }
    Ok(l.site_index(ix, iy))
}

fn resolve_distinct_sites(
    l: &LatticeSpec,
    coords: &[(usize, usize)],
) -> Result<Vec<usize>, ModelError> {
    let mut seen = vec![false; l.n_sites()];
    let mut out = Vec::with_capacity(coords.len());
    for &(ix, iy) in coords {
        let s = checked_site(l, ix, iy)?;
        if seen[s] {
            return Err(ModelError::OverlappingSites(ix, iy));
        }
        seen[s] = true;
        out.push(s);
    }
    out.sort_unstable();
    Ok(out)
}

fn finish_state(
    kind: StateKind,
    pattern: Vec<SitePattern>,
    pairs: Option<Vec<(usize, usize)>>,
) -> InitialStateSpec {
    let hole_sites = pattern
        .iter()
        .enumerate()
        .filter(|(_, p)| matches!(p, SitePattern::Hole))
        .map(|(i, _)| i)
        .collect();
    let n_up = pattern.iter().filter(|p| matches!(p, SitePattern::Up)).count();
    let n_down = pattern.iter().filter(|p| matches!(p, SitePattern::Down)).count();
    InitialStateSpec {
        kind,
        pattern,
        hole_sites,
        singlet_pairs: pairs.unwrap_or_default(),
        n_up,
        n_down,
        seed: None,
    }
}

/// Nearest-neighbour perfect matching of the lattice minus holes, via
/// augmenting paths on the bipartite sublattice graph.
fn singlet_covering(
    l: &LatticeSpec,
    holes: &[usize],
) -> Result<Vec<(usize, usize)>, ModelError> {
    let n = l.n_sites();
    let mut free = vec![true; n];
    for &h in holes {
        free[h] = false;
    }
    let mut adjacency = vec![Vec::new(); n];
    for e in &l.edges {
        if free[e.a] && free[e.b] {
            adjacency[e.a].push(e.b);
            adjacency[e.b].push(e.a);
        }
    }
    let left: Vec<usize> = (0..n)
        .filter(|&s| {
            let (ix, iy) = l.coords(s);
            free[s] && (ix + iy) % 2 == 0
        })
        .collect();
    let n_right = (0..n)
        .filter(|&s| {
            let (ix, iy) = l.coords(s);
            free[s] && (ix + iy) % 2 == 1
        })
        .count();
    if left.len() != n_right {
        return Err(ModelError::NoSingletCovering);
    }

    let mut matched: Vec<Option<usize>> = vec![None; n];
    fn augment(
        s: usize,
        adjacency: &[Vec<usize>],
        matched: &mut Vec<Option<usize>>,
        visited: &mut Vec<bool>,
    ) -> bool {
        for &t in &adjacency[s] {
            if visited[t] {
                continue;
            }
            visited[t] = true;
            let free_or_moved = match matched[t] {
                None => true,
                Some(prev) => augment(prev, adjacency, matched, visited),
            };
            if free_or_moved {
                matched[t] = Some(s);
                matched[s] = Some(t);
                return true;
            }
        }
        false
    }
    for &s in &left {
        let mut visited = vec![false; n];
        if !augment(s, &adjacency, &mut matched, &mut visited) {
            return Err(ModelError::NoSingletCovering);
        }
    }
    let mut pairs: Vec<(usize, usize)> =
        left.iter().map(|&s| ordered(s, matched[s].expect("matched"))).collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Single-particle dispersion branches at momentum `(kx, ky)`.
///
/// Zero flux has one band, `-2 cos kx - 2 cos ky`; the pi-flux pattern
/// folds the zone and gives the two branches
/// `+-2 sqrt(cos^2 kx + cos^2 ky)`.
pub fn dispersion(kx: f64, ky: f64, flux: Flux) -> Vec<f64> {
    match flux {
        Flux::Zero => vec![-2.0 * kx.cos() - 2.0 * ky.cos()],
        Flux::Pi => {
            let e = 2.0 * (kx.cos().powi(2) + ky.cos().powi(2)).sqrt();
            vec![-e, e]
        }
    }
}

/// Mean Euclidean distance between two distinct cells drawn uniformly from
/// an `n` x `m` grid.
pub fn expected_pair_distance(n: usize, m: usize) -> Result<f64, ModelError> {
    if n == 0 || m == 0 || n * m < 2 {
        return Err(ModelError::PairDistanceTooSmall(n, m));
    }
    let count = |len: usize, d: usize| -> f64 {
        if d == 0 {
            len as f64
        } else {
            2.0 * (len - d) as f64
        }
    };
    let mut sum = 0.0;
    for dx in 0..n {
        for dy in 0..m {
            if dx == 0 && dy == 0 {
                continue;
            }
            let pairs = count(n, dx) * count(m, dy);
            sum += pairs * ((dx * dx + dy * dy) as f64).sqrt();
        }
    }
    let total = (n * m) as f64;
    Ok(sum / (total * (total - 1.0)))
}
