//! Error mitigation for sampled bitstring data.
//!
//! The pieces compose into the standard pipeline: undo readout twirling,
//! post-select on conserved quantities, rescale expectation values with
//! fits trained on free-fermion data, reweight shots toward exactly known
//! constraints, smooth time series with a Gaussian process, average over
//! lattice and spin symmetries, and attach error bars from per-twirl
//! statistics or a nested bootstrap.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng as _};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InitialStateSpec, LatticeSpec, ModelSpec, SitePattern};
use crate::observables::{afm_order, classify_shot, count_class, SiteClass};
use crate::shots::{bits_to_string, string_to_bits, ShotError, ShotTable};

#[derive(Debug, Error)]
pub enum MitigationError {
    #[error("shot {0} carries no readout mask")]
    MissingMask(usize),
    #[error("no fit stored for observable {0:?}")]
    MissingFit(String),
    #[error("need at least {want} aligned time points, got {got}")]
    TooFewPoints { want: usize, got: usize },
    #[error("series {0:?} is missing from the training data or misaligned")]
    MisalignedSeries(String),
    #[error("non-finite input at position {0}")]
    NonFinite(usize),
    #[error("need at least 2 twirl instances, got {0}")]
    TooFewTwirls(usize),
    #[error("per-twirl statistics have mismatched lengths")]
    RaggedStats,
    #[error("need at least 10 bootstrap resamples, got {0}")]
    TooFewResamples(usize),
    #[error("{0} constraint observables but {1} target values")]
    ConstraintShape(usize, usize),
    #[error("operation needs a non-empty shot table")]
    EmptyTable,
    #[error("shot width {got} does not match the register of {want} qubits")]
    WidthMismatch { want: usize, got: usize },
    #[error("window [{0}, {1}] is not an interval inside [-1, 1]")]
    BadWindow(f64, f64),
    #[error(transparent)]
    Shots(#[from] ShotError),
}

// ---------------------------------------------------------------------------
// Post-selection.

/// Shot acceptance rule built from conserved quantities of the ideal
/// dynamics: per-sector particle number, doublon count, and the staggered
/// magnetisation of the shot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostselectionFilter {
    /// Target particle numbers (N_up, N_down).
    pub target: (usize, usize),
    /// Largest tolerated |weight - target| per spin sector; 0 keeps only
    /// the exact symmetry sector.
    pub max_hamming_err: usize,
    /// Closed window of accepted doublon counts, if constrained.
    pub doublon_range: Option<(usize, usize)>,
    /// Closed window on the antiferromagnetic order of the shot, the mean
    /// nearest-neighbour spin product over pairs where both sites carry a
    /// spin. The checkerboard scores -1; shots where the order is
    /// undefined are dropped when this window is set.
    pub afm_interval: Option<(f64, f64)>,
}

impl PostselectionFilter {
    /// Exact-sector filter with no further windows.
    pub fn strict(target: (usize, usize)) -> Self {
        PostselectionFilter {
            target,
            max_hamming_err: 0,
            doublon_range: None,
            afm_interval: None,
        }
    }

    pub fn validate(&self) -> Result<(), MitigationError> {
        if let Some((lo, hi)) = self.afm_interval {
            if !(lo.is_finite() && hi.is_finite() && -1.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(MitigationError::BadWindow(lo, hi));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Postselected {
    pub table: ShotTable,
    /// Kept fraction. An empty result is expected under tight windows and
    /// is reported through this number rather than as an error.
    pub acceptance: f64,
}

pub fn postselect(
    table: &ShotTable,
    filter: &PostselectionFilter,
    lattice: &LatticeSpec,
) -> Result<Postselected, MitigationError> {
    filter.validate()?;
    let l = lattice.n_sites();
    let mut kept = Vec::new();
    for r in &table.records {
        if r.n_qubits() != 2 * l {
            return Err(MitigationError::WidthMismatch { want: 2 * l, got: r.n_qubits() });
        }
        let bits = string_to_bits(&r.bits)?;
        let n_up = bits[..l].iter().filter(|&&b| b).count();
        let n_down = bits[l..].iter().filter(|&&b| b).count();
        if n_up.abs_diff(filter.target.0) > filter.max_hamming_err
            || n_down.abs_diff(filter.target.1) > filter.max_hamming_err
        {
            continue;
        }
        if filter.doublon_range.is_some() || filter.afm_interval.is_some() {
            let classes = classify_shot(&bits, l);
            if let Some((lo, hi)) = filter.doublon_range {
                let d = count_class(&classes, SiteClass::Doublon);
                if d < lo || d > hi {
                    continue;
                }
            }
            if let Some((lo, hi)) = filter.afm_interval {
                match afm_order(&classes, lattice) {
                    Some(m) if (lo..=hi).contains(&m) => {}
                    _ => continue,
                }
            }
        }
        kept.push(r.clone());
    }
    let acceptance = if table.is_empty() {
        1.0
    } else {
        kept.len() as f64 / table.len() as f64
    };
    Ok(Postselected { table: ShotTable::new(kept)?, acceptance })
}

// ---------------------------------------------------------------------------
// Readout untwirl.

/// Xor of two bitstring encodings of equal width.
pub fn xor_strings(bits: &str, mask: &str) -> Result<String, MitigationError> {
    if bits.len() != mask.len() {
        return Err(MitigationError::WidthMismatch { want: bits.len(), got: mask.len() });
    }
    let a = string_to_bits(bits)?;
    let b = string_to_bits(mask)?;
    Ok(bits_to_string(&a.iter().zip(&b).map(|(x, y)| x ^ y).collect::<Vec<_>>()))
}

/// Undoes the readout twirl by xor-ing every shot with its stored mask.
/// The mask is consumed: output records carry none, so a second pass fails
/// with [`MitigationError::MissingMask`] instead of silently re-flipping.
pub fn readout_untwirl(table: &ShotTable) -> Result<ShotTable, MitigationError> {
    let mut records = Vec::with_capacity(table.len());
    for (k, r) in table.records.iter().enumerate() {
        let mask = r.mask.as_ref().ok_or(MitigationError::MissingMask(k))?;
        let mut rec = r.clone();
        rec.bits = xor_strings(&r.bits, mask)?;
        rec.mask = None;
        records.push(rec);
    }
    Ok(ShotTable::new(records)?)
}

// ---------------------------------------------------------------------------
// Fits against free-fermion training data.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TfloAnsatz {
    /// exact = m * noisy + b
    Linear,
    /// exact = m * noisy + c * t + b
    LinearLinear,
}

impl TfloAnsatz {
    fn n_params(self) -> usize {
        match self {
            TfloAnsatz::Linear => 2,
            TfloAnsatz::LinearLinear => 3,
        }
    }
}

/// Grouping key for fit priors: how many qubits the observable acts on and
/// whether its support spans more than one lattice site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObservableClass {
    pub weight: usize,
    pub cross_site: bool,
}

/// One observable's values on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub name: String,
    pub class: ObservableClass,
    pub t: Vec<f64>,
    pub value: Vec<f64>,
    /// Per-point standard errors; an all-zero vector means exact values.
    pub err: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TFLOFit {
    pub observable: String,
    pub class: ObservableClass,
    pub ansatz: TfloAnsatz,
    pub m: f64,
    pub c: f64,
    pub b: f64,
    /// Unweighted RMS misfit of the final coefficients.
    pub residual: f64,
    /// Group prior (mean, variance) per coefficient used in the final
    /// stage; absent when no observable in any group passed the SNR cut.
    pub prior: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mitigated {
    pub value: f64,
    pub clamped: bool,
}

impl TFLOFit {
    /// Rescales one noisy expectation value. Pauli expectations live in
    /// [-1, 1], so overshoot is clamped and flagged.
    pub fn apply(&self, noisy: f64, t: f64) -> Mitigated {
        let raw = self.m * noisy + self.c * t + self.b;
        let value = raw.clamp(-1.0, 1.0);
        Mitigated { value, clamped: value != raw }
    }
}

/// Looks up the fit for `name` and applies it.
pub fn tflo_apply(
    fits: &[TFLOFit],
    name: &str,
    noisy: f64,
    t: f64,
) -> Result<Mitigated, MitigationError> {
    let fit = fits
        .iter()
        .find(|f| f.observable == name)
        .ok_or_else(|| MitigationError::MissingFit(name.to_string()))?;
    Ok(fit.apply(noisy, t))
}

/// Signal-to-noise cut for the first fitting stage: exact-series range over
/// mean error bar.
pub const TFLO_SNR_THRESHOLD: f64 = 3.0;

/// Floor on prior variances so that exactly agreeing first-stage fits still
/// leave a usable (if tight) prior.
const PRIOR_VAR_FLOOR: f64 = 1e-6;

fn design_row(ansatz: TfloAnsatz, noisy: f64, t: f64) -> Vec<f64> {
    match ansatz {
        TfloAnsatz::Linear => vec![noisy, 1.0],
        TfloAnsatz::LinearLinear => vec![noisy, t, 1.0],
    }
}

/// Weighted least squares with an optional Gaussian prior per coefficient,
/// solved through the normal equations. `x` is row-major with `p` columns.
fn solve_regularised(
    x: &[Vec<f64>],
    y: &[f64],
    w: &[f64],
    prior: Option<&[(f64, f64)]>,
    p: usize,
) -> Vec<f64> {
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (row, (&yi, &wi)) in x.iter().zip(y.iter().zip(w)) {
        for j in 0..p {
            rhs[j] += wi * row[j] * yi;
            for k in 0..p {
                a[(j, k)] += wi * row[j] * row[k];
            }
        }
    }
    if let Some(prior) = prior {
        for (j, &(mean, var)) in prior.iter().enumerate() {
            a[(j, j)] += 1.0 / var;
            rhs[j] += mean / var;
        }
    }
    match a.clone().svd(true, true).solve(&rhs, 1e-12) {
        Ok(theta) => theta.iter().copied().collect(),
        Err(_) => vec![0.0; p],
    }
}

fn fit_rms(x: &[Vec<f64>], y: &[f64], theta: &[f64]) -> f64 {
    let ss: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &yi)| {
            let pred: f64 = row.iter().zip(theta).map(|(a, b)| a * b).sum();
            (yi - pred).powi(2)
        })
        .sum();
    (ss / y.len() as f64).sqrt()
}

/// Fits per-observable rescaling coefficients from a noisy series and the
/// matching exactly solvable series, in three stages: plain least squares
/// on observables whose exact signal clears the SNR cut, group statistics
/// of those coefficients as priors keyed by [`ObservableClass`], then a
/// prior-regularised refit of every observable.
pub fn tflo_fit(
    noisy: &[ObservableSeries],
    exact: &[ObservableSeries],
    ansatz: TfloAnsatz,
) -> Result<Vec<TFLOFit>, MitigationError> {
    let p = ansatz.n_params();
    // Aligned regression inputs per observable.
    let mut problems = Vec::with_capacity(noisy.len());
    for series in noisy {
        let reference = exact
            .iter()
            .find(|e| e.name == series.name)
            .ok_or_else(|| MitigationError::MisalignedSeries(series.name.clone()))?;
        let n = series.t.len();
        if n < 3 {
            return Err(MitigationError::TooFewPoints { want: 3, got: n });
        }
        if series.value.len() != n
            || series.err.len() != n
            || reference.t.len() != n
            || reference.value.len() != n
            || series.t.iter().zip(&reference.t).any(|(a, b)| (a - b).abs() > 1e-9)
        {
            return Err(MitigationError::MisalignedSeries(series.name.clone()));
        }
        let x: Vec<Vec<f64>> = series
            .value
            .iter()
            .zip(&series.t)
            .map(|(&v, &t)| design_row(ansatz, v, t))
            .collect();
        // Inverse-variance weights when real error bars are present; unit
        // weights when the series is exact or unannotated.
        let weighted = series.err.iter().all(|&e| e.is_finite() && e > 0.0);
        let w: Vec<f64> =
            if weighted { series.err.iter().map(|e| 1.0 / (e * e)).collect() } else { vec![1.0; n] };
        let range = reference.value.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - reference.value.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean_err = series.err.iter().sum::<f64>() / n as f64;
        let snr = if mean_err > 0.0 { range / mean_err } else { f64::INFINITY };
        problems.push((series, reference.value.clone(), x, w, snr));
    }

    // Stage 1: unregularised fits where the signal is clear.
    let mut stage1: Vec<(ObservableClass, Vec<f64>)> = Vec::new();
    for (series, y, x, w, snr) in &problems {
        if *snr >= TFLO_SNR_THRESHOLD {
            stage1.push((series.class, solve_regularised(x, y, w, None, p)));
        }
    }

    // Stage 2: per-class coefficient statistics, falling back to the pooled
    // statistics for classes without a stage-1 member.
    let pooled = coefficient_prior(stage1.iter().map(|(_, theta)| theta), p);
    let mut by_class: HashMap<ObservableClass, Vec<&Vec<f64>>> = HashMap::new();
    for (class, theta) in &stage1 {
        by_class.entry(*class).or_default().push(theta);
    }
    let class_priors: HashMap<ObservableClass, Vec<(f64, f64)>> = by_class
        .iter()
        .map(|(class, members)| {
            (*class, coefficient_prior(members.iter().copied(), p).expect("non-empty group"))
        })
        .collect();

    // Stage 3: regularised refit of everything.
    let fits = problems
        .par_iter()
        .map(|(series, y, x, w, _)| {
            let prior = class_priors.get(&series.class).cloned().or_else(|| pooled.clone());
            let theta = solve_regularised(x, y, w, prior.as_deref(), p);
            let (m, c, b) = match ansatz {
                TfloAnsatz::Linear => (theta[0], 0.0, theta[1]),
                TfloAnsatz::LinearLinear => (theta[0], theta[1], theta[2]),
            };
            TFLOFit {
                observable: series.name.clone(),
                class: series.class,
                ansatz,
                m,
                c,
                b,
                residual: fit_rms(x, y, &theta),
                prior,
            }
        })
        .collect();
    Ok(fits)
}

fn coefficient_prior<'a, I>(thetas: I, p: usize) -> Option<Vec<(f64, f64)>>
where
    I: Iterator<Item = &'a Vec<f64>>,
{
    let thetas: Vec<&Vec<f64>> = thetas.collect();
    if thetas.is_empty() {
        return None;
    }
    let n = thetas.len() as f64;
    Some(
        (0..p)
            .map(|j| {
                let mean = thetas.iter().map(|t| t[j]).sum::<f64>() / n;
                let var = thetas.iter().map(|t| (t[j] - mean).powi(2)).sum::<f64>() / n;
                (mean, var.max(PRIOR_VAR_FLOOR))
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Maximum-entropy shot reweighting.

/// Diagonal observables the reweighting can constrain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MesrObservable {
    Z(usize),
    ZZ(usize, usize),
}

impl MesrObservable {
    pub fn eval(&self, bits: &[bool]) -> f64 {
        let z = |q: usize| if bits[q] { -1.0 } else { 1.0 };
        match *self {
            MesrObservable::Z(q) => z(q),
            MesrObservable::ZZ(a, b) => z(a) * z(b),
        }
    }
}

/// Default constraint set: every single-qubit Z, ZZ on lattice-adjacent
/// same-spin pairs, and the on-site up/down pair of every site.
pub fn mesr_constraints(lattice: &LatticeSpec) -> Vec<MesrObservable> {
    let l = lattice.n_sites();
    let mut out: Vec<MesrObservable> = (0..2 * l).map(MesrObservable::Z).collect();
    for e in &lattice.edges {
        out.push(MesrObservable::ZZ(e.a, e.b));
        out.push(MesrObservable::ZZ(l + e.a, l + e.b));
    }
    out.extend((0..l).map(|s| MesrObservable::ZZ(s, l + s)));
    out
}

pub const MESR_DEFAULT_REG: f64 = 1e-3;
const MESR_GRAD_TOL: f64 = 1e-6;
const MESR_MAX_ITERS: usize = 50_000;
const MESR_LAMBDA_BOUND: f64 = 50.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MESRResult {
    /// One multiplier per constrained observable.
    pub lambda: Vec<f64>,
    /// Per-shot weights, non-negative and summing to one.
    pub weights: Vec<f64>,
    /// Effective sample size 1 / sum(w^2).
    pub n_eff: f64,
    pub converged: bool,
    /// Set when the multipliers ran past their bound, the signature of an
    /// infeasible constraint set with no regularisation.
    pub diverged: bool,
    pub c_reg: f64,
    pub iterations: usize,
}

impl MESRResult {
    /// Weighted mean of a per-shot quantity.
    pub fn reweighted(&self, per_shot: &[f64]) -> f64 {
        self.weights.iter().zip(per_shot).map(|(w, v)| w * v).sum()
    }
}

/// Value, gradient and weights of the convex dual objective
/// log(mean exp(lambda.o)) - lambda.target + c |lambda|^2.
fn mesr_objective(
    rows: &[Vec<f64>],
    targets: &[f64],
    lambda: &[f64],
    c_reg: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let scores: Vec<f64> =
        rows.iter().map(|r| r.iter().zip(lambda).map(|(a, b)| a * b).sum()).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
    let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
    let lin: f64 = lambda.iter().zip(targets).map(|(a, b)| a * b).sum();
    let reg: f64 = lambda.iter().map(|x| x * x).sum::<f64>();
    let value = top + z.ln() - n.ln() - lin + c_reg * reg;
    let grad: Vec<f64> = (0..targets.len())
        .map(|k| {
            let mean: f64 = weights.iter().zip(rows).map(|(w, r)| w * r[k]).sum();
            mean - targets[k] + 2.0 * c_reg * lambda[k]
        })
        .collect();
    (value, grad, weights)
}

/// Tilts the empirical shot distribution to match the target expectation
/// values, by gradient descent with backtracking on the convex dual. The
/// schedule is deterministic, so results are reproducible bit for bit.
pub fn mesr(
    table: &ShotTable,
    observables: &[MesrObservable],
    targets: &[f64],
    c_reg: f64,
) -> Result<MESRResult, MitigationError> {
    if observables.len() != targets.len() {
        return Err(MitigationError::ConstraintShape(observables.len(), targets.len()));
    }
    if table.is_empty() {
        return Err(MitigationError::EmptyTable);
    }
    if let Some(k) = targets.iter().position(|v| !v.is_finite()) {
        return Err(MitigationError::NonFinite(k));
    }
    if !c_reg.is_finite() || c_reg < 0.0 {
        return Err(MitigationError::NonFinite(observables.len()));
    }
    let rows: Vec<Vec<f64>> = table
        .bit_rows()?
        .iter()
        .map(|bits| observables.iter().map(|o| o.eval(bits)).collect())
        .collect();

    let k = targets.len();
    let mut lambda = vec![0.0; k];
    let (mut value, mut grad, mut weights) = mesr_objective(&rows, targets, &lambda, c_reg);
    let mut step = 1.0;
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;
    for _ in 0..MESR_MAX_ITERS {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= MESR_GRAD_TOL {
            converged = true;
            break;
        }
        if lambda.iter().map(|x| x * x).sum::<f64>().sqrt() > MESR_LAMBDA_BOUND {
            diverged = true;
            break;
        }
        // Backtracking line search: halve until the Armijo decrease holds,
        // then let the step grow again.
        let mut accepted = false;
        while step > 1e-18 {
            let trial: Vec<f64> =
                lambda.iter().zip(&grad).map(|(l, g)| l - step * g).collect();
            let (v, g, w) = mesr_objective(&rows, targets, &trial, c_reg);
            if v <= value - 1e-4 * step * gnorm * gnorm {
                lambda = trial;
                debug_assert!(v <= value + 1e-12);
                value = v;
                grad = g;
                weights = w;
                step *= 2.0;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    let n_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    Ok(MESRResult { lambda, weights, n_eff, converged, diverged, c_reg, iterations })
}

// ---------------------------------------------------------------------------
// Gaussian-process smoothing.

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GprParams {
    pub length_scale: f64,
    /// Multiplier on the per-point error bars entering the noise diagonal.
    pub noise_scale: f64,
}

impl Default for GprParams {
    fn default() -> Self {
        GprParams { length_scale: 0.4, noise_scale: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GprPosterior {
    pub mean: Vec<f64>,
    /// One posterior standard deviation, the 68% band half-width.
    pub band: Vec<f64>,
}

fn rbf(a: f64, b: f64, l: f64) -> f64 {
    (-(a - b).powi(2) / (2.0 * l * l)).exp()
}

/// Posterior of a unit-variance squared-exponential GP conditioned on the
/// points `(t, y)` with noise `(noise_scale * err)^2`, evaluated at `query`.
pub fn gpr_smooth(
    t: &[f64],
    y: &[f64],
    err: &[f64],
    query: &[f64],
    params: &GprParams,
) -> Result<GprPosterior, MitigationError> {
    let n = t.len();
    if n < 2 {
        return Err(MitigationError::TooFewPoints { want: 2, got: n });
    }
    if y.len() != n || err.len() != n {
        return Err(MitigationError::WidthMismatch { want: n, got: y.len().min(err.len()) });
    }
    for (k, v) in t.iter().chain(y).chain(err).chain(query).enumerate() {
        if !v.is_finite() {
            return Err(MitigationError::NonFinite(k));
        }
    }
    if !(params.length_scale > 0.0) || !(params.noise_scale >= 0.0) {
        return Err(MitigationError::NonFinite(0));
    }
    let l = params.length_scale;
    let mut k_train = DMatrix::from_fn(n, n, |i, j| rbf(t[i], t[j], l));
    for i in 0..n {
        k_train[(i, i)] += (params.noise_scale * err[i]).powi(2);
    }
    // Escalating jitter keeps duplicated time points with tiny error bars
    // factorisable.
    let mut chol = None;
    for jitter in [1e-10, 1e-8, 1e-6] {
        let mut kj = k_train.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = kj.cholesky() {
            chol = Some(c);
            break;
        }
    }
    let chol = chol.ok_or(MitigationError::NonFinite(0))?;
    let alpha = chol.solve(&DVector::from_column_slice(y));
    let mut mean = Vec::with_capacity(query.len());
    let mut band = Vec::with_capacity(query.len());
    for &q in query {
        let kq = DVector::from_fn(n, |i, _| rbf(t[i], q, l));
        mean.push(kq.dot(&alpha));
        let v = chol.solve(&kq);
        band.push((1.0 - kq.dot(&v)).max(0.0).sqrt());
    }
    Ok(GprPosterior { mean, band })
}

// ---------------------------------------------------------------------------
// Symmetry averaging.

#[derive(Debug, Clone)]
pub struct SymmetryAveraged {
    pub values: Vec<f64>,
    /// Orbit partition over mode indices; every mode appears exactly once.
    pub orbits: Vec<Vec<usize>>,
    /// Size of the symmetry group found, identity included.
    pub n_symmetries: usize,
}

/// Spatial maps to test for state invariance: the rectangle's reflections,
/// plus the transpositions when the lattice is square.
fn candidate_maps(lx: usize, ly: usize) -> Vec<Box<dyn Fn(usize, usize) -> (usize, usize)>> {
    let mut maps: Vec<Box<dyn Fn(usize, usize) -> (usize, usize)>> = vec![
        Box::new(|x, y| (x, y)),
        Box::new(move |x, y| (lx - 1 - x, y)),
        Box::new(move |x, y| (x, ly - 1 - y)),
        Box::new(move |x, y| (lx - 1 - x, ly - 1 - y)),
    ];
    if lx == ly {
        maps.push(Box::new(|x, y| (y, x)));
        maps.push(Box::new(move |x, y| (ly - 1 - y, lx - 1 - x)));
        maps.push(Box::new(move |x, y| (y, lx - 1 - x)));
        maps.push(Box::new(move |x, y| (ly - 1 - y, x)));
    }
    maps
}

/// Whether the site permutation (plus optional spin flip) maps the initial
/// state onto itself. Singlet blocks are spin-flip even up to a global
/// phase, so they only need to map onto the pair set.
fn preserves_state(state: &InitialStateSpec, perm: &[usize], spin_flip: bool) -> bool {
    let pairs: Vec<(usize, usize)> = state
        .singlet_pairs
        .iter()
        .map(|&(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
        .collect();
    for mapped in &pairs {
        if !state
            .singlet_pairs
            .iter()
            .any(|&(a, b)| (a.min(b), a.max(b)) == *mapped)
        {
            return false;
        }
    }
    state.pattern.iter().enumerate().all(|(s, p)| {
        let q = &state.pattern[perm[s]];
        match (p, spin_flip) {
            (SitePattern::Hole, _) => matches!(q, SitePattern::Hole),
            (SitePattern::Up, false) | (SitePattern::Down, true) => {
                matches!(q, SitePattern::Up)
            }
            (SitePattern::Down, false) | (SitePattern::Up, true) => {
                matches!(q, SitePattern::Down)
            }
            (SitePattern::Singlet(_), _) => matches!(q, SitePattern::Singlet(_)),
        }
    })
}

/// Replaces each mode's Z expectation by the mean over its orbit under the
/// lattice reflections that preserve the initial state, combined with the
/// global spin flip. Z values carry no sign under either, so the orbit
/// mean is the estimator.
pub fn symmetry_average(
    values: &[f64],
    model: &ModelSpec,
    state: &InitialStateSpec,
) -> Result<SymmetryAveraged, MitigationError> {
    let l = model.lattice.n_sites();
    if values.len() != 2 * l {
        return Err(MitigationError::WidthMismatch { want: 2 * l, got: values.len() });
    }
    let mut mode_perms: Vec<Vec<usize>> = Vec::new();
    for map in candidate_maps(model.lattice.lx, model.lattice.ly) {
        let perm: Vec<usize> = (0..l)
            .map(|s| {
                let (x, y) = model.lattice.coords(s);
                let (nx, ny) = map(x, y);
                model.lattice.site_index(nx, ny)
            })
            .collect();
        for spin_flip in [false, true] {
            if preserves_state(state, &perm, spin_flip) {
                let mode_perm: Vec<usize> = (0..2 * l)
                    .map(|m| {
                        let (site, down) = if m < l { (m, false) } else { (m - l, true) };
                        let target = perm[site];
                        if down ^ spin_flip {
                            l + target
                        } else {
                            target
                        }
                    })
                    .collect();
                mode_perms.push(mode_perm);
            }
        }
    }
    let n_symmetries = mode_perms.len();
    // Orbits by breadth-first closure under all permutations.
    let mut orbit_of = vec![usize::MAX; 2 * l];
    let mut orbits: Vec<Vec<usize>> = Vec::new();
    for start in 0..2 * l {
        if orbit_of[start] != usize::MAX {
            continue;
        }
        let id = orbits.len();
        let mut frontier = vec![start];
        orbit_of[start] = id;
        let mut members = vec![start];
        while let Some(m) = frontier.pop() {
            for perm in &mode_perms {
                let im = perm[m];
                if orbit_of[im] == usize::MAX {
                    orbit_of[im] = id;
                    members.push(im);
                    frontier.push(im);
                }
            }
        }
        members.sort_unstable();
        orbits.push(members);
    }
    let mut averaged = vec![0.0; 2 * l];
    for orbit in &orbits {
        let mean = orbit.iter().map(|&m| values[m]).sum::<f64>() / orbit.len() as f64;
        for &m in orbit {
            averaged[m] = mean;
        }
    }
    Ok(SymmetryAveraged { values: averaged, orbits, n_symmetries })
}

// ---------------------------------------------------------------------------
// Error bars.

/// Per-twirl summary statistics of one observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwirlStats {
    /// Sample mean per twirl instance.
    pub means: Vec<f64>,
    /// Unbiased single-shot sample variance per twirl instance.
    pub vars: Vec<f64>,
    /// Shots per twirl instance.
    pub n_shots: usize,
}

impl TwirlStats {
    /// Builds the summary from raw per-shot values grouped by twirl; every
    /// group must hold the same number (at least two) of shots.
    pub fn from_values(groups: &[Vec<f64>]) -> Result<Self, MitigationError> {
        if groups.len() < 2 {
            return Err(MitigationError::TooFewTwirls(groups.len()));
        }
        let n_shots = groups[0].len();
        if n_shots < 2 || groups.iter().any(|g| g.len() != n_shots) {
            return Err(MitigationError::RaggedStats);
        }
        let mut means = Vec::with_capacity(groups.len());
        let mut vars = Vec::with_capacity(groups.len());
        for g in groups {
            let mean = g.iter().sum::<f64>() / n_shots as f64;
            let var =
                g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_shots - 1) as f64;
            means.push(mean);
            vars.push(var);
        }
        Ok(TwirlStats { means, vars, n_shots })
    }
}

/// Standard error of the grand mean over twirl instances: scatter of the
/// per-twirl means plus the propagated in-twirl shot noise.
pub fn propagate_error(stats: &TwirlStats) -> Result<f64, MitigationError> {
    let nt = stats.means.len();
    if nt < 2 {
        return Err(MitigationError::TooFewTwirls(nt));
    }
    if stats.vars.len() != nt || stats.n_shots == 0 {
        return Err(MitigationError::RaggedStats);
    }
    let mean = stats.means.iter().sum::<f64>() / nt as f64;
    let scatter: f64 = stats.means.iter().map(|m| (m - mean).powi(2)).sum();
    let shot_noise: f64 = stats.vars.iter().sum();
    let nt = nt as f64;
    let var = scatter / (nt * (nt - 1.0)) + shot_noise / (nt * nt * stats.n_shots as f64);
    Ok(var.sqrt())
}

/// Nested bootstrap over twirl instances and shots: resamples the groups
/// with replacement, then the shots within each drawn group, and reports
/// the standard deviation of the pipeline outputs across resamples.
pub fn bootstrap<F>(
    groups: &[ShotTable],
    pipeline: F,
    n_resamples: usize,
    seed: u64,
) -> Result<Vec<f64>, MitigationError>
where
    F: Fn(&ShotTable) -> Vec<f64> + Sync,
{
    if n_resamples < 10 {
        return Err(MitigationError::TooFewResamples(n_resamples));
    }
    if groups.is_empty() {
        return Err(MitigationError::TooFewTwirls(0));
    }
    if groups.iter().any(|g| g.is_empty()) {
        return Err(MitigationError::EmptyTable);
    }
    let outputs: Vec<Vec<f64>> = (0..n_resamples as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_add((k + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            let mut records = Vec::new();
            for _ in 0..groups.len() {
                let g = &groups[rng.gen_range(0..groups.len())];
                for _ in 0..g.len() {
                    records.push(g.records[rng.gen_range(0..g.len())].clone());
                }
            }
            pipeline(&ShotTable { records })
        })
        .collect();
    let width = outputs[0].len();
    if outputs.iter().any(|o| o.len() != width) {
        return Err(MitigationError::RaggedStats);
    }
    let n = n_resamples as f64;
    Ok((0..width)
        .map(|j| {
            let mean = outputs.iter().map(|o| o[j]).sum::<f64>() / n;
            (outputs.iter().map(|o| (o[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Persisted model.

/// Everything a later analysis run needs to reproduce the mitigation:
/// the trained fits, reweighting multipliers, and smoothing settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MitigationModel {
    pub tflo: Vec<TFLOFit>,
    pub mesr_lambda: Option<Vec<f64>>,
    pub mesr_c_reg: f64,
    pub gpr: GprParams,
}

impl MitigationModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mitigation model serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, MitigationError> {
        serde_json::from_str(s).map_err(|e| MitigationError::Shots(ShotError::Json(e.to_string())))
    }
}
