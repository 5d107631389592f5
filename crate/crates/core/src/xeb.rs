//! Linear cross-entropy benchmarking against the free-fermion sampler,
//! plus spherical model scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flo::{CollisionEstimate, FloError};
use crate::shots::{ShotError, ShotTable};

#[derive(Debug, Error)]
pub enum XebError {
    #[error("fidelity undefined: C*D = 1 within error (C = {c}, D = {d})")]
    UndefinedFidelity { c: f64, d: usize },
    #[error("no usable shots")]
    NoShots,
    #[error("model norm must be positive, got {0}")]
    ZeroNorm(f64),
    #[error("expected {want} bits per shot, got {got}")]
    WidthMismatch { want: usize, got: usize },
    #[error(transparent)]
    Flo(#[from] FloError),
    #[error(transparent)]
    Shots(#[from] ShotError),
}

/// What to do with shots outside the target particle-number sector, where
/// the ideal probability is identically zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfSector {
    /// Discard before averaging and report the count separately.
    Drop,
    /// Keep the zero-probability entries in the average.
    Retain,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct XEBReport {
    /// Sector dimension D.
    pub sector_dim: usize,
    /// Collision probability of the reference sampler.
    pub collision: f64,
    pub collision_se: Option<f64>,
    /// Mean ideal probability of the observed samples.
    pub mean_p_ideal: f64,
    pub mean_p_se: f64,
    pub fidelity: f64,
    pub fidelity_se: f64,
    pub t: f64,
    /// Samples entering the average.
    pub n_samples: usize,
    /// Out-of-sector samples dropped before averaging.
    pub n_dropped: usize,
    /// Set when C - 1/D is below ten times its standard error, where the
    /// fidelity denominator is too poorly resolved to trust.
    pub short_time_warning: bool,
}

/// Linear cross-entropy fidelity of a shot table against an ideal
/// probability oracle: F = (D <p_ideal> - 1) / (C D - 1).
///
/// `target` is the particle-number sector (N_up, N_down) that defines
/// sector membership for the out-of-sector convention; `collision` carries
/// both C and D for the reference distribution.
pub fn linear_xeb(
    table: &ShotTable,
    p_ideal: impl Fn(&[bool]) -> Result<f64, FloError> + Sync,
    collision: &CollisionEstimate,
    target: (usize, usize),
    convention: OutOfSector,
) -> Result<XEBReport, XebError> {
    let rows = table.bit_rows()?;
    if rows.is_empty() {
        return Err(XebError::NoShots);
    }
    let width = rows[0].len();
    let l = width / 2;
    let in_sector = |bits: &[bool]| {
        bits[..l].iter().filter(|&&b| b).count() == target.0
            && bits[l..].iter().filter(|&&b| b).count() == target.1
    };
    let mut used: Vec<&Vec<bool>> = Vec::with_capacity(rows.len());
    let mut n_dropped = 0;
    for bits in &rows {
        if bits.len() != width {
            return Err(XebError::WidthMismatch { want: width, got: bits.len() });
        }
        if in_sector(bits) || convention == OutOfSector::Retain {
            used.push(bits);
        } else {
            n_dropped += 1;
        }
    }
    if used.is_empty() {
        return Err(XebError::NoShots);
    }
    let ps: Vec<f64> = used
        .par_iter()
        .map(|bits| {
            if in_sector(bits) {
                p_ideal(bits)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<_, _>>()?;

    let n = ps.len() as f64;
    let mean_p = ps.iter().sum::<f64>() / n;
    let var_p = ps.iter().map(|p| (p - mean_p).powi(2)).sum::<f64>()
        / (ps.len().saturating_sub(1)).max(1) as f64;
    let mean_p_se = (var_p / n).sqrt();

    let d = collision.sector_dim as f64;
    let c_se = collision.std_err.unwrap_or(0.0);
    let denom = collision.value * d - 1.0;
    let denom_se = c_se * d;
    if denom.abs() <= denom_se || denom == 0.0 {
        return Err(XebError::UndefinedFidelity {
            c: collision.value,
            d: collision.sector_dim,
        });
    }
    let fidelity = (d * mean_p - 1.0) / denom;
    // First-order propagation through numerator and denominator; the two
    // estimates come from independent sample sets.
    let fidelity_se = ((d * mean_p_se / denom).powi(2)
        + (fidelity * denom_se / denom).powi(2))
    .sqrt();

    Ok(XEBReport {
        sector_dim: collision.sector_dim,
        collision: collision.value,
        collision_se: collision.std_err,
        mean_p_ideal: mean_p,
        mean_p_se,
        fidelity,
        fidelity_se,
        t: table.records[0].t,
        n_samples: ps.len(),
        n_dropped,
        short_time_warning: denom < 10.0 * denom_se,
    })
}

/// Spherical score of a model against samples from some generator: the
/// mean model probability of the samples over the model's l2 norm. The
/// score of the generator itself is its own l2 norm, which upper-bounds
/// every competing model.
pub fn spherical_score(
    model_probs_on_shots: &[f64],
    model_l2_norm: f64,
) -> Result<f64, XebError> {
    if !(model_l2_norm > 0.0) {
        return Err(XebError::ZeroNorm(model_l2_norm));
    }
    if model_probs_on_shots.is_empty() {
        return Err(XebError::NoShots);
    }
    let mean =
        model_probs_on_shots.iter().sum::<f64>() / model_probs_on_shots.len() as f64;
    Ok(mean / model_l2_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flo::{
        amplitude, collision_probability, propagator, sample_flo, CollisionMethod,
        FLOInitial, PropagatorMode, Propagator,
    };
    use crate::model::{build_initial_state, build_model, Flux, ModelSpec, StateKind, StateParams};
    use crate::shots::{bits_to_string, ShotRecord};
    use approx::assert_abs_diff_eq;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn free_setup(t: f64) -> (ModelSpec, crate::model::InitialStateSpec, Propagator, FLOInitial) {
        let model = build_model(2, 3, 0.0, Flux::Pi).unwrap();
        let state = build_initial_state(
            &model,
            StateKind::NeelWithHoles,
            &StateParams::NeelWithHoles { holes: vec![] },
        )
        .unwrap();
        let prop = propagator(&model, t, PropagatorMode::Continuous).unwrap();
        let initial = FLOInitial::from_state(&state);
        (model, state, prop, initial)
    }

    fn table_at(t: f64, rows: Vec<String>) -> ShotTable {
        ShotTable::new(
            rows.into_iter()
                .map(|bits| ShotRecord {
                    bits,
                    t,
                    u: 0.0,
                    flux: Flux::Pi,
                    twirl_id: None,
                    mask: None,
                })
                .collect(),
        )
        .unwrap()
    }

    /// All sector bitstrings of a 6-site lattice at (3, 3) filling.
    fn sector_bitstrings() -> Vec<Vec<bool>> {
        let mut out = Vec::new();
        for up in 0u32..64 {
            if up.count_ones() != 3 {
                continue;
            }
            for down in 0u32..64 {
                if down.count_ones() != 3 {
                    continue;
                }
                let mut bits = vec![false; 12];
                for m in 0..6 {
                    bits[m] = (up >> m) & 1 == 1;
                    bits[6 + m] = (down >> m) & 1 == 1;
                }
                out.push(bits);
            }
        }
        out
    }

    #[test]
    fn a_mean_probability_equal_to_the_collision_value_scores_unit_fidelity() {
        // D = 4, C = 0.3, <p> = 0.3 gives F = (4*0.3 - 1)/(4*0.3 - 1) = 1.
        let collision = CollisionEstimate { value: 0.3, std_err: None, sector_dim: 4 };
        let table = table_at(0.5, vec!["10".to_string(); 8]);
        let report = linear_xeb(
            &table,
            |_| Ok(0.3),
            &collision,
            (1, 0),
            OutOfSector::Drop,
        )
        .unwrap();
        assert_abs_diff_eq!(report.fidelity, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_p_ideal, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean_p_se, 0.0, epsilon = 1e-12);
        assert_eq!(report.n_samples, 8);
        assert!(!report.short_time_warning);
    }

    #[test]
    fn self_sampling_reaches_unit_fidelity() {
        let (_, _, prop, initial) = free_setup(1.0);
        let shots = sample_flo(&prop, &initial, 10_000, 11).unwrap();
        let collision =
            collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
                .unwrap();
        let report = linear_xeb(
            &shots,
            |bits| amplitude(&prop, &initial, bits),
            &collision,
            initial.particle_numbers(),
            OutOfSector::Drop,
        )
        .unwrap();
        assert_eq!(report.n_dropped, 0);
        assert_eq!(report.sector_dim, 400);
        assert!(
            (report.fidelity - 1.0).abs() < 3.0 * report.fidelity_se,
            "F = {} +- {}",
            report.fidelity,
            report.fidelity_se
        );
    }

    #[test]
    fn uniform_sector_samples_score_zero_fidelity() {
        let (_, _, prop, initial) = free_setup(1.0);
        let configs = sector_bitstrings();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<String> = (0..6000)
            .map(|_| bits_to_string(&configs[rng.gen_range(0..configs.len())]))
            .collect();
        let collision =
            collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
                .unwrap();
        let report = linear_xeb(
            &table_at(1.0, rows),
            |bits| amplitude(&prop, &initial, bits),
            &collision,
            (3, 3),
            OutOfSector::Drop,
        )
        .unwrap();
        assert!(
            report.fidelity.abs() < 3.0 * report.fidelity_se,
            "F = {} +- {}",
            report.fidelity,
            report.fidelity_se
        );
    }

    #[test]
    fn depolarized_samples_report_the_mixing_fraction() {
        let (_, _, prop, initial) = free_setup(1.0);
        let f0 = 0.6;
        let n = 10_000;
        let ideal = sample_flo(&prop, &initial, n, 29).unwrap();
        let configs = sector_bitstrings();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<String> = ideal
            .records
            .iter()
            .map(|r| {
                if rng.gen_bool(f0) {
                    r.bits.clone()
                } else {
                    bits_to_string(&configs[rng.gen_range(0..configs.len())])
                }
            })
            .collect();
        let collision =
            collision_probability(&prop, &initial, CollisionMethod::ExactEnumeration)
                .unwrap();
        let report = linear_xeb(
            &table_at(1.0, rows),
            |bits| amplitude(&prop, &initial, bits),
            &collision,
            (3, 3),
            OutOfSector::Drop,
        )
        .unwrap();
        assert!(
            (report.fidelity - f0).abs() < 3.0 * report.fidelity_se,
            "F = {} +- {} vs mixed fraction {}",
            report.fidelity,
            report.fidelity_se,
            f0
        );
    }

    #[test]
    fn the_two_out_of_sector_conventions_differ_as_designed() {
        let collision = CollisionEstimate { value: 0.8, std_err: None, sector_dim: 2 };
        // Two in-sector shots and two out-of-sector ones.
        let table = table_at(
            0.2,
            vec!["10".into(), "10".into(), "11".into(), "00".into()],
        );
        let oracle = |bits: &[bool]| {
            Ok(if bits[0] && !bits[1] { 0.9 } else { 0.0 })
        };
        let dropped =
            linear_xeb(&table, oracle, &collision, (1, 0), OutOfSector::Drop).unwrap();
        assert_eq!(dropped.n_samples, 2);
        assert_eq!(dropped.n_dropped, 2);
        assert_abs_diff_eq!(dropped.mean_p_ideal, 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(dropped.fidelity, 0.8 / 0.6, epsilon = 1e-12);

        let retained =
            linear_xeb(&table, oracle, &collision, (1, 0), OutOfSector::Retain).unwrap();
        assert_eq!(retained.n_samples, 4);
        assert_eq!(retained.n_dropped, 0);
        assert_abs_diff_eq!(retained.mean_p_ideal, 0.45, epsilon = 1e-12);
        assert!(retained.fidelity < dropped.fidelity);
    }

    #[test]
    fn an_unresolved_denominator_is_rejected_or_flagged() {
        let table = table_at(0.1, vec!["10".to_string(); 4]);
        // C exactly at the uniform floor: the denominator vanishes.
        let flat = CollisionEstimate { value: 0.25, std_err: None, sector_dim: 4 };
        assert!(matches!(
            linear_xeb(&table, |_| Ok(0.3), &flat, (1, 0), OutOfSector::Drop),
            Err(XebError::UndefinedFidelity { .. })
        ));

        // One standard error away: still undefined.
        let buried = CollisionEstimate {
            value: 0.255,
            std_err: Some(0.01),
            sector_dim: 4,
        };
        assert!(matches!(
            linear_xeb(&table, |_| Ok(0.3), &buried, (1, 0), OutOfSector::Drop),
            Err(XebError::UndefinedFidelity { .. })
        ));

        // C - 1/D = 0.05 sits under ten standard errors of C: defined but
        // flagged as poorly resolved.
        let marginal = CollisionEstimate {
            value: 0.3,
            std_err: Some(0.0075),
            sector_dim: 4,
        };
        let report = linear_xeb(&table, |_| Ok(0.3), &marginal, (1, 0), OutOfSector::Drop)
            .unwrap();
        assert!(report.short_time_warning);
        assert!(report.fidelity_se > 0.0);

        // Fifty standard errors: clean.
        let resolved = CollisionEstimate {
            value: 0.3,
            std_err: Some(0.00025),
            sector_dim: 4,
        };
        let report = linear_xeb(&table, |_| Ok(0.3), &resolved, (1, 0), OutOfSector::Drop)
            .unwrap();
        assert!(!report.short_time_warning);
    }

    #[test]
    fn the_generator_scores_its_own_norm_and_uniform_scores_its_floor() {
        let (_, _, prop, initial) = free_setup(1.0);
        let configs = sector_bitstrings();
        let probs: Vec<f64> = configs
            .iter()
            .map(|bits| amplitude(&prop, &initial, bits).unwrap())
            .collect();
        let total: f64 = probs.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
        let norm = probs.iter().map(|p| p * p).sum::<f64>().sqrt();

        // Exact expectation over the generator distribution instead of
        // sampling: weight each model probability by the generator's.
        let self_mean: f64 = probs.iter().map(|p| p * p).sum();
        let s_self = self_mean / norm;
        assert_abs_diff_eq!(s_self, norm, epsilon = 1e-12);

        // A uniform generator hits the same model at its floor score.
        let uniform_mean = total / configs.len() as f64;
        let s_uniform = spherical_score(&vec![uniform_mean; 10], norm).unwrap();
        assert_abs_diff_eq!(
            s_uniform,
            1.0 / (configs.len() as f64 * norm),
            epsilon = 1e-12
        );
        assert!(s_uniform < s_self);

        assert!(matches!(
            spherical_score(&[0.1], 0.0),
            Err(XebError::ZeroNorm(_))
        ));
        assert!(matches!(spherical_score(&[], 1.0), Err(XebError::NoShots)));
    }

    #[test]
    fn the_generating_model_beats_every_rival_score() {
        // Exact expectations over the generator at t = 1.0, scored against
        // the generator model itself and two rivals from other times. The
        // spherical score is proper, so the generator must win strictly.
        let (_, _, gen_prop, initial) = free_setup(1.0);
        let configs = sector_bitstrings();
        let gen_probs: Vec<f64> = configs
            .iter()
            .map(|bits| amplitude(&gen_prop, &initial, bits).unwrap())
            .collect();

        let mut scores = Vec::new();
        for t in [1.0, 0.5, 0.8] {
            let (_, _, prop, initial_m) = free_setup(t);
            let model_probs: Vec<f64> = configs
                .iter()
                .map(|bits| amplitude(&prop, &initial_m, bits).unwrap())
                .collect();
            let norm = model_probs.iter().map(|p| p * p).sum::<f64>().sqrt();
            let mean: f64 =
                gen_probs.iter().zip(&model_probs).map(|(g, m)| g * m).sum();
            scores.push(mean / norm);
        }
        assert!(
            scores[0] > scores[1] && scores[0] > scores[2],
            "generator {} vs rivals {} and {}",
            scores[0],
            scores[1],
            scores[2]
        );
    }
}
