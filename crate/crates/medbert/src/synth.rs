//! Deterministic synthetic EHR cohort generator with a plantable
//! outcome signal, plus cohort splitting and bootstrap subsampling.
//!
//! Code usage follows a Zipf law over a synthetic vocabulary. A fixed
//! band of mid-frequency "risk codes" raises a patient's outcome
//! probability in log-odds; the base log-odds is calibrated against the
//! generated cohort so the empirical prevalence matches the configured
//! one. Prolonged-LOS labels are correlated with total code burden.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, Zipf};

use crate::ehr::{order_codes_within_visit, DiagnosisCode, PatientRecord, Visit};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Number of distinct synthetic codes (reserved tokens excluded).
    pub vocab_size: usize,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub outcome_prevalence: f64,
    /// Log-odds added to the outcome per risk-code occurrence (capped).
    pub signal_strength: f64,
    pub prolonged_los_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 1000,
            vocab_size: 500,
            mean_visits: 8.0,
            mean_codes_per_visit: 2.0,
            outcome_prevalence: 0.3,
            signal_strength: 2.0,
            prolonged_los_rate: 0.3,
            seed: 42,
        }
    }
}

/// Risk-code occurrences beyond this count add no further log-odds.
const RISK_COUNT_CAP: u32 = 4;
/// Zipf exponent for code frequencies.
const ZIPF_EXPONENT: f64 = 1.05;
/// Log-odds contribution of one standard deviation of code burden to
/// the prolonged-LOS probability.
const LOS_BURDEN_COEF: f64 = 1.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::config("n_patients", "must be positive"));
        }
        if self.vocab_size < 10 {
            return Err(Error::config("vocab_size", "must be at least 10"));
        }
        if !(self.mean_visits > 0.0) {
            return Err(Error::config("mean_visits", "must be positive"));
        }
        if !(self.mean_codes_per_visit > 0.0) {
            return Err(Error::config("mean_codes_per_visit", "must be positive"));
        }
        if !(0.0 < self.outcome_prevalence && self.outcome_prevalence < 1.0) {
            return Err(Error::config("outcome_prevalence", "must be in (0,1)"));
        }
        if self.signal_strength < 0.0 {
            return Err(Error::config("signal_strength", "must be non-negative"));
        }
        if !(0.0 < self.prolonged_los_rate && self.prolonged_los_rate < 1.0) {
            return Err(Error::config("prolonged_los_rate", "must be in (0,1)"));
        }
        Ok(())
    }

    /// Zipf ranks (1-based) designated as risk codes: a mid-frequency
    /// band so occurrence counts vary across patients.
    pub fn risk_ranks(&self) -> std::ops::Range<u64> {
        let n_risk = (self.vocab_size / 20).max(5) as u64;
        10..10 + n_risk
    }

    pub fn code_string(rank: u64) -> String {
        format!("C{rank:05}")
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Solve `mean(sigmoid(base + offsets[i])) = target` for `base`.
fn calibrate_base(offsets: &[f64], target: f64) -> f64 {
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let mean: f64 =
            offsets.iter().map(|&o| sigmoid(mid + o)).sum::<f64>() / offsets.len() as f64;
        if mean < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct Skeleton {
    visits: Vec<Visit>,
    risk_count: u32,
    total_codes: usize,
}

fn generate_skeleton(config: &SynthConfig, index: usize) -> Skeleton {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2 * index as u64);
    let visit_law = Poisson::new((config.mean_visits - 1.0).max(1e-9)).unwrap();
    let code_law = Poisson::new((config.mean_codes_per_visit - 1.0).max(1e-9)).unwrap();
    let zipf = Zipf::new(config.vocab_size as f64, ZIPF_EXPONENT).unwrap();
    let risk = config.risk_ranks();

    let n_visits = 1 + visit_law.sample(&mut rng) as usize;
    let mut visits = Vec::with_capacity(n_visits);
    let mut risk_count = 0u32;
    let mut total_codes = 0usize;
    for v in 0..n_visits {
        let mut n_codes = 1 + code_law.sample(&mut rng) as usize;
        // selection rule: at least three codes per patient
        if v == n_visits - 1 {
            let remaining_min = 3usize.saturating_sub(total_codes);
            n_codes = n_codes.max(remaining_min);
        }
        let mut codes = Vec::with_capacity(n_codes);
        for _ in 0..n_codes {
            let rank = zipf.sample(&mut rng).round() as u64;
            if risk.contains(&rank) {
                risk_count += 1;
            }
            codes.push(DiagnosisCode::new(
                SynthConfig::code_string(rank),
                rng.random_bool(0.5),
                rng.random_bool(0.5),
                rng.random_range(0..10u32),
            ));
        }
        total_codes += codes.len();
        let visit = Visit { codes, los_days: 0 };
        visits.push(order_codes_within_visit(&visit).unwrap());
    }
    Skeleton {
        visits,
        risk_count,
        total_codes,
    }
}

/// Generate exactly `n_patients` records, fully determined by the seed.
pub fn generate_cohort(config: &SynthConfig) -> Result<Vec<PatientRecord>> {
    config.validate()?;
    let skeletons: Vec<Skeleton> = (0..config.n_patients)
        .map(|i| generate_skeleton(config, i))
        .collect();

    // outcome: calibrated base log-odds + signal per capped risk count
    let outcome_offsets: Vec<f64> = skeletons
        .iter()
        .map(|s| config.signal_strength * s.risk_count.min(RISK_COUNT_CAP) as f64)
        .collect();
    let outcome_base = calibrate_base(&outcome_offsets, config.outcome_prevalence);

    // prolonged LOS: calibrated base + standardized code burden
    let mean_burden = skeletons.iter().map(|s| s.total_codes as f64).sum::<f64>()
        / skeletons.len() as f64;
    let var_burden = skeletons
        .iter()
        .map(|s| (s.total_codes as f64 - mean_burden).powi(2))
        .sum::<f64>()
        / skeletons.len() as f64;
    let std_burden = var_burden.sqrt().max(1e-9);
    let los_offsets: Vec<f64> = skeletons
        .iter()
        .map(|s| LOS_BURDEN_COEF * (s.total_codes as f64 - mean_burden) / std_burden)
        .collect();
    let los_base = calibrate_base(&los_offsets, config.prolonged_los_rate);

    let mut cohort = Vec::with_capacity(config.n_patients);
    for (i, skeleton) in skeletons.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2 * i as u64 + 1);

        let outcome = rng.random::<f64>() < sigmoid(outcome_base + outcome_offsets[i]);
        let prolonged = rng.random::<f64>() < sigmoid(los_base + los_offsets[i]);

        let mut visits = skeleton.visits;
        for visit in visits.iter_mut() {
            visit.los_days = (rng.random_range(0.0..1.0) * 8.0) as u32; // 0..=7
        }
        if prolonged {
            let idx = rng.random_range(0..visits.len());
            let extra = Poisson::new(4.0f64).unwrap().sample(&mut rng) as u32;
            visits[idx].los_days = 8 + extra;
        }

        cohort.push(PatientRecord {
            patient_id: format!("synth-{i:07}"),
            outcome_label: Some(outcome),
            visits,
        });
    }
    Ok(cohort)
}

#[derive(Debug)]
pub struct CohortSplit {
    pub train: Vec<PatientRecord>,
    pub valid: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
}

/// Seeded uniform partition. Sizes are floor allocations with the
/// remainder going to train.
pub fn split_cohort(
    cohort: &[PatientRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CohortSplit> {
    let (r_train, r_valid, r_test) = ratios;
    if r_train <= 0.0 || r_valid <= 0.0 || r_test <= 0.0 {
        return Err(Error::config("ratios", "all must be positive"));
    }
    if (r_train + r_valid + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::config("ratios", "must sum to 1"));
    }
    if cohort.len() < 3 {
        return Err(Error::TooSmall {
            need: 3,
            got: cohort.len(),
        });
    }
    let n = cohort.len();
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n_valid = (n as f64 * r_valid).floor() as usize;
    let n_test = (n as f64 * r_test).floor() as usize;
    let n_train = n - n_valid - n_test;
    let pick = |slice: &[usize]| -> Vec<PatientRecord> {
        slice.iter().map(|&i| cohort[i].clone()).collect()
    };
    Ok(CohortSplit {
        train: pick(&indices[..n_train]),
        valid: pick(&indices[n_train..n_train + n_valid]),
        test: pick(&indices[n_train + n_valid..]),
    })
}

/// Uniform sample of `size` patients without replacement, retried until
/// both outcome classes are present (up to 100 tries).
pub fn subsample_training(
    train: &[PatientRecord],
    size: usize,
    replicate_seed: u64,
) -> Result<Vec<PatientRecord>> {
    if size == 0 || size > train.len() {
        return Err(Error::Range {
            index: size,
            limit: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(replicate_seed);
    const MAX_TRIES: usize = 100;
    for _ in 0..MAX_TRIES {
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(size);
        let sample: Vec<PatientRecord> = indices.iter().map(|&i| train[i].clone()).collect();
        let pos = sample.iter().any(|p| p.outcome_label == Some(true));
        let neg = sample.iter().any(|p| p.outcome_label == Some(false));
        if (pos && neg) || size == train.len() {
            return Ok(sample);
        }
    }
    Err(Error::DegenerateSample(MAX_TRIES))
}
