//! Synthetic cohort standing in for an imaging biobank.
//!
//! Covariates `ν` are drawn from fixed marginals; the lumped parameters `y`
//! are log-linear in standardized covariates with lognormal noise; cardiac
//! measurements come from simulating the lumped model plus measurement
//! noise. Brain volumes are generated directly in head-size-normalized
//! units.

use super::{Column, CohortError, FeatureTable, CSV_COLUMNS};
use crate::heart::{self, HeartError, LumpedParams, SimSettings};
use crate::numerics::Rng;

pub const GENERATED_MIN_SUBJECTS: usize = 50;
const MAX_ATTEMPTS: usize = 6;

const AGE_RANGE: (f64, f64) = (45.0, 80.0);
const AGE_MEAN: f64 = 62.5;
// sd of Uniform(45, 80)
const AGE_SD: f64 = 10.103_629_710_818_45;

const BSA_MEAN: f64 = 1.85;
const BSA_SD: f64 = 0.18;

const BRAIN_MEAN: f64 = 1.15;
const BRAIN_AGE_SLOPE: f64 = -0.004;
// residual sd so the marginal sd stays 0.09
const BRAIN_RESID_SD: f64 = 0.080_6;

const VENT_LOG_MEAN: f64 = -3.352; // ln 0.035
const VENT_AGE_SLOPE: f64 = 0.025;
const VENT_LOG_RESID_SD: f64 = 0.35;

const WMH_LOG_MEAN: f64 = 1.0986; // ln 3 mL
const WMH_AGE_SLOPE: f64 = 0.04;
const WMH_VASCULAR_SD: f64 = 0.5;
const WMH_LOG_RESID_SD: f64 = 0.5;

const COUNT_BASE: f64 = 2.0;
const COUNT_PER_SQRT_ML: f64 = 4.0;

/// Measurement noise (mL, mmHg).
const VOLUME_NOISE_SD: f64 = 3.0;
const PRESSURE_NOISE_SD: f64 = 2.0;

#[derive(Debug, Clone, Copy)]
struct Covariates {
    age: f64,
    bsa: f64,
    brain_vol: f64,
    vent_vol: f64,
    wmh_vol: f64,
    wmh_count: f64,
}

fn sample_covariates(rng: &mut Rng) -> Covariates {
    let age = rng.uniform_range(AGE_RANGE.0, AGE_RANGE.1);
    let bsa = rng.normal(BSA_MEAN, BSA_SD);
    let brain_vol = rng.normal(BRAIN_MEAN + BRAIN_AGE_SLOPE * (age - AGE_MEAN), BRAIN_RESID_SD);
    let vent_vol = rng
        .normal(VENT_LOG_MEAN + VENT_AGE_SLOPE * (age - AGE_MEAN), VENT_LOG_RESID_SD)
        .exp();
    // Shared vascular factor: raises both lesion load and peripheral resistance.
    let vascular = rng.standard_normal();
    let wmh_vol = (WMH_LOG_MEAN
        + WMH_AGE_SLOPE * (age - AGE_MEAN)
        + WMH_VASCULAR_SD * vascular
        + rng.normal(0.0, WMH_LOG_RESID_SD))
    .exp();
    let wmh_count = 1.0 + rng.poisson(COUNT_BASE + COUNT_PER_SQRT_ML * wmh_vol.sqrt()) as f64;
    Covariates {
        age,
        bsa,
        brain_vol,
        vent_vol,
        wmh_vol,
        wmh_count,
    }
}

fn wmh_log_sd() -> f64 {
    ((WMH_AGE_SLOPE * AGE_SD).powi(2) + WMH_VASCULAR_SD.powi(2) + WMH_LOG_RESID_SD.powi(2)).sqrt()
}

/// Population-standardized covariate scores used by the coupling.
struct Scores {
    age: f64,
    vent: f64,
    wmh: f64,
    count: f64,
}

fn scores(c: &Covariates) -> Scores {
    let vent_sd = ((VENT_AGE_SLOPE * AGE_SD).powi(2) + VENT_LOG_RESID_SD.powi(2)).sqrt();
    Scores {
        age: (c.age - AGE_MEAN) / AGE_SD,
        vent: (c.vent_vol.ln() - VENT_LOG_MEAN) / vent_sd,
        wmh: (c.wmh_vol.ln() - WMH_LOG_MEAN) / wmh_log_sd(),
        count: (c.wmh_count.sqrt() - 3.2) / 0.8,
    }
}

/// `ν → y`: log-linear coupling around the nominal operating point, with
/// lognormal noise.
fn sample_params(c: &Covariates, rng: &mut Rng) -> LumpedParams {
    let s = scores(c);
    let nominal = LumpedParams::<f64>::default();
    let mut draw = |base: f64, signal: f64, noise_sd: f64| (base.ln() + signal + rng.normal(0.0, noise_sd)).exp();
    LumpedParams {
        sigma0: draw(nominal.sigma0, -0.07 * s.age - 0.09 * s.wmh, 0.05),
        r0: draw(nominal.r0, 0.05 * s.vent + 0.04 * s.count, 0.03),
        c1: draw(nominal.c1, 0.12 * s.age, 0.06),
        rp: draw(nominal.rp, 0.12 * s.age + 0.08 * s.wmh, 0.05),
        tau: draw(nominal.tau, -0.08 * s.age, 0.04),
    }
}

struct Subject {
    nu: Covariates,
    y: LumpedParams,
    sv: f64,
    edv: f64,
    ef: f64,
    sbp: f64,
    dbp: f64,
    mbp: f64,
}

fn simulate_subject(nu: Covariates, rng: &mut Rng) -> Result<Subject, HeartError> {
    let y = sample_params(&nu, rng);
    let trace = heart::simulate(&y, &SimSettings::default())?;
    let m = heart::measure(&trace)?;
    let edv = m.edv + rng.normal(0.0, VOLUME_NOISE_SD);
    let esv = m.esv + rng.normal(0.0, VOLUME_NOISE_SD);
    let sbp = m.sbp + rng.normal(0.0, PRESSURE_NOISE_SD);
    let dbp = m.dbp + rng.normal(0.0, PRESSURE_NOISE_SD);
    let sv = edv - esv;
    if !(esv > 0.0 && sv > 0.0 && dbp > 0.0 && dbp < sbp) {
        return Err(HeartError::Degenerate("measurement noise produced an implausible record".into()));
    }
    Ok(Subject {
        nu,
        y,
        sv,
        edv,
        ef: sv / edv,
        sbp,
        dbp,
        mbp: heart::mean_blood_pressure(dbp, sbp),
    })
}

/// Fully observed synthetic cohort of `n` subjects. Subject `i` draws from
/// stream `i` of `seed`, so rows are independent of generation order.
pub fn generate_cohort(n: usize, seed: u64) -> Result<FeatureTable, CohortError> {
    if n < GENERATED_MIN_SUBJECTS {
        return Err(CohortError::TooFewSubjects {
            min: GENERATED_MIN_SUBJECTS,
            got: n,
        });
    }
    let master = Rng::new(seed);
    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let stream = master.derive(i as u64);
        let nu = sample_covariates(&mut stream.derive(0));
        let mut last_err = None;
        let mut done = None;
        for attempt in 0..MAX_ATTEMPTS {
            match simulate_subject(nu, &mut stream.derive(1 + attempt as u64)) {
                Ok(s) => {
                    done = Some(s);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        match done {
            Some(s) => subjects.push(s),
            None => {
                return Err(CohortError::Simulation {
                    subject: i,
                    attempts: MAX_ATTEMPTS,
                    source: last_err.expect("at least one attempt"),
                })
            }
        }
    }

    let get = |f: fn(&Subject) -> f64| subjects.iter().map(f).collect::<Vec<f64>>();
    let columns = CSV_COLUMNS[1..]
        .iter()
        .map(|&name| {
            let values = match name {
                "age" => get(|s| s.nu.age),
                "bsa" => get(|s| s.nu.bsa),
                "brain_vol" => get(|s| s.nu.brain_vol),
                "vent_vol" => get(|s| s.nu.vent_vol),
                "wmh_vol" => get(|s| s.nu.wmh_vol),
                "wmh_count" => get(|s| s.nu.wmh_count),
                "dbp" => get(|s| s.dbp),
                "sbp" => get(|s| s.sbp),
                "mbp" => get(|s| s.mbp),
                "sv" => get(|s| s.sv),
                "edv" => get(|s| s.edv),
                "ef" => get(|s| s.ef),
                "sigma0" => get(|s| s.y.sigma0),
                "r0" => get(|s| s.y.r0),
                "c1" => get(|s| s.y.c1),
                "rp" => get(|s| s.y.rp),
                "tau" => get(|s| s.y.tau),
                other => unreachable!("unhandled column {other}"),
            };
            Column::new(name, values)
        })
        .collect();
    Ok(FeatureTable::new((0..n as u64).collect(), columns))
}
