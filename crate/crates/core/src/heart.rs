//! Zero-dimensional left-ventricle / Windkessel model.
//!
//! The ventricle is a time-varying elastance chamber,
//! `p_lv = E(t)·(V − V0) + C1·(exp(k·(V − V0)) − 1)`, with
//! `E(t) = σ0·e(t) + Emin` and `e(t)` a double-cosine activation over
//! systole. It fills from a constant venous pressure through a diode mitral
//! valve and ejects through a diode aortic valve into a two-element
//! Windkessel (`R = Rp`, `C = τ/Rp`) draining to zero pressure.
//!
//! State is `(V, p_art)`. Each cardiac cycle is integrated separately with
//! fixed-step RK4 so cycle boundaries fall exactly on sample points.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{rk4_integrate, NumericsError};
use crate::Scalar;

/// Venous filling pressure (mmHg).
pub const VENOUS_PRESSURE: f64 = 10.0;
/// Mitral valve forward resistance (mmHg·s/mL).
pub const MITRAL_RESISTANCE: f64 = 0.01;
/// Aortic valve forward resistance (mmHg·s/mL).
pub const AORTIC_RESISTANCE: f64 = 0.05;
/// Fraction of the sphere volume `(4/3)πR0³` taken as unloaded cavity volume.
pub const UNLOADED_VOLUME_FRACTION: f64 = 0.2;
/// Exponential stiffness coefficient of the passive curve (1/mL).
pub const PASSIVE_EXPONENT: f64 = 0.015;
/// Baseline (diastolic) elastance added to the active term (mmHg/mL).
pub const MIN_ELASTANCE: f64 = 0.0;
/// Contraction and relaxation phases as fractions of the cycle length.
pub const CONTRACTION_FRACTION: f64 = 0.3;
pub const RELAXATION_FRACTION: f64 = 0.15;

pub const DEFAULT_HEART_RATE: f64 = 70.0;
pub const DEFAULT_DT: f64 = 1e-3;
pub const MAX_CYCLES: usize = 30;
/// Volume periodicity tolerance (mL) defining a converged cycle.
pub const PERIODICITY_TOL: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeartError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("heart rate {0} bpm outside [40, 120]")]
    InvalidHeartRate(f64),
    #[error("at least 3 cycles required, got {0}")]
    TooFewCycles(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no periodic steady state after {cycles} cycles (volume drift {drift:.3} mL)")]
    NotConverged { cycles: usize, drift: f64 },
    #[error("degenerate trace: {0}")]
    Degenerate(String),
    #[error("i/o error: {0}")]
    Io(String),
}

/// The five mechanistic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumpedParams<T = f64> {
    /// Fibre contractility, identified with peak elastance (mmHg/mL).
    pub sigma0: T,
    /// Reference ventricular radius (cm).
    pub r0: T,
    /// Fibre stiffness, scale of the passive pressure curve (mmHg).
    pub c1: T,
    /// Peripheral resistance (mmHg·s/mL).
    pub rp: T,
    /// Arterial time constant (s).
    pub tau: T,
}

impl<T: Scalar> Default for LumpedParams<T> {
    fn default() -> Self {
        Self {
            sigma0: T::lit(2.0),
            r0: T::lit(2.4),
            c1: T::lit(1.2),
            rp: T::lit(1.1),
            tau: T::lit(1.6),
        }
    }
}

impl<T: Scalar> LumpedParams<T> {
    pub const NAMES: [&'static str; 5] = ["sigma0", "r0", "c1", "rp", "tau"];

    pub fn to_array(&self) -> [T; 5] {
        [self.sigma0, self.r0, self.c1, self.rp, self.tau]
    }

    pub fn from_slice(v: &[T]) -> Self {
        Self {
            sigma0: v[0],
            r0: v[1],
            c1: v[2],
            rp: v[3],
            tau: v[4],
        }
    }

    /// Arterial compliance `τ / Rp` (mL/mmHg).
    pub fn compliance(&self) -> T {
        self.tau / self.rp
    }

    /// Unloaded ventricular volume (mL).
    pub fn unloaded_volume(&self) -> T {
        T::lit(UNLOADED_VOLUME_FRACTION * 4.0 / 3.0 * PI) * self.r0.powi(3)
    }

    pub fn validate(&self) -> Result<(), HeartError> {
        for (name, v) in Self::NAMES.iter().zip(self.to_array()) {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(HeartError::InvalidParams(format!("{name} = {v} must be positive")));
            }
        }
        let c = self.compliance();
        if !(c > T::lit(0.1) && c < T::lit(5.0)) {
            return Err(HeartError::InvalidParams(format!(
                "implied compliance tau/rp = {c} outside (0.1, 5) mL/mmHg"
            )));
        }
        Ok(())
    }
}

/// Simulation settings other than the mechanistic parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSettings<T = f64> {
    pub heart_rate: T,
    pub n_cycles: usize,
    pub dt: T,
}

impl<T: Scalar> Default for SimSettings<T> {
    fn default() -> Self {
        Self {
            heart_rate: T::lit(DEFAULT_HEART_RATE),
            n_cycles: 3,
            dt: T::lit(DEFAULT_DT),
        }
    }
}

/// Final simulated cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardiacTrace<T = f64> {
    /// Seconds since the start of the final cycle.
    pub times: Vec<T>,
    pub v_lv: Vec<T>,
    pub p_lv: Vec<T>,
    pub p_art: Vec<T>,
    pub cycle_length: T,
    pub cycles_run: usize,
    /// `|V(start) − V(end)|` of the final cycle (mL).
    pub periodicity_error: T,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CardiacMeasurements<T = f64> {
    pub sv: T,
    pub edv: T,
    pub esv: T,
    pub ef: T,
    pub sbp: T,
    pub dbp: T,
    pub mbp: T,
}

/// `DBP + (SBP − DBP)/3`.
pub fn mean_blood_pressure<T: Scalar>(dbp: T, sbp: T) -> T {
    dbp + (sbp - dbp) / T::lit(3.0)
}

/// Double-cosine activation in [0, 1] at time `t` within a cycle of length `period`.
pub fn activation<T: Scalar>(t: T, period: T) -> T {
    let t1 = T::lit(CONTRACTION_FRACTION) * period;
    let t2 = T::lit(RELAXATION_FRACTION) * period;
    let pi = T::lit(PI);
    let half = T::lit(0.5);
    if t < T::zero() {
        T::zero()
    } else if t < t1 {
        half * (T::one() - (pi * t / t1).cos())
    } else if t < t1 + t2 {
        half * (T::one() + (pi * (t - t1) / t2).cos())
    } else {
        T::zero()
    }
}

/// Ventricular pressure at cycle time `t` and volume `v`.
pub fn ventricular_pressure<T: Scalar>(params: &LumpedParams<T>, period: T, t: T, v: T) -> T {
    let v0 = params.unloaded_volume();
    let e = params.sigma0 * activation(t, period) + T::lit(MIN_ELASTANCE);
    let dv = v - v0;
    e * dv + params.c1 * ((T::lit(PASSIVE_EXPONENT) * dv).exp() - T::one())
}

fn derivative<T: Scalar>(params: &LumpedParams<T>, period: T, t: T, y: &[T], dy: &mut [T]) {
    let (v, pa) = (y[0], y[1]);
    let p = ventricular_pressure(params, period, t, v);
    let q_mitral = ((T::lit(VENOUS_PRESSURE) - p) / T::lit(MITRAL_RESISTANCE)).max(T::zero());
    let q_aortic = ((p - pa) / T::lit(AORTIC_RESISTANCE)).max(T::zero());
    let compliance = params.compliance();
    dy[0] = q_mitral - q_aortic;
    dy[1] = (q_aortic - pa / params.rp) / compliance;
}

/// Integrate cycles until `n_cycles` have run and the volume is periodic,
/// or [`MAX_CYCLES`] is reached. The returned trace holds only the final
/// cycle; a non-periodic final cycle is flagged with `converged = false`.
pub fn simulate<T: Scalar>(
    params: &LumpedParams<T>,
    settings: &SimSettings<T>,
) -> Result<CardiacTrace<T>, HeartError> {
    params.validate()?;
    let hr = settings.heart_rate;
    if !(hr >= T::lit(40.0) && hr <= T::lit(120.0)) {
        return Err(HeartError::InvalidHeartRate(hr.as_f64()));
    }
    if settings.n_cycles < 3 {
        return Err(HeartError::TooFewCycles(settings.n_cycles));
    }
    let period = T::lit(60.0) / hr;
    // Start near end-diastole with a diastolic-range arterial pressure.
    let mut state = vec![params.unloaded_volume() + T::lit(100.0), T::lit(80.0)];
    let max_cycles = settings.n_cycles.max(MAX_CYCLES);
    let mut cycles = 0;
    loop {
        let traj = rk4_integrate(
            |t, y, dy| derivative(params, period, t, y, dy),
            &state,
            T::zero(),
            period,
            settings.dt,
        )?;
        cycles += 1;
        let end = traj.last_state().to_vec();
        let drift = (end[0] - state[0]).abs();
        let converged = drift <= T::lit(PERIODICITY_TOL);
        if (cycles >= settings.n_cycles && converged) || cycles >= max_cycles {
            let mut v_lv = Vec::with_capacity(traj.len());
            let mut p_lv = Vec::with_capacity(traj.len());
            let mut p_art = Vec::with_capacity(traj.len());
            for (t, s) in traj.times.iter().zip(&traj.states) {
                v_lv.push(s[0]);
                p_lv.push(ventricular_pressure(params, period, *t, s[0]));
                p_art.push(s[1]);
            }
            if v_lv.iter().any(|v| !(*v > T::zero())) {
                return Err(HeartError::Degenerate("non-positive ventricular volume".into()));
            }
            if !converged {
                log::warn!(
                    "lumped model not periodic after {cycles} cycles (drift {:.3} mL)",
                    drift.as_f64()
                );
            }
            return Ok(CardiacTrace {
                times: traj.times,
                v_lv,
                p_lv,
                p_art,
                cycle_length: period,
                cycles_run: cycles,
                periodicity_error: drift,
                converged,
            });
        }
        state = end;
    }
}

fn extrema<T: Scalar>(xs: &[T]) -> (T, T) {
    xs.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// Clinical measurements of the final cycle.
pub fn measure<T: Scalar>(trace: &CardiacTrace<T>) -> Result<CardiacMeasurements<T>, HeartError> {
    if !trace.converged {
        return Err(HeartError::NotConverged {
            cycles: trace.cycles_run,
            drift: trace.periodicity_error.as_f64(),
        });
    }
    if trace.v_lv.is_empty() {
        return Err(HeartError::Degenerate("empty trace".into()));
    }
    let (esv, edv) = extrema(&trace.v_lv);
    let (dbp, sbp) = extrema(&trace.p_art);
    let sv = edv - esv;
    if !(sv > T::zero()) {
        return Err(HeartError::Degenerate(
            "constant ventricular volume; ejection fraction undefined".into(),
        ));
    }
    Ok(CardiacMeasurements {
        sv,
        edv,
        esv,
        ef: sv / edv,
        sbp,
        dbp,
        mbp: mean_blood_pressure(dbp, sbp),
    })
}

/// `(volume, pressure)` samples of the final cycle, closed by repeating the
/// first point.
pub fn pv_loop<T: Scalar>(trace: &CardiacTrace<T>) -> Result<Vec<(T, T)>, HeartError> {
    if trace.v_lv.is_empty() || trace.v_lv.len() != trace.p_lv.len() {
        return Err(HeartError::Degenerate("empty or ragged trace".into()));
    }
    let mut pts: Vec<(T, T)> = trace.v_lv.iter().copied().zip(trace.p_lv.iter().copied()).collect();
    pts.push(pts[0]);
    Ok(pts)
}

/// Shoelace area of a closed polygon; positive when traversed
/// counter-clockwise in the (volume, pressure) plane.
pub fn signed_area<T: Scalar>(polygon: &[(T, T)]) -> T {
    let mut acc = T::zero();
    for w in polygon.windows(2) {
        acc = acc + (w[0].0 * w[1].1 - w[1].0 * w[0].1);
    }
    acc / T::lit(2.0)
}

/// CSV with columns `t,v_lv,p_lv,p_art`.
pub fn write_trace_csv<T: Scalar>(trace: &CardiacTrace<T>, path: &Path) -> Result<(), HeartError> {
    let io = |e: std::io::Error| HeartError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "t,v_lv,p_lv,p_art").map_err(io)?;
    for i in 0..trace.times.len() {
        writeln!(
            f,
            "{},{},{},{}",
            trace.times[i], trace.v_lv[i], trace.p_lv[i], trace.p_art[i]
        )
        .map_err(io)?;
    }
    f.flush().map_err(io)
}
