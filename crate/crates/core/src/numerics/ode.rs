//! Fixed-step classical Runge–Kutta integration.

use super::NumericsError;
use crate::Scalar;

/// Sampled solution, one state per time point, endpoints included.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last_state(&self) -> &[T] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// One RK4 step of size `h` from `(t, y)` into `out`.
pub fn rk4_step<T, F>(deriv: &mut F, t: T, y: &[T], h: T, out: &mut [T])
where
    T: Scalar,
    F: FnMut(T, &[T], &mut [T]),
{
    let n = y.len();
    let two = T::lit(2.0);
    let half = h / two;
    let mut k1 = vec![T::zero(); n];
    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];

    deriv(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + half * k1[i];
    }
    deriv(t + half, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + half * k2[i];
    }
    deriv(t + half, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    deriv(t + h, &tmp, &mut k4);
    let sixth = h / T::lit(6.0);
    for i in 0..n {
        out[i] = y[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
    }
}

/// Integrate `dy/dt = deriv(t, y)` from `t0` to `t1` with step `dt`. The
/// final step is shortened so the last sample lands exactly on `t1`.
pub fn rk4_integrate<T, F>(
    mut deriv: F,
    state0: &[T],
    t0: T,
    t1: T,
    dt: T,
) -> Result<Trajectory<T>, NumericsError>
where
    T: Scalar,
    F: FnMut(T, &[T], &mut [T]),
{
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(NumericsError::InvalidStep(dt.to_f64().unwrap_or(f64::NAN)));
    }
    if !(t1 > t0) {
        return Err(NumericsError::InvalidSpan {
            t0: t0.to_f64().unwrap_or(f64::NAN),
            t1: t1.to_f64().unwrap_or(f64::NAN),
        });
    }
    let span = t1 - t0;
    let ratio = span / dt;
    let mut n_full = ratio.floor().to_usize().unwrap_or(0);
    // A remainder below a billionth of a step is rounding noise, not a step.
    let remainder = span - T::from_usize(n_full).unwrap() * dt;
    let partial = remainder > dt * T::lit(1e-9);
    if !partial && n_full == 0 {
        n_full = 1;
    }
    let n_steps = n_full + usize::from(partial);

    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(state0.to_vec());
    let mut y = state0.to_vec();
    let mut next = vec![T::zero(); y.len()];
    for k in 0..n_steps {
        let t = t0 + T::from_usize(k).unwrap() * dt;
        let t_next = if k + 1 == n_steps {
            t1
        } else {
            t0 + T::from_usize(k + 1).unwrap() * dt
        };
        rk4_step(&mut deriv, t, &y, t_next - t, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::SimulationDiverged {
                time: t_next.to_f64().unwrap_or(f64::NAN),
            });
        }
        std::mem::swap(&mut y, &mut next);
        times.push(t_next);
        states.push(y.clone());
    }
    Ok(Trajectory { times, states })
}
