//! Explicit Runge-Kutta integrators on flat `f64` state vectors.
//!
//! [`dopri5`] is the embedded Dormand-Prince 5(4) pair with FSAL and
//! standard PI-free step control; it reports every accepted step to a
//! callback that may stop the integration (used for blow-up detection).
//! [`rk4_step`] is the classical fixed-step scheme.

pub trait OdeSystem {
    fn dim(&self) -> usize;
    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveConfig {
    pub dt0: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Steps below this size abort with [`IntegrationEnd::StepUnderflow`].
    pub min_step: f64,
    pub max_step: f64,
    pub max_steps: usize,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig {
            dt0: 1e-3,
            rtol: 1e-9,
            atol: 1e-12,
            min_step: 1e-14,
            max_step: f64::INFINITY,
            max_steps: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationEnd {
    /// The step callback asked to stop.
    Stopped,
    ReachedEnd,
    StepUnderflow,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct IntegrationOutcome {
    pub end: IntegrationEnd,
    pub t: f64,
    pub y: Vec<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

// Dormand-Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// b - b*, the embedded error weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `sys` from `(t0, y0)` towards `t_end`, calling `on_step(t, y)`
/// after every accepted step. The final step is clamped to land on `t_end`.
pub fn dopri5<S, F>(sys: &S, t0: f64, y0: &[f64], t_end: f64, cfg: &AdaptiveConfig, mut on_step: F) -> IntegrationOutcome
where
    S: OdeSystem + ?Sized,
    F: FnMut(f64, &[f64]) -> StepControl,
{
    let n = sys.dim();
    assert_eq!(y0.len(), n, "state length does not match system dimension");
    let mut y = y0.to_vec();
    let mut t = t0;
    let mut h = cfg.dt0.min(cfg.max_step);
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    sys.rhs(t, &y, &mut k1);

    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let finish = |end, t, y: Vec<f64>, accepted, rejected| IntegrationOutcome {
        end,
        t,
        y,
        accepted,
        rejected,
    };

    loop {
        if t >= t_end {
            return finish(IntegrationEnd::ReachedEnd, t, y, accepted, rejected);
        }
        if accepted + rejected >= cfg.max_steps {
            return finish(IntegrationEnd::MaxSteps, t, y, accepted, rejected);
        }
        if h < cfg.min_step {
            return finish(IntegrationEnd::StepUnderflow, t, y, accepted, rejected);
        }
        let last = t + h >= t_end;
        let h_try = if last { t_end - t } else { h };

        for i in 0..n {
            tmp[i] = y[i] + h_try * A21 * k1[i];
        }
        sys.rhs(t + C2 * h_try, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + h_try * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * h_try, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h_try * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * h_try, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = y[i] + h_try * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * h_try, &tmp, &mut k5);
        for i in 0..n {
            tmp[i] = y[i] + h_try * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        sys.rhs(t + h_try, &tmp, &mut k6);
        for i in 0..n {
            y_new[i] = y[i] + h_try * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        sys.rhs(t + h_try, &y_new, &mut k7);

        let mut acc = 0.0;
        let mut finite = true;
        for i in 0..n {
            let e = h_try * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            let r = e / sc;
            if !r.is_finite() || !y_new[i].is_finite() {
                finite = false;
            }
            acc += r * r;
        }
        let err = (acc / n.max(1) as f64).sqrt();

        if !finite {
            rejected += 1;
            h = h_try * 0.2;
            continue;
        }

        if err <= 1.0 {
            t = if last { t_end } else { t + h_try };
            std::mem::swap(&mut y, &mut y_new);
            std::mem::swap(&mut k1, &mut k7);
            accepted += 1;
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h_try * factor).min(cfg.max_step);
            if on_step(t, &y) == StepControl::Stop {
                return finish(IntegrationEnd::Stopped, t, y, accepted, rejected);
            }
        } else {
            rejected += 1;
            let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            h = h_try * factor;
        }
    }
}

/// One classical RK4 step of size `h`, writing the result into `out`.
pub fn rk4_step<S: OdeSystem + ?Sized>(sys: &S, t: f64, y: &[f64], h: f64, out: &mut [f64]) {
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.rhs(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    sys.rhs(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    sys.rhs(t + h, &tmp, &mut k4);
    for i in 0..n {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay;
    impl OdeSystem for Decay {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = -y[0];
        }
    }

    struct Oscillator;
    impl OdeSystem for Oscillator {
        fn dim(&self) -> usize {
            2
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[1];
            dy[1] = -y[0];
        }
    }

    /// y' = y², y(0) = 1 blows up at t = 1.
    struct Riccati;
    impl OdeSystem for Riccati {
        fn dim(&self) -> usize {
            1
        }
        fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
            dy[0] = y[0] * y[0];
        }
    }

    #[test]
    fn dopri_hits_end_exactly_and_is_accurate() {
        let out = dopri5(&Decay, 0.0, &[1.0], 2.0, &AdaptiveConfig::default(), |_, _| StepControl::Continue);
        assert_eq!(out.end, IntegrationEnd::ReachedEnd);
        assert_eq!(out.t, 2.0);
        assert!((out.y[0] - (-2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn dopri_oscillator_period() {
        let tau = 2.0 * std::f64::consts::PI;
        let out = dopri5(&Oscillator, 0.0, &[1.0, 0.0], tau, &AdaptiveConfig::default(), |_, _| StepControl::Continue);
        assert!((out.y[0] - 1.0).abs() < 1e-8);
        assert!(out.y[1].abs() < 1e-8);
    }

    #[test]
    fn dopri_stops_on_callback() {
        let out = dopri5(&Riccati, 0.0, &[1.0], 10.0, &AdaptiveConfig::default(), |_, y| {
            if y[0] > 1e6 {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        });
        assert_eq!(out.end, IntegrationEnd::Stopped);
        // y = 1/(1-t); the pole amplifies relative error, so compare 1/y with 1 − t
        assert!((1.0 / out.y[0] - (1.0 - out.t)).abs() < 1e-8);
    }

    #[test]
    fn rk4_fourth_order() {
        let run = |h: f64| {
            let mut y = vec![1.0];
            let mut out = vec![0.0];
            let steps = (1.0 / h).round() as usize;
            for k in 0..steps {
                rk4_step(&Decay, k as f64 * h, &y, h, &mut out);
                y.copy_from_slice(&out);
            }
            (y[0] - (-1.0f64).exp()).abs()
        };
        let e1 = run(0.1);
        let e2 = run(0.05);
        let order = (e1 / e2).log2();
        assert!((order - 4.0).abs() < 0.2, "observed order {order}");
    }
}
