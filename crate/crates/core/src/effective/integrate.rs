use serde::{Deserialize, Serialize};

use super::{angle_frame, condensation_condition, effective_rhs, energy, energy_rate, EffectiveState};
use crate::error::{Error, Result};
use crate::ode::{dopri5, AdaptiveConfig, IntegrationEnd, OdeSystem, StepControl};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegrateConfig {
    pub dt0: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Integration stops once the parameter norm exceeds this.
    pub max_norm: f64,
    pub t_max: f64,
    pub class_threshold: f64,
    /// Number of trailing accepted steps used to fit the blow-up time.
    pub fit_window: usize,
    pub record_states: bool,
}

impl Default for IntegrateConfig {
    fn default() -> Self {
        IntegrateConfig {
            dt0: 1e-3,
            rtol: 1e-9,
            atol: 1e-12,
            max_norm: 1e6,
            t_max: 1e3,
            class_threshold: super::DEFAULT_CLASS_THRESHOLD,
            fit_window: 20,
            record_states: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BlowUp,
    TimeLimit,
    StepUnderflow,
    MaxSteps,
}

/// Diagnostics at one accepted step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveFrame {
    pub t: f64,
    pub energy: f64,
    pub energy_rate: f64,
    /// `1 / (E0^{-1/3} − (t − t0))³` from the first frame with positive
    /// energy, while that expression is finite.
    pub lower_bound: Option<f64>,
    /// `Ė / E^{4/3}` while `E > 0`.
    pub riccati_ratio: Option<f64>,
    pub param_norm: f64,
    pub norm_wv: f64,
    pub norm_w1: f64,
    pub norm_w2: f64,
    pub rate_a1: f64,
    pub rate_a2: f64,
    pub min_xi_c1: Option<f64>,
    pub min_psi_c1: Option<f64>,
    pub min_abs_phi_c1: Option<f64>,
    pub zeta: Option<f64>,
    pub c1_size: usize,
}

#[derive(Debug, Clone)]
pub struct EffectiveTrajectory {
    /// Frame 0 is the initial condition.
    pub frames: Vec<EffectiveFrame>,
    /// Recorded states aligned with `frames` when `record_states` is set,
    /// otherwise only the first and last.
    pub states: Vec<EffectiveState>,
    pub termination: Termination,
    pub t_star: Option<f64>,
    pub accepted: usize,
    pub rejected: usize,
}

impl EffectiveTrajectory {
    pub fn final_state(&self) -> &EffectiveState {
        self.states.last().expect("at least the initial state")
    }

    pub fn step_underflow(&self) -> bool {
        self.termination == Termination::StepUnderflow
    }
}

/// `1 / (E0^{-1/3} − t)³` for `E0 > 0` and `t < E0^{-1/3}`.
pub fn energy_lower_bound(e0: f64, t: f64) -> Result<f64> {
    if !(e0 > 0.0) {
        return Err(Error::Domain(format!("energy lower bound needs E0 > 0, got {e0}")));
    }
    let horizon = e0.powf(-1.0 / 3.0);
    if !(t < horizon) {
        return Err(Error::Domain(format!("t = {t} is past the bound's horizon {horizon}")));
    }
    Ok((horizon - t).powi(-3))
}

/// Least-squares line through `(t, E^{-1/3})`, extrapolated to its root.
/// Points with non-positive energy are skipped.
pub fn fit_blowup_time(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e > 0.0 && e.is_finite())
        .map(|&(t, e)| (t, e.powf(-1.0 / 3.0)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return None;
    }
    Some(mt - my / slope)
}

struct Flow<'a> {
    like: &'a EffectiveState,
}

impl OdeSystem for Flow<'_> {
    fn dim(&self) -> usize {
        self.like.flat_len()
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let st = self.like.rebuild_from_flat(y);
        let r = effective_rhs(&st);
        let mut off = 0;
        for src in [r.w_v.as_slice(), r.w1.as_slice(), r.w2.as_slice()] {
            dy[off..off + src.len()].copy_from_slice(src);
            off += src.len();
        }
        if let Some(wv) = &r.wv {
            dy[off..off + wv.len()].copy_from_slice(wv.as_slice());
        }
    }
}

fn frame(state: &EffectiveState, t: f64, anchor: Option<(f64, f64)>, class_threshold: f64) -> EffectiveFrame {
    let cond = condensation_condition(state);
    let angles = angle_frame(state, class_threshold);
    let lower_bound = anchor.and_then(|(t0, e0)| energy_lower_bound(e0, t - t0).ok());
    let e = energy(state);
    let e_dot = energy_rate(state);
    EffectiveFrame {
        t,
        energy: e,
        energy_rate: e_dot,
        lower_bound,
        riccati_ratio: (e > 0.0).then(|| e_dot / e.powf(4.0 / 3.0)),
        param_norm: state.param_norm(),
        norm_wv: state.w_v.norm(),
        norm_w1: state.w1.norm(),
        norm_w2: state.w2.norm(),
        rate_a1: cond.rate_a1,
        rate_a2: cond.rate_a2,
        min_xi_c1: angles.min_xi_c1(),
        min_psi_c1: angles.min_psi_c1(),
        min_abs_phi_c1: angles.min_abs_phi_c1(),
        zeta: (!angles.zeta.is_nan()).then_some(angles.zeta),
        c1_size: angles.class_c1.len(),
    }
}

/// State at time `t` under the effective flow, with no norm cap.
pub fn advance(state: &EffectiveState, t: f64, cfg: &IntegrateConfig) -> EffectiveState {
    let sys = Flow { like: state };
    let mut y0 = Vec::with_capacity(state.flat_len());
    state.write_flat(&mut y0);
    let ode_cfg = AdaptiveConfig {
        dt0: cfg.dt0.min(t.max(f64::MIN_POSITIVE)),
        rtol: cfg.rtol,
        atol: cfg.atol,
        ..AdaptiveConfig::default()
    };
    let out = dopri5(&sys, 0.0, &y0, t, &ode_cfg, |_, _| StepControl::Continue);
    state.rebuild_from_flat(&out.y)
}

/// Integrates the effective flow with adaptive Dormand-Prince steps until
/// the parameter norm passes `max_norm`, time reaches `t_max`, or the step
/// size underflows. The blow-up time is fitted from the last `fit_window`
/// accepted steps whenever the energy there is positive.
pub fn integrate(initial: &EffectiveState, cfg: &IntegrateConfig) -> EffectiveTrajectory {
    let sys = Flow { like: initial };
    let mut y0 = Vec::with_capacity(initial.flat_len());
    initial.write_flat(&mut y0);

    let mut anchor = None;
    let e0 = energy(initial);
    if e0 > 0.0 {
        anchor = Some((0.0, e0));
    }
    let mut frames = vec![frame(initial, 0.0, anchor, cfg.class_threshold)];
    let mut states = vec![initial.clone()];

    let ode_cfg = AdaptiveConfig {
        dt0: cfg.dt0,
        rtol: cfg.rtol,
        atol: cfg.atol,
        ..AdaptiveConfig::default()
    };
    let mut blew_up = false;
    let out = dopri5(&sys, 0.0, &y0, cfg.t_max, &ode_cfg, |t, y| {
        let st = initial.rebuild_from_flat(y);
        if anchor.is_none() {
            let e = energy(&st);
            if e > 0.0 {
                anchor = Some((t, e));
            }
        }
        let f = frame(&st, t, anchor, cfg.class_threshold);
        let stop = f.param_norm > cfg.max_norm;
        frames.push(f);
        if cfg.record_states {
            states.push(st);
        }
        if stop {
            blew_up = true;
            StepControl::Stop
        } else {
            StepControl::Continue
        }
    });

    if !cfg.record_states {
        states.push(initial.rebuild_from_flat(&out.y));
    }
    let termination = match out.end {
        IntegrationEnd::Stopped if blew_up => Termination::BlowUp,
        IntegrationEnd::Stopped | IntegrationEnd::ReachedEnd => Termination::TimeLimit,
        IntegrationEnd::StepUnderflow => Termination::StepUnderflow,
        IntegrationEnd::MaxSteps => Termination::MaxSteps,
    };
    let t_star = match termination {
        Termination::BlowUp | Termination::StepUnderflow => {
            let tail = &frames[frames.len().saturating_sub(cfg.fit_window)..];
            let pts: Vec<(f64, f64)> = tail.iter().map(|f| (f.t, f.energy)).collect();
            fit_blowup_time(&pts)
        }
        _ => None,
    };
    EffectiveTrajectory {
        frames,
        states,
        termination,
        t_star,
        accepted: out.accepted,
        rejected: out.rejected,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn scalar(a: f64, b: f64, c: f64) -> EffectiveState {
        EffectiveState::new(DVector::from_element(1, a), DMatrix::from_element(1, 1, b), DVector::from_element(1, c)).unwrap()
    }

    #[test]
    fn lower_bound_examples() {
        assert_eq!(energy_lower_bound(1.0, 0.0).unwrap(), 1.0);
        assert!((energy_lower_bound(1.0, 0.5).unwrap() - 8.0).abs() < 1e-12);
        assert!((energy_lower_bound(8.0, 0.25).unwrap() - 64.0).abs() < 1e-9);
        assert!(matches!(energy_lower_bound(1.0, 1.0), Err(Error::Domain(_))));
        assert!(matches!(energy_lower_bound(-1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn symmetric_scalar_blows_up_at_one() {
        // a = b = c = x with x' = x², x(0) = 1
        let traj = integrate(&scalar(1.0, 1.0, 1.0), &IntegrateConfig::default());
        assert_eq!(traj.termination, Termination::BlowUp);
        let t_star = traj.t_star.unwrap();
        assert!((t_star - 1.0).abs() < 1e-6, "t_star = {t_star}");
        // near the pole compare in time units: E^{-1/3} = 1 − t
        for f in &traj.frames {
            assert!((f.energy.powf(-1.0 / 3.0) - (1.0 - f.t)).abs() < 1e-8, "t = {}", f.t);
        }
    }

    #[test]
    fn symmetric_negative_scalar_decays() {
        // x(0) = −1 gives x = −1/(1+t): E stays negative and tends to zero
        let cfg = IntegrateConfig {
            t_max: 50.0,
            ..IntegrateConfig::default()
        };
        let traj = integrate(&scalar(-1.0, -1.0, -1.0), &cfg);
        assert_eq!(traj.termination, Termination::TimeLimit);
        let last = traj.frames.last().unwrap();
        let x = -1.0 / (1.0 + last.t);
        assert!((last.energy - x.powi(3)).abs() < 1e-9);
        assert!(traj.frames.iter().all(|f| f.energy < 0.0));
    }

    #[test]
    fn nondegenerate_negative_start_crosses_zero_then_blows_up() {
        let traj = integrate(&scalar(-1.5, 1.0, 0.5), &IntegrateConfig::default());
        assert_eq!(traj.termination, Termination::BlowUp);
        let first_pos = traj.frames.iter().position(|f| f.energy > 0.0).unwrap();
        assert!(first_pos > 0);
        assert!(traj.frames[0].energy < 0.0);

        let tight = IntegrateConfig {
            rtol: 1e-12,
            atol: 1e-15,
            ..IntegrateConfig::default()
        };
        let reference = integrate(&scalar(-1.5, 1.0, 0.5), &tight);
        let (a, b) = (traj.t_star.unwrap(), reference.t_star.unwrap());
        assert!((a - b).abs() / b < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn energy_dominates_lower_bound() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(4);
        let st = EffectiveState::gaussian(&mut rng, 6, 6, 1.0, None);
        let traj = integrate(&st, &IntegrateConfig::default());
        for f in &traj.frames {
            if let Some(lb) = f.lower_bound {
                assert!(f.energy >= lb * (1.0 - 1e-6), "E = {} < bound {}", f.energy, lb);
            }
        }
    }

    #[test]
    fn fit_recovers_exact_line() {
        let pts: Vec<(f64, f64)> = (0..10).map(|k| {
            let t = 0.9 + 0.01 * k as f64;
            (t, (2.0 - t).powi(-3))
        }).collect();
        assert!((fit_blowup_time(&pts).unwrap() - 2.0).abs() < 1e-10);
        assert_eq!(fit_blowup_time(&[(0.0, 1.0)]), None);
    }
}
