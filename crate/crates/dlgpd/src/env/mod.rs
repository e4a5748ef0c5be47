//! Ground-truth pendulum environment: dynamics, renderer, observations,
//! rollout collection, and the modified-dynamics variants used for transfer
//! experiments. The agent never sees [`PhysicalState`]; its only sensory
//! input is the rendered [`Observation`].

mod dataset;
mod render;
mod rollout;

pub use dataset::{load_dataset, missing_rollouts, save_dataset, DatasetManifest, FORMAT_VERSION};
pub use render::{
    make_observation, render, render_background, Frame, Observation, FRAME_CHANNELS, FRAME_SIZE,
    OBS_CHANNELS,
};
pub use rollout::{collect_rollout, InitDistribution, Policy, Rollout, Transition, UniformPolicy};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Angle (radians, 0 = upright, unwrapped) and angular velocity (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PhysicalState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        PhysicalState { theta, theta_dot }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

/// Physics constants of the simulated pendulum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    /// gravity, m/s^2
    pub g: f64,
    /// pole mass, kg
    pub m: f64,
    /// pole length, m
    pub l: f64,
    /// integration step, s
    pub dt: f64,
    /// torque clamp, N*m
    pub max_torque: f64,
    /// angular velocity clamp, rad/s
    pub max_speed: f64,
    /// +1 or -1; the action is multiplied by this before clamping
    pub action_sign: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            g: 10.0,
            m: 1.0,
            l: 1.0,
            dt: 0.05,
            max_torque: 2.0,
            max_speed: 8.0,
            action_sign: 1.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.l > 0.0 && self.dt > 0.0) {
            return Err(Error::InvalidArgument(
                "pendulum params require m > 0, l > 0, dt > 0".into(),
            ));
        }
        if self.action_sign != 1.0 && self.action_sign != -1.0 {
            return Err(Error::InvalidArgument(
                "action_sign must be +1 or -1".into(),
            ));
        }
        Ok(())
    }
}

/// Modified-dynamics variants for the transfer experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Unmodified dynamics.
    Base,
    /// The action sign is flipped before it reaches the base dynamics.
    InvertedAction,
    /// Pole mass replaced by the given value.
    Mass(f64),
}

impl Variant {
    /// Directory-friendly identifier, e.g. `mass-0.2`.
    pub fn slug(&self) -> String {
        match self {
            Variant::Base => "base".to_string(),
            Variant::InvertedAction => "inverted-action".to_string(),
            Variant::Mass(m) => format!("mass-{m}"),
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "base" => Ok(Variant::Base),
            "inverted-action" => Ok(Variant::InvertedAction),
            _ => {
                if let Some(rest) = s.strip_prefix("mass-") {
                    let m: f64 = rest
                        .parse()
                        .map_err(|_| Error::Config(format!("bad variant '{s}'")))?;
                    Ok(Variant::Mass(m))
                } else {
                    Err(Error::Config(format!(
                        "unknown variant '{s}' (expected base, inverted-action, mass-<m>)"
                    )))
                }
            }
        }
    }
}

/// Applies a variant to base parameters.
pub fn make_variant(base: &PendulumParams, variant: Variant) -> Result<PendulumParams> {
    let mut p = *base;
    match variant {
        Variant::Base => {}
        Variant::InvertedAction => p.action_sign = -base.action_sign,
        Variant::Mass(m) => {
            if !(m > 0.0) {
                return Err(Error::InvalidArgument(format!("non-positive mass {m}")));
            }
            p.m = m;
        }
    }
    Ok(p)
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    PI - (PI - theta).rem_euclid(2.0 * PI)
}

/// One simulation step: clamp the (sign-adjusted) torque, integrate with
/// one semi-implicit Euler step, clamp the velocity, and score the step as
/// `-(wrap(theta)^2 + 0.1 * theta_dot'^2 + 0.001 * u^2)`.
pub fn step(
    state: &PhysicalState,
    action: f64,
    params: &PendulumParams,
) -> Result<(PhysicalState, f64)> {
    if !state.is_finite() {
        return Err(Error::NonFinite("pendulum state".into()));
    }
    if !action.is_finite() {
        return Err(Error::NonFinite("pendulum action".into()));
    }
    let u = (params.action_sign * action).clamp(-params.max_torque, params.max_torque);
    let accel = 3.0 * params.g / (2.0 * params.l) * state.theta.sin()
        + 3.0 / (params.m * params.l * params.l) * u;
    let theta_dot = (state.theta_dot + accel * params.dt).clamp(-params.max_speed, params.max_speed);
    let theta = state.theta + theta_dot * params.dt;
    let wrapped = wrap_angle(state.theta);
    let reward = -(wrapped * wrapped + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
    Ok((PhysicalState::new(theta, theta_dot), reward))
}

/// Total mechanical energy of the rod pendulum implied by the dynamics of
/// [`step`]: `E = 1/2 (m l^2 / 3) theta_dot^2 + (m g l / 2) cos(theta)`
/// (potential peaks at the upright position). Diagnostics only.
pub fn mechanical_energy(state: &PhysicalState, params: &PendulumParams) -> f64 {
    let inertia = params.m * params.l * params.l / 3.0;
    0.5 * inertia * state.theta_dot * state.theta_dot
        + 0.5 * params.m * params.g * params.l * state.theta.cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn upright_equilibrium_zero_cost() {
        let p = PendulumParams::default();
        let (s, r) = step(&PhysicalState::new(0.0, 0.0), 0.0, &p).unwrap();
        assert_eq!(s.theta, 0.0);
        assert_eq!(s.theta_dot, 0.0);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn hanging_down_reward_and_equilibrium() {
        let p = PendulumParams::default();
        let (s, r) = step(&PhysicalState::new(PI, 0.0), 0.0, &p).unwrap();
        // reward = -pi^2 (velocity change from sin(pi) is ~1e-16)
        assert!((r - (-(PI * PI))).abs() < 1e-12, "reward {r}");
        assert!((r - (-9.869604401089358)).abs() < 1e-10);
        // hanging down is an equilibrium up to floating-point sin(pi)
        assert!(s.theta_dot.abs() < 1e-15);
        assert!((s.theta - PI).abs() < 1e-15);
    }

    #[test]
    fn velocity_clamped() {
        let p = PendulumParams::default();
        let mut s = PhysicalState::new(PI / 2.0, 7.9);
        for _ in 0..50 {
            let (ns, _) = step(&s, 2.0, &p).unwrap();
            assert!(ns.theta_dot.abs() <= p.max_speed);
            assert!(ns.theta.is_finite());
            s = ns;
        }
    }

    #[test]
    fn reward_nonpositive_and_zero_only_at_goal() {
        let p = PendulumParams::default();
        let mut worst: f64 = 0.0;
        for i in 0..50 {
            let th = -PI + (i as f64) * 0.13;
            let (_, r) = step(&PhysicalState::new(th, (i as f64 * 0.31).sin() * 8.0), ((i * 7) as f64 * 0.23).cos() * 2.0, &p).unwrap();
            assert!(r <= 0.0);
            worst = worst.min(r);
        }
        assert!(worst < -0.1);
        // per-step lower bound: -(pi^2 + 0.1*64 + 0.001*4)
        assert!(worst >= -(PI * PI + 0.1 * 64.0 + 0.001 * 4.0));
    }

    #[test]
    fn rejects_nonfinite() {
        let p = PendulumParams::default();
        assert!(step(&PhysicalState::new(f64::NAN, 0.0), 0.0, &p).is_err());
        assert!(step(&PhysicalState::new(0.0, 0.0), f64::INFINITY, &p).is_err());
    }

    #[test]
    fn wrap_angle_range_and_boundary() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!(wrap_angle(0.0).abs() < 1e-15);
        for i in -20..20 {
            let x = i as f64 * 0.7;
            let w = wrap_angle(x);
            assert!(w > -PI && w <= PI, "wrap({x}) = {w}");
            // equivalent angle
            assert!(((x - w) / (2.0 * PI) - ((x - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }

    #[test]
    fn variants() {
        let base = PendulumParams::default();
        let light = make_variant(&base, Variant::Mass(0.2)).unwrap();
        assert_eq!(light.m, 0.2);
        let heavy = make_variant(&base, Variant::Mass(1.5)).unwrap();
        assert_eq!(heavy.m, 1.5);
        assert!(make_variant(&base, Variant::Mass(0.0)).is_err());
        assert!(make_variant(&base, Variant::Mass(-1.0)).is_err());

        // inverted action: step(s, a, variant) == step(s, -a, base) exactly
        let inv = make_variant(&base, Variant::InvertedAction).unwrap();
        for i in 0..20 {
            let s = PhysicalState::new((i as f64 * 0.37).sin() * 3.0, (i as f64 * 0.17).cos() * 6.0);
            let a = (i as f64 * 0.53).sin() * 2.0;
            let (s1, r1) = step(&s, a, &inv).unwrap();
            let (s2, r2) = step(&s, -a, &base).unwrap();
            assert_eq!(s1.theta.to_bits(), s2.theta.to_bits());
            assert_eq!(s1.theta_dot.to_bits(), s2.theta_dot.to_bits());
            assert_eq!(r1.to_bits(), r2.to_bits());
        }
    }

    #[test]
    fn variant_slug_roundtrip() {
        for v in [Variant::Base, Variant::InvertedAction, Variant::Mass(0.2), Variant::Mass(1.5)] {
            assert_eq!(Variant::parse(&v.slug()).unwrap(), v);
        }
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn energy_drift_shrinks_with_dt() {
        // u = 0, away from the speed clamp: per-step energy drift is the
        // integrator's local error, which shrinks ~quadratically in dt
        let drift = |dt: f64| -> f64 {
            let p = PendulumParams {
                dt,
                ..PendulumParams::default()
            };
            let mut s = PhysicalState::new(2.8, 0.0);
            let mut max_step_drift: f64 = 0.0;
            let mut e = mechanical_energy(&s, &p);
            for _ in 0..((1.0 / dt) as usize) {
                let (ns, _) = step(&s, 0.0, &p).unwrap();
                assert!(ns.theta_dot.abs() < p.max_speed);
                let ne = mechanical_energy(&ns, &p);
                max_step_drift = max_step_drift.max((ne - e).abs());
                e = ne;
                s = ns;
            }
            max_step_drift
        };
        let d1 = drift(0.01);
        let d2 = drift(0.005);
        assert!(d1 < 0.05, "per-step drift too large: {d1}");
        assert!(d2 < d1 * 0.6, "drift did not shrink: {d1} -> {d2}");
    }
}
