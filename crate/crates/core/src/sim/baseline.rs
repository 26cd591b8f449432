use super::env::Observation;
use super::eval::Policy;
use super::throws::ThrowSpec;
use super::traj::ik_wrist;
use crate::dynamics::{inverse_dynamics, ExternalWrench, JointState, RobotModel};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelBasedConfig {
    pub kp: f64,
    pub kd: f64,
    /// usable fraction of the shoulder-to-wrist reach
    pub reach_margin: f64,
    /// earliest interception considered, ahead of the first observation (s)
    pub min_lead: f64,
    /// tip placement from the box center toward the incoming side, as a
    /// fraction of the half width
    pub offset: f64,
}

impl Default for ModelBasedConfig {
    fn default() -> Self {
        Self { kp: 2500.0, kd: 100.0, reach_margin: 0.92, min_lead: 0.05, offset: 0.5 }
    }
}

/// Ballistic prediction, inverse kinematics for the earliest reachable
/// interception with the hand upright, and stiff computed-torque tracking
/// of that pose.
#[derive(Clone, Debug)]
pub struct ModelBasedPolicy {
    pub cfg: ModelBasedConfig,
    target: Option<Vec<f64>>,
    excluded: Option<String>,
}

impl ModelBasedPolicy {
    pub fn new(cfg: ModelBasedConfig) -> Self {
        Self { cfg, target: None, excluded: None }
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    fn plan(&self, model: &RobotModel, obs: &Observation) -> Option<Vec<f64>> {
        let g = model.gravity;
        let [hw, hh] = obs.box_half;
        let l3 = model.links.get(2).map_or(0.0, |l| l.length);
        let r_max = self.cfg.reach_margin * model.arm_length();
        let (lo, hi) = (model.lower(), model.upper());
        let mut s = self.cfg.min_lead;
        while s < 2.0 {
            let c = [obs.box_pos[0] + obs.box_vel[0] * s, obs.box_pos[1] + obs.box_vel[1] * s - 0.5 * g * s * s];
            if c[1] - hh <= 0.0 {
                return None;
            }
            // tip under the bottom face, shifted toward the incoming side
            let dir = if obs.box_vel[0] <= 0.0 { 1.0 } else { -1.0 };
            let tip = [c[0] - dir * self.cfg.offset * hw, c[1] - hh];
            let w = [tip[0], tip[1] - l3];
            if w[0].hypot(w[1] - model.base_height) <= r_max {
                if let Some([q1, q2]) = ik_wrist(model, w) {
                    let mut q = vec![q1, q2];
                    if model.dof() == 3 {
                        q.push(std::f64::consts::FRAC_PI_2 - q1 - q2);
                    }
                    if q.iter().zip(lo.iter().zip(&hi)).all(|(v, (a, b))| v >= a && v <= b) {
                        return Some(q);
                    }
                }
            }
            s += 1e-3;
        }
        None
    }

    fn hold(&self, model: &RobotModel, obs: &Observation, q_ref: &[f64]) -> Vec<f64> {
        let n = model.dof();
        let e: Vec<f64> = (0..n).map(|i| self.cfg.kp * (q_ref[i] - obs.q[i]) - self.cfg.kd * obs.qd[i]).collect();
        // computed torque: M·(Kp·e − Kd·q̇) + C·q̇ + G + JᵀF
        let s = JointState { q: obs.q.clone(), qd: obs.qd.clone(), qdd: e };
        inverse_dynamics(model, &s, &ExternalWrench::at_wrist(obs.force))
    }
}

impl Policy for ModelBasedPolicy {
    fn name(&self) -> &str {
        "model-based"
    }

    fn reset(&mut self, _model: &RobotModel, _throw: &ThrowSpec, _seed: u64) -> Result<()> {
        self.target = None;
        self.excluded = None;
        Ok(())
    }

    fn control(&mut self, model: &RobotModel, obs: &Observation) -> Result<Vec<f64>> {
        if self.target.is_none() && self.excluded.is_none() {
            match self.plan(model, obs) {
                Some(q) => self.target = Some(q),
                None => self.excluded = Some("interception outside workspace".into()),
            }
        }
        let q_ref = self.target.clone().unwrap_or_else(|| model.ready.clone());
        Ok(self.hold(model, obs, &q_ref))
    }

    fn excluded(&self) -> Option<String> {
        self.excluded.clone()
    }
}
