use serde::{Deserialize, Serialize};

use super::throws::ThrowSpec;
use crate::dynamics::{forward_dynamics, joint_positions, kinetic_energy, potential_energy, wrist_position, wrist_velocity, BoxState, ExternalWrench, JointState, RobotModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub physics_dt: f64,
    pub control_dt: f64,
    pub duration: f64,
    pub stiffness: f64,
    pub damping: f64,
    pub friction: f64,
    /// slip speed over which friction saturates (m/s)
    pub friction_eps: f64,
    pub contact_enabled: bool,
    pub contact_threshold: f64,
    pub success_hold: f64,
    pub success_speed: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            physics_dt: 1e-3,
            control_dt: 0.01,
            duration: 2.0,
            stiffness: 5e3,
            damping: 50.0,
            friction: 0.8,
            friction_eps: 0.02,
            contact_enabled: true,
            contact_threshold: 0.5,
            success_hold: 0.3,
            success_speed: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.physics_dt > 0.0 && self.control_dt >= self.physics_dt && self.duration > 0.0) {
            return Err(Error::Validation("time steps must satisfy 0 < physics_dt <= control_dt".into()));
        }
        if self.stiffness < 0.0 || self.damping < 0.0 || self.friction < 0.0 || !(self.friction_eps > 0.0) {
            return Err(Error::Validation("contact parameters must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        (self.control_dt / self.physics_dt).round().max(1.0) as usize
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.control_dt).round() as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Contact {
    /// force on the box; the arm receives the opposite at its wrist point
    pub force: [f64; 2],
    pub normal: f64,
    pub depth: f64,
}

/// Spring-damper normal force with regularized Coulomb friction between the
/// wrist point and the box rectangle.
pub fn contact_force(tip: [f64; 2], tip_vel: [f64; 2], b: &BoxState, cfg: &EnvConfig) -> Contact {
    let (dx, dz) = (tip[0] - b.pos[0], tip[1] - b.pos[1]);
    let (px, pz) = (b.half[0] - dx.abs(), b.half[1] - dz.abs());
    if !cfg.contact_enabled || px <= 0.0 || pz <= 0.0 {
        return Contact::default();
    }
    // outward normal of the nearest face, pointing from the box to the tip
    let (n, depth) = if pz <= px { ([0.0, dz.signum()], pz) } else { ([dx.signum(), 0.0], px) };
    let rel = [b.vel[0] - tip_vel[0], b.vel[1] - tip_vel[1]];
    let rate = rel[0] * n[0] + rel[1] * n[1];
    let fn_ = (cfg.stiffness * depth + cfg.damping * rate).max(0.0);
    let t = [-n[1], n[0]];
    let slip = rel[0] * t[0] + rel[1] * t[1];
    let ft = -cfg.friction * fn_ * (slip / cfg.friction_eps).tanh();
    Contact { force: [-fn_ * n[0] + ft * t[0], -fn_ * n[1] + ft * t[1]], normal: fn_, depth }
}

/// Absolute hand angle pointing from the last joint to `target`, as a
/// relative wrist angle for the given shoulder and elbow.
pub fn box_facing_q3(model: &RobotModel, q12: [f64; 2], target: [f64; 2]) -> f64 {
    let p = joint_positions(model, &[q12[0], q12[1], 0.0]);
    let w = p[2];
    let a = (target[1] - w[1]).atan2(target[0] - w[0]) - q12[0] - q12[1];
    a.sin().atan2(a.cos())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub tau: Vec<f64>,
    pub box_pos: [f64; 2],
    pub box_vel: [f64; 2],
    pub contact: bool,
    /// force on the box at the end of the tick
    pub force: [f64; 2],
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub joint: JointState,
    pub box_state: BoxState,
    pub time: f64,
    pub contact: Contact,
    pub energy: f64,
    pub peak_torque: f64,
    pub peak_force: f64,
    pub floor_hit: bool,
}

/// What a controller sees at a control tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// torque applied over the previous tick
    pub tau: Vec<f64>,
    pub box_pos: [f64; 2],
    pub box_vel: [f64; 2],
    pub box_half: [f64; 2],
    pub box_mass: f64,
    pub contact: bool,
    pub force: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub energy: f64,
    pub peak_torque: f64,
    pub peak_force: f64,
    pub excluded: Option<String>,
    pub log: Vec<StepRecord>,
    /// policy-rate log for learned policies
    #[serde(default)]
    pub steps: Vec<crate::replan::StepLog>,
}

pub struct Env {
    pub model: RobotModel,
    pub cfg: EnvConfig,
    pub state: EnvState,
    pub last_tau: Vec<f64>,
    pub log: Vec<StepRecord>,
}

impl Env {
    pub fn reset(model: &RobotModel, cfg: &EnvConfig, throw: &ThrowSpec) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        let half = throw.profile.half();
        if !(half[0] > 0.0 && half[1] > 0.0 && throw.profile.mass > 0.0) {
            return Err(Error::Validation("box extents and mass must be positive".into()));
        }
        if !throw.release.iter().chain(&throw.velocity).all(|v| v.is_finite()) {
            return Err(Error::Validation("throw is not finite".into()));
        }
        // closest point of the box rectangle to the shoulder
        let dx = (throw.release[0].abs() - half[0]).max(0.0);
        let dz = ((throw.release[1] - model.base_height).abs() - half[1]).max(0.0);
        if dx.hypot(dz) <= model.reach() {
            return Err(Error::Validation(format!("release point {:?} lies inside the arm workspace", throw.release)));
        }
        let q = model.ready.clone();
        let n = model.dof();
        let box_state = BoxState { pos: throw.release, vel: throw.velocity, half, mass: throw.profile.mass, contact: false };
        Ok(Self {
            model: model.clone(),
            cfg: cfg.clone(),
            state: EnvState {
                joint: JointState::at_rest(&q),
                box_state,
                time: 0.0,
                contact: Contact::default(),
                energy: 0.0,
                peak_torque: 0.0,
                peak_force: 0.0,
                floor_hit: false,
            },
            last_tau: vec![0.0; n],
            log: Vec::new(),
        })
    }

    pub fn observe(&self) -> Observation {
        let s = &self.state;
        Observation {
            t: s.time,
            q: s.joint.q.clone(),
            qd: s.joint.qd.clone(),
            tau: self.last_tau.clone(),
            box_pos: s.box_state.pos,
            box_vel: s.box_state.vel,
            box_half: s.box_state.half,
            box_mass: s.box_state.mass,
            contact: s.box_state.contact,
            force: s.contact.force,
        }
    }

    pub fn done(&self) -> bool {
        self.state.floor_hit || self.state.time >= self.cfg.duration - 1e-9
    }

    /// Applies `tau` (clamped to the torque limits) for one control tick.
    pub fn step(&mut self, tau: &[f64]) -> Result<()> {
        let n = self.model.dof();
        if tau.len() != n {
            return Err(Error::Contract(format!("{} torques for {n} joints", tau.len())));
        }
        let mut tau = tau.to_vec();
        if !tau.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { time: self.state.time });
        }
        self.model.clamp_torque(&mut tau);
        let dt = self.cfg.physics_dt;
        let g = self.model.gravity;
        let (lo, hi) = (self.model.lower(), self.model.upper());
        for _ in 0..self.cfg.substeps() {
            let s = &mut self.state;
            let tip = wrist_position(&self.model, &s.joint.q);
            let tip_vel = wrist_velocity(&self.model, &s.joint.q, &s.joint.qd);
            let c = contact_force(tip, tip_vel, &s.box_state, &self.cfg);
            let qdd = forward_dynamics(&self.model, &s.joint.q, &s.joint.qd, &tau, &ExternalWrench::at_wrist(c.force))?;
            let power: f64 = tau.iter().zip(&s.joint.qd).map(|(t, v)| t * v).sum();
            s.energy += power.abs() * dt;
            for i in 0..n {
                s.joint.qd[i] += dt * qdd[i];
                s.joint.q[i] += dt * s.joint.qd[i];
                if s.joint.q[i] < lo[i] {
                    s.joint.q[i] = lo[i];
                    s.joint.qd[i] = s.joint.qd[i].max(0.0);
                } else if s.joint.q[i] > hi[i] {
                    s.joint.q[i] = hi[i];
                    s.joint.qd[i] = s.joint.qd[i].min(0.0);
                }
            }
            s.joint.qdd = qdd;
            let b = &mut s.box_state;
            b.vel[0] += dt * c.force[0] / b.mass;
            b.vel[1] += dt * (c.force[1] / b.mass - g);
            b.pos[0] += dt * b.vel[0];
            b.pos[1] += dt * b.vel[1];
            b.contact = c.normal > self.cfg.contact_threshold;
            s.contact = c;
            s.peak_force = s.peak_force.max(c.force[0].hypot(c.force[1]));
            s.time += dt;
            let finite = s.joint.q.iter().chain(&s.joint.qd).chain(&b.pos).chain(&b.vel).all(|v| v.is_finite());
            if !finite {
                return Err(Error::BlowUp { time: s.time });
            }
            if b.pos[1] - b.half[1] <= 0.0 {
                s.floor_hit = true;
                break;
            }
        }
        let s = &mut self.state;
        s.peak_torque = s.peak_torque.max(tau.iter().fold(0.0, |m, v| m.max(v.abs())));
        self.log.push(StepRecord {
            t: s.time,
            q: s.joint.q.clone(),
            qd: s.joint.qd.clone(),
            tau: tau.clone(),
            box_pos: s.box_state.pos,
            box_vel: s.box_state.vel,
            contact: s.box_state.contact,
            force: s.contact.force,
            energy: s.energy,
        });
        self.last_tau = tau;
        Ok(())
    }

    /// Mechanical energy of arm and box (J).
    pub fn mechanical_energy(&self) -> f64 {
        let s = &self.state;
        let b = &s.box_state;
        kinetic_energy(&self.model, &s.joint.q, &s.joint.qd)
            + potential_energy(&self.model, &s.joint.q)
            + 0.5 * b.mass * (b.vel[0] * b.vel[0] + b.vel[1] * b.vel[1])
            + b.mass * self.model.gravity * b.pos[1]
    }

    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            success: is_caught(&self.model, &self.cfg, &self.log, self.state.floor_hit),
            energy: self.state.energy,
            peak_torque: self.state.peak_torque,
            peak_force: self.state.peak_force,
            excluded: None,
            log: self.log.clone(),
            steps: Vec::new(),
        }
    }
}

/// `Σ |τᵀ q̇| Δt` over sampled torques and velocities.
pub fn energy(tau: &[Vec<f64>], qd: &[Vec<f64>], dt: f64) -> f64 {
    tau.iter().zip(qd).map(|(t, v)| t.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().abs() * dt).sum()
}

/// Contact held over the final `success_hold` seconds, the box nearly at
/// rest relative to the wrist point at the end, and never on the floor.
pub fn is_caught(model: &RobotModel, cfg: &EnvConfig, log: &[StepRecord], floor_hit: bool) -> bool {
    let Some(last) = log.last() else { return false };
    if floor_hit || last.box_pos[1] <= 0.0 {
        return false;
    }
    let held = log.iter().rev().take_while(|r| r.contact).count();
    if (held as f64) * cfg.control_dt < cfg.success_hold - 1e-9 {
        return false;
    }
    let v = wrist_velocity(model, &last.q, &last.qd);
    (last.box_vel[0] - v[0]).hypot(last.box_vel[1] - v[1]) < cfg.success_speed
}
