//! Scripted demonstrator standing in for human videos: intercepts the box
//! with its vertical velocity matched, yields along the box's path, then
//! settles at a hold pose. Trajectories are rendered to pixel keypoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::box_facing_q3;
use super::throws::{sample_throws, BoxProfile, ThrowConfig, ThrowSpec};
use super::traj::{ik_wrist, Quintic};
use crate::dynamics::{inverse_dynamics, joint_positions, ExternalWrench, JointState, RobotModel};
use crate::error::{Error, Result};
use crate::regen::{BoxObs, Frame, SceneTrace};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    pub px_per_m: f64,
    /// pixel position of the world origin
    pub origin: [f64; 2],
    pub noise_px: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { px_per_m: 400.0, origin: [320.0, 40.0], noise_px: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoConfig {
    pub fps: f64,
    pub frames: usize,
    pub throws: ThrowConfig,
    pub camera: CameraConfig,
    pub reaction: [f64; 2],
    /// fractions of the box's horizontal and vertical velocity matched by
    /// the hand at the catch
    pub match_x: [f64; 2],
    pub match_z: [f64; 2],
    /// duration of the yielding retreat after contact (s)
    pub retreat_time: [f64; 2],
    /// duration over which the box stops sliding on the hand (s)
    pub slide_time: [f64; 2],
    /// preferred catch point jitter around the ready wrist point (m)
    pub catch_jitter: f64,
    /// friction coefficient removing horizontal slip during the impact
    pub friction: f64,
    pub max_attempts: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            frames: 61,
            throws: ThrowConfig::default(),
            camera: CameraConfig::default(),
            reaction: [0.0, 0.06],
            match_x: [0.1, 0.3],
            match_z: [0.2, 0.45],
            retreat_time: [0.3, 0.5],
            slide_time: [0.15, 0.3],
            catch_jitter: 0.06,
            friction: 0.8,
            max_attempts: 40,
        }
    }
}

/// Ground truth of one demonstration sampled at the frame times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoTruth {
    pub schema: u32,
    pub robot: String,
    pub throw: ThrowSpec,
    pub dt: f64,
    pub catch_time: f64,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub qdd: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub box_pos: Vec<[f64; 2]>,
    pub contact: Vec<bool>,
    pub energy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub trace: SceneTrace,
    pub truth: DemoTruth,
}

struct Plan {
    t0: f64,
    tc: f64,
    ready_tip: [f64; 2],
    reach: Quintic,
    retreat: Quintic,
    slide: Quintic,
    throw: ThrowSpec,
    g: f64,
}

impl Plan {
    /// Tip point, box center, and box acceleration at time `t`.
    fn at(&self, t: f64) -> ([f64; 2], [f64; 2], [f64; 2], bool) {
        let th = &self.throw;
        let hh = th.profile.half()[1];
        let ballistic = [th.release[0] + th.velocity[0] * t, th.release[1] + th.velocity[1] * t - 0.5 * self.g * t * t];
        if t < self.tc {
            let tip = if t < self.t0 { self.ready_tip } else { self.reach.eval(t - self.t0).0 };
            return (tip, ballistic, [0.0, -self.g], false);
        }
        let s = t - self.tc;
        let (tip, _, a) = self.retreat.eval(s);
        let (xr, _, ar) = self.slide.eval(s);
        ([tip[0], tip[1]], [tip[0] + xr[0], tip[1] + hh], [a[0] + ar[0], a[1]], true)
    }

    fn q(&self, model: &RobotModel, t: f64) -> Option<Vec<f64>> {
        let (tip, c, _, _) = self.at(t);
        let l3 = model.links.get(2).map_or(0.0, |l| l.length);
        let (dx, dz) = (c[0] - tip[0], c[1] - tip[1]);
        let d = dx.hypot(dz);
        if d < 1e-9 {
            return None;
        }
        let w = if model.dof() == 3 { [tip[0] - l3 * dx / d, tip[1] - l3 * dz / d] } else { tip };
        let [q1, q2] = ik_wrist(model, w)?;
        let mut q = vec![q1, q2];
        if model.dof() == 3 {
            q.push(box_facing_q3(model, [q1, q2], c));
        }
        Some(q)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.gen_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn plan_demo(model: &RobotModel, cfg: &DemoConfig, throw: &ThrowSpec, rng: &mut ChaCha8Rng) -> Option<Plan> {
    let g = model.gravity;
    let l = model.arm_length();
    let shoulder = [0.0, model.base_height];
    let ready = joint_positions(model, &model.ready);
    let ready_tip = *ready.last().unwrap();
    let [hw, hh] = throw.profile.half();
    let t0 = uniform(rng, cfg.reaction);
    let bx = uniform(rng, cfg.match_x);
    let bz = uniform(rng, cfg.match_z);
    let tr = uniform(rng, cfg.retreat_time);
    let ts_style = uniform(rng, cfg.slide_time);
    let x0 = rng.gen_range(0.45..0.7) * hw;
    let pref = [ready_tip[0] + rng.gen_range(-1.0..1.0) * cfg.catch_jitter, ready_tip[1] + rng.gen_range(-1.0..1.0) * cfg.catch_jitter];

    // catch time: tip under the box bottom, comfortably reachable, closest
    // to the preferred point
    let mut best: Option<(f64, f64)> = None;
    let mut t = t0 + 0.3;
    let horizon = (cfg.frames as f64 - 1.0) / cfg.fps - tr - 0.3;
    while t < horizon {
        let c = [throw.release[0] + throw.velocity[0] * t, throw.release[1] + throw.velocity[1] * t - 0.5 * g * t * t];
        let tip = [c[0] - x0, c[1] - hh];
        let r = (tip[0] - shoulder[0]).hypot(tip[1] - shoulder[1]);
        if tip[1] > 0.0 && r < 0.9 * l && r > 0.45 * l {
            let d = (tip[0] - pref[0]).hypot(tip[1] - pref[1]);
            if best.map_or(true, |b| d < b.1) {
                best = Some((t, d));
            }
        }
        t += 1e-3;
    }
    let (tc, _) = best?;
    let c = [throw.release[0] + throw.velocity[0] * tc, throw.release[1] + throw.velocity[1] * tc - 0.5 * g * tc * tc];
    let vb = [throw.velocity[0], throw.velocity[1] - g * tc];
    let pc = [c[0] - x0, c[1] - hh];
    let vh = [bx * vb[0], bz * vb[1]];
    let reach = Quintic::new(ready_tip, [0.0; 2], [0.0; 2], pc, vh, [0.0; 2], tc - t0);
    let pe = [pc[0] + 0.5 * vh[0] * tr, pc[1] + 0.5 * vh[1] * tr];
    let retreat = Quintic::new(pc, vh, [0.0; 2], pe, [0.0; 2], [0.0; 2], tr);
    // after impact the box rides on the hand and slides to a stop
    let vr0 = vb[0] - vh[0];
    let vr = vr0.signum() * (vr0.abs() - cfg.friction * (vb[1] - vh[1]).abs()).max(0.0);
    let ts = if vr < 0.0 { ts_style.min(2.0 * (x0 - 0.05 * hw) / -vr) } else { ts_style };
    if ts < 0.08 {
        return None;
    }
    let slide = Quintic::new([x0, 0.0], [vr, 0.0], [0.0; 2], [x0 + 0.5 * vr * ts, 0.0], [0.0; 2], [0.0; 2], ts);
    Some(Plan { t0, tc, ready_tip, reach, retreat, slide, throw: throw.clone(), g })
}

/// Samples the plan at the frame times and treats the samples as the state
/// of a plant integrated by explicit Euler at the frame rate: velocities and
/// accelerations are the forward differences of the samples and the applied
/// torques follow from inverse dynamics with the box contact force.
fn truth_from_plan(model: &RobotModel, cfg: &DemoConfig, plan: &Plan) -> Option<DemoTruth> {
    let dt = 1.0 / cfg.fps;
    let n = model.dof();
    let m = plan.throw.profile.mass;
    let hh = plan.throw.profile.half()[1];
    let count = cfg.frames;
    let mut q = Vec::with_capacity(count + 2);
    let mut box_pos = Vec::with_capacity(count + 2);
    let mut contact = Vec::with_capacity(count + 2);
    for k in 0..count + 2 {
        let t = k as f64 * dt;
        let Some(qk) = plan.q(model, t) else {
            return None;
        };
        let (_, c, _, on) = plan.at(t);
        if c[1] - hh <= 0.0 {
            return None;
        }
        q.push(qk);
        box_pos.push(c);
        contact.push(on);
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| (x - y) / dt).collect() };
    let qd: Vec<Vec<f64>> = (0..count + 1).map(|k| diff(&q[k + 1], &q[k])).collect();
    let qdd: Vec<Vec<f64>> = (0..count).map(|k| diff(&qd[k + 1], &qd[k])).collect();
    let (lo, hi) = (model.lower(), model.upper());
    let mut tau = Vec::with_capacity(count);
    for k in 0..count {
        let w = if contact[k] {
            let a = [
                (box_pos[k + 2][0] - 2.0 * box_pos[k + 1][0] + box_pos[k][0]) / (dt * dt),
                (box_pos[k + 2][1] - 2.0 * box_pos[k + 1][1] + box_pos[k][1]) / (dt * dt),
            ];
            let f = [m * a[0], m * (a[1] + plan.g)];
            if f[1] < 0.0 {
                return None;
            }
            ExternalWrench::at_wrist(f)
        } else {
            ExternalWrench::default()
        };
        let s = JointState { q: q[k].clone(), qd: qd[k].clone(), qdd: qdd[k].clone() };
        let tk = inverse_dynamics(model, &s, &w);
        for i in 0..n {
            let j = &model.joints[i];
            if q[k][i] < lo[i] + 0.02 || q[k][i] > hi[i] - 0.02 || qd[k][i].abs() > 0.8 * j.velocity || tk[i].abs() > 0.8 * j.torque {
                return None;
            }
        }
        tau.push(tk);
    }
    q.truncate(count);
    box_pos.truncate(count);
    contact.truncate(count);
    let qd = qd[..count].to_vec();
    let energy = super::env::energy(&tau, &qd, dt);
    Some(DemoTruth { schema: crate::data::SCHEMA, robot: model.name.clone(), throw: plan.throw.clone(), dt, catch_time: plan.tc, q, qd, qdd, tau, box_pos, contact, energy })
}

/// Pixel keypoints (y up) of the shoulder, elbow and last joint plus the box.
pub fn render(model: &RobotModel, truth: &DemoTruth, camera: &CameraConfig, rng: Option<&mut ChaCha8Rng>) -> SceneTrace {
    let mut noise = rng;
    let mut px = |p: [f64; 2]| -> [f64; 2] {
        let mut out = [camera.origin[0] + camera.px_per_m * p[0], camera.origin[1] + camera.px_per_m * p[1]];
        if camera.noise_px > 0.0 {
            if let Some(r) = noise.as_deref_mut() {
                let d: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
                let e: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
                out[0] += camera.noise_px * d;
                out[1] += camera.noise_px * e;
            }
        }
        out
    };
    let size = truth.throw.profile.size;
    let frames = truth
        .q
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let p = joint_positions(model, q);
            let wrist = if q.len() == 3 { p[2] } else { *p.last().unwrap() };
            Frame {
                t: k as f64 * truth.dt,
                shoulder: Some(px(p[0])),
                elbow: Some(px(p[1])),
                wrist: Some(px(wrist)),
                box_obs: Some(BoxObs { center: px(truth.box_pos[k]), size: [camera.px_per_m * size[0], camera.px_per_m * size[1]] }),
                contact: Some(truth.contact[k]),
            }
        })
        .collect();
    SceneTrace { schema: 1, fps: 1.0 / truth.dt, box_mass: Some(truth.throw.profile.mass), frames }
}

/// One demonstration per throw. Returns `None` if no style sample yields a
/// trajectory inside the joint, velocity and torque limits.
pub fn demonstrate(model: &RobotModel, cfg: &DemoConfig, throw: &ThrowSpec, seed: u64) -> Option<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let Some(plan) = plan_demo(model, cfg, throw, &mut rng) else { continue };
        let Some(truth) = truth_from_plan(model, cfg, &plan) else { continue };
        let trace = render(model, &truth, &cfg.camera, Some(&mut rng));
        return Some(Demonstration { trace, truth });
    }
    None
}

/// `n` demonstrations cycling over the box profiles. Throws that admit no
/// feasible demonstration are replaced by fresh draws.
pub fn synth_demos(n: usize, model: &RobotModel, cfg: &DemoConfig, seed: u64) -> Result<Vec<Demonstration>> {
    if n == 0 {
        return Err(Error::Contract("number of demonstrations must be at least 1".into()));
    }
    model.validate()?;
    if model.dof() != 3 {
        return Err(Error::Contract(format!("the demonstrator drives 3-joint arms, got {}", model.dof())));
    }
    let profiles = BoxProfile::all();
    let mut out = Vec::with_capacity(n);
    let mut draw = 0u64;
    while out.len() < n {
        let i = out.len();
        let profile = &profiles[i % profiles.len()];
        let s = seed.wrapping_mul(1_000_003).wrapping_add(draw);
        draw += 1;
        if draw > 50 * n as u64 + 100 {
            return Err(Error::Validation("demonstrator could not find feasible throws".into()));
        }
        let throw = sample_throws(model, &cfg.throws, profile, 1, s).remove(0);
        if let Some(d) = demonstrate(model, cfg, &throw, s ^ 0x5eed) {
            out.push(d);
        }
    }
    Ok(out)
}
