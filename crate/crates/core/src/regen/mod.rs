//! Torque-labeled robot trajectories from 2D demonstration traces.

mod filter;
mod trace;

pub use filter::{butter2, filtfilt};
pub use trace::{BoxObs, Frame, SceneTrace};

use serde::{Deserialize, Serialize};

use crate::data::{LabeledTrajectory, TrajMeta, SCHEMA};
use crate::dynamics::{inverse_dynamics, BoxState, ExternalWrench, JointState, RobotModel};
use crate::error::{Error, Result};

/// Scene (pixels, y up) to robot frame (m): `p_R = R(θ)·(s·p) + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    pub rotation: f64,
    pub translation: [f64; 2],
    pub scale: f64,
}

impl MappingConfig {
    pub fn identity() -> Self {
        Self { rotation: 0.0, translation: [0.0, 0.0], scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Validation(format!("scale must be positive, got {}", self.scale)));
        }
        if !self.rotation.is_finite() || !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("mapping transform is not finite".into()));
        }
        Ok(())
    }

    /// Scale from the arm lengths, zero rotation, median shoulder placed on
    /// the robot shoulder.
    pub fn auto(trace: &SceneTrace, model: &RobotModel) -> Result<Self> {
        let scale = estimate_scale(trace, model)?;
        let xs: Vec<f64> = trace.frames.iter().filter_map(|f| f.shoulder.map(|p| p[0])).collect();
        let ys: Vec<f64> = trace.frames.iter().filter_map(|f| f.shoulder.map(|p| p[1])).collect();
        let (mx, my) = (median(xs), median(ys));
        Ok(Self { rotation: 0.0, translation: [-scale * mx, model.base_height - scale * my], scale })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegenConfig {
    /// `None` estimates the mapping from the trace
    pub mapping: Option<MappingConfig>,
    /// low-pass cutoff before differencing; `None` disables smoothing
    pub cutoff_hz: Option<f64>,
    pub contact_margin: f64,
    pub max_degenerate: f64,
    pub default_box_mass: f64,
}

impl Default for RegenConfig {
    fn default() -> Self {
        Self { mapping: None, cutoff_hz: Some(6.0), contact_margin: 0.05, max_degenerate: 0.2, default_box_mass: 0.66 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegenStats {
    pub frames: usize,
    pub steps: usize,
    pub skipped: usize,
    pub clamped: usize,
    pub contact_steps: usize,
    pub scale: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn estimate_scale(trace: &SceneTrace, model: &RobotModel) -> Result<f64> {
    let lens: Vec<f64> = trace
        .frames
        .iter()
        .filter_map(|f| match (f.shoulder, f.elbow, f.wrist) {
            (Some(s), Some(e), Some(w)) => Some(dist(s, e) + dist(e, w)),
            _ => None,
        })
        .collect();
    if lens.is_empty() {
        return Err(Error::Degenerate("no frame has all arm keypoints".into()));
    }
    let px = median(lens);
    if !(px > 0.0) {
        return Err(Error::Degenerate("pixel arm length is zero".into()));
    }
    Ok(model.arm_length() / px)
}

/// Robot-frame position and dimensions of a scene object.
pub fn map_object(p: [f64; 2], d: [f64; 2], cfg: &MappingConfig) -> ([f64; 2], [f64; 2]) {
    let (sn, cs) = cfg.rotation.sin_cos();
    let (x, y) = (cfg.scale * p[0], cfg.scale * p[1]);
    (
        [cs * x - sn * y + cfg.translation[0], sn * x + cs * y + cfg.translation[1]],
        [cfg.scale * d[0], cfg.scale * d[1]],
    )
}

fn wrap(a: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let mut r = a % (2.0 * pi);
    if r <= -pi {
        r += 2.0 * pi;
    } else if r > pi {
        r -= 2.0 * pi;
    }
    r
}

/// Shoulder angle (absolute, from +x), elbow and wrist angles relative to
/// the previous segment. The hand segment points from the wrist to `target`
/// (the box center); without a target it continues the forearm.
pub fn extract_human_angles(frame: &Frame, target: Option<[f64; 2]>) -> Result<[f64; 3]> {
    let (s, e, w) = match (frame.shoulder, frame.elbow, frame.wrist) {
        (Some(s), Some(e), Some(w)) => (s, e, w),
        _ => return Err(Error::Degenerate(format!("missing keypoint at t = {}", frame.t))),
    };
    let seg = |a: [f64; 2], b: [f64; 2]| -> Result<f64> {
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        if dx == 0.0 && dy == 0.0 {
            return Err(Error::Degenerate(format!("coincident keypoints at t = {}", frame.t)));
        }
        Ok(dy.atan2(dx))
    };
    let upper = seg(s, e)?;
    let fore = seg(e, w)?;
    let hand = match target {
        Some(c) => seg(w, c)?,
        None => fore,
    };
    Ok([wrap(upper), wrap(fore - upper), wrap(hand - fore)])
}

/// Per-joint `gain·x + offset`, then clamp. Returns the number of clamped
/// coordinates.
pub fn map_joints(q_human: &[f64], model: &RobotModel) -> Result<(Vec<f64>, usize)> {
    let n = model.dof();
    if q_human.len() < n {
        return Err(Error::Contract(format!("{} human angles for a {n}-joint robot", q_human.len())));
    }
    let mut q: Vec<f64> = model.joints.iter().zip(q_human).map(|(j, &x)| j.gain * x + j.offset).collect();
    let clamped = model.clamp_q(&mut q);
    Ok((q, clamped))
}

/// Forward differences of each channel, after optional zero-phase
/// smoothing. Both outputs have `len - 1` rows; `q̈` replicates its last row.
pub fn differentiate(q: &[Vec<f64>], dt: f64, cutoff_hz: Option<f64>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("time step must be positive, got {dt}")));
    }
    if q.len() < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {}", q.len())));
    }
    let n = q[0].len();
    let smooth: Vec<Vec<f64>> = match cutoff_hz {
        Some(fc) => {
            let (b, a) = butter2(fc, 1.0 / dt);
            let cols: Vec<Vec<f64>> = (0..n).map(|j| filtfilt(&b, &a, &q.iter().map(|r| r[j]).collect::<Vec<_>>())).collect();
            (0..q.len()).map(|t| cols.iter().map(|c| c[t]).collect()).collect()
        }
        None => q.to_vec(),
    };
    let diff = |x: &[Vec<f64>]| -> Vec<Vec<f64>> { x.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / dt).collect()).collect() };
    let qd = diff(&smooth);
    let mut qdd = diff(&qd);
    match qdd.last().cloned() {
        Some(last) => qdd.push(last),
        None => qdd.push(vec![0.0; n]),
    }
    Ok((qd, qdd))
}

/// Box accelerations by the same scheme as the joints.
pub fn box_accelerations(pos: &[[f64; 2]], dt: f64, cutoff_hz: Option<f64>) -> Result<Vec<[f64; 2]>> {
    let rows: Vec<Vec<f64>> = pos.iter().map(|p| p.to_vec()).collect();
    let (_, acc) = differentiate(&rows, dt, cutoff_hz)?;
    Ok(acc.into_iter().map(|a| [a[0], a[1]]).collect())
}

/// Contact force the arm exerts on the box: `m·(a + g·ẑ)`.
pub fn contact_force(b: &BoxState, acc: [f64; 2], g: f64) -> [f64; 2] {
    [b.mass * acc[0], b.mass * (acc[1] + g)]
}

/// Inverse-dynamics labels; `acc` holds box accelerations.
pub fn label_torques(model: &RobotModel, states: &[JointState], boxes: &[BoxState], acc: &[[f64; 2]], contact: &[bool]) -> Result<Vec<Vec<f64>>> {
    if boxes.len() != states.len() || acc.len() != states.len() || contact.len() != states.len() {
        return Err(Error::Contract("sequence lengths differ".into()));
    }
    Ok(states
        .iter()
        .zip(boxes)
        .zip(acc.iter().zip(contact))
        .map(|((s, b), (a, &c))| {
            let w = if c { ExternalWrench::at_wrist(contact_force(b, *a, model.gravity)) } else { ExternalWrench::default() };
            inverse_dynamics(model, s, &w)
        })
        .collect())
}

/// Fills `None` entries by linear interpolation between valid neighbors and
/// holds the nearest valid value at the ends.
fn interpolate<const N: usize>(v: &mut [Option<[f64; N]>]) -> Option<()> {
    let valid: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_some()).collect();
    let (&first, &last) = (valid.first()?, valid.last()?);
    for i in 0..v.len() {
        if v[i].is_some() {
            continue;
        }
        v[i] = if i < first {
            v[first]
        } else if i > last {
            v[last]
        } else {
            let lo = (0..i).rev().find(|&k| v[k].is_some()).unwrap();
            let hi = (i + 1..v.len()).find(|&k| v[k].is_some()).unwrap();
            let (a, b) = (v[lo].unwrap(), v[hi].unwrap());
            let w = (i - lo) as f64 / (hi - lo) as f64;
            Some(std::array::from_fn(|j| a[j] + w * (b[j] - a[j])))
        };
    }
    Some(())
}

pub fn regenerate(trace: &SceneTrace, model: &RobotModel, cfg: &RegenConfig, source: &str) -> Result<(LabeledTrajectory, RegenStats)> {
    if trace.frames.is_empty() {
        return Err(Error::Rejected(format!("{source}: empty trace")));
    }
    trace.validate()?;
    let n_frames = trace.frames.len();
    if n_frames < 3 {
        return Err(Error::Rejected(format!("{source}: {n_frames} frames, need at least 3")));
    }
    let map = match cfg.mapping {
        Some(m) => m,
        None => MappingConfig::auto(trace, model)?,
    };
    map.validate()?;
    let n = model.dof();

    let mut boxes: Vec<Option<[f64; 4]>> = trace
        .frames
        .iter()
        .map(|f| {
            f.box_obs.as_ref().map(|b| {
                let (p, d) = map_object(b.center, b.size, &map);
                [p[0], p[1], d[0], d[1]]
            })
        })
        .collect();
    let mut angles: Vec<Option<[f64; 3]>> = Vec::with_capacity(n_frames);
    let mut skipped = 0;
    for f in &trace.frames {
        match extract_human_angles(f, f.box_obs.as_ref().map(|b| b.center)) {
            Ok(a) => angles.push(Some(a)),
            Err(Error::Degenerate(_)) => {
                skipped += 1;
                angles.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let bad_boxes = boxes.iter().filter(|b| b.is_none()).count();
    let degenerate = trace.frames.iter().zip(&angles).filter(|(f, a)| a.is_none() || f.box_obs.is_none()).count();
    if degenerate as f64 > cfg.max_degenerate * n_frames as f64 {
        return Err(Error::Rejected(format!(
            "{source}: {degenerate} of {n_frames} frames degenerate ({skipped} arm, {bad_boxes} box), limit {:.0}%",
            cfg.max_degenerate * 100.0
        )));
    }
    interpolate(&mut angles).ok_or_else(|| Error::Rejected(format!("{source}: no valid arm frame")))?;
    interpolate(&mut boxes).ok_or_else(|| Error::Rejected(format!("{source}: no box observation")))?;

    let mut clamped = 0;
    let mut q = Vec::with_capacity(n_frames);
    for a in &angles {
        let mut h = a.unwrap();
        h[0] += map.rotation;
        let (qi, c) = map_joints(&h[..n.min(3)], model)?;
        clamped += c;
        q.push(qi);
    }

    let dt = 1.0 / trace.fps;
    let (qd, qdd) = differentiate(&q, dt, cfg.cutoff_hz)?;
    let steps = n_frames - 1;
    let box_pos: Vec<[f64; 2]> = boxes.iter().map(|b| [b.unwrap()[0], b.unwrap()[1]]).collect();
    let acc = box_accelerations(&box_pos, dt, cfg.cutoff_hz)?;
    let mass = trace.box_mass.unwrap_or(cfg.default_box_mass);
    let first = boxes[0].unwrap();
    let box_size = [first[2], first[3]];

    let states: Vec<JointState> = (0..steps).map(|t| JointState { q: q[t].clone(), qd: qd[t].clone(), qdd: qdd[t].clone() }).collect();
    let mut contact = Vec::with_capacity(steps);
    let mut box_states = Vec::with_capacity(steps);
    for t in 0..steps {
        let b = boxes[t].unwrap();
        let half = [0.5 * b[2], 0.5 * b[3]];
        let flag = match trace.frames[t].contact {
            Some(c) => c,
            None => {
                let tip = crate::dynamics::wrist_position(model, &q[t]);
                dist(tip, [b[0], b[1]]) < half[0].max(half[1]) + cfg.contact_margin
            }
        };
        contact.push(flag);
        box_states.push(BoxState { pos: [b[0], b[1]], vel: [0.0, 0.0], half, mass, contact: flag });
    }
    let tau = label_torques(model, &states, &box_states, &acc[..steps], &contact)?;

    let act: Vec<Vec<f64>> = (0..steps)
        .map(|t| {
            let mut a = states[t].q.clone();
            a.extend_from_slice(&states[t].qd);
            a.extend_from_slice(&tau[t]);
            a
        })
        .collect();
    let meta = TrajMeta { schema: SCHEMA, source: source.to_string(), robot: model.name.clone(), dof: n, box_mass: mass, box_size, clamped, skipped };
    let traj = LabeledTrajectory::assemble(&box_pos[..steps], &contact, act, dt, meta);
    let stats = RegenStats { frames: n_frames, steps, skipped, clamped, contact_steps: contact.iter().filter(|&&c| c).count(), scale: map.scale };
    Ok((traj, stats))
}
