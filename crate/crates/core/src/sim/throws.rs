use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::RobotModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxProfile {
    pub name: String,
    pub mass: f64,
    /// width and height (m)
    pub size: [f64; 2],
}

/// Boxes A–C: (name, mass kg, width m, height m).
pub const PROFILES: [(&str, f64, f64, f64); 3] = [("A", 0.453, 0.66, 0.14), ("B", 0.777, 0.61, 0.305), ("C", 0.660, 0.671, 0.23)];

impl BoxProfile {
    pub fn builtin(name: &str) -> Result<Self> {
        PROFILES
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .map(|p| Self { name: p.0.to_string(), mass: p.1, size: [p.2, p.3] })
            .ok_or_else(|| Error::Validation(format!("unknown box profile '{name}'")))
    }

    pub fn all() -> Vec<Self> {
        PROFILES.iter().map(|p| Self::builtin(p.0).unwrap()).collect()
    }

    pub fn half(&self) -> [f64; 2] {
        [0.5 * self.size[0], 0.5 * self.size[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThrowSpec {
    /// box center at release (m)
    pub release: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(rename = "box")]
    pub profile: BoxProfile,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThrowConfig {
    pub speed: [f64; 2],
    pub angle_deg: [f64; 2],
    pub height: [f64; 2],
    /// catch zone for the box bottom center, relative to the shoulder, in
    /// units of the arm length
    pub zone_x: [f64; 2],
    pub zone_z: [f64; 2],
    pub aim_noise: f64,
    /// clearance between the released box and the arm's reach (m)
    pub clearance: f64,
    /// shortest flight time from release to the aim point (s)
    pub min_flight: f64,
}

impl Default for ThrowConfig {
    fn default() -> Self {
        Self {
            speed: [2.0, 4.0],
            angle_deg: [-10.0, 20.0],
            height: [1.2, 1.6],
            zone_x: [0.55, 0.85],
            zone_z: [-0.45, -0.05],
            aim_noise: 0.02,
            clearance: 0.05,
            min_flight: 0.35,
        }
    }
}

/// Time at which a ballistic point at height `z0` with vertical speed `vz`
/// descends through `z`.
pub(crate) fn descent_time(z0: f64, vz: f64, z: f64, g: f64) -> Option<f64> {
    let disc = vz * vz + 2.0 * g * (z0 - z);
    if disc < 0.0 {
        return None;
    }
    let t = (vz + disc.sqrt()) / g;
    (t > 0.0).then_some(t)
}

/// True if the box bottom center passes through the tip's reachable annulus
/// before reaching the floor.
pub fn reachable(model: &RobotModel, throw: &ThrowSpec) -> bool {
    let g = model.gravity;
    let h = throw.profile.half()[1];
    let (r_max, r_min) = (model.reach(), lower_reach(model));
    let mut t = 0.0;
    while t < 3.0 {
        let x = throw.release[0] + throw.velocity[0] * t;
        let z = throw.release[1] - h + throw.velocity[1] * t - 0.5 * g * t * t;
        if z < 0.0 {
            return false;
        }
        let d = x.hypot(z - model.base_height);
        if d <= r_max && d >= r_min {
            return true;
        }
        t += 1e-3;
    }
    false
}

fn lower_reach(model: &RobotModel) -> f64 {
    let (l1, l2) = (model.links[0].length, model.links[1].length);
    let q2 = model.joints[1].upper.min(std::f64::consts::PI);
    (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * q2.cos()).max(0.0).sqrt()
}

/// Samples `n` throws of one box profile aimed at the catch zone. Release
/// speed, angle and height are uniform over the configured ranges; the
/// release distance follows from the aim point.
pub fn sample_throws(model: &RobotModel, cfg: &ThrowConfig, profile: &BoxProfile, n: usize, seed: u64) -> Vec<ThrowSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.aim_noise.max(1e-300)).unwrap();
    let l = model.arm_length();
    let g = model.gravity;
    let [hw, hh] = profile.half();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
        let angle = rng.gen_range(cfg.angle_deg[0]..=cfg.angle_deg[1]).to_radians();
        let height = rng.gen_range(cfg.height[0]..=cfg.height[1]);
        let tx = l * rng.gen_range(cfg.zone_x[0]..=cfg.zone_x[1]);
        let tz = model.base_height + l * rng.gen_range(cfg.zone_z[0]..=cfg.zone_z[1]);
        let (vx, vz) = (speed * angle.cos(), speed * angle.sin());
        let Some(t) = descent_time(height, vz, tz + hh, g) else { continue };
        if t < cfg.min_flight {
            continue;
        }
        let release_x = tx + vx * t;
        if release_x - hw < model.reach() + cfg.clearance {
            continue;
        }
        let a = angle + if cfg.aim_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        out.push(ThrowSpec {
            release: [release_x, height],
            velocity: [-speed * a.cos(), speed * a.sin()],
            profile: profile.clone(),
        });
    }
    out
}

#[derive(Serialize, Deserialize)]
struct ThrowFile {
    schema: u32,
    throws: Vec<ThrowSpec>,
}

pub fn save_throws(path: &Path, throws: &[ThrowSpec]) -> Result<()> {
    let f = ThrowFile { schema: crate::data::SCHEMA, throws: throws.to_vec() };
    std::fs::write(path, serde_json::to_string_pretty(&f)?)?;
    Ok(())
}

/// Accepts either `{"schema": 1, "throws": [...]}` or a bare list.
pub fn load_throws(path: &Path) -> Result<Vec<ThrowSpec>> {
    let text = std::fs::read_to_string(path)?;
    let parse_err = |e: serde_json::Error| Error::Parse { file: path.display().to_string(), msg: e.to_string() };
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(parse_err);
    }
    let f: ThrowFile = serde_json::from_str(&text).map_err(parse_err)?;
    if f.schema != crate::data::SCHEMA {
        return Err(Error::Parse { file: path.display().to_string(), msg: format!("unsupported schema {}", f.schema) });
    }
    Ok(f.throws)
}
