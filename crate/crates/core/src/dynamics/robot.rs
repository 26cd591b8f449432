use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvFile;

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub mass: f64,
    pub length: f64,
    /// distance from the joint to the center of mass along the link
    pub com: f64,
    /// rotational inertia about the center of mass
    pub inertia: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub velocity: f64,
    pub torque: f64,
    pub active: bool,
    /// retargeting map `q_robot = gain * q_human + offset`
    pub gain: f64,
    pub offset: f64,
}

/// Planar serial arm in the sagittal x-z plane. Joint angles are relative;
/// absolute link angles are measured counterclockwise from +x and gravity
/// points along -z. The base (shoulder) sits at `(0, base_height)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub gravity: f64,
    pub base_height: f64,
    /// nominal ready configuration used by the simulator and the demonstrator
    pub ready: Vec<f64>,
}

impl RobotModel {
    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Upper arm plus forearm, used to scale demonstrations.
    pub fn arm_length(&self) -> f64 {
        self.links.iter().take(2).map(|l| l.length).sum()
    }

    pub fn reach(&self) -> f64 {
        self.links.iter().map(|l| l.length).sum()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.upper).collect()
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.torque).collect()
    }

    pub fn velocity_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.velocity).collect()
    }

    pub fn clamp_q(&self, q: &mut [f64]) -> usize {
        let mut n = 0;
        for (x, j) in q.iter_mut().zip(&self.joints) {
            let c = x.clamp(j.lower, j.upper);
            if c != *x {
                n += 1;
                *x = c;
            }
        }
        n
    }

    pub fn clamp_torque(&self, tau: &mut [f64]) {
        for (t, j) in tau.iter_mut().zip(&self.joints) {
            *t = t.clamp(-j.torque, j.torque);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.links.len();
        if n == 0 || n > 3 {
            return Err(Error::Model(format!("{}: expected 1 to 3 links, got {n}", self.name)));
        }
        if self.joints.len() != n || self.ready.len() != n {
            return Err(Error::Model(format!("{}: joint/ready count does not match {n} links", self.name)));
        }
        for (i, l) in self.links.iter().enumerate() {
            let ok = l.mass > 0.0 && l.length > 0.0 && l.com >= 0.0 && l.com <= l.length && l.inertia >= 0.0;
            if !ok || ![l.mass, l.length, l.com, l.inertia].iter().all(|v| v.is_finite()) {
                return Err(Error::Model(format!("{}: link {} has invalid inertial parameters", self.name, i + 1)));
            }
        }
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.lower < j.upper) || !(j.torque > 0.0) || !(j.velocity > 0.0) {
                return Err(Error::Model(format!("{}: joint {} has invalid limits", self.name, i + 1)));
            }
            if !(j.lower..=j.upper).contains(&self.ready[i]) {
                return Err(Error::Model(format!("{}: ready pose violates joint {} limits", self.name, i + 1)));
            }
        }
        if !(self.gravity >= 0.0) {
            return Err(Error::Model(format!("{}: gravity must be nonnegative", self.name)));
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let name = kv.raw("name").unwrap_or("robot").to_string();
        let n: usize = kv.require("dof")?;
        let mut links = Vec::with_capacity(n);
        let mut joints = Vec::with_capacity(n);
        let mut ready = Vec::with_capacity(n);
        for i in 1..=n {
            let length: f64 = kv.require(&format!("link.{i}.length"))?;
            links.push(Link {
                mass: kv.require(&format!("link.{i}.mass"))?,
                length,
                com: kv.get_or(&format!("link.{i}.com"), length / 2.0)?,
                inertia: kv.get_or(&format!("link.{i}.inertia"), 0.0)?,
            });
            joints.push(Joint {
                name: kv.raw(&format!("joint.{i}.name")).unwrap_or("joint").to_string(),
                lower: kv.require(&format!("joint.{i}.lower"))?,
                upper: kv.require(&format!("joint.{i}.upper"))?,
                velocity: kv.get_or(&format!("joint.{i}.velocity"), 20.0)?,
                torque: kv.require(&format!("joint.{i}.torque"))?,
                active: kv.get_or(&format!("joint.{i}.active"), true)?,
                gain: kv.get_or(&format!("joint.{i}.gain"), 1.0)?,
                offset: kv.get_or(&format!("joint.{i}.offset"), 0.0)?,
            });
            ready.push(kv.get_or(&format!("ready.{i}"), 0.0)?);
        }
        let m = Self {
            name,
            links,
            joints,
            gravity: kv.get_or("gravity", 9.81)?,
            base_height: kv.get_or("base.height", 0.0)?,
            ready,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("name", &self.name);
        kv.set("dof", self.dof());
        kv.set("gravity", self.gravity);
        kv.set("base.height", self.base_height);
        for (i, (l, j)) in self.links.iter().zip(&self.joints).enumerate() {
            let i = i + 1;
            kv.set(&format!("link.{i}.mass"), l.mass);
            kv.set(&format!("link.{i}.length"), l.length);
            kv.set(&format!("link.{i}.com"), l.com);
            kv.set(&format!("link.{i}.inertia"), l.inertia);
            kv.set(&format!("joint.{i}.name"), &j.name);
            kv.set(&format!("joint.{i}.lower"), j.lower);
            kv.set(&format!("joint.{i}.upper"), j.upper);
            kv.set(&format!("joint.{i}.velocity"), j.velocity);
            kv.set(&format!("joint.{i}.torque"), j.torque);
            kv.set(&format!("joint.{i}.active"), j.active);
            kv.set(&format!("joint.{i}.gain"), j.gain);
            kv.set(&format!("joint.{i}.offset"), j.offset);
            kv.set(&format!("ready.{i}"), self.ready[i - 1]);
        }
        kv
    }

    /// Built-in profile text by name (`robot_a`, `robot_b`).
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "robot_a" | "a" => ROBOT_A,
            "robot_b" | "b" => ROBOT_B,
            _ => return Err(Error::Model(format!("unknown builtin profile {name:?}"))),
        };
        Self::from_kv(&KvFile::parse(name, text)?)
    }

    /// Loads a profile from a path, or a builtin when the argument names one.
    pub fn resolve(arg: &str) -> Result<Self> {
        let p = Path::new(arg);
        if p.exists() {
            Self::load(p)
        } else {
            Self::builtin(arg)
        }
    }

    /// Uniform-rod arm used by tests and toy experiments.
    pub fn uniform(masses: &[f64], lengths: &[f64], gravity: f64) -> Self {
        let links = masses
            .iter()
            .zip(lengths)
            .map(|(&m, &l)| Link { mass: m, length: l, com: l / 2.0, inertia: m * l * l / 12.0 })
            .collect::<Vec<_>>();
        let joints = (0..links.len())
            .map(|i| Joint {
                name: format!("j{}", i + 1),
                lower: -3.0,
                upper: 3.0,
                velocity: 30.0,
                torque: 100.0,
                active: true,
                gain: 1.0,
                offset: 0.0,
            })
            .collect();
        Self { name: "uniform".into(), ready: vec![0.0; links.len()], links, joints, gravity, base_height: 0.0 }
    }
}

pub const ROBOT_A: &str = include_str!("../../../../profiles/robot_a.profile");
pub const ROBOT_B: &str = include_str!("../../../../profiles/robot_b.profile");
