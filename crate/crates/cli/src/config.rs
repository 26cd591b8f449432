use std::path::Path;

use anyhow::{Context, Result};
use lap_core::experiment::ExperimentConfig;
use lap_core::kv::KvFile;
use lap_core::model::{ModelConfig, SampleMode};
use lap_core::mpc::MpcConfig;
use lap_core::replan::PlannerConfig;
use lap_core::sim::{EnvConfig, Feedback, LearnedConfig};
use lap_core::vb::TrainConfig;

/// Run parameters from an optional `key = value` file. Sections are key
/// prefixes: `train.`, `model.`, `plan.`, `mpc.`, `env.`; unprefixed keys
/// belong to the desk experiment.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub kv: KvFile,
    /// sha256 of the config text, empty without a file
    pub hash: String,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self { kv: KvFile::default(), hash: String::new() }),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let kv = KvFile::parse(&p.display().to_string(), &text)?;
                Ok(Self { kv, hash: crate::manifest::sha256_hex(text.as_bytes()) })
            }
        }
    }

    pub fn train(&self, fixed_z: bool, seed: Option<u64>, jobs: Option<usize>) -> Result<TrainConfig> {
        let mut c = TrainConfig::from_kv(&self.kv.section("train."))?;
        c.fixed_z = fixed_z;
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(j) = jobs {
            c.jobs = j;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn model(&self, obs_dim: usize, act_dim: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::for_dims(obs_dim, act_dim);
        c.apply_kv(&self.kv.section("model."))?;
        Ok(c)
    }

    pub fn mpc(&self) -> Result<MpcConfig> {
        let kv = self.kv.section("mpc.");
        let d = MpcConfig::default();
        let accel: f64 = kv.get_or("accel_limit", d.accel_limit.unwrap_or(0.0))?;
        let c = MpcConfig {
            horizon: kv.get_or("horizon", d.horizon)?,
            q_q: kv.get_or("q_q", d.q_q)?,
            q_qd: kv.get_or("q_qd", d.q_qd)?,
            q_u: kv.get_or("q_u", d.q_u)?,
            dt: kv.get_or("dt", d.dt)?,
            accel_limit: if accel > 0.0 { Some(accel) } else { None },
            state_bounds: kv.get_or("state_bounds", d.state_bounds)?,
            tol: kv.get_or("tol", d.tol)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn env(&self) -> Result<EnvConfig> {
        let kv = self.kv.section("env.");
        let d = EnvConfig::default();
        let c = EnvConfig {
            physics_dt: kv.get_or("physics_dt", d.physics_dt)?,
            control_dt: kv.get_or("control_dt", d.control_dt)?,
            duration: kv.get_or("duration", d.duration)?,
            stiffness: kv.get_or("stiffness", d.stiffness)?,
            damping: kv.get_or("damping", d.damping)?,
            friction: kv.get_or("friction", d.friction)?,
            friction_eps: kv.get_or("friction_eps", d.friction_eps)?,
            contact_enabled: kv.get_or("contact_enabled", d.contact_enabled)?,
            contact_threshold: kv.get_or("contact_threshold", d.contact_threshold)?,
            success_hold: kv.get_or("success_hold", d.success_hold)?,
            success_speed: kv.get_or("success_speed", d.success_speed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn learned(&self) -> Result<LearnedConfig> {
        let kv = self.kv.section("plan.");
        let d = PlannerConfig::default();
        let planner = PlannerConfig {
            delta: kv.get_or("delta", d.delta)?,
            t_local: kv.get_or("t_local", d.t_local)?,
            t_replan: kv.get_or("t_replan", d.t_replan)?,
            lr: kv.get_or("lr", d.lr)?,
            inflation: kv.get_or("inflation", d.inflation)?,
            realized_actions: kv.get_or("realized_actions", d.realized_actions)?,
        };
        planner.validate()?;
        let mode = match kv.raw("mode").unwrap_or("deterministic") {
            "deterministic" => SampleMode::Deterministic,
            "stochastic" => SampleMode::Stochastic,
            other => anyhow::bail!("plan.mode must be deterministic or stochastic, got {other:?}"),
        };
        let feedback = match kv.raw("feedback") {
            None => LearnedConfig::default().feedback,
            Some("realized") => Feedback::Realized,
            Some("commanded") => Feedback::Commanded,
            Some(other) => anyhow::bail!("plan.feedback must be realized or commanded, got {other:?}"),
        };
        let policy_dt = 1.0 / kv.get_or("rate_hz", 30.0)?;
        Ok(LearnedConfig { policy_dt, planner, mpc: self.mpc()?, mode, feedback })
    }

    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::desk();
        c.apply_kv(&self.kv)?;
        c.env = self.env()?;
        c.learned = self.learned()?;
        c.validate()?;
        Ok(c)
    }
}
