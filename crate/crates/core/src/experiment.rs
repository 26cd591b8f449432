//! The desk-scale comparison: synthetic demonstrations, regeneration,
//! LAP and BC training from one initialization, and evaluation of the three
//! methods on a shared throw grid.

use std::path::Path;
use std::sync::Arc;

use crate::data::{act_dim, obs_dim, save_dataset, LabeledTrajectory};
use crate::dynamics::RobotModel;
use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::model::{Decoder, ModelConfig, Normalizer};
use crate::regen::{regenerate, RegenConfig};
use crate::sim::{
    evaluate, sample_throws, save_throws, summarize, synth_demos, write_results, write_summary, BoxProfile, DemoConfig, EnvConfig, EpisodeRow, LearnedConfig, LearnedKind,
    LearnedPolicy, ModelBasedConfig, ModelBasedPolicy, Policy, SummaryRow, ThrowConfig, ThrowSpec,
};
use crate::vb::{train, EpochLog, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub demos: usize,
    pub demo_seed: u64,
    pub demo: DemoConfig,
    pub regen: RegenConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub throws_per_profile: usize,
    pub throw: ThrowConfig,
    pub throw_seed: u64,
    pub env: EnvConfig,
    pub learned: LearnedConfig,
    pub baseline: ModelBasedConfig,
    pub eval_seed: u64,
    pub jobs: usize,
}

impl ExperimentConfig {
    /// Sizes that fit the desk budget on one core: a small decoder, four
    /// local steps per epoch and a capped epoch count.
    pub fn desk() -> Self {
        let model = ModelConfig { hidden: 32, heads: 4, blocks: 2, ff: 64, z_tokens: 4, z_dim: 8, ..ModelConfig::for_dims(12, 9) };
        let train = TrainConfig { epochs: 120, t_local: 4, local_lr: 1e-2, global_lr: 1e-3, ..TrainConfig::default() };
        Self {
            demos: 200,
            demo_seed: 11,
            demo: DemoConfig::default(),
            regen: RegenConfig::default(),
            model,
            model_seed: 1,
            train,
            throws_per_profile: 30,
            throw: ThrowConfig::default(),
            throw_seed: 99,
            env: EnvConfig::default(),
            learned: LearnedConfig::default(),
            baseline: ModelBasedConfig::default(),
            eval_seed: 5,
            jobs: 1,
        }
    }

    /// Overrides from a key-value file: experiment keys unprefixed, decoder
    /// sizes under `model.`, training keys under `train.`.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        self.demos = kv.get_or("demos", self.demos)?;
        self.demo_seed = kv.get_or("demo_seed", self.demo_seed)?;
        self.model_seed = kv.get_or("model_seed", self.model_seed)?;
        self.throws_per_profile = kv.get_or("throws_per_profile", self.throws_per_profile)?;
        self.throw_seed = kv.get_or("throw_seed", self.throw_seed)?;
        self.eval_seed = kv.get_or("eval_seed", self.eval_seed)?;
        self.jobs = kv.get_or("jobs", self.jobs)?;
        self.model.apply_kv(&kv.section("model."))?;
        self.train.apply_kv(&kv.section("train."))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.demos == 0 || self.throws_per_profile == 0 || self.jobs == 0 {
            return Err(Error::Contract("demos, throws per profile and jobs must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.env.validate()
    }
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub rows: Vec<EpisodeRow>,
    pub summary: Vec<SummaryRow>,
    pub lap_log: Vec<EpochLog>,
    pub bc_log: Vec<EpochLog>,
    pub lap: Arc<Decoder>,
    pub bc: Arc<Decoder>,
    pub dataset: Vec<LabeledTrajectory>,
    pub throws: Vec<ThrowSpec>,
}

/// Demonstrations regenerated onto `robot`; rejected traces are skipped.
pub fn build_dataset(robot: &RobotModel, cfg: &ExperimentConfig) -> Result<Vec<LabeledTrajectory>> {
    let demos = synth_demos(cfg.demos, robot, &cfg.demo, cfg.demo_seed)?;
    let mut data = Vec::with_capacity(demos.len());
    for (i, d) in demos.iter().enumerate() {
        match regenerate(&d.trace, robot, &cfg.regen, &format!("demo_{i:04}")) {
            Ok((t, _)) => data.push(t),
            Err(Error::Rejected(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if data.is_empty() {
        return Err(Error::Rejected("every demonstration was rejected".into()));
    }
    Ok(data)
}

pub fn throw_grid(robot: &RobotModel, cfg: &ExperimentConfig) -> Vec<ThrowSpec> {
    BoxProfile::all()
        .iter()
        .enumerate()
        .flat_map(|(i, p)| sample_throws(robot, &cfg.throw, p, cfg.throws_per_profile, cfg.throw_seed.wrapping_add(i as u64)))
        .collect()
}

/// Runs the whole comparison; with `out`, writes the dataset, throw set,
/// both training directories, `results.csv` and `summary.csv` there.
pub fn run_experiment(robot: &RobotModel, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
    }
    let dataset = build_dataset(robot, cfg)?;
    let norm = Normalizer::fit(&dataset)?;
    let mc = ModelConfig { obs_dim: obs_dim(robot.dof()), act_dim: act_dim(robot.dof()), ..cfg.model.clone() };
    let init = Decoder::new(mc, norm, cfg.model_seed)?;
    let lap_cfg = TrainConfig { fixed_z: false, jobs: cfg.jobs, ..cfg.train.clone() };
    let bc_cfg = TrainConfig { fixed_z: true, jobs: cfg.jobs, ..cfg.train.clone() };
    let lap = train(init.clone(), &dataset, &lap_cfg, out.map(|d| d.join("lap")).as_deref())?;
    let bc = train(init, &dataset, &bc_cfg, out.map(|d| d.join("bc")).as_deref())?;
    let throws = throw_grid(robot, cfg);
    let (lap_dec, bc_dec) = (Arc::new(lap.decoder), Arc::new(bc.decoder));

    let mut rows = Vec::new();
    let (r, _) = evaluate("model-based", robot, &cfg.env, &throws, || Ok(Box::new(ModelBasedPolicy::new(cfg.baseline.clone())) as Box<dyn Policy>), cfg.eval_seed, cfg.jobs)?;
    rows.extend(r);
    for (kind, dec) in [(LearnedKind::Bc, &bc_dec), (LearnedKind::Lap, &lap_dec)] {
        let make = || Ok(Box::new(LearnedPolicy::new(kind, dec.clone(), cfg.learned.clone())?) as Box<dyn Policy>);
        let (r, _) = evaluate(kind.name(), robot, &cfg.env, &throws, make, cfg.eval_seed, cfg.jobs)?;
        rows.extend(r);
    }
    let summary = summarize(&rows);
    if let Some(dir) = out {
        save_dataset(&dir.join("dataset.jsonl"), &dataset)?;
        save_throws(&dir.join("throws.json"), &throws)?;
        write_results(&dir.join("results.csv"), &rows)?;
        write_summary(&dir.join("summary.csv"), &summary)?;
    }
    Ok(ExperimentOutput { rows, summary, lap_log: lap.log, bc_log: bc.log, lap: lap_dec, bc: bc_dec, dataset, throws })
}

/// Per-method totals over all profiles: (successes, mean energy over
/// non-excluded episodes).
pub fn method_totals(rows: &[EpisodeRow], method: &str) -> (usize, f64) {
    let mine: Vec<&EpisodeRow> = rows.iter().filter(|r| r.method == method && r.excluded_reason.is_empty()).collect();
    let wins = mine.iter().filter(|r| r.success).count();
    let energy = if mine.is_empty() { f64::NAN } else { mine.iter().map(|r| r.energy_j).sum::<f64>() / mine.len() as f64 };
    (wins, energy)
}
