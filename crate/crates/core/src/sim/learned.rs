use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::env::Observation;
use super::eval::Policy;
use super::throws::ThrowSpec;
use crate::data::obs_dim;
use crate::dynamics::{inverse_dynamics, ExternalWrench, JointState, RobotModel};
use crate::error::{Error, Result};
use crate::model::{ContextWindow, Decoder, SampleMode};
use crate::mpc::{MpcConfig, MpcController, MpcRefs};
use crate::replan::{initial_plan, z_hash, PlannerConfig, PlannerState, StepLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LearnedKind {
    /// latent plan with variational replanning
    Lap,
    /// the same decoder with z ≡ 0
    Bc,
}

impl LearnedKind {
    pub fn name(self) -> &'static str {
        match self {
            LearnedKind::Lap => "lap",
            LearnedKind::Bc => "bc",
        }
    }
}

/// Source of the previous-step `(q, q̇, τ)` in the decoder observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feedback {
    /// measured: position at the previous policy step, mean velocity and
    /// mean applied torque since
    Realized,
    /// the decoder's previous action; the arm state reaches the policy only
    /// through MPC
    Commanded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedConfig {
    /// policy period; matches the frame period of the training data
    pub policy_dt: f64,
    pub planner: PlannerConfig,
    pub mpc: MpcConfig,
    pub mode: SampleMode,
    pub feedback: Feedback,
}

impl Default for LearnedConfig {
    fn default() -> Self {
        Self { policy_dt: 1.0 / 30.0, planner: PlannerConfig::default(), mpc: MpcConfig::default(), mode: SampleMode::Deterministic, feedback: Feedback::Commanded }
    }
}

/// Decoder queried at the policy rate; its `(q, q̇, τ)` becomes a
/// constant-velocity reference that MPC tracks at every control tick.
///
/// The observation at policy step `k` carries the realized action of step
/// `k − 1`: the joint position then, the mean velocity and the mean applied
/// torque since. At `k = 0` it holds the current pose at rest with the
/// static holding torque, as the first row of a regenerated trajectory does.
pub struct LearnedPolicy {
    pub kind: LearnedKind,
    pub cfg: LearnedConfig,
    dec: Arc<Decoder>,
    mpc: MpcController,
    planner: Option<PlannerState>,
    ctx: ContextWindow,
    rng: ChaCha8Rng,
    seed: u64,
    step: usize,
    log: Vec<StepLog>,
    reference: Option<(f64, Vec<f64>)>,
    prev_q: Vec<f64>,
    prev_t: f64,
    tau_sum: Vec<f64>,
    ticks: usize,
}

impl LearnedPolicy {
    pub fn new(kind: LearnedKind, dec: Arc<Decoder>, cfg: LearnedConfig) -> Result<Self> {
        cfg.planner.validate()?;
        cfg.mpc.validate()?;
        if !(cfg.policy_dt > 0.0) {
            return Err(Error::Contract("policy period must be positive".into()));
        }
        let mpc = MpcController::new(cfg.mpc.clone());
        Ok(Self {
            kind,
            cfg,
            dec,
            mpc,
            planner: None,
            ctx: ContextWindow::default(),
            rng: ChaCha8Rng::seed_from_u64(0),
            seed: 0,
            step: 0,
            log: Vec::new(),
            reference: None,
            prev_q: Vec::new(),
            prev_t: 0.0,
            tau_sum: Vec::new(),
            ticks: 0,
        })
    }

    /// Step log of the current episode (policy steps only).
    pub fn step_log(&self) -> &[StepLog] {
        match &self.planner {
            Some(p) => &p.log,
            None => &self.log,
        }
    }

    pub fn planner(&self) -> Option<&PlannerState> {
        self.planner.as_ref()
    }

    pub fn mpc(&self) -> &MpcController {
        &self.mpc
    }

    /// The decoder observation for the current policy step.
    pub fn observation(&self, model: &RobotModel, obs: &Observation) -> Vec<f64> {
        let n = model.dof();
        let mut o = vec![obs.box_pos[0], obs.box_pos[1], if obs.contact { 1.0 } else { 0.0 }];
        if let (Feedback::Commanded, Some((_, a))) = (self.cfg.feedback, &self.reference) {
            o.extend_from_slice(a);
        } else if self.step == 0 || self.ticks == 0 {
            let tau = inverse_dynamics(model, &JointState::at_rest(&obs.q), &ExternalWrench::at_wrist(obs.force));
            o.extend_from_slice(&obs.q);
            o.extend(std::iter::repeat(0.0).take(n));
            o.extend(tau);
        } else {
            let dt = obs.t - self.prev_t;
            o.extend_from_slice(&self.prev_q);
            o.extend((0..n).map(|i| (obs.q[i] - self.prev_q[i]) / dt));
            o.extend(self.tau_sum.iter().map(|v| v / self.ticks as f64));
        }
        o
    }

    fn decide(&mut self, o: &[f64]) -> Result<Vec<f64>> {
        let dec = Arc::clone(&self.dec);
        match self.kind {
            LearnedKind::Lap => {
                if self.planner.is_none() {
                    self.planner = Some(initial_plan(&dec, &self.cfg.planner, &[o.to_vec()], &[], self.seed)?);
                }
                self.planner.as_mut().unwrap().act(&dec, o, self.cfg.mode)
            }
            LearnedKind::Bc => {
                let (od, ad) = (dec.cfg.obs_dim, dec.cfg.act_dim);
                if self.cfg.planner.realized_actions {
                    if let Some(last) = self.ctx.act.last_mut() {
                        *last = o[od - ad..].to_vec();
                    }
                }
                let z = dec.z_zeros();
                let a = dec.sample_action(&self.ctx, o, &z, self.cfg.mode, &mut self.rng)?;
                self.log.push(StepLog {
                    schema: crate::data::SCHEMA,
                    t: self.step,
                    o: o.to_vec(),
                    a: a.clone(),
                    z_hash: z_hash(&z),
                    mu_mean: 0.0,
                    mu_norm: 0.0,
                    sigma_mean: 1.0,
                    replan_ms: None,
                });
                self.ctx.push(o.to_vec(), a.clone(), dec.cfg.context);
                Ok(a)
            }
        }
    }

    /// MPC references from the latest decoder action at time `t`.
    pub fn references(&self, model: &RobotModel, t: f64) -> Option<MpcRefs> {
        let (t0, a) = self.reference.as_ref()?;
        let n = model.dof();
        let (q, rest) = a.split_at(n);
        let (qd, tau) = rest.split_at(n);
        let h = self.cfg.mpc.horizon;
        let knot = |s: usize| {
            let dt = t - t0 + s as f64 * self.cfg.mpc.dt;
            let mut qs: Vec<f64> = (0..n).map(|i| q[i] + qd[i] * dt).collect();
            model.clamp_q(&mut qs);
            qs
        };
        Some(MpcRefs { q: (0..=h).map(knot).collect(), qd: vec![qd.to_vec(); h + 1], tau: vec![tau.to_vec(); h] })
    }
}

impl Policy for LearnedPolicy {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn step_log(&self) -> Vec<StepLog> {
        LearnedPolicy::step_log(self).to_vec()
    }

    fn reset(&mut self, model: &RobotModel, _throw: &ThrowSpec, seed: u64) -> Result<()> {
        let n = model.dof();
        check_widths(&self.dec, model)?;
        self.mpc = MpcController::new(self.cfg.mpc.clone());
        self.planner = None;
        self.ctx = ContextWindow::default();
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.seed = seed;
        self.step = 0;
        self.log.clear();
        self.reference = None;
        self.tau_sum = vec![0.0; n];
        self.ticks = 0;
        Ok(())
    }

    fn control(&mut self, model: &RobotModel, obs: &Observation) -> Result<Vec<f64>> {
        if obs.t >= self.step as f64 * self.cfg.policy_dt - 1e-9 {
            let o = self.observation(model, obs);
            let a = self.decide(&o)?;
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Planning(format!("non-finite action at policy step {}", self.step)));
            }
            self.reference = Some((obs.t, a));
            self.prev_q = obs.q.clone();
            self.prev_t = obs.t;
            self.tau_sum.iter_mut().for_each(|v| *v = 0.0);
            self.ticks = 0;
            self.step += 1;
        }
        let refs = self.references(model, obs.t).expect("reference set at the first tick");
        let current = JointState { q: obs.q.clone(), qd: obs.qd.clone(), qdd: vec![0.0; obs.q.len()] };
        let out = self.mpc.step(model, &current, &refs, &ExternalWrench::at_wrist(obs.force))?;
        for (s, v) in self.tau_sum.iter_mut().zip(&out.tau) {
            *s += v;
        }
        self.ticks += 1;
        Ok(out.tau)
    }
}

/// Checkpoint error unless the decoder's widths fit `model`'s joint count.
pub fn check_widths(dec: &Decoder, model: &RobotModel) -> Result<()> {
    let n = model.dof();
    if dec.cfg.obs_dim != obs_dim(n) || dec.cfg.act_dim != 3 * n {
        return Err(Error::Checkpoint(format!("decoder widths {}/{} do not fit a {n}-joint arm", dec.cfg.obs_dim, dec.cfg.act_dim)));
    }
    Ok(())
}
