//! Joint-space MPC tracking of policy references as a QP.
//!
//! The decision variable is the torque deviation `u_k = τ_k - τ̂_k` from the
//! policy's torque reference, so a zero solution executes the policy torques
//! as-is. Equalities are eliminated by single shooting.

pub mod qp;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{forward_dynamics, ExternalWrench, JointState, RobotModel};
use crate::error::{Error, Result};
pub use qp::{DenseQp, KktResiduals, QpSolution};

#[derive(Clone, Debug, PartialEq)]
pub struct MpcConfig {
    pub horizon: usize,
    pub q_q: f64,
    pub q_qd: f64,
    pub q_u: f64,
    pub dt: f64,
    /// symmetric joint acceleration bound (rad/s²); `None` disables the rows
    pub accel_limit: Option<f64>,
    pub state_bounds: bool,
    pub tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self { horizon: 10, q_q: 100.0, q_qd: 1.0, q_u: 1e-3, dt: 0.01, accel_limit: Some(500.0), state_bounds: true, tol: 1e-8 }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err(Error::Contract("mpc horizon must be >= 1 and dt > 0".into()));
        }
        if self.q_q < 0.0 || self.q_qd < 0.0 || self.q_u < 0.0 || self.q_q + self.q_qd == 0.0 {
            return Err(Error::Contract("mpc weights must be nonnegative with some state weight".into()));
        }
        Ok(())
    }
}

/// `x⁺ = A x + B τ + r` about a nominal `(x̄, τ̄)`; the nominal point maps to
/// its forward-Euler successor exactly.
#[derive(Clone, Debug)]
pub struct LinearizedDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r: DVector<f64>,
    pub dt: f64,
}

fn state_derivative(model: &RobotModel, x: &[f64], tau: &[f64], w: &ExternalWrench) -> Result<Vec<f64>> {
    let n = model.dof();
    let qdd = forward_dynamics(model, &x[..n], &x[n..], tau, w)?;
    let mut f = x[n..].to_vec();
    f.extend(qdd);
    Ok(f)
}

pub fn linearize(model: &RobotModel, nominal: &JointState, tau: &[f64], w: &ExternalWrench, dt: f64) -> Result<LinearizedDynamics> {
    if !(dt > 0.0) {
        return Err(Error::Contract(format!("dt must be positive, got {dt}")));
    }
    let n = model.dof();
    let h = 1e-6;
    let mut x: Vec<f64> = nominal.q.clone();
    x.extend_from_slice(&nominal.qd);
    let f0 = state_derivative(model, &x, tau, w)?;
    let mut fx = DMatrix::zeros(2 * n, 2 * n);
    for j in 0..2 * n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (state_derivative(model, &xp, tau, w)?, state_derivative(model, &xm, tau, w)?);
        for i in 0..2 * n {
            fx[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    let mut fu = DMatrix::zeros(2 * n, n);
    for j in 0..n {
        let mut tp = tau.to_vec();
        let mut tm = tau.to_vec();
        tp[j] += h;
        tm[j] -= h;
        let (fp, fm) = (state_derivative(model, &x, &tp, w)?, state_derivative(model, &x, &tm, w)?);
        for i in 0..2 * n {
            fu[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    // the velocity rows of ∂f/∂x are exactly [0 I]; drop finite-difference noise
    for i in 0..n {
        for j in 0..2 * n {
            fx[(i, j)] = if j == n + i { 1.0 } else { 0.0 };
        }
        for j in 0..n {
            fu[(i, j)] = 0.0;
        }
    }
    let a = DMatrix::identity(2 * n, 2 * n) + dt * &fx;
    let b = dt * &fu;
    let xv = DVector::from_vec(x);
    let uv = DVector::from_column_slice(tau);
    let euler = &xv + dt * DVector::from_vec(f0);
    let r = euler - &a * &xv - &b * &uv;
    Ok(LinearizedDynamics { a, b, r, dt })
}

/// Tracking references over the horizon: `q`, `qd` at knots `0..=N_p`,
/// `tau` at steps `0..N_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct MpcRefs {
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
}

impl MpcRefs {
    /// Holds a single reference constant over the horizon.
    pub fn hold(q: &[f64], qd: &[f64], tau: &[f64], horizon: usize) -> Self {
        Self { q: vec![q.to_vec(); horizon + 1], qd: vec![qd.to_vec(); horizon + 1], tau: vec![tau.to_vec(); horizon] }
    }
}

/// Block-quadratic tracking problem. Stage `k` costs
/// `z_kᵀ W_k z_k + w_kᵀ z_k + c_k` with `z_k = (x_k, u_k)`; the terminal
/// stage has no input.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub n: usize,
    pub horizon: usize,
    pub dynamics: LinearizedDynamics,
    pub x0: DVector<f64>,
    pub w_blocks: Vec<DMatrix<f64>>,
    pub w_lin: Vec<DVector<f64>>,
    pub w_const: Vec<f64>,
    pub tau_ref: Vec<DVector<f64>>,
    pub u_lb: Vec<DVector<f64>>,
    pub u_ub: Vec<DVector<f64>>,
    pub x_lb: DVector<f64>,
    pub x_ub: DVector<f64>,
    pub accel_limit: Option<f64>,
    pub state_bounds: bool,
}

pub fn build_qp(model: &RobotModel, cfg: &MpcConfig, refs: &MpcRefs, dynamics: LinearizedDynamics, x0: &JointState) -> Result<QpProblem> {
    cfg.validate()?;
    let n = model.dof();
    let np = cfg.horizon;
    if refs.q.len() != np + 1 || refs.qd.len() != np + 1 || refs.tau.len() != np {
        return Err(Error::Contract(format!(
            "reference horizon mismatch: expected {} knots and {} torques, got {}/{}/{}",
            np + 1,
            np,
            refs.q.len(),
            refs.qd.len(),
            refs.tau.len()
        )));
    }
    let m = 3 * n;
    let mut w_blocks = Vec::with_capacity(np + 1);
    let mut w_lin = Vec::with_capacity(np + 1);
    let mut w_const = Vec::with_capacity(np + 1);
    for k in 0..=np {
        let mut w = DMatrix::zeros(m, m);
        let mut l = DVector::zeros(m);
        let mut c = 0.0;
        for i in 0..n {
            w[(i, i)] = cfg.q_q;
            w[(n + i, n + i)] = cfg.q_qd;
            if k < np {
                w[(2 * n + i, 2 * n + i)] = cfg.q_u;
            }
            l[i] = -2.0 * cfg.q_q * refs.q[k][i];
            l[n + i] = -2.0 * cfg.q_qd * refs.qd[k][i];
            c += cfg.q_q * refs.q[k][i].powi(2) + cfg.q_qd * refs.qd[k][i].powi(2);
        }
        w_blocks.push(w);
        w_lin.push(l);
        w_const.push(c);
    }
    let lim = DVector::from_vec(model.torque_limits());
    let tau_ref: Vec<DVector<f64>> = refs.tau.iter().map(|t| DVector::from_column_slice(t)).collect();
    let u_lb = tau_ref.iter().map(|t| -&lim - t).collect();
    let u_ub = tau_ref.iter().map(|t| &lim - t).collect();
    let mut x_lb = DVector::zeros(2 * n);
    let mut x_ub = DVector::zeros(2 * n);
    for (i, j) in model.joints.iter().enumerate() {
        x_lb[i] = j.lower;
        x_ub[i] = j.upper;
        x_lb[n + i] = -j.velocity;
        x_ub[n + i] = j.velocity;
    }
    let x0v = DVector::from_fn(2 * n, |i, _| if i < n { x0.q[i] } else { x0.qd[i - n] });
    Ok(QpProblem {
        n,
        horizon: np,
        dynamics,
        x0: x0v,
        w_blocks,
        w_lin,
        w_const,
        tau_ref,
        u_lb,
        u_ub,
        x_lb,
        x_ub,
        accel_limit: cfg.accel_limit,
        state_bounds: cfg.state_bounds,
    })
}

/// Reduced problem in the stacked input deviations `U = (u_0 .. u_{N-1})`.
#[derive(Clone, Debug)]
pub struct Condensed {
    pub qp: DenseQp,
    pub constant: f64,
    /// free response `x̄_1 .. x̄_N` stacked
    pub free: DVector<f64>,
    /// `∂X/∂U`
    pub gamma: DMatrix<f64>,
}

impl QpProblem {
    pub fn condense(&self) -> Condensed {
        let (n, np) = (self.n, self.horizon);
        let nx = 2 * n;
        let a = &self.dynamics.a;
        let b = &self.dynamics.b;
        let mut free = DVector::zeros(nx * np);
        let mut x = self.x0.clone();
        for k in 0..np {
            x = a * &x + b * &self.tau_ref[k] + &self.dynamics.r;
            free.rows_mut(k * nx, nx).copy_from(&x);
        }
        let mut gamma = DMatrix::zeros(nx * np, n * np);
        for j in 0..np {
            let mut blk = b.clone();
            for k in j..np {
                gamma.view_mut((k * nx, j * n), (nx, n)).copy_from(&blk);
                blk = a * blk;
            }
        }
        // stage costs
        let mut wx = DMatrix::zeros(nx * np, nx * np);
        let mut lx = DVector::zeros(nx * np);
        let mut wu = DMatrix::zeros(n * np, n * np);
        let mut lu = DVector::zeros(n * np);
        let mut constant = 0.0;
        for k in 0..=np {
            let w = &self.w_blocks[k];
            let l = &self.w_lin[k];
            constant += self.w_const[k];
            if k == 0 {
                let wxx = w.view((0, 0), (nx, nx));
                constant += self.x0.dot(&(wxx * &self.x0)) + l.rows(0, nx).dot(&self.x0);
            } else {
                wx.view_mut(((k - 1) * nx, (k - 1) * nx), (nx, nx)).copy_from(&w.view((0, 0), (nx, nx)));
                lx.rows_mut((k - 1) * nx, nx).copy_from(&l.rows(0, nx));
            }
            if k < np {
                wu.view_mut((k * n, k * n), (n, n)).copy_from(&w.view((nx, nx), (n, n)));
                lu.rows_mut(k * n, n).copy_from(&l.rows(nx, n));
            }
        }
        let gt = gamma.transpose();
        let h = 2.0 * (&gt * &wx * &gamma + &wu);
        let h = 0.5 * (&h + h.transpose());
        let g = &gt * (2.0 * &wx * &free + &lx) + &lu;
        constant += free.dot(&(&wx * &free)) + lx.dot(&free);

        let mut lb = DVector::zeros(n * np);
        let mut ub = DVector::zeros(n * np);
        for k in 0..np {
            lb.rows_mut(k * n, n).copy_from(&self.u_lb[k]);
            ub.rows_mut(k * n, n).copy_from(&self.u_ub[k]);
        }

        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut push = |coef: DVector<f64>, rhs: f64| {
            // rows that no input can influence cannot be enforced
            if coef.amax() > 1e-12 {
                rows.push((coef, rhs));
            }
        };
        if self.state_bounds {
            for k in 0..np {
                for i in 0..nx {
                    let r = k * nx + i;
                    let coef = gamma.row(r).transpose();
                    push(coef.clone(), self.x_ub[i] - free[r]);
                    push(-coef, free[r] - self.x_lb[i]);
                }
            }
        }
        if let Some(amax) = self.accel_limit {
            let dt = self.dynamics.dt;
            for k in 0..np {
                for i in 0..n {
                    let cur = k * nx + n + i;
                    let (coef, base) = if k == 0 {
                        (gamma.row(cur).transpose() / dt, (free[cur] - self.x0[n + i]) / dt)
                    } else {
                        let prev = (k - 1) * nx + n + i;
                        ((gamma.row(cur) - gamma.row(prev)).transpose() / dt, (free[cur] - free[prev]) / dt)
                    };
                    push(coef.clone(), amax - base);
                    push(-coef, amax + base);
                }
            }
        }
        let mut c = DMatrix::zeros(rows.len(), n * np);
        let mut d = DVector::zeros(rows.len());
        for (i, (coef, rhs)) in rows.into_iter().enumerate() {
            c.set_row(i, &coef.transpose());
            d[i] = rhs;
        }
        Condensed { qp: DenseQp { h, g, lb, ub, c, d }, constant, free, gamma }
    }

    /// Full cost of a state/input trajectory (states at knots `0..=N`).
    pub fn cost(&self, states: &[DVector<f64>], inputs: &[DVector<f64>]) -> f64 {
        let nx = 2 * self.n;
        let mut total = 0.0;
        for k in 0..=self.horizon {
            let mut z = DVector::zeros(3 * self.n);
            z.rows_mut(0, nx).copy_from(&states[k]);
            if k < self.horizon {
                z.rows_mut(nx, self.n).copy_from(&inputs[k]);
            }
            total += z.dot(&(&self.w_blocks[k] * &z)) + self.w_lin[k].dot(&z) + self.w_const[k];
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct MpcSolution {
    /// knots `x_0 .. x_N`
    pub states: Vec<DVector<f64>>,
    /// deviations `u_0 .. u_{N-1}`
    pub inputs: Vec<DVector<f64>>,
    /// applied torques `τ̂_k + u_k`
    pub torques: Vec<DVector<f64>>,
    pub residuals: KktResiduals,
    /// max violation of the dynamics equalities
    pub dynamics_residual: f64,
    pub cost: f64,
    pub iterations: usize,
    /// true when state/acceleration rows had to be dropped to stay feasible
    pub relaxed: bool,
    pub stacked: DVector<f64>,
}

pub fn solve_qp(problem: &QpProblem, warm: Option<&DVector<f64>>, tol: f64) -> Result<MpcSolution> {
    let cond = problem.condense();
    let (sol, relaxed) = match qp::solve(&cond.qp, warm, tol) {
        Ok(s) => (s, false),
        Err(Error::Contract(msg)) if msg.contains("infeasible") && cond.qp.c.nrows() > 0 => {
            let boxed = DenseQp::box_only(cond.qp.h.clone(), cond.qp.g.clone(), cond.qp.lb.clone(), cond.qp.ub.clone());
            (qp::solve(&boxed, warm, tol)?, true)
        }
        Err(e) => return Err(e),
    };
    let (n, np) = (problem.n, problem.horizon);
    let nx = 2 * n;
    let inputs: Vec<DVector<f64>> = (0..np).map(|k| sol.x.rows(k * n, n).into_owned()).collect();
    let torques = inputs.iter().zip(&problem.tau_ref).map(|(u, t)| u + t).collect::<Vec<_>>();
    let mut states = vec![problem.x0.clone()];
    let mut dyn_res: f64 = 0.0;
    let stacked = &cond.free + &cond.gamma * &sol.x;
    for k in 0..np {
        let x = stacked.rows(k * nx, nx).into_owned();
        let pred = &problem.dynamics.a * &states[k] + &problem.dynamics.b * &torques[k] + &problem.dynamics.r;
        dyn_res = dyn_res.max((&pred - &x).amax());
        states.push(x);
    }
    let cost = problem.cost(&states, &inputs);
    Ok(MpcSolution {
        states,
        inputs,
        torques,
        residuals: sol.residuals,
        dynamics_residual: dyn_res,
        cost,
        iterations: sol.iterations,
        relaxed,
        stacked: sol.x,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MpcOutput {
    pub tau: Vec<f64>,
    pub fallback: bool,
    pub residuals: KktResiduals,
}

/// Receding-horizon controller owning the warm-start cache and incident log.
#[derive(Clone, Debug)]
pub struct MpcController {
    pub cfg: MpcConfig,
    warm: Option<DVector<f64>>,
    pub incidents: Vec<String>,
    pub solves: usize,
}

impl MpcController {
    pub fn new(cfg: MpcConfig) -> Self {
        Self { cfg, warm: None, incidents: Vec::new(), solves: 0 }
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Linearizes about the current state and the first reference torque,
    /// solves, and returns the torque for the next control tick.
    pub fn step(&mut self, model: &RobotModel, current: &JointState, refs: &MpcRefs, w: &ExternalWrench) -> Result<MpcOutput> {
        let n = model.dof();
        let fallback = |ctl: &mut Self, why: String| {
            ctl.incidents.push(why);
            ctl.warm = None;
            let mut tau = refs.tau.first().cloned().unwrap_or_else(|| vec![0.0; n]);
            model.clamp_torque(&mut tau);
            MpcOutput { tau, fallback: true, residuals: KktResiduals::default() }
        };
        let tau0 = refs.tau.first().ok_or_else(|| Error::Contract("empty torque reference".into()))?;
        let lin = match linearize(model, current, tau0, w, self.cfg.dt) {
            Ok(l) => l,
            Err(e) => return Ok(fallback(self, format!("linearize: {e}"))),
        };
        let problem = build_qp(model, &self.cfg, refs, lin, current)?;
        let warm = self.warm.take();
        match solve_qp(&problem, warm.as_ref(), self.cfg.tol) {
            Ok(sol) => {
                self.solves += 1;
                if sol.relaxed {
                    self.incidents.push(format!("solve {}: state rows relaxed", self.solves));
                }
                let mut shifted = DVector::zeros(n * self.cfg.horizon);
                let len = sol.stacked.len();
                shifted.rows_mut(0, len - n).copy_from(&sol.stacked.rows(n, len - n));
                shifted.rows_mut(len - n, n).copy_from(&sol.stacked.rows(len - n, n));
                self.warm = Some(shifted);
                let mut tau: Vec<f64> = sol.torques[0].iter().copied().collect();
                model.clamp_torque(&mut tau);
                Ok(MpcOutput { tau, fallback: false, residuals: sol.residuals })
            }
            Err(e) => Ok(fallback(self, format!("solve: {e}"))),
        }
    }
}
