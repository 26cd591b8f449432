//! Closed-form Lagrangian dynamics of a planar arm with up to three revolute
//! joints, plus ballistic box motion.

mod robot;

pub use robot::{Joint, Link, RobotModel, ROBOT_A, ROBOT_B};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    pub qdd: Vec<f64>,
}

impl JointState {
    pub fn at_rest(q: &[f64]) -> Self {
        Self { q: q.to_vec(), qd: vec![0.0; q.len()], qdd: vec![0.0; q.len()] }
    }
}

/// Point mass with rectangular extents used only for contact geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub half: [f64; 2],
    pub mass: f64,
    pub contact: bool,
}

/// Planar force exerted by the arm on the environment at `point`.
/// `point = None` means the wrist point (tip of the last link).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ExternalWrench {
    pub force: [f64; 2],
    pub point: Option<[f64; 2]>,
}

impl ExternalWrench {
    pub fn at_wrist(force: [f64; 2]) -> Self {
        Self { force, point: None }
    }
}

/// Absolute link angles.
pub fn link_angles(q: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    q.iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect()
}

/// Positions of the shoulder, each joint after it, and the wrist point
/// (`n + 1` points).
pub fn joint_positions(model: &RobotModel, q: &[f64]) -> Vec<[f64; 2]> {
    let th = link_angles(q);
    let mut p = [0.0, model.base_height];
    let mut out = vec![p];
    for (l, t) in model.links.iter().zip(&th) {
        p = [p[0] + l.length * t.cos(), p[1] + l.length * t.sin()];
        out.push(p);
    }
    out
}

pub fn wrist_position(model: &RobotModel, q: &[f64]) -> [f64; 2] {
    *joint_positions(model, q).last().unwrap()
}

pub fn wrist_velocity(model: &RobotModel, q: &[f64], qd: &[f64]) -> [f64; 2] {
    let j = jacobian(model, q);
    let v = &j * DVector::from_column_slice(qd);
    [v[0], v[1]]
}

fn check_len(model: &RobotModel, v: &[f64], what: &str) {
    assert_eq!(v.len(), model.dof(), "{what} has {} entries for a {}-joint model", v.len(), model.dof());
}

/// `r[i][j]`: lever from joint j to the com of link i along link j
/// (zero for j > i).
fn com_levers(model: &RobotModel) -> Vec<Vec<f64>> {
    let n = model.dof();
    (0..n)
        .map(|i| (0..n).map(|j| if j < i { model.links[j].length } else if j == i { model.links[i].com } else { 0.0 }).collect())
        .collect()
}

/// Mass-weighted lever products `K[a][b] = Σ_i m_i r_ia r_ib` and the
/// rotational diagonal, in absolute-angle coordinates.
fn absolute_coefficients(model: &RobotModel) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = model.dof();
    let r = com_levers(model);
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        let m = model.links[i].mass;
        for a in 0..n {
            for b in 0..n {
                k[a][b] += m * r[i][a] * r[i][b];
            }
        }
    }
    let rot = model.links.iter().map(|l| l.inertia).collect();
    (k, rot)
}

/// Maps absolute-angle quantities to relative joints: `θ = L q` with L lower
/// triangular ones, so `M = Lᵀ H L`.
fn to_joint_space(h: &DMatrix<f64>) -> DMatrix<f64> {
    let n = h.nrows();
    let l = DMatrix::from_fn(n, n, |r, c| if r >= c { 1.0 } else { 0.0 });
    l.transpose() * h * l
}

pub fn inertia_matrix(model: &RobotModel, q: &[f64]) -> DMatrix<f64> {
    check_len(model, q, "q");
    let n = model.dof();
    let th = link_angles(q);
    let (k, rot) = absolute_coefficients(model);
    let h = DMatrix::from_fn(n, n, |a, b| k[a][b] * (th[a] - th[b]).cos() + if a == b { rot[a] } else { 0.0 });
    to_joint_space(&h)
}

/// `∂M/∂q_k` for each k.
pub fn inertia_derivatives(model: &RobotModel, q: &[f64]) -> Vec<DMatrix<f64>> {
    let n = model.dof();
    let th = link_angles(q);
    let (k, _) = absolute_coefficients(model);
    (0..n)
        .map(|jk| {
            // θ_c depends on q_jk iff c >= jk
            let dh = DMatrix::from_fn(n, n, |a, b| {
                let da = if a >= jk { 1.0 } else { 0.0 };
                let db = if b >= jk { 1.0 } else { 0.0 };
                -k[a][b] * (th[a] - th[b]).sin() * (da - db)
            });
            to_joint_space(&dh)
        })
        .collect()
}

/// Christoffel-symbol Coriolis matrix, so that `Ṁ - 2C` is skew-symmetric.
pub fn coriolis_matrix(model: &RobotModel, q: &[f64], qd: &[f64]) -> DMatrix<f64> {
    check_len(model, qd, "qd");
    let n = model.dof();
    let dm = inertia_derivatives(model, q);
    DMatrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| 0.5 * (dm[k][(i, j)] + dm[j][(i, k)] - dm[i][(j, k)]) * qd[k]).sum()
    })
}

pub fn potential_energy(model: &RobotModel, q: &[f64]) -> f64 {
    let th = link_angles(q);
    let mut z = model.base_height;
    let mut v = 0.0;
    for (l, t) in model.links.iter().zip(&th) {
        v += l.mass * model.gravity * (z + l.com * t.sin());
        z += l.length * t.sin();
    }
    v
}

pub fn kinetic_energy(model: &RobotModel, q: &[f64], qd: &[f64]) -> f64 {
    let m = inertia_matrix(model, q);
    let v = DVector::from_column_slice(qd);
    0.5 * v.dot(&(&m * &v))
}

pub fn gravity_vector(model: &RobotModel, q: &[f64]) -> Vec<f64> {
    check_len(model, q, "q");
    let n = model.dof();
    let th = link_angles(q);
    let r = com_levers(model);
    // ∂z_com_i/∂θ_j = r_ij cos θ_j, and θ_j depends on q_k for j >= k
    let mut dabs = vec![0.0; n];
    for i in 0..n {
        for j in 0..=i {
            dabs[j] += model.links[i].mass * model.gravity * r[i][j] * th[j].cos();
        }
    }
    (0..n).map(|k| dabs[k..].iter().sum()).collect()
}

/// Jacobian of an arbitrary point rigidly attached to the last link.
pub fn point_jacobian(model: &RobotModel, q: &[f64], point: [f64; 2]) -> DMatrix<f64> {
    check_len(model, q, "q");
    let n = model.dof();
    let joints = joint_positions(model, q);
    DMatrix::from_fn(2, n, |r, k| {
        let d = [point[0] - joints[k][0], point[1] - joints[k][1]];
        if r == 0 {
            -d[1]
        } else {
            d[0]
        }
    })
}

/// 2×n Jacobian of the wrist point.
pub fn jacobian(model: &RobotModel, q: &[f64]) -> DMatrix<f64> {
    point_jacobian(model, q, wrist_position(model, q))
}

fn wrench_torque(model: &RobotModel, q: &[f64], w: &ExternalWrench) -> DVector<f64> {
    if w.force == [0.0, 0.0] {
        return DVector::zeros(model.dof());
    }
    let j = match w.point {
        Some(p) => point_jacobian(model, q, p),
        None => jacobian(model, q),
    };
    j.transpose() * DVector::from_column_slice(&w.force)
}

/// `τ = M q̈ + C q̇ + G + Jᵀ F`, where F is the force the arm exerts on the
/// environment.
pub fn inverse_dynamics(model: &RobotModel, s: &JointState, w: &ExternalWrench) -> Vec<f64> {
    check_len(model, &s.qdd, "qdd");
    let m = inertia_matrix(model, &s.q);
    let c = coriolis_matrix(model, &s.q, &s.qd);
    let g = DVector::from_vec(gravity_vector(model, &s.q));
    let tau = m * DVector::from_column_slice(&s.qdd) + c * DVector::from_column_slice(&s.qd) + g + wrench_torque(model, &s.q, w);
    tau.iter().copied().collect()
}

/// `q̈ = M⁻¹(τ - C q̇ - G - Jᵀ F)` by Cholesky.
pub fn forward_dynamics(model: &RobotModel, q: &[f64], qd: &[f64], tau: &[f64], w: &ExternalWrench) -> Result<Vec<f64>> {
    check_len(model, tau, "tau");
    let m = inertia_matrix(model, q);
    let c = coriolis_matrix(model, q, qd);
    let g = DVector::from_vec(gravity_vector(model, q));
    let rhs = DVector::from_column_slice(tau) - c * DVector::from_column_slice(qd) - g - wrench_torque(model, q, w);
    let chol = m.cholesky().ok_or_else(|| Error::Model(format!("{}: inertia matrix not positive definite", model.name)))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

/// Semi-implicit Euler step of free flight under gravity `g`.
pub fn ballistic_step(b: &BoxState, dt: f64, g: f64) -> BoxState {
    let mut out = b.clone();
    out.vel[1] -= g * dt;
    out.pos[0] += out.vel[0] * dt;
    out.pos[1] += out.vel[1] * dt;
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_pendulum(m: f64, l: f64, g: f64) -> RobotModel {
        let mut r = RobotModel::uniform(&[m], &[l], g);
        r.links[0].com = l;
        r.links[0].inertia = 0.0;
        r
    }

    #[test]
    fn single_point_mass_inertia() {
        let r = point_pendulum(2.0, 0.7, 9.81);
        for q in [0.0, 0.4, -2.0] {
            assert!((inertia_matrix(&r, &[q])[(0, 0)] - 2.0 * 0.49).abs() < 1e-14);
        }
    }

    #[test]
    fn single_link_gravity() {
        let mut r = RobotModel::uniform(&[1.0], &[1.0], 9.81);
        r.links[0].com = 0.5;
        assert!((gravity_vector(&r, &[0.0])[0] - 4.905).abs() < 1e-12);
        assert!(gravity_vector(&r, &[std::f64::consts::FRAC_PI_2])[0].abs() < 1e-12);
        let c = coriolis_matrix(&r, &[0.3], &[2.0]);
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn wrist_jacobian_single_link() {
        let r = RobotModel::uniform(&[1.0], &[0.8], 9.81);
        let j = jacobian(&r, &[0.0]);
        assert!(j[(0, 0)].abs() < 1e-15);
        assert!((j[(1, 0)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn ballistic_hand_arithmetic() {
        let b = BoxState { pos: [0.0, 0.0], vel: [0.0, 1.0], half: [0.1, 0.1], mass: 1.0, contact: false };
        let s = ballistic_step(&b, 0.1, 9.81);
        assert!((s.vel[1] - 0.019).abs() < 1e-12);
        assert!((s.pos[1] - 0.0019).abs() < 1e-12);
        assert_eq!(ballistic_step(&b, 0.0, 9.81), b);
    }

    #[test]
    fn builtin_profiles_validate() {
        for name in ["robot_a", "robot_b"] {
            let r = RobotModel::builtin(name).unwrap();
            assert_eq!(r.dof(), 3);
            let back = RobotModel::from_kv(&r.to_kv()).unwrap();
            assert_eq!(back, r);
        }
        let a = RobotModel::builtin("robot_a").unwrap();
        assert!((a.arm_length() - 0.775).abs() < 1e-12);
    }
}
