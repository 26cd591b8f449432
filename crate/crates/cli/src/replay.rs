//! Plot-ready CSVs from a policy step log.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{ensure, Result};
use lap_core::dynamics::{wrist_position, RobotModel};
use lap_core::replan::StepLog;

pub const FILES: [&str; 4] = ["joints.csv", "wrist.csv", "box.csv", "latent.csv"];

/// Writes per-joint q/q̇/τ of the decoded actions, the wrist path (forward
/// kinematics of those q), the box path and the posterior drift, one row per
/// logged step.
pub fn write_csvs(log: &[StepLog], robot: &RobotModel, dt: f64, out: &Path) -> Result<()> {
    let n = robot.dof();
    for s in log {
        ensure!(s.a.len() == 3 * n && s.o.len() >= 3, "step {} does not fit a {n}-joint arm", s.t);
    }
    std::fs::create_dir_all(out)?;
    let mut joints = String::from("t,time");
    for key in ["q", "qd", "tau"] {
        for i in 1..=n {
            let _ = write!(joints, ",{key}{i}");
        }
    }
    joints.push('\n');
    let mut wrist = String::from("t,time,x,z\n");
    let mut boxes = String::from("t,time,x,z,contact\n");
    let mut latent = String::from("t,time,mu_mean,mu_norm,sigma_mean,replan,replan_ms\n");
    for s in log {
        let time = s.t as f64 * dt;
        let _ = write!(joints, "{},{time:.6}", s.t);
        for v in &s.a {
            let _ = write!(joints, ",{v:.9}");
        }
        joints.push('\n');
        let w = wrist_position(robot, &s.a[..n]);
        let _ = writeln!(wrist, "{},{time:.6},{:.9},{:.9}", s.t, w[0], w[1]);
        let _ = writeln!(boxes, "{},{time:.6},{:.9},{:.9},{}", s.t, s.o[0], s.o[1], s.o[2] > 0.5);
        let ms = s.replan_ms.map(|m| format!("{m:.3}")).unwrap_or_default();
        let _ = writeln!(latent, "{},{time:.6},{:.9},{:.9},{:.9},{},{ms}", s.t, s.mu_mean, s.mu_norm, s.sigma_mean, s.replan_ms.is_some());
    }
    for (name, text) in FILES.iter().zip([joints, wrist, boxes, latent]) {
        std::fs::write(out.join(name), text)?;
    }
    Ok(())
}
