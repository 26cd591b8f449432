use crate::dynamics::RobotModel;

/// Planar quintic segment matching position, velocity and acceleration at
/// both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quintic {
    c: [[f64; 6]; 2],
    pub duration: f64,
}

impl Quintic {
    pub fn new(p0: [f64; 2], v0: [f64; 2], a0: [f64; 2], p1: [f64; 2], v1: [f64; 2], a1: [f64; 2], t: f64) -> Self {
        let mut c = [[0.0; 6]; 2];
        for k in 0..2 {
            let (h0, h1) = (p0[k], p1[k]);
            let (d0, d1) = (v0[k] * t, v1[k] * t);
            let (s0, s1) = (a0[k] * t * t, a1[k] * t * t);
            c[k] = [
                h0,
                d0,
                0.5 * s0,
                10.0 * (h1 - h0) - 6.0 * d0 - 4.0 * d1 - 1.5 * s0 + 0.5 * s1,
                -15.0 * (h1 - h0) + 8.0 * d0 + 7.0 * d1 + 1.5 * s0 - s1,
                6.0 * (h1 - h0) - 3.0 * (d0 + d1) - 0.5 * s0 + 0.5 * s1,
            ];
        }
        Self { c, duration: t }
    }

    pub fn rest_to_rest(p0: [f64; 2], p1: [f64; 2], t: f64) -> Self {
        Self::new(p0, [0.0; 2], [0.0; 2], p1, [0.0; 2], [0.0; 2], t)
    }

    /// Position, velocity and acceleration at local time `s`, clamped to
    /// the segment.
    pub fn eval(&self, s: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let t = self.duration;
        let u = (s / t).clamp(0.0, 1.0);
        let mut out = ([0.0; 2], [0.0; 2], [0.0; 2]);
        for k in 0..2 {
            let c = &self.c[k];
            let p = c[0] + u * (c[1] + u * (c[2] + u * (c[3] + u * (c[4] + u * c[5]))));
            let d = c[1] + u * (2.0 * c[2] + u * (3.0 * c[3] + u * (4.0 * c[4] + u * 5.0 * c[5])));
            let dd = 2.0 * c[2] + u * (6.0 * c[3] + u * (12.0 * c[4] + u * 20.0 * c[5]));
            out.0[k] = p;
            out.1[k] = d / t;
            out.2[k] = dd / (t * t);
        }
        out
    }
}

/// Shoulder and elbow angles placing the second joint's far end at `w`,
/// elbow branch `q2 ≥ 0`. `None` when out of reach.
pub fn ik_wrist(model: &RobotModel, w: [f64; 2]) -> Option<[f64; 2]> {
    let (l1, l2) = (model.links[0].length, model.links[1].length);
    let (dx, dz) = (w[0], w[1] - model.base_height);
    let d2 = dx * dx + dz * dz;
    let c2 = (d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    let q2 = c2.acos();
    let q1 = dz.atan2(dx) - (l2 * q2.sin()).atan2(l1 + l2 * q2.cos());
    Some([q1, q2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::joint_positions;

    #[test]
    fn quintic_boundary_conditions() {
        let q = Quintic::new([0.0, 1.0], [1.0, -2.0], [0.5, -9.81], [0.3, 0.2], [0.0, 0.5], [0.0, 0.0], 0.4);
        let (p, v, a) = q.eval(0.0);
        assert!((p[1] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12 && (a[1] + 9.81).abs() < 1e-9);
        let (p, v, a) = q.eval(0.4);
        assert!((p[0] - 0.3).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12 && a[0].abs() < 1e-9);
    }

    #[test]
    fn ik_reaches_target() {
        let m = RobotModel::builtin("robot_a").unwrap();
        let w = [0.45, m.base_height - 0.2];
        let [q1, q2] = ik_wrist(&m, w).unwrap();
        let p = joint_positions(&m, &[q1, q2, 0.0]);
        assert!((p[2][0] - w[0]).abs() < 1e-12 && (p[2][1] - w[1]).abs() < 1e-12);
        assert!(q2 >= 0.0);
        assert!(ik_wrist(&m, [2.0, 0.0]).is_none());
    }
}
