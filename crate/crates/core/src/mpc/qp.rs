//! Dense strictly convex QP solvers:
//! `min ½ xᵀHx + gᵀx  s.t.  lb ≤ x ≤ ub,  Cx ≤ d`.
//!
//! Bound-only problems use projected Newton with an exact active-set solve on
//! the free variables. When general rows are present and the bound-only
//! solution violates them, a Goldfarb–Idnani dual active-set method takes over.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    /// general rows `c x ≤ d` (may have zero rows)
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_lower: DVector<f64>,
    pub lambda_upper: DVector<f64>,
    pub lambda_rows: DVector<f64>,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

impl DenseQp {
    /// Plain-text dump for cross-checking with external solvers: dimensions,
    /// then H row by row, g, lb, ub, C row by row and d.
    pub fn dump(&self) -> String {
        let mut s = format!("n {}\nm {}\n", self.dim(), self.c.nrows());
        let mut row = |name: &str, v: &mut dyn Iterator<Item = f64>| {
            s.push_str(name);
            for x in v {
                s.push_str(&format!(" {x:e}"));
            }
            s.push('\n');
        };
        for i in 0..self.h.nrows() {
            row("H", &mut self.h.row(i).iter().copied());
        }
        row("g", &mut self.g.iter().copied());
        row("lb", &mut self.lb.iter().copied());
        row("ub", &mut self.ub.iter().copied());
        for i in 0..self.c.nrows() {
            row("C", &mut self.c.row(i).iter().copied());
        }
        row("d", &mut self.d.iter().copied());
        s
    }

    pub fn box_only(h: DMatrix<f64>, g: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Self {
        let n = g.len();
        Self { h, g, lb, ub, c: DMatrix::zeros(0, n), d: DVector::zeros(0) }
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    fn check(&self) -> Result<()> {
        let n = self.dim();
        if self.h.nrows() != n || self.h.ncols() != n || self.lb.len() != n || self.ub.len() != n {
            return Err(Error::Contract("qp dimensions do not conform".into()));
        }
        if self.c.ncols() != n || self.c.nrows() != self.d.len() {
            return Err(Error::Contract("qp inequality rows do not conform".into()));
        }
        for i in 0..n {
            if self.lb[i] > self.ub[i] {
                return Err(Error::Contract(format!("infeasible bounds on variable {i}: {} > {}", self.lb[i], self.ub[i])));
            }
        }
        Ok(())
    }

    /// Scale used to make residuals dimensionless.
    fn scale(&self, x: &DVector<f64>) -> f64 {
        1.0f64.max(self.g.amax()).max(self.h.amax() * x.amax())
    }

    /// KKT residuals for a candidate primal/dual point, relative to `scale`.
    pub fn residuals(&self, x: &DVector<f64>, ll: &DVector<f64>, lu: &DVector<f64>, lr: &DVector<f64>) -> KktResiduals {
        let s = self.scale(x);
        let mut grad = &self.h * x + &self.g - ll + lu;
        if self.c.nrows() > 0 {
            grad += self.c.transpose() * lr;
        }
        let mut feas: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for i in 0..self.dim() {
            feas = feas.max(self.lb[i] - x[i]).max(x[i] - self.ub[i]);
            if ll[i] != 0.0 {
                comp = comp.max((ll[i] * (x[i] - self.lb[i])).abs());
            }
            if lu[i] != 0.0 {
                comp = comp.max((lu[i] * (self.ub[i] - x[i])).abs());
            }
        }
        // negative multipliers count as stationarity violations
        let mut dual_neg: f64 = 0.0;
        for v in ll.iter().chain(lu.iter()).chain(lr.iter()) {
            dual_neg = dual_neg.max(-v);
        }
        if self.c.nrows() > 0 {
            let slack = &self.d - &self.c * x;
            for i in 0..slack.len() {
                feas = feas.max(-slack[i]);
                if lr[i] != 0.0 {
                    comp = comp.max((lr[i] * slack[i]).abs());
                }
            }
        }
        KktResiduals { stationarity: grad.amax().max(dual_neg) / s, feasibility: feas / s, complementarity: comp / s }
    }
}

fn clamp(x: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| x[i].clamp(lb[i], ub[i]))
}

fn sub_matrix(h: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])])
}

fn bound_multipliers(qp: &DenseQp, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let gr = &qp.h * x + &qp.g;
    let n = qp.dim();
    let mut ll = DVector::zeros(n);
    let mut lu = DVector::zeros(n);
    for i in 0..n {
        if x[i] <= qp.lb[i] && gr[i] > 0.0 {
            ll[i] = gr[i];
        } else if x[i] >= qp.ub[i] && gr[i] < 0.0 {
            lu[i] = -gr[i];
        }
    }
    (ll, lu)
}

/// Projected Newton on the bound constraints only; general rows are ignored.
pub fn solve_box(qp: &DenseQp, x0: Option<&DVector<f64>>, tol: f64) -> Result<QpSolution> {
    qp.check()?;
    let n = qp.dim();
    let mut x = match x0 {
        Some(v) if v.len() == n => clamp(v, &qp.lb, &qp.ub),
        _ => clamp(&DVector::zeros(n), &qp.lb, &qp.ub),
    };
    let no_rows = DVector::zeros(qp.c.nrows());
    for it in 0..MAX_ITERS {
        let gr = &qp.h * &x + &qp.g;
        let mut free = Vec::with_capacity(n);
        for i in 0..n {
            let at_lo = x[i] <= qp.lb[i] && gr[i] > 0.0;
            let at_hi = x[i] >= qp.ub[i] && gr[i] < 0.0;
            if !(at_lo || at_hi) {
                free.push(i);
            }
        }
        let (ll, lu) = bound_multipliers(qp, &x);
        let res = qp.residuals(&x, &ll, &lu, &no_rows);
        if res.max() <= tol {
            return Ok(QpSolution { x, lambda_lower: ll, lambda_upper: lu, lambda_rows: no_rows, iterations: it, residuals: res });
        }
        if free.is_empty() {
            // every variable binding with correct sign means KKT holds; only
            // reachable when residuals are dominated by rounding
            return Ok(QpSolution { x, lambda_lower: ll, lambda_upper: lu, lambda_rows: no_rows, iterations: it, residuals: res });
        }
        let hff = sub_matrix(&qp.h, &free, &free);
        let gf = DVector::from_fn(free.len(), |i, _| gr[free[i]]);
        let chol = hff.cholesky().ok_or_else(|| Error::Contract("qp Hessian is not positive definite".into()))?;
        let step = chol.solve(&(-gf));
        let mut dir = DVector::zeros(n);
        for (k, &i) in free.iter().enumerate() {
            dir[i] = step[k];
        }
        let f0 = qp.objective(&x);
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-14 {
            let xn = clamp(&(&x + alpha * &dir), &qp.lb, &qp.ub);
            let dec = gr.dot(&(&xn - &x));
            if qp.objective(&xn) <= f0 + 1e-4 * dec {
                accepted = Some(xn);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(xn) => {
                if (&xn - &x).amax() == 0.0 {
                    let (ll, lu) = bound_multipliers(qp, &xn);
                    let res = qp.residuals(&xn, &ll, &lu, &no_rows);
                    return if res.max() <= tol * 1e3 {
                        Ok(QpSolution { x: xn, lambda_lower: ll, lambda_upper: lu, lambda_rows: no_rows, iterations: it, residuals: res })
                    } else {
                        Err(solver_error(it, res))
                    };
                }
                x = xn;
            }
            None => break,
        }
    }
    let (ll, lu) = bound_multipliers(qp, &x);
    let res = qp.residuals(&x, &ll, &lu, &no_rows);
    Err(solver_error(MAX_ITERS, res))
}

fn solver_error(iters: usize, r: KktResiduals) -> Error {
    Error::Solver { iters, stationarity: r.stationarity, feasibility: r.feasibility, complementarity: r.complementarity }
}

/// Goldfarb–Idnani dual active-set method over all constraints (bounds are
/// turned into rows). Exact up to rounding.
pub fn solve_dual_active_set(qp: &DenseQp, tol: f64) -> Result<QpSolution> {
    qp.check()?;
    let n = qp.dim();
    let m_rows = qp.c.nrows();
    // constraints as nᵢᵀx ≥ bᵢ
    let total = m_rows + 2 * n;
    let normal = |i: usize| -> DVector<f64> {
        if i < m_rows {
            -qp.c.row(i).transpose()
        } else if i < m_rows + n {
            let mut e = DVector::zeros(n);
            e[i - m_rows] = 1.0;
            e
        } else {
            let mut e = DVector::zeros(n);
            e[i - m_rows - n] = -1.0;
            e
        }
    };
    let rhs = |i: usize| -> f64 {
        if i < m_rows {
            -qp.d[i]
        } else if i < m_rows + n {
            qp.lb[i - m_rows]
        } else {
            -qp.ub[i - m_rows - n]
        }
    };
    // skip infinite bounds
    let usable: Vec<bool> = (0..total).map(|i| rhs(i).is_finite()).collect();
    let normals: Vec<DVector<f64>> = (0..total).map(normal).collect();

    let chol = qp.h.clone().cholesky().ok_or_else(|| Error::Contract("qp Hessian is not positive definite".into()))?;
    let l = chol.l();
    let linv = l.clone().try_inverse().ok_or_else(|| Error::Contract("singular Cholesky factor".into()))?;
    let mut x = chol.solve(&(-&qp.g));
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let scale = 1.0f64.max(qp.g.amax()).max(qp.h.amax());
    let feas_tol = tol * scale;

    let factor = |active: &[usize]| -> (DMatrix<f64>, DMatrix<f64>) {
        let q = active.len();
        let mut aug = DMatrix::zeros(n, q + n);
        for (k, &i) in active.iter().enumerate() {
            aug.set_column(k, &(&linv * &normals[i]));
        }
        for k in 0..n {
            aug[(k, q + k)] = 1.0;
        }
        let qr = aug.qr();
        let qm = qr.q();
        let r = qr.r();
        let j = linv.transpose() * qm;
        let rq = r.view((0, 0), (q, q)).into_owned();
        (j, rq)
    };

    let mut iters = 0;
    loop {
        iters += 1;
        if iters > 10 * (total + n) + MAX_ITERS {
            break;
        }
        // most violated constraint
        let mut p = None;
        let mut worst = -feas_tol;
        for i in 0..total {
            if !usable[i] || active.contains(&i) {
                continue;
            }
            let s = normals[i].dot(&x) - rhs(i);
            if s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            // primal feasible: KKT holds
            let mut ll = DVector::zeros(n);
            let mut lu = DVector::zeros(n);
            let mut lr = DVector::zeros(m_rows);
            for (&i, &ui) in active.iter().zip(&u) {
                if i < m_rows {
                    lr[i] = ui;
                } else if i < m_rows + n {
                    ll[i - m_rows] = ui;
                } else {
                    lu[i - m_rows - n] = ui;
                }
            }
            // snap bound-active variables exactly onto their bounds
            for &i in &active {
                if i >= m_rows && i < m_rows + n {
                    x[i - m_rows] = qp.lb[i - m_rows];
                } else if i >= m_rows + n {
                    x[i - m_rows - n] = qp.ub[i - m_rows - n];
                }
            }
            let res = qp.residuals(&x, &ll, &lu, &lr);
            return Ok(QpSolution { x, lambda_lower: ll, lambda_upper: lu, lambda_rows: lr, iterations: iters, residuals: res });
        };
        let np = &normals[p];
        let mut uplus = u.clone();
        uplus.push(0.0);
        loop {
            iters += 1;
            if iters > 10 * (total + n) + MAX_ITERS {
                break;
            }
            let q = active.len();
            let (j, r) = factor(&active);
            let dvec = j.transpose() * np;
            let z = j.columns(q, n - q) * dvec.rows(q, n - q);
            let rdir = if q > 0 {
                r.solve_upper_triangular(&dvec.rows(0, q).into_owned()).ok_or_else(|| Error::Contract("dependent active constraints".into()))?
            } else {
                DVector::zeros(0)
            };
            let mut t1 = f64::INFINITY;
            let mut drop_k = None;
            for k in 0..q {
                if rdir[k] > 1e-14 {
                    let t = uplus[k] / rdir[k];
                    if t < t1 {
                        t1 = t;
                        drop_k = Some(k);
                    }
                }
            }
            let zn = z.dot(np);
            let t2 = if z.amax() > 1e-13 && zn > 1e-300 { -(np.dot(&x) - rhs(p)) / zn } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(Error::Contract("qp constraints are infeasible".into()));
            }
            for k in 0..q {
                uplus[k] -= t * rdir[k];
            }
            uplus[q] += t;
            if t2.is_finite() {
                x += t * &z;
            }
            if t2 <= t1 {
                active.push(p);
                u = uplus;
                break;
            }
            let k = drop_k.expect("partial step has a blocking constraint");
            active.remove(k);
            uplus.remove(k);
        }
    }
    let (ll, lu) = bound_multipliers(qp, &x);
    let res = qp.residuals(&x, &ll, &lu, &DVector::zeros(m_rows));
    Err(solver_error(iters, res))
}

/// Bound-only projected Newton first; falls back to the dual active-set
/// method when general rows are violated.
pub fn solve(qp: &DenseQp, x0: Option<&DVector<f64>>, tol: f64) -> Result<QpSolution> {
    let boxed = solve_box(qp, x0, tol);
    if qp.c.nrows() == 0 {
        return boxed;
    }
    if let Ok(sol) = &boxed {
        let slack = &qp.d - &qp.c * &sol.x;
        if slack.min() >= -tol * qp.scale(&sol.x) {
            return boxed;
        }
    }
    let sol = solve_dual_active_set(qp, tol)?;
    if sol.residuals.max() > tol {
        return Err(solver_error(sol.iterations, sol.residuals));
    }
    Ok(sol)
}
