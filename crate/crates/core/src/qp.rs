//! Self-contained convex QP solver for the MPC subproblems.
//!
//! Solves `min 1/2 z'Pz + q'z  s.t.  l <= Az <= u` (equality rows encoded by
//! `l_i = u_i`) with an operator-splitting (ADMM) iteration: a quasi-definite
//! KKT system is factorized once per penalty value with a dense LDL^T and each
//! iteration costs one pair of triangular solves plus a projection. Problem
//! data is Ruiz-equilibrated up front; termination tests unscaled KKT
//! residuals, so reported tolerances refer to the original problem.
//!
//! The iteration schedule is fixed and nothing is randomized: identical
//! inputs produce bitwise-identical iterates.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Quadratic program in standard two-sided-constraint form.
#[derive(Clone, Debug)]
pub struct QpProblem {
    /// Symmetric positive-semidefinite cost matrix (n x n).
    pub p: DMatrix<f64>,
    /// Linear cost (n).
    pub q: DVector<f64>,
    /// Constraint matrix (m x n).
    pub a: DMatrix<f64>,
    /// Row lower bounds (m); `-inf` allowed.
    pub l: DVector<f64>,
    /// Row upper bounds (m); `+inf` allowed.
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        if n == 0 || m == 0 {
            return Err(Error::InvalidInput("QP needs n >= 1 and m >= 1".into()));
        }
        if self.p.ncols() != n || self.a.ncols() != n || self.q.len() != n {
            return Err(Error::InvalidInput("QP cost/constraint dimensions disagree".into()));
        }
        if self.l.len() != m || self.u.len() != m {
            return Err(Error::InvalidInput("QP bound dimensions disagree".into()));
        }
        let scale = self.p.amax().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (self.p[(i, j)] - self.p[(j, i)]).abs() > 1e-10 * scale {
                    return Err(Error::InvalidInput(format!(
                        "cost matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..m {
            if self.l[i] > self.u[i] || self.l[i].is_nan() || self.u[i].is_nan() {
                return Err(Error::InvalidInput(format!(
                    "row {i} bounds invalid: [{}, {}]",
                    self.l[i], self.u[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    /// Primal solution (n).
    pub z: DVector<f64>,
    /// Dual solution (m).
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// `1/2 z'Pz + q'z` at the returned iterate.
    pub objective: f64,
}

/// Solver tolerances and iteration schedule.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverCfg {
    pub eps_prim: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    /// Initial ADMM penalty; adapted by residual balancing.
    pub rho: f64,
    /// Primal regularization of the KKT matrix.
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Residual-balancing interval in iterations.
    pub adapt_interval: usize,
    /// Infeasibility certificate tolerance.
    pub eps_infeas: f64,
}

impl Default for SolverCfg {
    fn default() -> Self {
        Self {
            eps_prim: 1e-6,
            eps_dual: 1e-6,
            max_iter: 4000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adapt_interval: 25,
            eps_infeas: 1e-5,
        }
    }
}

/// Optional initial primal/dual iterate, e.g. the previous receding-horizon
/// solution shifted by one step.
#[derive(Clone, Debug)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

/// Equality rows are given a stiffer penalty than inequality rows.
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RUIZ_ITERS: usize = 10;

struct Scaling {
    /// Variable scaling (n).
    d: DVector<f64>,
    /// Constraint scaling (m).
    e: DVector<f64>,
    /// Cost scaling.
    c: f64,
}

/// Ruiz equilibration of the stacked [P A'; A 0] matrix plus cost
/// normalization; mutates the problem in place and returns the scaling.
fn ruiz_equilibrate(p: &mut DMatrix<f64>, q: &mut DVector<f64>, a: &mut DMatrix<f64>) -> Scaling {
    let n = p.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..RUIZ_ITERS {
        let mut delta_d = DVector::from_element(n, 1.0);
        let mut delta_e = DVector::from_element(m, 1.0);
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(p[(i, j)].abs());
            }
            for i in 0..m {
                norm = norm.max(a[(i, j)].abs());
            }
            if norm > 1e-12 {
                delta_d[j] = 1.0 / norm.sqrt();
            }
        }
        for i in 0..m {
            let norm = a.row(i).amax();
            if norm > 1e-12 {
                delta_e[i] = 1.0 / norm.sqrt();
            }
        }
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= delta_d[i] * delta_d[j];
            }
            q[j] *= delta_d[j];
        }
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] *= delta_e[i] * delta_d[j];
            }
        }
        d.component_mul_assign(&delta_d);
        e.component_mul_assign(&delta_e);

        // cost normalization keeps the scaled objective O(1)
        let mut mean_col = 0.0;
        for j in 0..n {
            let mut norm: f64 = 0.0;
            for i in 0..n {
                norm = norm.max(p[(i, j)].abs());
            }
            mean_col += norm;
        }
        mean_col /= n as f64;
        let gamma = 1.0 / mean_col.max(q.amax()).max(1e-12);
        *p *= gamma;
        *q *= gamma;
        c *= gamma;
    }
    Scaling { d, e, c }
}

/// Dense in-place LDL^T of a symmetric quasi-definite matrix (unit lower
/// factor in the strict lower triangle, D on the diagonal). No pivoting.
fn ldlt_factor(k: &mut DMatrix<f64>) -> bool {
    let n = k.nrows();
    let data = k.as_mut_slice();
    for j in 0..n {
        let dj = data[j * n + j];
        if dj == 0.0 || !dj.is_finite() {
            return false;
        }
        for i in (j + 1)..n {
            data[j * n + i] /= dj;
        }
        for col in (j + 1)..n {
            let ljc = data[j * n + col];
            if ljc != 0.0 {
                let w = ljc * dj;
                let (head, tail) = data.split_at_mut(col * n);
                let col_j = &head[j * n..j * n + n];
                let col_c = &mut tail[..n];
                for i in col..n {
                    col_c[i] -= w * col_j[i];
                }
            }
        }
    }
    true
}

/// Solves `L D L' x = b` with the packed factor from [`ldlt_factor`].
fn ldlt_solve(f: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = f.nrows();
    let data = f.as_slice();
    let x = b.as_mut_slice();
    for j in 0..n {
        let xj = x[j];
        if xj != 0.0 {
            let col = &data[j * n..j * n + n];
            for i in (j + 1)..n {
                x[i] -= col[i] * xj;
            }
        }
    }
    for j in 0..n {
        x[j] /= data[j * n + j];
    }
    for j in (0..n).rev() {
        let col = &data[j * n..j * n + n];
        let mut acc = 0.0;
        for i in (j + 1)..n {
            acc += col[i] * x[i];
        }
        x[j] -= acc;
    }
}

fn assemble_kkt(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    sigma: f64,
    rho_vec: &DVector<f64>,
) -> DMatrix<f64> {
    let n = p.nrows();
    let m = a.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(p);
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    for i in 0..m {
        k[(n + i, n + i)] = -1.0 / rho_vec[i];
    }
    k
}

fn rho_vector(base: f64, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == u[i] {
            (base * RHO_EQ_FACTOR).clamp(RHO_MIN, RHO_MAX)
        } else {
            base
        }
    })
}

/// Primal infeasibility certificate on the unscaled dual step.
fn is_primal_infeasible(
    a: &DMatrix<f64>,
    l: &DVector<f64>,
    u: &DVector<f64>,
    dy: &DVector<f64>,
    eps: f64,
) -> bool {
    let norm = dy.amax();
    if norm <= 1e-14 {
        return false;
    }
    let dy_hat = dy / norm;
    let at_dy = a.transpose() * &dy_hat;
    if at_dy.amax() > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy_hat.len() {
        let v = dy_hat[i];
        if v > 1e-12 {
            if u[i] == f64::INFINITY {
                return false;
            }
            support += u[i] * v;
        } else if v < -1e-12 {
            if l[i] == f64::NEG_INFINITY {
                return false;
            }
            support += l[i] * v;
        }
    }
    support < -eps
}

fn clamp_vec(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i].clamp(l[i], u[i]))
}

/// Solves the QP; statuses are reported, never panicked on.
pub fn solve_qp(prob: &QpProblem, cfg: &SolverCfg, warm: Option<&WarmStart>) -> Result<QpSolution> {
    prob.validate()?;
    if !(cfg.rho > 0.0 && cfg.sigma > 0.0 && cfg.max_iter >= 1) {
        return Err(Error::InvalidConfig("solver needs rho > 0, sigma > 0, max_iter >= 1".into()));
    }
    let n = prob.n();
    let m = prob.m();

    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let scal = ruiz_equilibrate(&mut p, &mut q, &mut a);
    let l = DVector::from_fn(m, |i, _| prob.l[i] * scal.e[i]);
    let u = DVector::from_fn(m, |i, _| prob.u[i] * scal.e[i]);

    let mut rho_base = cfg.rho;
    let mut rho = rho_vector(rho_base, &l, &u);
    let mut kkt = assemble_kkt(&p, &a, cfg.sigma, &rho);
    if !ldlt_factor(&mut kkt) {
        return Err(Error::Numerical("KKT factorization failed".into()));
    }

    // scaled iterates
    let mut z = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some(ws) = warm {
        if ws.z.len() == n && ws.y.len() == m {
            for j in 0..n {
                z[j] = ws.z[j] / scal.d[j];
            }
            for i in 0..m {
                y[i] = ws.y[i] * scal.c / scal.e[i];
            }
        }
    }
    let mut w = clamp_vec(&(&a * &z), &l, &u);

    let mut status = QpStatus::MaxIter;
    let mut r_prim = f64::INFINITY;
    let mut r_dual = f64::INFINITY;
    let mut iterations = cfg.max_iter;

    for k in 1..=cfg.max_iter {
        let mut rhs = DVector::zeros(n + m);
        for j in 0..n {
            rhs[j] = cfg.sigma * z[j] - q[j];
        }
        for i in 0..m {
            rhs[n + i] = w[i] - y[i] / rho[i];
        }
        ldlt_solve(&kkt, &mut rhs);
        let z_tilde = rhs.rows(0, n).into_owned();
        let nu = rhs.rows(n, m).into_owned();
        let w_tilde = DVector::from_fn(m, |i, _| w[i] + (nu[i] - y[i]) / rho[i]);

        let z_next = cfg.alpha * &z_tilde + (1.0 - cfg.alpha) * &z;
        let w_relax = DVector::from_fn(m, |i, _| {
            cfg.alpha * w_tilde[i] + (1.0 - cfg.alpha) * w[i]
        });
        let w_next = DVector::from_fn(m, |i, _| (w_relax[i] + y[i] / rho[i]).clamp(l[i], u[i]));
        let y_next = DVector::from_fn(m, |i, _| y[i] + rho[i] * (w_relax[i] - w_next[i]));

        let dy_unscaled = DVector::from_fn(m, |i, _| (y_next[i] - y[i]) * scal.e[i] / scal.c);
        z = z_next;
        w = w_next;
        y = y_next;

        // unscaled residuals
        let az = &a * &z;
        let pz = &p * &z;
        let aty = a.transpose() * &y;
        r_prim = (0..m).map(|i| ((az[i] - w[i]) / scal.e[i]).abs()).fold(0.0, f64::max);
        r_dual = (0..n)
            .map(|j| ((pz[j] + q[j] + aty[j]) / scal.d[j]).abs() / scal.c)
            .fold(0.0, f64::max);

        if r_prim <= cfg.eps_prim && r_dual <= cfg.eps_dual {
            status = QpStatus::Solved;
            iterations = k;
            break;
        }

        if k % cfg.adapt_interval == 0 {
            if is_primal_infeasible(&prob.a, &prob.l, &prob.u, &dy_unscaled, cfg.eps_infeas) {
                status = QpStatus::PrimalInfeasible;
                iterations = k;
                break;
            }
            // residual balancing on scaled quantities
            let rp_rel = (0..m).map(|i| (az[i] - w[i]).abs()).fold(0.0, f64::max)
                / az.amax().max(w.amax()).max(1e-30);
            let rd_rel = (0..n).map(|j| (pz[j] + q[j] + aty[j]).abs()).fold(0.0, f64::max)
                / pz.amax().max(aty.amax()).max(q.amax()).max(1e-30);
            let candidate = (rho_base * (rp_rel / rd_rel.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if candidate > 5.0 * rho_base || candidate < rho_base / 5.0 {
                rho_base = candidate;
                rho = rho_vector(rho_base, &l, &u);
                kkt = assemble_kkt(&p, &a, cfg.sigma, &rho);
                if !ldlt_factor(&mut kkt) {
                    return Err(Error::Numerical("KKT refactorization failed".into()));
                }
            }
        }
    }

    let z_out = DVector::from_fn(n, |j, _| z[j] * scal.d[j]);
    let y_out = DVector::from_fn(m, |i, _| y[i] * scal.e[i] / scal.c);
    let objective = 0.5 * (&prob.p * &z_out).dot(&z_out) + prob.q.dot(&z_out);
    Ok(QpSolution {
        z: z_out,
        y: y_out,
        status,
        primal_residual: r_prim,
        dual_residual: r_dual,
        iterations,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn solve(prob: &QpProblem) -> QpSolution {
        solve_qp(prob, &SolverCfg::default(), None).unwrap()
    }

    #[test]
    fn clipped_scalar_minimum() {
        // min 1/2 z^2 - z on [0, 0.5]: unconstrained optimum 1 clips to 0.5
        let prob = QpProblem {
            p: DMatrix::from_element(1, 1, 1.0),
            q: DVector::from_element(1, -1.0),
            a: DMatrix::from_element(1, 1, 1.0),
            l: DVector::from_element(1, 0.0),
            u: DVector::from_element(1, 0.5),
        };
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.z[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn equality_rows_pin_the_solution() {
        let prob = QpProblem {
            p: DMatrix::identity(2, 2),
            q: DVector::zeros(2),
            a: DMatrix::identity(2, 2),
            l: DVector::from_vec(vec![1.0, 2.0]),
            u: DVector::from_vec(vec![1.0, 2.0]),
        };
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(sol.z[1], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn kkt_residuals_within_tolerance_on_solved() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            q: DVector::from_vec(vec![1.0, 1.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            u: DVector::from_vec(vec![1.0, 0.7, 0.7]),
        };
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!(sol.primal_residual <= 1e-6);
        assert!(sol.dual_residual <= 1e-6);
        // optimum of this standard instance: z = [0.3, 0.7]
        assert_relative_eq!(sol.z[0], 0.3, epsilon = 1e-5);
        assert_relative_eq!(sol.z[1], 0.7, epsilon = 1e-5);
    }

    #[test]
    fn conflicting_equalities_flag_primal_infeasible() {
        let prob = QpProblem {
            p: DMatrix::identity(1, 1),
            q: DVector::zeros(1),
            a: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            l: DVector::from_vec(vec![0.0, 1.0]),
            u: DVector::from_vec(vec![0.0, 1.0]),
        };
        let sol = solve(&prob);
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn cost_scaling_leaves_argmin_unchanged() {
        let base = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 1.0]),
            q: DVector::from_vec(vec![-1.0, 2.0]),
            a: DMatrix::identity(2, 2),
            l: DVector::from_vec(vec![-1.0, -1.0]),
            u: DVector::from_vec(vec![1.0, 1.0]),
        };
        let tight = SolverCfg { eps_prim: 1e-9, eps_dual: 1e-9, ..SolverCfg::default() };
        let ref_sol = solve_qp(&base, &tight, None).unwrap();
        for c in [0.1, 10.0] {
            let scaled = QpProblem { p: &base.p * c, q: &base.q * c, ..base.clone() };
            let sol = solve_qp(&scaled, &tight, None).unwrap();
            assert_eq!(sol.status, QpStatus::Solved);
            for j in 0..2 {
                assert!((sol.z[j] - ref_sol.z[j]).abs() < 1e-6, "c={c}");
            }
        }
    }

    #[test]
    fn identical_inputs_give_bitwise_identical_solutions() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            q: DVector::from_vec(vec![1.0, 1.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            u: DVector::from_vec(vec![1.0, 0.7, 0.7]),
        };
        let s1 = solve(&prob);
        let s2 = solve(&prob);
        assert_eq!(s1.z.as_slice(), s2.z.as_slice());
        assert_eq!(s1.y.as_slice(), s2.y.as_slice());
        assert_eq!(s1.iterations, s2.iterations);
    }

    #[test]
    fn warm_start_converges_to_the_same_point() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]),
            q: DVector::from_vec(vec![1.0, 1.0]),
            a: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0]),
            l: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            u: DVector::from_vec(vec![1.0, 0.7, 0.7]),
        };
        let cold = solve(&prob);
        let warm = WarmStart { z: cold.z.clone(), y: cold.y.clone() };
        let re = solve_qp(&prob, &SolverCfg::default(), Some(&warm)).unwrap();
        assert_eq!(re.status, QpStatus::Solved);
        assert!(re.iterations <= cold.iterations);
        for j in 0..2 {
            assert_relative_eq!(re.z[j], cold.z[j], epsilon = 1e-6);
        }
    }

    #[test]
    fn asymmetric_cost_is_rejected() {
        let prob = QpProblem {
            p: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            q: DVector::zeros(2),
            a: DMatrix::identity(2, 2),
            l: DVector::from_element(2, -1.0),
            u: DVector::from_element(2, 1.0),
        };
        assert!(solve_qp(&prob, &SolverCfg::default(), None).is_err());
    }
}
