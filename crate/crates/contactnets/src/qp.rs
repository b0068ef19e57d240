//! Dense convex QP solver for the loss program:
//!
//! minimize 1/2 z' P z + c' z   subject to   lower <= A z <= upper
//!
//! Operator-splitting iteration with a fixed step parameter and
//! over-relaxation, followed by an active-set polish on convergence. The
//! programs here are small (n around 10 per contact), so dense LU
//! factorizations are used throughout. Iteration order is deterministic;
//! identical inputs give identical solutions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("P must be symmetric (asymmetry {0})")]
    AsymmetricCost(f64),
    #[error("bound ordering violated at row {0}")]
    BadBounds(usize),
    #[error("dimension mismatch in QP data")]
    DimensionMismatch,
    #[error("KKT factorization failed")]
    SingularKkt,
}

/// Problem data: cost `1/2 z'Pz + c'z`, constraints `lower <= Az <= upper`.
#[derive(Debug, Clone)]
pub struct QpSpec {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpSpec {
    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.p.nrows();
        if self.p.ncols() != n
            || self.c.len() != n
            || self.a.ncols() != n
            || self.a.nrows() != self.lower.len()
            || self.a.nrows() != self.upper.len()
        {
            return Err(QpError::DimensionMismatch);
        }
        let asym = (&self.p - self.p.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.p.amax()) {
            return Err(QpError::AsymmetricCost(asym));
        }
        for i in 0..self.lower.len() {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::BadBounds(i));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    /// Primal optimizer.
    pub z: DVector<f64>,
    /// Dual variables for the rows of A (positive at upper, negative at lower).
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

impl QpSolution {
    pub fn objective(&self, spec: &QpSpec) -> f64 {
        0.5 * (&spec.p * &self.z).dot(&self.z) + spec.c.dot(&self.z)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub over_relaxation: f64,
    pub check_interval: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol_abs: 1e-8,
            tol_rel: 1e-8,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            over_relaxation: 1.6,
            check_interval: 25,
        }
    }
}

fn project(v: &mut DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].max(lower[i]).min(upper[i]);
    }
}

fn residuals(spec: &QpSpec, z: &DVector<f64>, slack: &DVector<f64>, y: &DVector<f64>) -> (f64, f64, f64, f64) {
    let az = &spec.a * z;
    let r_prim = (&az - slack).amax();
    let pz = &spec.p * z;
    let aty = spec.a.transpose() * y;
    let r_dual = (&pz + &spec.c + &aty).amax();
    let prim_scale = az.amax().max(slack.amax());
    let dual_scale = pz.amax().max(spec.c.amax()).max(aty.amax());
    (r_prim, r_dual, prim_scale, dual_scale)
}

/// Solve with optional warm start `(z0, y0)`.
pub fn solve_qp_warm(
    spec: &QpSpec,
    settings: &QpSettings,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
) -> Result<QpSolution, QpError> {
    spec.validate()?;
    let n = spec.p.nrows();
    let k = spec.a.nrows();
    let mut rho = settings.rho;
    let sigma = settings.sigma;
    let alpha = settings.over_relaxation;

    // KKT matrix [[P + sigma I, A'], [A, -I/rho]], refactored only when
    // the step size rho is rescaled
    let factor = |rho: f64| {
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&spec.p);
        for i in 0..n {
            kkt[(i, i)] += sigma;
        }
        kkt.view_mut((0, n), (n, k)).copy_from(&spec.a.transpose());
        kkt.view_mut((n, 0), (k, n)).copy_from(&spec.a);
        for i in 0..k {
            kkt[(n + i, n + i)] = -1.0 / rho;
        }
        kkt.lu()
    };
    let mut lu = factor(rho);
    let mut rho_updates = 0usize;

    let mut z = warm.map(|(z0, _)| z0.clone()).unwrap_or_else(|| DVector::zeros(n));
    let mut y = warm.map(|(_, y0)| y0.clone()).unwrap_or_else(|| DVector::zeros(k));
    let mut slack = &spec.a * &z;
    project(&mut slack, &spec.lower, &spec.upper);

    let mut rhs = DVector::zeros(n + k);
    let mut prev_y = y.clone();
    let mut iterations = 0;

    let certify = |z: &DVector<f64>, y: &DVector<f64>| -> Option<(f64, f64)> {
        let mut s = &spec.a * z;
        project(&mut s, &spec.lower, &spec.upper);
        let (r_prim, r_dual, prim_scale, dual_scale) = residuals(spec, z, &s, y);
        let eps_prim = settings.tol_abs + settings.tol_rel * prim_scale;
        let eps_dual = settings.tol_abs + settings.tol_rel * dual_scale;
        if r_prim <= eps_prim && r_dual <= eps_dual {
            Some((r_prim, r_dual))
        } else {
            None
        }
    };

    for it in 0..settings.max_iter {
        rhs.rows_mut(0, n).copy_from(&(sigma * &z - &spec.c));
        rhs.rows_mut(n, k).copy_from(&(&slack - &y / rho));
        let sol = lu.solve(&rhs).ok_or(QpError::SingularKkt)?;
        let z_tilde = sol.rows(0, n).into_owned();
        let nu = sol.rows(n, k).into_owned();
        let slack_tilde = &slack + (&nu - &y) / rho;

        let z_next = alpha * &z_tilde + (1.0 - alpha) * &z;
        let mut slack_next = alpha * &slack_tilde + (1.0 - alpha) * &slack + &y / rho;
        project(&mut slack_next, &spec.lower, &spec.upper);
        let y_next = &y + rho * (alpha * &slack_tilde + (1.0 - alpha) * &slack - &slack_next);

        z = z_next;
        slack = slack_next;
        y = y_next;
        iterations = it + 1;

        if (it + 1) % settings.check_interval == 0 || it == 0 {
            let (r_prim, r_dual, prim_scale, dual_scale) = residuals(spec, &z, &slack, &y);
            let eps_prim = settings.tol_abs + settings.tol_rel * prim_scale;
            let eps_dual = settings.tol_abs + settings.tol_rel * dual_scale;
            if r_prim <= eps_prim && r_dual <= eps_dual {
                return Ok(QpSolution {
                    z,
                    y,
                    status: QpStatus::Solved,
                    primal_residual: r_prim,
                    dual_residual: r_dual,
                    iterations,
                });
            }
            // loosely converged: try an active-set polish to sharpen
            if r_prim <= 1e4 * eps_prim && r_dual <= 1e4 * eps_dual {
                if let Some((zp, yp)) = polish(spec, &z, &y, settings) {
                    if let Some((rp, rd)) = certify(&zp, &yp) {
                        return Ok(QpSolution {
                            z: zp,
                            y: yp,
                            status: QpStatus::Solved,
                            primal_residual: rp,
                            dual_residual: rd,
                            iterations,
                        });
                    }
                }
            }
            // primal infeasibility certificate from the dual update direction
            let dy = &y - &prev_y;
            let dy_norm = dy.amax();
            if dy_norm > 1e-12 {
                let at_dy = (spec.a.transpose() * &dy).amax();
                let mut support = 0.0;
                for i in 0..k {
                    if dy[i] > 0.0 {
                        support += spec.upper[i] * dy[i];
                    } else {
                        support += spec.lower[i] * dy[i];
                    }
                }
                if at_dy <= 1e-10 * dy_norm && support < -1e-10 * dy_norm {
                    let (r_prim, r_dual, _, _) = residuals(spec, &z, &slack, &y);
                    return Ok(QpSolution {
                        z,
                        y,
                        status: QpStatus::Infeasible,
                        primal_residual: r_prim,
                        dual_residual: r_dual,
                        iterations,
                    });
                }
            }
            prev_y = y.clone();
            // rebalance rho when the primal and dual residuals diverge by
            // orders of magnitude; a fixed rho can stall the lagging one
            if rho_updates < 30 {
                let pr = r_prim / prim_scale.max(settings.tol_abs);
                let dr = r_dual / dual_scale.max(settings.tol_abs);
                let ratio = pr.max(1e-300) / dr.max(1e-300);
                if !(0.1..=10.0).contains(&ratio) {
                    rho = (rho * ratio.sqrt()).clamp(1e-8, 1e8);
                    lu = factor(rho);
                    rho_updates += 1;
                }
            }
        }
    }

    let mut s_final = &spec.a * &z;
    project(&mut s_final, &spec.lower, &spec.upper);
    let (r_prim, r_dual, _, _) = residuals(spec, &z, &s_final, &y);
    Ok(QpSolution {
        z,
        y,
        status: QpStatus::MaxIter,
        primal_residual: r_prim,
        dual_residual: r_dual,
        iterations,
    })
}

pub fn solve_qp(spec: &QpSpec, settings: &QpSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(spec, settings, None)
}

fn polish(
    spec: &QpSpec,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = spec.p.nrows();
    let k = spec.a.nrows();
    let az = &spec.a * z;
    // classify rows by dual sign and slack proximity
    let mut active = Vec::new();
    let mut active_bound = Vec::new();
    for i in 0..k {
        let tol = 1e-6 * (1.0 + az[i].abs());
        let at_lower = (az[i] - spec.lower[i]).abs() <= tol || y[i] < -tol;
        let at_upper = (az[i] - spec.upper[i]).abs() <= tol || y[i] > tol;
        if at_lower && spec.lower[i].is_finite() {
            active.push(i);
            active_bound.push(spec.lower[i]);
        } else if at_upper && spec.upper[i].is_finite() {
            active.push(i);
            active_bound.push(spec.upper[i]);
        }
    }
    let na = active.len();
    let mut kkt = DMatrix::zeros(n + na, n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(&spec.p);
    for i in 0..n {
        kkt[(i, i)] += settings.sigma * 1e-3;
    }
    for (r, &row) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = spec.a[(row, j)];
            kkt[(j, n + r)] = spec.a[(row, j)];
        }
        kkt[(n + r, n + r)] = -settings.sigma * 1e-3;
    }
    let mut rhs = DVector::zeros(n + na);
    rhs.rows_mut(0, n).copy_from(&(-&spec.c));
    for (r, &b) in active_bound.iter().enumerate() {
        rhs[n + r] = b;
    }
    let lu = kkt.clone().lu();
    let mut sol = lu.solve(&rhs)?;
    // one round of iterative refinement
    let resid = &rhs - &kkt * &sol;
    if let Some(corr) = kkt.lu().solve(&resid) {
        sol += corr;
    }
    let zp = sol.rows(0, n).into_owned();
    let mut yp = DVector::zeros(k);
    for (r, &row) in active.iter().enumerate() {
        yp[row] = sol[n + r];
    }
    Some((zp, yp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unconstrained(n: usize) -> QpSpec {
        QpSpec {
            p: DMatrix::identity(n, n),
            c: DVector::from_element(n, -1.0),
            a: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    #[test]
    fn unconstrained_stationarity() {
        // min 1/2||z||^2 - 1'z -> z = 1
        let spec = unconstrained(3);
        let sol = solve_qp(&spec, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        for i in 0..3 {
            assert_relative_eq!(sol.z[i], 1.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn active_bound_with_dual() {
        // min (z-1)^2 s.t. z >= 2 -> z = 2, dual = 2 (for 1/2 z'Pz with P=2)
        let spec = QpSpec {
            p: DMatrix::from_element(1, 1, 2.0),
            c: DVector::from_element(1, -2.0),
            a: DMatrix::from_element(1, 1, 1.0),
            lower: DVector::from_element(1, 2.0),
            upper: DVector::from_element(1, f64::INFINITY),
        };
        let sol = solve_qp(&spec, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert_relative_eq!(sol.z[0], 2.0, epsilon = 1e-7);
        // stationarity: P z + c + A'y = 0 -> 4 - 2 + y = 0 -> y = -2 (lower-active)
        assert_relative_eq!(sol.y[0], -2.0, epsilon = 1e-6);
    }

    #[test]
    fn detects_infeasible_bounds() {
        // z >= 1 and z <= 0 via two rows
        let spec = QpSpec {
            p: DMatrix::identity(1, 1),
            c: DVector::zeros(1),
            a: DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            lower: DVector::from_vec(vec![1.0, f64::NEG_INFINITY]),
            upper: DVector::from_vec(vec![f64::INFINITY, 0.0]),
        };
        let sol = solve_qp(&spec, &QpSettings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    /// Brute-force oracle: enumerate all active-set patterns, solve the
    /// equality-constrained system for each, keep the feasible minimum.
    pub(crate) fn brute_force_qp(spec: &QpSpec) -> Option<DVector<f64>> {
        let n = spec.p.nrows();
        let k = spec.a.nrows();
        let mut best: Option<(f64, DVector<f64>)> = None;
        // each row can be inactive, at lower, or at upper
        let patterns = 3usize.pow(k as u32);
        'outer: for pat in 0..patterns {
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            let mut digits = pat;
            for i in 0..k {
                match digits % 3 {
                    1 => {
                        if !spec.lower[i].is_finite() {
                            continue 'outer;
                        }
                        rows.push(i);
                        vals.push(spec.lower[i]);
                    }
                    2 => {
                        if !spec.upper[i].is_finite() {
                            continue 'outer;
                        }
                        rows.push(i);
                        vals.push(spec.upper[i]);
                    }
                    _ => {}
                }
                digits /= 3;
            }
            let na = rows.len();
            let mut kkt = DMatrix::zeros(n + na, n + na);
            kkt.view_mut((0, 0), (n, n)).copy_from(&spec.p);
            for (r, &row) in rows.iter().enumerate() {
                for j in 0..n {
                    kkt[(n + r, j)] = spec.a[(row, j)];
                    kkt[(j, n + r)] = spec.a[(row, j)];
                }
            }
            let mut rhs = DVector::zeros(n + na);
            rhs.rows_mut(0, n).copy_from(&(-&spec.c));
            for (r, &v) in vals.iter().enumerate() {
                rhs[n + r] = v;
            }
            let sol = match kkt.lu().solve(&rhs) {
                Some(s) => s,
                None => continue,
            };
            let z = sol.rows(0, n).into_owned();
            let az = &spec.a * &z;
            let mut feasible = true;
            for i in 0..k {
                if az[i] < spec.lower[i] - 1e-9 || az[i] > spec.upper[i] + 1e-9 {
                    feasible = false;
                    break;
                }
            }
            if !feasible {
                continue;
            }
            let obj = 0.5 * (&spec.p * &z).dot(&z) + spec.c.dot(&z);
            if best.as_ref().map_or(true, |(b, _)| obj < b - 1e-12) {
                best = Some((obj, z));
            }
        }
        best.map(|(_, z)| z)
    }

    fn random_psd_qp(rng: &mut ChaCha8Rng, n: usize, k: usize) -> QpSpec {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut p = &m * m.transpose();
        for i in 0..n {
            p[(i, i)] += 0.1;
        }
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut lower = DVector::from_fn(k, |_, _| rng.gen_range(-1.0..0.0));
        let mut upper = DVector::from_fn(k, |_, _| rng.gen_range(0.0..1.0));
        for i in 0..k {
            if rng.gen_bool(0.3) {
                lower[i] = f64::NEG_INFINITY;
            }
            if rng.gen_bool(0.3) {
                upper[i] = f64::INFINITY;
            }
        }
        QpSpec {
            p,
            c,
            a,
            lower,
            upper,
        }
    }

    #[test]
    fn random_qps_match_active_set_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let settings = QpSettings::default();
        let mut checked = 0;
        while checked < 40 {
            let n = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=4);
            let spec = random_psd_qp(&mut rng, n, k);
            let oracle = match brute_force_qp(&spec) {
                Some(z) => z,
                None => continue,
            };
            let sol = solve_qp(&spec, &settings).unwrap();
            assert_eq!(sol.status, QpStatus::Solved, "qp #{checked}");
            assert!(
                (&sol.z - &oracle).amax() < 1e-6,
                "qp #{checked}: {:?} vs oracle {:?}",
                sol.z,
                oracle
            );
            checked += 1;
        }
    }

    #[test]
    fn solution_invariant_under_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = random_psd_qp(&mut rng, 3, 3);
        let settings = QpSettings::default();
        let base = solve_qp(&spec, &settings).unwrap();
        // uniform scaling of (P, c)
        let scaled = QpSpec {
            p: 10.0 * &spec.p,
            c: 10.0 * &spec.c,
            ..spec.clone()
        };
        let s1 = solve_qp(&scaled, &settings).unwrap();
        assert!((&s1.z - &base.z).amax() < 1e-6);
        // row scaling of constraints
        let mut a = spec.a.clone();
        let mut lower = spec.lower.clone();
        let mut upper = spec.upper.clone();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                a[(i, j)] *= 4.0;
            }
            lower[i] *= 4.0;
            upper[i] *= 4.0;
        }
        let rowscaled = QpSpec {
            a,
            lower,
            upper,
            ..spec.clone()
        };
        let s2 = solve_qp(&rowscaled, &settings).unwrap();
        assert!((&s2.z - &base.z).amax() < 1e-6);
    }

    #[test]
    fn objective_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = random_psd_qp(&mut rng, 3, 2);
        let sol = solve_qp(&spec, &QpSettings::default()).unwrap();
        let obj = sol.objective(&spec);
        let mut tried = 0;
        while tried < 100 {
            let z = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
            let az = &spec.a * &z;
            let feasible = (0..az.len())
                .all(|i| az[i] >= spec.lower[i] - 1e-12 && az[i] <= spec.upper[i] + 1e-12);
            if !feasible {
                tried += 1;
                continue;
            }
            let o = 0.5 * (&spec.p * &z).dot(&z) + spec.c.dot(&z);
            assert!(obj <= o + 1e-8);
            tried += 1;
        }
    }

    #[test]
    fn warm_start_terminates_quickly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let spec = random_psd_qp(&mut rng, 4, 3);
        let settings = QpSettings::default();
        let cold = solve_qp(&spec, &settings).unwrap();
        let warm = solve_qp_warm(&spec, &settings, Some((&cold.z, &cold.y))).unwrap();
        assert_eq!(warm.status, QpStatus::Solved);
        assert!(warm.iterations <= 5, "took {} iterations", warm.iterations);
    }

    #[test]
    fn rejects_asymmetric_cost() {
        let mut p = DMatrix::identity(2, 2);
        p[(0, 1)] = 0.5;
        let spec = QpSpec {
            p,
            c: DVector::zeros(2),
            a: DMatrix::zeros(0, 2),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        };
        assert!(matches!(spec.validate(), Err(QpError::AsymmetricCost(_))));
    }
}
