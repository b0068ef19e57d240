//! Semi-implicit time stepping in the style of Stewart and Trinkle: each
//! step solves a linear complementarity problem for the contact impulses
//! (normal impulses, polyhedral friction coefficients, and a sliding-speed
//! slack per contact), then advances the configuration with the end-of-step
//! velocity.
//!
//! The non-penetration constraint is written on the linearized end-of-step
//! gap `phi(q) + J_n v' dt >= 0`, the same expression the training loss
//! uses, so trajectories simulated under a model incur (near-)zero loss
//! under that same model.

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    integrate_configuration, mass_matrix_inverse, smooth_impulse, RigidBodyParams, State,
    Trajectory,
};
use crate::geometry::{contact_terms_at, ContactModel, GeometryError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("LCP solve failed at step {step}: {detail}")]
    LcpFailure { step: usize, detail: String },
}

/// Time-stepping configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    /// Step length (s).
    pub dt: f64,
    /// Number of polyhedral friction directions (even, >= 4).
    pub friction_dirs: usize,
    /// Maximum Lemke pivots before declaring failure.
    pub pivot_limit: usize,
    /// Complementarity tolerance, scaled by the problem magnitude.
    pub comp_tol: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1.0 / 148.0,
            friction_dirs: 8,
            pivot_limit: 5_000,
            comp_tol: 1e-10,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0) {
            return Err(SimError::BadConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.friction_dirs < 4 || self.friction_dirs % 2 != 0 {
            return Err(SimError::BadConfig(format!(
                "friction_dirs must be even and >= 4, got {}",
                self.friction_dirs
            )));
        }
        Ok(())
    }
}

/// `d` unit directions evenly spaced in the 2D tangent plane.
///
/// For even `d` the set is symmetric under negation, so the polyhedral
/// cone can oppose sliding in any direction.
pub fn friction_directions(d: usize) -> Vec<[f64; 2]> {
    (0..d)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / d as f64;
            [a.cos(), a.sin()]
        })
        .collect()
}

/// Standard-form LCP: find z >= 0 with Wz + w >= 0 and z'(Wz + w) = 0.
#[derive(Debug, Clone)]
pub struct Lcp {
    pub w_mat: DMatrix<f64>,
    pub w_vec: DVector<f64>,
}

impl Lcp {
    /// Worst violation of nonnegativity / complementarity at `z`.
    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        let s = &self.w_mat * z + &self.w_vec;
        let mut r: f64 = 0.0;
        for i in 0..z.len() {
            r = r.max(-z[i]).max(-s[i]).max((z[i] * s[i]).abs());
        }
        r
    }

    /// Magnitude used to scale tolerances.
    pub fn scale(&self) -> f64 {
        1.0 + self.w_vec.amax() + self.w_mat.amax()
    }
}

/// Lemke's complementary pivoting with lexicographic tie-breaking.
///
/// Returns the solution vector, or a description of why the method
/// terminated without one (ray termination or pivot limit).
pub fn lemke_solve(lcp: &Lcp, pivot_limit: usize) -> Result<DVector<f64>, String> {
    let n = lcp.w_vec.len();
    assert_eq!(lcp.w_mat.nrows(), n);
    assert_eq!(lcp.w_mat.ncols(), n);
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    if lcp.w_vec.min() >= 0.0 {
        return Ok(DVector::zeros(n));
    }

    // Tableau columns: [w_0..w_{n-1} | z_0..z_{n-1} | z0 | rhs].
    // Row i encodes w_i - W z - e z0 = q_i; the identity block doubles as
    // B^{-1} for lexicographic comparisons.
    let zcol = |j: usize| n + j;
    let z0col = 2 * n;
    let rhs = 2 * n + 1;
    let mut t = DMatrix::zeros(n, 2 * n + 2);
    for i in 0..n {
        t[(i, i)] = 1.0;
        for j in 0..n {
            t[(i, zcol(j))] = -lcp.w_mat[(i, j)];
        }
        t[(i, z0col)] = -1.0;
        t[(i, rhs)] = lcp.w_vec[i];
    }
    let mut basis: Vec<usize> = (0..n).collect();

    // lexicographic comparison of rows a, b scaled by positive pivots
    let lex_less = |t: &DMatrix<f64>, a: usize, pa: f64, b: usize, pb: f64| -> bool {
        let va = t[(a, rhs)] / pa;
        let vb = t[(b, rhs)] / pb;
        if va != vb {
            return va < vb;
        }
        for c in 0..n {
            let ua = t[(a, c)] / pa;
            let ub = t[(b, c)] / pb;
            if ua != ub {
                return ua < ub;
            }
        }
        false
    };

    // first pivot: bring z0 in, drop the lexicographically most negative row
    let mut r = 0;
    for i in 1..n {
        // z0 column is uniformly -1, so the ratio test reduces to the most
        // negative rhs, lexicographic on ties
        if lex_less(&t, i, 1.0, r, 1.0) {
            r = i;
        }
    }
    let mut entering = z0col;
    let mut pivots = 0usize;
    loop {
        // pivot (r, entering)
        let piv = t[(r, entering)];
        if piv.abs() < 1e-14 {
            return Err(format!("degenerate pivot {piv:.3e} at row {r}"));
        }
        for c in 0..2 * n + 2 {
            t[(r, c)] /= piv;
        }
        for i in 0..n {
            if i == r {
                continue;
            }
            let f = t[(i, entering)];
            if f != 0.0 {
                for c in 0..2 * n + 2 {
                    t[(i, c)] -= f * t[(r, c)];
                }
            }
        }
        let leaving = basis[r];
        basis[r] = entering;
        pivots += 1;
        if leaving == z0col {
            break;
        }
        if pivots > pivot_limit {
            return Err(format!("pivot limit {pivot_limit} exceeded"));
        }
        // complement of the leaving variable enters next
        entering = if leaving < n { zcol(leaving) } else { leaving - n };
        // lexicographic minimum ratio test over rows with positive column
        let mut best: Option<usize> = None;
        for i in 0..n {
            let col = t[(i, entering)];
            if col > 1e-12 {
                best = match best {
                    None => Some(i),
                    Some(b) => {
                        if lex_less(&t, i, col, b, t[(b, entering)]) {
                            Some(i)
                        } else {
                            Some(b)
                        }
                    }
                };
            }
        }
        match best {
            Some(i) => r = i,
            None => return Err("ray termination".to_string()),
        }
    }

    let mut z = DVector::zeros(n);
    for (i, &b) in basis.iter().enumerate() {
        if b >= n && b < 2 * n {
            z[b - n] = t[(i, rhs)].max(0.0);
        }
    }
    Ok(z)
}

/// Re-solve the complementary basis implied by an approximate solution on
/// the exact problem data. Returns the refined point when it meets `tol`.
///
/// The basic block of flat resting contact is rank deficient and its
/// minimum-norm least-squares solution can leave a basic variable
/// negative, so the block is refined with nonnegative least squares
/// instead: min ||W_BB z_B + q_B|| over z_B >= 0.
pub fn polish_lcp(lcp: &Lcp, z_approx: &DVector<f64>, tol: f64) -> Option<DVector<f64>> {
    let n = z_approx.len();
    let s = &lcp.w_mat * z_approx + &lcp.w_vec;
    let mut basic: Vec<bool> = (0..n).map(|i| z_approx[i] > s[i]).collect();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for _ in 0..10 {
        let idx: Vec<usize> = (0..n).filter(|&i| basic[i]).collect();
        let k = idx.len();
        let mut z = DVector::zeros(n);
        if k > 0 {
            let mut a = DMatrix::zeros(k, k);
            let mut b = DVector::zeros(k);
            for (r, &i) in idx.iter().enumerate() {
                for (c, &j) in idx.iter().enumerate() {
                    a[(r, c)] = lcp.w_mat[(i, j)];
                }
                b[r] = -lcp.w_vec[i];
            }
            let spec = crate::qp::QpSpec {
                p: a.transpose() * &a,
                c: a.transpose() * -&b,
                a: DMatrix::identity(k, k),
                lower: DVector::zeros(k),
                upper: DVector::from_element(k, f64::INFINITY),
            };
            let sol = crate::qp::solve_qp(&spec, &crate::qp::QpSettings::default()).ok()?;
            for (r, &i) in idx.iter().enumerate() {
                z[i] = sol.z[r].max(0.0);
            }
        }
        let res = lcp.residual(&z);
        if res <= tol {
            return Some(z);
        }
        if best.as_ref().map_or(true, |(r, _)| res < *r) {
            best = Some((res, z.clone()));
        }
        // adjust the index set toward complementarity and retry
        let s = &lcp.w_mat * &z + &lcp.w_vec;
        let mut changed = false;
        for i in 0..n {
            if basic[i] && z[i] <= 0.0 && s[i] > tol {
                basic[i] = false;
                changed = true;
            } else if !basic[i] && s[i] < -tol {
                basic[i] = true;
                changed = true;
            }
        }
        if !changed {
            return None;
        }
    }
    None
}

/// Lemke with escalation: exact problem first, then a diagonally
/// regularized copy (strictly copositive, so Lemke cannot ray-terminate)
/// polished against the exact data, then Gauss-Seidel.
pub fn solve_contact_lcp(lcp: &Lcp, pivot_limit: usize, tol: f64) -> Result<DVector<f64>, String> {
    let mut best: Option<DVector<f64>> = None;
    if let Ok(z) = lemke_solve(lcp, pivot_limit) {
        if lcp.residual(&z) <= tol {
            return Ok(z);
        }
        best = Some(z);
    }
    let n = lcp.w_vec.len();
    let mut max_diag: f64 = 0.0;
    for i in 0..n {
        max_diag = max_diag.max(lcp.w_mat[(i, i)]);
    }
    for rel in [1e-12, 1e-10, 1e-8, 1e-6, 1e-4] {
        let delta = rel * (1.0 + max_diag);
        let reg = Lcp {
            w_mat: &lcp.w_mat + DMatrix::identity(n, n) * delta,
            w_vec: lcp.w_vec.clone(),
        };
        if let Ok(z) = lemke_solve(&reg, pivot_limit) {
            if lcp.residual(&z) <= tol {
                return Ok(z);
            }
            if let Some(polished) = polish_lcp(lcp, &z, tol) {
                return Ok(polished);
            }
            if best.is_none() || lcp.residual(&z) < lcp.residual(best.as_ref().unwrap()) {
                best = Some(z);
            }
        }
    }
    let z = pgs_solve(lcp, 500, best.as_ref());
    if let Some(polished) = polish_lcp(lcp, &z, tol) {
        return Ok(polished);
    }
    if lcp.residual(&z) <= tol {
        return Ok(z);
    }
    if let Some(b) = best {
        if lcp.residual(&b) < lcp.residual(&z) {
            return Err(format!(
                "residual {:.3e} above tolerance {:.3e}",
                lcp.residual(&b),
                tol
            ));
        }
    }
    Err(format!(
        "residual {:.3e} above tolerance {:.3e}",
        lcp.residual(&z),
        tol
    ))
}

/// Projected Gauss-Seidel sweeps from a starting point; zero diagonals are
/// clamped so every coordinate remains updatable. Used as a fallback when
/// Lemke terminates on a ray.
pub fn pgs_solve(lcp: &Lcp, sweeps: usize, z0: Option<&DVector<f64>>) -> DVector<f64> {
    let n = lcp.w_vec.len();
    let mut z = match z0 {
        Some(z0) => z0.clone(),
        None => DVector::zeros(n),
    };
    let mut max_diag: f64 = 0.0;
    for i in 0..n {
        max_diag = max_diag.max(lcp.w_mat[(i, i)]);
    }
    // zero-diagonal rows (the cone slack block) get a conservative step
    // size; an aggressive one makes the sweep oscillate and diverge
    let clamp = 0.1 * (1.0 + max_diag);
    let mut best = z.clone();
    let mut best_res = lcp.residual(&z);
    for _ in 0..sweeps {
        for i in 0..n {
            let mut s = lcp.w_vec[i];
            for j in 0..n {
                s += lcp.w_mat[(i, j)] * z[j];
            }
            let denom = lcp.w_mat[(i, i)].max(clamp);
            z[i] = (z[i] - s / denom).max(0.0);
        }
        let res = lcp.residual(&z);
        if res < best_res {
            best_res = res;
            best.copy_from(&z);
        }
    }
    best
}

/// Contact impulses applied over one step.
#[derive(Debug, Clone)]
pub struct StepImpulses {
    /// Normal impulses, one per contact (N s).
    pub lambda_n: DVector<f64>,
    /// Polyhedral friction coefficients, `d` per contact.
    pub beta: DVector<f64>,
    /// Net generalized contact impulse `J_n' lambda_n + J_t' D beta`.
    pub generalized: Vector6<f64>,
}

impl StepImpulses {
    pub fn zero(m: usize, d: usize) -> Self {
        StepImpulses {
            lambda_n: DVector::zeros(m),
            beta: DVector::zeros(m * d),
            generalized: Vector6::zeros(),
        }
    }

    /// Tangential impulse of contact `i` in the 2D tangent plane.
    pub fn lambda_t(&self, i: usize, dirs: &[[f64; 2]]) -> [f64; 2] {
        let d = dirs.len();
        let mut out = [0.0, 0.0];
        for (j, dir) in dirs.iter().enumerate() {
            let b = self.beta[i * d + j];
            out[0] += b * dir[0];
            out[1] += b * dir[1];
        }
        out
    }
}

/// Assemble the Stewart-Trinkle LCP over `(lambda_n, beta, gamma)`.
///
/// Ordering: m normal rows, m*d friction rows grouped by contact, m cone
/// rows. `a_nn` etc. are the Delassus blocks `J M^{-1} J'` and `jv_free`
/// holds the free-velocity contact rates.
fn assemble_lcp(
    phi: &DVector<f64>,
    j_n: &DMatrix<f64>,
    j_t: &DMatrix<f64>,
    m_inv: &nalgebra::Matrix6<f64>,
    v_free: &Vector6<f64>,
    dirs: &[[f64; 2]],
    dt: f64,
) -> Lcp {
    let m = phi.len();
    let d = dirs.len();
    let n = m + m * d + m;

    // D maps stacked beta to stacked 2D tangential impulses (2m x md)
    let mut dmat = DMatrix::zeros(2 * m, m * d);
    for i in 0..m {
        for (j, dir) in dirs.iter().enumerate() {
            dmat[(2 * i, i * d + j)] = dir[0];
            dmat[(2 * i + 1, i * d + j)] = dir[1];
        }
    }
    let jtd = dmat.transpose() * j_t;

    let a_nn = j_n * m_inv * j_n.transpose();
    let a_nt = j_n * m_inv * jtd.transpose();
    let a_tt = &jtd * m_inv * jtd.transpose();

    let mut w_mat = DMatrix::zeros(n, n);
    w_mat.view_mut((0, 0), (m, m)).copy_from(&a_nn);
    w_mat.view_mut((0, m), (m, m * d)).copy_from(&a_nt);
    w_mat
        .view_mut((m, 0), (m * d, m))
        .copy_from(&a_nt.transpose());
    w_mat.view_mut((m, m), (m * d, m * d)).copy_from(&a_tt);
    for i in 0..m {
        for j in 0..d {
            // friction rows pick up the sliding-speed slack gamma_i
            w_mat[(m + i * d + j, m + m * d + i)] = 1.0;
            // cone rows: lambda_n,i - sum_j beta_ij >= 0
            w_mat[(m + m * d + i, m + i * d + j)] = -1.0;
        }
        w_mat[(m + m * d + i, i)] = 1.0;
    }

    let jn_v = j_n * v_free;
    let jt_v = jtd * v_free;
    let mut w_vec = DVector::zeros(n);
    for i in 0..m {
        w_vec[i] = phi[i] / dt + jn_v[i];
    }
    for k in 0..m * d {
        w_vec[m + k] = jt_v[k];
    }
    Lcp { w_mat, w_vec }
}

/// One semi-implicit step: solve for impulses, update velocity, then
/// advance the configuration with the end-of-step velocity.
pub fn step(
    model: &ContactModel,
    body: &RigidBodyParams,
    x: &State,
    u: &Vector6<f64>,
    cfg: &SimConfig,
) -> Result<(State, StepImpulses), SimError> {
    cfg.validate()?;
    let dt = cfg.dt;
    let terms = contact_terms_at(model, &x.p, &x.quat)?;
    let m = terms.phi_n.len();
    let d = cfg.friction_dirs;
    let m_inv = mass_matrix_inverse(body);
    let k_s = smooth_impulse(body, x, u, dt);
    let v_free = x.v + m_inv * k_s;

    let jn_vfree = &terms.j_n * v_free;
    // contacts whose linearized end-of-step gap would go negative without
    // impulses; the LCP is posed over these only, with a re-activation loop
    // in case a solved impulse makes an excluded vertex approach
    let mut active: Vec<usize> = (0..m)
        .filter(|&i| terms.phi_n[i] / dt + jn_vfree[i] < 0.0)
        .collect();
    if active.is_empty() {
        let (p_new, q_new) = integrate_configuration(&x.p, &x.quat, &v_free, dt);
        return Ok((State::new(p_new, q_new, v_free), StepImpulses::zero(m, d)));
    }

    // the gap is linearized about q; for fast rotations the quadratic
    // remainder can leave a vertex below the surface, so the offending
    // gap is tightened by the observed defect and the step re-solved
    let pen_tol = 1e-9 * (1.0 + x.v.amax());
    let mut gap_corr: DVector<f64> = DVector::zeros(m);
    let dirs = friction_directions(d);
    let mut fallback: Option<(State, StepImpulses)> = None;
    for _ in 0..8 {
        let ma = active.len();
        let phi_a = DVector::from_fn(ma, |r, _| terms.phi_n[active[r]] - gap_corr[active[r]]);
        let jn_a = DMatrix::from_fn(ma, 6, |r, c| terms.j_n[(active[r], c)]);
        let jt_a =
            DMatrix::from_fn(2 * ma, 6, |r, c| terms.j_t[(2 * active[r / 2] + r % 2, c)]);
        let lcp = assemble_lcp(&phi_a, &jn_a, &jt_a, &m_inv, &v_free, &dirs, dt);
        let tol = cfg.comp_tol * lcp.scale();
        let z = solve_contact_lcp(&lcp, cfg.pivot_limit, tol)
            .map_err(|detail| SimError::LcpFailure { step: 0, detail })?;
        let mut lambda_n = DVector::zeros(m);
        let mut beta = DVector::zeros(m * d);
        for (r, &i) in active.iter().enumerate() {
            lambda_n[i] = z[r];
            for j in 0..d {
                beta[i * d + j] = z[ma + r * d + j];
            }
        }
        let raw = terms.j_n.transpose() * &lambda_n;
        let mut generalized = Vector6::from_iterator(raw.iter().copied());
        for i in 0..m {
            let mut lt = [0.0, 0.0];
            for (j, dir) in dirs.iter().enumerate() {
                lt[0] += beta[i * d + j] * dir[0];
                lt[1] += beta[i * d + j] * dir[1];
            }
            for r in 0..6 {
                generalized[r] +=
                    terms.j_t[(2 * i, r)] * lt[0] + terms.j_t[(2 * i + 1, r)] * lt[1];
            }
        }
        let v_cand = v_free + m_inv * generalized;
        let jn_v = &terms.j_n * v_cand;
        let newly_active: Vec<usize> = (0..m)
            .filter(|i| !active.contains(i))
            .filter(|&i| (terms.phi_n[i] - gap_corr[i]) / dt + jn_v[i] < -tol)
            .collect();
        if !newly_active.is_empty() {
            active.extend(newly_active);
            active.sort_unstable();
            continue;
        }
        let (p_new, q_new) = integrate_configuration(&x.p, &x.quat, &v_cand, dt);
        let impulses = StepImpulses {
            lambda_n,
            beta,
            generalized,
        };
        let phi_end = contact_terms_at(model, &p_new, &q_new)?.phi_n;
        let penetrating: Vec<usize> = (0..m).filter(|&i| phi_end[i] < -pen_tol).collect();
        if penetrating.is_empty() {
            return Ok((State::new(p_new, q_new, v_cand), impulses));
        }
        for &i in &penetrating {
            gap_corr[i] -= phi_end[i];
            if !active.contains(&i) {
                active.push(i);
            }
        }
        active.sort_unstable();
        fallback = Some((State::new(p_new, q_new, v_cand), impulses));
    }
    // correction failed to converge; return the last solve rather than halt
    Ok(fallback.expect("at least one LCP solve completed"))
}

/// Recurse `step` for `n` states (the first is `x0`); zero control.
pub fn rollout(
    model: &ContactModel,
    body: &RigidBodyParams,
    x0: &State,
    n: usize,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    assert!(n >= 1);
    let mut states = Vec::with_capacity(n);
    states.push(*x0);
    let u = Vector6::zeros();
    for k in 1..n {
        let (x_next, _) = step(model, body, states.last().unwrap(), &u, cfg).map_err(|e| {
            match e {
                SimError::LcpFailure { detail, .. } => SimError::LcpFailure { step: k, detail },
                other => other,
            }
        })?;
        states.push(x_next);
    }
    Ok(Trajectory {
        dt: cfg.dt,
        states,
    })
}
