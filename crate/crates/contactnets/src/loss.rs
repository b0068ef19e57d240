//! The mechanics-inspired training loss: a convex QP over feasible contact
//! impulses whose optimal value scores how well a contact model explains
//! one observed transition, plus frame regularizers.
//!
//! Cost terms, for impulses `lambda = (lambda_n, lambda_t)` per contact:
//!   l1: force residual  ||sum_i J_i' lambda_i - k_c,data||^2
//!   l2: force at a distance  sum_i phi_n,i(q')^2 ||lambda_i||^2
//!   l3: predicted penetration hinge  sum_i min(0, phi~'_i)^2
//!   l4: deviation from maximal dissipation
//!       sum_i || ||J_t,i v'|| lambda_t,i + lambda_n,i J_t,i v' ||^2
//! with `v~' = v + M^{-1}(k_s + sum_i J_i' lambda_i)` and
//! `phi~'_i = phi_i(q) + J_n,i v~' dt`.
//!
//! Because the feasible impulse set does not depend on the model
//! parameters, the gradient of the minimized loss is the partial gradient
//! of the cost at the fixed minimizer (envelope theorem).

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Real, Tape};
use crate::dynamics::{
    contact_impulse_from_data, mass_matrix_inverse, smooth_impulse, RigidBodyParams, Transition,
};
use crate::geometry::{eval_terms, model_vars_f64, model_vars_on_tape, ContactModel, GeometryError, ModelVars, TermsVars};
use crate::qp::{solve_qp, solve_qp_warm, QpError, QpSettings, QpSpec, QpStatus};
use crate::sim::friction_directions;

/// Smoothing constant for the sliding-speed factor in l4.
const SLIP_EPS: f64 = 1e-9;
/// Guard inside regularizer normalizations.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("impulse variables violate the friction cone at contact {0}")]
    InfeasibleImpulse(usize),
    #[error("impulse QP did not converge: status {0:?}, primal residual {1:.3e}")]
    QpNotConverged(QpStatus, f64),
}

/// Per-term weights; the paper-style regularizer coefficient applies to
/// both R1 and R2.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 1.0,
            w3: 1.0,
            w4: 1.0,
            w_reg: 0.3,
        }
    }
}

/// Feasible contact impulses: normal components and polyhedral friction
/// coefficients along `d` fixed tangent directions.
#[derive(Debug, Clone)]
pub struct ImpulseVars {
    /// One per contact, >= 0.
    pub lambda_n: DVector<f64>,
    /// `d` per contact, >= 0, with sum_j beta_ij <= lambda_n,i.
    pub beta: DVector<f64>,
}

impl ImpulseVars {
    pub fn zero(m: usize, d: usize) -> Self {
        ImpulseVars {
            lambda_n: DVector::zeros(m),
            beta: DVector::zeros(m * d),
        }
    }

    pub fn num_contacts(&self) -> usize {
        self.lambda_n.len()
    }

    pub fn dirs(&self) -> usize {
        if self.lambda_n.is_empty() {
            0
        } else {
            self.beta.len() / self.lambda_n.len()
        }
    }

    /// Tangential impulse of contact `i` in the 2D tangent plane.
    pub fn lambda_t(&self, i: usize) -> [f64; 2] {
        let d = self.dirs();
        let dirs = friction_directions(d);
        let mut out = [0.0, 0.0];
        for (j, dir) in dirs.iter().enumerate() {
            out[0] += self.beta[i * d + j] * dir[0];
            out[1] += self.beta[i * d + j] * dir[1];
        }
        out
    }

    /// Cone feasibility within `tol`.
    pub fn check_feasible(&self, tol: f64) -> Result<(), LossError> {
        let m = self.num_contacts();
        let d = self.dirs();
        for i in 0..m {
            if self.lambda_n[i] < -tol {
                return Err(LossError::InfeasibleImpulse(i));
            }
            let mut sum = 0.0;
            for j in 0..d {
                if self.beta[i * d + j] < -tol {
                    return Err(LossError::InfeasibleImpulse(i));
                }
                sum += self.beta[i * d + j];
            }
            if sum > self.lambda_n[i] + tol {
                return Err(LossError::InfeasibleImpulse(i));
            }
        }
        Ok(())
    }
}

/// Every component of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub reg1: f64,
    pub reg2: f64,
    pub total: f64,
    pub lambda_star: ImpulseVars,
    /// Predicted end-of-step velocity under `lambda_star`.
    pub v_tilde: Vector6<f64>,
    /// Predicted end-of-step gaps under `lambda_star`.
    pub phi_tilde: DVector<f64>,
}

/// The four cost terms in a generic scalar type.
pub struct CostTerms<T> {
    pub l1: T,
    pub l2: T,
    pub l3: T,
    pub l4: T,
}

fn smooth_norm2<T: Real>(a: T, b: T) -> T {
    (a * a + b * b + SLIP_EPS * SLIP_EPS).sqrt_r()
}

/// Evaluate l1..l4 at fixed impulses. Generic so the same expression can
/// run on `f64` or on tape variables for the parameter gradient.
pub fn cost_terms<T: Real>(
    model: &ModelVars<T>,
    body: &RigidBodyParams,
    t: &Transition,
    lam: &ImpulseVars,
    ctx: T,
) -> Result<CostTerms<T>, LossError> {
    let m = lam.num_contacts();
    let (p0, q0) = t.x.configuration();
    let (p1, q1) = t.x_next.configuration();
    let terms = eval_terms(model, &p0, &q0, ctx)?;
    let terms_next = eval_terms(model, &p1, &q1, ctx)?;
    if terms.phi_n.len() != m {
        return Err(GeometryError::ShapeMismatch(format!(
            "model has {} contacts, impulses have {m}",
            terms.phi_n.len()
        ))
        .into());
    }

    let k_c = contact_impulse_from_data(body, t);
    let k_s = smooth_impulse(body, &t.x, &t.u, t.dt);
    let m_inv = mass_matrix_inverse(body);

    // net generalized impulse sum_i J_i' lambda_i
    let mut imp: [T; 6] = [ctx.lit(0.0); 6];
    for i in 0..m {
        let lt = lam.lambda_t(i);
        for k in 0..6 {
            imp[k] = imp[k]
                + terms.j_n[i][k] * lam.lambda_n[i]
                + terms.j_t[2 * i][k] * lt[0]
                + terms.j_t[2 * i + 1][k] * lt[1];
        }
    }

    let mut l1 = ctx.lit(0.0);
    for k in 0..6 {
        let r = imp[k] - k_c[k];
        l1 = l1 + r * r;
    }

    let mut l2 = ctx.lit(0.0);
    for i in 0..m {
        let lt = lam.lambda_t(i);
        let lam_sq = lam.lambda_n[i] * lam.lambda_n[i] + lt[0] * lt[0] + lt[1] * lt[1];
        l2 = l2 + terms_next.phi_n[i] * terms_next.phi_n[i] * lam_sq;
    }

    // v~' = v + M^{-1}(k_s + imp)
    let mut v_tilde: [T; 6] = [ctx.lit(0.0); 6];
    for k in 0..6 {
        let mut acc = ctx.lit(t.x.v[k]);
        for j in 0..6 {
            acc = acc + (imp[j] + k_s[j]) * m_inv[(k, j)];
        }
        v_tilde[k] = acc;
    }

    let mut l3 = ctx.lit(0.0);
    for i in 0..m {
        let mut rate = ctx.lit(0.0);
        for k in 0..6 {
            rate = rate + terms.j_n[i][k] * v_tilde[k];
        }
        let gap = terms.phi_n[i] + rate * t.dt;
        let h = gap.min_zero();
        l3 = l3 + h * h;
    }

    // l4 uses the observed end-of-step velocity
    let mut l4 = ctx.lit(0.0);
    for i in 0..m {
        let mut c0 = ctx.lit(0.0);
        let mut c1 = ctx.lit(0.0);
        for k in 0..6 {
            c0 = c0 + terms.j_t[2 * i][k] * t.x_next.v[k];
            c1 = c1 + terms.j_t[2 * i + 1][k] * t.x_next.v[k];
        }
        let b = smooth_norm2(c0, c1);
        let lt = lam.lambda_t(i);
        let r0 = b * lt[0] + c0 * lam.lambda_n[i];
        let r1 = b * lt[1] + c1 * lam.lambda_n[i];
        l4 = l4 + r0 * r0 + r1 * r1;
    }

    Ok(CostTerms { l1, l2, l3, l4 })
}

/// Frame regularizers from the position blocks of the contact Jacobians:
/// R1 penalizes normal-tangent alignment, R2 drives the normal rows to
/// unit length.
pub fn regularizer_terms<T: Real>(terms: &TermsVars<T>, ctx: T) -> (T, T) {
    let m = terms.j_n.len();
    let mut r1 = ctx.lit(0.0);
    let mut r2 = ctx.lit(0.0);
    for i in 0..m {
        let n = &terms.j_n[i];
        let nn = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt_r();
        let nn_safe = nn + NORM_EPS;
        for row in [&terms.j_t[2 * i], &terms.j_t[2 * i + 1]] {
            let tn = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt_r() + NORM_EPS;
            let dot = (n[0] * row[0] + n[1] * row[1] + n[2] * row[2]) / (nn_safe * tn);
            r1 = r1 + dot * dot;
        }
        let dev = nn - 1.0;
        r2 = r2 + dev * dev;
    }
    (r1, r2)
}

/// `(R1, R2)` of a model at a configuration.
pub fn regularizers(
    model: &ContactModel,
    p: &nalgebra::Vector3<f64>,
    quat: &nalgebra::UnitQuaternion<f64>,
) -> Result<(f64, f64), LossError> {
    let q = quat.quaternion();
    let vars = model_vars_f64(model);
    let terms = eval_terms(&vars, &[p.x, p.y, p.z], &[q.w, q.i, q.j, q.k], 0.0f64)?;
    Ok(regularizer_terms(&terms, 0.0f64))
}

/// The assembled impulse QP plus the decision-independent constant, so
/// that `objective(z) + constant` equals the weighted cost terms.
pub struct LossQp {
    pub spec: QpSpec,
    pub constant: f64,
    pub num_contacts: usize,
    pub dirs: usize,
}

impl LossQp {
    /// Split a decision vector into impulse variables and hinge slacks.
    pub fn split(&self, z: &DVector<f64>) -> (ImpulseVars, DVector<f64>) {
        let m = self.num_contacts;
        let d = self.dirs;
        let lam = ImpulseVars {
            lambda_n: DVector::from_fn(m, |i, _| z[i]),
            beta: DVector::from_fn(m * d, |k, _| z[m + k]),
        };
        let s = DVector::from_fn(m, |i, _| z[m + m * d + i]);
        (lam, s)
    }
}

/// Build the QP over `(lambda_n, beta, s)` whose optimal value is the
/// minimized loss (without regularizers).
pub fn assemble_loss_qp(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    d: usize,
) -> Result<LossQp, LossError> {
    let terms = crate::geometry::contact_terms_at(model, &t.x.p, &t.x.quat)?;
    let terms_next = crate::geometry::contact_terms_at(model, &t.x_next.p, &t.x_next.quat)?;
    let m = terms.phi_n.len();
    let dirs = friction_directions(d);
    let n_lam = m + m * d;
    let n = n_lam + m;

    // G maps (lambda_n, beta) to the generalized impulse (6 x n_lam)
    let mut g = DMatrix::zeros(6, n_lam);
    for i in 0..m {
        for k in 0..6 {
            g[(k, i)] = terms.j_n[(i, k)];
        }
        for (j, dir) in dirs.iter().enumerate() {
            for k in 0..6 {
                g[(k, m + i * d + j)] =
                    terms.j_t[(2 * i, k)] * dir[0] + terms.j_t[(2 * i + 1, k)] * dir[1];
            }
        }
    }

    let k_c = contact_impulse_from_data(body, t);
    let k_s = smooth_impulse(body, &t.x, &t.u, t.dt);
    let m_inv = mass_matrix_inverse(body);

    let mut p_mat = DMatrix::zeros(n, n);
    let mut c_vec = DVector::zeros(n);
    let mut constant = 0.0;

    // l1 = ||G lam - k_c||^2
    let gtg = g.transpose() * &g;
    p_mat
        .view_mut((0, 0), (n_lam, n_lam))
        .copy_from(&(&gtg * (2.0 * weights.w1)));
    let gtk = g.transpose() * k_c;
    for k in 0..n_lam {
        c_vec[k] -= 2.0 * weights.w1 * gtk[k];
    }
    constant += weights.w1 * k_c.norm_squared();

    // l2 = sum_i phi'_i^2 (lambda_n,i^2 + ||D_i beta_i||^2)
    for i in 0..m {
        let w = 2.0 * weights.w2 * terms_next.phi_n[i] * terms_next.phi_n[i];
        p_mat[(i, i)] += w;
        for (j1, d1) in dirs.iter().enumerate() {
            for (j2, d2) in dirs.iter().enumerate() {
                p_mat[(m + i * d + j1, m + i * d + j2)] += w * (d1[0] * d2[0] + d1[1] * d2[1]);
            }
        }
    }

    // l4 = sum_i || b_i D_i beta_i + (J_t,i v') lambda_n,i ||^2
    for i in 0..m {
        let c0 = terms.j_t.row(2 * i).transpose().dot(&t.x_next.v);
        let c1 = terms.j_t.row(2 * i + 1).transpose().dot(&t.x_next.v);
        let b = (c0 * c0 + c1 * c1 + SLIP_EPS * SLIP_EPS).sqrt();
        // rows of H_i over (lambda_n,i, beta_i)
        let mut h = DMatrix::zeros(2, 1 + d);
        h[(0, 0)] = c0;
        h[(1, 0)] = c1;
        for (j, dir) in dirs.iter().enumerate() {
            h[(0, 1 + j)] = b * dir[0];
            h[(1, 1 + j)] = b * dir[1];
        }
        let hth = h.transpose() * &h * (2.0 * weights.w4);
        let idx = |r: usize| if r == 0 { i } else { m + i * d + (r - 1) };
        for r in 0..1 + d {
            for c in 0..1 + d {
                p_mat[(idx(r), idx(c))] += hth[(r, c)];
            }
        }
    }

    // hinge slacks: cost w3 s_i^2
    for i in 0..m {
        p_mat[(n_lam + i, n_lam + i)] = 2.0 * weights.w3;
    }

    // constraints: z >= 0 (n rows), cone (m rows), hinge (m rows)
    let k_rows = n + m + m;
    let mut a = DMatrix::zeros(k_rows, n);
    let mut lower = DVector::from_element(k_rows, 0.0);
    let upper = DVector::from_element(k_rows, f64::INFINITY);
    for i in 0..n {
        a[(i, i)] = 1.0;
    }
    for i in 0..m {
        let r = n + i;
        a[(r, i)] = 1.0;
        for j in 0..d {
            a[(r, m + i * d + j)] = -1.0;
        }
    }
    // hinge rows: s_i + phi~'_i(lam) >= 0 with
    // phi~'_i = phi0_i + dt J_n,i M^{-1} G lam
    let jn_minv_g = (&terms.j_n * m_inv * &g) * t.dt;
    let v_smooth = t.x.v + m_inv * k_s;
    let phi0 = &terms.phi_n + (&terms.j_n * v_smooth) * t.dt;
    for i in 0..m {
        let r = n + m + i;
        for k in 0..n_lam {
            a[(r, k)] = jn_minv_g[(i, k)];
        }
        a[(r, n_lam + i)] = 1.0;
        lower[r] = -phi0[i];
    }

    Ok(LossQp {
        spec: QpSpec {
            p: p_mat,
            c: c_vec,
            a,
            lower,
            upper,
        },
        constant,
        num_contacts: m,
        dirs: d,
    })
}

fn breakdown_at(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    lam: ImpulseVars,
) -> Result<LossBreakdown, LossError> {
    let vars = model_vars_f64(model);
    let ct = cost_terms(&vars, body, t, &lam, 0.0f64)?;
    let (reg1, reg2) = regularizers(model, &t.x.p, &t.x.quat)?;

    let terms = crate::geometry::contact_terms_at(model, &t.x.p, &t.x.quat)?;
    let m = lam.num_contacts();
    let m_inv = mass_matrix_inverse(body);
    let k_s = smooth_impulse(body, &t.x, &t.u, t.dt);
    let mut imp = Vector6::zeros();
    for i in 0..m {
        let lt = lam.lambda_t(i);
        for k in 0..6 {
            imp[k] += terms.j_n[(i, k)] * lam.lambda_n[i]
                + terms.j_t[(2 * i, k)] * lt[0]
                + terms.j_t[(2 * i + 1, k)] * lt[1];
        }
    }
    let v_tilde = t.x.v + m_inv * (k_s + imp);
    let phi_tilde = &terms.phi_n + (&terms.j_n * v_tilde) * t.dt;

    let total = weights.w1 * ct.l1
        + weights.w2 * ct.l2
        + weights.w3 * ct.l3
        + weights.w4 * ct.l4
        + weights.w_reg * (reg1 + reg2);
    Ok(LossBreakdown {
        l1: ct.l1,
        l2: ct.l2,
        l3: ct.l3,
        l4: ct.l4,
        reg1,
        reg2,
        total,
        lambda_star: lam,
        v_tilde,
        phi_tilde,
    })
}

/// Minimize the cost over feasible impulses and report every term at the
/// minimizer. `total` includes the regularizers.
pub fn loss(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
) -> Result<LossBreakdown, LossError> {
    loss_warm(model, body, t, weights, d, settings, None).map(|(b, _)| b)
}

/// A reusable primal/dual starting point for the inner impulse QP.
pub type QpWarmStart = (DVector<f64>, DVector<f64>);

/// Like [`loss`], but warm-starting the inner QP and returning the
/// solver's primal/dual pair; re-solving the same transition from the
/// previous solution converges in far fewer iterations.
pub fn loss_warm(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
    warm: Option<&QpWarmStart>,
) -> Result<(LossBreakdown, QpWarmStart), LossError> {
    let qp = assemble_loss_qp(model, body, t, weights, d)?;
    let warm_ref = warm.and_then(|(z, y)| {
        (z.len() == qp.spec.c.len() && y.len() == qp.spec.a.nrows()).then_some((z, y))
    });
    let sol = solve_qp_warm(&qp.spec, settings, warm_ref)?;
    if sol.status != QpStatus::Solved {
        return Err(LossError::QpNotConverged(sol.status, sol.primal_residual));
    }
    let start = (sol.z.clone(), sol.y.clone());
    let (mut lam, _) = qp.split(&sol.z);
    // project tiny solver negatives back into the cone
    for v in lam.lambda_n.iter_mut() {
        *v = v.max(0.0);
    }
    for v in lam.beta.iter_mut() {
        *v = v.max(0.0);
    }
    breakdown_at(model, body, t, weights, lam).map(|b| (b, start))
}

/// Envelope-theorem gradient of `loss` with respect to the flattened
/// model parameters, at the fixed QP minimizer.
pub fn loss_gradient(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
) -> Result<(Vec<f64>, LossBreakdown), LossError> {
    loss_gradient_warm(model, body, t, weights, d, settings, None).map(|(g, b, _)| (g, b))
}

/// [`loss_gradient`] with a warm start for the inner QP.
pub fn loss_gradient_warm(
    model: &ContactModel,
    body: &RigidBodyParams,
    t: &Transition,
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
    warm: Option<&QpWarmStart>,
) -> Result<(Vec<f64>, LossBreakdown, QpWarmStart), LossError> {
    let (breakdown, start) = loss_warm(model, body, t, weights, d, settings, warm)?;
    let tape = Tape::new();
    let (vars, leaves) = model_vars_on_tape(model, &tape);
    let ct = cost_terms(&vars, body, t, &breakdown.lambda_star, tape.var(0.0))?;
    let (p0, q0) = t.x.configuration();
    let terms_q = eval_terms(&vars, &p0, &q0, tape.var(0.0))?;
    let (r1, r2) = regularizer_terms(&terms_q, tape.var(0.0));
    let total = ct.l1 * weights.w1
        + ct.l2 * weights.w2
        + ct.l3 * weights.w3
        + ct.l4 * weights.w4
        + (r1 + r2) * weights.w_reg;
    let grad = tape.gradient(total);
    Ok((leaves.iter().map(|&l| grad.wrt(l)).collect(), breakdown, start))
}
