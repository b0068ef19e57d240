//! Parameterized contact geometry: signed-distance functions `phi_n`,
//! tangential functions `phi_t`, and their velocity-space Jacobians `J_n`,
//! `J_t` for the polytope and deep (polytope + MLP) model classes.
//!
//! All evaluation is generic over [`Real`], so the same code runs on `f64`
//! for simulation and on tape variables for parameter gradients. The
//! configuration itself is always plain data: gradients flow only into the
//! model parameters.

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, MlpSpec, MlpVars, Real, Tape, Var};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate surface normal (norm {0} < 1e-8)")]
    DegenerateNormal(f64),
    #[error("MLP shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Learnable polytope contact parameters.
///
/// `friction_scale` is stored unconstrained and consumed through softplus,
/// giving the lumped friction coefficient `mu_hat`. The normal is not
/// forcibly normalized; the unit-norm regularizer drives it toward unit
/// length during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolytopeParams {
    /// Body-frame vertex locations (m), one contact per vertex.
    pub vertices: Vec<Vector3<f64>>,
    /// World-frame surface normal (unitless).
    pub normal: Vector3<f64>,
    /// Plane offset along the normal (m).
    pub offset: f64,
    /// Unconstrained scalar; `mu_hat = softplus(friction_scale)`.
    pub friction_scale: f64,
}

impl PolytopeParams {
    pub fn num_contacts(&self) -> usize {
        self.vertices.len()
    }

    pub fn mu_hat(&self) -> f64 {
        softplus(self.friction_scale)
    }
}

/// Polytope plus MLP corrections to `phi_n` and `phi_t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeepParams {
    pub poly: PolytopeParams,
    /// Correction to phi_n: 7 inputs (p, quat), m outputs.
    pub net_n: MlpSpec,
    /// Correction to phi_t: 7 inputs, 2m outputs.
    pub net_t: MlpSpec,
    /// Output gate on the MLP corrections (default 1).
    pub net_scale: f64,
}

/// A contact model of either class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ContactModel {
    Polytope(PolytopeParams),
    Deep(DeepParams),
}

impl ContactModel {
    /// Ground-truth-style cube model: 8 vertices at +-half_width, unit z
    /// normal, zero offset, lumped friction mu.
    pub fn cube_polytope(half_width: f64, mu: f64) -> ContactModel {
        let mut vertices = Vec::new();
        for &sx in &[-1.0, 1.0] {
            for &sy in &[-1.0, 1.0] {
                for &sz in &[-1.0, 1.0] {
                    vertices.push(Vector3::new(sx, sy, sz) * half_width);
                }
            }
        }
        ContactModel::Polytope(PolytopeParams {
            vertices,
            normal: Vector3::new(0.0, 0.0, 1.0),
            offset: 0.0,
            friction_scale: crate::autodiff::softplus_inverse(mu),
        })
    }

    pub fn poly(&self) -> &PolytopeParams {
        match self {
            ContactModel::Polytope(p) => p,
            ContactModel::Deep(d) => &d.poly,
        }
    }

    pub fn num_contacts(&self) -> usize {
        self.poly().num_contacts()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if let ContactModel::Deep(d) = self {
            let m = d.poly.num_contacts();
            if d.net_n.input_dim() != 7 || d.net_n.output_dim() != m {
                return Err(GeometryError::ShapeMismatch(format!(
                    "net_n must map 7 -> {m}, got {} -> {}",
                    d.net_n.input_dim(),
                    d.net_n.output_dim()
                )));
            }
            if d.net_t.input_dim() != 7 || d.net_t.output_dim() != 2 * m {
                return Err(GeometryError::ShapeMismatch(format!(
                    "net_t must map 7 -> {}, got {} -> {}",
                    2 * m,
                    d.net_t.input_dim(),
                    d.net_t.output_dim()
                )));
            }
        }
        Ok(())
    }

    /// Parameters as one flat vector (vertices, normal, offset,
    /// friction_scale, then MLP weights/biases layer by layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let poly = self.poly();
        for v in &poly.vertices {
            out.extend_from_slice(&[v.x, v.y, v.z]);
        }
        out.extend_from_slice(&[poly.normal.x, poly.normal.y, poly.normal.z]);
        out.push(poly.offset);
        out.push(poly.friction_scale);
        if let ContactModel::Deep(d) = self {
            for net in [&d.net_n, &d.net_t] {
                for l in 0..net.weights.len() {
                    out.extend_from_slice(&net.weights[l]);
                    out.extend_from_slice(&net.biases[l]);
                }
            }
        }
        out
    }

    /// Rebuild a model of the same shape from a flat parameter vector.
    pub fn with_flat(&self, flat: &[f64]) -> ContactModel {
        let mut model = self.clone();
        let mut i = 0;
        {
            let poly = match &mut model {
                ContactModel::Polytope(p) => p,
                ContactModel::Deep(d) => &mut d.poly,
            };
            for v in poly.vertices.iter_mut() {
                *v = Vector3::new(flat[i], flat[i + 1], flat[i + 2]);
                i += 3;
            }
            poly.normal = Vector3::new(flat[i], flat[i + 1], flat[i + 2]);
            i += 3;
            poly.offset = flat[i];
            poly.friction_scale = flat[i + 1];
            i += 2;
        }
        if let ContactModel::Deep(d) = &mut model {
            for net in [&mut d.net_n, &mut d.net_t] {
                for l in 0..net.weights.len() {
                    let nw = net.weights[l].len();
                    net.weights[l].copy_from_slice(&flat[i..i + nw]);
                    i += nw;
                    let nb = net.biases[l].len();
                    net.biases[l].copy_from_slice(&flat[i..i + nb]);
                    i += nb;
                }
            }
        }
        debug_assert_eq!(i, flat.len());
        model
    }

    pub fn param_count(&self) -> usize {
        let poly = self.poly();
        let mut n = 3 * poly.vertices.len() + 5;
        if let ContactModel::Deep(d) = self {
            n += d.net_n.param_count() + d.net_t.param_count();
        }
        n
    }
}

/// Evaluated contact terms at one configuration.
#[derive(Debug, Clone)]
pub struct ContactTerms {
    /// m signed distances (m).
    pub phi_n: DVector<f64>,
    /// 2m tangential coordinates (m), rows (2i, 2i+1) per contact.
    pub phi_t: DVector<f64>,
    /// m x 6 normal Jacobian.
    pub j_n: DMatrix<f64>,
    /// 2m x 6 tangential Jacobian (lumped friction folded in).
    pub j_t: DMatrix<f64>,
}

// ---- generic evaluation ----

fn dot3<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rotate `u` by the quaternion `q = (w, x, y, z)`: u + 2w (v x u) + 2 v x (v x u).
fn rotate<T: Real>(q: &[T; 4], u: &[T; 3]) -> [T; 3] {
    let v = [q[1], q[2], q[3]];
    let c1 = cross3(&v, u);
    let c2 = cross3(&v, &c1);
    [
        u[0] + (c1[0] * q[0] + c2[0]) * 2.0,
        u[1] + (c1[1] * q[0] + c2[1]) * 2.0,
        u[2] + (c1[2] * q[0] + c2[2]) * 2.0,
    ]
}

/// Rotate by the conjugate (world to body).
fn rotate_inv<T: Real>(q: &[T; 4], u: &[T; 3]) -> [T; 3] {
    let qc = [q[0], -q[1], -q[2], -q[3]];
    rotate(&qc, u)
}

/// Polytope parameters in a generic scalar type.
pub struct PolyVars<T> {
    pub vertices: Vec<[T; 3]>,
    pub normal: [T; 3],
    pub offset: T,
    pub friction_scale: T,
}

/// Full contact model in a generic scalar type.
pub enum ModelVars<T> {
    Polytope(PolyVars<T>),
    Deep {
        poly: PolyVars<T>,
        net_n: MlpVars<T>,
        net_t: MlpVars<T>,
        net_scale: f64,
    },
}

impl<T: Real> ModelVars<T> {
    pub fn poly(&self) -> &PolyVars<T> {
        match self {
            ModelVars::Polytope(p) => p,
            ModelVars::Deep { poly, .. } => poly,
        }
    }
}

/// Contact terms in a generic scalar type; Jacobian rows are `[T; 6]`.
pub struct TermsVars<T> {
    pub phi_n: Vec<T>,
    pub phi_t: Vec<T>,
    pub j_n: Vec<[T; 6]>,
    pub j_t: Vec<[T; 6]>,
}

fn tangent_frame<T: Real>(normal: &[T; 3], ctx: T) -> Result<([T; 3], [T; 3]), GeometryError> {
    let norm2 = dot3(normal, normal);
    let norm = norm2.sqrt_r();
    if norm.value() < 1e-8 {
        return Err(GeometryError::DegenerateNormal(norm.value()));
    }
    let n_unit = [normal[0] / norm, normal[1] / norm, normal[2] / norm];
    // smallest-component axis rule, fixed and deterministic
    let abs = [
        n_unit[0].value().abs(),
        n_unit[1].value().abs(),
        n_unit[2].value().abs(),
    ];
    let mut k = 0;
    if abs[1] < abs[k] {
        k = 1;
    }
    if abs[2] < abs[k] {
        k = 2;
    }
    let mut e = [ctx.lit(0.0), ctx.lit(0.0), ctx.lit(0.0)];
    e[k] = ctx.lit(1.0);
    let t1_raw = cross3(&e, &n_unit);
    let t1_norm = dot3(&t1_raw, &t1_raw).sqrt_r();
    let t1 = [t1_raw[0] / t1_norm, t1_raw[1] / t1_norm, t1_raw[2] / t1_norm];
    let t2 = cross3(&n_unit, &t1);
    Ok((t1, t2))
}

/// Evaluate `phi` and `J` for a model at configuration `(p, quat)`.
pub fn eval_terms<T: Real>(
    model: &ModelVars<T>,
    p: &[f64; 3],
    quat: &[f64; 4],
    ctx: T,
) -> Result<TermsVars<T>, GeometryError> {
    let poly = model.poly();
    let m = poly.vertices.len();
    let pv = [ctx.lit(p[0]), ctx.lit(p[1]), ctx.lit(p[2])];
    let qv = [
        ctx.lit(quat[0]),
        ctx.lit(quat[1]),
        ctx.lit(quat[2]),
        ctx.lit(quat[3]),
    ];
    let (t1, t2) = tangent_frame(&poly.normal, ctx)?;
    let mu = softplus(poly.friction_scale);

    // body-frame images of the normal and tangents, for the angular blocks
    let n_body = rotate_inv(&qv, &poly.normal);
    let t1_body = rotate_inv(&qv, &t1);
    let t2_body = rotate_inv(&qv, &t2);

    let mut phi_n = Vec::with_capacity(m);
    let mut phi_t = Vec::with_capacity(2 * m);
    let mut j_n = Vec::with_capacity(m);
    let mut j_t = Vec::with_capacity(2 * m);
    for u in &poly.vertices {
        let ru = rotate(&qv, u);
        let w = [pv[0] + ru[0], pv[1] + ru[1], pv[2] + ru[2]];
        phi_n.push(dot3(&poly.normal, &w) - poly.offset);
        phi_t.push(mu * dot3(&t1, &w));
        phi_t.push(mu * dot3(&t2, &w));

        let ang_n = cross3(u, &n_body);
        j_n.push([
            poly.normal[0],
            poly.normal[1],
            poly.normal[2],
            ang_n[0],
            ang_n[1],
            ang_n[2],
        ]);
        let ang_t1 = cross3(u, &t1_body);
        let ang_t2 = cross3(u, &t2_body);
        j_t.push([
            mu * t1[0],
            mu * t1[1],
            mu * t1[2],
            mu * ang_t1[0],
            mu * ang_t1[1],
            mu * ang_t1[2],
        ]);
        j_t.push([
            mu * t2[0],
            mu * t2[1],
            mu * t2[2],
            mu * ang_t2[0],
            mu * ang_t2[1],
            mu * ang_t2[2],
        ]);
    }

    if let ModelVars::Deep {
        net_n,
        net_t,
        net_scale,
        ..
    } = model
    {
        let x7 = [p[0], p[1], p[2], quat[0], quat[1], quat[2], quat[3]];
        // velocity-space tangent directions through Gamma(q):
        // dq/dt = 1/2 q (0, omega) = G(q) omega with G = 1/2 [-v^T; w I + [v]x]
        let (w, x, y, z) = (quat[0], quat[1], quat[2], quat[3]);
        let g_cols = [
            [-x, w, z, -y],
            [-y, -z, w, x],
            [-z, y, -x, w],
        ];
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(6);
        for k in 0..3 {
            let mut d = vec![0.0; 7];
            d[k] = 1.0;
            dirs.push(d);
        }
        for g in &g_cols {
            let mut d = vec![0.0; 7];
            for (r, &gv) in g.iter().enumerate() {
                d[3 + r] = 0.5 * gv;
            }
            dirs.push(d);
        }
        let s = *net_scale;
        let (out_n, tan_n) = net_n.forward_with_tangents(&x7, &dirs, ctx);
        let (out_t, tan_t) = net_t.forward_with_tangents(&x7, &dirs, ctx);
        if out_n.len() != m || out_t.len() != 2 * m {
            return Err(GeometryError::ShapeMismatch(format!(
                "net outputs ({}, {}) do not match m = {m}",
                out_n.len(),
                out_t.len()
            )));
        }
        for i in 0..m {
            phi_n[i] = phi_n[i] + out_n[i] * s;
            for k in 0..6 {
                j_n[i][k] = j_n[i][k] + tan_n[k][i] * s;
            }
        }
        for i in 0..2 * m {
            phi_t[i] = phi_t[i] + out_t[i] * s;
            for k in 0..6 {
                j_t[i][k] = j_t[i][k] + tan_t[k][i] * s;
            }
        }
    }

    Ok(TermsVars {
        phi_n,
        phi_t,
        j_n,
        j_t,
    })
}

// ---- f64 front ends ----

fn poly_vars_f64(p: &PolytopeParams) -> PolyVars<f64> {
    PolyVars {
        vertices: p.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
        normal: [p.normal.x, p.normal.y, p.normal.z],
        offset: p.offset,
        friction_scale: p.friction_scale,
    }
}

pub fn model_vars_f64(model: &ContactModel) -> ModelVars<f64> {
    match model {
        ContactModel::Polytope(p) => ModelVars::Polytope(poly_vars_f64(p)),
        ContactModel::Deep(d) => ModelVars::Deep {
            poly: poly_vars_f64(&d.poly),
            net_n: MlpVars {
                widths: d.net_n.widths.clone(),
                activation: d.net_n.activation,
                weights: d.net_n.weights.clone(),
                biases: d.net_n.biases.clone(),
            },
            net_t: MlpVars {
                widths: d.net_t.widths.clone(),
                activation: d.net_t.activation,
                weights: d.net_t.weights.clone(),
                biases: d.net_t.biases.clone(),
            },
            net_scale: d.net_scale,
        },
    }
}

/// Register every learnable parameter as a tape leaf; the returned leaf
/// order matches [`ContactModel::flatten`].
pub fn model_vars_on_tape<'t>(
    model: &ContactModel,
    tape: &'t Tape,
) -> (ModelVars<Var<'t>>, Vec<Var<'t>>) {
    let flat = model.flatten();
    let leaves: Vec<Var<'t>> = flat.iter().map(|&v| tape.var(v)).collect();
    let poly = model.poly();
    let m = poly.num_contacts();
    let mut i = 0;
    let mut vertices = Vec::with_capacity(m);
    for _ in 0..m {
        vertices.push([leaves[i], leaves[i + 1], leaves[i + 2]]);
        i += 3;
    }
    let normal = [leaves[i], leaves[i + 1], leaves[i + 2]];
    i += 3;
    let offset = leaves[i];
    let friction_scale = leaves[i + 1];
    i += 2;
    let poly_vars = PolyVars {
        vertices,
        normal,
        offset,
        friction_scale,
    };
    let vars = match model {
        ContactModel::Polytope(_) => ModelVars::Polytope(poly_vars),
        ContactModel::Deep(d) => {
            let mut nets = Vec::new();
            for net in [&d.net_n, &d.net_t] {
                let mut weights = Vec::new();
                let mut biases = Vec::new();
                for l in 0..net.weights.len() {
                    let nw = net.weights[l].len();
                    weights.push(leaves[i..i + nw].to_vec());
                    i += nw;
                    let nb = net.biases[l].len();
                    biases.push(leaves[i..i + nb].to_vec());
                    i += nb;
                }
                nets.push(MlpVars {
                    widths: net.widths.clone(),
                    activation: net.activation,
                    weights,
                    biases,
                });
            }
            let net_t = nets.pop().unwrap();
            let net_n = nets.pop().unwrap();
            ModelVars::Deep {
                poly: poly_vars,
                net_n,
                net_t,
                net_scale: d.net_scale,
            }
        }
    };
    debug_assert_eq!(i, leaves.len());
    (vars, leaves)
}

fn terms_to_f64(t: TermsVars<f64>) -> ContactTerms {
    let m = t.phi_n.len();
    ContactTerms {
        phi_n: DVector::from_vec(t.phi_n),
        phi_t: DVector::from_vec(t.phi_t),
        j_n: DMatrix::from_fn(m, 6, |i, j| t.j_n[i][j]),
        j_t: DMatrix::from_fn(2 * m, 6, |i, j| t.j_t[i][j]),
    }
}

/// `(phi_n, phi_t)` of the polytope model at a configuration.
pub fn polytope_phi(
    params: &PolytopeParams,
    p: &Vector3<f64>,
    quat: &UnitQuaternion<f64>,
) -> Result<(DVector<f64>, DVector<f64>), GeometryError> {
    let terms = contact_terms_at(&ContactModel::Polytope(params.clone()), p, quat)?;
    Ok((terms.phi_n, terms.phi_t))
}

/// `(J_n, J_t)` of the polytope model at a configuration.
pub fn polytope_jacobians(
    params: &PolytopeParams,
    p: &Vector3<f64>,
    quat: &UnitQuaternion<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), GeometryError> {
    let terms = contact_terms_at(&ContactModel::Polytope(params.clone()), p, quat)?;
    Ok((terms.j_n, terms.j_t))
}

/// Evaluate all contact terms for either model class.
pub fn contact_terms_at(
    model: &ContactModel,
    p: &Vector3<f64>,
    quat: &UnitQuaternion<f64>,
) -> Result<ContactTerms, GeometryError> {
    let q = quat.quaternion();
    let vars = model_vars_f64(model);
    let terms = eval_terms(&vars, &[p.x, p.y, p.z], &[q.w, q.i, q.j, q.k], 0.0f64)?;
    Ok(terms_to_f64(terms))
}
