//! Smooth (contact-free) rigid-body mechanics for a single free body:
//! mass matrix, non-contact impulses, configuration integration, and the
//! net contact impulse recovered from an observed transition.
//!
//! Velocities are 6-vectors `[v_lin; omega]` with world-frame linear
//! velocity and body-frame angular velocity. Configurations are a world
//! position plus a unit quaternion (world from body).

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("inertia tensor must be symmetric positive-definite")]
    BadInertia,
}

/// Full state of one rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// World-frame position (m).
    pub p: Vector3<f64>,
    /// World-from-body orientation.
    pub quat: UnitQuaternion<f64>,
    /// `[v_lin (world, m/s); omega (body, rad/s)]`.
    pub v: Vector6<f64>,
}

impl State {
    pub fn new(p: Vector3<f64>, quat: UnitQuaternion<f64>, v: Vector6<f64>) -> Self {
        State { p, quat, v }
    }

    pub fn v_lin(&self) -> Vector3<f64> {
        self.v.fixed_rows::<3>(0).into_owned()
    }

    pub fn omega(&self) -> Vector3<f64> {
        self.v.fixed_rows::<3>(3).into_owned()
    }

    /// Configuration as the 7 numbers `(p, quat)` with quat = (w, x, y, z).
    pub fn configuration(&self) -> ([f64; 3], [f64; 4]) {
        let q = self.quat.quaternion();
        ([self.p.x, self.p.y, self.p.z], [q.w, q.i, q.j, q.k])
    }
}

/// Known inertial quantities and gravity; these are configuration inputs,
/// never learned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigidBodyParams {
    /// kg
    pub mass: f64,
    /// body-frame inertia tensor, kg m^2
    pub inertia: Matrix3<f64>,
    /// world-frame gravitational acceleration, m/s^2
    pub gravity: Vector3<f64>,
}

impl RigidBodyParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>, gravity: Vector3<f64>) -> Result<Self, BodyError> {
        if mass <= 0.0 {
            return Err(BodyError::NonPositiveMass(mass));
        }
        if (inertia - inertia.transpose()).norm() > 1e-12 * inertia.norm() {
            return Err(BodyError::BadInertia);
        }
        let eig = inertia.symmetric_eigenvalues();
        if eig.iter().any(|&e| e <= 0.0) {
            return Err(BodyError::BadInertia);
        }
        Ok(RigidBodyParams {
            mass,
            inertia,
            gravity,
        })
    }

    /// A uniform solid cube: inertia (m w^2 / 6) I.
    pub fn cube(mass: f64, width: f64, gravity: Vector3<f64>) -> Self {
        let i = mass * width * width / 6.0;
        RigidBodyParams {
            mass,
            inertia: Matrix3::from_diagonal_element(i),
            gravity,
        }
    }
}

/// One observed state transition with its fixed timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transition {
    pub x: State,
    /// Generalized control impulse rate (applied as `u * dt`); zero for tosses.
    pub u: Vector6<f64>,
    pub x_next: State,
    pub dt: f64,
}

/// A time-stamped state sequence with uniform timestep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn transitions(&self) -> Vec<Transition> {
        self.states
            .windows(2)
            .map(|w| Transition {
                x: w[0],
                u: Vector6::zeros(),
                x_next: w[1],
                dt: self.dt,
            })
            .collect()
    }
}

/// Block-diagonal generalized mass matrix `[m I, 0; 0, inertia]`.
pub fn mass_matrix(body: &RigidBodyParams) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = body.mass;
    }
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&body.inertia);
    m
}

/// Inverse of the generalized mass matrix (block inverse).
pub fn mass_matrix_inverse(body: &RigidBodyParams) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = 1.0 / body.mass;
    }
    let inv = body
        .inertia
        .try_inverse()
        .expect("inertia is PD by construction");
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&inv);
    m
}

/// Aggregated smooth, non-contact impulse over one timestep:
/// gravity on the linear block, gyroscopic moment on the angular block,
/// plus the control impulse `u * dt`.
pub fn smooth_impulse(body: &RigidBodyParams, x: &State, u: &Vector6<f64>, dt: f64) -> Vector6<f64> {
    let omega = x.omega();
    let gyro = -omega.cross(&(body.inertia * omega));
    let mut k = Vector6::zeros();
    k.fixed_rows_mut::<3>(0)
        .copy_from(&(body.mass * body.gravity * dt));
    k.fixed_rows_mut::<3>(3).copy_from(&(gyro * dt));
    k + u * dt
}

/// Advance the configuration with the end-of-step velocity (symplectic
/// Euler): `p' = p + v_lin' dt`, `quat' = normalize(quat + 1/2 quat (0, omega') dt)`.
pub fn integrate_configuration(
    p: &Vector3<f64>,
    quat: &UnitQuaternion<f64>,
    v_new: &Vector6<f64>,
    dt: f64,
) -> (Vector3<f64>, UnitQuaternion<f64>) {
    let v_lin = v_new.fixed_rows::<3>(0).into_owned();
    let omega = v_new.fixed_rows::<3>(3).into_owned();
    let p_new = p + v_lin * dt;
    let q = quat.quaternion();
    let dq = q * Quaternion::from_parts(0.0, omega) * 0.5 * dt;
    let q_new = UnitQuaternion::from_quaternion(q + dq);
    (p_new, q_new)
}

/// Net contact impulse observed from the data: `M (v' - v) - k_s(x, u)`.
pub fn contact_impulse_from_data(body: &RigidBodyParams, t: &Transition) -> Vector6<f64> {
    let m = mass_matrix(body);
    m * (t.x_next.v - t.x.v) - smooth_impulse(body, &t.x, &t.u, t.dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn simple_body() -> RigidBodyParams {
        RigidBodyParams::cube(0.37, 0.1, Vector3::new(0.0, 0.0, -9.81))
    }

    #[test]
    fn mass_matrix_block_diagonal() {
        let body = RigidBodyParams::new(
            2.0,
            Matrix3::from_diagonal_element(0.1),
            Vector3::zeros(),
        )
        .unwrap();
        let m = mass_matrix(&body);
        for i in 0..3 {
            assert_eq!(m[(i, i)], 2.0);
            assert_eq!(m[(i + 3, i + 3)], 0.1);
        }
        assert_eq!(m.fixed_view::<3, 3>(0, 3).norm(), 0.0);
    }

    #[test]
    fn unit_body_gives_identity_mass_matrix() {
        let body =
            RigidBodyParams::new(1.0, Matrix3::identity(), Vector3::zeros()).unwrap();
        assert_eq!(mass_matrix(&body), Matrix6::identity());
    }

    #[test]
    fn cube_mass_matrix_positive_definite() {
        let m = mass_matrix(&simple_body());
        // hand evaluation: det = mass^3 * prod(inertia diag)
        let i: f64 = 0.37 * 0.1 * 0.1 / 6.0;
        assert_relative_eq!(
            m.determinant(),
            0.37f64.powi(3) * i.powi(3),
            max_relative = 1e-12
        );
        assert!(m.symmetric_eigenvalues().iter().all(|&e| e > 0.0));
    }

    #[test]
    fn rejects_invalid_bodies() {
        assert!(RigidBodyParams::new(0.0, Matrix3::identity(), Vector3::zeros()).is_err());
        assert!(
            RigidBodyParams::new(1.0, -Matrix3::identity(), Vector3::zeros()).is_err()
        );
    }

    #[test]
    fn gravity_impulse_hand_value() {
        let body =
            RigidBodyParams::new(1.0, Matrix3::identity(), Vector3::new(0.0, 0.0, -9.81))
                .unwrap();
        let x = State::new(Vector3::zeros(), UnitQuaternion::identity(), Vector6::zeros());
        let k = smooth_impulse(&body, &x, &Vector6::zeros(), 0.01);
        let expect = Vector6::new(0.0, 0.0, -0.0981, 0.0, 0.0, 0.0);
        assert_relative_eq!(k, expect, epsilon = 1e-15);
    }

    #[test]
    fn gyroscopic_term_vanishes_on_principal_axis() {
        let body = RigidBodyParams::new(
            1.0,
            Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
            Vector3::zeros(),
        )
        .unwrap();
        let mut v = Vector6::zeros();
        v[5] = 1.0; // omega about z, parallel to I omega
        let x = State::new(Vector3::zeros(), UnitQuaternion::identity(), v);
        let k = smooth_impulse(&body, &x, &Vector6::zeros(), 0.5);
        assert_relative_eq!(k.norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn gyroscopic_term_hand_value() {
        // omega=(1,1,0), I=diag(1,2,3): -omega x (I omega) = -(1,1,0)x(1,2,0) = (0,0,-1)
        let body = RigidBodyParams::new(
            1.0,
            Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
            Vector3::zeros(),
        )
        .unwrap();
        let mut v = Vector6::zeros();
        v[3] = 1.0;
        v[4] = 1.0;
        let x = State::new(Vector3::zeros(), UnitQuaternion::identity(), v);
        let k = smooth_impulse(&body, &x, &Vector6::zeros(), 1.0);
        assert_relative_eq!(
            k.fixed_rows::<3>(3).into_owned(),
            Vector3::new(0.0, 0.0, -1.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn zero_velocity_leaves_configuration_unchanged() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.9);
        let (p2, q2) = integrate_configuration(&p, &q, &Vector6::zeros(), 0.1);
        assert_eq!(p2, p);
        assert_relative_eq!(q2.angle_to(&q), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn linear_integration_hand_value() {
        let p = Vector3::zeros();
        let q = UnitQuaternion::identity();
        let mut v = Vector6::zeros();
        v[0] = 1.0;
        let (p2, _) = integrate_configuration(&p, &q, &v, 0.1);
        assert_relative_eq!(p2, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn quaternion_integration_matches_exponential_for_small_dt() {
        // closed-form oracle: rotation about z by w*dt
        let w = 2.0;
        let dt = 1e-4;
        let q = UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3);
        let mut v = Vector6::zeros();
        v[5] = w;
        let (_, q2) = integrate_configuration(&Vector3::zeros(), &q, &v, dt);
        let exact = q * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), w * dt);
        assert!(q2.angle_to(&exact) < 10.0 * dt * dt);
    }

    #[test]
    fn integration_preserves_unit_norm() {
        let q = UnitQuaternion::from_euler_angles(1.0, -0.5, 2.0);
        let mut v = Vector6::zeros();
        v[3] = 30.0;
        v[4] = -10.0;
        let (_, q2) = integrate_configuration(&Vector3::zeros(), &q, &v, 0.05);
        assert_relative_eq!(q2.quaternion().norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn two_half_steps_match_one_full_step_to_second_order() {
        let q = UnitQuaternion::from_euler_angles(0.4, 0.1, -0.6);
        let p = Vector3::new(0.1, 0.0, 0.2);
        let mut v = Vector6::zeros();
        v[0] = 1.0;
        v[3] = 5.0;
        v[5] = -3.0;
        let dt = 1e-3;
        let (p_full, q_full) = integrate_configuration(&p, &q, &v, dt);
        let (p_h, q_h) = integrate_configuration(&p, &q, &v, dt / 2.0);
        let (p_hh, q_hh) = integrate_configuration(&p_h, &q_h, &v, dt / 2.0);
        assert_relative_eq!(p_full, p_hh, epsilon = 1e-12);
        assert!(q_full.angle_to(&q_hh) < 100.0 * dt * dt);
    }

    #[test]
    fn free_fall_transition_has_zero_contact_impulse() {
        let body = simple_body();
        let x = State::new(
            Vector3::new(0.0, 0.0, 1.0),
            UnitQuaternion::from_euler_angles(0.2, 0.1, 0.0),
            {
                let mut v = Vector6::zeros();
                v[2] = -0.5;
                v[4] = 3.0;
                v
            },
        );
        let dt = 1.0 / 148.0;
        let u = Vector6::zeros();
        let k_s = smooth_impulse(&body, &x, &u, dt);
        let m_inv = mass_matrix_inverse(&body);
        let v_new = x.v + m_inv * k_s;
        let (p2, q2) = integrate_configuration(&x.p, &x.quat, &v_new, dt);
        let t = Transition {
            x,
            u,
            x_next: State::new(p2, q2, v_new),
            dt,
        };
        let kc = contact_impulse_from_data(&body, &t);
        assert!(kc.norm() <= 1e-10 * k_s.norm());
    }

    #[test]
    fn one_dimensional_impulse_hand_value() {
        // 1D analogue: unit mass, dz from -5 to 0 over dt=1 under gravity
        let body =
            RigidBodyParams::new(1.0, Matrix3::identity(), Vector3::new(0.0, 0.0, -9.81))
                .unwrap();
        let mut v0 = Vector6::zeros();
        v0[2] = -5.0;
        let x = State::new(
            Vector3::new(0.0, 0.0, 1.0),
            UnitQuaternion::identity(),
            v0,
        );
        let x_next = State::new(Vector3::zeros(), UnitQuaternion::identity(), Vector6::zeros());
        let t = Transition {
            x,
            u: Vector6::zeros(),
            x_next,
            dt: 1.0,
        };
        let kc = contact_impulse_from_data(&body, &t);
        assert_relative_eq!(kc[2], 5.0 + 9.81, epsilon = 1e-12);
    }
}
