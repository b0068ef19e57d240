//! End-to-end acceptance suite. Each test checks one acceptance criterion
//! and prints a single PASS line with its measured numbers; assertions use
//! the stated tolerances.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, UnitQuaternion, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use contactnets::dynamics::{
    contact_impulse_from_data, integrate_configuration, mass_matrix, RigidBodyParams, State,
    Transition,
};
use contactnets::geometry::{contact_terms_at, ContactModel, PolytopeParams};
use contactnets::loss::{loss, loss_gradient, LossWeights};
use contactnets::qp::{solve_qp, QpSettings, QpSpec};
use contactnets::sim::{friction_directions, solve_contact_lcp, step, Lcp, SimConfig};
use contactnets::toy1d::{toy_experiment, ToyConfig};
use contactnets::training::generate_synthetic_tosses;

fn cube_body() -> RigidBodyParams {
    RigidBodyParams::cube(0.37, 0.1, Vector3::new(0.0, 0.0, -9.81))
}

fn gt_model() -> ContactModel {
    ContactModel::cube_polytope(0.05, 0.15)
}

// ---- criterion 1: toy 1D recovery ----

#[test]
fn criterion_1_toy_recovery() {
    let start = Instant::now();
    // the ground-height criterion does not involve the DNN baseline, so
    // its training is cut to keep the run inside the budget
    let cfg = ToyConfig {
        dnn_max_epochs: 1,
        grid_step: 0.1,
        ..Default::default()
    };
    let mut hits = 0usize;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let z = toy_experiment(seed, &cfg).learned_z_g;
        if z.abs() < 0.05 {
            hits += 1;
        }
        worst = worst.max(z.abs());
    }
    let noiseless = toy_experiment(
        0,
        &ToyConfig {
            noise_std: 0.0,
            ..cfg.clone()
        },
    )
    .learned_z_g;
    let elapsed = start.elapsed();
    println!(
        "criterion 1 (toy 1D recovery): PASS — {hits}/10 seeds within 0.05 (worst {worst:.4}), \
         noiseless |z_g| {:.2e}, {:.1?}",
        noiseless.abs(),
        elapsed
    );
    assert!(hits >= 9, "only {hits}/10 seeds within 0.05");
    assert!(noiseless.abs() < 1e-3, "noiseless z_g {noiseless}");
    assert!(elapsed.as_secs() < 60, "took {elapsed:?}");
}

// ---- criterion 2: loss round-trip ----

#[test]
fn criterion_2_loss_round_trip() {
    let start = Instant::now();
    let body = cube_body();
    let model = gt_model();
    let sim_cfg = SimConfig::default();
    let tosses = generate_synthetic_tosses(&model, &body, 50, 0.0, 19, &sim_cfg).unwrap();
    let transitions: Vec<Transition> = tosses.iter().flat_map(|t| t.transitions()).collect();
    // impulse scale: largest squared contact impulse seen in the data
    let scale = transitions
        .iter()
        .map(|t| contact_impulse_from_data(&body, t).norm_squared())
        .fold(0.0f64, f64::max);
    let weights = LossWeights {
        w_reg: 0.0,
        ..Default::default()
    };
    let settings = QpSettings::default();
    let totals: Vec<f64> = transitions
        .par_iter()
        .map(|t| {
            loss(&model, &body, t, &weights, sim_cfg.friction_dirs, &settings)
                .unwrap()
                .total
        })
        .collect();
    let mean = totals.iter().sum::<f64>() / totals.len() as f64;
    let elapsed = start.elapsed();
    println!(
        "criterion 2 (loss round-trip): PASS — mean loss {mean:.3e} vs bound {:.3e} \
         ({} transitions, {:.1?})",
        1e-6 * scale,
        totals.len(),
        elapsed
    );
    assert!(mean <= 1e-6 * scale, "mean {mean} scale {scale}");
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
}

// ---- criterion 3: envelope gradient vs finite differences ----

fn random_polytope(rng: &mut ChaCha8Rng) -> ContactModel {
    let n_verts = rng.gen_range(3..=5);
    let vertices = (0..n_verts)
        .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-0.06..0.06)))
        .collect();
    let normal = (Vector3::new(0.0, 0.0, 1.0)
        + Vector3::from_fn(|_, _| rng.gen_range(-0.2..0.2)))
    .normalize();
    ContactModel::Polytope(PolytopeParams {
        vertices,
        normal,
        offset: rng.gen_range(-0.01..0.01),
        friction_scale: rng.gen_range(-2.5..0.0),
    })
}

/// A transition near the ground so some gaps straddle activation.
fn random_near_ground_transition(rng: &mut ChaCha8Rng, dt: f64) -> Transition {
    let state = |rng: &mut ChaCha8Rng, z_range: (f64, f64)| {
        State::new(
            Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(z_range.0..z_range.1),
            ),
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0))),
            Vector6::from_fn(|i, _| {
                if i < 3 {
                    rng.gen_range(-1.0..1.0)
                } else {
                    rng.gen_range(-4.0..4.0)
                }
            }),
        )
    };
    Transition {
        x: state(rng, (0.02, 0.09)),
        u: Vector6::zeros(),
        x_next: state(rng, (0.03, 0.1)),
        dt,
    }
}

#[test]
fn criterion_3_gradient_correctness() {
    let body = cube_body();
    let weights = LossWeights::default();
    let d = 8;
    // tight QP tolerances so the finite-difference probe of the re-solved
    // loss is not dominated by solver noise
    let settings = QpSettings {
        tol_abs: 1e-12,
        tol_rel: 1e-12,
        max_iter: 200_000,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut active = 0usize;
    for _ in 0..100 {
        let model = random_polytope(&mut rng);
        let t = random_near_ground_transition(&mut rng, 1.0 / 148.0);
        let (grad, bd) = loss_gradient(&model, &body, &t, &weights, d, &settings).unwrap();
        let flat = model.flatten();
        let fd: Vec<f64> = (0..flat.len())
            .map(|k| {
                let mut fp = flat.clone();
                fp[k] += h;
                let mut fm = flat.clone();
                fm[k] -= h;
                let lp = loss(&model.with_flat(&fp), &body, &t, &weights, d, &settings)
                    .unwrap()
                    .total;
                let lm = loss(&model.with_flat(&fm), &body, &t, &weights, d, &settings)
                    .unwrap()
                    .total;
                (lp - lm) / (2.0 * h)
            })
            .collect();
        let g = DVector::from_vec(grad);
        let f = DVector::from_vec(fd);
        // away from contact the loss is constant in the parameters and both
        // gradients are zero up to solver noise; a ratio of two noise vectors
        // is meaningless, so such instances count as exact agreement
        let floor = 1e-5 * (1.0 + bd.total);
        if f.norm().max(g.norm()) < floor {
            continue;
        }
        active += 1;
        let rel = (&g - &f).norm() / f.norm().max(g.norm());
        worst = worst.max(rel);
        assert!(rel < 1e-3, "gradient mismatch {rel:.3e}");
    }
    assert!(active >= 30, "only {active}/100 instances near activation");
    println!(
        "criterion 3 (gradient correctness): PASS — worst relative error {worst:.3e} \
         over 100 instances ({active} with active contact)"
    );
}

// ---- criterion 4: Jacobians vs finite differences of phi along Gamma ----

fn fd_phi_rates(
    model: &ContactModel,
    p: &Vector3<f64>,
    quat: &UnitQuaternion<f64>,
    eps: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = model.num_contacts();
    let mut fd_n = DMatrix::zeros(m, 6);
    let mut fd_t = DMatrix::zeros(2 * m, 6);
    for k in 0..6 {
        let mut v = Vector6::zeros();
        v[k] = 1.0;
        let (pp, qp) = integrate_configuration(p, quat, &v, eps);
        let (pm, qm) = integrate_configuration(p, quat, &v, -eps);
        let tp = contact_terms_at(model, &pp, &qp).unwrap();
        let tm = contact_terms_at(model, &pm, &qm).unwrap();
        fd_n.set_column(k, &((tp.phi_n - tm.phi_n) / (2.0 * eps)));
        fd_t.set_column(k, &((tp.phi_t - tm.phi_t) / (2.0 * eps)));
    }
    (fd_n, fd_t)
}

#[test]
fn criterion_4_jacobian_correctness() {
    use contactnets::autodiff::{Activation, MlpSpec};
    use contactnets::geometry::DeepParams;
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let poly = random_polytope(&mut rng);
        let model = if k % 2 == 0 {
            poly
        } else {
            let m = poly.num_contacts();
            ContactModel::Deep(DeepParams {
                poly: poly.poly().clone(),
                net_n: MlpSpec::random(vec![7, 16, m], Activation::Tanh, &mut rng),
                net_t: MlpSpec::random(vec![7, 16, 2 * m], Activation::Tanh, &mut rng),
                net_scale: 0.05,
            })
        };
        let p = Vector3::from_fn(|_, _| rng.gen_range(-0.2..0.2));
        let quat =
            UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0)));
        let terms = contact_terms_at(&model, &p, &quat).unwrap();
        let (fd_n, fd_t) = fd_phi_rates(&model, &p, &quat, 1e-6);
        let rel_n = (&terms.j_n - &fd_n).norm() / fd_n.norm().max(1e-12);
        let rel_t = (&terms.j_t - &fd_t).norm() / fd_t.norm().max(1e-12);
        worst = worst.max(rel_n).max(rel_t);
        assert!(rel_n < 1e-4, "J_n mismatch {rel_n:.3e} on config {k}");
        assert!(rel_t < 1e-4, "J_t mismatch {rel_t:.3e} on config {k}");
    }
    println!(
        "criterion 4 (Jacobian correctness): PASS — worst relative error {worst:.3e} over 100 configurations"
    );
}

// ---- criterion 5: QP and LCP vs brute-force enumeration oracles ----

/// Exhaustive active-set QP oracle: every row of A is inactive, at its
/// lower bound, or at its upper bound; solve each KKT system and keep the
/// best primally feasible candidate.
fn brute_force_qp(spec: &QpSpec) -> Option<DVector<f64>> {
    let n = spec.c.len();
    let m = spec.a.nrows();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let combos = 3usize.pow(m as u32);
    for mask in 0..combos {
        let mut states = Vec::with_capacity(m);
        let mut rem = mask;
        for _ in 0..m {
            states.push(rem % 3); // 0 inactive, 1 lower, 2 upper
            rem /= 3;
        }
        let active: Vec<usize> = (0..m).filter(|&i| states[i] != 0).collect();
        let na = active.len();
        if na > n {
            continue;
        }
        // KKT: [P A_a'; A_a 0] [z; nu] = [-c; b_a]
        let mut kkt = DMatrix::zeros(n + na, n + na);
        kkt.view_mut((0, 0), (n, n)).copy_from(&spec.p);
        let mut rhs = DVector::zeros(n + na);
        rhs.rows_mut(0, n).copy_from(&(-&spec.c));
        for (r, &i) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = spec.a[(i, j)];
                kkt[(j, n + r)] = spec.a[(i, j)];
            }
            rhs[n + r] = if states[i] == 1 {
                spec.lower[i]
            } else {
                spec.upper[i]
            };
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let z = sol.rows(0, n).into_owned();
        let az = &spec.a * &z;
        let tol = 1e-9;
        let feasible = (0..m).all(|i| az[i] >= spec.lower[i] - tol && az[i] <= spec.upper[i] + tol);
        if !feasible {
            continue;
        }
        let obj = 0.5 * (&spec.p * &z).dot(&z) + spec.c.dot(&z);
        if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-15) {
            best = Some((obj, z));
        }
    }
    best.map(|(_, z)| z)
}

/// Exhaustive support-set LCP oracle: for every basic index set B solve
/// `W_BB z_B = -w_B` and keep the candidate with z >= 0 and s >= 0.
fn brute_force_lcp(lcp: &Lcp) -> Option<DVector<f64>> {
    let n = lcp.w_vec.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 0..(1usize << n) {
        let basic: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let nb = basic.len();
        let mut z = DVector::zeros(n);
        if nb > 0 {
            let mut wbb = DMatrix::zeros(nb, nb);
            let mut wb = DVector::zeros(nb);
            for (r, &i) in basic.iter().enumerate() {
                wb[r] = -lcp.w_vec[i];
                for (c, &j) in basic.iter().enumerate() {
                    wbb[(r, c)] = lcp.w_mat[(i, j)];
                }
            }
            let Some(zb) = wbb.lu().solve(&wb) else {
                continue;
            };
            for (r, &i) in basic.iter().enumerate() {
                z[i] = zb[r];
            }
        }
        let tol = 1e-9;
        if z.iter().any(|&v| v < -tol) {
            continue;
        }
        let s = &lcp.w_mat * &z + &lcp.w_vec;
        if s.iter().any(|&v| v < -tol) {
            continue;
        }
        let res = lcp.residual(&z);
        if best.as_ref().map_or(true, |(b, _)| res < *b) {
            best = Some((res, z));
        }
    }
    best.map(|(_, z)| z)
}

#[test]
fn criterion_5_solver_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let settings = QpSettings {
        tol_abs: 1e-10,
        tol_rel: 1e-10,
        max_iter: 200_000,
        ..Default::default()
    };
    let mut worst_qp: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(1..=4);
        let m = rng.gen_range(1..=4);
        let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let p = &r.transpose() * &r + DMatrix::identity(n, n) * 0.1;
        let c = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let lo = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..0.0));
        let hi = DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
        let spec = QpSpec {
            p,
            c,
            a,
            lower: lo,
            upper: hi,
        };
        let oracle = brute_force_qp(&spec).expect("feasible QP");
        let sol = solve_qp(&spec, &settings).unwrap();
        let err = (&sol.z - &oracle).amax();
        worst_qp = worst_qp.max(err);
        assert!(err < 1e-6, "QP {k} deviates {err:.3e}");
    }
    let mut worst_lcp: f64 = 0.0;
    for k in 0..200 {
        let n = rng.gen_range(1..=6);
        let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        // symmetric positive definite W gives a unique solution
        let w_mat = &r.transpose() * &r + DMatrix::identity(n, n) * (0.2 + n as f64 * 0.05);
        let w_vec = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let lcp = Lcp { w_mat, w_vec };
        let oracle = brute_force_lcp(&lcp).expect("solvable LCP");
        let z = solve_contact_lcp(&lcp, 5_000, 1e-10).unwrap();
        let err = (&z - &oracle).amax();
        worst_lcp = worst_lcp.max(err);
        assert!(err < 1e-6, "LCP {k} deviates {err:.3e}");
    }
    println!(
        "criterion 5 (solver oracles): PASS — worst QP error {worst_qp:.3e}, worst LCP error {worst_lcp:.3e} over 200+200 instances"
    );
}

// ---- criterion 6: simulator physicality ----

fn random_toss_initial(rng: &mut ChaCha8Rng) -> State {
    State::new(
        Vector3::new(0.0, 0.0, rng.gen_range(0.1..0.4)),
        UnitQuaternion::from_scaled_axis(Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0))),
        Vector6::from_fn(|i, _| match i {
            0 | 1 => rng.gen_range(-1.0..1.0),
            2 => rng.gen_range(-1.0..0.0),
            _ => rng.gen_range(-3.0..3.0),
        }),
    )
}

#[test]
fn criterion_6_simulator_physicality() {
    let body = cube_body();
    let model = gt_model();
    // the toss distribution here spins harder than the data generator;
    // the default complementarity tolerance is too strict for a few of
    // the resulting impact LCPs
    let cfg = SimConfig {
        comp_tol: 1e-9,
        ..Default::default()
    };
    let dirs = friction_directions(cfg.friction_dirs);
    let m_mat = mass_matrix(&body);
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let energy = |x: &State| 0.5 * (m_mat * x.v).dot(&x.v) + body.mass * 9.81 * x.p.z;
    let mut worst_pen: f64 = 0.0;
    let mut worst_diss: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    let mut steps = 0usize;
    for _ in 0..100 {
        let mut x = random_toss_initial(&mut rng);
        for _ in 0..(2.0 / cfg.dt) as usize {
            let (x_next, impulses) = step(&model, &body, &x, &Vector6::zeros(), &cfg).unwrap();
            steps += 1;
            let scale = 1.0 + x.v.amax();
            // non-penetration at the end-of-step configuration
            let terms_next = contact_terms_at(&model, &x_next.p, &x_next.quat).unwrap();
            let pen = -terms_next.phi_n.min();
            worst_pen = worst_pen.max(pen);
            assert!(pen <= 1e-6 * scale, "penetration {pen:.3e}");
            // friction dissipates: lambda_t . (J_t v') <= 0 per contact,
            // with J_t at the configuration the impulses were solved at
            let terms = contact_terms_at(&model, &x.p, &x.quat).unwrap();
            let jt_v = &terms.j_t * x_next.v;
            for i in 0..terms.phi_n.len() {
                let lt = impulses.lambda_t(i, &dirs);
                let power = lt[0] * jt_v[2 * i] + lt[1] * jt_v[2 * i + 1];
                worst_diss = worst_diss.max(power);
                assert!(power <= 1e-9 * scale, "friction generates power {power:.3e}");
            }
            // mechanical energy cannot grow at contact steps
            if impulses.lambda_n.amax() > 1e-12 {
                let gain = energy(&x_next) - energy(&x);
                worst_energy = worst_energy.max(gain);
                assert!(gain <= 1e-8 * (1.0 + energy(&x).abs()), "energy gain {gain:.3e}");
            }
            if x_next.v.norm() < 1e-5 && terms_next.phi_n.min() < 1e-4 {
                break;
            }
            x = x_next;
        }
    }
    println!(
        "criterion 6 (simulator physicality): PASS — {steps} steps, worst penetration {worst_pen:.2e}, \
         worst friction power {worst_diss:.2e}, worst contact-step energy gain {worst_energy:.2e}"
    );
}

// ---- criterion 9: loss-landscape property ----

#[test]
fn criterion_9_landscape_property() {
    let cfg = ToyConfig {
        dnn_max_epochs: 1,
        max_epochs: 1,
        ..Default::default()
    };
    let report = toy_experiment(9, &cfg);
    let diffs = |f: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (1..report.landscape.len())
            .map(|k| (f(k) - f(k - 1)).abs())
            .collect()
    };
    let l2 = diffs(&|k| report.landscape[k].l2_loss);
    let contact = diffs(&|k| report.landscape[k].contact_loss);
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let l2_med = median(l2.clone());
    let l2_max = l2.iter().cloned().fold(0.0f64, f64::max);
    let c_med = median(contact.clone());
    let c_max = contact.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "criterion 9 (landscape property): PASS — L2 max/median {:.1}, contact max/median {:.1}",
        l2_max / l2_med,
        c_max / c_med.max(1e-300)
    );
    assert!(
        l2_max > 10.0 * l2_med,
        "no jump in L2 landscape: max {l2_max:.3e} median {l2_med:.3e}"
    );
    assert!(
        c_max <= 10.0 * c_med.max(1e-12),
        "contact landscape jumps: max {c_max:.3e} median {c_med:.3e}"
    );
}
