//! Dataset management, synthetic toss generation, AdamW, ContactNets
//! training with validation early stopping, and the end-to-end baseline.

use nalgebra::{Rotation3, UnitQuaternion, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Activation, MlpSpec};
use crate::dynamics::{
    contact_impulse_from_data, integrate_configuration, mass_matrix_inverse, smooth_impulse,
    RigidBodyParams, State, Trajectory, Transition,
};
use crate::geometry::ContactModel;
use crate::loss::{loss, loss_gradient_warm, loss_warm, LossError, LossWeights, QpWarmStart};
use crate::qp::QpSettings;
use crate::sim::{step, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {0} trajectories, got {1}")]
    TooFewTrajectories(usize, usize),
    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error("toss generation exhausted retries: {0}")]
    GenerationFailed(#[from] SimError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Reference toss count for patience scaling: smaller datasets get
    /// patience multiplied by ref/n (at least 1).
    pub patience_ref_tosses: usize,
    /// Learning rate decays geometrically so the final epoch runs at
    /// `lr * final_lr_frac`. 1.0 keeps the rate constant.
    pub final_lr_frac: f64,
}

impl OptimConfig {
    fn lr_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.max_epochs.max(1) as f64;
        self.lr * self.final_lr_frac.powf(frac)
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 64,
            patience: 12,
            max_epochs: 500,
            seed: 0,
            patience_ref_tosses: 64,
            final_lr_frac: 1.0,
        }
    }
}

/// Index assignment of the whole-trajectory 50/30/20 split.
pub fn split_indices(
    n: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>), TrainError> {
    if n < 10 {
        return Err(TrainError::TooFewTrajectories(10, n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = (0.5 * n as f64).round() as usize;
    let n_val = (0.3 * n as f64).round() as usize;
    Ok((
        order[..n_train].to_vec(),
        order[n_train..n_train + n_val].to_vec(),
        order[n_train + n_val..].to_vec(),
    ))
}

/// Whole-trajectory 50/30/20 split.
pub fn split_dataset(
    trajectories: &[Trajectory],
    seed: u64,
) -> Result<(Vec<Trajectory>, Vec<Trajectory>, Vec<Trajectory>), TrainError> {
    let (tr, va, te) = split_indices(trajectories.len(), seed)?;
    let take = |idx: Vec<usize>| {
        idx.into_iter()
            .map(|k| trajectories[k].clone())
            .collect::<Vec<_>>()
    };
    Ok((take(tr), take(va), take(te)))
}

/// Perturb geometry and surface orientation with Gaussian noise whose
/// standard deviation is `frac` times the magnitude of each element.
/// Offset and friction are left at their initial guesses.
pub fn perturb_model<R: Rng>(model: &ContactModel, frac: f64, rng: &mut R) -> ContactModel {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut out = model.clone();
    let poly = match &mut out {
        ContactModel::Polytope(p) => p,
        ContactModel::Deep(d) => &mut d.poly,
    };
    for v in poly.vertices.iter_mut() {
        *v += Vector3::from_fn(|i, _| frac * v[i].abs() * gauss.sample(rng));
    }
    poly.normal += Vector3::from_fn(|i, _| frac * poly.normal[i].abs() * gauss.sample(rng));
    out
}

/// Rotate an entire trajectory about the world z axis: positions,
/// orientations, and world-frame linear velocities turn; body-frame
/// angular velocity is unchanged.
pub fn augment_z_rotation(trajectory: &Trajectory, angle: f64) -> Trajectory {
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
    let qz = UnitQuaternion::from_rotation_matrix(&rz);
    Trajectory {
        dt: trajectory.dt,
        states: trajectory
            .states
            .iter()
            .map(|s| {
                let mut v = s.v;
                let lin = rz * Vector3::new(v[0], v[1], v[2]);
                v[0] = lin.x;
                v[1] = lin.y;
                v[2] = lin.z;
                State::new(rz * s.p, qz * s.quat, v)
            })
            .collect(),
    }
}

fn random_toss_state<R: Rng>(rng: &mut R) -> State {
    let p = Vector3::new(0.0, 0.0, rng.gen_range(0.1..0.4));
    // uniform orientation from a normalized Gaussian quaternion
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let quat = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        gauss.sample(rng),
        gauss.sample(rng),
        gauss.sample(rng),
        gauss.sample(rng),
    ));
    let v = Vector6::from_fn(|i, _| match i {
        0 | 1 => rng.gen_range(-1.0..1.0),
        2 => rng.gen_range(-1.0..0.0),
        _ => rng.gen_range(-3.0..3.0),
    });
    State::new(p, quat, v)
}

/// Simulate `n` random tosses under the ground-truth model, each run until
/// a quarter second past rest, then perturb recorded states with Gaussian
/// noise.
pub fn generate_synthetic_tosses(
    gt_model: &ContactModel,
    body: &RigidBodyParams,
    n: usize,
    state_noise_std: f64,
    seed: u64,
    cfg: &SimConfig,
) -> Result<Vec<Trajectory>, TrainError> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(n);
    let rest_tail = (0.25 / cfg.dt).ceil() as usize;
    let max_steps = (4.0 / cfg.dt).ceil() as usize;
    'toss: for _ in 0..n {
        let mut last_err = None;
        for _retry in 0..20 {
            let x0 = random_toss_state(&mut rng);
            let mut states = vec![x0];
            let mut rest_count = 0usize;
            let mut failed = false;
            while states.len() < max_steps {
                let x = *states.last().unwrap();
                match step(gt_model, body, &x, &Vector6::zeros(), cfg) {
                    Ok((x_next, _)) => {
                        states.push(x_next);
                        if x_next.v.norm() < 1e-4 {
                            rest_count += 1;
                            if rest_count >= rest_tail {
                                break;
                            }
                        } else {
                            rest_count = 0;
                        }
                    }
                    Err(e) => {
                        last_err = Some(e);
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                continue;
            }
            let noisy = states
                .iter()
                .map(|s| {
                    if state_noise_std == 0.0 {
                        return *s;
                    }
                    let p = s.p + Vector3::from_fn(|_, _| state_noise_std * gauss.sample(&mut rng));
                    let q = s.quat.quaternion()
                        + nalgebra::Quaternion::new(
                            state_noise_std * gauss.sample(&mut rng),
                            state_noise_std * gauss.sample(&mut rng),
                            state_noise_std * gauss.sample(&mut rng),
                            state_noise_std * gauss.sample(&mut rng),
                        );
                    let v = Vector6::from_fn(|i, _| {
                        s.v[i] + state_noise_std * gauss.sample(&mut rng)
                    });
                    State::new(p, UnitQuaternion::from_quaternion(q), v)
                })
                .collect();
            out.push(Trajectory {
                dt: cfg.dt,
                states: noisy,
            });
            continue 'toss;
        }
        return Err(TrainError::GenerationFailed(last_err.unwrap()));
    }
    Ok(out)
}

/// AdamW moment estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One decoupled-weight-decay Adam update in place. Non-finite gradients
/// leave the parameters unchanged and report an error.
pub fn adamw_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient(state.t + 1));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for k in 0..params.len() {
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * grads[k];
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * grads[k] * grads[k];
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] *= 1.0 - lr * weight_decay;
        params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Per-epoch record of the training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_l1: f64,
    pub train_l2: f64,
    pub train_l3: f64,
    pub train_l4: f64,
    pub train_reg: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub diverged: bool,
}

fn trajectory_transitions(trajs: &[Trajectory]) -> Vec<Transition> {
    trajs.iter().flat_map(|t| t.transitions()).collect()
}

fn mean_loss(
    model: &ContactModel,
    body: &RigidBodyParams,
    transitions: &[Transition],
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
) -> Result<f64, LossError> {
    let totals: Result<Vec<f64>, LossError> = transitions
        .par_iter()
        .map(|t| loss(model, body, t, weights, d, settings).map(|b| b.total))
        .collect();
    let totals = totals?;
    Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
}

/// `mean_loss` with a per-transition warm-start cache reused across epochs.
fn mean_loss_cached(
    model: &ContactModel,
    body: &RigidBodyParams,
    transitions: &[Transition],
    weights: &LossWeights,
    d: usize,
    settings: &QpSettings,
    cache: &mut [Option<QpWarmStart>],
) -> Result<f64, LossError> {
    let results: Result<Vec<(f64, QpWarmStart)>, LossError> = transitions
        .par_iter()
        .zip(cache.par_iter())
        .map(|(t, warm)| {
            loss_warm(model, body, t, weights, d, settings, warm.as_ref())
                .map(|(b, start)| (b.total, start))
        })
        .collect();
    let results = results?;
    let mut sum = 0.0;
    for (k, (total, start)) in results.into_iter().enumerate() {
        sum += total;
        cache[k] = Some(start);
    }
    Ok(sum / transitions.len().max(1) as f64)
}

/// Minimize the mean ContactNets loss over the training transitions with
/// AdamW, restoring the best-validation parameters after `patience`
/// stagnant epochs (patience scaled up for small datasets).
pub fn train(
    init: &ContactModel,
    body: &RigidBodyParams,
    train_trajs: &[Trajectory],
    val_trajs: &[Trajectory],
    weights: &LossWeights,
    d: usize,
    cfg: &OptimConfig,
) -> Result<(ContactModel, TrainHistory), TrainError> {
    let settings = QpSettings::default();
    let train_transitions = trajectory_transitions(train_trajs);
    let val_transitions = trajectory_transitions(val_trajs);
    assert!(!train_transitions.is_empty() && !val_transitions.is_empty());

    let scale = (cfg.patience_ref_tosses as f64 / train_trajs.len().max(1) as f64).max(1.0);
    let patience = ((cfg.patience as f64) * scale).round() as usize;

    let mut flat = init.flatten();
    let mut model = init.clone();
    let mut adam = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        diverged: false,
    };
    let mut warm_train: Vec<Option<QpWarmStart>> = vec![None; train_transitions.len()];
    let mut warm_val: Vec<Option<QpWarmStart>> = vec![None; val_transitions.len()];

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_transitions.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6]; // total, l1..l4, reg
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let per: Result<Vec<_>, LossError> = batch
                .par_iter()
                .map(|&k| {
                    loss_gradient_warm(
                        &model,
                        body,
                        &train_transitions[k],
                        weights,
                        d,
                        &settings,
                        warm_train[k].as_ref(),
                    )
                    .map(|r| (k, r))
                })
                .collect();
            let per = per?;
            let mut grad = vec![0.0; flat.len()];
            for (k, (_, _, start)) in &per {
                warm_train[*k] = Some(start.clone());
            }
            for (_, (g, bd, _)) in &per {
                for k in 0..flat.len() {
                    grad[k] += g[k] / batch.len() as f64;
                }
                sums[0] += bd.total;
                sums[1] += bd.l1;
                sums[2] += bd.l2;
                sums[3] += bd.l3;
                sums[4] += bd.l4;
                sums[5] += weights.w_reg * (bd.reg1 + bd.reg2);
                seen += 1;
            }
            if !sums[0].is_finite() {
                history.diverged = true;
                break 'epochs;
            }
            adamw_step(&mut adam, &mut flat, &grad, cfg.lr_at(epoch), cfg.weight_decay)?;
            model = model.with_flat(&flat);
        }
        let val_loss =
            mean_loss_cached(&model, body, &val_transitions, weights, d, &settings, &mut warm_val)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: sums[0] / seen as f64,
            train_l1: sums[1] / seen as f64,
            train_l2: sums[2] / seen as f64,
            train_l3: sums[3] / seen as f64,
            train_l4: sums[4] / seen as f64,
            train_reg: sums[5] / seen as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_flat = flat.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    history.best_val_loss = best_val;
    Ok((init.with_flat(&best_flat), history))
}

/// End-to-end baseline: a plain MLP mapping the normalized state directly
/// to the net contact impulse (paper Eq. 21).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct E2EBaselineParams {
    pub mlp: MlpSpec,
    /// Per-dimension input normalization from the training split.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

pub fn state_features(x: &State) -> Vec<f64> {
    let q = x.quat.quaternion();
    vec![
        x.p.x, x.p.y, x.p.z, q.w, q.i, q.j, q.k, x.v[0], x.v[1], x.v[2], x.v[3], x.v[4], x.v[5],
    ]
}

impl E2EBaselineParams {
    pub fn predict_impulse(&self, x: &State) -> Vector6<f64> {
        let raw = state_features(x);
        let normed: Vec<f64> = raw
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - self.input_mean[k]) / self.input_std[k])
            .collect();
        let out = self.mlp.forward(&normed).expect("baseline net shape");
        Vector6::from_column_slice(&out)
    }
}

/// One predicted step of the baseline: impulse from the net, velocity via
/// Eq. 1, configuration via Eq. 2.
pub fn baseline_step(
    params: &E2EBaselineParams,
    body: &RigidBodyParams,
    x: &State,
    u: &Vector6<f64>,
    dt: f64,
) -> State {
    let k_c = params.predict_impulse(x);
    let k_s = smooth_impulse(body, x, u, dt);
    let v_new = x.v + mass_matrix_inverse(body) * (k_s + k_c);
    let (p, q) = integrate_configuration(&x.p, &x.quat, &v_new, dt);
    State::new(p, q, v_new)
}

pub fn baseline_rollout(
    params: &E2EBaselineParams,
    body: &RigidBodyParams,
    x0: &State,
    n: usize,
    dt: f64,
) -> Trajectory {
    let mut states = Vec::with_capacity(n);
    states.push(*x0);
    for _ in 1..n {
        let x = *states.last().unwrap();
        states.push(baseline_step(params, body, &x, &Vector6::zeros(), dt));
    }
    Trajectory { dt, states }
}

pub fn flatten_mlp(spec: &MlpSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.param_count());
    for l in 0..spec.weights.len() {
        out.extend_from_slice(&spec.weights[l]);
        out.extend_from_slice(&spec.biases[l]);
    }
    out
}

pub fn unflatten_mlp(spec: &MlpSpec, flat: &[f64]) -> MlpSpec {
    let mut out = spec.clone();
    let mut k = 0;
    for l in 0..out.weights.len() {
        let nw = out.weights[l].len();
        out.weights[l].copy_from_slice(&flat[k..k + nw]);
        k += nw;
        let nb = out.biases[l].len();
        out.biases[l].copy_from_slice(&flat[k..k + nb]);
        k += nb;
    }
    assert_eq!(k, flat.len());
    out
}

/// Train the end-to-end baseline on single-step impulse regression with L2
/// loss and the same early-stopping rule as `train`.
pub fn train_e2e_baseline(
    body: &RigidBodyParams,
    train_trajs: &[Trajectory],
    val_trajs: &[Trajectory],
    widths: &[usize],
    cfg: &OptimConfig,
) -> Result<(E2EBaselineParams, TrainHistory), TrainError> {
    let train_transitions = trajectory_transitions(train_trajs);
    let val_transitions = trajectory_transitions(val_trajs);
    assert!(!train_transitions.is_empty() && !val_transitions.is_empty());
    let dim = state_features(&train_transitions[0].x).len();

    let mut mean = vec![0.0; dim];
    let mut std = vec![0.0; dim];
    for t in &train_transitions {
        for (k, v) in state_features(&t.x).iter().enumerate() {
            mean[k] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= train_transitions.len() as f64;
    }
    for t in &train_transitions {
        for (k, v) in state_features(&t.x).iter().enumerate() {
            std[k] += (v - mean[k]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_transitions.len() as f64).sqrt().max(1e-8);
    }

    let features = |ts: &[Transition]| -> Vec<(Vec<f64>, Vector6<f64>)> {
        ts.iter()
            .map(|t| {
                let raw = state_features(&t.x);
                let normed = raw
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (v - mean[k]) / std[k])
                    .collect();
                (normed, contact_impulse_from_data(body, t))
            })
            .collect()
    };
    let train_set = features(&train_transitions);
    let val_set = features(&val_transitions);

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6261_7365);
    let mut mlp = MlpSpec::random(widths.to_vec(), Activation::Relu, &mut init_rng);
    let mut flat = flatten_mlp(&mlp);
    let mut adam = AdamState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let eval = |mlp: &MlpSpec, set: &[(Vec<f64>, Vector6<f64>)]| -> f64 {
        set.par_iter()
            .map(|(x, y)| {
                let out = mlp.forward(x).expect("net shape");
                (0..6).map(|k| (out[k] - y[k]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / set.len() as f64
    };

    let scale = (cfg.patience_ref_tosses as f64 / train_trajs.len().max(1) as f64).max(1.0);
    let patience = ((cfg.patience as f64) * scale).round() as usize;
    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stale = 0usize;
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        diverged: false,
    };

    'epochs: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let grads: Vec<(Vec<f64>, f64)> = batch
                .par_iter()
                .map(|&k| {
                    let (x, y) = &train_set[k];
                    let out = mlp.forward(x).expect("net shape");
                    let l: f64 = (0..6).map(|j| (out[j] - y[j]).powi(2)).sum();
                    let out_grad: Vec<f64> = (0..6).map(|j| 2.0 * (out[j] - y[j])).collect();
                    let g = mlp.backprop(x, &out_grad).expect("net shape");
                    let mut gflat = Vec::with_capacity(flat.len());
                    for l in 0..g.d_weights.len() {
                        gflat.extend_from_slice(&g.d_weights[l]);
                        gflat.extend_from_slice(&g.d_biases[l]);
                    }
                    (gflat, l)
                })
                .collect();
            let mut grad = vec![0.0; flat.len()];
            for (g, l) in &grads {
                for k in 0..flat.len() {
                    grad[k] += g[k] / batch.len() as f64;
                }
                train_sum += l;
                seen += 1;
            }
            if !train_sum.is_finite() {
                history.diverged = true;
                break 'epochs;
            }
            adamw_step(&mut adam, &mut flat, &grad, cfg.lr_at(epoch), cfg.weight_decay)?;
            mlp = unflatten_mlp(&mlp, &flat);
        }
        let val_loss = eval(&mlp, &val_set);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: train_sum / seen as f64,
            train_l1: 0.0,
            train_l2: 0.0,
            train_l3: 0.0,
            train_l4: 0.0,
            train_reg: 0.0,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_flat = flat.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                break;
            }
        }
    }
    history.best_epoch = best_epoch;
    history.best_val_loss = best_val;
    Ok((
        E2EBaselineParams {
            mlp: unflatten_mlp(&mlp, &best_flat),
            input_mean: mean,
            input_std: std,
        },
        history,
    ))
}
