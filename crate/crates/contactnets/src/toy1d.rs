//! 1D point-mass toy system: inelastic impact with a flat ground, the
//! simplified one-parameter contact loss, ground-height learning, and the
//! loss-landscape comparison against a direct L2 rollout loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, MlpSpec};
use crate::training::{adamw_step, flatten_mlp, unflatten_mlp, AdamState};

const G: f64 = 9.81;

/// One observed step of the 1D system.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ToyTransition {
    pub z: f64,
    pub z_dot: f64,
    pub z_next: f64,
    pub z_dot_next: f64,
    pub dt: f64,
}

/// Inelastic point-mass step: free fall if the candidate stays above the
/// ground, otherwise land and stop.
pub fn toy_step(z_g: f64, z: f64, z_dot: f64, dt: f64) -> (f64, f64) {
    let z_free = z + z_dot * dt - 0.5 * G * dt * dt;
    if z_free >= z_g {
        (z_free, z_dot - G * dt)
    } else {
        (z_g, 0.0)
    }
}

/// Contact impulse implied by the data: velocity change minus gravity.
pub fn toy_impulse_from_data(t: &ToyTransition) -> f64 {
    (t.z_dot_next - t.z_dot) + G * t.dt
}

/// Optimal impulse of the simplified loss, `max(0, k / (1 + phi^2))`.
pub fn toy_lambda_star(z_g_hat: f64, t: &ToyTransition) -> f64 {
    let phi = t.z_next - z_g_hat;
    let k = toy_impulse_from_data(t);
    (k / (1.0 + phi * phi)).max(0.0)
}

/// Simplified contact loss: `min over lambda >= 0 of
/// phi(z')^2 lambda^2 + (k - lambda)^2`, evaluated in closed form.
pub fn toy_loss(z_g_hat: f64, t: &ToyTransition) -> f64 {
    let phi = t.z_next - z_g_hat;
    let k = toy_impulse_from_data(t);
    let lam = toy_lambda_star(z_g_hat, t);
    phi * phi * lam * lam + (k - lam) * (k - lam)
}

/// Derivative of `toy_loss` in the ground-height estimate.
pub fn toy_loss_grad(z_g_hat: f64, t: &ToyTransition) -> f64 {
    let phi = t.z_next - z_g_hat;
    let k = toy_impulse_from_data(t);
    if k <= 0.0 {
        return 0.0;
    }
    // loss = k^2 phi^2 / (1 + phi^2); d phi / d z_g_hat = -1
    let denom = 1.0 + phi * phi;
    -2.0 * k * k * phi / (denom * denom)
}

/// Direct rollout loss `|x' - f_{z_g_hat}(z, z_dot)|^2`; discontinuous in
/// the ground height.
pub fn toy_l2_loss(z_g_hat: f64, t: &ToyTransition) -> f64 {
    let (z_p, zd_p) = toy_step(z_g_hat, t.z, t.z_dot, t.dt);
    (t.z_next - z_p).powi(2) + (t.z_dot_next - zd_p).powi(2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_samples: usize,
    /// Gaussian noise std on the sampled velocity and both next-state
    /// entries ("variance 0.01").
    pub noise_std: f64,
    /// Sampling range of the initial velocity.
    pub zdot_range: (f64, f64),
    pub dt: f64,
    pub z0: f64,
    /// Landscape tables span `z_g_hat` in [-1, 1] with this step.
    pub grid_step: f64,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Hidden widths of the tanh baseline network.
    pub dnn_hidden: Vec<usize>,
    pub dnn_lr: f64,
    pub dnn_max_epochs: usize,
    pub dnn_patience: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_samples: 20,
            noise_std: 0.1,
            zdot_range: (0.0, 8.0),
            dt: 1.0,
            z0: 1.0,
            grid_step: 1e-3,
            lr: 1e-3,
            max_epochs: 20_000,
            patience: 2_000,
            dnn_hidden: vec![128, 128],
            dnn_lr: 1e-3,
            dnn_max_epochs: 5_000,
            dnn_patience: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub z_g_hat: f64,
    pub contact_loss: f64,
    pub l2_loss: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurvePoint {
    pub z_dot: f64,
    pub z_next: f64,
    pub z_dot_next: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyReport {
    pub learned_z_g: f64,
    pub train: Vec<ToyTransition>,
    pub val: Vec<ToyTransition>,
    /// Mean losses over the training set on the grid (Figure 1c data).
    pub landscape: Vec<LandscapePoint>,
    /// Learned-model next-state curve over the velocity range (Figure 1b).
    pub model_curve: Vec<CurvePoint>,
    /// Baseline network next-state curve.
    pub dnn_curve: Vec<CurvePoint>,
    pub dnn_val_loss: f64,
}

fn sample_transitions(cfg: &ToyConfig, rng: &mut ChaCha8Rng) -> Vec<ToyTransition> {
    let gauss = Normal::new(0.0, 1.0).unwrap();
    (0..cfg.n_samples)
        .map(|_| {
            let zd = rng.gen_range(cfg.zdot_range.0..cfg.zdot_range.1);
            let (zp, zdp) = toy_step(0.0, cfg.z0, zd, cfg.dt);
            let noise = |rng: &mut ChaCha8Rng| cfg.noise_std * gauss.sample(rng);
            ToyTransition {
                z: cfg.z0,
                z_dot: zd + noise(rng),
                z_next: zp + noise(rng),
                z_dot_next: zdp + noise(rng),
                dt: cfg.dt,
            }
        })
        .collect()
}

fn mean_toy_loss(z_g_hat: f64, data: &[ToyTransition]) -> f64 {
    data.iter().map(|t| toy_loss(z_g_hat, t)).sum::<f64>() / data.len() as f64
}

/// Learn the ground height by Adam on the mean contact loss with
/// validation early stopping.
pub fn fit_ground_height(
    train: &[ToyTransition],
    val: &[ToyTransition],
    init: f64,
    cfg: &ToyConfig,
) -> f64 {
    let mut z = [init];
    let mut adam = AdamState::new(1);
    let mut best = init;
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for _ in 0..cfg.max_epochs {
        let g =
            train.iter().map(|t| toy_loss_grad(z[0], t)).sum::<f64>() / train.len() as f64;
        adamw_step(&mut adam, &mut z, &[g], cfg.lr, 0.0).expect("finite gradient");
        let v = mean_toy_loss(z[0], val);
        if v < best_val {
            best_val = v;
            best = z[0];
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    best
}

/// Train the unstructured tanh baseline `z_dot -> x'` with L2 loss.
pub fn fit_toy_dnn(
    train: &[ToyTransition],
    val: &[ToyTransition],
    cfg: &ToyConfig,
    rng: &mut ChaCha8Rng,
) -> (MlpSpec, f64) {
    let mut widths = vec![1usize];
    widths.extend_from_slice(&cfg.dnn_hidden);
    widths.push(2);
    let mut mlp = MlpSpec::random(widths, Activation::Tanh, rng);
    let mut flat = flatten_mlp(&mlp);
    let mut adam = AdamState::new(flat.len());
    let eval = |mlp: &MlpSpec, set: &[ToyTransition]| -> f64 {
        set.iter()
            .map(|t| {
                let out = mlp.forward(&[t.z_dot]).expect("net shape");
                (out[0] - t.z_next).powi(2) + (out[1] - t.z_dot_next).powi(2)
            })
            .sum::<f64>()
            / set.len() as f64
    };
    let mut best_flat = flat.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    for _ in 0..cfg.dnn_max_epochs {
        let mut grad = vec![0.0; flat.len()];
        for t in train {
            let out = mlp.forward(&[t.z_dot]).expect("net shape");
            let og = [2.0 * (out[0] - t.z_next), 2.0 * (out[1] - t.z_dot_next)];
            let g = mlp.backprop(&[t.z_dot], &og).expect("net shape");
            let mut k = 0;
            for l in 0..g.d_weights.len() {
                for v in &g.d_weights[l] {
                    grad[k] += v / train.len() as f64;
                    k += 1;
                }
                for v in &g.d_biases[l] {
                    grad[k] += v / train.len() as f64;
                    k += 1;
                }
            }
        }
        adamw_step(&mut adam, &mut flat, &grad, cfg.dnn_lr, 0.0).expect("finite gradient");
        mlp = unflatten_mlp(&mlp, &flat);
        let v = eval(&mlp, val);
        if v < best_val {
            best_val = v;
            best_flat = flat.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.dnn_patience {
                break;
            }
        }
    }
    let best = unflatten_mlp(&mlp, &best_flat);
    (best, best_val)
}

/// Run the full toy experiment: sample noisy data, fit the ground height
/// and the baseline network, and tabulate the two loss landscapes.
pub fn toy_experiment(seed: u64, cfg: &ToyConfig) -> ToyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = sample_transitions(cfg, &mut rng);
    let val = sample_transitions(cfg, &mut rng);

    let init = rng.gen_range(-1.0..1.0);
    let learned_z_g = fit_ground_height(&train, &val, init, cfg);
    let (dnn, dnn_val_loss) = fit_toy_dnn(&train, &val, cfg, &mut rng);

    let mut landscape = Vec::new();
    let steps = (2.0 / cfg.grid_step).round() as usize;
    for k in 0..=steps {
        let z_g_hat = -1.0 + k as f64 * cfg.grid_step;
        let l2 = train.iter().map(|t| toy_l2_loss(z_g_hat, t)).sum::<f64>()
            / train.len() as f64;
        landscape.push(LandscapePoint {
            z_g_hat,
            contact_loss: mean_toy_loss(z_g_hat, &train),
            l2_loss: l2,
        });
    }

    let n_curve = 400;
    let (lo, hi) = cfg.zdot_range;
    let mut model_curve = Vec::with_capacity(n_curve + 1);
    let mut dnn_curve = Vec::with_capacity(n_curve + 1);
    for k in 0..=n_curve {
        let zd = lo + (hi - lo) * k as f64 / n_curve as f64;
        let (zp, zdp) = toy_step(learned_z_g, cfg.z0, zd, cfg.dt);
        model_curve.push(CurvePoint {
            z_dot: zd,
            z_next: zp,
            z_dot_next: zdp,
        });
        let out = dnn.forward(&[zd]).expect("net shape");
        dnn_curve.push(CurvePoint {
            z_dot: zd,
            z_next: out[0],
            z_dot_next: out[1],
        });
    }

    ToyReport {
        learned_z_g,
        train,
        val,
        landscape,
        model_curve,
        dnn_curve,
        dnn_val_loss,
    }
}

/// Landscape table as CSV (Figure 1c data).
pub fn landscape_csv(report: &ToyReport) -> String {
    let mut out = String::from("z_g_hat,contact_loss,l2_loss\n");
    for p in &report.landscape {
        out.push_str(&format!(
            "{:.6},{:.10},{:.10}\n",
            p.z_g_hat, p.contact_loss, p.l2_loss
        ));
    }
    out
}

/// Prediction curves as CSV (Figure 1b data).
pub fn curves_csv(report: &ToyReport) -> String {
    let mut out =
        String::from("z_dot,model_z_next,model_z_dot_next,dnn_z_next,dnn_z_dot_next\n");
    for (m, d) in report.model_curve.iter().zip(&report.dnn_curve) {
        out.push_str(&format!(
            "{:.6},{:.10},{:.10},{:.10},{:.10}\n",
            m.z_dot, m.z_next, m.z_dot_next, d.z_next, d.z_dot_next
        ));
    }
    out
}
