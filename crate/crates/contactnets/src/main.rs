//! Command-line front-end: dataset generation, training, evaluation, and
//! the 1D toy experiment. Every run writes a manifest.json with the fully
//! resolved configuration so outputs can be reproduced from it alone.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use contactnets::autodiff::{Activation, MlpSpec};
use contactnets::dynamics::{RigidBodyParams, Trajectory};
use contactnets::geometry::{ContactModel, DeepParams};
use contactnets::io::{
    load_checkpoint, load_model, load_trajectory, save_checkpoint, save_model, save_trajectory,
    Checkpoint, ModelFile,
};
use contactnets::loss::LossWeights;
use contactnets::metrics::{log_normal_summary, penetration_metric, rollout_errors};
use contactnets::sim::{rollout, SimConfig};
use contactnets::toy1d::{curves_csv, landscape_csv, toy_experiment, ToyConfig};
use contactnets::training::{
    baseline_rollout, generate_synthetic_tosses, perturb_model, split_indices, train,
    train_e2e_baseline, OptimConfig,
};

#[derive(Parser)]
#[command(name = "contactnets", version, about = "Learning rigid-body contact dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate synthetic tosses under a ground-truth model and write a
    /// dataset with a train/val/test split.
    Generate(GenerateArgs),
    /// Train a contact model or the end-to-end baseline on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint with rollout metrics on a dataset split.
    Eval(EvalArgs),
    /// Run the 1D toy experiment and write its tables.
    Toy1d(ToyArgs),
}

#[derive(clap::Args, Serialize)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of tosses.
    #[arg(long, default_value_t = 64)]
    tosses: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian state noise standard deviation.
    #[arg(long, default_value_t = 1e-3)]
    noise: f64,
    /// Step length in seconds.
    #[arg(long, default_value_t = 1.0 / 148.0)]
    dt: f64,
    /// Polyhedral friction directions.
    #[arg(long, default_value_t = 8)]
    friction_dirs: usize,
    /// Block mass (kg).
    #[arg(long, default_value_t = 0.37)]
    mass: f64,
    /// Block width (m).
    #[arg(long, default_value_t = 0.1)]
    width: f64,
    /// Lumped friction coefficient of the ground-truth model.
    #[arg(long, default_value_t = 0.15)]
    mu: f64,
    /// Ground-truth model file; defaults to the built-in cube.
    #[arg(long)]
    model_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum ModelKind {
    Polytope,
    Deep,
    E2e,
}

#[derive(clap::Args, Serialize)]
struct TrainArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "polytope")]
    model: ModelKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learning rate; defaults to 5e-4 for contact models, 3e-5 for e2e.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 12)]
    patience: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 8)]
    friction_dirs: usize,
    /// Loss-weights JSON file; defaults to all-ones with 0.3 regularizers.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Relative perturbation of the initial geometry guess.
    #[arg(long, default_value_t = 0.4)]
    init_perturbation: f64,
    /// Restrict training to the first N training tosses.
    #[arg(long)]
    max_train_tosses: Option<usize>,
}

#[derive(clap::Args, Serialize)]
struct EvalArgs {
    /// Dataset directory produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Split to evaluate: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write the predicted rollout trajectories.
    #[arg(long, default_value_t = false)]
    dump_rollouts: bool,
}

#[derive(clap::Args, Serialize)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds to run, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    /// Sampled initial-velocity range.
    #[arg(long, default_value_t = 0.0)]
    zdot_min: f64,
    #[arg(long, default_value_t = 8.0)]
    zdot_max: f64,
}

/// Dataset description written by `generate` and consumed by the other
/// commands.
#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    body: RigidBodyParams,
    dt: f64,
    friction_dirs: usize,
    noise: f64,
    seed: u64,
    gt_model: String,
    tosses: Vec<String>,
    split_train: Vec<usize>,
    split_val: Vec<usize>,
    split_test: Vec<usize>,
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Trajectory>)> {
    let text = fs::read_to_string(dir.join("dataset.json"))
        .with_context(|| format!("reading dataset manifest in {}", dir.display()))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let mut tosses = Vec::with_capacity(manifest.tosses.len());
    for name in &manifest.tosses {
        tosses.push(load_trajectory(&dir.join(name))?);
    }
    Ok((manifest, tosses))
}

fn select<'a>(trajs: &'a [Trajectory], idx: &[usize]) -> Vec<Trajectory> {
    idx.iter().map(|&k| trajs[k].clone()).collect()
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    if args.tosses < 10 {
        bail!("need at least 10 tosses for a 50/30/20 split, got {}", args.tosses);
    }
    fs::create_dir_all(&args.out)?;
    let body = RigidBodyParams::cube(args.mass, args.width, Vector3::new(0.0, 0.0, -9.81));
    let gt_model = match &args.model_file {
        Some(path) => load_model(path)?.to_contact_model()?,
        None => ContactModel::cube_polytope(args.width / 2.0, args.mu),
    };
    let sim_cfg = SimConfig {
        dt: args.dt,
        friction_dirs: args.friction_dirs,
        ..Default::default()
    };
    let tosses = generate_synthetic_tosses(
        &gt_model, &body, args.tosses, args.noise, args.seed, &sim_cfg,
    )?;
    let mut names = Vec::with_capacity(tosses.len());
    for (k, t) in tosses.iter().enumerate() {
        let name = format!("toss_{k:04}.json");
        save_trajectory(&args.out.join(&name), t)?;
        names.push(name);
    }
    // whole-trajectory split recorded as indices so downstream commands
    // agree on it
    let n = tosses.len();
    let (tr, va, te) = split_indices(n, args.seed)?;
    save_model(
        &args.out.join("gt_model.json"),
        &ModelFile::from_contact_model(&gt_model),
    )?;
    let manifest = DatasetManifest {
        body,
        dt: args.dt,
        friction_dirs: args.friction_dirs,
        noise: args.noise,
        seed: args.seed,
        gt_model: "gt_model.json".into(),
        tosses: names,
        split_train: tr,
        split_val: va,
        split_test: te,
    };
    fs::write(
        args.out.join("dataset.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    write_manifest(&args.out, "generate", args)?;
    println!(
        "wrote {} tosses to {} (train {} / val {} / test {})",
        n,
        args.out.display(),
        manifest.split_train.len(),
        manifest.split_val.len(),
        manifest.split_test.len()
    );
    Ok(())
}

fn initial_contact_model(args: &TrainArgs, manifest: &DatasetManifest) -> Result<ContactModel> {
    let gt_file = load_model(&args.data.join(&manifest.gt_model))?;
    let gt = gt_file.to_contact_model()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0x696e_6974);
    let poly_init = perturb_model(&gt, args.init_perturbation, &mut rng);
    Ok(match args.model {
        ModelKind::Polytope => poly_init,
        ModelKind::Deep => {
            let m = poly_init.num_contacts();
            ContactModel::Deep(DeepParams {
                poly: poly_init.poly().clone(),
                net_n: MlpSpec::random(vec![7, 256, 256, m], Activation::Tanh, &mut rng),
                net_t: MlpSpec::random(vec![7, 256, 256, 2 * m], Activation::Tanh, &mut rng),
                net_scale: 0.01,
            })
        }
        ModelKind::E2e => unreachable!("e2e handled separately"),
    })
}

fn history_csv(history: &contactnets::training::TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,train_l1,train_l2,train_l3,train_l4,train_reg,val_loss\n");
    for e in &history.epochs {
        out.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}\n",
            e.epoch, e.train_loss, e.train_l1, e.train_l2, e.train_l3, e.train_l4, e.train_reg,
            e.val_loss
        ));
    }
    out
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let (manifest, tosses) = load_dataset(&args.data)?;
    let mut train_set = select(&tosses, &manifest.split_train);
    if let Some(cap) = args.max_train_tosses {
        train_set.truncate(cap.max(1));
    }
    let val_set = select(&tosses, &manifest.split_val);
    let lr = args.lr.unwrap_or(match args.model {
        ModelKind::E2e => 3e-5,
        _ => 5e-4,
    });
    let weight_decay = match args.model {
        ModelKind::E2e => 1e-3,
        _ => 0.0,
    };
    let optim = OptimConfig {
        lr,
        weight_decay,
        batch_size: args.batch_size,
        patience: args.patience,
        max_epochs: args.epochs,
        seed: args.seed,
        ..Default::default()
    };
    let weights = match &args.weights_file {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => LossWeights::default(),
    };
    let (model_file, history) = match args.model {
        ModelKind::E2e => {
            let (params, history) = train_e2e_baseline(
                &manifest.body,
                &train_set,
                &val_set,
                &[13, 256, 256, 256, 256, 6],
                &optim,
            )?;
            (ModelFile::from_baseline(&params), history)
        }
        _ => {
            let init = initial_contact_model(args, &manifest)?;
            let (model, history) = train(
                &init,
                &manifest.body,
                &train_set,
                &val_set,
                &weights,
                args.friction_dirs,
                &optim,
            )?;
            (ModelFile::from_contact_model(&model), history)
        }
    };
    let ckpt = Checkpoint {
        model: model_file,
        body: manifest.body,
        optim,
        loss_weights: Some(weights),
        friction_dirs: args.friction_dirs,
        dt: manifest.dt,
        seed: args.seed,
        history: history.clone(),
    };
    save_checkpoint(&args.out.join("checkpoint.json"), &ckpt)?;
    fs::write(args.out.join("history.csv"), history_csv(&history))?;
    write_manifest(&args.out, "train", args)?;
    println!(
        "trained {} model: best val loss {:.6e} at epoch {} ({} epochs run)",
        match args.model {
            ModelKind::Polytope => "polytope",
            ModelKind::Deep => "deep",
            ModelKind::E2e => "e2e",
        },
        ckpt.history.best_val_loss,
        ckpt.history.best_epoch,
        ckpt.history.epochs.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct TossReport {
    toss: usize,
    e_pos: f64,
    e_rot: f64,
    e_pen: f64,
    e_pen_percent: f64,
    /// Steps actually compared; shorter than the toss when the prediction
    /// left the finite envelope.
    steps_compared: usize,
    diverged: bool,
}

/// Length of the leading portion of a trajectory with finite, sane states.
fn finite_prefix(t: &Trajectory) -> usize {
    for (k, s) in t.states.iter().enumerate() {
        let q = s.quat.quaternion().coords;
        let ok = s.p.iter().all(|v| v.is_finite())
            && q.iter().all(|v| v.is_finite())
            && s.v.iter().all(|v| v.is_finite())
            && s.p.norm() < 1e6;
        if !ok {
            return k;
        }
    }
    t.states.len()
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let (manifest, tosses) = load_dataset(&args.data)?;
    let split = match args.split.as_str() {
        "train" => &manifest.split_train,
        "val" => &manifest.split_val,
        "test" => &manifest.split_test,
        other => bail!("unknown split {other:?}; expected train, val, or test"),
    };
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let gt = load_model(&args.data.join(&manifest.gt_model))?.to_contact_model()?;
    let gt_poly = gt.poly();
    // block width from the true geometry for the percent metric
    let width = 2.0
        * gt_poly
            .vertices
            .iter()
            .map(|v| v.amax())
            .fold(0.0f64, f64::max);
    let sim_cfg = SimConfig {
        dt: manifest.dt,
        friction_dirs: ckpt.friction_dirs,
        ..Default::default()
    };
    let contact_model = match &ckpt.model {
        ModelFile::E2e { .. } => None,
        other => Some(other.to_contact_model()?),
    };
    let baseline = match &ckpt.model {
        ModelFile::E2e { .. } => Some(ckpt.model.to_baseline()?),
        _ => None,
    };

    if args.dump_rollouts {
        fs::create_dir_all(args.out.join("rollouts"))?;
    }
    let mut reports = Vec::new();
    for &k in split {
        let truth = &tosses[k];
        let n = truth.states.len();
        let predicted = match (&contact_model, &baseline) {
            (Some(model), _) => rollout(model, &ckpt.body, &truth.states[0], n, &sim_cfg)
                .with_context(|| format!("rollout of toss {k}"))?,
            (None, Some(params)) => {
                baseline_rollout(params, &ckpt.body, &truth.states[0], n, manifest.dt)
            }
            _ => unreachable!(),
        };
        // a degenerate model can blow up mid-rollout; score the finite
        // prefix and flag the toss instead of failing the whole report
        let n_ok = finite_prefix(&predicted).max(1);
        let diverged = n_ok < n;
        let clip = |t: &Trajectory| Trajectory {
            dt: t.dt,
            states: t.states[..n_ok].to_vec(),
        };
        let predicted = clip(&predicted);
        let truth_clip = clip(truth);
        let (e_pos, e_rot) = rollout_errors(&predicted, &truth_clip)?;
        let e_pen = penetration_metric(
            &predicted,
            &gt_poly.vertices,
            &gt_poly.normal,
            gt_poly.offset,
        );
        if args.dump_rollouts {
            save_trajectory(
                &args.out.join(format!("rollouts/toss_{k:04}.json")),
                &predicted,
            )?;
        }
        reports.push(TossReport {
            toss: k,
            e_pos,
            e_rot,
            e_pen,
            e_pen_percent: 100.0 * e_pen / width,
            steps_compared: n_ok,
            diverged,
        });
    }
    if reports.is_empty() {
        bail!("split {:?} is empty", args.split);
    }

    let collect = |f: &dyn Fn(&TossReport) -> f64| -> Vec<f64> { reports.iter().map(f).collect() };
    // floor keeps zero-valued samples inside the log-normal aggregate
    let floor = 1e-12;
    let agg = json!({
        "e_pos": log_normal_summary(&collect(&|r| r.e_pos), floor),
        "e_rot": log_normal_summary(&collect(&|r| r.e_rot), floor),
        "e_pen": log_normal_summary(&collect(&|r| r.e_pen), floor),
        "e_pen_percent": log_normal_summary(&collect(&|r| r.e_pen_percent), floor),
        "width": width,
        "tosses": reports.len(),
    });
    let mut csv = String::from("toss,e_pos,e_rot,e_pen,e_pen_percent,steps_compared,diverged\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{},{}\n",
            r.toss, r.e_pos, r.e_rot, r.e_pen, r.e_pen_percent, r.steps_compared, r.diverged
        ));
    }
    fs::write(args.out.join("per_toss.csv"), csv)?;
    fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&json!({ "per_toss": reports, "aggregate": agg }))?,
    )?;
    write_manifest(&args.out, "eval", args)?;
    let mean = |f: &dyn Fn(&TossReport) -> f64| -> f64 {
        collect(f).iter().sum::<f64>() / reports.len() as f64
    };
    println!(
        "evaluated {} tosses: mean e_pos {:.4e} m, e_rot {:.4e} rad, e_pen {:.4e} m ({:.2}% width)",
        reports.len(),
        mean(&|r| r.e_pos),
        mean(&|r| r.e_rot),
        mean(&|r| r.e_pen),
        mean(&|r| r.e_pen_percent)
    );
    Ok(())
}

fn cmd_toy1d(args: &ToyArgs) -> Result<()> {
    if args.zdot_max <= args.zdot_min {
        bail!("empty velocity range");
    }
    fs::create_dir_all(&args.out)?;
    let cfg = ToyConfig {
        n_samples: args.samples,
        noise_std: args.noise,
        zdot_range: (args.zdot_min, args.zdot_max),
        ..Default::default()
    };
    let mut summary = String::from("seed,z_g_hat,dnn_val_loss\n");
    for s in args.seed..args.seed + args.seeds {
        let report = toy_experiment(s, &cfg);
        summary.push_str(&format!(
            "{},{:.10e},{:.10e}\n",
            s, report.learned_z_g, report.dnn_val_loss
        ));
        if s == args.seed {
            fs::write(args.out.join("landscape.csv"), landscape_csv(&report))?;
            fs::write(args.out.join("curves.csv"), curves_csv(&report))?;
        }
        println!("seed {s}: learned z_g {:.6}", report.learned_z_g);
    }
    fs::write(args.out.join("summary.csv"), summary)?;
    write_manifest(&args.out, "toy1d", args)?;
    Ok(())
}

fn main() -> Result<()> {
    if let Ok(threads) = std::env::var("CONTACTNETS_THREADS") {
        let n: usize = threads
            .parse()
            .context("CONTACTNETS_THREADS must be a positive integer")?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Toy1d(args) => cmd_toy1d(args),
    }
}
