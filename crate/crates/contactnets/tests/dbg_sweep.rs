use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use contactnets::dynamics::RigidBodyParams;
use contactnets::geometry::ContactModel;
use contactnets::loss::LossWeights;
use contactnets::sim::SimConfig;
use contactnets::training::{
    generate_synthetic_tosses, perturb_model, split_indices, train, OptimConfig,
};

fn vertex_errors(model: &ContactModel) -> (f64, f64) {
    let gt: Vec<Vector3<f64>> = (0..8)
        .map(|k| {
            Vector3::new(
                if k & 1 == 0 { -0.05 } else { 0.05 },
                if k & 2 == 0 { -0.05 } else { 0.05 },
                if k & 4 == 0 { -0.05 } else { 0.05 },
            )
        })
        .collect();
    let vs = &model.poly().vertices;
    // brute-force assignment minimizing the worst vertex distance
    let mut perm: Vec<usize> = (0..8).collect();
    let mut best_max = f64::INFINITY;
    let mut best_mean = f64::INFINITY;
    permute(&mut perm, 0, &mut |p: &[usize]| {
        let mut mx = 0.0f64;
        let mut mean = 0.0;
        for (i, &j) in p.iter().enumerate() {
            let d = (vs[j] - gt[i]).norm();
            mx = mx.max(d);
            mean += d / 8.0;
        }
        if mx < best_max {
            best_max = mx;
            best_mean = mean;
        }
    });
    (best_max, best_mean)
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn sweep() {
    let body = RigidBodyParams::cube(0.37, 0.1, Vector3::new(0.0, 0.0, -9.81));
    let gt = ContactModel::cube_polytope(0.05, 0.15);
    let sim_cfg = SimConfig::default();
    let t0 = Instant::now();
    let tosses = generate_synthetic_tosses(&gt, &body, 64, 1e-3, 7, &sim_cfg).unwrap();
    let n_trans: usize = tosses.iter().map(|t| t.states.len() - 1).sum();
    println!("generated 64 tosses, {n_trans} transitions, {:.1?}", t0.elapsed());
    let (tr, va, _te) = split_indices(64, 7).unwrap();
    let train_set: Vec<_> = tr.iter().map(|&i| tosses[i].clone()).collect();
    let val_set: Vec<_> = va[..5].iter().map(|&i| tosses[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7 ^ 0x696e_6974);
    let init = perturb_model(&gt, 0.4, &mut rng);
    let (imax, imean) = vertex_errors(&init);
    println!("init: vmax {:.4} vmean {:.4}", imax, imean);

    let lrs: Vec<f64> = std::env::var("LRS")
        .unwrap_or_else(|_| "2e-3".into())
        .split(',')
        .map(|s| s.parse().unwrap())
        .collect();
    let epochs: usize = std::env::var("EPOCHS").map(|s| s.parse().unwrap()).unwrap_or(12);
    for lr in lrs {
        let final_frac: f64 = std::env::var("FINAL_LR_FRAC")
            .map(|s| s.parse().unwrap())
            .unwrap_or(1.0);
        let cfg = OptimConfig {
            lr,
            max_epochs: epochs,
            patience: epochs,
            seed: 7,
            final_lr_frac: final_frac,
            ..Default::default()
        };
        let t1 = Instant::now();
        let (m, hist) =
            train(&init, &body, &train_set, &val_set, &LossWeights::default(), 8, &cfg).unwrap();
        let (vmax, vmean) = vertex_errors(&m);
        let n = m.poly().normal;
        println!(
            "lr {lr:.1e}: vmax {vmax:.4} vmean {vmean:.4} offset {:.4} nz {:.4} best_ep {} best_val {:.3e} time {:.0?}",
            m.poly().offset,
            n[2] / n.norm(),
            hist.best_epoch,
            hist.best_val_loss,
            t1.elapsed()
        );
        for e in &hist.epochs {
            println!(
                "  ep {} train {:.3e} l1 {:.2e} l3 {:.2e} reg {:.2e} val {:.3e}",
                e.epoch, e.train_loss, e.train_l1, e.train_l3, e.train_reg, e.val_loss
            );
        }
    }
}
