mod common;

use amtkd::losses::{angle_loss, hint_loss, kd_kl, total_loss, LossComponents, LossWeights};
use amtkd::nn::Model;
use amtkd::trainer::{DistillConfig, Method};
use amtkd::{Graph, Tensor};
use common::*;

fn softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn cosine_at(a: &[f64], b: &[f64], c: &[f64]) -> Option<f64> {
    let u: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let v: Vec<f64> = c.iter().zip(b).map(|(x, y)| x - y).collect();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= 1e-8 || nv <= 1e-8 {
        return None;
    }
    Some(u.iter().zip(&v).map(|(x, y)| (x / nu) * (y / nv)).sum())
}

fn huber(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d <= 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let k = t.dims()[1];
    t.values().chunks(k).map(<[f64]>::to_vec).collect()
}

#[test]
fn angle_loss_matches_scalar_loop_over_all_triplets() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let teacher = rand_probs(&mut r, 4, 5);
        let student = rand_probs(&mut r, 4, 5);
        let mut triplets = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    if i != j && j != k && i != k {
                        triplets.push((i, j, k));
                    }
                }
            }
        }
        assert_eq!(triplets.len(), 24);

        let (tr, sr) = (rows(&teacher), rows(&student));
        let mut sum = 0.0;
        let mut count = 0;
        for &(i, j, k) in &triplets {
            if let (Some(ct), Some(cs)) = (
                cosine_at(&tr[i], &tr[j], &tr[k]),
                cosine_at(&sr[i], &sr[j], &sr[k]),
            ) {
                sum += huber(ct, cs);
                count += 1;
            }
        }
        let oracle = if count == 0 { 0.0 } else { sum / count as f64 };

        let mut g = Graph::new();
        let (t, s) = (g.constant(&teacher), g.constant(&student));
        let got = angle_loss(&mut g, t, s, &triplets).unwrap();
        assert!((g.scalar(got) - oracle).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn kd_kl_matches_scalar_loop() {
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let (n, k) = (6, 4);
        let target = rand_probs(&mut r, n, k);
        let logits = rand_tensor(&mut r, &[n, k], 3.0);
        let t = 1.0 + seed as f64 / 4.0;

        let mut oracle = 0.0;
        for (p, z) in rows(&target).iter().zip(rows(&logits)) {
            let q = softmax(&z, t);
            oracle += p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum::<f64>();
        }
        oracle *= t * t / n as f64;

        let mut g = Graph::new();
        let (p, z) = (g.constant(&target), g.constant(&logits));
        let got = kd_kl(&mut g, p, z, t, true).unwrap();
        assert!((g.scalar(got) - oracle).abs() < 1e-10, "seed {seed}");
    }
}

#[test]
fn kd_kl_handles_zero_target_entries() {
    let target = Tensor::new(vec![1, 3], vec![0.0, 0.25, 0.75]).unwrap();
    let logits = Tensor::new(vec![1, 3], vec![0.3, -0.2, 1.0]).unwrap();
    let q = softmax(logits.values(), 1.0);
    let oracle = 0.25 * (0.25 / q[1]).ln() + 0.75 * (0.75 / q[2]).ln();
    let mut g = Graph::new();
    let (p, z) = (g.constant(&target), g.constant(&logits));
    let got = kd_kl(&mut g, p, z, 1.0, true).unwrap();
    assert!((g.scalar(got) - oracle).abs() < 1e-12);
}

/// Single-teacher hint loss against the classic half-squared-error form
/// `½‖u − r(v)‖²`, averaged over the batch.
#[test]
fn single_teacher_hint_is_twice_half_squared_error() {
    let mut r = rng(300);
    let v = rand_tensor(&mut r, &[5, 6], 1.0);
    let u = rand_tensor(&mut r, &[5, 4], 1.0);
    let reg = Model::from_descriptor("dense:6:4", &[6], 9).unwrap();

    let pred = reg.predict(&v).unwrap();
    let half_sq: f64 = pred
        .values()
        .chunks(4)
        .zip(u.values().chunks(4))
        .map(|(p, t)| 0.5 * p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / 5.0;

    let mut g = Graph::new();
    let (vv, uv) = (g.constant(&v), g.constant(&u));
    let out = hint_loss(&mut g, &[uv], &[vv], &[reg], &[0], false).unwrap();
    assert!((g.scalar(out.loss) - 2.0 * half_sq).abs() < 1e-12);

    // the single-teacher baseline weights the hint by β/2, restoring the ½
    let cfg = DistillConfig {
        method: Method::Fitnet,
        beta: 2.0,
        ..Default::default()
    };
    let w = cfg.effective_weights();
    assert!((w.beta * g.scalar(out.loss) - 2.0 * half_sq).abs() < 1e-12);
}

#[test]
fn hint_sums_over_teachers() {
    let mut r = rng(301);
    let v = [
        rand_tensor(&mut r, &[3, 4], 1.0),
        rand_tensor(&mut r, &[3, 5], 1.0),
    ];
    let u = [
        rand_tensor(&mut r, &[3, 2], 1.0),
        rand_tensor(&mut r, &[3, 3], 1.0),
    ];
    let regs = [
        Model::from_descriptor("dense:5:2", &[5], 1).unwrap(),
        Model::from_descriptor("dense:4:3", &[4], 2).unwrap(),
    ];
    let mapping = [1, 0];
    let mut oracle = 0.0;
    for t in 0..2 {
        let pred = regs[t].predict(&v[mapping[t]]).unwrap();
        oracle += pred
            .values()
            .iter()
            .zip(u[t].values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / 3.0;
    }
    let mut g = Graph::new();
    let vv: Vec<_> = v.iter().map(|t| g.constant(t)).collect();
    let uv: Vec<_> = u.iter().map(|t| g.constant(t)).collect();
    let out = hint_loss(&mut g, &uv, &vv, &regs, &mapping, false).unwrap();
    assert!((g.scalar(out.loss) - oracle).abs() < 1e-12);
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let mut r = rng(400);
    for _ in 0..100 {
        let vals: Vec<f64> = (0..4)
            .map(|_| rand_tensor(&mut r, &[1], 5.0).values()[0].abs())
            .collect();
        let w = LossWeights {
            lambda: vals[0] / 5.0,
            alpha: vals[1] / 3.0,
            beta: vals[2] / 2.0,
        };
        let mut g = Graph::new();
        let c: Vec<_> = vals.iter().map(|&v| g.constant(&Tensor::scalar(v))).collect();
        let parts = LossComponents {
            ce: c[0],
            kd_kl: Some(c[1]),
            angle: Some(c[2]),
            hint: Some(c[3]),
        };
        let (total, terms) = total_loss(&mut g, parts, w).unwrap();
        let by_hand = vals[0] + w.lambda * vals[1] + w.alpha * vals[2] + w.beta * vals[3];
        assert!((g.scalar(total) - by_hand).abs() < 1e-12);
        assert!((terms.weighted_sum() - terms.total).abs() < 1e-12);
    }
}

#[test]
fn default_hyperparameters() {
    let c = DistillConfig::default();
    assert_eq!(c.temperature, 5.0);
    assert_eq!(c.lambda, 0.7);
    assert_eq!(c.alpha, 1.0);
    assert_eq!(c.beta, 2.0);
    assert_eq!(c.batch_size, 128);
    c.validate().unwrap();
}
