#![allow(dead_code)]

use amtkd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Row-stochastic `[n, k]` tensor.
pub fn rand_probs(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Tensor {
    let mut v: Vec<f64> = (0..n * k).map(|_| rng.random_range(0.05..1.0)).collect();
    for row in v.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Tensor::new(vec![n, k], v).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over
/// every element of every input. `f` builds a scalar from the inputs.
pub fn max_grad_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(&t.clone().trainable())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut ins = inputs.to_vec();
            ins[i].values_mut()[j] = t.values()[j] + H;
            let plus = eval(&ins);
            ins[i].values_mut()[j] = t.values()[j] - H;
            let minus = eval(&ins);
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Reduces any node to a scalar through fixed random weights.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let dims = g.dims(v).to_vec();
    let w = rand_tensor(&mut rng(seed), &dims, 1.0);
    let wv = g.constant(&w);
    g.dot(v, wv).unwrap()
}
