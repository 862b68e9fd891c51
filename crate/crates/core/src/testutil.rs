//! Finite-difference gradient oracle shared by unit tests.

use alloc::vec::Vec;

use crate::numerics::{Graph, Tensor, Var};
use crate::rng::Rng;

pub fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

/// `|a − b| / max(|a|, |b|, 1e-8)`, maximized over entries.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Compares graph gradients of `build` against central differences with
/// step `h`, returning the worst relative error over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| alloc::vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars);
        g.value(loss).data()[0]
    };
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let mut numeric = alloc::vec![0.0; t.numel()];
        for k in 0..t.numel() {
            let orig = t.data()[k];
            work[ti].data_mut()[k] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[k] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[k] = orig;
            numeric[k] = (up - down) / (2.0 * h);
        }
        worst = worst.max(max_rel_err(&analytic[ti], &numeric));
    }
    worst
}
