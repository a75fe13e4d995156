#![allow(dead_code)]

pub mod gradsuite;

use partwise::numerics::{Tape, Var};
use partwise::{Rng, Tensor};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Rng::new(seed).sample_gaussian(shape.to_vec())
}

pub fn rand_in(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(lo, hi))
}

/// Contracts `v` against fixed random weights so every output entry matters.
pub fn project<'t>(v: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = randn(&v.shape(), seed ^ 0x9e37);
    v.mul(v.tape().constant(w)).unwrap().sum()
}

/// Worst `|autodiff - central difference| / (|central difference| + 1e-8)`
/// over every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zero(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| {
        let tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = analytic[i].data()[j];
            let r = (ad - fd).abs() / (fd.abs() + 1e-8);
            worst = worst.max(r);
        }
    }
    worst
}

#[track_caller]
pub fn assert_grad<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let err = gradcheck(inputs, f);
    assert!(err <= FD_TOL, "{name}: relative gradient error {err:e}");
}
