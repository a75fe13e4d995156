mod common;

use common::randn;
use nalgebra::{DMatrix, SymmetricEigen};
use partwise::numerics::Tape;
use partwise::partbank::{
    distance_maps, gram_residual, orthogonality_metric, quality_loss, sparsity_metric, spectral_norm_power,
    BankVars, PartBank,
};
use partwise::{Error, ParamSet, Rng, Tensor};
use proptest::prelude::*;

fn max_abs_eig(m: &Tensor<f64>) -> f64 {
    let n = m.shape()[0];
    let dm = DMatrix::from_row_slice(n, n, m.data());
    SymmetricEigen::new(dm).eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn random_symmetric(n: usize, seed: u64) -> Tensor<f64> {
    let a = randn(&[n, n], seed);
    Tensor::from_fn([n, n], |i| (a.data()[i] + a.data()[(i % n) * n + i / n]) / 2.0)
}

fn sigma(m: &Tensor<f64>, iters: u32, seed: u64) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(m.clone());
    spectral_norm_power(v, iters, &mut Rng::new(seed)).unwrap().sigma.item()
}

fn gram_oracle(rows: &[f64], n: usize, d: usize) -> Tensor<f64> {
    Tensor::from_fn([n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let dot: f64 = (0..d).map(|c| rows[i * d + c] * rows[j * d + c]).sum();
        dot - if i == j { 1.0 } else { 0.0 }
    })
}

#[test]
fn distance_maps_match_loop_oracle() {
    let mut rng = Rng::new(3);
    let patches: Tensor = rng.sample_gaussian([5, 4]);
    let bank = PartBank::<f32>::init(3, 4, 1, &mut rng).unwrap();
    let tape = Tape::new();
    let d = distance_maps(tape.constant(patches.clone()), &bank.bind(&tape, false)).unwrap();
    let mut oracle = vec![0.0f32; 15];
    for i in 0..5 {
        for k in 0..3 {
            let mut s = 0.0f32;
            for c in 0..4 {
                s += patches.at2(i, c) * bank.p.at2(k, c);
            }
            oracle[i * 3 + k] = s;
        }
    }
    assert_eq!(d.value().data(), &oracle[..]);
}

#[test]
fn distance_maps_reject_width_mismatch() {
    let bank = PartBank::<f32>::init(3, 4, 1, &mut Rng::new(0)).unwrap();
    let tape = Tape::new();
    let err = distance_maps(tape.constant(Tensor::zeros([2, 5])), &bank.bind(&tape, false)).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
}

#[test]
fn power_iteration_examples() {
    let id = Tensor::<f64>::eye(4);
    assert!((sigma(&id, 2, 0) - 1.0).abs() < 1e-12);
    let diag = Tensor::<f64>::from_rows(&[&[-3.0, 0.0], &[0.0, 1.0]]);
    assert!((sigma(&diag, 50, 1) - 3.0).abs() < 1e-9);

    let m = random_symmetric(12, 7);
    let exact = max_abs_eig(&m);
    let est = sigma(&m, 50, 2);
    assert!((est - exact).abs() <= 0.01 * exact, "{est} vs {exact}");
}

#[test]
fn power_iteration_rejects_bad_input() {
    let tape = Tape::<f64>::new();
    let rect = tape.constant(Tensor::zeros([2, 3]));
    assert!(matches!(spectral_norm_power(rect, 2, &mut Rng::new(0)), Err(Error::Shape(_))));
    let sq = tape.constant(Tensor::eye(2));
    assert!(matches!(spectral_norm_power(sq, 0, &mut Rng::new(0)), Err(Error::Config(_))));
}

#[test]
fn quality_loss_matches_composed_oracle() {
    let bank = PartBank::<f64>::init(8, 6, 3, &mut Rng::new(12)).unwrap();
    let tape = Tape::new();
    let vars = bank.bind(&tape, false);
    let got = quality_loss(&vars, 1.0, 1.0, 50, &mut Rng::new(1)).unwrap().item();
    let p = bank.p.data();
    let gf = gram_oracle(&p[..3 * 6], 3, 6);
    let gb = gram_oracle(&p[3 * 6..], 5, 6);
    let oracle = p.iter().map(|v| v.abs()).sum::<f64>() + max_abs_eig(&gf) + max_abs_eig(&gb);
    assert!((got - oracle).abs() <= 0.01 * oracle, "{got} vs {oracle}");
}

#[test]
fn quality_loss_zero_weights_is_zero() {
    let bank = PartBank::<f64>::init(4, 3, 2, &mut Rng::new(1)).unwrap();
    let tape = Tape::new();
    let q = quality_loss(&bank.bind(&tape, false), 0.0, 0.0, 2, &mut Rng::new(1)).unwrap();
    assert_eq!(q.item(), 0.0);
    assert!(quality_loss(&bank.bind(&tape, false), -1.0, 0.0, 2, &mut Rng::new(1)).is_err());
}

#[test]
fn gram_residual_of_orthonormal_rows_is_zero() {
    let tape = Tape::<f64>::new();
    let rows = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0]]));
    assert_eq!(gram_residual(rows).unwrap().value().l1(), 0.0);
}

#[test]
fn metrics_match_oracles() {
    let bank = PartBank::<f32>::init(5, 4, 2, &mut Rng::new(8)).unwrap();
    let p64: Tensor<f64> = bank.p.cast();
    let l1: f64 = p64.data().iter().map(|v| v.abs()).sum();
    assert!((sparsity_metric(&bank.p) - l1).abs() < 1e-9);
    let g = gram_oracle(&p64.data()[..8], 2, 4);
    assert!((orthogonality_metric(&bank.p, 2) - g.l1()).abs() < 1e-9);
}

#[test]
fn descent_on_quality_loss_shrinks_both_norms() {
    let bank = PartBank::<f64>::init(8, 16, 4, &mut Rng::new(21)).unwrap();
    let mut ps = ParamSet::new();
    bank.insert_into(&mut ps, "b");
    let lr = 1e-3;
    let mut history = Vec::new();
    for step in 0..200 {
        let p = ps.get("b.P").unwrap();
        history.push((sparsity_metric(p), orthogonality_metric(p, 4)));
        let tape = Tape::new();
        let bound = ps.bind(&tape, true);
        let vars = BankVars::from_bound(&bound, "b", 4).unwrap();
        let loss = quality_loss(&vars, 1.0, 1.0, 2, &mut Rng::stream(5, step)).unwrap();
        ps.backward(&bound, loss).unwrap();
        for (_, prm) in ps.iter_mut() {
            let g = prm.grad.take().unwrap();
            for (v, d) in prm.value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * d;
            }
        }
    }
    for w in history.windows(2) {
        assert!(w[1].0 <= w[0].0 * 1.05, "sparsity rose {:?}", w);
        assert!(w[1].1 <= w[0].1 * 1.05, "gram residual rose {:?}", w);
    }
    let (first, last) = (history[0], history[history.len() - 1]);
    assert!(last.0 < first.0 && last.1 < first.1, "{first:?} -> {last:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spectral_norm_is_scale_equivariant(seed in 0u64..10_000, n in 2usize..10, ci in 0usize..3) {
        let c = [-2.0, 0.5, 3.0][ci];
        let m = random_symmetric(n, seed);
        let base = sigma(&m, 50, seed);
        let scaled = sigma(&m.map(|v| v * c), 50, seed);
        prop_assert!((scaled - c.abs() * base).abs() <= 0.01 * c.abs() * base + 1e-12);
    }

    #[test]
    fn spectral_norm_is_non_negative(seed in 0u64..10_000, n in 1usize..8, iters in 1u32..5) {
        prop_assert!(sigma(&random_symmetric(n, seed), iters, seed) >= 0.0);
    }
}
