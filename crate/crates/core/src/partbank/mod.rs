//! Part dictionaries, distance maps and the part-quality regularizer.

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Real, Rng, Tape, Tensor, Var};

/// Restarts allowed when the power iteration hits a zero vector.
const MAX_RESTARTS: usize = 3;

/// Value-side part dictionary of one encoder block.
///
/// Rows `0..n_f` of `p` are foreground parts, rows `n_f..K` background.
#[derive(Clone, Debug, PartialEq)]
pub struct PartBank<T: Real = f32> {
    pub p: Tensor<T>,
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
    n_f: usize,
}

impl<T: Real> PartBank<T> {
    /// Random dictionary with entries of variance `1/sqrt(d_p)` and uniform
    /// mixture weights.
    pub fn init(k: usize, d_p: usize, n_f: usize, rng: &mut Rng) -> Result<Self> {
        check_split(k, n_f)?;
        let std = (d_p as f64).powf(-0.25);
        let p = Tensor::from_fn([k, d_p], |_| T::of(std * rng.gaussian()));
        Self::from_parts(p, n_f)
    }

    /// Wraps an explicit part matrix, with uniform mixture weights.
    pub fn from_parts(p: Tensor<T>, n_f: usize) -> Result<Self> {
        let (k, _) = p.dims2()?;
        check_split(k, n_f)?;
        let n_b = k - n_f;
        Ok(Self {
            p,
            alpha: Tensor::full([n_f], T::of(1.0 / n_f as f64)),
            beta: Tensor::full([n_b], T::of(1.0 / n_b as f64)),
            n_f,
        })
    }

    pub fn k(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn d_p(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn n_f(&self) -> usize {
        self.n_f
    }

    pub fn n_b(&self) -> usize {
        self.k() - self.n_f
    }

    pub fn insert_into(&self, params: &mut ParamSet<T>, prefix: &str) {
        params.insert(format!("{prefix}.P"), self.p.clone());
        params.insert(format!("{prefix}.alpha"), self.alpha.clone());
        params.insert(format!("{prefix}.beta"), self.beta.clone());
    }

    pub fn from_params(params: &ParamSet<T>, prefix: &str, n_f: usize) -> Result<Self> {
        let p = params.get(&format!("{prefix}.P"))?.clone();
        let mut bank = Self::from_parts(p, n_f)?;
        bank.alpha = params.get(&format!("{prefix}.alpha"))?.clone();
        bank.beta = params.get(&format!("{prefix}.beta"))?.clone();
        if bank.alpha.numel() != n_f || bank.beta.numel() != bank.n_b() {
            return Err(Error::Shape(format!(
                "mixture weights {:?}/{:?} do not match the {n_f}/{} split",
                bank.alpha.shape(),
                bank.beta.shape(),
                bank.n_b()
            )));
        }
        Ok(bank)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BankVars<'t, T> {
        let put = |t: &Tensor<T>| {
            if trainable {
                tape.var(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BankVars {
            p: put(&self.p),
            alpha: put(&self.alpha),
            beta: put(&self.beta),
            n_f: self.n_f,
        }
    }
}

fn check_split(k: usize, n_f: usize) -> Result<()> {
    if n_f == 0 || n_f >= k {
        return Err(Error::Config(format!(
            "foreground part count must satisfy 0 < n_f < K, got n_f={n_f}, K={k}"
        )));
    }
    Ok(())
}

/// A part dictionary placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BankVars<'t, T: Real = f32> {
    pub p: Var<'t, T>,
    pub alpha: Var<'t, T>,
    pub beta: Var<'t, T>,
    pub n_f: usize,
}

impl<'t, T: Real> BankVars<'t, T> {
    /// Looks up `{prefix}.P`, `{prefix}.alpha` and `{prefix}.beta`.
    pub fn from_bound(bound: &Bound<'t, T>, prefix: &str, n_f: usize) -> Result<Self> {
        let p = bound.get(&format!("{prefix}.P"))?;
        check_split(p.shape()[0], n_f)?;
        Ok(Self {
            p,
            alpha: bound.get(&format!("{prefix}.alpha"))?,
            beta: bound.get(&format!("{prefix}.beta"))?,
            n_f,
        })
    }

    pub fn k(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn foreground(&self) -> Result<Var<'t, T>> {
        self.p.slice_rows(0, self.n_f)
    }

    pub fn background(&self) -> Result<Var<'t, T>> {
        self.p.slice_rows(self.n_f, self.k())
    }
}

/// Patch-to-part dot products: `D[i, k] = <patches[i], P[k]>`.
///
/// `patches` may stack the patches of several images; the result has one
/// row per patch row.
pub fn distance_maps<'t, T: Real>(patches: Var<'t, T>, bank: &BankVars<'t, T>) -> Result<Var<'t, T>> {
    let ps = patches.shape();
    let pp = bank.p.shape();
    if ps.len() != 2 || ps[1] != pp[1] {
        return Err(Error::dim("distance_maps", &ps, &pp));
    }
    patches.matmul(bank.p.t()?)
}

/// `R R^T - I` for a matrix of row vectors.
pub fn gram_residual<'t, T: Real>(rows: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = rows.shape()[0];
    let eye = rows.tape().constant(Tensor::eye(n));
    rows.matmul(rows.t()?)?.sub(eye)
}

/// Output of [`spectral_norm_power`].
#[derive(Clone, Copy, Debug)]
pub struct SpectralNorm<'t, T: Real = f32> {
    pub sigma: Var<'t, T>,
    /// The iteration kept collapsing to the zero vector; `sigma` is 0.
    pub degenerate: bool,
}

fn matvec<T: Real>(m: &Tensor<T>, v: &[T]) -> Vec<T> {
    let n = v.len();
    (0..n)
        .map(|i| m.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Power-iteration estimate of `max |λ|` of a symmetric matrix.
///
/// Runs `iters` rounds of `u = M v, v = M u, σ = |v| / |u|`. All but the
/// last round run on values; the last is recorded on the tape with `v`
/// held constant, so gradients flow through `M` only.
pub fn spectral_norm_power<'t, T: Real>(
    m: Var<'t, T>,
    iters: u32,
    rng: &mut Rng,
) -> Result<SpectralNorm<'t, T>> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("power iteration needs a square matrix, got {shape:?}")));
    }
    if iters == 0 {
        return Err(Error::Config("power iteration needs at least one iteration".into()));
    }
    let n = shape[0];
    let mv = m.value();
    let tape = m.tape();
    'restart: for _ in 0..=MAX_RESTARTS {
        let mut v: Vec<T> = (0..n).map(|_| T::of(rng.gaussian())).collect();
        let nv = norm(&v);
        if !(nv > T::zero()) {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        for _ in 1..iters {
            let u = matvec(&mv, &v);
            if !(norm(&u) > T::zero()) {
                continue 'restart;
            }
            let w = matvec(&mv, &u);
            let nw = norm(&w);
            if !(nw > T::zero()) {
                continue 'restart;
            }
            v = w.into_iter().map(|x| x / nw).collect();
        }
        let vc = tape.constant(Tensor::new([n, 1], v)?);
        let u = m.matmul(vc)?;
        let nu = u.square()?.sum().sqrt();
        if !(nu.item() > T::zero()) {
            continue;
        }
        let w = m.matmul(u)?;
        let nw = w.square()?.sum().sqrt();
        return Ok(SpectralNorm {
            sigma: nw.div(nu)?,
            degenerate: false,
        });
    }
    Ok(SpectralNorm {
        sigma: tape.constant(Tensor::scalar(T::zero())),
        degenerate: true,
    })
}

/// The two halves of [`quality_loss`]: `(λ_s |P|_1, λ_o [σ_F + σ_B])`.
pub fn quality_terms<'t, T: Real>(
    bank: &BankVars<'t, T>,
    lambda_s: f64,
    lambda_o: f64,
    iters: u32,
    rng: &mut Rng,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if !(lambda_s >= 0.0 && lambda_o >= 0.0) {
        return Err(Error::Config(format!(
            "regularizer weights must be non-negative, got {lambda_s}, {lambda_o}"
        )));
    }
    let sparsity = bank.p.abs().sum().scale(T::of(lambda_s));
    let sf = spectral_norm_power(gram_residual(bank.foreground()?)?, iters, rng)?;
    let sb = spectral_norm_power(gram_residual(bank.background()?)?, iters, rng)?;
    let ortho = sf.sigma.add(sb.sigma)?.scale(T::of(lambda_o));
    Ok((sparsity, ortho))
}

/// `λ_s |P|_1 + λ_o [σ(P_F P_F^T - I) + σ(P_B P_B^T - I)]`.
pub fn quality_loss<'t, T: Real>(
    bank: &BankVars<'t, T>,
    lambda_s: f64,
    lambda_o: f64,
    iters: u32,
    rng: &mut Rng,
) -> Result<Var<'t, T>> {
    let (s, o) = quality_terms(bank, lambda_s, lambda_o, iters, rng)?;
    s.add(o)
}

/// `|P|_1`, summed absolute entries.
pub fn sparsity_metric<T: Real>(p: &Tensor<T>) -> f64 {
    p.data().iter().map(|v| v.f64().abs()).sum()
}

/// `|P_F P_F^T - I|_1`, the entrywise L1 norm of the foreground Gram residual.
pub fn orthogonality_metric<T: Real>(p: &Tensor<T>, n_f: usize) -> f64 {
    let d = p.shape()[1];
    let rows = &p.data()[..n_f * d];
    let mut total = 0.0;
    for i in 0..n_f {
        for j in 0..n_f {
            let dot: f64 = rows[i * d..(i + 1) * d]
                .iter()
                .zip(&rows[j * d..(j + 1) * d])
                .map(|(a, b)| a.f64() * b.f64())
                .sum();
            total += (dot - if i == j { 1.0 } else { 0.0 }).abs();
        }
    }
    total
}
