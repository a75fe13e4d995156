//! Foreground/background latent codes mixed from distance maps, their
//! bilinear upsampling, the mask alignment loss and foreground extraction.

use std::rc::Rc;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Real, Rng, Tensor, Var};
use crate::partbank::BankVars;

/// Perturbation added to latent codes during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseKind {
    /// Additive `N(0, 1)`.
    #[default]
    Gaussian,
    /// Additive `+1` or `-1`, each with probability 0.05.
    SaltPepper,
    /// Multiplicative `1 + 0.1·N(0, 1)`.
    Speckle,
}

const SALT_PEPPER_P: f64 = 0.05;
const SPECKLE_STD: f64 = 0.1;
const COSINE_EPS: f64 = 1e-8;

/// Distance used by [`mixture_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MixNorm {
    /// Euclidean norm of the flattened difference.
    #[default]
    L2,
    L2Squared,
    L1,
    /// `1 - cos(code, mask)`.
    Cosine,
}

macro_rules! named_enum {
    ($ty:ident { $($name:literal => $var:ident),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)*
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`; expected one of: ", $($name, " "),*),
                        s
                    ))),
                }
            }
        }

        impl $ty {
            pub fn name(self) -> &'static str {
                match self {
                    $($ty::$var => $name,)*
                }
            }
        }
    };
}

named_enum!(NoiseKind { "gaussian" => Gaussian, "salt-pepper" => SaltPepper, "speckle" => Speckle });
named_enum!(MixNorm { "l2" => L2, "l2-squared" => L2Squared, "l1" => L1, "cosine" => Cosine });

/// Complementary binary masks of one image, each `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair<T: Real = f32> {
    pub fg: Tensor<T>,
    pub bg: Tensor<T>,
}

impl<T: Real> MaskPair<T> {
    /// Pairs a foreground mask with its complement.
    pub fn from_fg(fg: Tensor<T>) -> Self {
        let bg = fg.map(|v| T::one() - v);
        Self { fg, bg }
    }

    pub fn cast<U: Real>(&self) -> MaskPair<U> {
        MaskPair {
            fg: self.fg.cast(),
            bg: self.bg.cast(),
        }
    }
}

/// Per-image foreground and background codes, each `B × N`.
#[derive(Clone, Copy, Debug)]
pub struct LatentCodes<'t, T: Real = f32> {
    pub fg: Var<'t, T>,
    pub bg: Var<'t, T>,
    pub noisy: bool,
}

/// `L_F = Σ_k α_k D^k`, `L_B = Σ_k β_k D^{n_f + k}`, optionally perturbed.
///
/// `d` stacks `batch` images of `N × K` distance maps.
pub fn mix_latents<'t, T: Real>(
    d: Var<'t, T>,
    bank: &BankVars<'t, T>,
    batch: usize,
    noise: Option<(NoiseKind, &mut Rng)>,
) -> Result<LatentCodes<'t, T>> {
    let ds = d.shape();
    let k = bank.k();
    if ds.len() != 2 || ds[1] != k {
        return Err(Error::dim("mix_latents", &ds, &[ds[0], k]));
    }
    if batch == 0 || ds[0] % batch != 0 {
        return Err(Error::Shape(format!("{} distance-map rows for a batch of {batch}", ds[0])));
    }
    let n = ds[0] / batch;
    let n_f = bank.n_f;
    let fg = d.slice_cols(0, n_f)?.matmul(bank.alpha.reshape([n_f, 1])?)?;
    let bg = d.slice_cols(n_f, k)?.matmul(bank.beta.reshape([k - n_f, 1])?)?;
    let (mut fg, mut bg) = (fg.reshape([batch, n])?, bg.reshape([batch, n])?);
    let noisy = noise.is_some();
    if let Some((kind, rng)) = noise {
        fg = perturb(fg, kind, rng)?;
        bg = perturb(bg, kind, rng)?;
    }
    Ok(LatentCodes { fg, bg, noisy })
}

fn perturb<'t, T: Real>(x: Var<'t, T>, kind: NoiseKind, rng: &mut Rng) -> Result<Var<'t, T>> {
    let shape = x.shape();
    let tape = x.tape();
    match kind {
        NoiseKind::Gaussian => x.add(tape.constant(rng.sample_gaussian(shape))),
        NoiseKind::SaltPepper => {
            let delta = Tensor::from_fn(shape, |_| {
                let u = rng.uniform();
                T::of(if u < SALT_PEPPER_P {
                    1.0
                } else if u < 2.0 * SALT_PEPPER_P {
                    -1.0
                } else {
                    0.0
                })
            });
            x.add(tape.constant(delta))
        }
        NoiseKind::Speckle => {
            let gain = Tensor::from_fn(shape, |_| T::of(1.0 + SPECKLE_STD * rng.gaussian()));
            x.mul(tape.constant(gain))
        }
    }
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// `(gh·gw) × (h·w)` matrix `B` such that `L·B` is the half-pixel-centred
/// bilinear upsampling of a row-major `gh × gw` grid `L`.
pub fn bilinear_matrix<T: Real>(gh: usize, gw: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    if gh == 0 || gw == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot resample {gh}x{gw} to {h}x{w}")));
    }
    let ys = axis_weights(gh, h);
    let xs = axis_weights(gw, w);
    let mut m = vec![0.0f64; gh * gw * h * w];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            let col = oy * w + ox;
            for (src, wt) in [
                (y0 * gw + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * gw + x1, (1.0 - fy) * fx),
                (y1 * gw + x0, fy * (1.0 - fx)),
                (y1 * gw + x1, fy * fx),
            ] {
                m[src * h * w + col] += wt;
            }
        }
    }
    Tensor::from_f64([gh * gw, h * w], &m)
}

/// Bilinearly upsamples each row of `codes` (`B × gh·gw`) to `B × h·w`.
pub fn interpolate<'t, T: Real>(
    codes: Var<'t, T>,
    grid: (usize, usize),
    h: usize,
    w: usize,
) -> Result<Var<'t, T>> {
    let m = bilinear_matrix(grid.0, grid.1, h, w)?;
    interpolate_with(codes, Rc::new(m))
}

fn interpolate_with<'t, T: Real>(codes: Var<'t, T>, m: Rc<Tensor<T>>) -> Result<Var<'t, T>> {
    let tape = codes.tape();
    codes.matmul(tape.constant_rc(m))
}

/// Row-wise distance between upsampled codes and targets, shape `[rows]`.
fn row_distance<'t, T: Real>(a: Var<'t, T>, target: Var<'t, T>, kind: MixNorm) -> Result<Var<'t, T>> {
    match kind {
        MixNorm::L2 => Ok(a.sub(target)?.square()?.sum_rows()?.sqrt()),
        MixNorm::L2Squared => a.sub(target)?.square()?.sum_rows(),
        MixNorm::L1 => a.sub(target)?.abs().sum_rows(),
        MixNorm::Cosine => {
            let dot = a.mul(target)?.sum_rows()?;
            let na = a.square()?.sum_rows()?.sqrt();
            let nt = target.square()?.sum_rows()?.sqrt();
            let cos = dot.div(na.mul(nt)?.offset(T::of(COSINE_EPS)))?;
            Ok(cos.scale(-T::one()).offset(T::one()))
        }
    }
}

/// Alignment loss `|I(L_F) - M_f| + |I(L_B) - M_b|`, averaged over the
/// images that carry masks.
///
/// Images without masks contribute nothing; with no masks in the batch the
/// result is a constant zero.
pub fn mixture_loss<'t, T: Real>(
    codes: &LatentCodes<'t, T>,
    masks: &[Option<&MaskPair<T>>],
    grid: (usize, usize),
    h: usize,
    w: usize,
    kind: MixNorm,
) -> Result<Var<'t, T>> {
    let tape = codes.fg.tape();
    let batch = codes.fg.shape()[0];
    if masks.len() != batch {
        return Err(Error::Shape(format!("{} mask slots for a batch of {batch}", masks.len())));
    }
    let present: Vec<usize> = (0..batch).filter(|&b| masks[b].is_some()).collect();
    if present.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut fg_t = Vec::with_capacity(present.len() * h * w);
    let mut bg_t = Vec::with_capacity(present.len() * h * w);
    for &b in &present {
        let m = masks[b].expect("present");
        if m.fg.numel() != h * w || m.bg.numel() != h * w {
            return Err(Error::dim("mixture_loss", m.fg.shape(), &[h, w]));
        }
        fg_t.extend_from_slice(m.fg.data());
        bg_t.extend_from_slice(m.bg.data());
    }
    let rows = present.len();
    let fg_t = tape.constant(Tensor::new([rows, h * w], fg_t)?);
    let bg_t = tape.constant(Tensor::new([rows, h * w], bg_t)?);
    let up = Rc::new(bilinear_matrix(grid.0, grid.1, h, w)?);
    let idx: Rc<[usize]> = present.into();
    let fg = interpolate_with(codes.fg.gather_rows(idx.clone())?, up.clone())?;
    let bg = interpolate_with(codes.bg.gather_rows(idx)?, up)?;
    let total = row_distance(fg, fg_t, kind)?.add(row_distance(bg, bg_t, kind)?)?;
    Ok(total.mean())
}

/// `x ⊙ clamp(I(code), 0, 1)` broadcast over channels.
///
/// `x` is `H × W × C`; `code` holds one value per patch of a `grid`.
pub fn foreground_image<T: Real>(x: &Tensor<T>, code: &[T], grid: (usize, usize)) -> Result<Tensor<T>> {
    let (h, w, c) = match *x.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::Shape(format!("expected an HxWxC image, got {s:?}"))),
    };
    let map = upsample_values(code, grid, h, w)?;
    let mut out = x.clone();
    for (px, &m) in out.data_mut().chunks_mut(c).zip(map.data()) {
        let m = m.max(T::zero()).min(T::one());
        px.iter_mut().for_each(|v| *v *= m);
    }
    Ok(out)
}

/// Value-only bilinear upsampling of one code, shape `H × W`.
pub fn upsample_values<T: Real>(code: &[T], grid: (usize, usize), h: usize, w: usize) -> Result<Tensor<T>> {
    if code.len() != grid.0 * grid.1 {
        return Err(Error::Shape(format!(
            "code of length {} does not fill a {}x{} grid",
            code.len(),
            grid.0,
            grid.1
        )));
    }
    let m = bilinear_matrix::<T>(grid.0, grid.1, h, w)?;
    let mut out = vec![T::zero(); h * w];
    for (i, &v) in code.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(m.row(i)) {
            *o += v * b;
        }
    }
    Tensor::new([h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in [NoiseKind::Gaussian, NoiseKind::SaltPepper, NoiseKind::Speckle] {
            assert_eq!(k.name().parse::<NoiseKind>().unwrap(), k);
        }
        for k in [MixNorm::L2, MixNorm::L2Squared, MixNorm::L1, MixNorm::Cosine] {
            assert_eq!(k.name().parse::<MixNorm>().unwrap(), k);
        }
        assert!("l3".parse::<MixNorm>().is_err());
    }

    #[test]
    fn bilinear_columns_sum_to_one() {
        let m = bilinear_matrix::<f64>(3, 2, 7, 5).unwrap();
        for col in 0..35 {
            let s: f64 = (0..6).map(|r| m.at2(r, col)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
