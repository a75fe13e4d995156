//! Patch extraction, self-attention, cross-attention over distance maps and
//! the block stack that fuses both streams.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Real, Rng, Tensor, Var};
use crate::partbank::{distance_maps, BankVars, PartBank};

pub const LN_EPS: f64 = 1e-5;

/// Encoder geometry and widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Parts per block (K).
    pub parts: usize,
    /// Foreground parts per block (n_f).
    pub fg_parts: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            channels: 3,
            patch: 8,
            model_dim: 64,
            heads: 4,
            blocks: 2,
            parts: 16,
            fg_parts: 10,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            return bad(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch
            ));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            ));
        }
        if self.blocks == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("blocks, channels and mlp ratio must be positive".into());
        }
        if self.fg_parts == 0 || self.fg_parts >= self.parts {
            return bad(format!(
                "foreground part count must satisfy 0 < n_f < K, got n_f={}, K={}",
                self.fg_parts, self.parts
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    /// Patches per image (N).
    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    /// Tokens per image including the class token.
    pub fn tokens(&self) -> usize {
        self.n_patches() + 1
    }

    /// Flattened patch length `F·F·C`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Patches of one image in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T: Real = f32> {
    /// `N × F·F·C`; each row is the patch flattened as `(y, x, channel)`.
    pub patches: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

fn hwc(image: &Tensor<impl Real>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("expected an HxWxC image, got {s:?}"))),
    }
}

pub fn patchify<T: Real>(image: &Tensor<T>, f: usize) -> Result<PatchGrid<T>> {
    let (h, w, c) = hwc(image)?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Shape(format!("{h}x{w} image is not divisible by patch size {f}")));
    }
    let (gh, gw) = (h / f, w / f);
    let d = f * f * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * d);
    for py in 0..gh {
        for px in 0..gw {
            for y in 0..f {
                let start = ((py * f + y) * w + px * f) * c;
                out.extend_from_slice(&src[start..start + f * c]);
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new([gh * gw, d], out)?,
        grid_h: gh,
        grid_w: gw,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(grid: &PatchGrid<T>, f: usize, channels: usize) -> Result<Tensor<T>> {
    let (n, d) = grid.patches.dims2()?;
    if n != grid.grid_h * grid.grid_w || d != f * f * channels {
        return Err(Error::Shape(format!("{n}x{d} patches do not fit the grid")));
    }
    let (h, w) = (grid.grid_h * f, grid.grid_w * f);
    let mut out = vec![T::zero(); h * w * channels];
    for (i, patch) in grid.patches.data().chunks(d).enumerate() {
        let (py, px) = (i / grid.grid_w, i % grid.grid_w);
        for y in 0..f {
            let dst = ((py * f + y) * w + px * f) * channels;
            out[dst..dst + f * channels].copy_from_slice(&patch[y * f * channels..(y + 1) * f * channels]);
        }
    }
    Tensor::new([h, w, channels], out)
}

/// Stacks the patches of several images into one `(B·N) × D_p` matrix.
pub fn patchify_batch<T: Real>(images: &[&Tensor<T>], f: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = None;
    for img in images {
        let g = patchify(img, f)?;
        let (n, d) = g.patches.dims2()?;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Shape("images in a batch differ in shape".into()));
        }
        rows += n;
        data.extend(g.patches.into_data());
    }
    Tensor::new([rows, dim.unwrap_or(0)], data)
}

/// Single-head attention `softmax(q k^T / sqrt(d_h)) v` with `[q|k|v] = z U`.
pub fn self_attention<'t, T: Real>(z: Var<'t, T>, u_qkv: Var<'t, T>) -> Result<Var<'t, T>> {
    let t = z.shape()[0];
    let (out, _) = z.matmul(u_qkv)?.attention(1, t, 1)?;
    Ok(out)
}

/// Multi-head self-attention: heads concatenated, then mixed by `u_msa`.
pub fn multi_head<'t, T: Real>(
    z: Var<'t, T>,
    heads: usize,
    u_qkv: Var<'t, T>,
    u_msa: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let d = u_qkv.shape()[1] / 3;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} attention dims are not divisible by {heads} heads")));
    }
    let t = z.shape()[0];
    let (out, _) = z.matmul(u_qkv)?.attention(1, t, heads)?;
    out.matmul(u_msa)
}

pub(crate) fn linear<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, name: &str) -> Result<Var<'t, T>> {
    x.matmul(p.get(&format!("{name}.w"))?)?
        .add_row(p.get(&format!("{name}.b"))?)
}

pub(crate) fn norm<'t, T: Real>(x: Var<'t, T>, p: &Bound<'t, T>, name: &str) -> Result<Var<'t, T>> {
    x.layer_norm(p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, T::of(LN_EPS))
}

/// Row order placing a class row before each image's patch rows, for a
/// matrix laid out as `[class rows (batch) | patch rows (batch·n)]`.
fn interleave_index(batch: usize, n: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(batch * (n + 1));
    for b in 0..batch {
        idx.push(b);
        idx.extend((0..n).map(|i| batch + b * n + i));
    }
    idx.into()
}

/// Rows of the patch tokens (class rows dropped) of a `(batch·(n+1))` stream.
fn patch_rows(batch: usize, n: usize) -> Rc<[usize]> {
    (0..batch)
        .flat_map(|b| (0..n).map(move |i| b * (n + 1) + 1 + i))
        .collect::<Vec<_>>()
        .into()
}

/// Prepends a learned `1 × d` row to each image's rows.
fn prepend_row<'t, T: Real>(row: Var<'t, T>, rows: Var<'t, T>, batch: usize) -> Result<Var<'t, T>> {
    let n = rows.shape()[0] / batch.max(1);
    let reps = row.gather_rows(vec![0; batch].into())?;
    Var::concat_rows(&[reps, rows])?.gather_rows(interleave_index(batch, n))
}

/// Cross-attention stream over distance maps.
///
/// `d` stacks `batch` images of `N × K` distance maps. Each row is lifted
/// `K → D_m → D_p` by a two-layer feed-forward map, embedded to `D_m`, a
/// learned class slot is prepended and the result goes through layer norm
/// and multi-head attention. Returns `(batch·(N+1)) × D_m` and the
/// attention probabilities.
pub fn cross_attention_features<'t, T: Real>(
    d: Var<'t, T>,
    batch: usize,
    heads: usize,
    p: &Bound<'t, T>,
    prefix: &str,
) -> Result<(Var<'t, T>, Rc<Tensor<T>>)> {
    let rows = d.shape()[0];
    if batch == 0 || rows % batch != 0 {
        return Err(Error::Shape(format!("{rows} distance-map rows for a batch of {batch}")));
    }
    let n = rows / batch;
    let lifted = linear(linear(d, p, &format!("{prefix}.up1"))?.gelu(), p, &format!("{prefix}.up2"))?;
    let e = linear(lifted, p, &format!("{prefix}.embed"))?;
    let z = prepend_row(p.get(&format!("{prefix}.cls"))?, e, batch)?;
    let h = norm(z, p, &format!("{prefix}.ln"))?;
    let (a, probs) = linear(h, p, &format!("{prefix}.qkv"))?.attention(batch, n + 1, heads)?;
    Ok((linear(a, p, &format!("{prefix}.proj"))?, probs))
}

/// Output of [`encode`].
pub struct Features<'t, T: Real = f32> {
    /// Final-normed token stream, `(B·(N+1)) × D_m`.
    pub tokens: Var<'t, T>,
    /// Class token of each image, `B × D_m`.
    pub cls: Var<'t, T>,
    /// Distance maps of every block, `(B·N) × K` each.
    pub distance_maps: Vec<Var<'t, T>>,
    /// Self-attention probabilities per block, `[B, heads, N+1, N+1]`.
    pub msa_attention: Vec<Rc<Tensor<T>>>,
    /// Cross-attention probabilities per block, `[B, heads, N+1, N+1]`.
    pub mca_attention: Vec<Rc<Tensor<T>>>,
}

impl<'t, T: Real> Features<'t, T> {
    /// Distance maps of the final block.
    pub fn last_d(&self) -> Var<'t, T> {
        *self.distance_maps.last().expect("at least one block")
    }
}

/// Runs the encoder over `batch` images given as stacked patches.
///
/// Each block computes `z_p` (pre-norm self-attention and MLP, both with
/// residuals) and `z_d` (cross-attention over that block's distance maps)
/// and emits `z_p + z_d`. Block 0 matches parts against raw patches; later
/// blocks against a learned projection of their normed input tokens.
pub fn encode<'t, T: Real>(
    cfg: &EncoderConfig,
    p: &Bound<'t, T>,
    patches: Var<'t, T>,
    batch: usize,
) -> Result<Features<'t, T>> {
    cfg.validate()?;
    let n = cfg.n_patches();
    let t = n + 1;
    let ps = patches.shape();
    if ps != [batch * n, cfg.patch_dim()] {
        return Err(Error::dim("encode", &ps, &[batch * n, cfg.patch_dim()]));
    }
    let e = linear(patches, p, "patch_embed")?;
    let x = prepend_row(p.get("cls_token")?, e, batch)?;
    let pos_idx: Rc<[usize]> = (0..batch).flat_map(|_| 0..t).collect::<Vec<_>>().into();
    let mut x = x.add(p.get("pos_embed")?.gather_rows(pos_idx)?)?;
    let prow = patch_rows(batch, n);

    let mut feats = Features {
        tokens: x,
        cls: x,
        distance_maps: Vec::with_capacity(cfg.blocks),
        msa_attention: Vec::with_capacity(cfg.blocks),
        mca_attention: Vec::with_capacity(cfg.blocks),
    };
    for i in 0..cfg.blocks {
        let pre = format!("block{i}");
        let h = norm(x, p, &format!("{pre}.ln1"))?;
        let (a, msa) = linear(h, p, &format!("{pre}.attn.qkv"))?.attention(batch, t, cfg.heads)?;
        let zp = x.add(linear(a, p, &format!("{pre}.attn.proj"))?)?;
        let m = linear(norm(zp, p, &format!("{pre}.ln2"))?, p, &format!("{pre}.mlp.fc1"))?.gelu();
        let zp = zp.add(linear(m, p, &format!("{pre}.mlp.fc2"))?)?;

        let src = if i == 0 {
            patches
        } else {
            linear(h.gather_rows(prow.clone())?, p, &format!("{pre}.part_src"))?
        };
        let bank = BankVars::from_bound(p, &format!("{pre}.parts"), cfg.fg_parts)?;
        let d = distance_maps(src, &bank)?;
        let (zd, mca) = cross_attention_features(d, batch, cfg.heads, p, &format!("{pre}.mca"))?;
        x = zp.add(zd)?;
        feats.distance_maps.push(d);
        feats.msa_attention.push(msa);
        feats.mca_attention.push(mca);
    }
    let tokens = norm(x, p, "norm")?;
    let cls_idx: Rc<[usize]> = (0..batch).map(|b| b * t).collect::<Vec<_>>().into();
    feats.cls = tokens.gather_rows(cls_idx)?;
    feats.tokens = tokens;
    Ok(feats)
}

/// Inserts a linear layer `{name}.w` (`fan_in × fan_out`) and `{name}.b`.
pub(crate) fn init_linear<T: Real>(
    ps: &mut ParamSet<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) {
    let std = 1.0 / (fan_in as f64).sqrt();
    ps.insert(
        format!("{name}.w"),
        Tensor::from_fn([fan_in, fan_out], |_| T::of(std * rng.gaussian())),
    );
    ps.insert(format!("{name}.b"), Tensor::zeros([fan_out]));
}

pub(crate) fn init_norm<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) {
    ps.insert(format!("{name}.g"), Tensor::ones([dim]));
    ps.insert(format!("{name}.b"), Tensor::zeros([dim]));
}

/// Fresh encoder parameters.
pub fn init_encoder<T: Real>(cfg: &EncoderConfig, rng: &mut Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let dm = cfg.model_dim;
    let dp = cfg.patch_dim();
    let small = |rng: &mut Rng, shape: [usize; 2]| Tensor::from_fn(shape, |_| T::of(0.02 * rng.gaussian()));
    let mut ps = ParamSet::new();
    init_linear(&mut ps, "patch_embed", dp, dm, rng);
    ps.insert("cls_token", small(rng, [1, dm]));
    ps.insert("pos_embed", small(rng, [cfg.tokens(), dm]));
    for i in 0..cfg.blocks {
        let pre = format!("block{i}");
        init_norm(&mut ps, &format!("{pre}.ln1"), dm);
        init_linear(&mut ps, &format!("{pre}.attn.qkv"), dm, 3 * dm, rng);
        init_linear(&mut ps, &format!("{pre}.attn.proj"), dm, dm, rng);
        init_norm(&mut ps, &format!("{pre}.ln2"), dm);
        init_linear(&mut ps, &format!("{pre}.mlp.fc1"), dm, cfg.mlp_ratio * dm, rng);
        init_linear(&mut ps, &format!("{pre}.mlp.fc2"), cfg.mlp_ratio * dm, dm, rng);
        if i > 0 {
            init_linear(&mut ps, &format!("{pre}.part_src"), dm, dp, rng);
        }
        PartBank::init(cfg.parts, dp, cfg.fg_parts, rng)?.insert_into(&mut ps, &format!("{pre}.parts"));
        init_linear(&mut ps, &format!("{pre}.mca.up1"), cfg.parts, dm, rng);
        init_linear(&mut ps, &format!("{pre}.mca.up2"), dm, dp, rng);
        init_linear(&mut ps, &format!("{pre}.mca.embed"), dp, dm, rng);
        ps.insert(format!("{pre}.mca.cls"), small(rng, [1, dm]));
        init_norm(&mut ps, &format!("{pre}.mca.ln"), dm);
        init_linear(&mut ps, &format!("{pre}.mca.qkv"), dm, 3 * dm, rng);
        init_linear(&mut ps, &format!("{pre}.mca.proj"), dm, dm, rng);
    }
    init_norm(&mut ps, "norm", dm);
    Ok(ps)
}
