use std::rc::Rc;

use crate::encoder::{encode, init_encoder, init_linear, linear, patchify_batch, EncoderConfig, Features};
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamSet, Real, Rng, Tape, Tensor, Var};

/// Encoder plus projection head and optional logit head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head_hidden: usize,
    pub out_dim: usize,
    /// Classes of the supervised logit head; 0 disables it.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 128,
            out_dim: 64,
            classes: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.head_hidden == 0 || self.out_dim == 0 {
            return Err(Error::Config("projection head widths must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_model<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut ps = init_encoder(&cfg.encoder, rng)?;
    init_linear(&mut ps, "head.fc1", cfg.encoder.model_dim, cfg.head_hidden, rng);
    init_linear(&mut ps, "head.fc2", cfg.head_hidden, cfg.out_dim, rng);
    if cfg.classes > 0 {
        init_linear(&mut ps, "head.logits", cfg.out_dim, cfg.classes, rng);
    }
    Ok(ps)
}

/// Whether AdamW applies weight decay to a parameter: every linear weight.
/// Part matrices, embeddings, norms and biases are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

pub struct Outputs<'t, T: Real = f32> {
    pub features: Features<'t, T>,
    /// Projection-head output, `B × out_dim`.
    pub proj: Var<'t, T>,
    /// `B × classes` when the logit head exists.
    pub logits: Option<Var<'t, T>>,
}

pub fn forward<'t, T: Real>(
    cfg: &ModelConfig,
    p: &Bound<'t, T>,
    patches: Var<'t, T>,
    batch: usize,
) -> Result<Outputs<'t, T>> {
    let features = encode(&cfg.encoder, p, patches, batch)?;
    let proj = linear(linear(features.cls, p, "head.fc1")?.gelu(), p, "head.fc2")?;
    let logits = if p.contains("head.logits.w") {
        Some(linear(proj, p, "head.logits")?)
    } else {
        None
    };
    Ok(Outputs {
        features,
        proj,
        logits,
    })
}

/// How few-shot features are read off the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureMode {
    /// Final class token.
    #[default]
    Cls,
    /// Class token concatenated with patch tokens pooled by the last
    /// block's class-token attention, averaged over heads.
    ClsAndPooled,
}

/// Runs a frozen model over `images` in chunks of `chunk`, calling `f` with
/// each chunk's outputs and its offset.
pub fn for_each_chunk<T: Real>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    images: &[&Tensor<T>],
    chunk: usize,
    mut f: impl FnMut(usize, &Outputs<'_, T>) -> Result<()>,
) -> Result<()> {
    for (c, imgs) in images.chunks(chunk.max(1)).enumerate() {
        let tape = Tape::no_grad();
        let bound = params.bind(&tape, false);
        let x = tape.constant(patchify_batch(imgs, cfg.encoder.patch)?);
        let out = forward(cfg, &bound, x, imgs.len())?;
        f(c * chunk.max(1), &out)?;
    }
    Ok(())
}

/// Frozen-model features, one row per image.
pub fn extract_features(
    cfg: &ModelConfig,
    params: &ParamSet,
    images: &[&Tensor],
    mode: FeatureMode,
) -> Result<Tensor> {
    let dm = cfg.encoder.model_dim;
    let width = match mode {
        FeatureMode::Cls => dm,
        FeatureMode::ClsAndPooled => 2 * dm,
    };
    let t = cfg.encoder.tokens();
    let heads = cfg.encoder.heads;
    let mut data = Vec::with_capacity(images.len() * width);
    for_each_chunk(cfg, params, images, 64, |_, out| {
        let cls = out.features.cls.value();
        let tokens = out.features.tokens.value();
        let attn: Rc<Tensor> = out.features.msa_attention.last().expect("one block").clone();
        for b in 0..cls.shape()[0] {
            data.extend_from_slice(cls.row(b));
            if mode == FeatureMode::ClsAndPooled {
                let mut w = vec![0.0f32; t];
                for h in 0..heads {
                    let row = &attn.data()[((b * heads + h) * t) * t..][..t];
                    for j in 1..t {
                        w[j] += row[j];
                    }
                }
                let s: f32 = w.iter().sum();
                let mut pooled = vec![0.0f32; dm];
                for j in 1..t {
                    let wj = if s > 0.0 { w[j] / s } else { 1.0 / (t - 1) as f32 };
                    for (p, &v) in pooled.iter_mut().zip(tokens.row(b * t + j)) {
                        *p += wj * v;
                    }
                }
                data.extend(pooled);
            }
        }
        Ok(())
    })?;
    Tensor::new([images.len(), width], data)
}

/// Argmax of the logit head for each image.
pub fn predict(cfg: &ModelConfig, params: &ParamSet, images: &[&Tensor]) -> Result<Vec<usize>> {
    if cfg.classes == 0 {
        return Err(Error::Config("model has no logit head".into()));
    }
    let mut out = Vec::with_capacity(images.len());
    for_each_chunk(cfg, params, images, 64, |_, o| {
        let logits = o.logits.expect("logit head").value();
        for b in 0..logits.shape()[0] {
            out.push(argmax(logits.row(b)));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Index of the largest value; the first one on ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
