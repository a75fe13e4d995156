use crate::distill::model::{for_each_chunk, ModelConfig};
use crate::error::{Error, Result};
use crate::mixture::{mix_latents, upsample_values};
use crate::numerics::{ParamSet, Tensor};
use crate::partbank::BankVars;
use crate::synthdata::Sample;

/// Raw maps of one image from a frozen model.
#[derive(Clone, Debug)]
pub struct InspectMaps {
    /// `I(L_F)`, `H × W`.
    pub fg: Tensor,
    /// `I(L_B)`, `H × W`.
    pub bg: Tensor,
    /// Final-block self-attention of the class token over the patch grid,
    /// one `gh × gw` map per head.
    pub msa: Vec<Tensor>,
    /// Same for the cross-attention.
    pub mca: Vec<Tensor>,
    /// Final-block distance map of each part, `gh × gw`.
    pub parts: Vec<Tensor>,
}

impl InspectMaps {
    /// Every map with a file stem, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("fg".to_string(), &self.fg), ("bg".to_string(), &self.bg)];
        out.extend(self.msa.iter().enumerate().map(|(h, t)| (format!("msa_head{h}"), t)));
        out.extend(self.mca.iter().enumerate().map(|(h, t)| (format!("mca_head{h}"), t)));
        out.extend(self.parts.iter().enumerate().map(|(k, t)| (format!("part{k:02}"), t)));
        out
    }
}

fn cls_rows(attn: &Tensor, heads: usize, t: usize, grid: (usize, usize)) -> Vec<Tensor> {
    (0..heads)
        .map(|h| {
            let row = &attn.data()[h * t * t..h * t * t + t];
            Tensor::new([grid.0, grid.1], row[1..].to_vec()).expect("grid")
        })
        .collect()
}

pub fn inspect_maps(cfg: &ModelConfig, params: &ParamSet, image: &Tensor) -> Result<InspectMaps> {
    let enc = &cfg.encoder;
    let (grid, n, k) = (enc.grid(), enc.n_patches(), enc.parts);
    let mut maps = None;
    for_each_chunk(cfg, params, &[image], 1, |_, out| {
        let tape = out.proj.tape();
        let bound = params.bind(tape, false);
        let bank = BankVars::from_bound(&bound, &format!("block{}.parts", enc.blocks - 1), enc.fg_parts)?;
        let d = out.features.last_d();
        let codes = mix_latents(d, &bank, 1, None)?;
        let (h, w) = (enc.image_height, enc.image_width);
        let fg = upsample_values(codes.fg.value().data(), grid, h, w)?;
        let bg = upsample_values(codes.bg.value().data(), grid, h, w)?;
        let dv = d.value();
        let parts = (0..k)
            .map(|j| Tensor::from_fn([grid.0, grid.1], |i| dv.at2(i, j)))
            .collect();
        let t = n + 1;
        let msa = cls_rows(out.features.msa_attention.last().expect("block"), enc.heads, t, grid);
        let mca = cls_rows(out.features.mca_attention.last().expect("block"), enc.heads, t, grid);
        maps = Some(InspectMaps { fg, bg, msa, mca, parts });
        Ok(())
    })?;
    maps.ok_or_else(|| Error::Contract("no image to inspect".into()))
}

/// `I(L_F)` of each image, `H × W`.
pub fn foreground_maps(cfg: &ModelConfig, params: &ParamSet, images: &[&Tensor]) -> Result<Vec<Tensor>> {
    let enc = &cfg.encoder;
    let n = enc.n_patches();
    let mut out = Vec::with_capacity(images.len());
    for_each_chunk(cfg, params, images, 64, |_, o| {
        let bound = params.bind(o.proj.tape(), false);
        let bank = BankVars::from_bound(&bound, &format!("block{}.parts", enc.blocks - 1), enc.fg_parts)?;
        let b = o.proj.shape()[0];
        let codes = mix_latents(o.features.last_d(), &bank, b, None)?;
        for code in codes.fg.value().data().chunks(n) {
            out.push(upsample_values(code, enc.grid(), enc.image_height, enc.image_width)?);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Min-max normalisation to `0..=255`; a constant map becomes all zeros.
pub fn to_gray(t: &Tensor) -> Vec<u8> {
    let lo = t.data().iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    t.data()
        .iter()
        .map(|&v| {
            if span > 0.0 && span.is_finite() {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

/// Intersection over union; two empty sets score 1.
pub fn iou(pred: &[bool], truth: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean IoU of the `I(L_F)` map, normalised to gray levels and thresholded
/// at 128, against each sample's foreground mask. Samples without masks
/// are skipped.
pub fn foreground_iou(cfg: &ModelConfig, params: &ParamSet, samples: &[Sample]) -> Result<f64> {
    let masked: Vec<&Sample> = samples.iter().filter(|s| s.masks.is_some()).collect();
    if masked.is_empty() {
        return Err(Error::Config("no samples with masks to score".into()));
    }
    let images: Vec<&Tensor> = masked.iter().map(|s| &s.image).collect();
    let maps = foreground_maps(cfg, params, &images)?;
    let total: f64 = maps
        .iter()
        .zip(&masked)
        .map(|(m, s)| {
            let pred: Vec<bool> = to_gray(m).into_iter().map(|g| g >= 128).collect();
            let truth: Vec<bool> = s.masks.as_ref().expect("masked").fg.data().iter().map(|&v| v > 0.5).collect();
            iou(&pred, &truth)
        })
        .sum();
    Ok(total / masked.len() as f64)
}
