use super::{TrainBatch, View};
use crate::error::{Error, Result};
use crate::mixture::MaskPair;
use crate::numerics::{Rng, Tensor};
use crate::synthdata::Sample;

/// Per-view augmentation ranges. Geometry is shared between an image and
/// its masks; colour jitter touches the image only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Smallest crop area as a fraction of the image.
    pub min_scale: f64,
    pub flip: bool,
    /// Per-channel gain drawn from `1 ± jitter`.
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            min_scale: 0.6,
            flip: true,
            jitter: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No cropping, flipping or jitter.
    pub fn identity() -> Self {
        Self {
            min_scale: 1.0,
            flip: false,
            jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0) {
            return Err(Error::Config(format!("crop scale must lie in (0, 1], got {}", self.min_scale)));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config(format!("jitter must lie in [0, 1), got {}", self.jitter)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    y0: f64,
    x0: f64,
    side: f64,
    flip: bool,
}

impl Geometry {
    fn sample(cfg: &AugmentConfig, h: usize, w: usize, rng: &mut Rng) -> Self {
        let scale = rng.uniform_in(cfg.min_scale, 1.0).min(1.0);
        let side = scale.sqrt();
        Self {
            y0: rng.uniform_in(0.0, 1.0 - side) * h as f64,
            x0: rng.uniform_in(0.0, 1.0 - side) * w as f64,
            side,
            flip: cfg.flip && rng.bernoulli(0.5),
        }
    }

    /// Source coordinates of output pixel `(i, j)`.
    fn source(&self, i: usize, j: usize, h: usize, w: usize) -> (f64, f64) {
        let j = if self.flip { w - 1 - j } else { j };
        let y = self.y0 + (i as f64 + 0.5) * self.side - 0.5;
        let x = self.x0 + (j as f64 + 0.5) * self.side - 0.5;
        (y.clamp(0.0, (h - 1) as f64), x.clamp(0.0, (w - 1) as f64))
    }
}

fn resample(src: &Tensor, g: &Geometry, nearest: bool) -> Tensor {
    let s = src.shape();
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    let d = src.data();
    let mut out = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            let (y, x) = g.source(i, j, h, w);
            if nearest {
                let (yi, xi) = (y.round() as usize, x.round() as usize);
                out.extend_from_slice(&d[(yi * w + xi) * c..][..c]);
                continue;
            }
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| d[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// One augmented copy of an image and its masks.
pub fn augment_pair(
    image: &Tensor,
    masks: Option<&MaskPair>,
    cfg: &AugmentConfig,
    rng: &mut Rng,
) -> (Tensor, Option<MaskPair>) {
    let s = image.shape();
    let g = Geometry::sample(cfg, s[0], s[1], rng);
    let mut out = resample(image, &g, false);
    if cfg.jitter > 0.0 {
        let gains: Vec<f32> = (0..s[2])
            .map(|_| rng.uniform_in(1.0 - cfg.jitter, 1.0 + cfg.jitter) as f32)
            .collect();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v * gains[i % s[2]]).clamp(0.0, 1.0);
        }
    }
    let masks = masks.map(|m| MaskPair {
        fg: resample(&m.fg, &g, true),
        bg: resample(&m.bg, &g, true),
    });
    (out, masks)
}

/// Two independently augmented views of `samples`.
pub fn make_batch(samples: &[&Sample], patch: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<TrainBatch> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut views = Vec::with_capacity(2);
    for _ in 0..2 {
        let (images, masks): (Vec<_>, Vec<_>) = samples
            .iter()
            .map(|s| augment_pair(&s.image, s.masks.as_ref(), cfg, rng))
            .unzip();
        views.push(View::new(images, masks, patch)?);
    }
    let v1 = views.pop().expect("two views");
    let v0 = views.pop().expect("two views");
    Ok(TrainBatch {
        views: [v0, v1],
        labels: samples.iter().map(|s| s.label).collect(),
    })
}
