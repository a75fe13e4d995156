//! Synthetic shapes-on-textures data with a tunable background/class
//! correlation, partial and corrupted mask supervision, and
//! background-swap evaluation splits.

mod io;
pub mod render;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::MaskPair;
use crate::numerics::{Rng, Tensor};
use render::{composite, ShapeSpec, TextureSpec, SHAPES, TEXTURES};

pub use io::{read_dataset, write_dataset, DatasetDir, MANIFEST};

/// Side of the square blocks flipped by mask corruption.
const CORRUPTION_BLOCK: usize = 4;

// Stream ids of the generator family keyed by the config seed.
const STREAM_MASK_PICK: u64 = 1;
const STREAM_TRAIN: u64 = 1 << 32;
const STREAM_POOL: u64 = 2 << 32;
const STREAM_SPLITS: u64 = 3 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitTag {
    Train,
    Original,
    MSame,
    MRand,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Original => "original",
            SplitTag::MSame => "m_same",
            SplitTag::MRand => "m_rand",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SplitTag::Train, SplitTag::Original, SplitTag::MSame, SplitTag::MRand]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub textures: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    /// Probability that a training background is the class-assigned texture.
    pub rho: f64,
    /// Fraction of training samples that carry masks.
    pub mask_coverage: f64,
    /// Fraction of mask pixels flipped, in contiguous blocks.
    pub mask_corruption: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            textures: 8,
            train_per_class: 500,
            eval_per_class: 100,
            image_size: 32,
            rho: 0.95,
            mask_coverage: 1.0,
            mask_corruption: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 || self.classes > SHAPES.len() {
            return bad(format!("classes must be in 2..={}, got {}", SHAPES.len(), self.classes));
        }
        if self.textures < self.classes || self.textures > TEXTURES.len() {
            return bad(format!(
                "textures must be in {}..={}, got {}",
                self.classes,
                TEXTURES.len(),
                self.textures
            ));
        }
        for (name, v) in [
            ("rho", self.rho),
            ("mask-coverage", self.mask_coverage),
            ("mask-corruption", self.mask_corruption),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.image_size == 0 || self.train_per_class == 0 {
            return bad("image size and per-class train count must be positive".into());
        }
        Ok(())
    }

    pub fn train_count(&self) -> usize {
        self.classes * self.train_per_class
    }

    pub fn eval_count(&self) -> usize {
        self.classes * self.eval_per_class
    }
}

/// Texture assigned to a class; the remaining textures are assigned to none.
pub fn class_texture(class: usize) -> usize {
    class
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `H × W × 3` in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    pub masks: Option<MaskPair>,
    pub bg_id: usize,
    pub split: SplitTag,
    /// Foreground instance id, unique within a generated dataset.
    pub instance: u64,
}

/// A held-out foreground kept separate from its background so it can be
/// recomposited.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolItem {
    pub instance: u64,
    pub label: usize,
    pub shape: ShapeSpec,
    /// Anti-aliased coverage, `H·W`.
    pub alpha: Vec<f64>,
    pub bg: TextureSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<Sample>,
    pub pool: Vec<PoolItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplits {
    pub original: Vec<Sample>,
    pub m_same: Vec<Sample>,
    pub m_rand: Vec<Sample>,
}

fn support_mask(alpha: &[f64], size: usize) -> Tensor {
    let data = alpha.iter().map(|&a| if a > 0.0 { 1.0 } else { 0.0 }).collect();
    Tensor::new([size, size], data).expect("mask shape")
}

fn draw_background(label: usize, cfg: &GenConfig, rng: &mut Rng) -> usize {
    let own = class_texture(label);
    if rng.bernoulli(cfg.rho) {
        own
    } else {
        let j = rng.below(cfg.textures - 1);
        if j >= own {
            j + 1
        } else {
            j
        }
    }
}

/// Flips `round(fraction · H·W)` pixels of `mask` in aligned square blocks
/// visited in random order; the last block may be flipped partially.
pub fn corrupt_mask(mask: &mut Tensor, fraction: f64, rng: &mut Rng) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut remaining = (fraction * (h * w) as f64).round() as usize;
    let (bh, bw) = (h.div_ceil(CORRUPTION_BLOCK), w.div_ceil(CORRUPTION_BLOCK));
    let mut blocks: Vec<usize> = (0..bh * bw).collect();
    rng.shuffle(&mut blocks);
    let data = mask.data_mut();
    for blk in blocks {
        if remaining == 0 {
            break;
        }
        let (by, bx) = (blk / bw * CORRUPTION_BLOCK, blk % bw * CORRUPTION_BLOCK);
        for y in by..(by + CORRUPTION_BLOCK).min(h) {
            for x in bx..(bx + CORRUPTION_BLOCK).min(w) {
                if remaining == 0 {
                    break;
                }
                data[y * w + x] = 1.0 - data[y * w + x];
                remaining -= 1;
            }
        }
    }
}

fn to_image(pixels: Vec<f64>, size: usize) -> Tensor {
    Tensor::new([size, size, 3], pixels.into_iter().map(|v| v as f32).collect()).expect("image shape")
}

/// Generates the training set and the held-out foreground pool.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.train_count();
    let size = cfg.image_size;
    let with_masks = (cfg.mask_coverage * n as f64).round() as usize;
    let mut masked = vec![false; n];
    for i in Rng::stream(cfg.seed, STREAM_MASK_PICK).choose_distinct(n, with_masks) {
        masked[i] = true;
    }
    let train = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::stream(cfg.seed, STREAM_TRAIN + i as u64);
            let label = i % cfg.classes;
            let shape = ShapeSpec::sample(label, size, &mut rng);
            let bg_id = draw_background(label, cfg, &mut rng);
            let tex = TextureSpec::sample(bg_id, &mut rng);
            let alpha = shape.coverage(size);
            let image = to_image(composite(&alpha, shape.color, &tex.render(size)), size);
            let masks = masked[i].then(|| {
                let mut fg = support_mask(&alpha, size);
                if cfg.mask_corruption > 0.0 {
                    corrupt_mask(&mut fg, cfg.mask_corruption, &mut rng);
                }
                MaskPair::from_fg(fg)
            });
            Sample {
                image,
                label,
                masks,
                bg_id,
                split: SplitTag::Train,
                instance: i as u64,
            }
        })
        .collect();
    let pool = (0..cfg.eval_count())
        .into_par_iter()
        .map(|j| {
            let mut rng = Rng::stream(cfg.seed, STREAM_POOL + j as u64);
            let label = j % cfg.classes;
            let shape = ShapeSpec::sample(label, size, &mut rng);
            let bg_id = draw_background(label, cfg, &mut rng);
            PoolItem {
                instance: (n + j) as u64,
                label,
                alpha: shape.coverage(size),
                shape,
                bg: TextureSpec::sample(bg_id, &mut rng),
            }
        })
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        train,
        pool,
    })
}

/// Background textures admissible for a pool item in each swap split.
pub fn admissible_backgrounds(label: usize, classes: usize, split: SplitTag) -> Vec<usize> {
    match split {
        SplitTag::MSame => vec![class_texture(label)],
        SplitTag::MRand => (0..classes)
            .filter(|&c| c != label)
            .map(class_texture)
            .collect(),
        SplitTag::Train | SplitTag::Original => Vec::new(),
    }
}

/// Builds ORIGINAL, M-SAME and M-RAND from the pool.
///
/// All three share each item's foreground and label; M-SAME draws a fresh
/// background of the item's own class texture, M-RAND one of another
/// class's texture. Every eval sample carries its exact mask.
pub fn make_eval_splits(pool: &[PoolItem], classes: usize, size: usize, seed: u64) -> Result<EvalSplits> {
    let distinct = {
        let mut l: Vec<usize> = pool.iter().map(|p| p.label).collect();
        l.sort_unstable();
        l.dedup();
        l.len()
    };
    if classes < 2 || distinct < 2 {
        return Err(Error::Config(
            "background-swap splits need at least two classes in the pool".into(),
        ));
    }
    let build = |item: &PoolItem, split: SplitTag| -> Sample {
        let tex = match split {
            SplitTag::Original => item.bg.clone(),
            _ => {
                let mut rng = Rng::stream(seed, STREAM_SPLITS + 2 * item.instance + (split == SplitTag::MRand) as u64);
                let choices = admissible_backgrounds(item.label, classes, split);
                let id = choices[rng.below(choices.len())];
                TextureSpec::sample(id, &mut rng)
            }
        };
        Sample {
            image: to_image(composite(&item.alpha, item.shape.color, &tex.render(size)), size),
            label: item.label,
            masks: Some(MaskPair::from_fg(support_mask(&item.alpha, size))),
            bg_id: tex.texture,
            split,
            instance: item.instance,
        }
    };
    let make = |split| pool.par_iter().map(|it| build(it, split)).collect::<Vec<_>>();
    Ok(EvalSplits {
        original: make(SplitTag::Original),
        m_same: make(SplitTag::MSame),
        m_rand: make(SplitTag::MRand),
    })
}

/// BG-GAP: accuracy on M-SAME minus accuracy on M-RAND, in points.
///
/// Rounded to 1e-9 so decimal inputs give decimal outputs.
pub fn bg_gap(acc_same: f64, acc_rand: f64) -> f64 {
    ((acc_same - acc_rand) * 1e9).round() / 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_flips_exact_count() {
        let mut m = Tensor::zeros([10, 10]);
        corrupt_mask(&mut m, 0.37, &mut Rng::new(4));
        assert_eq!(m.sum(), 37.0);
    }

    #[test]
    fn invalid_fraction_rejected() {
        let cfg = GenConfig {
            rho: 1.5,
            ..GenConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }
}
