use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use partwise::distill::{AugmentConfig, FeatureMode, LossOptions, LossWeights, ModelConfig, Phase, TrainConfig};
use partwise::encoder::EncoderConfig;
use partwise::fewshot::{EvalSettings, Metric};
use partwise::mixture::{MixNorm, NoiseKind};
use partwise::numerics::AdamWConfig;
use partwise::synthdata::{GenConfig, SplitTag};
use partwise::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PARTWISE_SEED";

/// Every knob of a run, as one flat table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub seed: u64,

    pub classes: usize,
    pub textures: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    pub image_size: usize,
    pub rho: f64,
    pub mask_coverage: f64,
    pub mask_corruption: f64,

    pub patch: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub parts: usize,
    pub fg_parts: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub out_dim: usize,
    pub supervised: bool,

    pub lambda_cls: f64,
    pub lambda_mix: f64,
    pub lambda_s: f64,
    pub lambda_o: f64,
    pub lambda_cls_inv: f64,
    pub lambda_p_inv: f64,
    pub lambda_sup: f64,
    pub power_iters: u32,
    pub mix_norm: String,
    pub noise: String,

    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_grad: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub tau_s: f64,
    pub tau_t: f64,

    pub min_scale: f64,
    pub flip: bool,
    pub jitter: f64,

    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub metric: String,
    pub features: String,
    pub eval_split: String,

    pub sample_index: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GenConfig::default();
        let m = ModelConfig::default();
        let e = m.encoder;
        let w = LossWeights::default();
        let o = LossOptions::default();
        let t = TrainConfig::default();
        let a = t.augment;
        let ev = EvalSettings::default();
        Self {
            data_dir: "data".into(),
            out_dir: "run".into(),
            checkpoint: None,
            seed: 0,
            classes: g.classes,
            textures: g.textures,
            train_per_class: g.train_per_class,
            eval_per_class: g.eval_per_class,
            image_size: g.image_size,
            rho: g.rho,
            mask_coverage: g.mask_coverage,
            mask_corruption: g.mask_corruption,
            patch: e.patch,
            model_dim: e.model_dim,
            heads: e.heads,
            blocks: e.blocks,
            parts: e.parts,
            fg_parts: e.fg_parts,
            mlp_ratio: e.mlp_ratio,
            head_hidden: m.head_hidden,
            out_dim: m.out_dim,
            supervised: false,
            lambda_cls: w.cls,
            lambda_mix: w.mix,
            lambda_s: w.s,
            lambda_o: w.o,
            lambda_cls_inv: w.cls_inv,
            lambda_p_inv: w.p_inv,
            lambda_sup: w.sup,
            power_iters: o.power_iters,
            mix_norm: o.mix_norm.name().into(),
            noise: o.noise.map_or("none", NoiseKind::name).into(),
            steps: t.steps,
            batch_size: t.batch_size,
            lr_start: t.lr_start,
            lr_end: t.lr_end,
            wd_start: t.wd_start,
            wd_end: t.wd_end,
            beta1: t.adamw.beta1,
            beta2: t.adamw.beta2,
            adam_eps: t.adamw.eps,
            clip_grad: t.adamw.clip_grad,
            ema_momentum: 0.99,
            center_momentum: 0.9,
            tau_s: 0.1,
            tau_t: 0.04,
            min_scale: a.min_scale,
            flip: a.flip,
            jitter: a.jitter,
            way: g.classes.min(ev.way),
            shot: ev.shot,
            queries: ev.queries,
            episodes: ev.episodes,
            metric: ev.metric.name().into(),
            features: "cls".into(),
            eval_split: SplitTag::Original.name().into(),
            sample_index: 0,
        }
    }
}

/// Command-line mirror of [`RunConfig`]; every flag is optional and
/// overrides the file value.
#[derive(Args, Clone, Debug, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct Overrides {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub textures: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_per_class: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_coverage: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_corruption: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fg_parts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervised: Option<bool>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cls: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_mix: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_o: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_cls_inv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_p_inv: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_sup: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_iters: Option<u32>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mix_norm: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_start: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_end: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wd_start: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wd_end: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center_momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_s: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_t: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub way: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shot: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub episodes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_split: Option<String>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<usize>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Defaults, then the config file, then flags, then `PARTWISE_SEED`.
pub fn resolve(file: Option<&Path>, flags: &Overrides, env_seed: Option<String>) -> Result<RunConfig> {
    let mut table = toml::Table::try_from(RunConfig::default()).map_err(config_err)?;
    // Optional keys are absent from the defaults but still legal.
    let optional = ["checkpoint"];
    let mut layer = |src: toml::Table, origin: &str| -> Result<()> {
        for (k, v) in src {
            if !table.contains_key(&k) && !optional.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key `{k}` in {origin}")));
            }
            table.insert(k, v);
        }
        Ok(())
    };
    if let Some(path) = file {
        let text = fs::read_to_string(path)?;
        let parsed: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        layer(parsed, &path.display().to_string())?;
    }
    layer(toml::Table::try_from(flags).map_err(config_err)?, "flags")?;
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{s}`")))?;
        layer(toml::Table::from_iter([("seed".to_string(), toml::Value::Integer(seed as i64))]), SEED_ENV)?;
    }
    let cfg: RunConfig = table.try_into().map_err(config_err)?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.model_config().validate()?;
        self.train_config(Phase::Pretrain)?.validate()?;
        self.eval_settings()?;
        self.feature_mode()?;
        self.eval_split()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        for (name, v) in [
            ("ema-momentum", self.ema_momentum),
            ("center-momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("tau-s", self.tau_s), ("tau-t", self.tau_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.power_iters == 0 {
            return Err(Error::Config("power-iters must be at least 1".into()));
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            classes: self.classes,
            textures: self.textures,
            train_per_class: self.train_per_class,
            eval_per_class: self.eval_per_class,
            image_size: self.image_size,
            rho: self.rho,
            mask_coverage: self.mask_coverage,
            mask_corruption: self.mask_corruption,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: self.image_size,
                image_width: self.image_size,
                channels: 3,
                patch: self.patch,
                model_dim: self.model_dim,
                heads: self.heads,
                blocks: self.blocks,
                parts: self.parts,
                fg_parts: self.fg_parts,
                mlp_ratio: self.mlp_ratio,
            },
            head_hidden: self.head_hidden,
            out_dim: self.out_dim,
            classes: if self.supervised { self.classes } else { 0 },
        }
    }

    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig> {
        let noise = match self.noise.as_str() {
            "none" => None,
            s => Some(s.parse::<NoiseKind>()?),
        };
        Ok(TrainConfig {
            phase,
            steps: self.steps,
            batch_size: self.batch_size,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            wd_start: self.wd_start,
            wd_end: self.wd_end,
            weights: LossWeights {
                cls: self.lambda_cls,
                mix: self.lambda_mix,
                s: self.lambda_s,
                o: self.lambda_o,
                cls_inv: self.lambda_cls_inv,
                p_inv: self.lambda_p_inv,
                sup: self.lambda_sup,
            },
            options: LossOptions {
                power_iters: self.power_iters,
                mix_norm: self.mix_norm.parse::<MixNorm>()?,
                noise,
            },
            augment: AugmentConfig {
                min_scale: self.min_scale,
                flip: self.flip,
                jitter: self.jitter,
            },
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                clip_grad: self.clip_grad,
            },
            seed: self.seed,
        })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        Ok(EvalSettings {
            way: self.way,
            shot: self.shot,
            queries: self.queries,
            episodes: self.episodes,
            metric: self.metric.parse::<Metric>()?,
            seed: self.seed,
        })
    }

    pub fn feature_mode(&self) -> Result<FeatureMode> {
        match self.features.as_str() {
            "cls" => Ok(FeatureMode::Cls),
            "cls-pooled" => Ok(FeatureMode::ClsAndPooled),
            s => Err(Error::Config(format!("unknown features `{s}`; expected cls or cls-pooled"))),
        }
    }

    pub fn eval_split(&self) -> Result<SplitTag> {
        SplitTag::parse(&self.eval_split)
            .ok_or_else(|| Error::Config(format!("unknown split `{}`", self.eval_split)))
    }
}
