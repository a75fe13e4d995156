use std::fmt;
use std::str::FromStr;

use super::{
    decays, finetune_loss, make_batch, pretrain_loss, AugmentConfig, LossBreakdown, LossOptions, LossWeights,
    StepRngs, StudentTeacher, Term, TrainBatch,
};
use crate::error::{Error, Result};
use crate::numerics::{cosine_schedule, AdamW, AdamWConfig, Real, Tape};
use crate::partbank::{orthogonality_metric, sparsity_metric};
use crate::synthdata::Sample;

/// Columns of the per-step metrics table.
pub const METRICS_HEADER: &str =
    "step\tphase\ttotal\tcls\tmix\tsparsity\tortho\tcls_inv\tp_inv\tsup\tgrad_norm\tp_l1\tgram_l1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub weights: LossWeights,
    pub options: LossOptions,
    pub augment: AugmentConfig,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Pretrain,
            steps: 200,
            batch_size: 8,
            lr_start: 5e-4,
            lr_end: 1e-5,
            wd_start: 0.04,
            wd_end: 0.4,
            weights: LossWeights::default(),
            options: LossOptions::default(),
            augment: AugmentConfig::default(),
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for (name, v) in [
            ("lr-start", self.lr_start),
            ("lr-end", self.lr_end),
            ("wd-start", self.wd_start),
            ("wd-end", self.wd_end),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        self.weights.validate()?;
        self.augment.validate()
    }
}

/// One row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub grad_norm: f64,
    /// `|P|_1` of the final-block bank before the update.
    pub p_l1: f64,
    /// `|P_F P_F^T - I|_1` of the final-block bank before the update.
    pub gram_l1: f64,
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.phase, self.losses, self.grad_norm, self.p_l1, self.gram_l1
        )
    }
}

/// One optimisation step on `batch`: forward, backward, AdamW with the
/// scheduled learning rate and weight decay, then the teacher EMA and
/// centre updates.
pub fn train_step<T: Real>(
    pair: &mut StudentTeacher<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    batch: &TrainBatch<T>,
    step: usize,
) -> Result<StepMetrics> {
    let bank = pair.student.get(&format!("{}.P", pair.last_bank()))?;
    let p_l1 = sparsity_metric(bank);
    let gram_l1 = orthogonality_metric(bank, pair.model.encoder.fg_parts);
    let rngs = StepRngs {
        seed: cfg.seed,
        step: step as u64,
    };
    let tape = Tape::new();
    let bound = pair.student.bind(&tape, true);
    let obj = match cfg.phase {
        Phase::Pretrain => pretrain_loss(&tape, &bound, pair, batch, &cfg.weights, &cfg.options, rngs)?,
        Phase::Finetune => finetune_loss(&tape, &bound, pair, batch, &cfg.weights)?,
    };
    if let Some(term) = obj.breakdown.non_finite() {
        return Err(Error::Numeric(format!("loss term `{term}` is not finite at step {step}")));
    }
    pair.student.backward(&bound, obj.loss)?;
    let lr = cosine_schedule(cfg.lr_start, cfg.lr_end, step, cfg.steps);
    let wd = cosine_schedule(cfg.wd_start, cfg.wd_end, step, cfg.steps);
    let grad_norm = opt.step(&mut pair.student, lr, wd);
    if !grad_norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is not finite at step {step}")));
    }
    pair.ema_update()?;
    let refs: Vec<_> = obj.teacher_proj.iter().collect();
    pair.update_center(&refs);
    Ok(StepMetrics {
        step,
        phase: cfg.phase,
        losses: obj.breakdown,
        grad_norm,
        p_l1,
        gram_l1,
    })
}

/// Drives [`train_step`] over a sample set with seeded batch draws.
pub struct Trainer {
    pub pair: StudentTeacher,
    pub config: TrainConfig,
    opt: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(pair: StudentTeacher, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        pair.model.validate()?;
        Ok(Self {
            opt: AdamW::new(config.adamw, decays),
            pair,
            config,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Batch of step `step`: `batch_size` distinct samples (or all of them
    /// when fewer), with two augmented views.
    pub fn batch_for(&self, samples: &[Sample], step: usize) -> Result<TrainBatch> {
        if samples.is_empty() {
            return Err(Error::Config("no training samples".into()));
        }
        let rngs = StepRngs {
            seed: self.config.seed,
            step: step as u64,
        };
        let k = self.config.batch_size.min(samples.len());
        let picked: Vec<&Sample> = rngs
            .get(Term::Batch)
            .choose_distinct(samples.len(), k)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let mut aug = rngs.get(Term::Augment);
        make_batch(&picked, self.pair.model.encoder.patch, &self.config.augment, &mut aug)
    }

    pub fn step(&mut self, samples: &[Sample]) -> Result<StepMetrics> {
        let batch = self.batch_for(samples, self.step)?;
        let m = train_step(&mut self.pair, &mut self.opt, &self.config, &batch, self.step)?;
        self.step += 1;
        Ok(m)
    }

    /// Runs the remaining steps, handing each row of metrics to `log`.
    pub fn run(&mut self, samples: &[Sample], mut log: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let m = self.step(samples)?;
            log(&m)?;
        }
        Ok(())
    }
}
