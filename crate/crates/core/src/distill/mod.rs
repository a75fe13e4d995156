//! EMA teacher/student self-distillation: projection heads, the
//! pretraining and invariant fine-tuning objectives, and the train step.

mod augment;
mod inspect;
mod model;
mod train;

use std::fmt;
use std::path::Path;

use crate::encoder::patchify_batch;
use crate::error::{Error, Result};
use crate::mixture::{foreground_image, mix_latents, mixture_loss, MaskPair, MixNorm, NoiseKind};
use crate::numerics::{read_tensor_file, write_tensor_file, Bound, ParamSet, Real, Rng, Tape, Tensor, Var};
use crate::partbank::{quality_terms, BankVars};

pub use augment::{augment_pair, make_batch, AugmentConfig};
pub use inspect::{foreground_iou, foreground_maps, inspect_maps, iou, to_gray, InspectMaps};
pub use model::{
    argmax, decays, extract_features, for_each_chunk, forward, init_model, predict, FeatureMode,
    ModelConfig, Outputs,
};
pub use train::{train_step, Phase, StepMetrics, TrainConfig, Trainer, METRICS_HEADER};

/// Floor applied to student probabilities before the log.
pub const LOG_EPS: f64 = 1e-12;
const NORMALIZATION_TOL: f64 = 1e-5;

/// Loss-term weights of both phases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub mix: f64,
    pub s: f64,
    pub o: f64,
    pub cls_inv: f64,
    pub p_inv: f64,
    /// Label cross-entropy through the logit head.
    pub sup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            mix: 1.0,
            s: 0.5,
            o: 0.5,
            cls_inv: 1.0,
            p_inv: 0.5,
            sup: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda-cls", self.cls),
            ("lambda-mix", self.mix),
            ("lambda-s", self.s),
            ("lambda-o", self.o),
            ("lambda-cls-inv", self.cls_inv),
            ("lambda-p-inv", self.p_inv),
            ("lambda-sup", self.sup),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Objective knobs that are not loss weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub power_iters: u32,
    pub mix_norm: MixNorm,
    /// Latent-code noise for the alignment loss; `None` disables it.
    pub noise: Option<NoiseKind>,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            power_iters: 2,
            mix_norm: MixNorm::L2,
            noise: Some(NoiseKind::Gaussian),
        }
    }
}

/// Weighted contribution `λ·term` of every loss term, and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub mix: f64,
    pub sparsity: f64,
    pub ortho: f64,
    pub cls_inv: f64,
    pub p_inv: f64,
    pub sup: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 8] = ["total", "cls", "mix", "sparsity", "ortho", "cls_inv", "p_inv", "sup"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.total,
            self.cls,
            self.mix,
            self.sparsity,
            self.ortho,
            self.cls_inv,
            self.p_inv,
            self.sup,
        ]
    }

    /// First term whose value is not finite.
    pub fn non_finite(&self) -> Option<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .skip(1)
            .chain(std::iter::once((&"total", self.total)))
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.values().map(|v| format!("{v:.6}"));
        write!(f, "{}", vals.join("\t"))
    }
}

/// Student and EMA teacher with the teacher-output centre.
#[derive(Clone, Debug)]
pub struct StudentTeacher<T: Real = f32> {
    pub model: ModelConfig,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    /// Running mean of teacher projections, `[out_dim]`.
    pub center: Tensor<T>,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub tau_s: f64,
    pub tau_t: f64,
}

impl<T: Real> StudentTeacher<T> {
    /// Teacher starts as a copy of the student, with a zero centre.
    pub fn new(model: ModelConfig, student: ParamSet<T>) -> Self {
        Self {
            center: Tensor::zeros([model.out_dim]),
            teacher: student.clone(),
            student,
            model,
            ema_momentum: 0.99,
            center_momentum: 0.9,
            tau_s: 0.1,
            tau_t: 0.04,
        }
    }

    /// `teacher ← m·teacher + (1 − m)·student`.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_momentum)
    }

    /// Moves the centre toward the batch mean of teacher projections.
    pub fn update_center(&mut self, teacher_proj: &[&Tensor<T>]) {
        let d = self.center.numel();
        let mut mean = vec![0.0f64; d];
        let mut rows = 0usize;
        for t in teacher_proj {
            for r in t.data().chunks(d) {
                for (m, &v) in mean.iter_mut().zip(r) {
                    *m += v.f64();
                }
                rows += 1;
            }
        }
        if rows == 0 {
            return;
        }
        let m = self.center_momentum;
        for (c, s) in self.center.data_mut().iter_mut().zip(mean) {
            *c = T::of(m * c.f64() + (1.0 - m) * s / rows as f64);
        }
    }

    /// `softmax((proj − centre) / τ_t)` per row.
    pub fn teacher_probs(&self, proj: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let x = tape.constant(proj.clone());
        let c = tape.constant(self.center.map(|v| -v));
        Ok((*x.add_row(c)?.softmax_rows(T::of(self.tau_t))?.value()).clone())
    }

    /// `softmax(proj / τ_s)` per row, on the tape.
    pub fn student_probs<'t>(&self, proj: Var<'t, T>) -> Result<Var<'t, T>> {
        proj.softmax_rows(T::of(self.tau_s))
    }

    /// Final-block part bank prefix.
    pub fn last_bank(&self) -> String {
        format!("block{}.parts", self.model.encoder.blocks - 1)
    }
}

impl StudentTeacher<f32> {
    /// Writes student, teacher and centre to one tensor file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let names: Vec<(String, &Tensor)> = self
            .student
            .iter()
            .map(|(n, p)| (format!("student/{n}"), &p.value))
            .chain(self.teacher.iter().map(|(n, p)| (format!("teacher/{n}"), &p.value)))
            .chain(std::iter::once(("center".to_string(), &self.center)))
            .collect();
        let items: Vec<(&str, &Tensor)> = names.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_tensor_file(path, &items)
    }

    /// Reads a pair written by [`StudentTeacher::save`]; the layout must
    /// match `model`. Momenta and temperatures take their defaults.
    pub fn load(path: &Path, model: ModelConfig) -> Result<Self> {
        let expected = init_model::<f32>(&model, &mut Rng::new(0))?;
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        let mut center = None;
        for (name, t) in read_tensor_file(path)? {
            if let Some(n) = name.strip_prefix("student/") {
                student.insert(n, t);
            } else if let Some(n) = name.strip_prefix("teacher/") {
                teacher.insert(n, t);
            } else if name == "center" {
                center = Some(t);
            } else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("unexpected tensor `{name}`"),
                });
            }
        }
        let center = center.ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "missing tensor `center`".into(),
        })?;
        if !student.same_layout(&expected) || !teacher.same_layout(&expected) || center.shape() != [model.out_dim] {
            return Err(Error::Config(format!(
                "checkpoint {} does not match the configured model architecture",
                path.display()
            )));
        }
        let mut pair = Self::new(model, student);
        pair.teacher = teacher;
        pair.center = center;
        Ok(pair)
    }
}

/// `teacher ← m·teacher + (1 − m)·student` over every parameter.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Config(format!("EMA momentum must lie in [0, 1], got {m}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::Contract("student and teacher parameter sets differ".into()));
    }
    let students: Vec<&Tensor<T>> = student.iter().map(|(_, p)| &p.value).collect();
    for ((_, t), s) in teacher.iter_mut().zip(students) {
        for (tv, &sv) in t.value.data_mut().iter_mut().zip(s.data()) {
            *tv = T::of(m * tv.f64() + (1.0 - m) * sv.f64());
        }
    }
    Ok(())
}

fn check_rows_normalized<T: Real>(p: &Tensor<T>, what: &str) -> Result<()> {
    let (_, n) = p.dims2()?;
    for (r, row) in p.data().chunks(n).enumerate() {
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|v| v.f64() < 0.0) {
            return Err(Error::Contract(format!(
                "{what} row {r} is not a probability vector (sums to {s})"
            )));
        }
    }
    Ok(())
}

/// `−Σ p_t log p_s`, averaged over rows; the teacher side is detached.
pub fn cls_distill_loss<'t, T: Real>(p_t: Var<'t, T>, p_s: Var<'t, T>) -> Result<Var<'t, T>> {
    check_rows_normalized(&p_t.value(), "teacher distribution")?;
    check_rows_normalized(&p_s.value(), "student distribution")?;
    let rows = p_t.shape()[0].max(1);
    let ce = p_t.detach().mul(p_s.log_clamped(T::of(LOG_EPS)))?.sum();
    Ok(ce.scale(T::of(-1.0 / rows as f64)))
}

/// Cross-entropy of softmaxed `logits` against integer labels.
pub fn label_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Result<Var<'t, T>> {
    let (rows, classes) = logits.value().dims2()?;
    if labels.len() != rows || labels.iter().any(|&l| l >= classes) {
        return Err(Error::Shape(format!("{} labels for {rows}x{classes} logits", labels.len())));
    }
    let onehot = Tensor::from_fn([rows, classes], |i| {
        if labels[i / classes] == i % classes {
            T::one()
        } else {
            T::zero()
        }
    });
    let p = logits.softmax_rows(T::one())?;
    cls_distill_loss(logits.tape().constant(onehot), p)
}

/// One augmented view of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct View<T: Real = f32> {
    pub images: Vec<Tensor<T>>,
    /// Stacked patches, `(B·N) × D_p`.
    pub patches: Tensor<T>,
    pub masks: Vec<Option<MaskPair<T>>>,
}

impl<T: Real> View<T> {
    pub fn new(images: Vec<Tensor<T>>, masks: Vec<Option<MaskPair<T>>>, patch: usize) -> Result<Self> {
        if images.len() != masks.len() {
            return Err(Error::Shape(format!("{} images but {} mask slots", images.len(), masks.len())));
        }
        let refs: Vec<&Tensor<T>> = images.iter().collect();
        let patches = patchify_batch(&refs, patch)?;
        Ok(Self {
            images,
            patches,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn cast<U: Real>(&self) -> View<U> {
        View {
            images: self.images.iter().map(Tensor::cast).collect(),
            patches: self.patches.cast(),
            masks: self.masks.iter().map(|m| m.as_ref().map(MaskPair::cast)).collect(),
        }
    }
}

/// Two views of the same images plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch<T: Real = f32> {
    pub views: [View<T>; 2],
    pub labels: Vec<usize>,
}

impl<T: Real> TrainBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cast<U: Real>(&self) -> TrainBatch<U> {
        TrainBatch {
            views: [self.views[0].cast(), self.views[1].cast()],
            labels: self.labels.clone(),
        }
    }
}

/// Per-term random streams of one step, so that toggling one term never
/// shifts another term's randomness.
#[derive(Clone, Copy, Debug)]
pub struct StepRngs {
    pub seed: u64,
    pub step: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Term {
    Batch = 0,
    Augment = 1,
    Noise0 = 2,
    Noise1 = 3,
    Power = 4,
}

impl StepRngs {
    pub fn get(&self, term: Term) -> Rng {
        Rng::stream(self.seed, self.step * 16 + term as u64)
    }
}

/// Teacher outputs for one view.
#[derive(Clone, Debug)]
pub struct TeacherOut<T: Real = f32> {
    pub proj: Tensor<T>,
    /// Foreground codes, `B × N`, without noise.
    pub fg: Tensor<T>,
}

pub fn teacher_forward<T: Real>(pair: &StudentTeacher<T>, view: &View<T>) -> Result<TeacherOut<T>> {
    let tape = Tape::no_grad();
    let bound = pair.teacher.bind(&tape, false);
    let b = view.len();
    let out = forward(&pair.model, &bound, tape.constant(view.patches.clone()), b)?;
    let bank = BankVars::from_bound(&bound, &pair.last_bank(), pair.model.encoder.fg_parts)?;
    let codes = mix_latents(out.features.last_d(), &bank, b, None)?;
    Ok(TeacherOut {
        proj: (*out.proj.value()).clone(),
        fg: (*codes.fg.value()).clone(),
    })
}

/// Loss on the tape plus its breakdown and the teacher projections used.
pub struct Objective<'t, T: Real = f32> {
    pub loss: Var<'t, T>,
    pub breakdown: LossBreakdown,
    pub teacher_proj: Vec<Tensor<T>>,
}

struct Accum<'t, T: Real> {
    loss: Option<Var<'t, T>>,
    breakdown: LossBreakdown,
}

impl<'t, T: Real> Accum<'t, T> {
    fn new() -> Self {
        Self {
            loss: None,
            breakdown: LossBreakdown::default(),
        }
    }

    fn add(&mut self, term: Var<'t, T>, lambda: f64, slot: fn(&mut LossBreakdown) -> &mut f64) -> Result<()> {
        let weighted = term.scale(T::of(lambda));
        *slot(&mut self.breakdown) = weighted.item().f64();
        self.loss = Some(match self.loss {
            Some(l) => l.add(weighted)?,
            None => weighted,
        });
        Ok(())
    }

    fn finish(mut self, tape: &'t Tape<T>, teacher_proj: Vec<Tensor<T>>) -> Objective<'t, T> {
        let loss = self
            .loss
            .unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())));
        self.breakdown.total = loss.item().f64();
        Objective {
            loss,
            breakdown: self.breakdown,
            teacher_proj,
        }
    }
}

/// Tags a numeric failure with the loss term that raised it.
fn in_term<R>(term: &str, r: Result<R>) -> Result<R> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("loss term `{term}`: {m}")),
        other => other,
    })
}

struct StudentPass<'t, T: Real> {
    out: Outputs<'t, T>,
}

fn student_forward<'t, T: Real>(
    pair: &StudentTeacher<T>,
    bound: &Bound<'t, T>,
    tape: &'t Tape<T>,
    patches: &Tensor<T>,
    batch: usize,
) -> Result<StudentPass<'t, T>> {
    let out = forward(&pair.model, bound, tape.constant(patches.clone()), batch)?;
    Ok(StudentPass { out })
}

/// Cross-view distillation: teacher view 1 → student view 2 and teacher
/// view 2 → student view 1, averaged.
fn cross_view_cls<'t, T: Real>(
    pair: &StudentTeacher<T>,
    tape: &'t Tape<T>,
    teacher: &[TeacherOut<T>; 2],
    student: &[StudentPass<'t, T>; 2],
) -> Result<Var<'t, T>> {
    let mut halves = Vec::with_capacity(2);
    for (t, s) in [(0, 1), (1, 0)] {
        let pt = tape.constant(pair.teacher_probs(&teacher[t].proj)?);
        let ps = pair.student_probs(student[s].out.proj)?;
        halves.push(cls_distill_loss(pt, ps)?);
    }
    Ok(halves[0].add(halves[1])?.scale(T::of(0.5)))
}

fn supervised<'t, T: Real>(student: &[StudentPass<'t, T>; 2], labels: &[usize]) -> Result<Option<Var<'t, T>>> {
    let (Some(l0), Some(l1)) = (student[0].out.logits, student[1].out.logits) else {
        return Ok(None);
    };
    let a = label_loss(l0, labels)?;
    let b = label_loss(l1, labels)?;
    Ok(Some(a.add(b)?.scale(T::of(0.5))))
}

/// Pretraining objective `λ_cls L_cls + λ_mix L_mix + L_Q(λ_s, λ_o)`, plus
/// `λ_sup` label cross-entropy when the model has a logit head.
///
/// `L_mix` and `L_Q` use the student's final block; `L_mix` is averaged
/// over both views.
pub fn pretrain_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    pair: &StudentTeacher<T>,
    batch: &TrainBatch<T>,
    weights: &LossWeights,
    opts: &LossOptions,
    rngs: StepRngs,
) -> Result<Objective<'t, T>> {
    weights.validate()?;
    let b = batch.len();
    let enc = &pair.model.encoder;
    let teacher = [teacher_forward(pair, &batch.views[0])?, teacher_forward(pair, &batch.views[1])?];
    let student = [
        student_forward(pair, bound, tape, &batch.views[0].patches, b)?,
        student_forward(pair, bound, tape, &batch.views[1].patches, b)?,
    ];
    let bank = BankVars::from_bound(bound, &pair.last_bank(), enc.fg_parts)?;
    let mut acc = Accum::new();
    if weights.cls > 0.0 {
        acc.add(in_term("cls", cross_view_cls(pair, tape, &teacher, &student))?, weights.cls, |l| &mut l.cls)?;
    }
    if weights.mix > 0.0 {
        let mut views = Vec::with_capacity(2);
        for (v, term) in [(0, Term::Noise0), (1, Term::Noise1)] {
            let mut rng = rngs.get(term);
            let noise = opts.noise.map(|k| (k, &mut rng));
            let codes = mix_latents(student[v].out.features.last_d(), &bank, b, noise)?;
            let masks: Vec<Option<&MaskPair<T>>> = batch.views[v].masks.iter().map(Option::as_ref).collect();
            let (h, w) = (enc.image_height, enc.image_width);
            views.push(in_term("mix", mixture_loss(&codes, &masks, enc.grid(), h, w, opts.mix_norm))?);
        }
        acc.add(views[0].add(views[1])?.scale(T::of(0.5)), weights.mix, |l| &mut l.mix)?;
    }
    if weights.s > 0.0 || weights.o > 0.0 {
        let mut rng = rngs.get(Term::Power);
        let (s, o) = in_term("ortho", quality_terms(&bank, 1.0, 1.0, opts.power_iters, &mut rng))?;
        if weights.s > 0.0 {
            acc.add(s, weights.s, |l| &mut l.sparsity)?;
        }
        if weights.o > 0.0 {
            acc.add(o, weights.o, |l| &mut l.ortho)?;
        }
    }
    if weights.sup > 0.0 {
        if let Some(sup) = in_term("sup", supervised(&student, &batch.labels))? {
            acc.add(sup, weights.sup, |l| &mut l.sup)?;
        }
    }
    Ok(acc.finish(tape, teacher.map(|t| t.proj).to_vec()))
}

/// Invariant losses for one view: the teacher sees `x`, the student sees
/// `x_f = x ⊙ clamp(I(L_F), 0, 1)` with `L_F` from the teacher pass.
///
/// Returns `(L_cls_inv, L_p_inv)`; the latent codes are softmaxed over the
/// patch positions before their cross-entropy.
pub fn invariant_losses<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    pair: &StudentTeacher<T>,
    view: &View<T>,
    teacher: &TeacherOut<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let enc = &pair.model.encoder;
    let b = view.len();
    let n = enc.n_patches();
    let masked: Vec<Tensor<T>> = view
        .images
        .iter()
        .enumerate()
        .map(|(i, x)| foreground_image(x, &teacher.fg.data()[i * n..(i + 1) * n], enc.grid()))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<T>> = masked.iter().collect();
    let xf = patchify_batch(&refs, enc.patch)?;
    let s = student_forward(pair, bound, tape, &xf, b)?;
    let pt = tape.constant(pair.teacher_probs(&teacher.proj)?);
    let cls_inv = in_term("cls_inv", pair.student_probs(s.out.proj).and_then(|ps| cls_distill_loss(pt, ps)))?;
    let bank = BankVars::from_bound(bound, &pair.last_bank(), enc.fg_parts)?;
    let codes = mix_latents(s.out.features.last_d(), &bank, b, None)?;
    let qt = tape.constant(teacher.fg.clone()).softmax_rows(T::one())?;
    let p_inv = in_term("p_inv", codes.fg.softmax_rows(T::one()).and_then(|qs| cls_distill_loss(qt, qs)))?;
    Ok((cls_inv, p_inv))
}

/// Fine-tuning objective `λ_cls L_cls + λ_cls_inv L_cls_inv + λ_p_inv L_p_inv`,
/// plus `λ_sup` label cross-entropy when the model has a logit head. The
/// invariant terms are averaged over both views.
pub fn finetune_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    bound: &Bound<'t, T>,
    pair: &StudentTeacher<T>,
    batch: &TrainBatch<T>,
    weights: &LossWeights,
) -> Result<Objective<'t, T>> {
    weights.validate()?;
    let b = batch.len();
    let teacher = [teacher_forward(pair, &batch.views[0])?, teacher_forward(pair, &batch.views[1])?];
    let student = [
        student_forward(pair, bound, tape, &batch.views[0].patches, b)?,
        student_forward(pair, bound, tape, &batch.views[1].patches, b)?,
    ];
    let mut acc = Accum::new();
    if weights.cls > 0.0 {
        acc.add(in_term("cls", cross_view_cls(pair, tape, &teacher, &student))?, weights.cls, |l| &mut l.cls)?;
    }
    if weights.cls_inv > 0.0 || weights.p_inv > 0.0 {
        let (c0, p0) = invariant_losses(tape, bound, pair, &batch.views[0], &teacher[0])?;
        let (c1, p1) = invariant_losses(tape, bound, pair, &batch.views[1], &teacher[1])?;
        if weights.cls_inv > 0.0 {
            acc.add(c0.add(c1)?.scale(T::of(0.5)), weights.cls_inv, |l| &mut l.cls_inv)?;
        }
        if weights.p_inv > 0.0 {
            acc.add(p0.add(p1)?.scale(T::of(0.5)), weights.p_inv, |l| &mut l.p_inv)?;
        }
    }
    if weights.sup > 0.0 {
        if let Some(sup) = in_term("sup", supervised(&student, &batch.labels))? {
            acc.add(sup, weights.sup, |l| &mut l.sup)?;
        }
    }
    Ok(acc.finish(tape, teacher.map(|t| t.proj).to_vec()))
}
