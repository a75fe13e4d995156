//! Central finite-difference checks of every differentiable operation and
//! both training objectives, in f64 on toy dimensions.

use super::{gradcheck, project, rand_in, randn};
use partwise::distill::{
    cls_distill_loss, finetune_loss, init_model, label_loss, pretrain_loss, LossOptions, LossWeights, ModelConfig,
    StepRngs, StudentTeacher, TrainBatch, View,
};
use partwise::encoder::{encode, init_encoder, multi_head, self_attention, EncoderConfig};
use partwise::mixture::{interpolate, mix_latents, mixture_loss, MaskPair, MixNorm};
use partwise::numerics::{Bound, Tape, Var};
use partwise::partbank::{distance_maps, gram_residual, quality_loss, spectral_norm_power, BankVars};
use partwise::{Rng, Tensor};

pub struct Check {
    pub name: String,
    pub error: f64,
}

fn check<F>(out: &mut Vec<Check>, name: impl Into<String>, inputs: &[Tensor<f64>], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    out.push(Check {
        name: name.into(),
        error: gradcheck(inputs, f),
    });
}

fn elementwise(out: &mut Vec<Check>) {
    let a = randn(&[3, 4], 1);
    let b = randn(&[3, 4], 2);
    let pos = rand_in(&[3, 4], 0.5, 2.0, 3);
    check(out, "add", &[a.clone(), b.clone()], |_, v| project(v[0].add(v[1]).unwrap(), 1));
    check(out, "sub", &[a.clone(), b.clone()], |_, v| project(v[0].sub(v[1]).unwrap(), 2));
    check(out, "mul", &[a.clone(), b.clone()], |_, v| project(v[0].mul(v[1]).unwrap(), 3));
    check(out, "div", &[a.clone(), pos.clone()], |_, v| project(v[0].div(v[1]).unwrap(), 4));
    check(out, "square", &[a.clone()], |_, v| project(v[0].square().unwrap(), 5));
    check(out, "scale", &[a.clone()], |_, v| project(v[0].scale(-1.7), 6));
    check(out, "offset", &[a.clone()], |_, v| project(v[0].offset(0.3).square().unwrap(), 7));
    check(out, "sqrt", &[pos.clone()], |_, v| project(v[0].sqrt(), 8));
    check(out, "exp", &[a.clone()], |_, v| project(v[0].exp(), 9));
    check(out, "log", &[pos], |_, v| project(v[0].log_clamped(1e-12), 10));
    check(out, "gelu", &[a.clone()], |_, v| project(v[0].gelu(), 11));
    // Away from the kink at zero.
    let away = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    check(out, "abs", &[away], |_, v| project(v[0].abs(), 12));
}

fn layout(out: &mut Vec<Check>) {
    let a = randn(&[4, 3], 20);
    let row = randn(&[3], 21);
    check(out, "sum", &[a.clone()], |_, v| v[0].square().unwrap().sum());
    check(out, "mean", &[a.clone()], |_, v| v[0].square().unwrap().mean());
    check(out, "sum_rows", &[a.clone()], |_, v| project(v[0].sum_rows().unwrap(), 22));
    check(out, "add_row", &[a.clone(), row], |_, v| project(v[0].add_row(v[1]).unwrap(), 23));
    check(out, "transpose", &[a.clone()], |_, v| project(v[0].t().unwrap(), 24));
    check(out, "reshape", &[a.clone()], |_, v| project(v[0].reshape([2, 6]).unwrap(), 25));
    check(out, "slice_rows", &[a.clone()], |_, v| project(v[0].slice_rows(1, 3).unwrap(), 26));
    check(out, "slice_cols", &[a.clone()], |_, v| project(v[0].slice_cols(1, 3).unwrap(), 27));
    check(out, "gather_rows", &[a.clone()], |_, v| {
        project(v[0].gather_rows(vec![3, 0, 3, 1].into()).unwrap(), 28)
    });
    let b = randn(&[2, 3], 29);
    check(out, "concat_rows", &[a, b], |_, v| project(Var::concat_rows(&[v[0], v[1]]).unwrap(), 30));
}

fn dense(out: &mut Vec<Check>) {
    let a = randn(&[3, 4], 40);
    let b = randn(&[4, 5], 41);
    check(out, "matmul", &[a.clone(), b], |_, v| project(v[0].matmul(v[1]).unwrap(), 42));
    for temp in [1.0, 0.1] {
        check(out, format!("softmax_rows(T={temp})"), &[a.clone()], move |_, v| {
            project(v[0].softmax_rows(temp).unwrap(), 43)
        });
    }
    let g = rand_in(&[4], 0.5, 1.5, 44);
    let bias = randn(&[4], 45);
    check(out, "layer_norm", &[a, g, bias], |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5).unwrap(), 46));
    for (batch, tokens, heads) in [(1, 3, 1), (2, 3, 2)] {
        let qkv = randn(&[batch * tokens, 12], 50 + heads as u64);
        check(out, format!("attention(heads={heads})"), &[qkv], move |_, v| {
            project(v[0].attention(batch, tokens, heads).unwrap().0, 51)
        });
    }
    let z = randn(&[3, 4], 52);
    let u = randn(&[4, 12], 53).map(|x| 0.5 * x);
    let umsa = randn(&[4, 4], 54);
    check(out, "self_attention", &[z.clone(), u.clone()], |_, v| project(self_attention(v[0], v[1]).unwrap(), 55));
    check(out, "multi_head", &[z, u, umsa], |_, v| project(multi_head(v[0], 2, v[1], v[2]).unwrap(), 56));
}

fn bank_vars<'t>(tape: &'t Tape<f64>, p: Var<'t, f64>) -> BankVars<'t, f64> {
    BankVars {
        p,
        alpha: tape.constant(Tensor::full([2], 0.5)),
        beta: tape.constant(Tensor::full([p.shape()[0] - 2], 0.5)),
        n_f: 2,
    }
}

fn parts(out: &mut Vec<Check>) {
    let p = randn(&[5, 4], 31).map(|v| 0.7 * v);
    let patches = randn(&[6, 4], 32);
    check(out, "distance_maps", &[p.clone(), patches], |tape, v| {
        project(distance_maps(v[1], &bank_vars(tape, v[0])).unwrap(), 33)
    });
    check(out, "gram_residual", &[p.clone()], |_, v| project(gram_residual(v[0]).unwrap(), 34));
    // AD holds the power vector fixed, so it must be converged.
    check(out, "spectral_norm", &[p.clone()], |_, v| {
        let m = gram_residual(v[0]).unwrap();
        spectral_norm_power(m, 300, &mut Rng::new(35)).unwrap().sigma
    });
    check(out, "quality_loss", &[p], |tape, v| {
        quality_loss(&bank_vars(tape, v[0]), 0.5, 0.5, 300, &mut Rng::new(4)).unwrap()
    });
}

fn mask(h: usize, w: usize, seed: u64) -> MaskPair<f64> {
    let mut rng = Rng::new(seed);
    MaskPair::from_fg(Tensor::from_fn([h, w], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }))
}

fn mixture(out: &mut Vec<Check>) {
    let codes = randn(&[2, 4], 60);
    check(out, "interpolate", &[codes], |_, v| project(interpolate(v[0], (2, 2), 4, 4).unwrap(), 61));

    let patches = randn(&[8, 4], 15);
    let m0 = mask(4, 4, 16);
    let m1 = mask(4, 4, 17);
    let p = randn(&[3, 4], 18).map(|v| 0.5 * v);
    let alpha = rand_in(&[2], 0.2, 0.8, 19);
    let beta = rand_in(&[1], 0.2, 0.8, 20);
    for kind in [MixNorm::L2, MixNorm::L2Squared, MixNorm::Cosine] {
        let inputs = [p.clone(), alpha.clone(), beta.clone()];
        check(out, format!("mixture_loss({})", kind.name()), &inputs, |tape, v| {
            let b = BankVars { p: v[0], alpha: v[1], beta: v[2], n_f: 2 };
            let d = distance_maps(tape.constant(patches.clone()), &b).unwrap();
            let codes = mix_latents(d, &b, 2, None).unwrap();
            mixture_loss(&codes, &[Some(&m0), Some(&m1)], (2, 2), 4, 4, kind).unwrap()
        });
    }
}

fn heads(out: &mut Vec<Check>) {
    let a = randn(&[2, 5], 70);
    let b = randn(&[2, 5], 71);
    // The teacher side is detached, so only the student is an input.
    let pt = a.clone();
    check(out, "cls_distill_loss", &[b], |tape, v| {
        let pt = tape.constant(pt.clone()).softmax_rows(0.5).unwrap();
        let ps = v[0].softmax_rows(1.0).unwrap();
        cls_distill_loss(pt, ps).unwrap()
    });
    check(out, "label_loss", &[a], |_, v| label_loss(v[0], &[3, 1]).unwrap());
}

fn bound_from<'t>(names: &[String], vars: &[Var<'t, f64>]) -> Bound<'t, f64> {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

fn encoder(out: &mut Vec<Check>) {
    let cfg = EncoderConfig {
        image_height: 4,
        image_width: 4,
        channels: 2,
        patch: 2,
        model_dim: 8,
        heads: 2,
        blocks: 2,
        parts: 3,
        fg_parts: 2,
        mlp_ratio: 2,
    };
    let ps = init_encoder::<f64>(&cfg, &mut Rng::new(5)).unwrap();
    let names: Vec<String> = ps.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = ps.iter().map(|(_, p)| p.value.clone()).collect();
    let patches = randn(&[4, 8], 6);
    // Small contraction weights keep finite-difference round-off off the floor.
    let weights = randn(&[5, 8], 7).map(|v| 0.1 * v);
    check(out, "encode", &inputs, |tape, vars| {
        let f = encode(&cfg, &bound_from(&names, vars), tape.constant(patches.clone()), 1).unwrap();
        f.tokens.mul(tape.constant(weights.clone())).unwrap().sum()
    });
}

pub fn toy_model(classes: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 4,
            image_width: 4,
            channels: 3,
            patch: 2,
            model_dim: 8,
            heads: 2,
            blocks: 1,
            parts: 3,
            fg_parts: 2,
            mlp_ratio: 2,
        },
        head_hidden: 6,
        out_dim: 5,
        classes,
    }
}

/// Student from a fresh init; the teacher is nudged away from it and the
/// centre is nonzero so neither side is degenerate.
pub fn toy_pair(seed: u64, classes: usize) -> StudentTeacher<f64> {
    let cfg = toy_model(classes);
    let mut pair = StudentTeacher::new(cfg, init_model::<f64>(&cfg, &mut Rng::new(seed)).unwrap());
    let mut rng = Rng::new(seed + 100);
    for (_, p) in pair.teacher.iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.05 * rng.gaussian();
        }
    }
    pair.center = randn(&[cfg.out_dim], seed + 200).map(|v| 0.1 * v);
    pair
}

pub fn toy_view(seed: u64, masks: bool) -> View<f64> {
    let images: Vec<Tensor<f64>> = (0..2).map(|i| rand_in(&[4, 4, 3], 0.0, 1.0, seed * 10 + i)).collect();
    let masks = (0..2)
        .map(|i| {
            masks.then(|| {
                let mut rng = Rng::new(seed * 10 + 5 + i);
                MaskPair::from_fg(Tensor::from_fn([4, 4], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }))
            })
        })
        .collect();
    View::new(images, masks, 2).unwrap()
}

pub fn toy_batch(seed: u64, masks: bool) -> TrainBatch<f64> {
    TrainBatch {
        views: [toy_view(seed, masks), toy_view(seed + 1, masks)],
        labels: vec![0, 2],
    }
}

fn objectives(out: &mut Vec<Check>) {
    let pair = toy_pair(10, 3);
    let batch = toy_batch(10, true);
    let names: Vec<String> = pair.student.names().map(String::from).collect();
    let inputs: Vec<Tensor<f64>> = pair.student.iter().map(|(_, p)| p.value.clone()).collect();
    let opts = LossOptions { power_iters: 300, ..LossOptions::default() };
    let w = LossWeights::default();
    let rngs = StepRngs { seed: 11, step: 3 };
    for pretrain in [true, false] {
        let name = if pretrain { "pretrain objective" } else { "finetune objective" };
        check(out, name, &inputs, |tape, v| {
            let bound = bound_from(&names, v);
            let obj = if pretrain {
                pretrain_loss(tape, &bound, &pair, &batch, &w, &opts, rngs).unwrap()
            } else {
                finetune_loss(tape, &bound, &pair, &batch, &w).unwrap()
            };
            obj.loss.scale(0.01)
        });
    }
}

/// Every check, in a fixed order.
pub fn run_all() -> Vec<Check> {
    let mut out = Vec::new();
    elementwise(&mut out);
    layout(&mut out);
    dense(&mut out);
    parts(&mut out);
    mixture(&mut out);
    heads(&mut out);
    encoder(&mut out);
    objectives(&mut out);
    out
}
