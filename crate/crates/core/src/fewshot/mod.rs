//! Episodic M-way N-shot evaluation with nearest-prototype classification.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Distance used for nearest-prototype lookup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }

    /// Squared euclidean distance, or `1 − cos`.
    pub fn distance(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum(),
            Metric::Cosine => {
                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                for (&x, &y) in a.iter().zip(b) {
                    let (x, y) = (x as f64, y as f64);
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
                let den = (aa * bb).sqrt();
                if den > 0.0 {
                    1.0 - ab / den
                } else {
                    1.0
                }
            }
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::Config(format!("unknown metric `{s}` (expected euclidean or cosine)"))),
        }
    }
}

/// Sample indices of one task. `support` is grouped by class in
/// `classes` order, `shot` per class; `query` likewise with `queries` per
/// class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub shot: usize,
    pub queries: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    /// True class of every query, in `query` order.
    pub fn query_labels(&self) -> Vec<usize> {
        self.classes
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(self.queries))
            .collect()
    }
}

/// Sample indices grouped by label.
pub fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        m.entry(l).or_default().push(i);
    }
    m
}

/// Draws `way` classes without replacement, then `shot + queries`
/// distinct samples from each.
pub fn sample_episode(
    groups: &BTreeMap<usize, Vec<usize>>,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Config(format!("episodes need way and shot >= 1, got {way}-way {shot}-shot")));
    }
    if groups.len() < way {
        return Err(Error::Sampling(format!(
            "{way}-way episodes need {way} classes, the split has {}",
            groups.len()
        )));
    }
    let need = shot + queries;
    if let Some((c, xs)) = groups.iter().find(|(_, xs)| xs.len() < need) {
        return Err(Error::Sampling(format!(
            "class {c} has {} samples, episodes need {need}",
            xs.len()
        )));
    }
    let ids: Vec<usize> = groups.keys().copied().collect();
    let classes: Vec<usize> = rng
        .choose_distinct(ids.len(), way)
        .into_iter()
        .map(|i| ids[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for c in &classes {
        let xs = &groups[c];
        let pick = rng.choose_distinct(xs.len(), need);
        support.extend(pick[..shot].iter().map(|&i| xs[i]));
        query.extend(pick[shot..].iter().map(|&i| xs[i]));
    }
    Ok(Episode {
        classes,
        shot,
        queries,
        support,
        query,
    })
}

/// Class means of support features.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    /// `M × feat_dim`.
    pub c: Tensor,
    pub class_order: Vec<usize>,
}

/// Row `m` is the mean of the support rows labelled `class_order[m]`.
pub fn prototypes(features: &Tensor, support_labels: &[usize], class_order: &[usize]) -> Result<Prototypes> {
    let (n, d) = features.dims2()?;
    if n != support_labels.len() {
        return Err(Error::Shape(format!("{n} support features for {} labels", support_labels.len())));
    }
    let mut data = vec![0.0f64; class_order.len() * d];
    for (m, &c) in class_order.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&i| support_labels[i] == c).collect();
        if rows.is_empty() {
            return Err(Error::Contract(format!("class {c} has no support samples")));
        }
        let acc = &mut data[m * d..(m + 1) * d];
        for &i in &rows {
            for (a, &v) in acc.iter_mut().zip(features.row(i)) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    }
    Ok(Prototypes {
        c: Tensor::from_f64([class_order.len(), d], &data)?,
        class_order: class_order.to_vec(),
    })
}

/// Class of the nearest prototype; the lowest index wins ties.
pub fn classify(query: &[f32], protos: &Prototypes, metric: Metric) -> usize {
    let mut best = (f64::INFINITY, 0);
    for m in 0..protos.class_order.len() {
        let d = metric.distance(query, protos.c.row(m));
        if d < best.0 {
            best = (d, m);
        }
    }
    protos.class_order[best.1]
}

fn gather(features: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, d) = features.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(features.row(i));
    }
    Tensor::new([idx.len(), d], data)
}

/// Query accuracy of one episode, in percent.
pub fn episode_accuracy(features: &Tensor, ep: &Episode, metric: Metric) -> Result<f64> {
    let support_labels: Vec<usize> = ep
        .classes
        .iter()
        .flat_map(|&c| std::iter::repeat(c).take(ep.shot))
        .collect();
    let protos = prototypes(&gather(features, &ep.support)?, &support_labels, &ep.classes)?;
    let truth = ep.query_labels();
    if truth.is_empty() {
        return Err(Error::Config("episodes need at least one query".into()));
    }
    let hits = ep
        .query
        .iter()
        .zip(&truth)
        .filter(|(&q, &t)| classify(features.row(q), &protos, metric) == t)
        .count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
            metric: Metric::Euclidean,
            seed: 0,
        }
    }
}

/// Mean accuracy and 95% confidence half-width, both in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Accuracy {
    pub mean: f64,
    pub ci: f64,
    pub episodes: usize,
}

/// `1.96 · sd / sqrt(n)` with the sample standard deviation; 0 for one value.
pub fn mean_ci(xs: &[f64]) -> Accuracy {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
    let ci = if n < 2 {
        0.0
    } else {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    };
    Accuracy { mean, ci, episodes: n }
}

/// Few-shot accuracy over precomputed features, one row per sample.
///
/// Episode `e` draws from its own random stream, so the result does not
/// depend on how episodes are spread over threads.
pub fn evaluate(features: &Tensor, labels: &[usize], s: &EvalSettings) -> Result<Accuracy> {
    if s.episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let (n, _) = features.dims2()?;
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} feature rows for {} labels", labels.len())));
    }
    let groups = by_class(labels);
    let accs = (0..s.episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = Rng::stream(s.seed, e as u64);
            let ep = sample_episode(&groups, s.way, s.shot, s.queries, &mut rng)?;
            episode_accuracy(features, &ep, s.metric)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_ci(&accs))
}

/// Plain classification accuracy in percent.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// One-hot label features: a model that has memorised every label.
pub fn memorizing_features(labels: &[usize]) -> Tensor {
    let d = labels.iter().max().map_or(1, |m| m + 1);
    Tensor::from_fn([labels.len(), d], |i| if labels[i / d] == i % d { 1.0 } else { 0.0 })
}

/// Label-independent gaussian features: a model that guesses.
pub fn random_features(n: usize, dim: usize, seed: u64) -> Tensor {
    Rng::new(seed).sample_gaussian([n, dim])
}

/// Text record of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsRecord {
    pub settings: EvalSettings,
    pub accuracy: Accuracy,
    pub checkpoint: String,
}

impl fmt::Display for ResultsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "way\t{}", self.settings.way)?;
        writeln!(f, "shot\t{}", self.settings.shot)?;
        writeln!(f, "episodes\t{}", self.accuracy.episodes)?;
        writeln!(f, "mean\t{:.4}", self.accuracy.mean)?;
        writeln!(f, "ci\t{:.4}", self.accuracy.ci)?;
        writeln!(f, "metric\t{}", self.settings.metric)?;
        writeln!(f, "checkpoint\t{}", self.checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names_round_trip() {
        for m in [Metric::Euclidean, Metric::Cosine] {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("manhattan".parse::<Metric>().is_err());
    }
}
