use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use partwise::distill::{
    extract_features, foreground_iou, init_model, inspect_maps, predict, to_gray, ModelConfig, Phase, StudentTeacher,
    Trainer, METRICS_HEADER,
};
use partwise::fewshot::{accuracy, classify, evaluate, prototypes, ResultsRecord};
use partwise::synthdata::{
    bg_gap, class_texture, generate_dataset, make_eval_splits, read_dataset, write_dataset, DatasetDir, Sample,
    SplitTag,
};
use partwise::{Error, Result, Rng, Tensor};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Random stream for parameter initialisation, apart from the data and
/// training streams that share the seed.
const INIT_STREAM: u64 = 0x1417;

fn write_config(cfg: &RunConfig, dir: &Path, command: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{command}.toml")), cfg.to_toml())?;
    Ok(())
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = &cfg.data_dir;
    if is_non_empty_dir(dir)? {
        if !force {
            return Err(Error::Config(format!(
                "data directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    let gen = cfg.gen_config();
    let data = generate_dataset(&gen)?;
    let splits = make_eval_splits(&data.pool, gen.classes, gen.image_size, gen.seed)?;
    let all = data
        .train
        .iter()
        .chain(&splits.original)
        .chain(&splits.m_same)
        .chain(&splits.m_rand);
    let written = write_dataset(dir, all)?;
    write_config(cfg, dir, "gen-data")?;

    let agree = data.train.iter().filter(|s| s.bg_id == class_texture(s.label)).count();
    let masked = data.train.iter().filter(|s| s.masks.is_some()).count();
    println!("wrote {written} samples to {}", dir.display());
    println!("train\t{}", data.train.len());
    println!("with-masks\t{masked}");
    println!("class-texture-agreement\t{:.4}", agree as f64 / data.train.len() as f64);
    for (tag, n) in [
        (SplitTag::Original, splits.original.len()),
        (SplitTag::MSame, splits.m_same.len()),
        (SplitTag::MRand, splits.m_rand.len()),
    ] {
        println!("{}\t{n}", tag.name());
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<DatasetDir> {
    let data = read_dataset(&cfg.data_dir)?;
    let size = cfg.image_size;
    if let Some(s) = data.train.iter().chain(&data.original).next() {
        if s.image.shape() != [size, size, 3] {
            return Err(Error::Config(format!(
                "dataset images are {:?}, the run expects {size}x{size}x3",
                s.image.shape()
            )));
        }
    }
    if let Some(s) = data.train.iter().find(|s| s.label >= cfg.classes) {
        return Err(Error::Config(format!("dataset label {} exceeds classes = {}", s.label, cfg.classes)));
    }
    Ok(data)
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))
}

fn load_pair(cfg: &RunConfig, model: ModelConfig) -> Result<StudentTeacher> {
    let path = checkpoint_path(cfg)?;
    if !path.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    StudentTeacher::load(path, model)
}

/// File name plus a short content hash.
fn checkpoint_id(path: &Path) -> Result<String> {
    let digest = Sha256::digest(fs::read(path)?);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(format!("{name}@{hex}"))
}

pub fn checkpoint_file(out_dir: &Path, phase: Phase) -> PathBuf {
    out_dir.join(format!("{}.pwt", phase.name()))
}

pub fn train(cfg: &RunConfig, phase: Phase) -> Result<()> {
    let data = load_data(cfg)?;
    let model = cfg.model_config();
    let mut pair = match (phase, &cfg.checkpoint) {
        (Phase::Pretrain, None) => {
            let params = init_model(&model, &mut Rng::stream(cfg.seed, INIT_STREAM))?;
            StudentTeacher::new(model, params)
        }
        _ => load_pair(cfg, model)?,
    };
    pair.ema_momentum = cfg.ema_momentum;
    pair.center_momentum = cfg.center_momentum;
    pair.tau_s = cfg.tau_s;
    pair.tau_t = cfg.tau_t;

    let out = &cfg.out_dir;
    write_config(cfg, out, phase.name())?;
    let mut metrics = BufWriter::new(fs::File::create(out.join(format!("{}.tsv", phase.name())))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    println!("{METRICS_HEADER}");
    let mut trainer = Trainer::new(pair, cfg.train_config(phase)?)?;
    let result = trainer.run(&data.train, |m| {
        writeln!(metrics, "{m}")?;
        println!("{m}");
        Ok(())
    });
    metrics.flush()?;
    result?;
    let path = checkpoint_file(out, phase);
    trainer.pair.save(&path)?;
    eprintln!("checkpoint {}", path.display());
    Ok(())
}

fn images(samples: &[Sample]) -> Vec<&Tensor> {
    samples.iter().map(|s| &s.image).collect()
}

fn labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

pub fn eval_fewshot(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = cfg.model_config();
    let pair = load_pair(cfg, model)?;
    let samples = data.split(cfg.eval_split()?);
    if samples.is_empty() {
        return Err(Error::Config(format!("split {} is empty", cfg.eval_split)));
    }
    let features = extract_features(&model, &pair.teacher, &images(samples), cfg.feature_mode()?)?;
    let settings = cfg.eval_settings()?;
    let acc = evaluate(&features, &labels(samples), &settings)?;
    let record = ResultsRecord {
        settings,
        accuracy: acc,
        checkpoint: checkpoint_id(checkpoint_path(cfg)?)?,
    };
    write_config(cfg, &cfg.out_dir, "eval-fewshot")?;
    fs::write(cfg.out_dir.join("eval-fewshot.tsv"), record.to_string())?;
    println!(
        "{}-way {}-shot on {}: {:.2} ± {:.2} ({} episodes)",
        settings.way, settings.shot, cfg.eval_split, acc.mean, acc.ci, acc.episodes
    );
    Ok(())
}

/// Predicted class of each sample: the logit head when the model has one,
/// otherwise the nearest class mean of the training features.
fn classify_split(cfg: &RunConfig, model: &ModelConfig, pair: &StudentTeacher, train: &[Sample], split: &[Sample]) -> Result<Vec<usize>> {
    if model.classes > 0 {
        return predict(model, &pair.teacher, &images(split));
    }
    let mode = cfg.feature_mode()?;
    let train_f = extract_features(model, &pair.teacher, &images(train), mode)?;
    let order: Vec<usize> = (0..cfg.classes).collect();
    let protos = prototypes(&train_f, &labels(train), &order)?;
    let metric = cfg.eval_settings()?.metric;
    let f = extract_features(model, &pair.teacher, &images(split), mode)?;
    Ok((0..split.len()).map(|i| classify(f.row(i), &protos, metric)).collect())
}

pub fn eval_splits(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = cfg.model_config();
    let pair = load_pair(cfg, model)?;
    let mut lines = Vec::new();
    let mut accs = Vec::new();
    for tag in [SplitTag::Original, SplitTag::MSame, SplitTag::MRand] {
        let split = data.split(tag);
        if split.is_empty() {
            return Err(Error::Config(format!("split {} is empty", tag.name())));
        }
        let pred = classify_split(cfg, &model, &pair, &data.train, split)?;
        let acc = accuracy(&pred, &labels(split));
        accs.push(acc);
        lines.push(format!("{}\t{acc:.4}", tag.name()));
    }
    lines.push(format!("bg_gap\t{:.4}", bg_gap(accs[1], accs[2])));
    lines.push(format!("fg_iou\t{:.4}", foreground_iou(&model, &pair.teacher, &data.original)?));
    lines.push(format!("checkpoint\t{}", checkpoint_id(checkpoint_path(cfg)?)?));
    let text = lines.join("\n") + "\n";
    write_config(cfg, &cfg.out_dir, "eval-splits")?;
    fs::write(cfg.out_dir.join("eval-splits.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

/// Binary greyscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn inspect(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let model = cfg.model_config();
    let pair = load_pair(cfg, model)?;
    let tag = cfg.eval_split()?;
    let split = data.split(tag);
    let i = cfg.sample_index;
    let sample = split.get(i).ok_or_else(|| {
        Error::Config(format!("sample-index {i} is out of range for split {} of {} samples", tag.name(), split.len()))
    })?;
    let maps = inspect_maps(&model, &pair.teacher, &sample.image)?;
    let dir = cfg.out_dir.join("inspect");
    fs::create_dir_all(&dir)?;
    write_config(cfg, &cfg.out_dir, "inspect")?;
    let named = maps.named();
    for (name, t) in &named {
        let path = dir.join(format!("{}_{i:05}_{name}.pgm", tag.name()));
        write_pgm(&path, t.shape()[1], t.shape()[0], &to_gray(t))?;
        println!("{}", path.display());
    }
    eprintln!("wrote {} maps for {} sample {i} (label {})", named.len(), tag.name(), sample.label);
    Ok(())
}
