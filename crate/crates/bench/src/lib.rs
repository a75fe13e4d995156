//! Fixtures shared by the benchmarks: the desk-scale model and a batch of
//! synthetic images.

use partwise::distill::{init_model, ModelConfig, StudentTeacher, TrainBatch, TrainConfig, Trainer};
use partwise::encoder::EncoderConfig;
use partwise::synthdata::{generate_dataset, GenConfig, Sample};
use partwise::Rng;

pub fn desk_model(classes: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            model_dim: 32,
            heads: 2,
            parts: 8,
            fg_parts: 4,
            ..EncoderConfig::default()
        },
        head_hidden: 64,
        out_dim: 32,
        classes,
    }
}

pub fn samples(per_class: usize) -> Vec<Sample> {
    let cfg = GenConfig {
        train_per_class: per_class,
        eval_per_class: 1,
        ..GenConfig::default()
    };
    generate_dataset(&cfg).expect("default generator config").train
}

/// Fresh trainer plus the batch it would draw at step 0.
pub fn trainer(config: TrainConfig, classes: usize) -> (Trainer, TrainBatch) {
    let model = desk_model(classes);
    let params = init_model(&model, &mut Rng::new(0)).expect("valid model");
    let trainer = Trainer::new(StudentTeacher::new(model, params), config).expect("valid config");
    let batch = trainer.batch_for(&samples(4), 0).expect("non-empty pool");
    (trainer, batch)
}
