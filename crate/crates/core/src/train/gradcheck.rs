use super::config::TrainConfig;
use super::synth::{build_description_set, generate_dataset, generate_specs};
use super::trainer::{record_objective, ClassTexts};
use crate::error::Result;
use crate::numerics::{finite_diff_check, GradCheckReport};
use crate::skeleton::{InputNorm, SkeletonBatch, SkeletonEncoder};

/// Shape of the gradient-check problem: two classes with every part active,
/// a four-sample batch and a narrow single-layer encoder so every coordinate
/// can be perturbed. Deeper narrow encoders put second-layer pre-activations
/// exactly on the ReLU kink whenever a joint's first-layer row is all zero.
pub fn grad_check_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        num_classes: 2,
        samples_per_class: 4,
        train_fraction: 0.5,
        frames: 2,
        layers: 1,
        channels: 4,
        embed_dim: 8,
        synonyms: 2,
        ..Default::default()
    }
}

/// Compares backward against central differences for the composite
/// objective on one random batch, over every parameter tensor.
pub fn objective_grad_check(config: &TrainConfig, eps: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let mut specs = generate_specs(config.num_classes, config.noise, config.seed)?;
    for s in &mut specs {
        s.active = [true; 5];
    }
    let data = generate_dataset(&specs, config.samples_per_class, config.frames, config.train_fraction, config.seed)?;
    let texts = ClassTexts::from_records(&build_description_set(&specs, config.synonyms, config.seed)?.records);
    let train = super::prepare_stream(&data.train, config.stream, &data)?;
    let norm = config.normalize_input.then(|| InputNorm::fit(&train)).transpose()?;
    let model = SkeletonEncoder::new(config.encoder(), data.layout.clone(), config.seed)?.with_input_norm(norm)?;
    let batch = SkeletonBatch::from_sequences(&train)?;
    finite_diff_check(
        |tape, vars| record_objective(tape, &model, vars, &batch, &texts, config),
        model.params(),
        eps,
    )
}
