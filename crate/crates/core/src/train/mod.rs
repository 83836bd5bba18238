//! Synthetic corpus, training loop, evaluation, stream fusion, ablations
//! and model persistence.

mod ablation;
mod config;
mod gradcheck;
mod persist;
mod synth;
mod trainer;

pub use ablation::{ablation_csv, run_ablation, AblationRow, ABLATION_ROWS};
pub use config::{lr_at, ContrastiveTerms, TrainConfig};
pub use gradcheck::{grad_check_config, objective_grad_check};
pub use persist::{load_model, read_model, save_model, write_model, MODEL_VERSION};
pub use synth::{
    build_description_set, generate_dataset, generate_specs, rest_pose, synthetic_sources, Dataset, PartMotion,
    SyntheticSignSpec,
};
pub use trainer::{
    evaluate, fuse_streams, objective_gradients, prepare_stream, record_objective, topk_accuracy, train, ClassTexts,
    EpochMetrics, Evaluation, Fusion, RunMetrics, TrainOutcome, TEXT_ENCODER_SEED,
};

use crate::error::Result;

/// Everything a run needs, derived from the config's seed.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub specs: Vec<SyntheticSignSpec>,
    pub data: Dataset,
    pub texts: ClassTexts,
}

impl Experiment {
    pub fn from_config(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let specs = generate_specs(config.num_classes, config.noise, config.seed)?;
        let data = generate_dataset(
            &specs,
            config.samples_per_class,
            config.frames,
            config.train_fraction,
            config.seed,
        )?;
        let descriptions = build_description_set(&specs, config.synonyms, config.seed)?;
        Ok(Self {
            specs,
            data,
            texts: ClassTexts::from_records(&descriptions.records),
        })
    }
}
