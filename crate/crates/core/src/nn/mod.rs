//! Neural-network machinery: the autodiff graph, the two model
//! architectures, the optimizer, and the training loops.

pub mod adam;
pub mod graph;
pub mod model;
pub mod train;

pub use adam::Adam;
pub use graph::{Graph, VarId};
pub use model::{
    classifier_logit, classifier_probability, generator_mask, generator_mask_graph, stage,
    ArchTag, ClassifierSpec, GeneratorSpec, ModelParams, ParamTensor, StagedModel,
};
pub use train::{
    auc, train_classifier, train_generator, ClassifierTraining, EpochRow, GenEpochRow,
    GeneratorTraining, TrainConfig,
};
