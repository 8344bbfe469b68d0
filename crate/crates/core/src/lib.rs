//! Description-guided prompt tuning for frozen dual-encoder vision-language
//! models.
//!
//! Class descriptions from a language model guide both towers: each class
//! is described by several templates of the form
//! `a photo of a {class}, which {description}`, and each image is summarised
//! by a fusion of its global feature with patch features pooled by
//! description-driven cross-attention. Only a handful of prompt tokens and
//! one projection bias are trained.
//!
//! ```no_run
//! use std::sync::Arc;
//! use sap_core::{
//!     build_toy_encoder, toy_catalog, train, AlignmentModel, AlignmentVariant,
//!     EncoderConfig, TrainConfig, TOY_OBJECTS,
//! };
//!
//! let bundle = build_toy_encoder(&EncoderConfig::default()).unwrap();
//! let catalog = Arc::new(toy_catalog("toy", &TOY_OBJECTS));
//! let model = AlignmentModel::new(bundle, catalog, AlignmentVariant::Sap);
//! # let dataset: sap_core::Dataset = unimplemented!();
//! let config = TrainConfig { prompt_depth: 3, ..TrainConfig::default() };
//! let (prompts, history) = train(&model, &dataset, &config).unwrap();
//! ```

pub mod alignment;
pub mod autodiff;
pub mod catalog;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod objective;
pub mod preset;
pub mod trainer;

pub use alignment::{
    alignment_score, class_alignments, cross_attention, fuse_features, mean_description_feature,
    relevance_scores, specificity_alpha, AlignmentBundle, AlignmentModel, AlignmentVariant, ClassNaming,
    PreparedLabelSpace,
};
pub use catalog::{
    compose_class_templates, compose_ovc_templates, load_catalog, save_catalog, DescriptionCatalog,
    PromptTemplate,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use data::{
    generate_toy_dataset, load_manifest, save_manifest, toy_catalog, Dataset, Sample, Split, ToyImageSpec,
    TOY_OBJECTS, TOY_VEHICLES,
};
pub use encoder::{
    build_toy_encoder, encode_image, encode_text, init_prompt_parameters, EncoderBundle, EncoderConfig, Image,
    ImageFeatures, PromptParameters,
};
pub use error::{Result, SapError};
pub use eval::{harmonic_mean, predict_class, sample_k_shot, split_base_novel, EvalReport, Evaluator, Protocol, SplitSpec};
pub use objective::{classification_loss, text_steering_loss, total_loss, visual_steering_loss, LossBreakdown};
pub use preset::{toy_encoder_config, toy_train_config, toy_world, ToyWorld};
pub use trainer::{lr_at, train, TrainConfig, TrainHistory, TrainingProblem};
