//! A self-contained toy world for running the whole pipeline without
//! external assets.
//!
//! Six object classes are split three base and three novel. The training
//! set holds 16 shots of each base class; the test set covers all six.

use crate::data::{generate_toy_dataset, toy_catalog, Dataset, Split, ToyImageSpec, TOY_OBJECTS};
use crate::encoder::{build_toy_encoder, EncoderBundle, EncoderConfig};
use crate::error::Result;
use crate::eval::{split_base_novel, SplitSpec, DEFAULT_K_SHOTS};
use crate::catalog::DescriptionCatalog;
use crate::trainer::TrainConfig;

pub const TOY_DATASET_ID: &str = "toy-objects";
pub const TOY_TEST_PER_CLASS: usize = 20;
pub const TOY_EPOCHS: usize = 50;

/// Encoder settings of the toy world. The backbone is the same for every
/// run seed, as a pretrained encoder would be.
pub fn toy_encoder_config() -> EncoderConfig {
    EncoderConfig::default()
}

/// Training recipe for the toy world: the default recipe with more epochs
/// and prompts in the first three of four layers.
pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: TOY_EPOCHS,
        prompt_depth: EncoderConfig::default().prompt_depth,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub bundle: EncoderBundle,
    pub catalog: DescriptionCatalog,
    pub split: SplitSpec,
    /// `k_shots` samples of each base class.
    pub train: Dataset,
    /// `TOY_TEST_PER_CLASS` samples of every class.
    pub test: Dataset,
}

/// Builds the toy world for a seed. The encoder weights use the encoder
/// seed of `encoder`; images are drawn from `seed`.
pub fn toy_world(encoder: &EncoderConfig, seed: u64) -> Result<ToyWorld> {
    let bundle = build_toy_encoder(encoder)?;
    let catalog = toy_catalog(TOY_DATASET_ID, &TOY_OBJECTS);
    let classes: Vec<&str> = catalog.class_names().collect();
    let split = split_base_novel(&classes, seed)?;
    let spec = ToyImageSpec::default();
    let base = toy_catalog(TOY_DATASET_ID, &TOY_OBJECTS[..split.base_classes.len()]);
    let mut train = generate_toy_dataset(bundle.backbone(), &base, Split::Train, DEFAULT_K_SHOTS, spec, seed)?;
    train.classes = split.base_classes.clone();
    let test = generate_toy_dataset(
        bundle.backbone(),
        &catalog,
        Split::Test,
        TOY_TEST_PER_CLASS,
        spec,
        seed.wrapping_add(0x9e37_79b9),
    )?;
    Ok(ToyWorld {
        bundle,
        catalog,
        split,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_shape() {
        let w = toy_world(&toy_encoder_config(), 0).unwrap();
        assert_eq!(w.split.base_classes, ["cat", "dog", "parrot"]);
        assert_eq!(w.split.novel_classes, ["goldfish", "tulip", "cactus"]);
        assert_eq!(w.train.len(), 48);
        assert_eq!(w.train.classes, w.split.base_classes);
        assert!(w.train.samples.iter().all(|s| w.split.base_classes.contains(&s.label)));
        assert_eq!(w.test.len(), 6 * TOY_TEST_PER_CLASS);
        assert_eq!(w.test.classes.len(), 6);
    }

    #[test]
    fn recipe_is_the_default_with_more_epochs() {
        let c = toy_train_config(4);
        let d = TrainConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay, c.batch_size), (d.lr, d.momentum, d.weight_decay, d.batch_size));
        assert_eq!((c.lambda1, c.lambda2, c.warmup_epochs), (d.lambda1, d.lambda2, d.warmup_epochs));
        assert_eq!((c.epochs, c.prompt_depth, c.seed), (50, 3, 4));
    }
}
