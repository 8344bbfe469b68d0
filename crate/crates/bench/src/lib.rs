//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sap_core::alignment::normalize_rows;
use sap_core::{
    init_prompt_parameters, toy_encoder_config, toy_world, AlignmentModel, AlignmentVariant, PromptParameters,
    ToyWorld, TrainingProblem,
};

/// `rows x cols` matrix with unit-norm rows, seeded.
pub fn unit_rows(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normalize_rows(&Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0)))
}

/// The toy world with initialized prompts and a nonzero projection bias.
pub struct ToyFixture {
    pub world: ToyWorld,
    pub prompts: PromptParameters,
}

impl ToyFixture {
    pub fn new() -> Self {
        let world = toy_world(&toy_encoder_config(), 0).expect("toy world builds");
        let mut prompts = init_prompt_parameters(world.bundle.config(), &world.bundle).expect("prompts initialize");
        for (i, b) in prompts.proj_bias.iter_mut().enumerate() {
            *b = 0.01 * (i as f64).cos();
        }
        Self { world, prompts }
    }

    pub fn model(&self, variant: AlignmentVariant) -> AlignmentModel {
        AlignmentModel::new(self.world.bundle.clone(), Arc::new(self.world.catalog.clone()), variant)
    }

    pub fn problem(&self) -> TrainingProblem {
        TrainingProblem::new(self.model(AlignmentVariant::Sap), &self.world.train, 10.0, 25.0)
            .expect("training problem builds")
    }
}

impl Default for ToyFixture {
    fn default() -> Self {
        Self::new()
    }
}
