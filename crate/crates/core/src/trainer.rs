//! SGD training of the prompt parameters.
//!
//! Only the text prompts, visual prompts, and the patch projection bias are
//! updated. The update rule is classical momentum with weight decay folded
//! into the gradient:
//!
//! ```text
//! v <- momentum * v + grad + weight_decay * p
//! p <- p - lr * v
//! ```
//!
//! The learning rate ramps linearly from zero over the warmup epochs, then
//! follows a half cosine down to zero at the end of training.

use std::f64::consts::PI;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_nodes, AlignmentModel, AlignmentVariant, TextLayout};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::encoder::{encode_image, encode_image_graph, encode_text, init_prompt_parameters, Image, PromptParameters, PromptVars};
use crate::error::{Result, SapError};
use crate::objective::{
    classification_node, text_steering_node, total_node, visual_steering_node, LossBreakdown,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub prompt_depth: usize,
    pub seed: u64,
    pub variant: AlignmentVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 4,
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 1,
            lambda1: 10.0,
            lambda2: 25.0,
            prompt_depth: 9,
            seed: 0,
            variant: AlignmentVariant::Sap,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(SapError::Config(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        if self.prompt_depth == 0 {
            return bad("prompt_depth must be positive");
        }
        Ok(())
    }
}

/// Learning rate for a zero-based step index.
pub fn lr_at(step: usize, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return config.lr * step as f64 / warmup as f64;
    }
    let total = config.epochs * steps_per_epoch;
    let span = total.saturating_sub(warmup);
    if span == 0 {
        return config.lr;
    }
    let t = (step - warmup).min(span) as f64;
    config.lr * 0.5 * (1.0 + (PI * t / span as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_ce: f64,
    pub l_steer_v: f64,
    pub l_steer_t: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Training-set accuracy in percent with the parameters at epoch end.
    pub train_accuracy: f64,
    pub mean_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per step. Wall-clock times are left out so equal
    /// runs produce equal files.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s).expect("step record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lr).collect()
    }
}

/// Output of one forward (and optional backward) pass over a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// `B x |Y|` alignment scores.
    pub scores: Array2<f64>,
    pub gradients: Option<PromptParameters>,
}

/// A fixed training set over a fixed label space, with the frozen-encoder
/// features the steering terms compare against.
#[derive(Debug, Clone)]
pub struct TrainingProblem {
    model: AlignmentModel,
    label_space: Vec<String>,
    layout: TextLayout,
    unprompted_text: Array2<f64>,
    images: Vec<Image>,
    labels: Vec<usize>,
    unprompted_globals: Vec<Array1<f64>>,
    lambda1: f64,
    lambda2: f64,
}

impl TrainingProblem {
    pub fn new(model: AlignmentModel, dataset: &Dataset, lambda1: f64, lambda2: f64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(SapError::EmptyDataset);
        }
        let label_space = dataset.classes.clone();
        let layout = model.layout(&label_space)?;
        let unprompted_text = encode_text(&layout.templates, model.bundle(), None)?;
        let mut labels = Vec::with_capacity(dataset.len());
        let mut images = Vec::with_capacity(dataset.len());
        let mut unprompted_globals = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            let y = dataset
                .class_index(&s.label)
                .ok_or_else(|| SapError::Invalid(format!("label `{}` outside the training classes", s.label)))?;
            labels.push(y);
            unprompted_globals.push(encode_image(&s.image, model.bundle(), None)?.global_feature);
            images.push(s.image.clone());
        }
        // warm the description-feature cache once
        model.description_features(&label_space)?;
        Ok(Self {
            model,
            label_space,
            layout,
            unprompted_text,
            images,
            labels,
            unprompted_globals,
            lambda1,
            lambda2,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn model(&self) -> &AlignmentModel {
        &self.model
    }

    /// Total objective over the samples at `indices`; gradients with
    /// respect to every prompt scalar when `with_grad` is set.
    pub fn step(&self, params: &PromptParameters, indices: &[usize], with_grad: bool) -> Result<StepOutput> {
        if indices.is_empty() {
            return Err(SapError::EmptyDataset);
        }
        let bundle = self.model.bundle();
        let mut g = Graph::new();
        let vars = if with_grad {
            PromptVars::trainable(&mut g, params)
        } else {
            PromptVars::frozen(&mut g, params)
        };
        let text = self.model.text_nodes(&mut g, &self.label_space, &self.layout, Some(&vars))?;
        let mut score_rows = Vec::with_capacity(indices.len());
        let mut globals = Vec::with_capacity(indices.len());
        let mut frozen = Array2::zeros((indices.len(), self.unprompted_text.ncols()));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let image = encode_image_graph(&mut g, bundle, &self.images[i], Some(&vars))?;
            let nodes = align_nodes(&mut g, image, text, self.model.variant());
            score_rows.push(nodes.scores);
            globals.push(image.global);
            frozen.row_mut(row).assign(&self.unprompted_globals[i]);
            labels.push(self.labels[i]);
        }
        let scores = g.concat_rows(&score_rows);
        let globals = g.concat_rows(&globals);
        let frozen = g.constant(frozen);
        let frozen_text = g.constant(self.unprompted_text.clone());

        let l_ce = classification_node(&mut g, scores, &labels, bundle.tau());
        let l_v = visual_steering_node(&mut g, globals, frozen);
        let l_t = text_steering_node(&mut g, text.features, frozen_text, self.label_space.len());
        let total = total_node(&mut g, l_ce, l_v, l_t, self.lambda1, self.lambda2);

        let loss = LossBreakdown {
            l_ce: g.scalar(l_ce),
            l_steer_v: g.scalar(l_v),
            l_steer_t: g.scalar(l_t),
            total: g.scalar(total),
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        };
        let gradients = with_grad.then(|| vars.gradients(&g.backward(total), params));
        Ok(StepOutput {
            loss,
            scores: g.value(scores).clone(),
            gradients,
        })
    }
}

impl TrainingProblem {
    /// Percentage of training samples classified correctly under `params`.
    pub fn accuracy(&self, params: &PromptParameters, chunk: usize) -> Result<f64> {
        let all: Vec<usize> = (0..self.len()).collect();
        let mut correct = 0usize;
        for batch in all.chunks(chunk.max(1)) {
            let out = self.step(params, batch, false)?;
            for (row, &i) in out.scores.rows().into_iter().zip(batch) {
                correct += usize::from(argmax_first(row) == self.labels[i]);
            }
        }
        Ok(100.0 * correct as f64 / self.len() as f64)
    }
}

/// Lowest index among the maxima of `scores`.
pub fn argmax_first(scores: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Classical SGD with momentum and weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: PromptParameters,
}

impl Sgd {
    pub fn new(like: &PromptParameters, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: PromptParameters::zeros_like(like),
        }
    }

    pub fn update(&mut self, params: &mut PromptParameters, grads: &PromptParameters, lr: f64) {
        let mut velocity = self.velocity.slices_mut();
        let grads = grads.slices();
        for ((p, v), g) in params.slices_mut().into_iter().zip(velocity.iter_mut()).zip(grads) {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= lr * *v;
            }
        }
    }
}

/// Trains prompts on `dataset` from their seeded initialization.
pub fn train(model: &AlignmentModel, dataset: &Dataset, config: &TrainConfig) -> Result<(PromptParameters, TrainHistory)> {
    let init = init_prompt_parameters(model.bundle().config(), model.bundle())?;
    train_from(model, dataset, config, init)
}

pub fn train_from(
    model: &AlignmentModel,
    dataset: &Dataset,
    config: &TrainConfig,
    mut params: PromptParameters,
) -> Result<(PromptParameters, TrainHistory)> {
    config.validate()?;
    let encoder_depth = model.bundle().config().prompt_depth;
    if config.prompt_depth != encoder_depth {
        return Err(SapError::Config(format!(
            "train prompt_depth {} differs from encoder prompt_depth {encoder_depth}",
            config.prompt_depth
        )));
    }
    if model.variant() != config.variant {
        return Err(SapError::Config(format!(
            "model variant {} differs from train variant {}",
            model.variant(),
            config.variant
        )));
    }
    let problem = TrainingProblem::new(model.clone(), dataset, config.lambda1, config.lambda2)?;
    let steps_per_epoch = problem.len().div_ceil(config.batch_size);
    let mut sgd = Sgd::new(&params, config.momentum, config.weight_decay);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..problem.len()).collect();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut total_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let out = problem.step(&params, batch, true)?;
            let grads = out.gradients.expect("requested gradients");
            if !out.loss.is_finite() || !grads.is_finite() {
                return Err(SapError::NonFiniteLoss { step });
            }
            let lr = lr_at(step, steps_per_epoch, config);
            sgd.update(&mut params, &grads, lr);
            total_sum += out.loss.total;
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                l_ce: out.loss.l_ce,
                l_steer_v: out.loss.l_steer_v,
                l_steer_t: out.loss.l_steer_t,
                total: out.loss.total,
            });
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            train_accuracy: problem.accuracy(&params, config.batch_size)?,
            mean_total: total_sum / steps_per_epoch as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.2}%",
            record.mean_total,
            record.train_accuracy
        );
        history.epochs.push(record);
    }
    Ok((params, history))
}
