//! Frozen dual encoder, prompt parameters, and prompted feature extraction.
//!
//! A backbone exposes its token embeddings, its text and image towers as
//! differentiable functions of the prompt tokens, its final projection, and
//! its logit temperature. Everything returned from this module is
//! L2-normalized per row, so dot products downstream are cosine similarities.

pub mod toy;

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Result, SapError};

pub use toy::{build_toy_encoder, ToyBackbone};

/// Phrase whose token embeddings initialize the first-layer text prompts.
pub const INIT_PHRASE: &str = "a photo of a";
/// Standard deviation of the random prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the shared embedding space.
    pub d: usize,
    /// Internal transformer width.
    pub d_prime: usize,
    /// Number of image patches.
    pub patches: usize,
    /// Learnable prompt tokens per modality per layer.
    pub n_tokens: usize,
    /// Number of leading layers that receive prompts.
    pub prompt_depth: usize,
    pub layers: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 16,
            d_prime: 64,
            patches: 9,
            n_tokens: 4,
            prompt_depth: 3,
            layers: 4,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_prime == 0 || self.patches == 0 {
            return Err(SapError::Config("d, d_prime and patches must be at least 1".into()));
        }
        if self.n_tokens == 0 {
            return Err(SapError::Config("n_tokens must be at least 1".into()));
        }
        if self.prompt_depth == 0 || self.prompt_depth > self.layers {
            return Err(SapError::Config(format!(
                "prompt_depth {} must lie in 1..={}",
                self.prompt_depth, self.layers
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
    }
}

/// A raw image: one row per patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Image(pub Array2<f64>);

impl Image {
    pub fn zeros(patches: usize, patch_dim: usize) -> Self {
        Self(Array2::zeros((patches, patch_dim)))
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Trainable parameters: per-layer text and visual prompts plus the bias
/// added to projected patch tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParameters {
    pub text_prompts: Vec<Array2<f64>>,
    pub visual_prompts: Vec<Array2<f64>>,
    pub proj_bias: Array1<f64>,
}

impl PromptParameters {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            text_prompts: other.text_prompts.iter().map(|m| Array2::zeros(m.dim())).collect(),
            visual_prompts: other.visual_prompts.iter().map(|m| Array2::zeros(m.dim())).collect(),
            proj_bias: Array1::zeros(other.proj_bias.len()),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Every tensor as a flat slice: text prompts, visual prompts, bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for m in self.text_prompts.iter().chain(&self.visual_prompts) {
            out.push(m.as_slice().expect("prompt matrices are contiguous"));
        }
        out.push(self.proj_bias.as_slice().expect("bias is contiguous"));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for m in self.text_prompts.iter_mut().chain(self.visual_prompts.iter_mut()) {
            out.push(m.as_slice_mut().expect("prompt matrices are contiguous"));
        }
        out.push(self.proj_bias.as_slice_mut().expect("bias is contiguous"));
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars(), "flat length mismatch");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    pub(crate) fn check_against(&self, config: &EncoderConfig, text_width: usize) -> Result<()> {
        let depth = config.prompt_depth;
        if self.text_prompts.len() != depth || self.visual_prompts.len() != depth {
            return Err(SapError::Shape(format!(
                "expected {depth} prompt layers per modality, got {} text / {} visual",
                self.text_prompts.len(),
                self.visual_prompts.len()
            )));
        }
        let text_shape = (config.n_tokens, text_width);
        let visual_shape = (config.n_tokens, config.d_prime);
        if let Some(m) = self.text_prompts.iter().find(|m| m.dim() != text_shape) {
            return Err(SapError::Shape(format!("text prompt {:?}, expected {text_shape:?}", m.dim())));
        }
        if let Some(m) = self.visual_prompts.iter().find(|m| m.dim() != visual_shape) {
            return Err(SapError::Shape(format!("visual prompt {:?}, expected {visual_shape:?}", m.dim())));
        }
        if self.proj_bias.len() != config.d {
            return Err(SapError::Shape(format!(
                "proj_bias has length {}, expected {}",
                self.proj_bias.len(),
                config.d
            )));
        }
        Ok(())
    }
}

/// Prompt parameters placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct PromptVars {
    pub text: Vec<Var>,
    pub visual: Vec<Var>,
    /// `1 x d` row.
    pub bias: Var,
}

impl PromptVars {
    /// Registers the parameters as differentiable leaves.
    pub fn trainable(g: &mut Graph, params: &PromptParameters) -> Self {
        Self::place(g, params, true)
    }

    /// Places the parameters as constants (inference).
    pub fn frozen(g: &mut Graph, params: &PromptParameters) -> Self {
        Self::place(g, params, false)
    }

    fn place(g: &mut Graph, params: &PromptParameters, trainable: bool) -> Self {
        let mut leaf = |m: Array2<f64>| if trainable { g.parameter(m) } else { g.constant(m) };
        let text = params.text_prompts.iter().map(|m| leaf(m.clone())).collect();
        let visual = params.visual_prompts.iter().map(|m| leaf(m.clone())).collect();
        let bias = leaf(params.proj_bias.clone().insert_axis(Axis(0)));
        Self { text, visual, bias }
    }

    /// Collects gradients into the shape of `like`.
    pub fn gradients(&self, grads: &Gradients, like: &PromptParameters) -> PromptParameters {
        PromptParameters {
            text_prompts: self
                .text
                .iter()
                .zip(&like.text_prompts)
                .map(|(v, m)| grads.get_or_zeros(*v, m.dim()))
                .collect(),
            visual_prompts: self
                .visual
                .iter()
                .zip(&like.visual_prompts)
                .map(|(v, m)| grads.get_or_zeros(*v, m.dim()))
                .collect(),
            proj_bias: grads
                .get_or_zeros(self.bias, (1, like.proj_bias.len()))
                .index_axis_move(Axis(0), 0),
        }
    }
}

/// Pre-projection outputs of the image tower.
#[derive(Debug, Clone, Copy)]
pub struct ImageStates {
    /// `1 x d_prime` class-token output.
    pub cls: Var,
    /// `M x d_prime` patch-token outputs.
    pub patches: Var,
}

/// Adapter contract for a frozen backbone.
///
/// Prompt slices passed to the forward methods hold one `n_tokens x width`
/// node per prompted layer. Implementations must not expose any way to
/// mutate their weights.
pub trait Backbone: Send + Sync + fmt::Debug {
    fn config(&self) -> &EncoderConfig;
    /// Width of text token embeddings (and of text prompts).
    fn text_width(&self) -> usize;
    /// Width of one raw image patch.
    fn patch_dim(&self) -> usize;
    /// Maximum tokens per sequence, prompts included.
    fn context_length(&self) -> usize;
    fn tokenize(&self, text: &str) -> Vec<usize>;
    fn token_embeddings(&self, tokens: &[usize]) -> Array2<f64>;
    /// Text tower output for one token sequence, `1 x d`, before normalization.
    fn text_forward(&self, g: &mut Graph, tokens: &[usize], prompts: Option<&[Var]>) -> Var;
    fn image_forward(&self, g: &mut Graph, image: &Image, prompts: Option<&[Var]>) -> ImageStates;
    /// `d_prime x d` image projection.
    fn projection(&self) -> &Array2<f64>;
    fn tau(&self) -> f64;
}

/// Shared handle to a frozen backbone.
#[derive(Debug, Clone)]
pub struct EncoderBundle {
    backbone: Arc<dyn Backbone>,
}

impl EncoderBundle {
    pub fn new(backbone: Arc<dyn Backbone>) -> Self {
        Self { backbone }
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    pub fn config(&self) -> &EncoderConfig {
        self.backbone.config()
    }

    pub fn tau(&self) -> f64 {
        self.backbone.tau()
    }

    pub fn projection(&self) -> &Array2<f64> {
        self.backbone.projection()
    }
}

/// Global and local image features.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub global_feature: Array1<f64>,
    pub local_features: Array2<f64>,
    pub prompted: bool,
}

/// Graph nodes for one encoded image.
#[derive(Debug, Clone, Copy)]
pub struct ImageNodes {
    /// `1 x d`, unit norm.
    pub global: Var,
    /// `M x d`, unit-norm rows.
    pub local: Var,
}

fn tokenize_checked(bundle: &EncoderBundle, text: &str, with_prompts: bool) -> Result<Vec<usize>> {
    let backbone = bundle.backbone();
    let tokens = backbone.tokenize(text);
    let extra = if with_prompts { backbone.config().n_tokens } else { 0 };
    let limit = backbone.context_length();
    if tokens.len() + extra > limit {
        return Err(SapError::TooLong {
            text: text.to_string(),
            tokens: tokens.len() + extra,
            limit,
        });
    }
    Ok(tokens)
}

/// Encodes `strings` into a `k x d` node with unit-norm rows.
pub fn encode_text_graph<S: AsRef<str>>(
    g: &mut Graph,
    bundle: &EncoderBundle,
    strings: &[S],
    prompts: Option<&PromptVars>,
) -> Result<Var> {
    if strings.is_empty() {
        return Err(SapError::Invalid("encode_text needs at least one string".into()));
    }
    let backbone = bundle.backbone();
    let mut rows = Vec::with_capacity(strings.len());
    for s in strings {
        let tokens = tokenize_checked(bundle, s.as_ref(), prompts.is_some())?;
        rows.push(backbone.text_forward(g, &tokens, prompts.map(|p| p.text.as_slice())));
    }
    let stacked = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) };
    Ok(g.normalize_rows(stacked))
}

/// Global feature from the class token; local features from the patch
/// tokens, offset by the prompt bias when prompts are given.
pub fn encode_image_graph(
    g: &mut Graph,
    bundle: &EncoderBundle,
    image: &Image,
    prompts: Option<&PromptVars>,
) -> Result<ImageNodes> {
    let backbone = bundle.backbone();
    let config = backbone.config();
    let expected = (config.patches, backbone.patch_dim());
    if image.0.dim() != expected {
        return Err(SapError::Shape(format!(
            "image is {:?}, encoder expects {expected:?}",
            image.0.dim()
        )));
    }
    let states = backbone.image_forward(g, image, prompts.map(|p| p.visual.as_slice()));
    let proj = g.constant(backbone.projection().clone());
    let global = g.matmul(states.cls, proj);
    let global = g.normalize_rows(global);
    let mut local = g.matmul(states.patches, proj);
    if let Some(p) = prompts {
        local = g.add_row(local, p.bias);
    }
    let local = g.normalize_rows(local);
    Ok(ImageNodes { global, local })
}

pub fn encode_text<S: AsRef<str>>(
    strings: &[S],
    bundle: &EncoderBundle,
    prompts: Option<&PromptParameters>,
) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let vars = prompts.map(|p| PromptVars::frozen(&mut g, p));
    let out = encode_text_graph(&mut g, bundle, strings, vars.as_ref())?;
    Ok(g.value(out).clone())
}

pub fn encode_image(
    image: &Image,
    bundle: &EncoderBundle,
    prompts: Option<&PromptParameters>,
) -> Result<ImageFeatures> {
    let mut g = Graph::new();
    let vars = prompts.map(|p| PromptVars::frozen(&mut g, p));
    let nodes = encode_image_graph(&mut g, bundle, image, vars.as_ref())?;
    Ok(ImageFeatures {
        global_feature: g.value(nodes.global).row(0).to_owned(),
        local_features: g.value(nodes.local).clone(),
        prompted: prompts.is_some(),
    })
}

/// First-layer text prompts copy the token embeddings of [`INIT_PHRASE`];
/// the remaining prompts are drawn from `Normal(0, 0.02)`; the bias is zero.
pub fn init_prompt_parameters(config: &EncoderConfig, bundle: &EncoderBundle) -> Result<PromptParameters> {
    config.validate()?;
    let backbone = bundle.backbone();
    let phrase = backbone.tokenize(INIT_PHRASE);
    if phrase.len() != config.n_tokens {
        return Err(SapError::Config(format!(
            "n_tokens = {} but the initialization phrase `{INIT_PHRASE}` has {} tokens",
            config.n_tokens,
            phrase.len()
        )));
    }
    let text_width = backbone.text_width();
    let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut sample = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || normal.sample(&mut rng))
    };

    let mut text_prompts = vec![backbone.token_embeddings(&phrase)];
    for _ in 1..config.prompt_depth {
        text_prompts.push(sample(config.n_tokens, text_width));
    }
    let visual_prompts = (0..config.prompt_depth)
        .map(|_| sample(config.n_tokens, config.d_prime))
        .collect();
    let params = PromptParameters {
        text_prompts,
        visual_prompts,
        proj_bias: Array1::zeros(config.d),
    };
    params.check_against(config, text_width)?;
    Ok(params)
}
