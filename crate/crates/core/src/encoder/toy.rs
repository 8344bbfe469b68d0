//! A small seeded dual encoder for desk-scale runs.
//!
//! Both towers share one layer shape: parameter-free self-attention mixing
//! followed by a fixed random `tanh` map, each with a residual path. Text
//! tokens come from a hashed vocabulary; image patches live in the same
//! space as word embeddings and share the text projection, so an image
//! whose patches carry the averaged embedding of a phrase lands near that
//! phrase's text feature.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

use super::{Backbone, EncoderBundle, EncoderConfig, Image, ImageStates};
use crate::autodiff::{Graph, Var};
use crate::error::Result;

pub const TOY_VOCAB: usize = 2048;
pub const TOY_CONTEXT: usize = 77;
pub const TOY_TAU: f64 = 0.01;
const MLP_GAIN: f64 = 0.5;
const POSITION_SCALE: f64 = 0.1;
const CLS_SCALE: f64 = 0.5;

#[derive(Debug)]
pub struct ToyBackbone {
    config: EncoderConfig,
    token_table: Array2<f64>,
    text_layers: Vec<Array2<f64>>,
    image_layers: Vec<Array2<f64>>,
    cls: Array2<f64>,
    positions: Array2<f64>,
    projection: Array2<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x100000001b3)
    })
}

impl ToyBackbone {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let w = config.d_prime;
        let inv_sqrt = 1.0 / (w as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_70E5);
        let token_table = gaussian(&mut rng, TOY_VOCAB, w, inv_sqrt);
        let text_layers: Vec<_> = (0..config.layers).map(|_| gaussian(&mut rng, w, w, inv_sqrt)).collect();
        let image_layers = text_layers.clone();
        let cls = gaussian(&mut rng, 1, w, inv_sqrt * CLS_SCALE);
        let positions = gaussian(&mut rng, config.patches, w, inv_sqrt * POSITION_SCALE);
        let projection = gaussian(&mut rng, w, config.d, inv_sqrt);
        Ok(Self {
            config: config.clone(),
            token_table,
            text_layers,
            image_layers,
            cls,
            positions,
            projection,
        })
    }

    fn layer(g: &mut Graph, x: Var, weight: &Array2<f64>) -> Var {
        let width = g.shape(x).1 as f64;
        let xt = g.transpose(x);
        let scores = g.matmul(x, xt);
        let scores = g.scale(scores, 1.0 / width.sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, x);
        let summed = g.add(x, mixed);
        let h = g.scale(summed, 0.5);
        let w = g.constant(weight.clone());
        let hw = g.matmul(h, w);
        let t = g.tanh(hw);
        let t = g.scale(t, MLP_GAIN);
        g.add(h, t)
    }

    /// Runs `layers`, re-injecting prompt `l` at layer `l` for every given
    /// prompt. `prompt_first` puts prompt rows before the content rows.
    /// Returns the final sequence and the row offset of the content.
    fn run(
        &self,
        g: &mut Graph,
        content: Var,
        prompts: Option<&[Var]>,
        prompt_first: bool,
        layers: &[Array2<f64>],
    ) -> (Var, usize) {
        let content_rows = g.shape(content).0;
        let n = prompts.map_or(0, |_| self.config.n_tokens);
        let offset = if prompt_first { n } else { 0 };
        let mut x = content;
        for (l, weight) in layers.iter().enumerate() {
            if let Some(p) = prompts.and_then(|p| p.get(l)) {
                let body = if l == 0 {
                    x
                } else {
                    g.slice_rows(x, offset, offset + content_rows)
                };
                x = if prompt_first {
                    g.concat_rows(&[*p, body])
                } else {
                    g.concat_rows(&[body, *p])
                };
            }
            x = Self::layer(g, x, weight);
        }
        (x, offset)
    }
}

impl Backbone for ToyBackbone {
    fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn text_width(&self) -> usize {
        self.config.d_prime
    }

    fn patch_dim(&self) -> usize {
        self.config.d_prime
    }

    fn context_length(&self) -> usize {
        TOY_CONTEXT
    }

    /// Lowercased whitespace split, punctuation trimmed, FNV-hashed ids.
    fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| (fnv1a(w.as_bytes()) % TOY_VOCAB as u64) as usize)
            .collect()
    }

    fn token_embeddings(&self, tokens: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), self.config.d_prime));
        for (mut row, &t) in out.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.token_table.row(t));
        }
        out
    }

    fn text_forward(&self, g: &mut Graph, tokens: &[usize], prompts: Option<&[Var]>) -> Var {
        // an empty string still needs one row to pool over
        let embedded = if tokens.is_empty() {
            Array2::zeros((1, self.config.d_prime))
        } else {
            self.token_embeddings(tokens)
        };
        let rows = embedded.nrows();
        let content = g.constant(embedded);
        let (x, offset) = self.run(g, content, prompts, true, &self.text_layers);
        let body = g.slice_rows(x, offset, offset + rows);
        let pooled = g.mean_rows(body);
        let proj = g.constant(self.projection.clone());
        g.matmul(pooled, proj)
    }

    fn image_forward(&self, g: &mut Graph, image: &Image, prompts: Option<&[Var]>) -> ImageStates {
        let patches = image.pixels() + &self.positions;
        let mut tokens = Array2::zeros((1 + self.config.patches, self.config.d_prime));
        tokens.row_mut(0).assign(&self.cls.row(0));
        tokens.slice_mut(ndarray::s![1.., ..]).assign(&patches);
        let content = g.constant(tokens);
        let (x, _) = self.run(g, content, prompts, false, &self.image_layers);
        ImageStates {
            cls: g.slice_rows(x, 0, 1),
            patches: g.slice_rows(x, 1, 1 + self.config.patches),
        }
    }

    fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    fn tau(&self) -> f64 {
        TOY_TAU
    }
}

pub fn build_toy_encoder(config: &EncoderConfig) -> Result<EncoderBundle> {
    Ok(EncoderBundle::new(Arc::new(ToyBackbone::new(config)?)))
}
