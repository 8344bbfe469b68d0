//! Description-guided image features and the class alignment score.
//!
//! Per image: description features query the local patch features through
//! parameter-free cross-attention; a relevance softmax over the descriptions
//! pools the attended features into one vector; the mean of each
//! description's peak attention weight (`alpha`) sets how much of that vector
//! is mixed into the global feature. A class scores the mean cosine between
//! the fused feature and its description-guided text features.
//!
//! Each step is written once against [`Graph`] so training and inference
//! share the same arithmetic. The array-level functions wrap the graph
//! versions with constant inputs.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var, NORM_EPS};
use crate::catalog::{compose_class_templates, compose_ovc_templates, DescriptionCatalog, PromptTemplate};
use crate::encoder::{encode_image_graph, encode_text, encode_text_graph, EncoderBundle, Image, ImageNodes, PromptParameters, PromptVars};
use crate::error::{Result, SapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentVariant {
    #[default]
    Sap,
    /// Cosine against the unnormalized mean of a class's text features.
    MeanTextFeature,
    /// One template per class with every description appended.
    AggregatedDescriptions,
    /// Fused feature replaced by the global feature.
    GlobalOnly,
    /// Fused feature replaced by the mean of the global feature and the
    /// unweighted patch mean.
    GlobalLocalAvg,
    /// Plain class templates; descriptions only enter the image side.
    NoTextGuidance,
}

impl AlignmentVariant {
    pub const ALL: [AlignmentVariant; 6] = [
        AlignmentVariant::Sap,
        AlignmentVariant::MeanTextFeature,
        AlignmentVariant::AggregatedDescriptions,
        AlignmentVariant::GlobalOnly,
        AlignmentVariant::GlobalLocalAvg,
        AlignmentVariant::NoTextGuidance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlignmentVariant::Sap => "sap",
            AlignmentVariant::MeanTextFeature => "mean_text_feature",
            AlignmentVariant::AggregatedDescriptions => "aggregated_descriptions",
            AlignmentVariant::GlobalOnly => "global_only",
            AlignmentVariant::GlobalLocalAvg => "global_local_avg",
            AlignmentVariant::NoTextGuidance => "no_text_guidance",
        }
    }
}

impl fmt::Display for AlignmentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlignmentVariant {
    type Err = SapError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.as_str()).collect();
                SapError::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// How class names enter the text templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassNaming {
    #[default]
    Named,
    /// Class names replaced by `object`.
    OutOfVocabulary,
}

// ---------------------------------------------------------------------------
// graph-level steps

/// Returns `(features N x d, weights N x M)` with
/// `weights = softmax(q k^T / sqrt(d))` and `features = weights v`.
pub fn cross_attention_nodes(g: &mut Graph, queries: Var, keys: Var, values: Var) -> (Var, Var) {
    let d = g.shape(queries).1 as f64;
    let kt = g.transpose(keys);
    let logits = g.matmul(queries, kt);
    let logits = g.scale(logits, 1.0 / d.sqrt());
    let weights = g.softmax_rows(logits);
    let features = g.matmul(weights, values);
    (features, weights)
}

/// `1 x N` softmax of the description/global dot products.
pub fn relevance_node(g: &mut Graph, description_features: Var, global: Var) -> Var {
    let dt = g.transpose(description_features);
    let dots = g.matmul(global, dt);
    g.softmax_rows(dots)
}

/// `1 x d` relevance-weighted sum of the description-guided image features.
pub fn mean_description_node(g: &mut Graph, description_image_features: Var, relevance: Var) -> Var {
    g.matmul(relevance, description_image_features)
}

/// `1 x 1` mean over descriptions of the peak attention weight.
pub fn specificity_node(g: &mut Graph, weights: Var) -> Var {
    let peaks = g.max_per_row(weights);
    g.mean(peaks)
}

/// `(1 - alpha) * global + alpha * mean_desc`.
pub fn convex_fusion_node(g: &mut Graph, global: Var, mean_desc: Var, alpha: Var) -> Var {
    let keep = g.affine(alpha, -1.0, 1.0);
    let a = g.scale_by(keep, global);
    let b = g.scale_by(alpha, mean_desc);
    g.add(a, b)
}

/// Graph nodes for one image's alignment against a label space.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentNodes {
    pub global: Var,
    pub local: Var,
    pub attention_weights: Option<Var>,
    pub description_image_features: Option<Var>,
    pub relevance: Option<Var>,
    pub alpha: Option<Var>,
    pub mean_description_feature: Option<Var>,
    /// Fused feature before renormalization.
    pub fused: Var,
    pub fused_unit: Var,
    /// `1 x |Y|` alignment scores.
    pub scores: Var,
}

/// Text-side inputs shared by every image of a label space.
#[derive(Debug, Clone, Copy)]
pub struct TextNodes {
    /// `K x d` unit-norm template features.
    pub features: Var,
    /// `K x |Y|` constant: entry `(k, y)` is `1 / |templates of y|` when
    /// template `k` belongs to class `y`.
    pub averaging: Var,
    /// `N x d` description features, absent when the label space has none.
    pub descriptions: Option<Var>,
}

pub fn align_nodes(g: &mut Graph, image: ImageNodes, text: TextNodes, variant: AlignmentVariant) -> AlignmentNodes {
    let ImageNodes { global, local } = image;
    let mut out = AlignmentNodes {
        global,
        local,
        attention_weights: None,
        description_image_features: None,
        relevance: None,
        alpha: None,
        mean_description_feature: None,
        fused: global,
        fused_unit: global,
        scores: global,
    };

    if let Some(q) = text.descriptions {
        let (feats, weights) = cross_attention_nodes(g, q, local, local);
        let relevance = relevance_node(g, q, global);
        let mean_desc = mean_description_node(g, feats, relevance);
        let alpha = specificity_node(g, weights);
        out.attention_weights = Some(weights);
        out.description_image_features = Some(feats);
        out.relevance = Some(relevance);
        out.alpha = Some(alpha);
        out.mean_description_feature = Some(mean_desc);
        out.fused = convex_fusion_node(g, global, mean_desc, alpha);
    }

    match variant {
        AlignmentVariant::GlobalOnly => out.fused = global,
        AlignmentVariant::GlobalLocalAvg => {
            let patch_mean = g.mean_rows(local);
            let sum = g.add(global, patch_mean);
            out.fused = g.scale(sum, 0.5);
        }
        _ => {}
    }
    out.fused_unit = if out.fused == global {
        global
    } else {
        g.normalize_rows(out.fused)
    };

    out.scores = match variant {
        AlignmentVariant::MeanTextFeature => {
            let avg_t = g.transpose(text.averaging);
            let class_means = g.matmul(avg_t, text.features);
            let class_units = g.normalize_rows(class_means);
            let ct = g.transpose(class_units);
            g.matmul(out.fused_unit, ct)
        }
        _ => {
            let tt = g.transpose(text.features);
            let sims = g.matmul(out.fused_unit, tt);
            g.matmul(sims, text.averaging)
        }
    };
    out
}

// ---------------------------------------------------------------------------
// array-level operations

pub fn normalize_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row /= n;
    }
    out
}

fn row(v: ArrayView1<f64>) -> Array2<f64> {
    v.to_owned().insert_axis(Axis(0))
}

pub fn cross_attention(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if queries.nrows() == 0 || keys.nrows() == 0 {
        return Err(SapError::Invalid("cross_attention needs N >= 1 and M >= 1".into()));
    }
    if queries.ncols() != keys.ncols() || keys.dim() != values.dim() {
        return Err(SapError::Shape(format!(
            "queries {:?}, keys {:?}, values {:?}",
            queries.dim(),
            keys.dim(),
            values.dim()
        )));
    }
    let mut g = Graph::new();
    let (q, k, v) = (g.constant(queries.clone()), g.constant(keys.clone()), g.constant(values.clone()));
    let (feats, weights) = cross_attention_nodes(&mut g, q, k, v);
    Ok((g.value(feats).clone(), g.value(weights).clone()))
}

pub fn relevance_scores(description_features: &Array2<f64>, global_feature: ArrayView1<f64>) -> Result<Array1<f64>> {
    if description_features.nrows() == 0 {
        return Err(SapError::Invalid("relevance needs at least one description".into()));
    }
    if description_features.ncols() != global_feature.len() {
        return Err(SapError::Shape("description and global feature widths differ".into()));
    }
    let mut g = Graph::new();
    let q = g.constant(description_features.clone());
    let x = g.constant(row(global_feature));
    let r = relevance_node(&mut g, q, x);
    Ok(g.value(r).row(0).to_owned())
}

pub fn mean_description_feature(
    description_image_features: &Array2<f64>,
    relevance: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if description_image_features.nrows() != relevance.len() {
        return Err(SapError::Shape(format!(
            "{} description features but {} relevance weights",
            description_image_features.nrows(),
            relevance.len()
        )));
    }
    let mut g = Graph::new();
    let feats = g.constant(description_image_features.clone());
    let r = g.constant(row(relevance));
    let m = mean_description_node(&mut g, feats, r);
    Ok(g.value(m).row(0).to_owned())
}

pub fn specificity_alpha(attention_weights: &Array2<f64>) -> Result<f64> {
    if attention_weights.is_empty() {
        return Err(SapError::Invalid("specificity of empty attention weights".into()));
    }
    let mut g = Graph::new();
    let w = g.constant(attention_weights.clone());
    let a = specificity_node(&mut g, w);
    Ok(g.scalar(a))
}

/// Convex combination of `global` and `mean_desc`, without renormalization.
pub fn convex_fusion(global: ArrayView1<f64>, mean_desc: ArrayView1<f64>, alpha: f64) -> Result<Array1<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SapError::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if global.len() != mean_desc.len() {
        return Err(SapError::Shape("global and mean description widths differ".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(row(global));
    let m = g.constant(row(mean_desc));
    let a = g.constant(Array2::from_elem((1, 1), alpha));
    let f = convex_fusion_node(&mut g, x, m, a);
    Ok(g.value(f).row(0).to_owned())
}

/// Convex combination, renormalized to unit length.
pub fn fuse_features(global: ArrayView1<f64>, mean_desc: ArrayView1<f64>, alpha: f64) -> Result<Array1<f64>> {
    let fused = convex_fusion(global, mean_desc, alpha)?;
    Ok(normalize_rows(&row(fused.view())).row(0).to_owned())
}

/// Mean cosine similarity between `fused` and each text feature row.
pub fn alignment_score(fused: ArrayView1<f64>, description_text_features: &Array2<f64>) -> Result<f64> {
    let k = description_text_features.nrows();
    if k == 0 {
        return Err(SapError::Invalid("alignment score needs at least one text feature".into()));
    }
    if description_text_features.ncols() != fused.len() {
        return Err(SapError::Shape("fused and text feature widths differ".into()));
    }
    let f = normalize_rows(&row(fused));
    let t = normalize_rows(description_text_features);
    let mut sims: Vec<f64> = t.rows().into_iter().map(|r| r.dot(&f.row(0))).collect();
    sims.sort_unstable_by(f64::total_cmp);
    Ok(sims.iter().sum::<f64>() / k as f64)
}

// ---------------------------------------------------------------------------
// label-space pipeline

/// Per-stage outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBundle {
    /// `N x M`, one row per description of the label space in sorted order;
    /// zero rows when the label space has no descriptions.
    pub attention_weights: Array2<f64>,
    /// `N x d`.
    pub description_image_features: Array2<f64>,
    pub relevance: Array1<f64>,
    /// Zero when there are no descriptions.
    pub alpha: f64,
    pub mean_description_feature: Array1<f64>,
    pub global_feature: Array1<f64>,
    /// Fused feature before renormalization.
    pub fused_feature: Array1<f64>,
}

fn sorted(mut items: Vec<String>) -> Vec<String> {
    items.sort_unstable();
    items
}

/// Text templates for a label space, flattened. Descriptions appear in
/// sorted order within each class, so scores do not depend on the order a
/// catalog lists them in.
#[derive(Debug, Clone, PartialEq)]
pub struct TextLayout {
    pub templates: Vec<String>,
    /// Class position (in the label space) owning each template.
    pub owners: Vec<usize>,
    pub num_classes: usize,
}

impl TextLayout {
    pub fn averaging_matrix(&self) -> Array2<f64> {
        let mut counts = vec![0usize; self.num_classes];
        for &o in &self.owners {
            counts[o] += 1;
        }
        let mut m = Array2::zeros((self.templates.len(), self.num_classes));
        for (k, &o) in self.owners.iter().enumerate() {
            m[[k, o]] = 1.0 / counts[o] as f64;
        }
        m
    }

    /// Template indices belonging to each class.
    pub fn class_ranges(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (k, &o) in self.owners.iter().enumerate() {
            out[o].push(k);
        }
        out
    }
}

/// Unprompted description features keyed by catalog, label space, and
/// prompting. The first computation for a key is kept.
#[derive(Debug, Default)]
pub struct DescriptionFeatureCache {
    entries: Mutex<HashMap<String, Arc<Option<Array2<f64>>>>>,
}

impl DescriptionFeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get_or_compute(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<Option<Array2<f64>>>,
    ) -> Result<Arc<Option<Array2<f64>>>> {
        if let Some(hit) = self.entries.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let value = Arc::new(compute()?);
        let mut map = self.entries.lock().expect("cache lock");
        Ok(map.entry(key).or_insert(value).clone())
    }
}

/// Text features for a label space, ready for scoring many images.
#[derive(Debug, Clone)]
pub struct PreparedLabelSpace {
    pub label_space: Vec<String>,
    pub layout: TextLayout,
    /// `K x d` text features (prompted when prepared with prompts).
    pub text_features: Array2<f64>,
    pub averaging: Array2<f64>,
    pub descriptions: Arc<Option<Array2<f64>>>,
}

/// Everything needed to score images against label spaces.
#[derive(Debug, Clone)]
pub struct AlignmentModel {
    bundle: EncoderBundle,
    catalog: Arc<DescriptionCatalog>,
    catalog_hash: String,
    template: PromptTemplate,
    variant: AlignmentVariant,
    naming: ClassNaming,
    cache: Arc<DescriptionFeatureCache>,
}

impl AlignmentModel {
    pub fn new(bundle: EncoderBundle, catalog: Arc<DescriptionCatalog>, variant: AlignmentVariant) -> Self {
        let catalog_hash = catalog.content_hash();
        Self {
            bundle,
            catalog,
            catalog_hash,
            template: PromptTemplate::default(),
            variant,
            naming: ClassNaming::Named,
            cache: Arc::new(DescriptionFeatureCache::new()),
        }
    }

    pub fn with_template(mut self, template: PromptTemplate) -> Self {
        self.template = template;
        self
    }

    pub fn with_naming(mut self, naming: ClassNaming) -> Self {
        self.naming = naming;
        self
    }

    pub fn bundle(&self) -> &EncoderBundle {
        &self.bundle
    }

    pub fn catalog(&self) -> &DescriptionCatalog {
        &self.catalog
    }

    pub fn catalog_hash(&self) -> &str {
        &self.catalog_hash
    }

    pub fn variant(&self) -> AlignmentVariant {
        self.variant
    }

    pub fn naming(&self) -> ClassNaming {
        self.naming
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn cache(&self) -> &DescriptionFeatureCache {
        &self.cache
    }

    pub fn layout<S: AsRef<str>>(&self, label_space: &[S]) -> Result<TextLayout> {
        if label_space.is_empty() {
            return Err(SapError::EmptyLabelSpace);
        }
        let no_descriptions = self.catalog.union_over(label_space).is_empty();
        let mut templates = Vec::new();
        let mut owners = Vec::new();
        for (y, class) in label_space.iter().enumerate() {
            let class = class.as_ref();
            let descriptions = if self.variant == AlignmentVariant::NoTextGuidance || no_descriptions {
                Vec::new()
            } else {
                sorted(self.catalog.descriptions(class).to_vec())
            };
            let descriptions = descriptions.as_slice();
            let name = match self.naming {
                ClassNaming::Named => class,
                ClassNaming::OutOfVocabulary => "object",
            };
            let class_templates = if self.variant == AlignmentVariant::AggregatedDescriptions {
                vec![self.template.render_aggregated(name, descriptions)]
            } else if self.naming == ClassNaming::OutOfVocabulary {
                compose_ovc_templates(descriptions, &self.template)
            } else {
                compose_class_templates(name, descriptions, &self.template)
            };
            owners.extend(std::iter::repeat_n(y, class_templates.len()));
            templates.extend(class_templates);
        }
        Ok(TextLayout {
            templates,
            owners,
            num_classes: label_space.len(),
        })
    }

    /// Unprompted description features over the union of `label_space`.
    pub fn description_features<S: AsRef<str>>(&self, label_space: &[S]) -> Result<Arc<Option<Array2<f64>>>> {
        let union = sorted(self.catalog.union_over(label_space));
        let mut hasher = Sha256::new();
        for c in label_space {
            hasher.update(c.as_ref().as_bytes());
            hasher.update([0u8]);
        }
        let key = format!("{}:{}:unprompted", self.catalog_hash, hex::encode(hasher.finalize()));
        self.cache.get_or_compute(key, || {
            if union.is_empty() {
                log::warn!("label space has no class descriptions; image features fall back to the global feature");
                return Ok(None);
            }
            encode_text(&union, &self.bundle, None).map(Some)
        })
    }

    pub fn prepare<S: AsRef<str>>(&self, label_space: &[S], prompts: Option<&PromptParameters>) -> Result<PreparedLabelSpace> {
        let layout = self.layout(label_space)?;
        let text_features = encode_text(&layout.templates, &self.bundle, prompts)?;
        Ok(PreparedLabelSpace {
            label_space: label_space.iter().map(|s| s.as_ref().to_string()).collect(),
            averaging: layout.averaging_matrix(),
            layout,
            text_features,
            descriptions: self.description_features(label_space)?,
        })
    }

    /// Scores one image against a prepared label space.
    pub fn score(
        &self,
        prepared: &PreparedLabelSpace,
        image: &Image,
        prompts: Option<&PromptParameters>,
    ) -> Result<(Array1<f64>, AlignmentBundle)> {
        let mut g = Graph::new();
        let vars = prompts.map(|p| PromptVars::frozen(&mut g, p));
        let image_nodes = encode_image_graph(&mut g, &self.bundle, image, vars.as_ref())?;
        let text = TextNodes {
            features: g.constant(prepared.text_features.clone()),
            averaging: g.constant(prepared.averaging.clone()),
            descriptions: prepared.descriptions.as_ref().as_ref().map(|d| g.constant(d.clone())),
        };
        let nodes = align_nodes(&mut g, image_nodes, text, self.variant);
        Ok((g.value(nodes.scores).row(0).to_owned(), self.collect(&g, &nodes)))
    }

    fn collect(&self, g: &Graph, nodes: &AlignmentNodes) -> AlignmentBundle {
        let d = g.shape(nodes.global).1;
        let m = g.shape(nodes.local).0;
        let vector = |v: Option<Var>, len: usize| {
            v.map(|v| g.value(v).row(0).to_owned()).unwrap_or_else(|| Array1::zeros(len))
        };
        AlignmentBundle {
            attention_weights: nodes
                .attention_weights
                .map(|v| g.value(v).clone())
                .unwrap_or_else(|| Array2::zeros((0, m))),
            description_image_features: nodes
                .description_image_features
                .map(|v| g.value(v).clone())
                .unwrap_or_else(|| Array2::zeros((0, d))),
            relevance: vector(nodes.relevance, 0),
            alpha: nodes.alpha.map(|a| g.scalar(a)).unwrap_or(0.0),
            mean_description_feature: vector(nodes.mean_description_feature, d),
            global_feature: vector(Some(nodes.global), d),
            fused_feature: vector(Some(nodes.fused), d),
        }
    }

    /// Builds the text side on `g` for training; text features are
    /// differentiable when `prompts` are trainable vars.
    pub fn text_nodes<S: AsRef<str>>(
        &self,
        g: &mut Graph,
        label_space: &[S],
        layout: &TextLayout,
        prompts: Option<&PromptVars>,
    ) -> Result<TextNodes> {
        let features = encode_text_graph(g, &self.bundle, &layout.templates, prompts)?;
        let averaging = g.constant(layout.averaging_matrix());
        let descriptions = self
            .description_features(label_space)?
            .as_ref()
            .as_ref()
            .map(|d| g.constant(d.clone()));
        Ok(TextNodes {
            features,
            averaging,
            descriptions,
        })
    }
}

/// Scores `image` against `label_space` with the default template.
pub fn class_alignments<S: AsRef<str>>(
    image: &Image,
    label_space: &[S],
    catalog: &DescriptionCatalog,
    bundle: &EncoderBundle,
    prompts: &PromptParameters,
    variant: AlignmentVariant,
) -> Result<(Array1<f64>, AlignmentBundle)> {
    let model = AlignmentModel::new(bundle.clone(), Arc::new(catalog.clone()), variant);
    let prepared = model.prepare(label_space, Some(prompts))?;
    model.score(&prepared, image, Some(prompts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn single_key_attention() {
        let q = array![[0.3, -0.2], [1.0, 0.5]];
        let k = array![[0.7, 0.1]];
        let v = array![[2.0, -1.0]];
        let (feats, weights) = cross_attention(&q, &k, &v).unwrap();
        assert_eq!(weights, array![[1.0], [1.0]]);
        assert_eq!(feats, array![[2.0, -1.0], [2.0, -1.0]]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let q = array![[0.3, -0.2, 0.1]];
        let k = Array2::from_elem((4, 3), 0.5);
        let v = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]];
        let (feats, weights) = cross_attention(&q, &k, &v).unwrap();
        for w in weights.iter() {
            assert_abs_diff_eq!(*w, 0.25, epsilon = 1e-15);
        }
        let col_mean = v.mean_axis(Axis(0)).unwrap();
        for (a, b) in feats.row(0).iter().zip(col_mean.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
    }

    #[test]
    fn attention_width_mismatch() {
        let err = cross_attention(&Array2::zeros((1, 2)), &Array2::zeros((3, 4)), &Array2::zeros((3, 4)));
        assert!(matches!(err, Err(SapError::Shape(_))));
    }

    #[test]
    fn relevance_edge_cases() {
        let r = relevance_scores(&array![[1.0, 0.0]], array![0.3, 0.4].view()).unwrap();
        assert_eq!(r, array![1.0]);
        let r = relevance_scores(&Array2::from_elem((3, 2), 0.5), array![0.3, 0.4].view()).unwrap();
        for x in r.iter() {
            assert_abs_diff_eq!(*x, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert!(relevance_scores(&Array2::zeros((0, 2)), array![0.3, 0.4].view()).is_err());
    }

    #[test]
    fn relevance_matches_scalar_softmax() {
        // dot products 0.1, 0.2, 0.3 against the global feature e1
        let q = array![[0.1, 0.0], [0.2, 0.0], [0.3, 0.0]];
        let r = relevance_scores(&q, array![1.0, 0.0].view()).unwrap();
        let exps: Vec<f64> = [0.1f64, 0.2, 0.3].iter().map(|x| x.exp()).collect();
        let total: f64 = exps.iter().sum();
        for (got, e) in r.iter().zip(&exps) {
            assert_abs_diff_eq!(*got, e / total, epsilon = 1e-15);
        }
        // frozen values: e^0.1, e^0.2, e^0.3 normalized
        assert_abs_diff_eq!(r[0], 0.300_609_605_355_727_34, epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], 0.332_224_993_533_347_3, epsilon = 1e-12);
        assert_abs_diff_eq!(r[2], 0.367_165_401_110_925_5, epsilon = 1e-12);
    }

    #[test]
    fn mean_description_cases() {
        let feats = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let m = mean_description_feature(&feats, array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(m, array![3.0, 4.0]);
        let same = Array2::from_shape_fn((3, 2), |(_, j)| j as f64 + 0.5);
        let m = mean_description_feature(&same, array![0.2, 0.5, 0.3].view()).unwrap();
        for (a, b) in m.iter().zip([0.5, 1.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(mean_description_feature(&feats, array![0.5, 0.5].view()).is_err());
    }

    #[test]
    fn specificity_cases() {
        assert_eq!(specificity_alpha(&array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap(), 1.0);
        assert_abs_diff_eq!(specificity_alpha(&Array2::from_elem((2, 4), 0.25)).unwrap(), 0.25);
        assert_abs_diff_eq!(
            specificity_alpha(&array![[0.7, 0.3], [0.5, 0.5]]).unwrap(),
            0.6,
            epsilon = 1e-15
        );
        assert!(specificity_alpha(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn fusion_cases() {
        let e1 = array![1.0, 0.0];
        let e2 = array![0.0, 1.0];
        assert_eq!(fuse_features(e1.view(), e2.view(), 0.0).unwrap(), e1);
        assert_eq!(fuse_features(e1.view(), e2.view(), 1.0).unwrap(), e2);
        let half = fuse_features(e1.view(), e2.view(), 0.5).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(half[0], s, epsilon = 1e-15);
        assert_abs_diff_eq!(half[1], s, epsilon = 1e-15);
        assert!(fuse_features(e1.view(), e2.view(), 1.5).is_err());
        assert!(fuse_features(e1.view(), e2.view(), -0.1).is_err());
    }

    #[test]
    fn alignment_score_cases() {
        let v = array![0.6, 0.8];
        assert_abs_diff_eq!(alignment_score(v.view(), &array![[0.6, 0.8]]).unwrap(), 1.0, epsilon = 1e-15);
        let two = array![[1.0, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(alignment_score(array![1.0, 0.0].view(), &two).unwrap(), 0.5, epsilon = 1e-15);
        assert!(alignment_score(v.view(), &Array2::zeros((0, 2))).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AlignmentVariant::ALL {
            assert_eq!(v.as_str().parse::<AlignmentVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<AlignmentVariant>().is_err());
    }

    #[test]
    fn averaging_matrix_rows() {
        let layout = TextLayout {
            templates: vec!["a".into(), "b".into(), "c".into()],
            owners: vec![0, 0, 1],
            num_classes: 2,
        };
        assert_eq!(layout.averaging_matrix(), array![[0.5, 0.0], [0.5, 0.0], [0.0, 1.0]]);
    }
}
