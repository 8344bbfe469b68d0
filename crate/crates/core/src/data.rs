//! Labelled image collections: manifest files and the seeded toy generator.
//!
//! A manifest lists one split of a dataset:
//!
//! ```json
//! {"dataset": "pets", "classes": ["cat", "dog"], "split": "train",
//!  "samples": [{"payload": [[0.1, 0.2], [0.3, 0.4]], "label": "cat"},
//!              {"path": "images/0001.json", "label": "dog"}]}
//! ```
//!
//! `payload` holds the `M x patch_dim` patch matrix inline; `path` names a
//! JSON file with the same nested array, relative to the manifest.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::DescriptionCatalog;
use crate::encoder::{Backbone, Image};
use crate::error::{Result, SapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dataset_id: String,
    /// Canonical class order.
    pub classes: Vec<String>,
    pub split: Split,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    dataset: String,
    classes: Vec<String>,
    samples: Vec<ManifestSample>,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<Vec<Vec<f64>>>,
    label: String,
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, context: &str) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(SapError::Invalid(format!("{context}: payload must be a non-empty rectangular matrix")));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| SapError::Invalid(format!("{context}: {e}")))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_index(&self, class_name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class_name)
    }

    /// Samples whose label is one of `classes`, in dataset order.
    pub fn restricted_to<S: AsRef<str>>(&self, classes: &[S]) -> Dataset {
        let keep = |label: &str| classes.iter().any(|c| c.as_ref() == label);
        Dataset {
            dataset_id: self.dataset_id.clone(),
            classes: self.classes.iter().filter(|c| keep(c)).cloned().collect(),
            split: self.split,
            samples: self.samples.iter().filter(|s| keep(&s.label)).cloned().collect(),
        }
    }

    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let file: ManifestFile = serde_json::from_str(text).map_err(|e| SapError::json("manifest", e))?;
        let mut samples = Vec::with_capacity(file.samples.len());
        for (i, s) in file.samples.into_iter().enumerate() {
            let context = format!("sample {i}");
            if !file.classes.contains(&s.label) {
                return Err(SapError::Invalid(format!("{context}: label `{}` is not a listed class", s.label)));
            }
            let rows = match (s.payload, s.path) {
                (Some(rows), None) => rows,
                (None, Some(path)) => {
                    let full = base_dir.map_or_else(|| Path::new(&path).to_path_buf(), |d| d.join(&path));
                    let text = std::fs::read_to_string(&full).map_err(|e| SapError::io(&full, e))?;
                    serde_json::from_str(&text).map_err(|e| SapError::json(full.display().to_string(), e))?
                }
                _ => {
                    return Err(SapError::Invalid(format!("{context}: exactly one of `path` and `payload` is required")))
                }
            };
            samples.push(Sample {
                image: Image(matrix_from_rows(rows, &context)?),
                label: s.label,
            });
        }
        Ok(Self {
            dataset_id: file.dataset,
            classes: file.classes,
            split: file.split,
            samples,
        })
    }

    /// Manifest JSON with every image inlined as `payload`.
    pub fn to_manifest_json(&self) -> String {
        let file = ManifestFile {
            dataset: self.dataset_id.clone(),
            classes: self.classes.clone(),
            split: self.split,
            samples: self
                .samples
                .iter()
                .map(|s| ManifestSample {
                    path: None,
                    payload: Some(s.image.0.rows().into_iter().map(|r| r.to_vec()).collect()),
                    label: s.label.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("manifest serializes")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SapError::io(path, e))?;
    Dataset::from_json_str(&text, path.parent())
}

pub fn save_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset.to_manifest_json()).map_err(|e| SapError::io(path, e))
}

// ---------------------------------------------------------------------------
// toy world

/// Six everyday classes with two short visual descriptions each.
pub const TOY_OBJECTS: [(&str, [&str; 2]); 6] = [
    ("cat", ["has whiskers", "has pointed ears"]),
    ("dog", ["has a wagging tail", "has floppy ears"]),
    ("parrot", ["has colorful feathers", "has a curved beak"]),
    ("goldfish", ["has orange scales", "has flowing fins"]),
    ("tulip", ["has cup shaped petals", "has a slender stem"]),
    ("cactus", ["has sharp spines", "has a thick body"]),
];

/// Four vehicle classes for transfer runs.
pub const TOY_VEHICLES: [(&str, [&str; 2]); 4] = [
    ("truck", ["has a large cargo bed", "has big tires"]),
    ("bicycle", ["has two thin wheels", "has pedals and a chain"]),
    ("sailboat", ["has a white sail", "floats on water"]),
    ("airplane", ["has long wings", "has jet engines"]),
];

pub fn toy_catalog(dataset_id: &str, classes: &[(&str, [&str; 2])]) -> DescriptionCatalog {
    DescriptionCatalog::new(
        dataset_id,
        classes
            .iter()
            .map(|(name, descs)| (name.to_string(), descs.iter().map(|d| d.to_string()).collect()))
            .collect(),
    )
    .expect("toy class names are distinct")
}

/// Unit-norm mean of the token embeddings of `text`, in patch space.
pub fn concept_pattern(backbone: &dyn Backbone, text: &str) -> Result<ndarray::Array1<f64>> {
    if backbone.patch_dim() != backbone.text_width() {
        return Err(SapError::Invalid("concept patterns need patch and token spaces to coincide".into()));
    }
    let tokens = backbone.tokenize(text);
    if tokens.is_empty() {
        return Err(SapError::Invalid(format!("`{text}` has no tokens")));
    }
    let mean = backbone
        .token_embeddings(&tokens)
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty");
    let norm = mean.dot(&mean).sqrt();
    Ok(mean / norm)
}

/// Parameters of the toy image generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyImageSpec {
    /// Scale of the concept pattern placed in a patch.
    pub signal: f64,
    /// Standard deviation of the per-entry Gaussian noise.
    pub noise: f64,
    /// Probability that a patch carries no concept.
    pub background: f64,
    /// Probability that a concept patch beyond the guaranteed ones shows the
    /// class name rather than a description.
    pub name_share: f64,
}

impl Default for ToyImageSpec {
    fn default() -> Self {
        Self {
            signal: 1.0,
            noise: 0.08,
            background: 0.25,
            name_share: 0.5,
        }
    }
}

/// Images whose patches carry the concept pattern of the class name or of
/// one of its descriptions, plus noise. Every image shows each of its
/// class's concepts in at least one patch (when there are enough patches);
/// the remaining patches are background or a random concept of the class.
/// Classes are generated in order with `per_class` samples each.
pub fn generate_toy_dataset(
    backbone: &dyn Backbone,
    catalog: &DescriptionCatalog,
    split: Split,
    per_class: usize,
    spec: ToyImageSpec,
    seed: u64,
) -> Result<Dataset> {
    let patches = backbone.config().patches;
    let width = backbone.patch_dim();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| SapError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(per_class * catalog.entries().len());
    for entry in catalog.entries() {
        let mut concepts = vec![concept_pattern(backbone, &entry.class_name)?];
        for d in &entry.descriptions {
            concepts.push(concept_pattern(backbone, d)?);
        }
        for _ in 0..per_class {
            let mut pixels = Array2::from_shape_simple_fn((patches, width), || noise.sample(&mut rng));
            let mut slots: Vec<usize> = (0..patches).collect();
            slots.shuffle(&mut rng);
            for (k, &slot) in slots.iter().enumerate() {
                let concept = if k < concepts.len() {
                    Some(k)
                } else if rng.random::<f64>() < spec.background {
                    None
                } else if concepts.len() == 1 || rng.random::<f64>() < spec.name_share {
                    Some(0)
                } else {
                    Some(rng.random_range(1..concepts.len()))
                };
                if let Some(c) = concept {
                    pixels.row_mut(slot).scaled_add(spec.signal, &concepts[c]);
                }
            }
            samples.push(Sample {
                image: Image(pixels),
                label: entry.class_name.clone(),
            });
        }
    }
    Ok(Dataset {
        dataset_id: catalog.dataset_id().to_string(),
        classes: catalog.class_names().map(str::to_string).collect(),
        split,
        samples,
    })
}
