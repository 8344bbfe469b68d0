//! Evaluation protocols, splits, few-shot sampling, and reports.
//!
//! | protocol   | label space                         | metrics                  |
//! |------------|-------------------------------------|--------------------------|
//! | `gzs`      | base and novel together             | `gBase`, `gNovel`, `gHM` |
//! | `b2n`      | base only, then novel only          | `Base`, `Novel`, `HM`    |
//! | `ovc`      | as `b2n`, class names hidden        | `Base`, `Novel`, `HM`    |
//! | `xdataset` | every class of the target dataset   | `accuracy`               |
//! | `fewshot`  | every class of the dataset          | `accuracy`               |
//!
//! Accuracies are micro-averaged over images and reported in percent.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{class_alignments, AlignmentModel, ClassNaming, PreparedLabelSpace};
use crate::catalog::DescriptionCatalog;
use crate::data::Dataset;
use crate::encoder::{EncoderBundle, Image, PromptParameters};
use crate::error::{Result, SapError};
use crate::trainer::argmax_first;
use crate::AlignmentVariant;

pub const DEFAULT_K_SHOTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Gzs,
    B2n,
    Ovc,
    Xdataset,
    Fewshot,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [Protocol::Gzs, Protocol::B2n, Protocol::Ovc, Protocol::Xdataset, Protocol::Fewshot];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Gzs => "gzs",
            Protocol::B2n => "b2n",
            Protocol::Ovc => "ovc",
            Protocol::Xdataset => "xdataset",
            Protocol::Fewshot => "fewshot",
        }
    }

    /// Metric names printed for this protocol, in display order.
    pub fn headline_metrics(self) -> &'static [&'static str] {
        match self {
            Protocol::Gzs => &["gBase", "gNovel", "gHM"],
            Protocol::B2n | Protocol::Ovc => &["Base", "Novel", "HM"],
            Protocol::Xdataset | Protocol::Fewshot => &["accuracy"],
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = SapError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.as_str()).collect();
            SapError::Config(format!("unknown protocol `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(SapError::Invalid(format!("harmonic mean of negative or NaN input ({a}, {b})")));
    }
    if a + b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub k_shots: usize,
    /// Recorded for reports; the split itself is positional.
    pub seed: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    base: Vec<String>,
    novel: Vec<String>,
}

/// First `ceil(|Y| / 2)` classes are base, the rest novel.
pub fn split_base_novel<S: AsRef<str>>(label_space: &[S], seed: u64) -> Result<SplitSpec> {
    if label_space.len() < 2 {
        return Err(SapError::Invalid(format!(
            "a base/novel split needs at least 2 classes, got {}",
            label_space.len()
        )));
    }
    let names: Vec<String> = label_space.iter().map(|s| s.as_ref().to_string()).collect();
    let cut = names.len().div_ceil(2);
    Ok(SplitSpec {
        novel_classes: names[cut..].to_vec(),
        base_classes: names[..cut].to_vec(),
        k_shots: DEFAULT_K_SHOTS,
        seed,
    })
}

impl SplitSpec {
    /// Every class as base, nothing novel.
    pub fn all_base<S: AsRef<str>>(label_space: &[S], k_shots: usize, seed: u64) -> Self {
        Self {
            base_classes: label_space.iter().map(|s| s.as_ref().to_string()).collect(),
            novel_classes: Vec::new(),
            k_shots,
            seed,
        }
    }

    /// Reads `{"base": [...], "novel": [...]}` and checks it partitions
    /// `label_space`.
    pub fn from_json_str<S: AsRef<str>>(text: &str, label_space: &[S], seed: u64) -> Result<Self> {
        let file: SplitFile = serde_json::from_str(text).map_err(|e| SapError::json("split file", e))?;
        let all: BTreeSet<&str> = label_space.iter().map(|s| s.as_ref()).collect();
        let base: BTreeSet<&str> = file.base.iter().map(String::as_str).collect();
        let novel: BTreeSet<&str> = file.novel.iter().map(String::as_str).collect();
        if base.len() != file.base.len() || novel.len() != file.novel.len() {
            return Err(SapError::Invalid("split file repeats a class".into()));
        }
        if !base.is_disjoint(&novel) {
            return Err(SapError::Invalid("split file lists a class as both base and novel".into()));
        }
        let union: BTreeSet<&str> = base.union(&novel).copied().collect();
        if union != all {
            return Err(SapError::Invalid("split file does not cover the label space exactly".into()));
        }
        Ok(Self {
            base_classes: file.base,
            novel_classes: file.novel,
            k_shots: DEFAULT_K_SHOTS,
            seed,
        })
    }

    pub fn from_file<S: AsRef<str>>(path: impl AsRef<Path>, label_space: &[S], seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SapError::io(path, e))?;
        Self::from_json_str(&text, label_space, seed)
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.base_classes.iter().chain(&self.novel_classes).cloned().collect()
    }
}

/// Up to `k` samples per class, drawn without replacement. Kept samples
/// stay in dataset order.
pub fn sample_k_shot<S: AsRef<str>>(dataset: &Dataset, classes: &[S], k: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::new();
    for class in classes {
        let class = class.as_ref();
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == class).collect();
        if members.is_empty() {
            return Err(SapError::EmptyClass(class.to_string()));
        }
        let take = k.min(members.len());
        keep.extend(sample(&mut rng, members.len(), take).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    let mut out = dataset.restricted_to(classes);
    out.samples = keep.into_iter().map(|i| dataset.samples[i].clone()).collect();
    Ok(out)
}

/// Highest-scoring class, lowest index on ties.
pub fn predict_class<'a, S: AsRef<str>>(
    image: &Image,
    label_space: &'a [S],
    catalog: &DescriptionCatalog,
    bundle: &EncoderBundle,
    prompts: &PromptParameters,
    variant: AlignmentVariant,
) -> Result<&'a str> {
    let (scores, _) = class_alignments(image, label_space, catalog, bundle, prompts, variant)?;
    Ok(label_space[argmax_first(scores.view())].as_ref())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub variant: AlignmentVariant,
    pub catalog_hash: String,
    pub averaging: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub checkpoint_hash: Option<String>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub metrics: BTreeMap<String, f64>,
    /// Per-class counts, keyed by `<section>/<class>` where the section is
    /// the label space the class was scored in.
    pub counts: BTreeMap<String, ClassCount>,
    pub metadata: ReportMetadata,
    pub flags: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SapError::json("report", e))
    }

    /// Every harmonic mean in `metrics` recomputed from its operands.
    pub fn check_harmonic_means(&self, tolerance: f64) -> Result<()> {
        for (a, b, h) in [("gBase", "gNovel", "gHM"), ("Base", "Novel", "HM")] {
            if let (Some(&x), Some(&y), Some(&z)) = (self.metrics.get(a), self.metrics.get(b), self.metrics.get(h)) {
                let want = harmonic_mean(x, y)?;
                if (want - z).abs() > tolerance {
                    return Err(SapError::Invalid(format!("{h} = {z} but harmonic_mean({x}, {y}) = {want}")));
                }
            }
        }
        Ok(())
    }
}

/// Scores images with a fixed model and prompts.
#[derive(Debug, Clone)]
pub struct Evaluator {
    model: AlignmentModel,
    prompts: Option<PromptParameters>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

struct Tally {
    counts: BTreeMap<String, ClassCount>,
    correct: usize,
    total: usize,
}

impl Tally {
    fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

impl Evaluator {
    pub fn new(model: AlignmentModel, prompts: Option<PromptParameters>) -> Self {
        Self {
            model,
            prompts,
            pool: None,
        }
    }

    /// Caps the number of threads scoring images.
    pub fn with_workers(mut self, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| SapError::Config(e.to_string()))?;
        self.pool = Some(Arc::new(pool));
        Ok(self)
    }

    pub fn model(&self) -> &AlignmentModel {
        &self.model
    }

    fn with_naming(&self, naming: ClassNaming) -> Self {
        Self {
            model: self.model.clone().with_naming(naming),
            prompts: self.prompts.clone(),
            pool: self.pool.clone(),
        }
    }

    /// Predicted label-space index for each image.
    pub fn predict_indices(&self, prepared: &PreparedLabelSpace, images: &[&Image]) -> Result<Vec<usize>> {
        let run = || {
            images
                .par_iter()
                .map(|image| {
                    let (scores, _) = self.model.score(prepared, image, self.prompts.as_ref())?;
                    Ok(argmax_first(scores.view()))
                })
                .collect::<Result<Vec<_>>>()
        };
        match &self.pool {
            Some(pool) => pool.install(run),
            None => run(),
        }
    }

    fn tally(&self, test: &Dataset, label_space: &[String], section: &str) -> Result<Tally> {
        let samples: Vec<_> = test
            .samples
            .iter()
            .filter(|s| label_space.contains(&s.label))
            .collect();
        if samples.is_empty() {
            return Err(SapError::Invalid(format!("no test images for the {section} classes")));
        }
        let prepared = self.model.prepare(label_space, self.prompts.as_ref())?;
        let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
        let predictions = self.predict_indices(&prepared, &images)?;
        let mut counts = BTreeMap::new();
        let mut correct = 0;
        for (s, p) in samples.iter().zip(predictions) {
            let hit = label_space[p] == s.label;
            let c: &mut ClassCount = counts.entry(format!("{section}/{}", s.label)).or_default();
            c.total += 1;
            c.correct += usize::from(hit);
            correct += usize::from(hit);
        }
        Ok(Tally {
            counts,
            correct,
            total: samples.len(),
        })
    }

    fn report(&self, protocol: Protocol, dataset: &str) -> EvalReport {
        EvalReport {
            protocol,
            metrics: BTreeMap::new(),
            counts: BTreeMap::new(),
            metadata: ReportMetadata {
                dataset: dataset.to_string(),
                variant: self.model.variant(),
                catalog_hash: self.model.catalog_hash().to_string(),
                averaging: "micro".into(),
                ..ReportMetadata::default()
            },
            flags: Vec::new(),
        }
    }

    fn check_labels(test: &Dataset, classes: &[String]) -> Result<()> {
        if test.is_empty() {
            return Err(SapError::EmptyDataset);
        }
        if let Some(s) = test.samples.iter().find(|s| !classes.contains(&s.label)) {
            return Err(SapError::Invalid(format!("test label `{}` is outside the split", s.label)));
        }
        Ok(())
    }

    fn base_novel(&self, protocol: Protocol, test: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
        Self::check_labels(test, &split.all_classes())?;
        let mut report = self.report(protocol, &test.dataset_id);
        report.metadata.seed = Some(split.seed);
        let base = self.tally(test, &split.base_classes, "base")?;
        let novel = self.tally(test, &split.novel_classes, "novel")?;
        let (b, n) = (base.accuracy(), novel.accuracy());
        report.metrics.insert("Base".into(), b);
        report.metrics.insert("Novel".into(), n);
        report.metrics.insert("HM".into(), harmonic_mean(b, n)?);
        report.counts.extend(base.counts);
        report.counts.extend(novel.counts);
        Ok(report)
    }

    pub fn evaluate_b2n(&self, test: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
        self.base_novel(Protocol::B2n, test, split)
    }

    pub fn evaluate_gzs(&self, test: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
        let all = split.all_classes();
        Self::check_labels(test, &all)?;
        let mut report = self.report(Protocol::Gzs, &test.dataset_id);
        report.metadata.seed = Some(split.seed);
        let prepared = self.model.prepare(&all, self.prompts.as_ref())?;
        let images: Vec<&Image> = test.samples.iter().map(|s| &s.image).collect();
        let predictions = self.predict_indices(&prepared, &images)?;
        let mut sections = [(0usize, 0usize); 2];
        for (s, p) in test.samples.iter().zip(predictions) {
            let is_base = split.base_classes.contains(&s.label);
            let section = if is_base { "base" } else { "novel" };
            let hit = all[p] == s.label;
            let c = report.counts.entry(format!("{section}/{}", s.label)).or_default();
            c.total += 1;
            c.correct += usize::from(hit);
            let t = &mut sections[usize::from(!is_base)];
            t.0 += usize::from(hit);
            t.1 += 1;
        }
        if sections.iter().any(|&(_, n)| n == 0) {
            return Err(SapError::Invalid("gzs needs test images from both base and novel classes".into()));
        }
        let acc = |(c, n): (usize, usize)| 100.0 * c as f64 / n as f64;
        let (b, n) = (acc(sections[0]), acc(sections[1]));
        report.metrics.insert("gBase".into(), b);
        report.metrics.insert("gNovel".into(), n);
        report.metrics.insert("gHM".into(), harmonic_mean(b, n)?);
        Ok(report)
    }

    /// B2N with every class name replaced by `object`.
    pub fn evaluate_ovc(&self, test: &Dataset, split: &SplitSpec) -> Result<EvalReport> {
        let ovc = self.with_naming(ClassNaming::OutOfVocabulary);
        let mut report = ovc.base_novel(Protocol::Ovc, test, split)?;
        let catalog = self.model.catalog();
        for class in split.all_classes() {
            if catalog.descriptions(&class).is_empty() {
                report
                    .flags
                    .push(format!("degenerate: `{class}` has no descriptions and uses the bare object template"));
            }
        }
        for section in [&split.base_classes, &split.novel_classes] {
            let mut seen: BTreeMap<Vec<String>, &str> = BTreeMap::new();
            for class in section {
                let mut key = catalog.descriptions(class).to_vec();
                key.sort();
                if let Some(first) = seen.insert(key, class) {
                    report
                        .flags
                        .push(format!("indistinguishable: `{first}` and `{class}` have identical descriptions"));
                }
            }
        }
        Ok(report)
    }

    /// Accuracy over the target's full label space.
    pub fn evaluate_cross_dataset(&self, test: &Dataset) -> Result<EvalReport> {
        Self::check_labels(test, &test.classes)?;
        let mut report = self.report(Protocol::Xdataset, &test.dataset_id);
        let catalog = self.model.catalog();
        for class in &test.classes {
            if !catalog.contains(class) {
                log::warn!("class `{class}` is missing from the catalog; scoring it with the plain template");
                report.flags.push(format!("missing descriptions: `{class}`"));
            }
        }
        let tally = self.tally(test, &test.classes, "all")?;
        report.metrics.insert("accuracy".into(), tally.accuracy());
        report.counts = tally.counts;
        Ok(report)
    }

    /// Accuracy over every class of the dataset.
    pub fn evaluate_fewshot(&self, test: &Dataset) -> Result<EvalReport> {
        let mut report = self.evaluate_cross_dataset(test)?;
        report.protocol = Protocol::Fewshot;
        Ok(report)
    }
}
