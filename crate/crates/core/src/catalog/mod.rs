//! Class descriptions: the per-class sets, their deduplicated union, and the
//! text templates built from them.
//!
//! The on-disk catalog is UTF-8 JSON:
//!
//! ```json
//! {"dataset": "pets", "classes": {"cat": ["has whiskers"], "lynx": ["has whiskers"]}}
//! ```
//!
//! Descriptions are whitespace-normalized on load (trimmed, internal runs
//! collapsed to one space) and deduplicated within a class. The union keeps
//! the first occurrence order when scanning classes in file order.

pub mod llm;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SapError};

pub use llm::{
    description_query, fetch_descriptions, parse_response, ChatProvider, DescriptionCache,
    HttpChatProvider, API_KEY_ENV,
};

pub const CLASS_SLOT: &str = "{class}";
pub const DESCRIPTION_SLOT: &str = "{description}";
const OVC_CLASS_NAME: &str = "object";

/// Trims and collapses internal whitespace runs to a single space.
pub fn normalize_description(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub class_name: String,
    pub descriptions: Vec<String>,
}

impl ClassEntry {
    /// Normalizes every description, drops blanks and intra-class duplicates.
    pub fn new(class_name: impl Into<String>, descriptions: &[String]) -> Self {
        let mut seen = HashSet::new();
        let descriptions = descriptions
            .iter()
            .map(|d| normalize_description(d))
            .filter(|d| !d.is_empty() && seen.insert(d.clone()))
            .collect();
        Self {
            class_name: class_name.into(),
            descriptions,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptionCatalog {
    dataset_id: String,
    entries: Vec<ClassEntry>,
    by_name: HashMap<String, usize>,
    union: Vec<String>,
    class_indices: Vec<Vec<usize>>,
}

impl DescriptionCatalog {
    /// Builds a catalog from `(class, descriptions)` pairs in their given order.
    pub fn new(
        dataset_id: impl Into<String>,
        classes: Vec<(String, Vec<String>)>,
    ) -> Result<Self> {
        let mut entries = Vec::with_capacity(classes.len());
        let mut by_name = HashMap::with_capacity(classes.len());
        for (name, descriptions) in classes {
            if by_name.insert(name.clone(), entries.len()).is_some() {
                return Err(SapError::DuplicateClass(name));
            }
            entries.push(ClassEntry::new(name, &descriptions));
        }

        let mut union: Vec<String> = Vec::new();
        let mut position: HashMap<String, usize> = HashMap::new();
        let class_indices = entries
            .iter()
            .map(|e| {
                e.descriptions
                    .iter()
                    .map(|d| {
                        *position.entry(d.clone()).or_insert_with(|| {
                            union.push(d.clone());
                            union.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();

        Ok(Self {
            dataset_id: dataset_id.into(),
            entries,
            by_name,
            union,
            class_indices,
        })
    }

    pub fn empty(dataset_id: impl Into<String>) -> Self {
        Self::new(dataset_id, Vec::new()).expect("empty catalog is valid")
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    /// Classes in catalog order.
    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.class_name.as_str())
    }

    pub fn entry(&self, class_name: &str) -> Option<&ClassEntry> {
        self.by_name.get(class_name).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, class_name: &str) -> bool {
        self.by_name.contains_key(class_name)
    }

    /// Descriptions of `class_name`; empty for classes absent from the catalog.
    pub fn descriptions(&self, class_name: &str) -> &[String] {
        self.entry(class_name)
            .map(|e| e.descriptions.as_slice())
            .unwrap_or(&[])
    }

    /// The deduplicated union of all descriptions.
    pub fn union_descriptions(&self) -> &[String] {
        &self.union
    }

    /// Number of distinct descriptions.
    pub fn n(&self) -> usize {
        self.union.len()
    }

    /// Indices of a class's descriptions into [`Self::union_descriptions`].
    pub fn class_indices(&self, class_name: &str) -> Option<&[usize]> {
        self.by_name
            .get(class_name)
            .map(|&i| self.class_indices[i].as_slice())
    }

    pub fn class_index_map(&self) -> BTreeMap<&str, &[usize]> {
        self.entries
            .iter()
            .zip(&self.class_indices)
            .map(|(e, idx)| (e.class_name.as_str(), idx.as_slice()))
            .collect()
    }

    /// Union of descriptions restricted to `label_space`, in label-space order.
    pub fn union_over<S: AsRef<str>>(&self, label_space: &[S]) -> Vec<String> {
        let mut seen = HashSet::new();
        label_space
            .iter()
            .flat_map(|c| self.descriptions(c.as_ref()))
            .filter(|d| seen.insert(d.as_str()))
            .cloned()
            .collect()
    }

    /// Canonical serialization: sorted keys, two-space indent, trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let classes: BTreeMap<&str, &[String]> = self
            .entries
            .iter()
            .map(|e| (e.class_name.as_str(), e.descriptions.as_slice()))
            .collect();
        let file = CanonicalFile {
            classes,
            dataset: &self.dataset_id,
        };
        let mut out = serde_json::to_string_pretty(&file).expect("catalog serializes");
        out.push('\n');
        out
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_json().as_bytes()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| SapError::json("catalog", e))?;
        Self::new(file.dataset, file.classes.0)
    }
}

#[derive(Serialize)]
struct CanonicalFile<'a> {
    classes: BTreeMap<&'a str, &'a [String]>,
    dataset: &'a str,
}

#[derive(Deserialize)]
struct CatalogFile {
    dataset: String,
    classes: OrderedClasses,
}

/// Class map that keeps file order and duplicate keys so they can be rejected.
struct OrderedClasses(Vec<(String, Vec<String>)>);

impl<'de> Deserialize<'de> for OrderedClasses {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct ClassesVisitor;

        impl<'de> Visitor<'de> for ClassesVisitor {
            type Value = OrderedClasses;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of class name to description list")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, Vec<String>>()? {
                    out.push(entry);
                }
                Ok(OrderedClasses(out))
            }
        }

        deserializer.deserialize_map(ClassesVisitor)
    }
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<DescriptionCatalog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SapError::io(path, e))?;
    DescriptionCatalog::from_json_str(&text)
}

pub fn save_catalog(catalog: &DescriptionCatalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, catalog.to_canonical_json()).map_err(|e| SapError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    base_pattern: String,
    description_joiner: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            base_pattern: "a photo of a {class}".to_string(),
            description_joiner: ", which {description}".to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn new(base_pattern: impl Into<String>, description_joiner: impl Into<String>) -> Result<Self> {
        let template = Self {
            base_pattern: base_pattern.into(),
            description_joiner: description_joiner.into(),
        };
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_pattern.matches(CLASS_SLOT).count() != 1 {
            return Err(SapError::Config(format!(
                "base pattern `{}` must contain exactly one {CLASS_SLOT}",
                self.base_pattern
            )));
        }
        if self.description_joiner.matches(DESCRIPTION_SLOT).count() != 1 {
            return Err(SapError::Config(format!(
                "description joiner `{}` must contain exactly one {DESCRIPTION_SLOT}",
                self.description_joiner
            )));
        }
        Ok(())
    }

    pub fn base_pattern(&self) -> &str {
        &self.base_pattern
    }

    pub fn description_joiner(&self) -> &str {
        &self.description_joiner
    }

    /// The plain template for `class_name`. An `a` directly before the class
    /// slot becomes `an` when the class name starts with a vowel.
    pub fn render_plain(&self, class_name: &str) -> String {
        let (prefix, suffix) = self
            .base_pattern
            .split_once(CLASS_SLOT)
            .expect("validated pattern has a class slot");
        let starts_with_vowel = class_name
            .chars()
            .next()
            .is_some_and(|c| "aeiouAEIOU".contains(c));
        let prefix = match prefix.strip_suffix("a ") {
            Some(head) if starts_with_vowel && (head.is_empty() || head.ends_with(' ')) => {
                format!("{head}an ")
            }
            _ => prefix.to_string(),
        };
        format!("{prefix}{class_name}{suffix}")
    }

    fn join(&self, description: &str) -> String {
        self.description_joiner.replacen(DESCRIPTION_SLOT, description, 1)
    }

    pub fn render_with_description(&self, class_name: &str, description: &str) -> String {
        let mut out = self.render_plain(class_name);
        out.push_str(&self.join(description));
        out
    }

    /// One template with every description appended in order.
    pub fn render_aggregated(&self, class_name: &str, descriptions: &[String]) -> String {
        let mut out = self.render_plain(class_name);
        for d in descriptions {
            out.push_str(&self.join(d));
        }
        out
    }
}

/// One template per description, or the plain template when there are none.
pub fn compose_class_templates(
    class_name: &str,
    descriptions: &[String],
    template: &PromptTemplate,
) -> Vec<String> {
    if descriptions.is_empty() {
        return vec![template.render_plain(class_name)];
    }
    descriptions
        .iter()
        .map(|d| template.render_with_description(class_name, d))
        .collect()
}

/// Class-name-free templates: the class slot holds `object`.
pub fn compose_ovc_templates(descriptions: &[String], template: &PromptTemplate) -> Vec<String> {
    compose_class_templates(OVC_CLASS_NAME, descriptions, template)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_entry_catalog() {
        let cat = DescriptionCatalog::from_json_str(
            r#"{"dataset": "d", "classes": {"cat": ["has whiskers"]}}"#,
        )
        .unwrap();
        assert_eq!(cat.n(), 1);
        assert_eq!(cat.class_indices("cat").unwrap(), &[0]);
    }

    #[test]
    fn shared_description_is_stored_once() {
        let cat = DescriptionCatalog::from_json_str(
            r#"{"dataset": "d", "classes": {"cat": ["has whiskers", "has a large tail"], "lynx": ["has whiskers"]}}"#,
        )
        .unwrap();
        assert_eq!(cat.n(), 2);
        assert_eq!(cat.class_indices("lynx").unwrap(), &[0]);
        assert_eq!(cat.class_indices("cat").unwrap(), &[0, 1]);
    }

    #[test]
    fn empty_classes_map() {
        let cat = DescriptionCatalog::from_json_str(r#"{"dataset": "d", "classes": {}}"#).unwrap();
        assert_eq!(cat.n(), 0);
        assert!(cat.entries().is_empty());
    }

    #[test]
    fn duplicate_class_is_rejected_by_name() {
        let err = DescriptionCatalog::from_json_str(
            r#"{"dataset": "d", "classes": {"cat": ["a"], "dog": ["b"], "cat": ["c"]}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, SapError::DuplicateClass(ref n) if n == "cat"), "{err}");
    }

    #[test]
    fn malformed_json_is_an_error() {
        let err = DescriptionCatalog::from_json_str(r#"{"dataset": "d", "classes": "#).unwrap_err();
        assert!(matches!(err, SapError::Json { .. }));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_catalog("/nonexistent/catalog.json").unwrap_err();
        assert!(matches!(err, SapError::Io { .. }));
    }

    #[test]
    fn whitespace_normalization_and_intra_class_dedup() {
        let entry = ClassEntry::new("cat", &strings(&["  has   whiskers ", "has whiskers", "   ", "Has whiskers"]));
        assert_eq!(entry.descriptions, strings(&["has whiskers", "Has whiskers"]));
    }

    #[test]
    fn union_follows_file_order() {
        let cat = DescriptionCatalog::from_json_str(
            r#"{"dataset": "d", "classes": {"zebra": ["has stripes"], "ant": ["is tiny", "has stripes"]}}"#,
        )
        .unwrap();
        assert_eq!(cat.union_descriptions(), &strings(&["has stripes", "is tiny"]));
        assert_eq!(cat.union_over(&["ant"]), strings(&["is tiny", "has stripes"]));
        assert_eq!(cat.union_over(&["missing"]), Vec::<String>::new());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let cat = DescriptionCatalog::from_json_str(
            r#"{"dataset": "d", "classes": {"zebra": ["has stripes"], "ant": ["is tiny"]}}"#,
        )
        .unwrap();
        let expected = "{\n  \"classes\": {\n    \"ant\": [\n      \"is tiny\"\n    ],\n    \"zebra\": [\n      \"has stripes\"\n    ]\n  },\n  \"dataset\": \"d\"\n}\n";
        assert_eq!(cat.to_canonical_json(), expected);
    }

    #[test]
    fn class_templates() {
        let t = PromptTemplate::default();
        assert_eq!(
            compose_class_templates("cat", &strings(&["has whiskers", "has a large tail"]), &t),
            strings(&["a photo of a cat, which has whiskers", "a photo of a cat, which has a large tail"])
        );
        assert_eq!(compose_class_templates("cat", &[], &t), strings(&["a photo of a cat"]));
        assert_eq!(
            compose_class_templates("dog", &strings(&["barks"]), &t),
            strings(&["a photo of a dog, which barks"])
        );
    }

    #[test]
    fn ovc_templates() {
        let t = PromptTemplate::default();
        assert_eq!(
            compose_ovc_templates(&strings(&["has a yellow body"]), &t),
            strings(&["a photo of an object, which has a yellow body"])
        );
        assert_eq!(compose_ovc_templates(&[], &t), strings(&["a photo of an object"]));
        assert_eq!(
            compose_ovc_templates(&strings(&["has round red cheeks"]), &t),
            strings(&["a photo of an object, which has round red cheeks"])
        );
    }

    #[test]
    fn article_follows_leading_vowel() {
        let t = PromptTemplate::default();
        assert_eq!(t.render_plain("owl"), "a photo of an owl");
        assert_eq!(t.render_plain("Eagle"), "a photo of an Eagle");
        assert_eq!(t.render_plain("yak"), "a photo of a yak");
        let custom = PromptTemplate::new("{class} texture", " {description}").unwrap();
        assert_eq!(custom.render_plain("oak"), "oak texture");
    }

    #[test]
    fn alternative_joiner() {
        let t = PromptTemplate::new("a photo of a {class}", " which {description}").unwrap();
        assert_eq!(
            compose_class_templates("cat", &strings(&["has whiskers"]), &t),
            strings(&["a photo of a cat which has whiskers"])
        );
    }

    #[test]
    fn aggregated_template() {
        let t = PromptTemplate::default();
        assert_eq!(
            t.render_aggregated("cat", &strings(&["has whiskers", "purrs"])),
            "a photo of a cat, which has whiskers, which purrs"
        );
    }

    #[test]
    fn template_slots_are_validated() {
        assert!(PromptTemplate::new("a photo", ", which {description}").is_err());
        assert!(PromptTemplate::new("{class} {class}", ", which {description}").is_err());
        assert!(PromptTemplate::new("a {class}", ", which").is_err());
    }
}
