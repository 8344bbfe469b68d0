//! Loading the run configuration and the labelled data a command works on.

use std::path::{Path, PathBuf};

use anyhow::Context;

use sap_core::{load_catalog, load_manifest, split_base_novel, Dataset, DescriptionCatalog, SapError, SplitSpec};

use crate::config::RunConfig;
use crate::ConfigArgs;

/// The merged configuration plus any dedicated flags, applied in a fixed
/// order after `--set`.
pub fn load_run(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
    let mut overrides = args.set.clone();
    for (key, value) in flags {
        if let Some(v) = value {
            overrides.push(format!("{key}={v}"));
        }
    }
    RunConfig::load(args.preset, args.config.as_deref(), &overrides)
}

/// TOML literal for a path override.
pub fn path_literal(path: &Option<PathBuf>) -> Option<String> {
    path.as_ref()
        .map(|p| toml::Value::String(p.to_string_lossy().into_owned()).to_string())
}

pub fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| SapError::Config(format!("no {what} given (use --{what} or paths.{what})")).into())
}

pub fn manifest(run: &RunConfig) -> anyhow::Result<Dataset> {
    let path = required(&run.paths.manifest, "manifest")?;
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

pub fn catalog(run: &RunConfig) -> anyhow::Result<DescriptionCatalog> {
    let path = required(&run.paths.catalog, "catalog")?;
    load_catalog(path).with_context(|| format!("loading catalog {}", path.display()))
}

/// The split file when configured, otherwise the positional half split.
pub fn split(run: &RunConfig, classes: &[String]) -> anyhow::Result<SplitSpec> {
    let seed = run.train.seed;
    let split = match &run.paths.split {
        Some(path) => SplitSpec::from_file(path, classes, seed).with_context(|| format!("loading split {}", path.display()))?,
        None => split_base_novel(classes, seed)?,
    };
    Ok(split)
}

/// Every class must have a catalog entry.
pub fn check_coverage(catalog: &DescriptionCatalog, classes: &[String]) -> anyhow::Result<()> {
    let missing: Vec<&str> = classes.iter().filter(|c| !catalog.contains(c)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(SapError::Config(format!(
            "catalog `{}` has no entry for {}",
            catalog.dataset_id(),
            missing.join(", ")
        ))
        .into());
    }
    Ok(())
}

pub fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
