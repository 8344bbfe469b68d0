//! `sap describe`: build a description catalog for a dataset's classes.

use std::path::PathBuf;

use anyhow::Context;

use sap_core::catalog::llm::{fetch_descriptions, ChatProvider, DescriptionCache, HttpChatProvider};
use sap_core::{save_catalog, toy_catalog, DescriptionCatalog, TOY_OBJECTS};

use crate::config::Preset;
use crate::inputs;
use crate::DescribeArgs;

pub const CACHE_DIR_ENV: &str = "SAP_CACHE_DIR";
pub const DEFAULT_CACHE_DIR: &str = ".sap-cache";

pub fn cache_root() -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR), PathBuf::from)
}

pub fn run(args: &DescribeArgs) -> anyhow::Result<()> {
    let run = inputs::load_run(&args.config, &[("paths.manifest", inputs::path_literal(&args.manifest))])?;
    let catalog = if args.config.preset == Some(Preset::Toy) && run.paths.manifest.is_none() {
        toy_catalog(sap_core::preset::TOY_DATASET_ID, &TOY_OBJECTS)
    } else {
        let dataset = inputs::manifest(&run)?;
        let cache = DescriptionCache::new(cache_root());
        let provider = if args.cached_only {
            None
        } else {
            HttpChatProvider::from_env(&run.llm.endpoint, &run.llm.model)
        };
        let provider = provider.as_ref().map(|p| p as &dyn ChatProvider);
        let mut entries = Vec::with_capacity(dataset.classes.len());
        for class in &dataset.classes {
            let descriptions = fetch_descriptions(&dataset.dataset_id, class, provider, &cache)?;
            entries.push((class.clone(), descriptions));
        }
        DescriptionCatalog::new(dataset.dataset_id.clone(), entries)?
    };
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    save_catalog(&catalog, &args.out)?;
    for entry in catalog.entries() {
        println!("{}\t{}", entry.class_name, entry.descriptions.len());
    }
    Ok(())
}
