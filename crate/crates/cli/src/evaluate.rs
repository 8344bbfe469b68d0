//! `sap eval`: score a checkpoint under one protocol.

use std::sync::Arc;

use anyhow::Context;

use sap_core::checkpoint::file_hash;
use sap_core::{
    build_toy_encoder, load_checkpoint, toy_world, AlignmentModel, Dataset, DescriptionCatalog, EvalReport,
    Evaluator, Protocol, SapError, SplitSpec,
};

use crate::config::{Preset, RunConfig};
use crate::inputs;
use crate::EvalArgs;

struct TestData {
    test: Dataset,
    catalog: DescriptionCatalog,
    split: Option<SplitSpec>,
}

fn test_data(run: &RunConfig, preset: Option<Preset>, protocol: Protocol) -> anyhow::Result<TestData> {
    if preset == Some(Preset::Toy) && run.paths.manifest.is_none() {
        let world = toy_world(&run.encoder, run.train.seed)?;
        return Ok(TestData {
            test: world.test,
            catalog: world.catalog,
            split: Some(world.split),
        });
    }
    let test = inputs::manifest(run)?;
    let catalog = inputs::catalog(run)?;
    let split = match protocol {
        Protocol::Gzs | Protocol::B2n | Protocol::Ovc => Some(inputs::split(run, &test.classes)?),
        Protocol::Xdataset | Protocol::Fewshot => None,
    };
    if protocol != Protocol::Xdataset {
        if catalog.dataset_id() != test.dataset_id {
            return Err(SapError::Config(format!(
                "catalog is for `{}` but the manifest is `{}`; only xdataset scores across datasets",
                catalog.dataset_id(),
                test.dataset_id
            ))
            .into());
        }
        inputs::check_coverage(&catalog, &test.classes)?;
    }
    Ok(TestData { test, catalog, split })
}

pub fn run(args: &EvalArgs) -> anyhow::Result<()> {
    let run = inputs::load_run(
        &args.config,
        &[
            ("paths.manifest", inputs::path_literal(&args.manifest)),
            ("paths.catalog", inputs::path_literal(&args.catalog)),
            ("paths.checkpoint", inputs::path_literal(&args.checkpoint)),
            ("train.seed", args.seed.map(|s| s.to_string())),
            ("eval.protocol", args.protocol.map(|p| format!("\"{p}\""))),
            ("eval.workers", args.workers.map(|w| w.to_string())),
        ],
    )?;
    let protocol = run.eval.protocol.ok_or_else(|| {
        let names: Vec<_> = Protocol::ALL.iter().map(|p| p.as_str()).collect();
        SapError::Config(format!("no protocol given (use --protocol with one of {})", names.join(", ")))
    })?;

    let (prompts, template, variant, checkpoint_hash) = match &run.paths.checkpoint {
        Some(path) => {
            let checkpoint = load_checkpoint(path, Some(&run.encoder))
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let variant = args.variant.unwrap_or(checkpoint.train_config.variant);
            (Some(checkpoint.params), checkpoint.template, variant, Some(file_hash(path)?))
        }
        None => {
            log::warn!("no checkpoint given; scoring the frozen encoder without prompts");
            (None, Default::default(), args.variant.unwrap_or(run.train.variant), None)
        }
    };
    let run = run.with_override(&format!("train.variant=\"{variant}\""))?;
    let config_hash = run.config_hash();

    let data = test_data(&run, args.config.preset, protocol)?;
    let bundle = build_toy_encoder(&run.encoder)?;
    let model = AlignmentModel::new(bundle, Arc::new(data.catalog), variant).with_template(template);
    let mut evaluator = Evaluator::new(model, prompts);
    if run.eval.workers > 0 {
        evaluator = evaluator.with_workers(run.eval.workers)?;
    }
    let split = || data.split.as_ref().expect("split is built for split protocols");
    let mut report: EvalReport = match protocol {
        Protocol::Gzs => evaluator.evaluate_gzs(&data.test, split())?,
        Protocol::B2n => evaluator.evaluate_b2n(&data.test, split())?,
        Protocol::Ovc => evaluator.evaluate_ovc(&data.test, split())?,
        Protocol::Xdataset => evaluator.evaluate_cross_dataset(&data.test)?,
        Protocol::Fewshot => evaluator.evaluate_fewshot(&data.test)?,
    };
    report.metadata.seed = Some(run.train.seed);
    report.metadata.config_hash = Some(config_hash);
    report.metadata.checkpoint_hash = checkpoint_hash;
    for flag in &report.flags {
        log::warn!("{flag}");
    }
    inputs::write(&args.out, &report.to_json())?;

    println!("protocol = {protocol}");
    for name in protocol.headline_metrics() {
        println!("{name} = {}", report.metrics[*name]);
    }
    Ok(())
}
