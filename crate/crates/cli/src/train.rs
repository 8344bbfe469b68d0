//! `sap train`: fit prompt parameters and write a checkpoint.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use sap_core::{
    build_toy_encoder, sample_k_shot, save_checkpoint, toy_world, train, AlignmentModel, Checkpoint, Dataset,
    DescriptionCatalog, PromptTemplate, TrainHistory,
};

use crate::config::{Preset, RunConfig};
use crate::inputs;
use crate::TrainArgs;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const RUN_FILE: &str = "run.toml";
pub const SUMMARY_FILE: &str = "summary.json";

/// One line of `epochs.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLine {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub mean_total: f64,
}

fn epochs_jsonl(history: &TrainHistory) -> String {
    let mut out = String::new();
    for e in &history.epochs {
        let line = EpochLine {
            epoch: e.epoch,
            train_accuracy: e.train_accuracy,
            mean_total: e.mean_total,
        };
        out.push_str(&serde_json::to_string(&line).expect("epoch line serializes"));
        out.push('\n');
    }
    out
}

/// Mean loss terms over the steps of the last epoch.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub epochs: usize,
    pub steps: usize,
    pub final_epoch: Option<FinalEpoch>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalEpoch {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_steer_v: f64,
    pub l_steer_t: f64,
    pub total: f64,
    pub train_accuracy: f64,
}

fn final_epoch(history: &TrainHistory) -> Option<FinalEpoch> {
    let last = history.epochs.last()?;
    let steps: Vec<_> = history.steps.iter().filter(|s| s.epoch == last.epoch).collect();
    let n = steps.len() as f64;
    let mean = |f: fn(&sap_core::trainer::StepRecord) -> f64| steps.iter().map(|s| f(s)).sum::<f64>() / n;
    Some(FinalEpoch {
        epoch: last.epoch,
        l_ce: mean(|s| s.l_ce),
        l_steer_v: mean(|s| s.l_steer_v),
        l_steer_t: mean(|s| s.l_steer_t),
        total: mean(|s| s.total),
        train_accuracy: last.train_accuracy,
    })
}

fn training_data(run: &RunConfig, preset: Option<Preset>) -> anyhow::Result<(Dataset, DescriptionCatalog)> {
    if preset == Some(Preset::Toy) && run.paths.manifest.is_none() {
        let world = toy_world(&run.encoder, run.train.seed)?;
        return Ok((world.train, world.catalog));
    }
    let mut dataset = inputs::manifest(run)?;
    let catalog = inputs::catalog(run)?;
    if run.data.base_only {
        let split = inputs::split(run, &dataset.classes)?;
        dataset = dataset.restricted_to(&split.base_classes);
    }
    if run.data.k_shots > 0 {
        let classes = dataset.classes.clone();
        dataset = sample_k_shot(&dataset, &classes, run.data.k_shots, run.train.seed)?;
    }
    inputs::check_coverage(&catalog, &dataset.classes)?;
    Ok((dataset, catalog))
}

pub fn run(args: &TrainArgs) -> anyhow::Result<()> {
    let run = inputs::load_run(
        &args.config,
        &[
            ("paths.manifest", inputs::path_literal(&args.manifest)),
            ("paths.catalog", inputs::path_literal(&args.catalog)),
            ("train.seed", args.seed.map(|s| s.to_string())),
            ("train.variant", args.variant.map(|v| format!("\"{v}\""))),
            ("train.epochs", args.epochs.map(|e| e.to_string())),
        ],
    )?;
    let config_hash = run.config_hash();
    log::info!("config hash {config_hash}");

    let (dataset, catalog) = training_data(&run, args.config.preset)?;
    log::info!(
        "training on {} images of {} classes from `{}`",
        dataset.len(),
        dataset.classes.len(),
        dataset.dataset_id
    );
    let bundle = build_toy_encoder(&run.encoder)?;
    let model = AlignmentModel::new(bundle, Arc::new(catalog), run.train.variant);
    let (params, history) = train(&model, &dataset, &run.train)?;

    let out = &args.out;
    let checkpoint = Checkpoint::new(params, run.encoder.clone(), run.train.clone(), PromptTemplate::default());
    std::fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    save_checkpoint(&checkpoint, out.join(CHECKPOINT_FILE))?;
    inputs::write(&out.join(HISTORY_FILE), &history.to_jsonl())?;
    inputs::write(&out.join(EPOCHS_FILE), &epochs_jsonl(&history))?;
    inputs::write(&out.join(RUN_FILE), &run.to_toml())?;
    let summary = TrainSummary {
        config_hash,
        epochs: history.epochs.len(),
        steps: history.steps.len(),
        final_epoch: final_epoch(&history),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    inputs::write(&out.join(SUMMARY_FILE), &text)?;

    println!("epochs = {}", summary.epochs);
    if let Some(e) = &summary.final_epoch {
        println!("l_ce = {}", e.l_ce);
        println!("l_steer_v = {}", e.l_steer_v);
        println!("l_steer_t = {}", e.l_steer_t);
        println!("total = {}", e.total);
        println!("train_accuracy = {}", e.train_accuracy);
    }
    println!("checkpoint = {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}
