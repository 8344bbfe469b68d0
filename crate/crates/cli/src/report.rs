//! `sap report`: average reports of one protocol across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use sap_core::{EvalReport, Protocol, SapError};

use crate::inputs;
use crate::ReportArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSource {
    pub path: PathBuf,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub protocol: Protocol,
    pub runs: usize,
    /// Mean of each metric across runs.
    pub metrics: BTreeMap<String, f64>,
    /// Every run's value, in input order.
    pub per_run: BTreeMap<String, Vec<f64>>,
    pub sources: Vec<RunSource>,
}

/// Mean as an offset from the first value, so equal inputs average to
/// themselves exactly.
pub fn mean(values: &[f64]) -> f64 {
    let first = values[0];
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

pub fn aggregate(reports: &[(PathBuf, EvalReport)]) -> Result<Aggregate, SapError> {
    let (first_path, first) = reports.first().ok_or_else(|| SapError::Config("no reports given".into()))?;
    let names: Vec<&String> = first.metrics.keys().collect();
    for (path, r) in reports {
        if r.protocol != first.protocol {
            return Err(SapError::Config(format!(
                "mixed protocols: {} is `{}` but {} is `{}`",
                first_path.display(),
                first.protocol,
                path.display(),
                r.protocol
            )));
        }
        if r.metrics.keys().collect::<Vec<_>>() != names {
            return Err(SapError::Config(format!(
                "{} reports different metrics than {}",
                path.display(),
                first_path.display()
            )));
        }
    }
    let per_run: BTreeMap<String, Vec<f64>> = names
        .iter()
        .map(|&name| (name.clone(), reports.iter().map(|(_, r)| r.metrics[name]).collect()))
        .collect();
    Ok(Aggregate {
        protocol: first.protocol,
        runs: reports.len(),
        metrics: per_run.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
        per_run,
        sources: reports
            .iter()
            .map(|(path, r)| RunSource {
                path: path.clone(),
                seed: r.metadata.seed,
                config_hash: r.metadata.config_hash.clone(),
                checkpoint_hash: r.metadata.checkpoint_hash.clone(),
            })
            .collect(),
    })
}

/// Plain-text table: one row per metric, the mean then each run.
pub fn table(agg: &Aggregate) -> String {
    let mut headers = vec!["metric".to_string(), "mean".to_string()];
    headers.extend((1..=agg.runs).map(|i| format!("run{i}")));
    let mut rows = vec![headers];
    let order: Vec<&str> = agg
        .protocol
        .headline_metrics()
        .iter()
        .copied()
        .filter(|m| agg.metrics.contains_key(*m))
        .chain(agg.metrics.keys().map(String::as_str).filter(|m| !agg.protocol.headline_metrics().contains(m)))
        .collect();
    for name in order {
        let mut row = vec![name.to_string(), agg.metrics[name].to_string()];
        row.extend(agg.per_run[name].iter().map(|v| v.to_string()));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!("protocol: {}  runs: {}\n", agg.protocol, agg.runs);
    for row in rows {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

pub fn run(args: &ReportArgs) -> anyhow::Result<()> {
    let mut reports = Vec::with_capacity(args.reports.len());
    for path in &args.reports {
        let text = std::fs::read_to_string(path).map_err(|e| SapError::Config(format!("reading {}: {e}", path.display())))?;
        let report = EvalReport::from_json_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        reports.push((path.clone(), report));
    }
    let agg = aggregate(&reports)?;
    let mut json = serde_json::to_string_pretty(&agg)?;
    json.push('\n');
    inputs::write(&args.out, &json)?;
    let text = table(&agg);
    inputs::write(&args.out.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sap_core::eval::ReportMetadata;

    fn report(protocol: Protocol, metrics: &[(&str, f64)]) -> EvalReport {
        EvalReport {
            protocol,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            counts: BTreeMap::new(),
            metadata: ReportMetadata::default(),
            flags: Vec::new(),
        }
    }

    #[test]
    fn identical_reports_average_to_themselves() {
        for x in [0.1, 1.0 / 3.0, 77.51, 84.68, 97.91666666666667] {
            let r = report(Protocol::Fewshot, &[("accuracy", x)]);
            let agg = aggregate(&vec![("a".into(), r); 3]).unwrap();
            assert_eq!(agg.metrics["accuracy"].to_bits(), x.to_bits());
        }
    }

    #[test]
    fn ten_and_twenty_average_to_fifteen() {
        let a = report(Protocol::Fewshot, &[("accuracy", 10.0)]);
        let b = report(Protocol::Fewshot, &[("accuracy", 20.0)]);
        let agg = aggregate(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(agg.metrics["accuracy"], 15.0);
        assert_eq!(agg.per_run["accuracy"], [10.0, 20.0]);
    }

    #[test]
    fn single_report_passes_through() {
        let r = report(Protocol::B2n, &[("Base", 90.0), ("Novel", 70.0), ("HM", 78.75)]);
        let agg = aggregate(&[("a".into(), r.clone())]).unwrap();
        assert_eq!(agg.metrics, r.metrics);
        assert!(table(&agg).lines().nth(1).unwrap().starts_with("metric"));
        assert!(table(&agg).lines().nth(2).unwrap().starts_with("Base"));
    }

    #[test]
    fn mixed_protocols_are_refused() {
        let a = report(Protocol::B2n, &[("Base", 1.0)]);
        let b = report(Protocol::Ovc, &[("Base", 1.0)]);
        assert!(matches!(aggregate(&[("a".into(), a), ("b".into(), b)]), Err(SapError::Config(_))));
    }
}
