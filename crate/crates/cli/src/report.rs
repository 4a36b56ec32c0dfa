//! Aggregation of finished run directories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use vws_core::report::{loglog_slope, EstimateReport};

use crate::config::{ExperimentConfig, ValidationErrors};
use crate::pipeline::{basket_max, divcurl_slope, group_key, DIVCURL_CSV, ESTIMATES_JSON};
use crate::run::{read_verified, RunManifest, RunStatus};

/// Checks every run directory up front; all bad runs are listed.
pub fn preflight(runs: &[PathBuf]) -> Result<Vec<RunManifest>, ValidationErrors> {
    let mut errs = Vec::new();
    let mut manifests = Vec::new();
    for dir in runs {
        match read_verified(dir) {
            Ok(m) if m.status != RunStatus::Complete => {
                errs.push(format!("{}: run did not complete ({})", dir.display(), m.failure.unwrap_or_default()))
            }
            Ok(m) => manifests.push(m),
            Err(e) => errs.push(format!("{}: {e:#}", dir.display())),
        }
    }
    if errs.is_empty() {
        Ok(manifests)
    } else {
        Err(ValidationErrors(errs))
    }
}

#[derive(Debug, Serialize)]
pub struct SummaryRow {
    pub inequality: String,
    pub group: String,
    pub rows: usize,
    pub runs: usize,
    #[serde(rename = "M_values")]
    pub m_values: String,
    pub max_ratio: Option<f64>,
    pub min_ratio: Option<f64>,
    /// `max_ratio / min_ratio` across the rows of the group.
    pub variation: Option<f64>,
    /// Log-log slope of the ratio against `M`.
    pub slope: Option<f64>,
    pub plot: String,
}

#[derive(Debug, Serialize)]
pub struct DivCurlSummaryRow {
    pub recipe: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub set: String,
    pub ks: String,
    pub max_error_last_k: f64,
    pub slope: Option<f64>,
    pub plot: String,
}

#[derive(Debug, Deserialize)]
struct DivCurlCsvRow {
    recipe: String,
    #[serde(rename = "M")]
    m: usize,
    k: usize,
    set: String,
    error: f64,
}

fn has_file(m: &RunManifest, name: &str) -> bool {
    m.files.iter().any(|f| f.path == name)
}

fn mesh_size(r: &EstimateReport) -> Option<f64> {
    r.context.get("M").and_then(|m| m.parse().ok())
}

fn estimate_summary(runs: &[(PathBuf, RunManifest)], out: &mut crate::run::RunDir) -> anyhow::Result<Vec<SummaryRow>> {
    type Key = (String, String);
    let mut groups: BTreeMap<Key, Vec<(usize, EstimateReport)>> = BTreeMap::new();
    for (run_index, (dir, manifest)) in runs.iter().enumerate() {
        if !has_file(manifest, ESTIMATES_JSON) {
            continue;
        }
        let path = dir.join(ESTIMATES_JSON);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let reports: Vec<EstimateReport> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for r in reports {
            groups
                .entry((r.id.name().to_string(), group_key(&r)))
                .or_default()
                .push((run_index, r));
        }
    }
    let mut rows = Vec::new();
    for (g, ((id, key), members)) in groups.into_iter().enumerate() {
        let ratios: Vec<f64> = members.iter().filter_map(|(_, r)| r.ratio).collect();
        let max = ratios.iter().copied().reduce(f64::max);
        let min = ratios.iter().copied().reduce(f64::min);
        let variation = match (max, min) {
            (Some(a), Some(b)) if b > 0.0 => Some(a / b),
            _ => None,
        };
        let mut points: Vec<(f64, f64)> = members
            .iter()
            .filter_map(|(_, r)| Some((mesh_size(r)?, r.ratio?)))
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let plot = if points.is_empty() {
            String::new()
        } else {
            let name = format!("plots/M_ratio_{id}_{g}.dat");
            out.write_plot(&name, ["M", "ratio"], &points)?;
            name
        };
        let ms: BTreeSet<String> = members.iter().filter_map(|(_, r)| r.context.get("M").cloned()).collect();
        let mut ms: Vec<String> = ms.into_iter().collect();
        ms.sort_by_key(|m| m.parse::<u64>().unwrap_or(u64::MAX));
        let run_set: BTreeSet<usize> = members.iter().map(|(i, _)| *i).collect();
        rows.push(SummaryRow {
            inequality: id,
            group: key,
            rows: members.len(),
            runs: run_set.len(),
            m_values: ms.join(" "),
            max_ratio: max,
            min_ratio: min,
            variation,
            slope: loglog_slope(&xs, &ys),
            plot,
        });
    }
    Ok(rows)
}

fn divcurl_summary(runs: &[(PathBuf, RunManifest)], out: &mut crate::run::RunDir) -> anyhow::Result<Vec<DivCurlSummaryRow>> {
    let mut groups: BTreeMap<(String, usize), Vec<(usize, String, f64)>> = BTreeMap::new();
    for (dir, manifest) in runs {
        if !has_file(manifest, DIVCURL_CSV) {
            continue;
        }
        let path = dir.join(DIVCURL_CSV);
        let mut reader = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
        for row in reader.deserialize() {
            let r: DivCurlCsvRow = row.with_context(|| format!("parsing {}", path.display()))?;
            groups.entry((r.recipe, r.m)).or_default().push((r.k, r.set, r.error));
        }
    }
    let mut rows = Vec::new();
    for ((recipe, m), members) in groups {
        let mut sets: Vec<String> = members.iter().map(|r| r.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        sets.sort_by_key(|s| (s != "all", s.trim_start_matches('E').parse::<usize>().unwrap_or(0)));
        let ks: Vec<usize> = members.iter().map(|r| r.0).collect::<BTreeSet<_>>().into_iter().collect();
        for set in sets {
            let points = basket_max(&members, &set, &ks);
            let name = format!("plots/k_error_{recipe}_M{m}_{set}.dat");
            out.write_plot(&name, ["k", "max_error"], &points)?;
            rows.push(DivCurlSummaryRow {
                recipe: recipe.clone(),
                m,
                set: set.clone(),
                ks: ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
                max_error_last_k: points.last().map_or(0.0, |p| p.1),
                slope: divcurl_slope(&members, &set),
                plot: name,
            });
        }
    }
    Ok(rows)
}

pub fn report(cfg: &ExperimentConfig, out: &mut crate::run::RunDir) -> anyhow::Result<()> {
    let manifests = preflight(&cfg.runs)?;
    let runs: Vec<(PathBuf, RunManifest)> = cfg.runs.iter().cloned().zip(manifests).collect();
    let summary = estimate_summary(&runs, out)?;
    out.write_csv("summary.csv", &summary)?;
    let dc = divcurl_summary(&runs, out)?;
    if !dc.is_empty() {
        out.write_csv("divcurl_summary.csv", &dc)?;
    }
    let sources: Vec<serde_json::Value> = runs
        .iter()
        .map(|(dir, m)| {
            serde_json::json!({
                "dir": dir.display().to_string(),
                "command": m.command,
                "config_sha256": m.config_sha256,
            })
        })
        .collect();
    out.write_json("sources.json", &sources)
}

