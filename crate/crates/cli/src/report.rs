use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use delta::eval::{self, hsic};
use delta::expr::{self, FeatureSetSequence};
use delta::gen::train::latent_means;
use delta::gen::{Candidate, Model};
use delta::search::KnowledgeBase;
use delta::Dataset;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::pipeline::{self, write_file, RunLog, RUN_LOG};
use crate::plot::{self, Point, Series};
use crate::{CliError, RunConfig};

pub const CSV_FILE: &str = "report.csv";
pub const JSON_FILE: &str = "report.json";
pub const TRADEOFF_SVG: &str = "tradeoff.svg";
pub const CORR_ORIGINAL_SVG: &str = "correlation_original.svg";
pub const CORR_GENERATED_SVG: &str = "correlation_generated.svg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub dt: f64,
    pub sf: f64,
    pub hsic: Option<f64>,
    pub n_features: usize,
    /// Wall time of the stages behind this row. Kept out of the CSV so the
    /// table is identical across reruns.
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub seed: u64,
    pub lambda: f64,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, variant: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        #[derive(Serialize)]
        struct CsvRow<'a> {
            variant: &'a str,
            #[serde(rename = "DT")]
            dt: String,
            #[serde(rename = "SF")]
            sf: String,
            #[serde(rename = "HSIC")]
            hsic: String,
            n_features: usize,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                variant: &r.variant,
                dt: format!("{:.6}", r.dt),
                sf: format!("{:.6}", r.sf),
                hsic: r.hsic.map(|h| format!("{h:.6}")).unwrap_or_default(),
                n_features: r.n_features,
            })
            .expect("csv row serializes");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8")
    }
}

/// Last recorded duration of each stage in a run log.
fn stage_seconds(path: &Path) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let Ok(text) = fs::read_to_string(path) else {
        return out;
    };
    for line in text.lines() {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(line) {
            if let (Some(stage), Some(s)) = (v["stage"].as_str(), v["seconds"].as_f64()) {
                out.insert(stage.to_string(), s);
            }
        }
    }
    out
}

pub fn read_candidates(path: &Path) -> Result<Vec<Candidate>, CliError> {
    #[derive(Deserialize)]
    struct File {
        candidates: Vec<Candidate>,
    }
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    let f: File = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(f.candidates)
}

fn latent_hsic(model: &Model, kb: &KnowledgeBase) -> Result<Option<f64>, CliError> {
    if kb.len() < 4 {
        log::warn!("HSIC needs at least 4 records, kb has {}", kb.len());
        return Ok(None);
    }
    let (zu, zp) = latent_means(model, kb)?;
    Ok(Some(hsic(zu.view(), zp.view())?))
}

fn correlation_svg(title: &str, d: &Dataset) -> String {
    let (t, s) = eval::label_correlations(d);
    plot::heatmap(title, &["target", "sensitive"], d.feature_names(), &[t, s])
}

/// Builds the three-row table for the original features, the best
/// knowledge-base record and the generated set `delta`, then writes the
/// table, its JSON form and the plots into `out`.
pub fn run(
    cfg: &RunConfig,
    d: &Dataset,
    kb: &KnowledgeBase,
    model: &Model,
    delta: &FeatureSetSequence,
    out: &Path,
    log: &RunLog,
) -> Result<Report, CliError> {
    let started = Instant::now();
    if kb.records.iter().any(|r| r.dataset_id != d.dataset_id()) {
        log::warn!("knowledge base was built on a different dataset than {}", d.dataset_id());
    }
    let stages = stage_seconds(&out.join(RUN_LOG));
    let stage = |s: &str| stages.get(s).copied().unwrap_or(0.0);

    let t = Instant::now();
    let ori = pipeline::evaluate(cfg, d, None)?;
    let ori_s = t.elapsed().as_secs_f64();

    let best = kb
        .best_by_utility()
        .ok_or_else(|| CliError::Input("knowledge base is empty".into()))?;
    let p1_seq = best
        .sequence()
        .map_err(|e| CliError::Input(format!("best record: {e}")))?;
    let p1 = pipeline::evaluate(cfg, d, Some(&p1_seq))?;
    let dl = pipeline::evaluate(cfg, d, Some(delta))?;
    let h = latent_hsic(model, kb)?;

    let report = Report {
        dataset: d.dataset_id().to_string(),
        seed: cfg.seed,
        lambda: cfg.lambda,
        rows: vec![
            ReportRow {
                variant: "ORI".into(),
                dt: ori.utility,
                sf: ori.privacy,
                hsic: None,
                n_features: d.n_features(),
                runtime_s: ori_s,
            },
            ReportRow {
                variant: "DELTA-P1".into(),
                dt: p1.utility,
                sf: p1.privacy,
                hsic: None,
                n_features: p1_seq.len(),
                runtime_s: stage("search"),
            },
            ReportRow {
                variant: "DELTA".into(),
                dt: dl.utility,
                sf: dl.privacy,
                hsic: h,
                n_features: delta.len(),
                runtime_s: stage("search") + stage("train") + stage("generate"),
            },
        ],
    };

    write_file(&out.join(CSV_FILE), report.to_csv())?;
    write_file(
        &out.join(JSON_FILE),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;

    let candidates_path = out.join(pipeline::CANDIDATES_FILE);
    let candidates = if candidates_path.exists() {
        read_candidates(&candidates_path)?
    } else {
        Vec::new()
    };
    let mut series = vec![Series {
        name: "knowledge base".into(),
        color: "#9e9e9e",
        radius: 3.0,
        points: kb
            .records
            .iter()
            .map(|r| Point { x: r.utility, y: r.privacy, label: None })
            .collect(),
    }];
    if !candidates.is_empty() {
        series.push(Series {
            name: "decoded candidates".into(),
            color: "#1f77b4",
            radius: 3.5,
            points: candidates
                .iter()
                .map(|c| Point { x: c.utility, y: c.privacy, label: None })
                .collect(),
        });
    }
    let colors = ["#000000", "#ff7f0e", "#d62728"];
    for (r, color) in report.rows.iter().zip(colors) {
        series.push(Series {
            name: r.variant.clone(),
            color,
            radius: 5.5,
            points: vec![Point { x: r.dt, y: r.sf, label: Some(r.variant.clone()) }],
        });
    }
    let title = format!("Utility vs leakage on {}", report.dataset);
    write_file(
        &out.join(TRADEOFF_SVG),
        plot::scatter(&title, "DT (downstream F1)", "SF (sensitive F1)", &series),
    )?;

    write_file(&out.join(CORR_ORIGINAL_SVG), correlation_svg("|corr| original features", d))?;
    let generated = expr::materialize(delta, d).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(
        &out.join(CORR_GENERATED_SVG),
        correlation_svg("|corr| generated features", &generated),
    )?;

    log.record(
        "report",
        started,
        json!({"rows": report.rows.iter().map(|r| json!({"variant": r.variant, "dt": r.dt, "sf": r.sf, "hsic": r.hsic})).collect::<Vec<_>>()}),
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_three_rows_and_no_runtime() {
        let row = |v: &str, h| ReportRow {
            variant: v.into(),
            dt: 0.5,
            sf: 0.25,
            hsic: h,
            n_features: 3,
            runtime_s: 12.5,
        };
        let r = Report {
            dataset: "d".into(),
            seed: 0,
            lambda: 1.0,
            rows: vec![row("ORI", None), row("DELTA-P1", None), row("DELTA", Some(0.001))],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,DT,SF,HSIC,n_features");
        assert_eq!(lines[1], "ORI,0.500000,0.250000,,3");
        assert_eq!(lines[3], "DELTA,0.500000,0.250000,0.001000,3");
        assert!(!csv.contains("12.5"));
    }
}
