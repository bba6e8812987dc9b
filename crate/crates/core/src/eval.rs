//! Scoring discovered graphs against ground truth: precision, recall, F1
//! over directed edges, plus delay estimation accuracy over the correctly
//! detected edges.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discovery::{CausalEdge, CausalGraph};
use crate::error::{Error, Result};
use crate::pipeline::run_pipeline;
use crate::training::RunConfig;

/// Schema version stamped into evaluation report JSON.
pub const REPORT_VERSION: u32 = 1;

/// A correctly detected edge with its ground-truth and estimated delays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayPair {
    pub cause: String,
    pub effect: String,
    pub true_delay: usize,
    pub predicted_delay: usize,
}

/// Edge-level confusion of a predicted graph against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphMatch {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: Vec<DelayPair>,
    pub false_positives: Vec<CausalEdge>,
    pub false_negatives: Vec<CausalEdge>,
}

/// Full evaluation artifact. `dea` is `None` when no edge was correctly
/// detected, since delay accuracy is undefined without matches;
/// `truth_empty` flags runs where recall is 1 only by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dea: Option<f64>,
    pub true_positives: Vec<DelayPair>,
    pub false_positives: Vec<CausalEdge>,
    pub false_negatives: Vec<CausalEdge>,
    pub truth_empty: bool,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        let report: EvalReport = serde_json::from_str(text)?;
        if report.version != REPORT_VERSION {
            return Err(Error::Config(format!(
                "unsupported report version {} (this build reads version {REPORT_VERSION})",
                report.version
            )));
        }
        Ok(report)
    }
}

/// Match predicted edges to truth edges by (cause, effect); delay is
/// ignored unless `strict_delay` is set, in which case a pair only matches
/// when the delays agree within one step. Conventions for empty sides:
/// no predictions gives precision 1, empty truth gives recall 1, and
/// F1 is 0 whenever precision + recall is 0.
pub fn precision_recall_f1(
    predicted: &CausalGraph,
    truth: &CausalGraph,
    strict_delay: bool,
) -> Result<GraphMatch> {
    let pred_nodes: BTreeSet<&String> = predicted.nodes.iter().collect();
    let truth_nodes: BTreeSet<&String> = truth.nodes.iter().collect();
    if pred_nodes != truth_nodes {
        return Err(Error::NodeSetMismatch(format!(
            "predicted nodes {:?} vs truth nodes {:?}",
            predicted.nodes, truth.nodes
        )));
    }

    let matches = |p: &CausalEdge, t: &CausalEdge| {
        p.cause == t.cause
            && p.effect == t.effect
            && (!strict_delay || p.delay.abs_diff(t.delay) <= 1)
    };
    let mut true_positives = Vec::new();
    let mut false_positives = Vec::new();
    for p in &predicted.edges {
        match truth.edges.iter().find(|t| matches(p, t)) {
            Some(t) => true_positives.push(DelayPair {
                cause: p.cause.clone(),
                effect: p.effect.clone(),
                true_delay: t.delay,
                predicted_delay: p.delay,
            }),
            None => false_positives.push(p.clone()),
        }
    }
    let false_negatives: Vec<CausalEdge> = truth
        .edges
        .iter()
        .filter(|t| !predicted.edges.iter().any(|p| matches(p, t)))
        .cloned()
        .collect();

    let tp = true_positives.len() as f64;
    let precision = if predicted.edges.is_empty() { 1.0 } else { tp / predicted.edges.len() as f64 };
    let recall = if truth.edges.is_empty() { 1.0 } else { tp / truth.edges.len() as f64 };
    let f1 =
        if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(GraphMatch { precision, recall, f1, true_positives, false_positives, false_negatives })
}

/// Delay estimation accuracy: 1 − mean |predicted − true| over the matched
/// edges. Unclamped, so gross delay errors go negative rather than
/// saturating; no matches means the quantity is undefined.
pub fn delay_estimation_accuracy(pairs: &[DelayPair]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| p.predicted_delay.abs_diff(p.true_delay) as f64)
        .sum();
    Some(1.0 - total / pairs.len() as f64)
}

/// Score a predicted graph against a truth graph.
pub fn evaluate_graph(
    predicted: &CausalGraph,
    truth: &CausalGraph,
    strict_delay: bool,
) -> Result<EvalReport> {
    let m = precision_recall_f1(predicted, truth, strict_delay)?;
    let dea = delay_estimation_accuracy(&m.true_positives);
    Ok(EvalReport {
        version: REPORT_VERSION,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        dea,
        true_positives: m.true_positives,
        false_positives: m.false_positives,
        false_negatives: m.false_negatives,
        truth_empty: truth.edges.is_empty(),
    })
}

/// Run the whole pipeline on a dataset that carries ground truth, then
/// score the discovered graph. Deterministic given the config seed.
pub fn evaluate_run(dataset: &Dataset, config: &RunConfig, jobs: usize) -> Result<EvalReport> {
    let truth = dataset
        .truth()
        .ok_or_else(|| Error::MissingInput("dataset carries no ground-truth graph".into()))?;
    let outcome = run_pipeline(dataset, config, jobs)?;
    evaluate_graph(&outcome.graph, truth, false)
}

/// Plain-text metrics table: F1, recall, precision, and delay accuracy,
/// then the edge counts behind them.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let dea = report.dea.map_or("n/a".to_string(), |d| format!("{d:.4}"));
    let _ = writeln!(out, "{:<10} {:<10} {:<10} {:<10}", "f1", "recall", "precision", "dea");
    let _ = writeln!(
        out,
        "{:<10.4} {:<10.4} {:<10.4} {:<10}",
        report.f1, report.recall, report.precision, dea
    );
    let _ = writeln!(
        out,
        "edges: {} true positive, {} false positive, {} false negative{}",
        report.true_positives.len(),
        report.false_positives.len(),
        report.false_negatives.len(),
        if report.truth_empty { " (truth graph is empty)" } else { "" }
    );
    out
}
