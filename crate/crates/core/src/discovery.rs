//! Causal graph extraction from trained per-target models: candidate causes
//! from the channel-attention weights, permutation (shuffle) validation of
//! each candidate, delay read-out from convolution kernels, and graph and
//! heatmap export.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::substream;
use crate::tensor::{softmax, Tensor2};
use crate::training::{prediction_mse, validation_positions};

/// Schema version stamped into exported graph JSON.
pub const GRAPH_VERSION: u32 = 1;

/// One directed, delay-labeled edge. `score` is the trained channel weight
/// softmax(alpha)[cause] of the effect's model, carried at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub cause: String,
    pub effect: String,
    pub delay: usize,
    pub score: f64,
}

/// A validated causal graph. Nodes are all series names regardless of
/// degree; edges hold each (cause, effect) pair at most once and are kept
/// sorted by (cause, effect) so exports are deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub version: u32,
    pub nodes: Vec<String>,
    pub edges: Vec<CausalEdge>,
}

impl CausalGraph {
    pub fn new(nodes: Vec<String>, mut edges: Vec<CausalEdge>) -> Result<Self> {
        for (i, name) in nodes.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Config(format!("node {i} has an empty name")));
            }
            if nodes[..i].contains(name) {
                return Err(Error::Config(format!("duplicate node name {name:?}")));
            }
        }
        for e in &edges {
            for end in [&e.cause, &e.effect] {
                if !nodes.contains(end) {
                    return Err(Error::Config(format!(
                        "edge {} -> {} references unknown node {end:?}",
                        e.cause, e.effect
                    )));
                }
            }
        }
        edges.sort_by(|a, b| {
            (a.cause.as_str(), a.effect.as_str()).cmp(&(b.cause.as_str(), b.effect.as_str()))
        });
        for pair in edges.windows(2) {
            if pair[0].cause == pair[1].cause && pair[0].effect == pair[1].effect {
                return Err(Error::Config(format!(
                    "duplicate edge {} -> {}",
                    pair[0].cause, pair[0].effect
                )));
            }
        }
        Ok(CausalGraph { version: GRAPH_VERSION, nodes, edges })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<CausalGraph> {
        let raw: CausalGraph = serde_json::from_str(text)?;
        if raw.version != GRAPH_VERSION {
            return Err(Error::Config(format!(
                "unsupported graph version {} (this build reads version {GRAPH_VERSION})",
                raw.version
            )));
        }
        CausalGraph::new(raw.nodes, raw.edges)
    }
}

/// Candidate causes for one target: every channel whose attention weight
/// strictly exceeds the threshold, sorted by weight descending (ties by
/// channel index ascending). `weights` is the full softmax(alpha) row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub target: usize,
    pub weights: Vec<f64>,
    pub candidates: Vec<(usize, f64)>,
}

/// Channels with softmax(alpha) weight above `tau_channel`; `None` applies
/// the above-uniform rule (strictly greater than 1/N).
pub fn select_candidates(
    params: &ModelParams,
    target: usize,
    tau_channel: Option<f64>,
) -> CandidateSet {
    let weights =
        softmax(params.channel_alpha.values()).expect("channel weights are finite");
    let tau = tau_channel.unwrap_or(1.0 / weights.len() as f64);
    let mut candidates: Vec<(usize, f64)> =
        weights.iter().copied().enumerate().filter(|&(_, w)| w > tau).collect();
    candidates.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    CandidateSet { target, weights, candidates }
}

/// Result of one permutation-importance test. The decision is a pure
/// function of the stored numbers, so it can be re-derived from a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShuffleOutcome {
    pub validated: bool,
    /// The trained model never improved on its starting loss, so loss
    /// degradation has no scale to compare against.
    pub inconclusive: bool,
    pub l_base: f64,
    pub l_shuffled_mean: f64,
    pub delta: f64,
    pub gain: f64,
}

impl ShuffleOutcome {
    /// Decision rule: delta = mean shuffled loss − base loss, gain = initial
    /// loss − base loss; validated iff delta ≥ significance·gain. A gain
    /// that is not positive makes the test inconclusive and the channel is
    /// rejected.
    pub fn decide(
        l_base: f64,
        l_shuffled_mean: f64,
        l_init: f64,
        significance: f64,
    ) -> ShuffleOutcome {
        let delta = l_shuffled_mean - l_base;
        let gain = l_init - l_base;
        let inconclusive = gain <= 0.0;
        ShuffleOutcome {
            validated: !inconclusive && delta >= significance * gain,
            inconclusive,
            l_base,
            l_shuffled_mean,
            delta,
            gain,
        }
    }
}

/// Permutation-importance test of `channel` for `target`'s trained model.
///
/// Losses are prediction MSE on the held-out validation slice (the same
/// trailing tenth that training never fit), so a model that merely
/// memorized its training window shows no gain and no degradation there,
/// and memorization cannot validate a channel. Each of the `n_perm` rounds
/// permutes the channel's model-visible time points (prediction targets
/// always come from the intact series) and remeasures the loss. `l_init` is
/// the pre-training validation loss from the target's TrainReport. The
/// permutation stream is keyed by (seed, target, channel), so tests are
/// reproducible independently of evaluation order.
#[allow(clippy::too_many_arguments)]
pub fn shuffle_test(
    params: &ModelParams,
    dataset: &Dataset,
    target: usize,
    channel: usize,
    n_perm: usize,
    significance: f64,
    seed: u64,
    l_init: f64,
) -> Result<ShuffleOutcome> {
    if n_perm == 0 {
        return Err(Error::Config("shuffle test needs n_perm >= 1".into()));
    }
    let n = dataset.n();
    if target >= n || channel >= n {
        return Err(Error::Config(format!(
            "shuffle test: target {target} / channel {channel} out of range (n={n})"
        )));
    }
    let t_len = dataset.t_len();
    if t_len < 3 {
        return Err(Error::SeriesTooShort(format!(
            "shuffle test needs at least 3 time steps, got {t_len}"
        )));
    }
    let x = dataset.window(t_len)?;
    let targets = dataset.targets(target, t_len);
    let positions = validation_positions(t_len);
    let l_base = prediction_mse(params, &x, &targets, positions.clone())?;

    // The model reads columns 1..T of every row except the target's, which
    // enters as its own strict past (columns 0..T-1); permute exactly the
    // visible stretch.
    let visible = t_len - 1;
    let from = if channel == target { 0 } else { 1 };
    let mut rng = substream(seed, "shuffle", (target * n + channel) as u64);
    let mut shuffled = x.clone();
    let mut sum = 0.0;
    for _ in 0..n_perm {
        let row = shuffled.row_mut(channel);
        row.copy_from_slice(dataset.series(channel));
        row[from..from + visible].shuffle(&mut rng);
        sum += prediction_mse(params, &shuffled, &targets, positions.clone())?;
    }
    Ok(ShuffleOutcome::decide(l_base, sum / n_perm as f64, l_init, significance))
}

/// Estimated delay of `channel`'s influence: the lag of the single
/// largest-magnitude kernel tap for that channel across every block, where
/// a tap at index j of a block with dilation d encodes lag (k−1−j)·d (index
/// k−1 is the current-time tap). Ties in |weight| break toward the smallest
/// lag, so an untouched (all-zero) channel reports delay 0.
///
/// The per-block lags are not summed: stacked blocks all see the same
/// series at their own dilation and redundantly lock onto the same lag, and
/// blocks the optimizer left unused still carry small nonzero taps whose
/// argmax is noise. Both effects make a sum double-count or drift; the
/// dominant tap is the one the trained network actually relies on.
pub fn estimate_delay(params: &ModelParams, channel: usize) -> Result<usize> {
    if channel >= params.channel_count() {
        return Err(Error::Shape(format!(
            "channel {channel} out of range (n={})",
            params.channel_count()
        )));
    }
    let mut best_val = f64::NEG_INFINITY;
    let mut best_lag = 0;
    for block in &params.blocks {
        let kernel = block.kernels.row(channel);
        let k = kernel.len();
        for (j, w) in kernel.iter().enumerate() {
            let lag = (k - 1 - j) * block.dilation;
            if w.abs() > best_val || (w.abs() == best_val && lag < best_lag) {
                best_val = w.abs();
                best_lag = lag;
            }
        }
    }
    Ok(best_lag)
}

/// Shuffle-test verdict and delay estimate for one candidate channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelFinding {
    pub channel: usize,
    /// softmax(alpha)[channel] from the target's trained model.
    pub weight: f64,
    pub delay: usize,
    pub outcome: ShuffleOutcome,
}

/// Everything discovery learned about one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetFindings {
    pub target: usize,
    pub candidates: CandidateSet,
    pub findings: Vec<ChannelFinding>,
}

/// Assemble the graph: an edge (cause -> effect) for every validated
/// channel of every target. Self-edges are dropped unless enabled. The
/// node set is all series regardless of degree.
pub fn build_causal_graph(
    names: &[String],
    per_target: &[TargetFindings],
    self_loops: bool,
) -> Result<CausalGraph> {
    let mut edges = Vec::new();
    for tf in per_target {
        for f in &tf.findings {
            if !f.outcome.validated {
                continue;
            }
            if f.channel == tf.target && !self_loops {
                continue;
            }
            let (Some(cause), Some(effect)) = (names.get(f.channel), names.get(tf.target))
            else {
                return Err(Error::Shape(format!(
                    "finding ({} -> {}) out of range for {} names",
                    f.channel,
                    tf.target,
                    names.len()
                )));
            };
            edges.push(CausalEdge {
                cause: cause.clone(),
                effect: effect.clone(),
                delay: f.delay,
                score: f.weight,
            });
        }
    }
    CausalGraph::new(names.to_vec(), edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl std::str::FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<GraphFormat> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::Config(format!(
                "unknown graph format {other:?} (expected \"dot\" or \"json\")"
            ))),
        }
    }
}

fn dot_quote(name: &str) -> String {
    format!("\"{}\"", name.replace('\\', "\\\\").replace('"', "\\\""))
}

/// Render the graph. DOT declares all nodes first in lexicographic order,
/// then one edge line per edge in the graph's stored (cause, effect) order;
/// JSON is the versioned graph schema.
pub fn export_graph(graph: &CausalGraph, format: GraphFormat) -> Result<String> {
    match format {
        GraphFormat::Json => graph.to_json(),
        GraphFormat::Dot => {
            let mut nodes = graph.nodes.clone();
            nodes.sort();
            let mut out = String::from("digraph G {\n");
            for n in &nodes {
                let _ = writeln!(out, "{};", dot_quote(n));
            }
            for e in &graph.edges {
                let _ = writeln!(
                    out,
                    "{} -> {} [label=\"d={}\"];",
                    dot_quote(&e.cause),
                    dot_quote(&e.effect),
                    e.delay
                );
            }
            out.push_str("}\n");
            Ok(out)
        }
    }
}

/// N×N channel-weight matrix: row j holds softmax(alpha) of target j's
/// model, so entry (j, i) scores series i as a candidate cause of series j.
pub fn channel_weight_matrix(models: &[ModelParams]) -> Result<Tensor2> {
    let n = models.len();
    if n == 0 {
        return Err(Error::Config("no trained models".into()));
    }
    let mut matrix = Tensor2::zeros(n, n);
    for (j, params) in models.iter().enumerate() {
        if params.channel_count() != n {
            return Err(Error::Shape(format!(
                "model {j} covers {} channels, expected {n}",
                params.channel_count()
            )));
        }
        let weights = softmax(params.channel_alpha.values())?;
        matrix.row_mut(j).copy_from_slice(&weights);
    }
    Ok(matrix)
}

/// Heatmap CSV: one header row of series names, then the matrix rows.
pub fn heatmap_csv(names: &[String], matrix: &Tensor2) -> Result<String> {
    if matrix.rows() != matrix.cols() || names.len() != matrix.rows() {
        return Err(Error::Shape(format!(
            "heatmap wants a square matrix matching {} names, got {}x{}",
            names.len(),
            matrix.rows(),
            matrix.cols()
        )));
    }
    let mut out = names.join(",");
    out.push('\n');
    for r in 0..matrix.rows() {
        for (c, v) in matrix.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary 8-bit PGM (P5), row-major, linearly rescaled so the matrix
/// minimum maps to 0 and the maximum to 255. A constant matrix renders as
/// all zeros.
pub fn heatmap_pgm(matrix: &Tensor2) -> Vec<u8> {
    let values = matrix.values();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{} {}\n255\n", matrix.cols(), matrix.rows()).into_bytes();
    out.extend(values.iter().map(|v| {
        if hi > lo {
            (((v - lo) / (hi - lo)) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Nonlinearity, SynthSpec, TruthEdge};
    use crate::model::build_model;
    use crate::training::{train_target, RunConfig};

    fn model_with_alpha(alpha: &[f64]) -> ModelParams {
        let cfg = RunConfig::default();
        let mut m = build_model(&cfg, alpha.len(), 7).unwrap();
        m.channel_alpha.values_mut().copy_from_slice(alpha);
        m
    }

    #[test]
    fn candidate_selection_thresholds_and_orders() {
        let uniform = model_with_alpha(&[0.3, 0.3, 0.3]);
        assert!(select_candidates(&uniform, 0, None).candidates.is_empty());

        // alpha = ln(w) makes softmax(alpha) = w exactly up to rounding.
        let skew = model_with_alpha(&[0.7f64.ln(), 0.2f64.ln(), 0.1f64.ln()]);
        let set = select_candidates(&skew, 2, None);
        assert_eq!(set.target, 2);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].0, 0);
        assert!((set.candidates[0].1 - 0.7).abs() < 1e-12);
        assert!((set.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let hot = model_with_alpha(&[30.0, 0.0, 0.0]);
        let set = select_candidates(&hot, 0, None);
        assert_eq!(set.candidates.len(), 1);
        assert_eq!(set.candidates[0].0, 0);

        // Two equal winners keep index order after the weight sort.
        let tied = model_with_alpha(&[1.0, 1.0, -5.0]);
        let set = select_candidates(&tied, 0, None);
        assert_eq!(
            set.candidates.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![0, 1]
        );

        // Explicit threshold overrides the above-uniform rule.
        let set = select_candidates(&skew, 0, Some(0.05));
        assert_eq!(set.candidates.len(), 3);
        assert_eq!(
            set.candidates.iter().map(|c| c.0).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn shuffle_decision_rule_is_pure_and_exact() {
        // Identity permutation: no degradation, rejected.
        let o = ShuffleOutcome::decide(0.5, 0.5, 1.0, 0.5);
        assert!(!o.validated && !o.inconclusive);
        assert_eq!(o.delta, 0.0);

        // Exactly at the threshold counts as validated (dyadic values, so
        // delta == significance * gain holds with no rounding).
        let o = ShuffleOutcome::decide(0.5, 0.75, 1.0, 0.5);
        assert!(o.validated);
        assert_eq!((o.gain, o.delta), (0.5, 0.25));

        // Model never improved: inconclusive and rejected.
        let o = ShuffleOutcome::decide(1.0, 2.0, 1.0, 0.5);
        assert!(o.inconclusive && !o.validated);
        let o = ShuffleOutcome::decide(1.2, 2.0, 1.0, 0.5);
        assert!(o.inconclusive && !o.validated);
    }

    fn trained_pair(seed: u64) -> (crate::data::Dataset, crate::training::TrainReport) {
        let spec = SynthSpec {
            n: 3,
            t: 160,
            edges: vec![TruthEdge { cause: 0, effect: 1, beta: 0.9, lag: 2 }],
            noise_std: 0.05,
            nonlinearity: Nonlinearity::None,
            seed,
        };
        // Trained on z-scored data, like the pipeline.
        let (ds, _) = crate::data::zscore_normalize(&generate_synthetic(&spec).unwrap()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.log_interval = 0;
        let report = train_target(&ds, 1, &cfg).unwrap();
        (ds, report)
    }

    #[test]
    fn shuffle_test_accepts_planted_cause_and_rejects_distractor() {
        let (ds, report) = trained_pair(5);
        let cause = shuffle_test(&report.params, &ds, 1, 0, 10, 0.5, 1111, report.l_init).unwrap();
        assert!(cause.validated, "planted cause not validated: {cause:?}");
        assert!(cause.delta > 0.0);

        let noise = shuffle_test(&report.params, &ds, 1, 2, 10, 0.5, 1111, report.l_init).unwrap();
        assert!(!noise.validated, "independent channel validated: {noise:?}");

        // Determinism: identical calls give identical numbers.
        let again = shuffle_test(&report.params, &ds, 1, 0, 10, 0.5, 1111, report.l_init).unwrap();
        assert_eq!(cause, again);
    }

    #[test]
    fn delay_reads_dominant_kernel_tap_times_dilation() {
        let cfg = RunConfig::default();
        let mut m = build_model(&cfg, 2, 3).unwrap();
        // Neutralize all blocks: argmax at the current-time tap everywhere.
        for b in &mut m.blocks {
            for v in b.kernels.values_mut() {
                *v = 0.0;
            }
            let k = b.kernels.cols();
            for c in 0..2 {
                b.kernels.row_mut(c)[k - 1] = 1.0;
            }
        }
        assert_eq!(estimate_delay(&m, 0).unwrap(), 0);

        // Block 1 (k=4, dilation 2), channel 0 tap at index 1 dominates:
        // lag (4-1-1)*2 = 4.
        m.blocks[1].kernels.row_mut(0)[1] = -2.0;
        assert_eq!(estimate_delay(&m, 0).unwrap(), 4);
        assert_eq!(estimate_delay(&m, 1).unwrap(), 0);

        // A weaker block-0 tap does not displace it; a stronger one does
        // (index 2, dilation 1: lag 1).
        m.blocks[0].kernels.row_mut(0)[2] = 1.5;
        assert_eq!(estimate_delay(&m, 0).unwrap(), 4);
        m.blocks[0].kernels.row_mut(0)[2] = 3.0;
        assert_eq!(estimate_delay(&m, 0).unwrap(), 1);

        // Ties in magnitude resolve to the smallest lag, both within one
        // block (channel 0) and across blocks (channel 1: index 0 means lag
        // 3, 6, 12 at dilations 1, 2, 4).
        let mut tied = build_model(&cfg, 2, 3).unwrap();
        for b in &mut tied.blocks {
            for v in b.kernels.values_mut() {
                *v = 0.0;
            }
            let k = b.kernels.cols();
            b.kernels.row_mut(0)[0] = 0.5;
            b.kernels.row_mut(0)[k - 1] = -0.5;
            b.kernels.row_mut(1)[0] = 1.0;
        }
        assert_eq!(estimate_delay(&tied, 0).unwrap(), 0);
        assert_eq!(estimate_delay(&tied, 1).unwrap(), 3);
        assert!(estimate_delay(&tied, 1).unwrap() <= tied.receptive_field());

        assert!(estimate_delay(&tied, 9).is_err());
    }

    fn finding(channel: usize, validated: bool, delay: usize, weight: f64) -> ChannelFinding {
        ChannelFinding {
            channel,
            weight,
            delay,
            outcome: ShuffleOutcome {
                validated,
                inconclusive: false,
                l_base: 0.1,
                l_shuffled_mean: 0.5,
                delta: 0.4,
                gain: 0.5,
            },
        }
    }

    fn names3() -> Vec<String> {
        vec!["A".into(), "B".into(), "C".into()]
    }

    #[test]
    fn graph_assembly_filters_and_labels() {
        let names = names3();
        let empty = build_causal_graph(&names, &[], false).unwrap();
        assert_eq!(empty.nodes.len(), 3);
        assert!(empty.edges.is_empty());

        let per_target = vec![
            TargetFindings {
                target: 1,
                candidates: CandidateSet { target: 1, weights: vec![], candidates: vec![] },
                findings: vec![
                    finding(0, true, 2, 0.7),
                    finding(2, false, 1, 0.4),
                    finding(1, true, 1, 0.6),
                ],
            },
            TargetFindings {
                target: 2,
                candidates: CandidateSet { target: 2, weights: vec![], candidates: vec![] },
                findings: vec![finding(1, true, 3, 0.9)],
            },
        ];
        let g = build_causal_graph(&names, &per_target, false).unwrap();
        assert_eq!(g.edges.len(), 2);
        assert_eq!((g.edges[0].cause.as_str(), g.edges[0].effect.as_str()), ("A", "B"));
        assert_eq!(g.edges[0].delay, 2);
        assert_eq!(g.edges[0].score, 0.7);
        assert_eq!((g.edges[1].cause.as_str(), g.edges[1].effect.as_str()), ("B", "C"));

        let with_loops = build_causal_graph(&names, &per_target, true).unwrap();
        assert_eq!(with_loops.edges.len(), 3);
        assert!(with_loops.edges.iter().any(|e| e.cause == "B" && e.effect == "B"));
    }

    #[test]
    fn graph_validation_rejects_bad_structure() {
        let e = |c: &str, f: &str| CausalEdge {
            cause: c.into(),
            effect: f.into(),
            delay: 1,
            score: 0.5,
        };
        assert!(CausalGraph::new(names3(), vec![e("A", "Z")]).is_err());
        assert!(CausalGraph::new(names3(), vec![e("A", "B"), e("A", "B")]).is_err());
        assert!(CausalGraph::new(vec!["A".into(), "A".into()], vec![]).is_err());
        // Self-loops are representable (truth graphs may contain them).
        assert!(CausalGraph::new(names3(), vec![e("A", "A")]).is_ok());
    }

    #[test]
    fn dot_export_matches_the_format_contract() {
        let g = CausalGraph::new(vec!["B".into(), "A".into()], vec![]).unwrap();
        assert_eq!(export_graph(&g, GraphFormat::Dot).unwrap(), "digraph G {\n\"A\";\n\"B\";\n}\n");

        let g = CausalGraph::new(
            names3(),
            vec![
                CausalEdge { cause: "A".into(), effect: "B".into(), delay: 2, score: 0.7 },
                CausalEdge { cause: "B".into(), effect: "C".into(), delay: 0, score: 0.9 },
            ],
        )
        .unwrap();
        let dot = export_graph(&g, GraphFormat::Dot).unwrap();
        assert!(dot.contains("\"A\" -> \"B\" [label=\"d=2\"];\n"));
        assert!(dot.contains("\"B\" -> \"C\" [label=\"d=0\"];\n"));
        assert!(dot.starts_with("digraph G {\n\"A\";\n\"B\";\n\"C\";\n"));
        assert!(dot.ends_with("}\n"));
    }

    #[test]
    fn json_export_round_trips() {
        let g = CausalGraph::new(
            names3(),
            vec![CausalEdge { cause: "C".into(), effect: "A".into(), delay: 4, score: 0.25 }],
        )
        .unwrap();
        let text = export_graph(&g, GraphFormat::Json).unwrap();
        assert!(text.ends_with('\n'));
        let back = CausalGraph::from_json(&text).unwrap();
        assert_eq!(back, g);

        let mut bumped = g.clone();
        bumped.version = 99;
        assert!(CausalGraph::from_json(&serde_json::to_string(&bumped).unwrap()).is_err());

        assert!("dot".parse::<GraphFormat>().is_ok());
        assert!("JSON".parse::<GraphFormat>().is_ok());
        assert!("svg".parse::<GraphFormat>().is_err());
    }

    #[test]
    fn heatmap_matrix_csv_and_pgm() {
        let a = model_with_alpha(&[0.0, 0.0]);
        let b = model_with_alpha(&[2.0f64.ln(), 0.0]);
        let m = channel_weight_matrix(&[a, b]).unwrap();
        assert!((m.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((m.get(1, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);

        let names = vec!["X1".to_string(), "X2".to_string()];
        let csv = heatmap_csv(&names, &m).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("X1,X2"));
        assert_eq!(lines.next(), Some("0.5,0.5"));
        assert!(lines.next().is_some());
        assert!(heatmap_csv(&names, &Tensor2::zeros(2, 3)).is_err());

        let pgm = heatmap_pgm(&m);
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        let pixels = &pgm[pgm.len() - 4..];
        // min = 1/3 -> 0, max = 2/3 -> 255, 0.5 -> round(127.5) = 128.
        assert_eq!(pixels, &[128, 128, 255, 0]);

        let flat = heatmap_pgm(&Tensor2::filled(2, 2, 0.4));
        assert_eq!(&flat[flat.len() - 4..], &[0, 0, 0, 0]);
    }
}
