//! End-to-end orchestration: train every target (optionally in parallel),
//! validate candidates into a causal graph, and write artifacts atomically.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{zscore_normalize, Dataset};
use crate::discovery::{
    build_causal_graph, estimate_delay, select_candidates, shuffle_test, CausalGraph,
    ChannelFinding, TargetFindings,
};
use crate::error::{Error, Result};
use crate::training::{train_target, RunConfig, TrainReport};

/// Write bytes to `path` via a temp file in the same directory plus an
/// atomic rename, so readers never observe a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Train one model per series. `jobs` > 1 runs targets on a rayon pool of
/// that size; every target's randomness is keyed by (seed, target), so the
/// results are identical to a serial run.
pub fn train_all(dataset: &Dataset, config: &RunConfig, jobs: usize) -> Result<Vec<TrainReport>> {
    config.validate()?;
    let targets: Vec<usize> = (0..dataset.n()).collect();
    if jobs <= 1 {
        return targets.iter().map(|&j| train_target(dataset, j, config)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {jobs} jobs: {e}")))?;
    pool.install(|| targets.par_iter().map(|&j| train_target(dataset, j, config)).collect())
}

/// Candidate selection, shuffle validation, and delay estimation for every
/// trained target, then graph assembly. `reports` must hold target
/// `0..n` in order (as produced by [`train_all`]).
pub fn discover_from_trained(
    dataset: &Dataset,
    reports: &[TrainReport],
    config: &RunConfig,
) -> Result<(Vec<TargetFindings>, CausalGraph)> {
    let n = dataset.n();
    if reports.len() != n {
        return Err(Error::MissingInput(format!(
            "{} trained targets for {n} series",
            reports.len()
        )));
    }
    let mut per_target = Vec::with_capacity(n);
    for (j, report) in reports.iter().enumerate() {
        if report.target != j {
            return Err(Error::MissingInput(format!(
                "checkpoint order: expected target {j}, found {}",
                report.target
            )));
        }
        if report.params.channel_count() != n {
            return Err(Error::Shape(format!(
                "target {j} model covers {} channels, dataset has {n}",
                report.params.channel_count()
            )));
        }
        let candidates = select_candidates(&report.params, j, config.tau_channel);
        let mut findings = Vec::with_capacity(candidates.candidates.len());
        for &(channel, weight) in &candidates.candidates {
            if channel == j && !config.self_loops {
                // The edge would be dropped at assembly; skip its tests.
                continue;
            }
            let outcome = shuffle_test(
                &report.params,
                dataset,
                j,
                channel,
                config.n_permutations,
                config.significance,
                config.seed,
                report.l_init,
            )?;
            let delay = estimate_delay(&report.params, channel)?;
            findings.push(ChannelFinding { channel, weight, delay, outcome });
        }
        per_target.push(TargetFindings { target: j, candidates, findings });
    }
    let graph = build_causal_graph(dataset.names(), &per_target, config.self_loops)?;
    Ok((per_target, graph))
}

/// Output of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub reports: Vec<TrainReport>,
    pub findings: Vec<TargetFindings>,
    pub graph: CausalGraph,
}

/// Train all targets and extract the causal graph.
///
/// The series are z-scored first: the default learning rate, penalty
/// weights, and sparsity thresholds are calibrated for unit-scale data, and
/// shuffle validation must run on exactly the data the models were trained
/// on. Callers composing [`train_all`] and [`discover_from_trained`]
/// directly are responsible for the same normalization.
pub fn run_pipeline(dataset: &Dataset, config: &RunConfig, jobs: usize) -> Result<PipelineOutcome> {
    let (scored, _) = zscore_normalize(dataset)?;
    let reports = train_all(&scored, config, jobs)?;
    let (findings, graph) = discover_from_trained(&scored, &reports, config)?;
    Ok(PipelineOutcome { reports, findings, graph })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Nonlinearity, SynthSpec, TruthEdge};
    use crate::model::Checkpoint;

    fn planted(seed: u64) -> Dataset {
        let spec = SynthSpec {
            n: 2,
            t: 160,
            edges: vec![TruthEdge { cause: 0, effect: 1, beta: 0.9, lag: 1 }],
            noise_std: 0.05,
            nonlinearity: Nonlinearity::None,
            seed,
        };
        generate_synthetic(&spec).unwrap()
    }

    fn quiet() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.log_interval = 0;
        cfg
    }

    #[test]
    fn atomic_write_creates_dirs_and_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/deep/art.txt");
        write_atomic(&path, b"one").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"one");
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No temp files left behind.
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn parallel_training_matches_serial() {
        let ds = planted(9);
        let mut cfg = quiet();
        cfg.epochs = 60;
        let serial = train_all(&ds, &cfg, 1).unwrap();
        let parallel = train_all(&ds, &cfg, 2).unwrap();
        assert_eq!(serial.len(), 2);
        for (s, p) in serial.iter().zip(&parallel) {
            assert_eq!(s.target, p.target);
            assert_eq!(s.train_loss, p.train_loss);
            assert_eq!(
                Checkpoint::new(s.params.clone()).to_json().unwrap(),
                Checkpoint::new(p.params.clone()).to_json().unwrap()
            );
        }
    }

    #[test]
    fn pipeline_recovers_a_planted_edge_deterministically() {
        let ds = planted(17);
        let cfg = quiet();
        let out = run_pipeline(&ds, &cfg, 1).unwrap();
        assert_eq!(out.graph.nodes, ds.names());
        let edge = out
            .graph
            .edges
            .iter()
            .find(|e| e.cause == "X1" && e.effect == "X2")
            .expect("planted edge missing from discovered graph");
        assert_eq!(edge.delay, 1);
        assert!(edge.score > 0.5);

        let again = run_pipeline(&ds, &cfg, 2).unwrap();
        assert_eq!(
            again.graph.to_json().unwrap(),
            out.graph.to_json().unwrap(),
            "pipeline output depends on job count"
        );
    }

    #[test]
    fn discover_rejects_incomplete_or_misordered_checkpoints() {
        let ds = planted(3);
        let mut cfg = quiet();
        cfg.epochs = 30;
        let mut reports = train_all(&ds, &cfg, 1).unwrap();
        assert!(matches!(
            discover_from_trained(&ds, &reports[..1], &cfg),
            Err(Error::MissingInput(_))
        ));
        reports.swap(0, 1);
        assert!(matches!(
            discover_from_trained(&ds, &reports, &cfg),
            Err(Error::MissingInput(_))
        ));
    }
}
