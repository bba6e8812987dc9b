//! Dataset ingestion, preprocessing, and ground-truth synthetic generation.
//!
//! CSV orientation is rows = time, columns = series. Synthetic data follows
//! a lagged linear (optionally tanh-squashed) system with Gaussian
//! innovations, so the generating graph is known exactly and can be scored
//! against discovery output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::discovery::{CausalEdge, CausalGraph};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor2;

/// A named multivariate time series, immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    values: Tensor2,
    truth: Option<CausalGraph>,
    meta: String,
}

impl Dataset {
    pub fn new(names: Vec<String>, values: Tensor2, meta: impl Into<String>) -> Result<Self> {
        if names.len() != values.rows() {
            return Err(Error::Shape(format!(
                "{} names for {} series",
                names.len(),
                values.rows()
            )));
        }
        for (i, a) in names.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Csv(format!("series {} has an empty name", i + 1)));
            }
            if names[..i].contains(a) {
                return Err(Error::Csv(format!("duplicate series name {a:?}")));
            }
        }
        Ok(Dataset { names, values, truth: None, meta: meta.into() })
    }

    pub fn with_truth(mut self, truth: CausalGraph) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn t_len(&self) -> usize {
        self.values.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &Tensor2 {
        &self.values
    }

    pub fn series(&self, c: usize) -> &[f64] {
        self.values.row(c)
    }

    pub fn truth(&self) -> Option<&CausalGraph> {
        self.truth.as_ref()
    }

    pub fn meta(&self) -> &str {
        &self.meta
    }

    /// Copy of the first `end` time steps, all series.
    pub fn window(&self, end: usize) -> Result<Tensor2> {
        self.values.col_range(0, end)
    }

    /// Next-step prediction targets for series `j` over the first `end`
    /// steps: the values at times `1..end`.
    pub fn targets(&self, j: usize, end: usize) -> Vec<f64> {
        self.series(j)[1..end].to_vec()
    }

    /// CSV text: header of names, one row per time step.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.names.join(","));
        out.push('\n');
        for t in 0..self.t_len() {
            for c in 0..self.n() {
                if c > 0 {
                    out.push(',');
                }
                let _ = write!(out, "{}", self.values.get(c, t));
            }
            out.push('\n');
        }
        out
    }
}

/// Z-score each series with its population mean and standard deviation.
/// Returns the normalized dataset and the per-series (mean, std) pairs.
pub fn zscore_normalize(dataset: &Dataset) -> Result<(Dataset, Vec<(f64, f64)>)> {
    let t_len = dataset.t_len() as f64;
    let mut values = dataset.values.clone();
    let mut stats = Vec::with_capacity(dataset.n());
    for c in 0..dataset.n() {
        let row = dataset.series(c);
        let mean = row.iter().sum::<f64>() / t_len;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len;
        let std = var.sqrt();
        if std == 0.0 {
            return Err(Error::DegenerateSeries { name: dataset.names[c].clone() });
        }
        for v in values.row_mut(c) {
            *v = (*v - mean) / std;
        }
        stats.push((mean, std));
    }
    let mut out = Dataset::new(dataset.names.clone(), values, dataset.meta.clone())?;
    out.truth = dataset.truth.clone();
    Ok((out, stats))
}

/// Causal trailing moving average: each output mixes only present and past
/// samples, so filtering never leaks future information into training.
pub fn lowpass_filter(dataset: &Dataset, window: usize) -> Result<Dataset> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!("low-pass window must be odd and >= 1, got {window}")));
    }
    let t_len = dataset.t_len();
    let mut values = dataset.values.clone();
    for c in 0..dataset.n() {
        let src = dataset.series(c).to_vec();
        let dst = values.row_mut(c);
        for t in 0..t_len {
            let start = (t + 1).saturating_sub(window);
            let span = &src[start..=t];
            dst[t] = span.iter().sum::<f64>() / span.len() as f64;
        }
    }
    let mut out = Dataset::new(dataset.names.clone(), values, dataset.meta.clone())?;
    out.truth = dataset.truth.clone();
    Ok(out)
}

/// Parse a CSV file: first row series names, every later row one time step.
/// Error positions are 1-based file coordinates (the header is row 1).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(Error::Csv(format!("{}: empty file", path.display())));
    }
    let names: Vec<String> = lines[0].split(',').map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let t_len = lines.len() - 1;
    if t_len < 2 {
        return Err(Error::Csv(format!(
            "{}: need at least 2 data rows, found {t_len}",
            path.display()
        )));
    }
    let mut values = Tensor2::zeros(n, t_len);
    for (t, line) in lines[1..].iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        let file_row = t + 2;
        if fields.len() != n {
            return Err(Error::Csv(format!(
                "{}: row {file_row} has {} fields, expected {n}",
                path.display(),
                fields.len()
            )));
        }
        for (c, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::CsvCell {
                row: file_row,
                col: c + 1,
                msg: format!("not a number: {:?}", field.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvCell {
                    row: file_row,
                    col: c + 1,
                    msg: format!("non-finite value {v}"),
                });
            }
            values.set(c, t, v);
        }
    }
    Dataset::new(names, values, path.display().to_string())
}

/// Write the dataset as CSV, atomically (temp file, then rename).
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    crate::pipeline::write_atomic(path, dataset.to_csv_string().as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    None,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::None => x,
            Nonlinearity::Tanh => x.tanh(),
        }
    }
}

/// One generating edge: `effect[t] += beta * cause[t - lag]` inside `f`.
/// Indices are 0-based positions into the series list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEdge {
    pub cause: usize,
    pub effect: usize,
    pub beta: f64,
    pub lag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub t: usize,
    #[serde(default)]
    pub edges: Vec<TruthEdge>,
    pub noise_std: f64,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(Error::Config("synthetic spec needs n >= 1 and t >= 1".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std {} must be >= 0", self.noise_std)));
        }
        let mut inflow = vec![0.0; self.n];
        for (i, e) in self.edges.iter().enumerate() {
            if e.cause >= self.n || e.effect >= self.n {
                return Err(Error::Config(format!(
                    "edge {i}: series index out of range (n={})",
                    self.n
                )));
            }
            if e.lag == 0 {
                return Err(Error::Config(format!("edge {i}: lag must be >= 1")));
            }
            if !e.beta.is_finite() {
                return Err(Error::Config(format!("edge {i}: non-finite coefficient")));
            }
            if self.edges[..i].iter().any(|p| p.cause == e.cause && p.effect == e.effect) {
                return Err(Error::Config(format!(
                    "edge {i}: duplicate pair {} -> {}",
                    e.cause, e.effect
                )));
            }
            inflow[e.effect] += e.beta.abs();
        }
        if let Some((j, s)) = inflow
            .iter()
            .enumerate()
            .find(|(_, s)| **s > 0.95)
        {
            return Err(Error::Config(format!(
                "series {j}: total absolute inflow {s} exceeds the 0.95 stationarity guard"
            )));
        }
        Ok(())
    }
}

/// Series names used for generated data: `X1`, `X2`, ...
pub fn synth_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("X{i}")).collect()
}

/// Generate a dataset from the spec, with the generating graph attached as
/// ground truth. The first `max(lag)` steps are pure innovations; later
/// steps follow `X[j][t] = f(sum beta * X[i][t-lag]) + noise`. One noise
/// draw happens per (time, series) cell in row-major order, so output is a
/// pure function of the seed.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "synth", 0);
    let normal = Normal::new(0.0, spec.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let d_max = spec.edges.iter().map(|e| e.lag).max().unwrap_or(0);
    let mut parents: Vec<Vec<&TruthEdge>> = vec![Vec::new(); spec.n];
    for e in &spec.edges {
        parents[e.effect].push(e);
    }
    let mut values = Tensor2::zeros(spec.n, spec.t);
    for t in 0..spec.t {
        for j in 0..spec.n {
            let eps: f64 = normal.sample(&mut rng);
            let v = if t < d_max {
                eps
            } else {
                let mut sum = 0.0;
                for e in &parents[j] {
                    sum += e.beta * values.get(e.cause, t - e.lag);
                }
                spec.nonlinearity.apply(sum) + eps
            };
            values.set(j, t, v);
        }
    }
    let names = synth_names(spec.n);
    let truth = CausalGraph::new(
        names.clone(),
        spec.edges
            .iter()
            .map(|e| CausalEdge {
                cause: names[e.cause].clone(),
                effect: names[e.effect].clone(),
                delay: e.lag,
                score: e.beta,
            })
            .collect(),
    )?;
    let ds = Dataset::new(names, values, format!("synthetic seed={}", spec.seed))?;
    Ok(ds.with_truth(truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, t: usize, edges: Vec<TruthEdge>, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec { n, t, edges, noise_std: noise, nonlinearity: Nonlinearity::None, seed }
    }

    #[test]
    fn zscore_matches_population_formula_and_is_idempotent() {
        let ds = Dataset::new(
            vec!["a".into(), "b".into()],
            Tensor2::new(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap(),
            "test",
        )
        .unwrap();
        let (z, stats) = zscore_normalize(&ds).unwrap();
        let want = [-1.224745, 0.0, 1.224745];
        for (g, w) in z.series(0).iter().zip(&want) {
            assert!((g - w).abs() < 1e-6);
        }
        assert!((stats[0].0 - 2.0).abs() < 1e-12);
        assert!((stats[0].1 - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let (zz, _) = zscore_normalize(&z).unwrap();
        for c in 0..2 {
            for (a, b) in zz.series(c).iter().zip(z.series(c)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zscore_rejects_constant_series_by_name() {
        let ds = Dataset::new(
            vec!["ok".into(), "flat".into()],
            Tensor2::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 4.0, 4.0]).unwrap(),
            "test",
        )
        .unwrap();
        match zscore_normalize(&ds) {
            Err(Error::DegenerateSeries { name }) => assert_eq!(name, "flat"),
            other => panic!("expected degenerate-series error, got {other:?}"),
        }
    }

    #[test]
    fn lowpass_window_one_is_identity_and_three_averages() {
        let ds = Dataset::new(
            vec!["s".into()],
            Tensor2::new(1, 6, vec![0.0, 3.0, 0.0, 3.0, 0.0, 3.0]).unwrap(),
            "test",
        )
        .unwrap();
        let same = lowpass_filter(&ds, 1).unwrap();
        assert_eq!(same.values(), ds.values());

        let sm = lowpass_filter(&ds, 3).unwrap();
        assert_eq!(sm.series(0)[0], 0.0);
        assert_eq!(sm.series(0)[1], 1.5);
        assert_eq!(sm.series(0)[2], 1.0);
        assert_eq!(sm.series(0)[3], 2.0);
        assert_eq!(sm.series(0)[4], 1.0);
        assert_eq!(sm.series(0)[5], 2.0);

        let flat = Dataset::new(
            vec!["c".into()],
            Tensor2::new(1, 5, vec![2.0; 5]).unwrap(),
            "test",
        )
        .unwrap();
        let f = lowpass_filter(&flat, 3).unwrap();
        assert_eq!(f.series(0), &[2.0; 5]);

        assert!(matches!(lowpass_filter(&ds, 2), Err(Error::Config(_))));
        assert!(matches!(lowpass_filter(&ds, 0), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec(
            3,
            50,
            vec![TruthEdge { cause: 0, effect: 1, beta: 0.5, lag: 1 }],
            0.3,
            99,
        );
        let ds = generate_synthetic(&spec).unwrap();
        let path = dir.path().join("out.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.names(), ds.names());
        assert_eq!(back.values(), ds.values());
    }

    #[test]
    fn csv_shape_and_error_contracts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");

        std::fs::write(&p, "a,b\n1,2\n3,4\n\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.n(), 2);
        assert_eq!(ds.t_len(), 2);

        std::fs::write(&p, "a,b\n1,2\n3,4\n5,abc\n").unwrap();
        match load_csv(&p) {
            Err(Error::CsvCell { row, col, .. }) => {
                assert_eq!((row, col), (4, 2));
            }
            other => panic!("expected cell error, got {other:?}"),
        }

        std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Csv(_))));

        std::fs::write(&p, "a,a\n1,2\n3,4\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Csv(_))));

        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(load_csv(&p), Err(Error::Csv(_))));
    }

    #[test]
    fn synthetic_zero_edges_and_determinism() {
        let s = spec(3, 40, vec![], 0.5, 7);
        let a = generate_synthetic(&s).unwrap();
        let b = generate_synthetic(&s).unwrap();
        assert_eq!(a.values(), b.values());
        assert!(a.truth().unwrap().edges.is_empty());
        assert_eq!(a.names(), &["X1", "X2", "X3"]);

        let c = generate_synthetic(&spec(3, 40, vec![], 0.5, 8)).unwrap();
        assert_ne!(a.values(), c.values());
    }

    /// Independent sample-correlation oracle for the planted lag. With
    /// unit-variance innovations on both series the lagged correlation is
    /// beta / sqrt(1 + beta^2) (about 0.669 for beta = 0.9), regardless of
    /// the noise scale.
    #[test]
    fn synthetic_lagged_correlation_matches_derivation() {
        let s = spec(
            2,
            1000,
            vec![TruthEdge { cause: 0, effect: 1, beta: 0.9, lag: 2 }],
            0.01,
            1234,
        );
        let ds = generate_synthetic(&s).unwrap();
        let x1 = ds.series(0);
        let x2 = ds.series(1);
        let m = ds.t_len() - 2;
        let (mut sa, mut sb) = (0.0, 0.0);
        for t in 2..ds.t_len() {
            sa += x1[t - 2];
            sb += x2[t];
        }
        let (ma, mb) = (sa / m as f64, sb / m as f64);
        let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
        for t in 2..ds.t_len() {
            let da = x1[t - 2] - ma;
            let db = x2[t] - mb;
            cov += da * db;
            va += da * da;
            vb += db * db;
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        let expect = 0.9 / (1.81f64).sqrt();
        assert!((corr - expect).abs() < 0.06, "corr {corr} vs derived {expect}");
        assert!(corr > 0.6);

        let truth = ds.truth().unwrap();
        assert_eq!(truth.edges.len(), 1);
        assert_eq!(truth.edges[0].cause, "X1");
        assert_eq!(truth.edges[0].effect, "X2");
        assert_eq!(truth.edges[0].delay, 2);
    }

    #[test]
    fn synthetic_honors_stationarity_guard() {
        let s = spec(
            3,
            10_000,
            vec![
                TruthEdge { cause: 0, effect: 1, beta: 0.6, lag: 1 },
                TruthEdge { cause: 1, effect: 2, beta: 0.9, lag: 3 },
            ],
            0.1,
            42,
        );
        let ds = generate_synthetic(&s).unwrap();
        for c in 0..3 {
            let row = ds.series(c);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            assert!(var.sqrt() < 100.0 * 0.1, "series {c} drifted");
        }
    }

    #[test]
    fn synth_spec_validation_rejects_bad_inputs() {
        let base = spec(2, 10, vec![], 0.1, 1);

        let mut s = base.clone();
        s.edges = vec![TruthEdge { cause: 0, effect: 1, beta: 0.5, lag: 0 }];
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));

        let mut s = base.clone();
        s.edges = vec![TruthEdge { cause: 5, effect: 1, beta: 0.5, lag: 1 }];
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));

        let mut s = base.clone();
        s.edges = vec![
            TruthEdge { cause: 0, effect: 1, beta: 0.5, lag: 1 },
            TruthEdge { cause: 0, effect: 1, beta: 0.3, lag: 2 },
        ];
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));

        let mut s = base.clone();
        s.edges = vec![
            TruthEdge { cause: 0, effect: 1, beta: 0.5, lag: 1 },
            TruthEdge { cause: 1, effect: 1, beta: 0.5, lag: 2 },
        ];
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));

        let mut s = base;
        s.noise_std = -1.0;
        assert!(matches!(generate_synthetic(&s), Err(Error::Config(_))));
    }
}
