//! Semi-supervised anomaly detection over traces.
//!
//! Traces are reduced to one peak per clock cycle of the benign path. A
//! trace's strangeness is the sum of Euclidean distances to its κ nearest
//! benign neighbours; a per-path baseline of self-strangeness scores turns a
//! query's strangeness into a transductive p-value. A query is normal as
//! soon as one path votes for it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakVector {
    pub peaks: Vec<f64>,
    pub path_cycles: usize,
}

impl PeakVector {
    pub fn new(peaks: Vec<f64>) -> Self {
        PeakVector {
            path_cycles: peaks.len(),
            peaks,
        }
    }

    pub fn len(&self) -> usize {
        self.peaks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.peaks.is_empty()
    }
}

/// Cuts (or zero-pads) `trace` to `path_cycles * samples_per_cycle` samples
/// and keeps the maximum of every cycle-sized window.
pub fn preprocess(trace: &Trace, path_cycles: usize, samples_per_cycle: usize) -> PeakVector {
    let spc = samples_per_cycle.max(1);
    let peaks = (0..path_cycles)
        .map(|c| {
            (c * spc..(c + 1) * spc)
                .map(|i| trace.samples.get(i).copied().unwrap_or(0.0))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    PeakVector { peaks, path_cycles }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Sum of the `k` smallest values, added in ascending order.
fn sum_smallest(mut d: Vec<f64>, k: usize) -> f64 {
    if k < d.len() {
        d.select_nth_unstable_by(k, f64::total_cmp);
        d.truncate(k);
    }
    d.sort_unstable_by(f64::total_cmp);
    d.iter().sum()
}

fn check_dims(benign: &[PeakVector], queries: &[PeakVector]) -> Result<usize> {
    let dim = benign
        .first()
        .ok_or_else(|| Error::Parameter("benign set is empty".into()))?
        .len();
    for v in benign.iter().chain(queries) {
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(dim)
}

/// Strangeness of each query against the benign set: the sum of its
/// `kappa` smallest Euclidean distances to members of `benign`.
pub fn strangeness(
    benign: &[PeakVector],
    queries: &[PeakVector],
    kappa: usize,
) -> Result<Vec<f64>> {
    check_dims(benign, queries)?;
    if kappa == 0 || kappa > benign.len() {
        return Err(Error::Parameter(format!(
            "kappa must be in 1..={}, got {kappa}",
            benign.len()
        )));
    }
    Ok(queries
        .iter()
        .map(|q| {
            let d = benign
                .iter()
                .map(|x| euclidean(&x.peaks, &q.peaks))
                .collect();
            sum_smallest(d, kappa)
        })
        .collect())
}

/// Strangeness of every member of `benign` against the others, leaving out
/// its own zero distance.
pub fn self_strangeness(benign: &[PeakVector], kappa: usize) -> Result<Vec<f64>> {
    check_dims(benign, &[])?;
    if kappa == 0 || benign.len() <= kappa {
        return Err(Error::Parameter(format!(
            "self-scoring needs more than kappa = {kappa} members, got {}",
            benign.len()
        )));
    }
    let n = benign.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(&benign[i].peaks, &benign[j].peaks);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let row = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist[i * n + j])
                .collect();
            sum_smallest(row, kappa)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub path_id: usize,
    /// Ascending.
    pub scores: Vec<f64>,
    pub kappa: usize,
    /// Where the benign set came from (archive path or description).
    pub source: String,
}

impl Baseline {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn p_value(&self, score: f64, mode: PValueMode) -> f64 {
        p_value(&self.scores, score, mode)
    }
}

/// One benign set per execution path.
#[derive(Debug, Clone, PartialEq)]
pub struct BenignSet {
    pub path_id: usize,
    pub vectors: Vec<PeakVector>,
    pub source: String,
}

/// One baseline per path: sorted self-strangeness of its benign set.
pub fn fingerprint(sets: &[BenignSet], kappa: usize) -> Result<Vec<Baseline>> {
    sets.iter()
        .map(|set| {
            let mut scores = self_strangeness(&set.vectors, kappa)?;
            scores.sort_unstable_by(f64::total_cmp);
            Ok(Baseline {
                path_id: set.path_id,
                scores,
                kappa,
                source: set.source.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMode {
    /// `(1 + #{baseline >= score}) / (1 + n)`: strange queries get small
    /// p-values.
    #[default]
    Standard,
    /// `(1 + n - #{baseline > score}) / (1 + n)`, the reversed orientation.
    /// Assigns p = 1 to the strangest queries; kept for comparison only.
    Literal,
}

/// p-value of `score` against ascending `sorted` baseline scores.
pub fn p_value(sorted: &[f64], score: f64, mode: PValueMode) -> f64 {
    let n = sorted.len();
    let size = n as f64;
    match mode {
        PValueMode::Standard => {
            // first position whose score is >= `score`
            let below = sorted.partition_point(|&s| s < score);
            (1.0 + (n - below) as f64) / (1.0 + size)
        }
        PValueMode::Literal => {
            let not_above = sorted.partition_point(|&s| s <= score);
            let index = (n - not_above) as f64;
            (1.0 + size - index) / (1.0 + size)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vote {
    pub path_id: usize,
    pub p_value: f64,
    pub normal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub votes: Vec<Vote>,
    pub tau: f64,
}

impl Verdict {
    pub fn max_p(&self) -> f64 {
        self.votes.iter().map(|v| v.p_value).fold(0.0, f64::max)
    }
}

pub fn check_tau(tau: f64) -> Result<()> {
    if (0.0..=1.0).contains(&tau) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "tau must lie in [0, 1], got {tau}"
        )))
    }
}

/// Combines per-path p-values into a verdict: a path votes normal when its
/// p-value exceeds `tau`, and one normal vote suffices.
pub fn vote(p_values: &[(usize, f64)], tau: f64) -> Result<Verdict> {
    check_tau(tau)?;
    let votes: Vec<Vote> = p_values
        .iter()
        .map(|&(path_id, p_value)| Vote {
            path_id,
            p_value,
            normal: p_value > tau,
        })
        .collect();
    let status = if votes.iter().any(|v| v.normal) {
        Status::Normal
    } else {
        Status::Anomalous
    };
    Ok(Verdict { status, votes, tau })
}

/// Tests `q` against every path. `baselines` and `benign_sets` are matched
/// by position.
pub fn detect(
    q: &PeakVector,
    baselines: &[Baseline],
    benign_sets: &[BenignSet],
    kappa: usize,
    tau: f64,
    mode: PValueMode,
) -> Result<Verdict> {
    check_tau(tau)?;
    if baselines.len() != benign_sets.len() {
        return Err(Error::Parameter(format!(
            "{} baselines for {} benign sets",
            baselines.len(),
            benign_sets.len()
        )));
    }
    let ps = baselines
        .iter()
        .zip(benign_sets)
        .map(|(b, set)| {
            let score = strangeness(&set.vectors, std::slice::from_ref(q), kappa)?[0];
            Ok((b.path_id, b.p_value(score, mode)))
        })
        .collect::<Result<Vec<_>>>()?;
    vote(&ps, tau)
}

/// Fitted per-path model that knows how to preprocess raw traces for each
/// path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    pub path_cycles: usize,
    pub samples_per_cycle: usize,
    pub benign: BenignSet,
    pub baseline: Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub kappa: usize,
    pub mode: PValueMode,
    pub paths: Vec<PathModel>,
}

/// Benign traces of one path plus the geometry needed to preprocess them.
#[derive(Debug, Clone, Copy)]
pub struct PathTraces<'a> {
    pub path_id: usize,
    pub path_cycles: usize,
    pub samples_per_cycle: usize,
    pub traces: &'a [Trace],
    pub source: &'a str,
}

impl Detector {
    pub fn fit(paths: &[PathTraces<'_>], kappa: usize, mode: PValueMode) -> Result<Self> {
        let sets: Vec<BenignSet> = paths
            .iter()
            .map(|p| BenignSet {
                path_id: p.path_id,
                vectors: p
                    .traces
                    .iter()
                    .map(|t| preprocess(t, p.path_cycles, p.samples_per_cycle))
                    .collect(),
                source: p.source.to_string(),
            })
            .collect();
        let baselines = fingerprint(&sets, kappa)?;
        Ok(Detector {
            kappa,
            mode,
            paths: paths
                .iter()
                .zip(sets)
                .zip(baselines)
                .map(|((p, benign), baseline)| PathModel {
                    path_cycles: p.path_cycles,
                    samples_per_cycle: p.samples_per_cycle,
                    benign,
                    baseline,
                })
                .collect(),
        })
    }

    /// Per-path `(path_id, p_value)` for a raw trace.
    pub fn p_values(&self, trace: &Trace) -> Result<Vec<(usize, f64)>> {
        self.paths
            .iter()
            .map(|m| {
                let q = preprocess(trace, m.path_cycles, m.samples_per_cycle);
                let score =
                    strangeness(&m.benign.vectors, std::slice::from_ref(&q), self.kappa)?[0];
                Ok((m.baseline.path_id, m.baseline.p_value(score, self.mode)))
            })
            .collect()
    }

    pub fn verdict(&self, trace: &Trace, tau: f64) -> Result<Verdict> {
        vote(&self.p_values(trace)?, tau)
    }
}
