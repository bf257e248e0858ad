//! Cross-validated detection experiments and the NED similarity study.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Class};
use crate::detector::{Detector, PValueMode, PathTraces, PeakVector};
use crate::error::{Error, Result};
use crate::isa::Catalog;
use crate::library::{build_library, corpus_pairs};
use crate::sim::{capture_set, derive_seed, EmissionConfig, Trace};
use crate::synth::synthesize_set;

pub const DEFAULT_KAPPA: usize = 10;
pub const DEFAULT_NEIGHBORS: usize = 25;

/// `0, step, 2*step, ..., 1`.
pub fn tau_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step).round() as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    RealTrained,
    SyntheticTrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyCase {
    Easy,
    Hard,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::RealTrained => "real_trained",
            Experiment::SyntheticTrained => "synthetic_trained",
        })
    }
}

impl fmt::Display for AnomalyCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyCase::Easy => "easy",
            AnomalyCase::Hard => "hard",
        })
    }
}

/// Trace sets for the two benign programs, synthetic B and both injected
/// variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples_per_cycle: usize,
    pub cycles_a: usize,
    pub cycles_b: usize,
    pub a: Vec<Trace>,
    pub b: Vec<Trace>,
    pub synthetic_b: Vec<Trace>,
    pub easy: Vec<Trace>,
    pub hard: Vec<Trace>,
}

impl Dataset {
    /// Simulates `n` captures per program and synthesizes `n` B traces
    /// from a library of `library_examples` blocks per corpus pair.
    pub fn generate(
        config: &EmissionConfig,
        catalog: &Catalog,
        n: usize,
        library_examples: usize,
    ) -> Result<Self> {
        let paths: Vec<_> = Class::ALL
            .iter()
            .map(|&c| corpus::path(c, catalog))
            .collect();
        let capture = |class: Class| {
            let cfg = config
                .clone()
                .with_seed(derive_seed(config.seed, 100 + class as u64));
            capture_set(&paths[class as usize], &cfg, n)
        };
        let lib_cfg = config.clone().with_seed(derive_seed(config.seed, 200));
        let library = build_library(&corpus_pairs(&paths), &lib_cfg, library_examples, catalog)?;
        let synthetic_b = synthesize_set(
            &paths[Class::B as usize],
            &library,
            n,
            derive_seed(config.seed, 300),
        )?;
        Ok(Dataset {
            samples_per_cycle: config.samples_per_cycle,
            cycles_a: paths[Class::A as usize].cycles() as usize,
            cycles_b: paths[Class::B as usize].cycles() as usize,
            a: capture(Class::A)?,
            b: capture(Class::B)?,
            synthetic_b,
            easy: capture(Class::MaliciousEasy)?,
            hard: capture(Class::MaliciousHard)?,
        })
    }

    pub fn anomalous(&self, case: AnomalyCase) -> &[Trace] {
        match case {
            AnomalyCase::Easy => &self.easy,
            AnomalyCase::Hard => &self.hard,
        }
    }

    /// Peak vectors of `traces` at program B's benign length.
    pub fn peaks_b(&self, traces: &[Trace]) -> Vec<PeakVector> {
        traces
            .iter()
            .map(|t| crate::detector::preprocess(t, self.cycles_b, self.samples_per_cycle))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub folds: usize,
    /// Held-out traces per benign program per fold; training gets the other
    /// `folds - 1` chunks.
    pub test_per_class: usize,
    pub anomalous_per_fold: usize,
}

impl Default for FoldSpec {
    fn default() -> Self {
        FoldSpec {
            folds: 10,
            test_per_class: 50,
            anomalous_per_fold: 100,
        }
    }
}

impl FoldSpec {
    pub fn benign_needed(&self) -> usize {
        self.folds * self.test_per_class
    }

    pub fn anomalous_needed(&self) -> usize {
        self.folds * self.anomalous_per_fold
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train_a: Vec<usize>,
    pub train_b: Vec<usize>,
    pub test_a: Vec<usize>,
    pub test_b: Vec<usize>,
    pub test_anomalous: Vec<usize>,
}

/// Seeded shuffle of each pool, then contiguous slicing into folds.
pub fn plan_folds(
    spec: &FoldSpec,
    benign_available: usize,
    anomalous_available: usize,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    if spec.folds < 2 || spec.test_per_class == 0 || spec.anomalous_per_fold == 0 {
        return Err(Error::Plan(format!("degenerate fold spec {spec:?}")));
    }
    if benign_available < spec.benign_needed() {
        return Err(Error::Plan(format!(
            "need {} traces per benign program, have {benign_available}",
            spec.benign_needed()
        )));
    }
    if anomalous_available < spec.anomalous_needed() {
        return Err(Error::Plan(format!(
            "need {} anomalous traces, have {anomalous_available}",
            spec.anomalous_needed()
        )));
    }
    let shuffled = |len: usize, take: usize, stream: u64| {
        let mut idx: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        idx.shuffle(&mut rng);
        idx.truncate(take);
        idx
    };
    let a = shuffled(benign_available, spec.benign_needed(), 1);
    let b = shuffled(benign_available, spec.benign_needed(), 2);
    let bad = shuffled(anomalous_available, spec.anomalous_needed(), 3);
    let t = spec.test_per_class;
    let m = spec.anomalous_per_fold;
    Ok((0..spec.folds)
        .map(|k| {
            let rest = |pool: &[usize]| -> Vec<usize> {
                pool.iter()
                    .enumerate()
                    .filter(|(i, _)| i / t != k)
                    .map(|(_, &v)| v)
                    .collect()
            };
            FoldPlan {
                fold_index: k,
                train_a: rest(&a),
                train_b: rest(&b),
                test_a: a[k * t..(k + 1) * t].to_vec(),
                test_b: b[k * t..(k + 1) * t].to_vec(),
                test_anomalous: bad[k * m..(k + 1) * m].to_vec(),
            }
        })
        .collect())
}

/// Confusion counts with "anomalous" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    /// A trace is flagged when its largest per-path p-value is at most
    /// `tau`, i.e. when no path votes for it.
    pub fn at(scores: &[(f64, bool)], tau: f64) -> Self {
        let mut c = Confusion::default();
        for &(max_p, anomalous) in scores {
            match (max_p <= tau, anomalous) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn tpr(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        Self::ratio(self.fp, self.fp + self.tn)
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// ROC points from sweeping `tau`, sorted by (fpr, tpr) and closed with the
/// (0,0) and (1,1) corners.
pub fn roc_curve(scores: &[(f64, bool)], taus: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = taus
        .iter()
        .map(|&t| {
            let c = Confusion::at(scores, t);
            (c.fpr(), c.tpr())
        })
        .chain([(0.0, 0.0), (1.0, 1.0)])
        .collect();
    pts.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    pts.dedup();
    pts
}

/// Trapezoidal area under sorted ROC points.
pub fn auc(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub best_acc: f64,
    pub best_f1: f64,
    pub best_tau: f64,
    /// Share of benign test traces flagged at `best_tau`.
    pub benign_fpr_at_best_tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: Experiment,
    pub anomaly_case: AnomalyCase,
    pub kappa: usize,
    pub per_fold: Vec<FoldMetrics>,
    pub averages: Averages,
    pub roc_points: Vec<Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("fold,fpr,tpr\n");
        for (k, pts) in self.roc_points.iter().enumerate() {
            for (fpr, tpr) in pts {
                out.push_str(&format!("{k},{fpr},{tpr}\n"));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentParams {
    pub kappa: usize,
    pub tau_grid: Vec<f64>,
    pub folds: FoldSpec,
    pub seed: u64,
    pub mode: PValueMode,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            kappa: DEFAULT_KAPPA,
            tau_grid: tau_grid(0.001),
            folds: FoldSpec::default(),
            seed: 0,
            mode: PValueMode::Standard,
        }
    }
}

/// k-fold evaluation. Training uses programs A and B as two paths; in the
/// synthetic experiment B's training traces are synthetic while every test
/// trace stays a device capture.
pub fn run_experiment(
    data: &Dataset,
    experiment: Experiment,
    case: AnomalyCase,
    params: &ExperimentParams,
) -> Result<EvalReport> {
    if params.tau_grid.is_empty() {
        return Err(Error::Parameter("tau grid is empty".into()));
    }
    let train_b_pool = match experiment {
        Experiment::RealTrained => &data.b,
        Experiment::SyntheticTrained => &data.synthetic_b,
    };
    let benign_available = data.a.len().min(data.b.len()).min(train_b_pool.len());
    let anomalous = data.anomalous(case);
    let plans = plan_folds(
        &params.folds,
        benign_available,
        anomalous.len(),
        params.seed,
    )?;

    let mut per_fold = Vec::with_capacity(plans.len());
    let mut roc_points = Vec::with_capacity(plans.len());
    for plan in &plans {
        let pick = |pool: &[Trace], idx: &[usize]| -> Vec<Trace> {
            idx.iter().map(|&i| pool[i].clone()).collect()
        };
        let train_a = pick(&data.a, &plan.train_a);
        let train_b = pick(train_b_pool, &plan.train_b);
        let detector = Detector::fit(
            &[
                PathTraces {
                    path_id: 0,
                    path_cycles: data.cycles_a,
                    samples_per_cycle: data.samples_per_cycle,
                    traces: &train_a,
                    source: "program_a",
                },
                PathTraces {
                    path_id: 1,
                    path_cycles: data.cycles_b,
                    samples_per_cycle: data.samples_per_cycle,
                    traces: &train_b,
                    source: "program_b",
                },
            ],
            params.kappa,
            params.mode,
        )?;
        let max_p = |t: &Trace| -> Result<f64> {
            Ok(detector
                .p_values(t)?
                .into_iter()
                .map(|(_, p)| p)
                .fold(0.0, f64::max))
        };
        let mut scores = Vec::new();
        for &i in &plan.test_a {
            scores.push((max_p(&data.a[i])?, false));
        }
        for &i in &plan.test_b {
            scores.push((max_p(&data.b[i])?, false));
        }
        for &i in &plan.test_anomalous {
            scores.push((max_p(&anomalous[i])?, true));
        }
        let roc = roc_curve(&scores, &params.tau_grid);
        let mut best_acc = f64::NEG_INFINITY;
        let mut best_tau = params.tau_grid[0];
        let mut best_f1: f64 = 0.0;
        let mut fpr_at_best = 0.0;
        for &tau in &params.tau_grid {
            let c = Confusion::at(&scores, tau);
            if c.accuracy() > best_acc {
                best_acc = c.accuracy();
                best_tau = tau;
                fpr_at_best = c.fpr();
            }
            best_f1 = best_f1.max(c.f1());
        }
        per_fold.push(FoldMetrics {
            fold: plan.fold_index,
            auc: auc(&roc),
            best_acc,
            best_f1,
            best_tau,
            benign_fpr_at_best_tau: fpr_at_best,
        });
        roc_points.push(roc);
    }
    let mean =
        |f: fn(&FoldMetrics) -> f64| per_fold.iter().map(f).sum::<f64>() / per_fold.len() as f64;
    let averages = Averages {
        auc: mean(|m| m.auc),
        acc: mean(|m| m.best_acc),
        f1: mean(|m| m.best_f1),
    };
    Ok(EvalReport {
        experiment,
        anomaly_case: case,
        kappa: params.kappa,
        per_fold,
        averages,
        roc_points,
    })
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = v.clone().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64
}

/// Normalized Euclidean distance `sqrt(0.5 * Var(a - b) / (Var(a) + Var(b)))`
/// with population variances. Lies in [0, 1].
pub fn ned(a: &PeakVector, b: &PeakVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let va = variance(a.peaks.iter().copied());
    let vb = variance(b.peaks.iter().copied());
    if va + vb == 0.0 {
        return Err(Error::UndefinedDistance);
    }
    let vd = variance(a.peaks.iter().zip(&b.peaks).map(|(x, y)| x - y));
    Ok((0.5 * vd / (va + vb)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles by linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScores {
    pub set: String,
    pub scores: Vec<f64>,
    pub summary: Summary,
}

/// For every synthetic vector and every reference set, the mean of the
/// `neighbors` smallest NEDs to that set.
pub fn similarity_study(
    synthetic: &[PeakVector],
    real_sets: &[(String, Vec<PeakVector>)],
    neighbors: usize,
) -> Result<Vec<SimilarityScores>> {
    real_sets
        .iter()
        .map(|(name, set)| {
            if neighbors == 0 || neighbors > set.len() {
                return Err(Error::Parameter(format!(
                    "neighbors must be in 1..={} for set `{name}`, got {neighbors}",
                    set.len()
                )));
            }
            let scores = synthetic
                .iter()
                .map(|s| {
                    let mut d = set.iter().map(|r| ned(s, r)).collect::<Result<Vec<_>>>()?;
                    d.sort_unstable_by(f64::total_cmp);
                    Ok(d[..neighbors].iter().sum::<f64>() / neighbors as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SimilarityScores {
                set: name.clone(),
                summary: Summary::of(&scores),
                scores,
            })
        })
        .collect()
}

pub fn similarity_csv(results: &[SimilarityScores]) -> String {
    let mut out = String::from("set,index,score\n");
    for r in results {
        for (i, s) in r.scores.iter().enumerate() {
            out.push_str(&format!("{},{i},{s}\n", r.set));
        }
    }
    out
}

pub fn similarity_summary_csv(results: &[SimilarityScores]) -> String {
    let mut out = String::from("set,mean,min,q1,median,q3,max\n");
    for r in results {
        let s = r.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.set, s.mean, s.min, s.q1, s.median, s.q3, s.max
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn pv(v: &[f64]) -> PeakVector {
        PeakVector::new(v.to_vec())
    }

    #[test]
    fn ned_identities() {
        let a = pv(&[1.0, 3.0, 2.0, 5.0]);
        assert_eq!(ned(&a, &a).unwrap(), 0.0);
        let shifted = pv(&a.peaks.iter().map(|x| x + 7.5).collect::<Vec<_>>());
        assert!(ned(&a, &shifted).unwrap().abs() < 1e-12);
        let neg = pv(&a.peaks.iter().map(|x| -x).collect::<Vec<_>>());
        assert!((ned(&a, &neg).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            ned(&pv(&[2.0, 2.0]), &pv(&[1.0, 1.0])),
            Err(Error::UndefinedDistance)
        ));
        assert!(matches!(ned(&a, &pv(&[1.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn summary_quartiles() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0, 5.0]);
        assert_eq!(
            (s.min, s.q1, s.median, s.q3, s.max),
            (1.0, 2.0, 3.0, 4.0, 5.0)
        );
        assert_eq!(s.mean, 3.0);
        let s = Summary::of(&[1.0, 2.0]);
        assert_eq!(s.median, 1.5);
    }

    #[test]
    fn fold_plan_counts_and_disjointness() {
        let spec = FoldSpec::default();
        let plans = plan_folds(&spec, 1000, 1000, 42).unwrap();
        assert_eq!(plans.len(), 10);
        let mut all_bad = BTreeSet::new();
        for p in &plans {
            assert_eq!(p.train_a.len(), 450);
            assert_eq!(p.train_b.len(), 450);
            assert_eq!(p.test_a.len(), 50);
            assert_eq!(p.test_b.len(), 50);
            assert_eq!(p.test_anomalous.len(), 100);
            let ta: BTreeSet<_> = p.train_a.iter().collect();
            assert!(p.test_a.iter().all(|i| !ta.contains(i)));
            let tb: BTreeSet<_> = p.train_b.iter().collect();
            assert!(p.test_b.iter().all(|i| !tb.contains(i)));
            all_bad.extend(p.test_anomalous.iter().copied());
        }
        assert_eq!(all_bad.len(), 1000);
        assert_eq!(plans, plan_folds(&spec, 1000, 1000, 42).unwrap());
        assert!(matches!(
            plan_folds(&spec, 499, 1000, 0),
            Err(Error::Plan(_))
        ));
        assert!(matches!(
            plan_folds(&spec, 1000, 999, 0),
            Err(Error::Plan(_))
        ));
    }

    #[test]
    fn constant_scores_give_half_auc() {
        let scores: Vec<(f64, bool)> = (0..200).map(|i| (0.3, i % 2 == 0)).collect();
        let roc = roc_curve(&scores, &tau_grid(0.001));
        assert!((auc(&roc) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_gives_unit_auc() {
        let mut scores = vec![(0.001, true); 10];
        scores.extend(vec![(0.5, false); 10]);
        let roc = roc_curve(&scores, &tau_grid(0.001));
        assert_eq!(auc(&roc), 1.0);
        for w in roc.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn tau_zero_flags_nothing() {
        let scores = vec![(0.01, true), (0.5, false)];
        let c = Confusion::at(&scores, 0.0);
        assert_eq!((c.tpr(), c.fpr()), (0.0, 0.0));
        assert_eq!(tau_grid(0.001).len(), 1001);
    }

    #[test]
    fn similarity_rejects_bad_neighbor_counts() {
        let set = vec![pv(&[0.0, 1.0]), pv(&[1.0, 0.0])];
        let named = vec![("x".to_string(), set.clone())];
        assert!(similarity_study(&set, &named, 3).is_err());
        assert!(similarity_study(&set, &named, 0).is_err());
        let r = similarity_study(&set, &named, 1).unwrap();
        assert_eq!(r[0].scores, vec![0.0, 0.0]);
    }
}
