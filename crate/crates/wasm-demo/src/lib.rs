//! Browser bindings. Each exported function takes plain numbers, runs the
//! simulator in-process and returns a JSON document for the page to draw.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use emsynth::corpus::{self, Class};
use emsynth::detector::{Detector, PValueMode, PathTraces};
use emsynth::eval::{auc, roc_curve, similarity_study, tau_grid, Dataset, Summary, DEFAULT_KAPPA};
use emsynth::isa::Catalog;
use emsynth::library::{build_library, pairs_of};
use emsynth::sim::{emit, EmissionConfig, Trace};
use emsynth::synth::synthesize_set;

/// Knobs shared by every demo.
#[derive(Debug, Clone, Copy)]
pub struct Knobs {
    pub noise: f64,
    pub jitter: f64,
    pub drift: usize,
    pub seed: u64,
}

impl Knobs {
    fn config(self) -> EmissionConfig {
        EmissionConfig {
            noise_sigma: self.noise,
            jitter_sigma: self.jitter,
            drift_max: self.drift,
            ..EmissionConfig::default()
        }
        .with_seed(self.seed)
    }
}

#[derive(Debug, Serialize)]
pub struct TracePair {
    pub samples_per_cycle: usize,
    /// One label per instruction, with its starting cycle.
    pub instructions: Vec<(String, u32)>,
    pub real: Vec<f64>,
    pub synthetic: Vec<f64>,
}

/// One simulated capture of program B next to one trace assembled from a
/// block library of `examples` captures per pair.
pub fn trace_pair(knobs: Knobs, examples: usize) -> emsynth::Result<TracePair> {
    let config = knobs.config();
    config.validate()?;
    let catalog = Catalog::avr_default();
    let path = corpus::path(Class::B, &catalog);
    let keys = pairs_of(&path).into_iter().collect();
    let library = build_library(&keys, &config, examples.max(1), &catalog)?;
    let real = emit(&path, &config, 0)?;
    let synthetic = synthesize_set(&path, &library, 1, knobs.seed ^ 1)?.remove(0);
    let mut cycle = 0;
    let instructions = path
        .instructions
        .iter()
        .map(|i| {
            let start = cycle;
            cycle += i.cycles;
            (i.to_string(), start)
        })
        .collect();
    Ok(TracePair {
        samples_per_cycle: config.samples_per_cycle,
        instructions,
        real: real.samples,
        synthetic: synthetic.samples,
    })
}

#[derive(Debug, Serialize)]
pub struct DetectionRun {
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
    pub benign_p: Vec<f64>,
    pub anomalous_p: Vec<f64>,
}

/// Trains on the first half of each benign set (B either captured or
/// synthetic), then scores the other half against `n / 2` injected traces.
pub fn detection(
    knobs: Knobs,
    n: usize,
    synthetic: bool,
    hard: bool,
) -> emsynth::Result<DetectionRun> {
    let n = n.max(2 * (DEFAULT_KAPPA + 1));
    let data = Dataset::generate(&knobs.config(), &Catalog::avr_default(), n, n)?;
    let half = n / 2;
    let train_b = if synthetic {
        &data.synthetic_b
    } else {
        &data.b
    };
    let detector = Detector::fit(
        &[
            PathTraces {
                path_id: 0,
                path_cycles: data.cycles_a,
                samples_per_cycle: data.samples_per_cycle,
                traces: &data.a[..half],
                source: "program_a",
            },
            PathTraces {
                path_id: 1,
                path_cycles: data.cycles_b,
                samples_per_cycle: data.samples_per_cycle,
                traces: &train_b[..half],
                source: "program_b",
            },
        ],
        DEFAULT_KAPPA,
        PValueMode::Standard,
    )?;
    let max_p = |traces: &[Trace]| -> emsynth::Result<Vec<f64>> {
        traces
            .iter()
            .map(|t| {
                Ok(detector
                    .p_values(t)?
                    .into_iter()
                    .map(|(_, p)| p)
                    .fold(0.0, f64::max))
            })
            .collect()
    };
    let mut benign_p = max_p(&data.a[half..])?;
    benign_p.extend(max_p(&data.b[half..])?);
    let anomalous = if hard { &data.hard } else { &data.easy };
    let anomalous_p = max_p(&anomalous[..half])?;
    let scores: Vec<(f64, bool)> = benign_p
        .iter()
        .map(|&p| (p, false))
        .chain(anomalous_p.iter().map(|&p| (p, true)))
        .collect();
    let roc = roc_curve(&scores, &tau_grid(0.001));
    Ok(DetectionRun {
        auc: auc(&roc),
        roc,
        benign_p,
        anomalous_p,
    })
}

#[derive(Debug, Serialize)]
pub struct SimilarityBox {
    pub set: String,
    pub summary: Summary,
}

/// NED of synthetic B against each captured set, summarized for a box plot.
pub fn similarity(knobs: Knobs, n: usize, neighbors: usize) -> emsynth::Result<Vec<SimilarityBox>> {
    let n = n.max(neighbors).max(1);
    let data = Dataset::generate(&knobs.config(), &Catalog::avr_default(), n, n)?;
    let sets = vec![
        ("program_a".to_string(), data.peaks_b(&data.a)),
        ("program_b".to_string(), data.peaks_b(&data.b)),
        ("malicious_easy".to_string(), data.peaks_b(&data.easy)),
        ("malicious_hard".to_string(), data.peaks_b(&data.hard)),
    ];
    Ok(
        similarity_study(&data.peaks_b(&data.synthetic_b), &sets, neighbors)?
            .into_iter()
            .map(|s| SimilarityBox {
                set: s.set,
                summary: s.summary,
            })
            .collect(),
    )
}

fn to_js<T: Serialize>(r: emsynth::Result<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = tracePair)]
pub fn js_trace_pair(
    noise: f64,
    jitter: f64,
    drift: usize,
    seed: u64,
    examples: usize,
) -> Result<String, JsError> {
    to_js(trace_pair(
        Knobs {
            noise,
            jitter,
            drift,
            seed,
        },
        examples,
    ))
}

#[wasm_bindgen(js_name = detection)]
pub fn js_detection(
    noise: f64,
    jitter: f64,
    drift: usize,
    seed: u64,
    n: usize,
    synthetic: bool,
    hard: bool,
) -> Result<String, JsError> {
    to_js(detection(
        Knobs {
            noise,
            jitter,
            drift,
            seed,
        },
        n,
        synthetic,
        hard,
    ))
}

#[wasm_bindgen(js_name = similarity)]
pub fn js_similarity(
    noise: f64,
    jitter: f64,
    drift: usize,
    seed: u64,
    n: usize,
    neighbors: usize,
) -> Result<String, JsError> {
    to_js(similarity(
        Knobs {
            noise,
            jitter,
            drift,
            seed,
        },
        n,
        neighbors,
    ))
}
