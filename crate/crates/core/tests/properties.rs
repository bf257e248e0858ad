mod common;

use std::collections::{BTreeMap, BTreeSet};

use emsynth::corpus::{self, Class};
use emsynth::detector::{
    detect, fingerprint, p_value, preprocess, strangeness, BenignSet, Detector, PValueMode,
    PathTraces, PeakVector, Status,
};
use emsynth::eval::{auc, ned, roc_curve, tau_grid};
use emsynth::isa::{flatten_paths, inject, parse_program, remove, Catalog, ExecutionPath};
use emsynth::library::{build_library, sample_block, PairKey};
use emsynth::sim::{capture_set, emit, EmissionConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MNEMONICS: [&str; 12] = [
    "add", "sub", "and", "eor", "mov", "ldi", "ses", "cls", "nop", "com", "lsl", "clr",
];

fn arb_path() -> impl Strategy<Value = ExecutionPath> {
    prop::collection::vec(0..MNEMONICS.len(), 1..30).prop_map(|idx| {
        let cat = Catalog::avr_default();
        let ins = idx
            .into_iter()
            .map(|i| cat.instruction(MNEMONICS[i], Vec::<String>::new()).unwrap())
            .collect();
        ExecutionPath::new("arb", 0, ins)
    })
}

/// Random straight-line listing with `branches` conditional branches, each
/// jumping over the instruction that follows it.
fn arb_listing() -> impl Strategy<Value = (String, usize)> {
    prop::collection::vec((0..MNEMONICS.len(), any::<bool>()), 1..12).prop_map(|items| {
        let mut src = String::from("setup:\n    ldi r16, 1\nloop:\n");
        let mut branches = 0;
        for (k, (i, branch)) in items.iter().enumerate() {
            if *branch {
                src.push_str(&format!("    breq skip{k}\n    nop\nskip{k}:\n"));
                branches += 1;
            }
            let ops = match MNEMONICS[*i] {
                "ses" | "cls" | "nop" => "",
                "ldi" => " r16, 0x1f",
                "com" | "lsl" | "clr" => " r3",
                _ => " r1, r2",
            };
            src.push_str(&format!("    {}{ops}\n", MNEMONICS[*i]));
        }
        src.push_str("    rjmp loop\n");
        (src, branches)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn render_reparses_to_equal_program((src, _) in arb_listing()) {
        let cat = Catalog::avr_default();
        let p = parse_program("arb", &src, &cat).unwrap();
        prop_assert_eq!(parse_program("arb", &p.render(), &cat).unwrap(), p);
    }

    #[test]
    fn path_count_bounded_by_branch_resolutions((src, branches) in arb_listing()) {
        prop_assume!(branches <= 6);
        let cat = Catalog::avr_default();
        let p = parse_program("arb", &src, &cat).unwrap();
        let paths = flatten_paths(&p, &BTreeMap::new()).unwrap();
        prop_assert!(paths.len() <= 1 << branches);
        prop_assert!(!paths.is_empty());
        let distinct: BTreeSet<Vec<&str>> = paths.iter().map(|p| p.mnemonics()).collect();
        prop_assert_eq!(distinct.len(), paths.len());
    }

    #[test]
    fn inject_then_remove_is_identity(path in arb_path(), payload in arb_path(), at in any::<prop::sample::Index>()) {
        let pos = at.index(path.len() + 1);
        let injected = inject(&path, pos, &payload.instructions).unwrap();
        prop_assert_eq!(injected.len(), path.len() + payload.len());
        prop_assert_eq!(remove(&injected, pos, payload.len()).unwrap(), path);
    }

    #[test]
    fn p_value_non_increasing_in_score(mut base in prop::collection::vec(0.0f64..10.0, 1..40), a in 0.0f64..12.0, b in 0.0f64..12.0) {
        base.sort_by(f64::total_cmp);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p_value(&base, lo, PValueMode::Standard) >= p_value(&base, hi, PValueMode::Standard));
    }

    #[test]
    fn ned_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 2..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
        let (pa, pb) = (PeakVector::new(a), PeakVector::new(b));
        if let Ok(d) = ned(&pa, &pb) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
        }
    }

    #[test]
    fn power_of_two_scaling_preserves_p_values(seed in any::<u64>(), exp in -3i32..4) {
        let c = 2f64.powi(exp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vecs = |n: usize| -> Vec<PeakVector> {
            (0..n).map(|_| PeakVector::new((0..6).map(|_| rand::Rng::random_range(&mut rng, 0.0..2.0)).collect())).collect()
        };
        let x = vecs(15);
        let q = vecs(5);
        let scale = |v: &[PeakVector]| -> Vec<PeakVector> {
            v.iter().map(|p| PeakVector::new(p.peaks.iter().map(|z| z * c).collect())).collect()
        };
        let set = |v: Vec<PeakVector>| vec![BenignSet { path_id: 0, vectors: v, source: String::new() }];
        let (plain, scaled) = (set(x.clone()), set(scale(&x)));
        let b0 = fingerprint(&plain, 3).unwrap();
        let b1 = fingerprint(&scaled, 3).unwrap();
        for (s0, s1) in b0[0].scores.iter().zip(&b1[0].scores) {
            prop_assert_eq!(s0 * c, *s1);
        }
        for (q0, q1) in q.iter().zip(scale(&q)) {
            let v0 = detect(q0, &b0, &plain, 3, 0.2, PValueMode::Standard).unwrap();
            let v1 = detect(&q1, &b1, &scaled, 3, 0.2, PValueMode::Standard).unwrap();
            prop_assert_eq!(v0, v1);
        }
    }
}

#[test]
fn scaling_by_arbitrary_constant_scales_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x: Vec<PeakVector> = (0..20)
        .map(|_| {
            PeakVector::new(
                (0..8)
                    .map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0))
                    .collect(),
            )
        })
        .collect();
    let c = 3.7;
    let xs: Vec<PeakVector> = x
        .iter()
        .map(|p| PeakVector::new(p.peaks.iter().map(|v| v * c).collect()))
        .collect();
    let s0 = strangeness(&x, &x[..5], 4).unwrap();
    let s1 = strangeness(&xs, &xs[..5], 4).unwrap();
    for (a, b) in s0.iter().zip(&s1) {
        assert!((a * c - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn detect_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    use rand::Rng;
    for _ in 0..100 {
        let dim = rng.random_range(1..8);
        let n = rng.random_range(3..=20);
        let kappa = rng.random_range(1..n);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let set = vec![BenignSet {
            path_id: 0,
            vectors: x.iter().cloned().map(PeakVector::new).collect(),
            source: String::new(),
        }];
        let b = fingerprint(&set, kappa).unwrap();
        assert_eq!(b[0].scores, common::oracle::baseline(&x, kappa));
        let v = detect(
            &PeakVector::new(q.clone()),
            &b,
            &set,
            kappa,
            0.5,
            PValueMode::Standard,
        )
        .unwrap();
        let expect = common::oracle::p_value(&b[0].scores, common::oracle::score(&x, &q, kappa));
        assert_eq!(v.votes[0].p_value, expect);
    }
}

#[test]
fn sample_block_draws_are_uniform() {
    let cat = Catalog::avr_default();
    let key = PairKey::new("add", "sub");
    let lib = build_library(
        &BTreeSet::from([key.clone()]),
        &EmissionConfig::default(),
        10,
        &cat,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 20_000;
    let mut counts = [0usize; 10];
    for _ in 0..draws {
        counts[sample_block(&lib, &key, &mut rng).unwrap().capture_id] += 1;
    }
    let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!(
            (c as f64 - draws as f64 * 0.1).abs() < 5.0 * sigma,
            "{counts:?}"
        );
    }
}

#[test]
fn library_covers_every_requested_pair() {
    let cat = Catalog::avr_default();
    let b = corpus::path(Class::B, &cat);
    let keys: BTreeSet<PairKey> = emsynth::library::pairs_of(&b).into_iter().collect();
    let lib = build_library(&keys, &EmissionConfig::default(), 7, &cat).unwrap();
    assert_eq!(lib.entries.keys().cloned().collect::<BTreeSet<_>>(), keys);
    assert!(lib.entries.values().all(|v| v.len() == 7));
}

fn mean_block_peak(prev: &str, cur: &str, config: &EmissionConfig) -> f64 {
    let cat = Catalog::avr_default();
    let ins = |m: &str| cat.instruction(m, Vec::<String>::new()).unwrap();
    let path = ExecutionPath::new("pair", 0, vec![ins("nop"), ins(prev), ins(cur), ins("nop")]);
    let traces = capture_set(
        &path,
        &EmissionConfig {
            drift_max: 0,
            ..config.clone()
        },
        200,
    )
    .unwrap();
    let start = 2 * config.samples_per_cycle;
    traces
        .iter()
        .map(|t| {
            t.samples[start..start + config.samples_per_cycle]
                .iter()
                .cloned()
                .fold(f64::MIN, f64::max)
        })
        .sum::<f64>()
        / traces.len() as f64
}

#[test]
fn influence_of_class_is_visible() {
    // `ldi` after the io op `sbi` versus after the arithmetic op `add`.
    let config = EmissionConfig::default();
    let cat = Catalog::avr_default();
    let ins = |m: &str| cat.instruction(m, Vec::<String>::new()).unwrap();
    let base = config.base_amplitude["ldi"];
    let gap = base
        * (config.influence_factor(ins("sbi").op_class, ins("ldi").op_class)
            - config.influence_factor(ins("add").op_class, ins("ldi").op_class))
        .abs();
    let spread =
        base * 1.12 * 2.0 * config.influence_spread["sbi"].max(config.influence_spread["add"]);
    let observed =
        (mean_block_peak("sbi", "ldi", &config) - mean_block_peak("add", "ldi", &config)).abs();
    assert!(
        observed >= gap - spread - 3.0 * config.noise_sigma,
        "{observed} vs gap {gap}"
    );
    assert!(observed > 0.05);
}

#[test]
fn same_class_predecessors_are_close() {
    // `eor` after `add` versus after `sub`: both arithmetic.
    let config = EmissionConfig::default();
    let base = config.base_amplitude["eor"] * 0.92;
    let bound = base * 2.0 * config.influence_spread["add"].max(config.influence_spread["sub"]);
    let observed =
        (mean_block_peak("add", "eor", &config) - mean_block_peak("sub", "eor", &config)).abs();
    // sampling error of two 200-capture means
    let slack = 4.0 * config.noise_sigma / (200f64).sqrt();
    assert!(observed <= bound + slack, "{observed} > {bound}");
}

#[test]
fn emit_is_bit_reproducible() {
    let cat = Catalog::avr_default();
    let p = corpus::path(Class::MaliciousHard, &cat);
    let config = EmissionConfig::default();
    let a = emit(&p, &config, 42).unwrap();
    let b = emit(&p, &config, 42).unwrap();
    let bits = |t: &emsynth::sim::Trace| t.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn peak_preprocessing_tolerates_half_cycle_shift() {
    let cat = Catalog::avr_default();
    let p = corpus::path(Class::B, &cat);
    let config = EmissionConfig::noiseless();
    let spc = config.samples_per_cycle;
    let base = emit(&p, &config, 0).unwrap();
    let cycles = p.cycles() as usize;
    let argmax = |s: &[f64]| {
        s.iter()
            .enumerate()
            .fold(
                (0, f64::MIN),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            )
            .0
    };
    for shift in 0..=spc / 2 {
        let mut shifted = base.clone();
        shifted.samples.rotate_right(shift);
        let pv0 = preprocess(&base, cycles, spc);
        let pv1 = preprocess(&shifted, cycles, spc);
        let mut stable = 0;
        for c in 0..cycles {
            let w0 = &base.samples[c * spc..(c + 1) * spc];
            // the cycle's own peak sample is still inside its window
            if argmax(w0) + shift < spc {
                stable += 1;
            }
            assert!(pv1.peaks[c] >= pv0.peaks[c] - 1e-12);
        }
        assert!(
            stable as f64 >= 0.95 * cycles as f64,
            "shift {shift}: {stable}/{cycles}"
        );
    }
}

#[test]
fn voting_accepts_trace_alien_to_one_path() {
    let cat = Catalog::avr_default();
    let config = EmissionConfig::default();
    let a = capture_set(
        &corpus::path(Class::A, &cat),
        &config.clone().with_seed(1),
        120,
    )
    .unwrap();
    let b = capture_set(
        &corpus::path(Class::B, &cat),
        &config.clone().with_seed(2),
        130,
    )
    .unwrap();
    let det = Detector::fit(
        &[
            PathTraces {
                path_id: 0,
                path_cycles: 20,
                samples_per_cycle: 31,
                traces: &a,
                source: "a",
            },
            PathTraces {
                path_id: 1,
                path_cycles: 20,
                samples_per_cycle: 31,
                traces: &b[..100],
                source: "b",
            },
        ],
        10,
        PValueMode::Standard,
    )
    .unwrap();
    let mut normal = 0;
    for t in &b[100..] {
        let v = det.verdict(t, 0.02).unwrap();
        assert!(
            v.votes[0].p_value <= 1.0 / 121.0 + 1e-12,
            "B trace should be alien to A"
        );
        if v.status == Status::Normal {
            normal += 1;
        }
    }
    assert!(normal >= 27, "{normal}/30");
}

#[test]
fn roc_from_detector_scores_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scores: Vec<(f64, bool)> = (0..300)
        .map(|i| {
            let anomalous = i % 3 == 0;
            let p: f64 = rand::Rng::random_range(&mut rng, 0.0..1.0);
            ((if anomalous { p * 0.3 } else { p }), anomalous)
        })
        .collect();
    let roc = roc_curve(&scores, &tau_grid(0.001));
    for w in roc.windows(2) {
        assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
    }
    let a = auc(&roc);
    assert!(a > 0.5 && a <= 1.0);
}
