//! Runs both detection experiments and the similarity study on the default
//! simulator and prints a summary table.
//!
//!     cargo run --release -p emsynth --example reproduce [config.json]

use std::time::Instant;

use emsynth::eval::{
    run_experiment, similarity_study, AnomalyCase, Dataset, Experiment, ExperimentParams,
    DEFAULT_NEIGHBORS,
};
use emsynth::isa::Catalog;
use emsynth::sim::EmissionConfig;

fn main() -> emsynth::Result<()> {
    let config = match std::env::args().nth(1) {
        Some(path) => {
            EmissionConfig::from_json(&std::fs::read_to_string(path).expect("read config"))?
        }
        None => EmissionConfig::default(),
    };
    let start = Instant::now();
    let data = Dataset::generate(&config, &Catalog::avr_default(), 1000, 1000)?;
    println!("corpus generated in {:.1?}", start.elapsed());

    let params = ExperimentParams::default();
    println!(
        "{:<18} {:<5} {:>6} {:>6} {:>6} {:>9}",
        "experiment", "case", "AUC", "ACC", "F1", "max FPR"
    );
    for experiment in [Experiment::RealTrained, Experiment::SyntheticTrained] {
        for case in [AnomalyCase::Easy, AnomalyCase::Hard] {
            let r = run_experiment(&data, experiment, case, &params)?;
            let fpr = r
                .per_fold
                .iter()
                .map(|f| f.benign_fpr_at_best_tau)
                .fold(0.0, f64::max);
            println!(
                "{:<18} {:<5} {:>6.3} {:>6.3} {:>6.3} {:>9.3}",
                experiment.to_string(),
                case.to_string(),
                r.averages.auc,
                r.averages.acc,
                r.averages.f1,
                fpr
            );
        }
    }

    let synthetic = data.peaks_b(&data.synthetic_b);
    let sets = vec![
        ("program_a".to_string(), data.peaks_b(&data.a)),
        ("program_b".to_string(), data.peaks_b(&data.b)),
        ("malicious_easy".to_string(), data.peaks_b(&data.easy)),
        ("malicious_hard".to_string(), data.peaks_b(&data.hard)),
    ];
    for r in similarity_study(&synthetic, &sets, DEFAULT_NEIGHBORS)? {
        println!(
            "NED synthetic_b vs {:<15} mean {:.4} median {:.4}",
            r.set, r.summary.mean, r.summary.median
        );
    }
    println!("total {:.1?}", start.elapsed());
    Ok(())
}
